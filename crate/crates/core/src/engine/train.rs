use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    add, chamfer_distance_metric, deformation_magnitude, tre, Compartment, PointFilter, PointSet,
};
use crate::network::{init_model, predict_displacements_at, predict_points, RegModel};
use crate::Vec3;

use super::loss::{assemble_loss_with, run_pair};
use super::{
    EngineError, LossBreakdown, LossConfig, Optimizer, PairExtras, RegistrationResult, TrainConfig,
};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "ELASTOREG_THREADS";

/// Worker-thread count: `ELASTOREG_THREADS` when set to a positive integer,
/// otherwise the number of available cores.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Registration quality for one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Chamfer distance after registration (mm).
    pub cd: f64,
    /// Chamfer distance of the unregistered pair (mm).
    pub cd_before: f64,
    pub dm_rigid: f64,
    pub dm_soft: f64,
    pub dm_ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tre: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tre_before: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rmse: Option<f64>,
    /// Loss on the pair at the reported parameters.
    pub pair_loss: LossBreakdown,
    /// Loss on the pair under the identity warp.
    pub pair_loss_identity: LossBreakdown,
}

fn compartment_dm(source: &PointSet, warped: &[Vec3], c: Compartment) -> Result<f64, EngineError> {
    let filter = PointFilter {
        region: None,
        compartment: Some(c),
    };
    Ok(deformation_magnitude(source, warped, filter)?)
}

/// Forward pass, pair loss and metrics for the given parameters.
pub fn evaluate_metrics(
    model: &RegModel,
    source: &PointSet,
    target: &PointSet,
    config: &LossConfig,
    extras: &PairExtras<'_>,
) -> Result<(Metrics, Vec<Vec3>), EngineError> {
    let out = predict_points(model, &source.points, &target.points, config.pde.any())?;
    let supervision = extras.supervision()?;
    let pair_loss = assemble_loss_with(&out, source, target, config, supervision)?;
    let identity = crate::network::HeadOutput {
        displacements: vec![[0.0; 3]; source.len()],
        stresses: vec![[0.0; 6]; source.len()],
        gradients: Some(crate::elasticity::SpatialGradients {
            disp_grad: vec![[[0.0; 3]; 3]; source.len()],
            stress_grad: vec![[[0.0; 3]; 6]; source.len()],
        }),
    };
    let pair_loss_identity = assemble_loss_with(&identity, source, target, config, supervision)?;

    let disp = out.displacements;
    let warped: Vec<Vec3> = source
        .points
        .iter()
        .zip(&disp)
        .map(|(&p, &d)| add(p, d))
        .collect();
    let dm_rigid = compartment_dm(source, &warped, Compartment::Rigid)?;
    let dm_soft = compartment_dm(source, &warped, Compartment::Soft)?;
    let (tre_after, tre_before) = if extras.landmarks.is_empty() {
        (None, None)
    } else {
        let moved = extras
            .landmarks
            .iter()
            .map(|l| {
                predict_displacements_at(model, &source.points, &target.points, &l.source_cluster)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let still: Vec<Vec<Vec3>> = extras
            .landmarks
            .iter()
            .map(|l| vec![[0.0; 3]; l.source_cluster.len()])
            .collect();
        (
            Some(tre(extras.landmarks, &moved)?),
            Some(tre(extras.landmarks, &still)?),
        )
    };
    let rmse = extras
        .truth
        .map(|t| crate::geometry::rmse(&disp, t))
        .transpose()?;
    let metrics = Metrics {
        cd: chamfer_distance_metric(&warped, &target.points)?,
        cd_before: chamfer_distance_metric(&source.points, &target.points)?,
        dm_rigid,
        dm_soft,
        dm_ratio: dm_rigid / dm_soft,
        tre: tre_after,
        tre_before,
        rmse,
        pair_loss,
        pair_loss_identity,
    };
    Ok((metrics, disp))
}

fn result_for(
    model: &RegModel,
    source: &PointSet,
    target: &PointSet,
    config: &LossConfig,
    extras: &PairExtras<'_>,
    loss_history: Vec<LossBreakdown>,
) -> Result<RegistrationResult, EngineError> {
    let (metrics, disp) = evaluate_metrics(model, source, target, config, extras)?;
    let warped = source
        .points
        .iter()
        .zip(&disp)
        .map(|(&p, &d)| add(p, d))
        .collect();
    Ok(RegistrationResult {
        warped_points: source.with_points(warped)?,
        displacement_field: disp,
        loss_history,
        metrics,
    })
}

fn at_step(e: EngineError, step: usize) -> EngineError {
    match e {
        EngineError::NonFinite { terms, .. } => EngineError::NonFinite { step, terms },
        other => other,
    }
}

fn fresh_model(config: &TrainConfig) -> Result<RegModel, EngineError> {
    let mut model = init_model(config.seed, &config.arch)?;
    if config.zero_init_heads {
        model.zero_heads();
    }
    Ok(model)
}

/// Patient-specific optimisation from a freshly seeded model.
pub fn train_single_pair(
    source: &PointSet,
    target: &PointSet,
    config: &TrainConfig,
    extras: &PairExtras<'_>,
) -> Result<RegistrationResult, EngineError> {
    config.validate()?;
    let model = fresh_model(config)?;
    Ok(train_from_model(model, source, target, config, extras)?.1)
}

/// Runs `config.steps` optimiser steps starting from `model`, with fresh
/// optimiser state. Returns the updated model and the registration result.
pub fn train_from_model(
    mut model: RegModel,
    source: &PointSet,
    target: &PointSet,
    config: &TrainConfig,
    extras: &PairExtras<'_>,
) -> Result<(RegModel, RegistrationResult), EngineError> {
    config.validate()?;
    if model.arch != config.arch {
        return Err(EngineError::Config(
            "model architecture differs from the configured one".into(),
        ));
    }
    let lc = config.loss_config();
    let mut opt = Optimizer::new(config.optimizer, &model.params);
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (terms, grads) =
            run_pair(&model, source, target, &lc, extras, true).map_err(|e| at_step(e, step))?;
        let grads = match grads {
            Some(g) if terms.is_finite() => g,
            _ => return Err(EngineError::NonFinite { step, terms }),
        };
        history.push(terms);
        opt.apply(&mut model.params, &grads);
    }
    let result = result_for(&model, source, target, &lc, extras, history)?;
    if !result.metrics.pair_loss.is_finite() {
        return Err(EngineError::NonFinite {
            step: config.steps,
            terms: result.metrics.pair_loss,
        });
    }
    Ok((model, result))
}

/// Single forward pass; the model is not modified.
pub fn register(
    model: &RegModel,
    source: &PointSet,
    target: &PointSet,
    config: &LossConfig,
    extras: &PairExtras<'_>,
) -> Result<RegistrationResult, EngineError> {
    result_for(model, source, target, config, extras, Vec::new())
}

/// Mean per-subject loss observed during one population epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct PopulationResult {
    pub model: RegModel,
    pub epochs: Vec<EpochRecord>,
}

/// Amortised training of one model over many subject pairs. Each epoch visits
/// every subject once in a seeded random order, `subjects_per_step` at a time;
/// gradients within a step are averaged.
pub fn train_population(
    subjects: &[(PointSet, PointSet)],
    config: &TrainConfig,
) -> Result<PopulationResult, EngineError> {
    config.validate()?;
    if subjects.len() < 2 {
        return Err(EngineError::Argument(format!(
            "population training needs at least 2 subjects, got {}",
            subjects.len()
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| EngineError::Config(e.to_string()))?;
    let lc = config.loss_config();
    let extras = PairExtras::default();
    let mut model = fresh_model(config)?;
    let mut opt = Optimizer::new(config.optimizer, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..subjects.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut seen = Vec::with_capacity(subjects.len());
        for batch in order.chunks(config.subjects_per_step) {
            let results: Vec<_> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&k| run_pair(&model, &subjects[k].0, &subjects[k].1, &lc, &extras, true))
                    .collect()
            });
            let mut total = model.params.zeros_like();
            for r in results {
                let (terms, grads) = r.map_err(|e| at_step(e, step))?;
                let grads = match grads {
                    Some(g) if terms.is_finite() => g,
                    _ => return Err(EngineError::NonFinite { step, terms }),
                };
                total.accumulate(&grads);
                seen.push(terms);
            }
            total.scale(1.0 / batch.len() as f64);
            opt.apply(&mut model.params, &total);
            step += 1;
        }
        epochs.push(EpochRecord {
            epoch,
            mean_loss: LossBreakdown::mean(&seen),
        });
    }
    Ok(PopulationResult { model, epochs })
}
