use ndarray::Array2;

use crate::autodiff::{Gradients, Tape, TANGENTS};
use crate::elasticity::{
    f1_equilibrium, f1_equilibrium_grad, f2_constitutive, f2_constitutive_grad, f3_energy,
    f3_energy_grad, strain_from_grad, strain_from_grad_vjp, DispGrad, MaterialField, StressGrad,
    VoigtTensor6,
};
use crate::geometry::{add, chamfer_match, sub, PointFilter, PointSet, Region};
use crate::network::{record_forward, HeadOutput, Normalizer, RegModel};
use crate::Vec3;

use super::{ChamferSubset, EngineError, LossBreakdown, LossConfig, PairExtras};

/// Derivatives of one loss term with respect to the physical head outputs.
#[derive(Debug, Clone)]
struct FieldGrads {
    disp: Vec<Vec3>,
    disp_grad: Vec<DispGrad>,
    stress: Vec<[f64; 6]>,
    stress_grad: Vec<StressGrad>,
}

impl FieldGrads {
    fn scale(&mut self, w: f64) {
        let flat = self.disp.iter_mut().flatten();
        let flat = flat.chain(self.disp_grad.iter_mut().flatten().flatten());
        let flat = flat.chain(self.stress.iter_mut().flatten());
        for v in flat.chain(self.stress_grad.iter_mut().flatten().flatten()) {
            *v *= w;
        }
    }

    fn zeros(n: usize) -> Self {
        Self {
            disp: vec![[0.0; 3]; n],
            disp_grad: vec![[[0.0; 3]; 3]; n],
            stress: vec![[0.0; 6]; n],
            stress_grad: vec![[[0.0; 3]; 6]; n],
        }
    }
}

struct Evaluation {
    terms: [f64; 4],
    grads: Option<[FieldGrads; 4]>,
}

fn subset_filter(subset: ChamferSubset) -> PointFilter {
    match subset {
        ChamferSubset::All => PointFilter::ALL,
        ChamferSubset::Surface => PointFilter::region(Region::Surface),
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn evaluate(
    out: &HeadOutput,
    source: &PointSet,
    target: &PointSet,
    material: &MaterialField,
    cfg: &LossConfig,
    supervision: Option<&[Vec3]>,
    want_grads: bool,
) -> Result<Evaluation, EngineError> {
    let n = source.len();
    if out.len() != n || out.stresses.len() != n {
        return Err(EngineError::Argument(format!(
            "network output has {} rows for {} source points",
            out.len(),
            n
        )));
    }
    if material.len() != n {
        return Err(EngineError::Argument(format!(
            "material field has {} entries for {} source points",
            material.len(),
            n
        )));
    }
    if out.displacements.iter().flatten().any(|v| !v.is_finite()) {
        let nan = f64::NAN;
        return Err(EngineError::NonFinite {
            step: 0,
            terms: LossBreakdown::new(cfg.weight_w, nan, nan, nan, nan),
        });
    }
    let mut grads = want_grads.then(|| std::array::from_fn::<_, 4, _>(|_| FieldGrads::zeros(n)));

    // Alignment term.
    let l_r = match supervision {
        Some(gt) => {
            if gt.len() != n {
                return Err(EngineError::Argument(format!(
                    "{} ground-truth displacements for {} source points",
                    gt.len(),
                    n
                )));
            }
            if let Some(g) = grads.as_mut() {
                for i in 0..n {
                    let e = sub(out.displacements[i], gt[i]);
                    g[0].disp[i] = e.map(|v| 2.0 * v);
                }
            }
            supervised_loss(out, gt)?
        }
        None => {
            let filter = subset_filter(cfg.chamfer_subset);
            let src_idx = source.indices(filter);
            let tgt = target.subset(filter);
            let warped: Vec<Vec3> = src_idx
                .iter()
                .map(|&i| add(source.points[i], out.displacements[i]))
                .collect();
            let m = chamfer_match(&warped, &tgt)?;
            let matched = |pairs: &[(usize, f64)]| pairs.iter().all(|&(j, _)| j != usize::MAX);
            if !(matched(&m.warped_to_target) && matched(&m.target_to_warped)) {
                let nan = f64::NAN;
                return Err(EngineError::NonFinite {
                    step: 0,
                    terms: LossBreakdown::new(cfg.weight_w, f64::INFINITY, nan, nan, nan),
                });
            }
            if let Some(g) = grads.as_mut() {
                let (nw, nt) = (warped.len() as f64, tgt.len() as f64);
                for (k, &(j, _)) in m.warped_to_target.iter().enumerate() {
                    let e = sub(warped[k], tgt[j]);
                    let d = &mut g[0].disp[src_idx[k]];
                    for a in 0..3 {
                        d[a] += 2.0 * e[a] / nw;
                    }
                }
                for (t, &(k, _)) in m.target_to_warped.iter().enumerate() {
                    let e = sub(warped[k], tgt[t]);
                    let d = &mut g[0].disp[src_idx[k]];
                    for a in 0..3 {
                        d[a] += 2.0 * e[a] / nt;
                    }
                }
            }
            m.loss()
        }
    };

    let (mut l_s, mut l_c, mut l_e) = (0.0, 0.0, 0.0);
    if cfg.pde.any() {
        let sg = out
            .gradients
            .as_ref()
            .ok_or(EngineError::MissingGradients)?;
        if sg.disp_grad.len() != n || sg.stress_grad.len() != n {
            return Err(EngineError::MissingGradients);
        }
        for i in 0..n {
            let strain = strain_from_grad(&sg.disp_grad[i]);
            let stress = VoigtTensor6::stress(out.stresses[i]);
            let (lam, mu) = (material.lame_lambda[i], material.lame_mu[i]);
            if cfg.pde.equilibrium > 0.0 {
                l_s += f1_equilibrium(&sg.stress_grad[i]);
                if let Some(g) = grads.as_mut() {
                    g[1].stress_grad[i] = f1_equilibrium_grad(&sg.stress_grad[i]);
                }
            }
            if cfg.pde.constitutive > 0.0 {
                l_c += f2_constitutive(&strain, &stress, lam, mu);
                if let Some(g) = grads.as_mut() {
                    let (de, ds) = f2_constitutive_grad(&strain, &stress, lam, mu);
                    g[2].disp_grad[i] = strain_from_grad_vjp(&de);
                    g[2].stress[i] = ds;
                }
            }
            if cfg.pde.energy > 0.0 {
                let f3 = f3_energy(&strain, &stress);
                l_e += f3.abs();
                if let Some(g) = grads.as_mut() {
                    let s = sign(f3);
                    let (de, ds) = f3_energy_grad(&strain, &stress);
                    g[3].disp_grad[i] = strain_from_grad_vjp(&de.map(|v| s * v));
                    g[3].stress[i] = ds.map(|v| s * v);
                }
            }
        }
        let weights = [cfg.pde.equilibrium, cfg.pde.constitutive, cfg.pde.energy];
        for (term, wt) in [&mut l_s, &mut l_c, &mut l_e].into_iter().zip(weights) {
            *term *= wt;
        }
        if let Some(g) = grads.as_mut() {
            for (field, wt) in g[1..].iter_mut().zip(weights) {
                if wt != 1.0 {
                    field.scale(wt);
                }
            }
        }
    }
    Ok(Evaluation {
        terms: [l_r, l_s, l_c, l_e],
        grads,
    })
}

/// Loss terms for a network output on one pair, with the Chamfer alignment term.
pub fn assemble_loss(
    output: &HeadOutput,
    source: &PointSet,
    target: &PointSet,
    material: &MaterialField,
    config: &LossConfig,
) -> Result<LossBreakdown, EngineError> {
    let e = evaluate(output, source, target, material, config, None, false)?;
    let [l_r, l_s, l_c, l_e] = e.terms;
    Ok(LossBreakdown::new(config.weight_w, l_r, l_s, l_c, l_e))
}

/// As [`assemble_loss`], with the material taken from the source compartments
/// and an optional supervised alignment term.
pub(crate) fn assemble_loss_with(
    output: &HeadOutput,
    source: &PointSet,
    target: &PointSet,
    config: &LossConfig,
    supervision: Option<&[Vec3]>,
) -> Result<LossBreakdown, EngineError> {
    let material = material_for(source, config)?;
    let e = evaluate(
        output,
        source,
        target,
        &material,
        config,
        supervision,
        false,
    )?;
    let [l_r, l_s, l_c, l_e] = e.terms;
    Ok(LossBreakdown::new(config.weight_w, l_r, l_s, l_c, l_e))
}

/// `Σ_s ‖d_s − d_s^gt‖²` (mm²).
pub fn supervised_loss(output: &HeadOutput, ground_truth: &[Vec3]) -> Result<f64, EngineError> {
    if output.len() != ground_truth.len() {
        return Err(EngineError::Argument(format!(
            "{} predictions vs {} ground-truth displacements",
            output.len(),
            ground_truth.len()
        )));
    }
    Ok(output
        .displacements
        .iter()
        .zip(ground_truth)
        .map(|(&d, &g)| {
            let e = sub(d, g);
            e[0] * e[0] + e[1] * e[1] + e[2] * e[2]
        })
        .sum())
}

/// Maps physical-unit derivatives onto the stacked head nodes.
fn to_stacked(g: &FieldGrads, n: usize, tangents: bool, scale: f64) -> [Array2<f64>; 2] {
    let blocks = if tangents { 1 + TANGENTS } else { 1 };
    let mut d = Array2::zeros((n * blocks, 3));
    let mut s = Array2::zeros((n * blocks, 6));
    for i in 0..n {
        for a in 0..3 {
            d[[i, a]] = g.disp[i][a] / scale;
        }
        for r in 0..6 {
            s[[i, r]] = g.stress[i][r];
        }
    }
    if tangents {
        for k in 0..TANGENTS {
            let row0 = n * (1 + k);
            for i in 0..n {
                for a in 0..3 {
                    d[[row0 + i, a]] = g.disp_grad[i][a][k];
                }
                for r in 0..6 {
                    s[[row0 + i, r]] = g.stress_grad[i][r][k] * scale;
                }
            }
        }
    }
    [d, s]
}

fn material_for(source: &PointSet, cfg: &LossConfig) -> Result<MaterialField, EngineError> {
    Ok(MaterialField::from_compartments(
        &source.compartment,
        &cfg.material,
    )?)
}

/// Loss at the model's current parameters plus its parameter gradients.
pub fn pair_loss_and_gradients(
    model: &RegModel,
    source: &PointSet,
    target: &PointSet,
    config: &LossConfig,
    extras: &PairExtras<'_>,
) -> Result<(LossBreakdown, Gradients), EngineError> {
    match run_pair(model, source, target, config, extras, true)? {
        (b, Some(g)) => Ok((b, g)),
        (terms, None) => Err(EngineError::NonFinite { step: 0, terms }),
    }
}

/// Loss at the model's current parameters, without a backward pass.
pub fn pair_loss(
    model: &RegModel,
    source: &PointSet,
    target: &PointSet,
    config: &LossConfig,
    extras: &PairExtras<'_>,
) -> Result<LossBreakdown, EngineError> {
    Ok(run_pair(model, source, target, config, extras, false)?.0)
}

pub(crate) fn run_pair(
    model: &RegModel,
    source: &PointSet,
    target: &PointSet,
    config: &LossConfig,
    extras: &PairExtras<'_>,
    backward: bool,
) -> Result<(LossBreakdown, Option<Gradients>), EngineError> {
    let material = material_for(source, config)?;
    let supervision = extras.supervision()?;
    let norm = Normalizer::from_source(&source.points, model.arch.coord_scale)?;
    let tangents = config.pde.any();
    let mut tape = Tape::new(&model.params);
    let vars = record_forward(
        model,
        &mut tape,
        &norm,
        &source.points,
        &target.points,
        None,
        tangents,
    )?;
    let out = vars.head_output(&tape, &norm);
    let e = evaluate(
        &out,
        source,
        target,
        &material,
        config,
        supervision,
        backward,
    )?;
    let [l_r, l_s, l_c, l_e] = e.terms;
    let breakdown = LossBreakdown::new(config.weight_w, l_r, l_s, l_c, l_e);
    let Some(grads) = e.grads else {
        return Ok((breakdown, None));
    };
    if !breakdown.is_finite() {
        return Ok((breakdown, None));
    }
    let partials = grads
        .iter()
        .map(|g| to_stacked(g, vars.n, tangents, norm.scale).to_vec())
        .collect();
    let terms = tape.fused(
        "pair_loss",
        &[vars.disp, vars.stress],
        e.terms.to_vec(),
        partials,
    )?;
    let total = tape.weighted_sum(terms, &[config.weight_w, 1.0, 1.0, 1.0])?;
    Ok((breakdown, Some(tape.backward(total)?)))
}
