//! Loss assembly, optimisation and inference.

mod loss;
mod optim;
mod train;

use serde::{Deserialize, Serialize};

use crate::autodiff::AutodiffError;
use crate::elasticity::{ElasticityError, MaterialConfig};
use crate::geometry::{GeometryError, LandmarkPair, PointSet};
use crate::network::{Arch, NetworkError};
use crate::Vec3;

pub use loss::{assemble_loss, pair_loss, pair_loss_and_gradients, supervised_loss};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use train::{
    evaluate_metrics, register, train_from_model, train_population, train_single_pair,
    worker_threads, EpochRecord, Metrics, PopulationResult, THREADS_ENV,
};

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("PDE terms requested but the network output carries no spatial gradients")]
    MissingGradients,
    #[error("non-finite loss at step {step}: l_r={l_r} l_s={l_s} l_c={l_c} l_e={l_e}", l_r = .terms.l_r, l_s = .terms.l_s, l_c = .terms.l_c, l_e = .terms.l_e)]
    NonFinite { step: usize, terms: LossBreakdown },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Elasticity(#[from] ElasticityError),
}

/// The four loss terms and their weighted total at one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// mm² (Chamfer) or mm² summed (supervised)
    pub l_r: f64,
    /// kPa/mm
    pub l_s: f64,
    /// kPa
    pub l_c: f64,
    /// kPa
    pub l_e: f64,
    pub total: f64,
    pub weight_w: f64,
}

impl LossBreakdown {
    pub fn new(weight_w: f64, l_r: f64, l_s: f64, l_c: f64, l_e: f64) -> Self {
        Self {
            l_r,
            l_s,
            l_c,
            l_e,
            total: weight_w * l_r + l_s + l_c + l_e,
            weight_w,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_r, self.l_s, self.l_c, self.l_e, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Term-wise mean, with the total recomputed from the averaged terms.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        let w = items.first().map_or(0.0, |b| b.weight_w);
        Self::new(
            w,
            sum(|b| b.l_r),
            sum(|b| b.l_s),
            sum(|b| b.l_c),
            sum(|b| b.l_e),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChamferSubset {
    #[default]
    All,
    Surface,
}

/// Multipliers on the three PDE residual terms. Reported terms already include
/// their weight, so a zero weight disables the term and reports it as zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdeWeights {
    pub equilibrium: f64,
    pub constitutive: f64,
    pub energy: f64,
}

impl Default for PdeWeights {
    fn default() -> Self {
        Self::ALL
    }
}

impl PdeWeights {
    pub const ALL: Self = Self {
        equilibrium: 1.0,
        constitutive: 1.0,
        energy: 1.0,
    };
    pub const NONE: Self = Self {
        equilibrium: 0.0,
        constitutive: 0.0,
        energy: 0.0,
    };

    pub fn any(&self) -> bool {
        self.equilibrium > 0.0 || self.constitutive > 0.0 || self.energy > 0.0
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let all = [self.equilibrium, self.constitutive, self.energy];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(EngineError::Config(format!(
                "PDE weights must be finite and non-negative, got {all:?}"
            )))
        }
    }
}

/// The subset of [`TrainConfig`] that defines the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub weight_w: f64,
    pub chamfer_subset: ChamferSubset,
    pub pde: PdeWeights,
    pub material: MaterialConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub weight_w: f64,
    pub optimizer: OptimizerConfig,
    /// Single-pair iterations.
    pub steps: usize,
    /// Population passes over all subjects.
    pub epochs: usize,
    /// Subjects per population update; the default of one gives one step per subject.
    pub subjects_per_step: usize,
    pub seed: u64,
    pub chamfer_subset: ChamferSubset,
    pub material: MaterialConfig,
    pub pde: PdeWeights,
    /// Ground-truth displacement CSV; when set, the alignment term becomes the
    /// supervised sum of squared displacement errors.
    pub supervised: Option<String>,
    pub arch: Arch,
    /// Start with zeroed displacement and stress heads (identity warp).
    pub zero_init_heads: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weight_w: 1e3,
            optimizer: OptimizerConfig::default(),
            steps: 3000,
            epochs: 200,
            subjects_per_step: 1,
            seed: 0,
            chamfer_subset: ChamferSubset::All,
            material: MaterialConfig::default(),
            pde: PdeWeights::ALL,
            supervised: None,
            arch: Arch::paper(),
            zero_init_heads: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.weight_w > 0.0 && self.weight_w.is_finite()) {
            return Err(EngineError::Config(format!(
                "weight_w must be positive, got {}",
                self.weight_w
            )));
        }
        if self.steps == 0 {
            return Err(EngineError::Config("steps must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(EngineError::Config("epochs must be at least 1".into()));
        }
        if self.subjects_per_step == 0 {
            return Err(EngineError::Config(
                "subjects_per_step must be at least 1".into(),
            ));
        }
        self.pde.validate()?;
        self.optimizer.validate()?;
        self.material.validate()?;
        self.arch.validate()?;
        Ok(())
    }

    /// Parses a JSON config; missing fields take their defaults and `"arch"`
    /// may name a preset (`"paper"`, `"compact"`, `"micro"`).
    pub fn from_json(text: &str) -> Result<Self, EngineError> {
        let mut value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| EngineError::Config(e.to_string()))?;
        if let Some(arch) = value.get_mut("arch") {
            if let Some(name) = arch.as_str() {
                let preset = Arch::preset(name)
                    .ok_or_else(|| EngineError::Config(format!("unknown architecture `{name}`")))?;
                *arch = serde_json::to_value(preset).expect("architecture serializes");
            }
        }
        serde_json::from_value(value).map_err(|e| EngineError::Config(e.to_string()))
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            weight_w: self.weight_w,
            chamfer_subset: self.chamfer_subset,
            pde: self.pde,
            material: self.material,
        }
    }

    /// The baseline without physics: all three PDE terms switched off.
    pub fn without_pinn(mut self) -> Self {
        self.pde = PdeWeights::NONE;
        self
    }
}

/// Optional per-pair data beyond the two clouds.
#[derive(Debug, Clone, Copy, Default)]
pub struct PairExtras<'a> {
    pub landmarks: &'a [LandmarkPair],
    /// Ground-truth displacements at the source points, for rmse reporting.
    pub truth: Option<&'a [Vec3]>,
    /// Fit `truth` directly instead of the Chamfer term.
    pub supervise: bool,
}

impl<'a> PairExtras<'a> {
    pub(crate) fn supervision(&self) -> Result<Option<&'a [Vec3]>, EngineError> {
        match (self.supervise, self.truth) {
            (false, _) => Ok(None),
            (true, Some(t)) => Ok(Some(t)),
            (true, None) => Err(EngineError::Argument(
                "supervised fit needs ground-truth displacements".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub warped_points: PointSet,
    pub displacement_field: Vec<Vec3>,
    pub loss_history: Vec<LossBreakdown>,
    pub metrics: Metrics,
}
