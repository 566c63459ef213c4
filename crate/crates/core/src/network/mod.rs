//! PointNet-style registration network.
//!
//! Both clouds pass through a shared encoder (4×4 TNet, per-point MLP, max
//! pooling). The two global features are concatenated, repeated for every
//! source point together with that point's coordinates, and fed through a
//! shared trunk into a displacement head and six scalar stress heads.
//!
//! Coordinates enter the network centred on the source centroid and scaled by
//! [`Arch::coord_scale`]. Displacements are returned in millimetres and
//! stresses in kPa; spatial derivatives are with respect to physical
//! coordinates. Pooled global features are held fixed when differentiating
//! with respect to a single point.

mod checkpoint;
mod forward;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape};
use crate::elasticity::SpatialGradients;
use crate::geometry::PointSet;
use crate::Vec3;

pub use checkpoint::{CheckpointError, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub(crate) use forward::{record_forward, Normalizer};

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("empty input cloud: {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Layer widths and input conventions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Arch {
    /// Per-point widths of the TNet before pooling.
    pub tnet_point_widths: Vec<usize>,
    /// Fully connected widths of the TNet after pooling.
    pub tnet_fc_widths: Vec<usize>,
    /// Per-point encoder widths; the last one is the global feature width.
    pub encoder_widths: Vec<usize>,
    /// Shared trunk widths after concatenation, each followed by ReLU.
    pub trunk_widths: Vec<usize>,
    /// Width of the final trunk layer, which has no ReLU.
    pub trunk_linear_width: usize,
    /// Multiplier from millimetres to network units.
    pub coord_scale: f64,
    /// Concatenate TNet-transformed rather than raw source coordinates.
    pub concat_transformed_coords: bool,
}

impl Default for Arch {
    fn default() -> Self {
        Self::paper()
    }
}

impl Arch {
    pub fn paper() -> Self {
        Self {
            tnet_point_widths: vec![64, 128, 1024],
            tnet_fc_widths: vec![512, 256],
            encoder_widths: vec![64, 64, 64, 128, 1024],
            trunk_widths: vec![1024, 512, 256, 128, 64],
            trunk_linear_width: 256,
            coord_scale: 0.01,
            concat_transformed_coords: false,
        }
    }

    /// Same topology with narrow layers, for single-core experiments.
    pub fn compact() -> Self {
        Self {
            tnet_point_widths: vec![16, 32, 64],
            tnet_fc_widths: vec![32, 16],
            encoder_widths: vec![16, 16, 16, 32, 64],
            trunk_widths: vec![64, 64, 64, 32, 32],
            trunk_linear_width: 32,
            coord_scale: 0.01,
            concat_transformed_coords: false,
        }
    }

    /// Minimal widths for derivative checks and exact-fit experiments.
    pub fn micro() -> Self {
        Self {
            tnet_point_widths: vec![8, 8],
            tnet_fc_widths: vec![8],
            encoder_widths: vec![8, 8],
            trunk_widths: vec![16, 16],
            trunk_linear_width: 16,
            coord_scale: 0.01,
            concat_transformed_coords: false,
        }
    }

    /// `"paper"`, `"compact"` or `"micro"`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "compact" => Some(Self::compact()),
            "micro" => Some(Self::micro()),
            _ => None,
        }
    }

    pub fn global_width(&self) -> usize {
        self.encoder_widths.last().copied().unwrap_or(0)
    }

    /// Width of the per-point feature entering the trunk: both global features plus xyz.
    pub fn trunk_input_width(&self) -> usize {
        2 * self.global_width() + 3
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let lists = [
            ("tnet_point_widths", &self.tnet_point_widths),
            ("encoder_widths", &self.encoder_widths),
            ("trunk_widths", &self.trunk_widths),
        ];
        for (name, widths) in lists {
            if widths.is_empty() {
                return Err(NetworkError::Arch(format!("{name} must not be empty")));
            }
        }
        let all = self
            .tnet_point_widths
            .iter()
            .chain(&self.tnet_fc_widths)
            .chain(&self.encoder_widths)
            .chain(&self.trunk_widths);
        if all.chain([&self.trunk_linear_width]).any(|&w| w == 0) {
            return Err(NetworkError::Arch("zero layer width".into()));
        }
        if !(self.coord_scale > 0.0 && self.coord_scale.is_finite()) {
            return Err(NetworkError::Arch(format!(
                "coord_scale must be positive, got {}",
                self.coord_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub tnet_point: Vec<Dense>,
    pub tnet_fc: Vec<Dense>,
    pub tnet_out: Dense,
    pub encoder: Vec<Dense>,
    pub trunk_point_w: ParamId,
    pub trunk_global_w: ParamId,
    pub trunk_first_b: ParamId,
    pub trunk: Vec<Dense>,
    pub trunk_linear: Dense,
    pub disp: Dense,
    pub stress: [Dense; 6],
}

/// What an initializer is asked to produce.
struct SlotSpec<'a> {
    name: &'a str,
    rows: usize,
    cols: usize,
    fan_in: usize,
}

impl Layout {
    /// Registers every slot in checkpoint order, asking `init` for values.
    fn build(
        arch: &Arch,
        store: &mut ParamStore,
        init: &mut dyn FnMut(&SlotSpec) -> Array2<f64>,
    ) -> Self {
        let mut b = Builder { store, init };
        let tnet_point = b.chain("tnet.point", 3, &arch.tnet_point_widths);
        let pooled = *arch.tnet_point_widths.last().unwrap();
        let tnet_fc = b.chain("tnet.fc", pooled, &arch.tnet_fc_widths);
        let fc_out = arch.tnet_fc_widths.last().copied().unwrap_or(pooled);
        let tnet_out = b.dense("tnet.out", fc_out, 12);
        let encoder = b.chain("encoder", 3, &arch.encoder_widths);

        // The first trunk layer is split into its per-point and global columns;
        // both share the fan-in of the full 2G+3 input.
        let first = arch.trunk_widths[0];
        let fan_in = arch.trunk_input_width();
        let trunk_point_w = b.slot("trunk.0.weight_point", first, 3, fan_in);
        let trunk_global_w = b.slot(
            "trunk.0.weight_global",
            first,
            2 * arch.global_width(),
            fan_in,
        );
        let trunk_first_b = b.slot("trunk.0.bias", 1, first, fan_in);
        let mut trunk = Vec::new();
        let mut width = first;
        for (i, &w) in arch.trunk_widths.iter().enumerate().skip(1) {
            trunk.push(b.dense(&format!("trunk.{i}"), width, w));
            width = w;
        }
        let trunk_linear = b.dense("trunk.linear", width, arch.trunk_linear_width);
        let disp = b.dense("disp", arch.trunk_linear_width, 3);
        let stress =
            std::array::from_fn(|k| b.dense(&format!("stress.{k}"), arch.trunk_linear_width, 1));
        Self {
            tnet_point,
            tnet_fc,
            tnet_out,
            encoder,
            trunk_point_w,
            trunk_global_w,
            trunk_first_b,
            trunk,
            trunk_linear,
            disp,
            stress,
        }
    }

    fn heads(&self) -> impl Iterator<Item = Dense> + '_ {
        std::iter::once(self.disp).chain(self.stress.iter().copied())
    }
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    init: &'a mut dyn FnMut(&SlotSpec) -> Array2<f64>,
}

impl Builder<'_> {
    fn slot(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        let value = (self.init)(&SlotSpec {
            name,
            rows,
            cols,
            fan_in,
        });
        self.store.add(name, value)
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, out: usize) -> Dense {
        Dense {
            w: self.slot(&format!("{prefix}.weight"), out, fan_in, fan_in),
            b: self.slot(&format!("{prefix}.bias"), 1, out, fan_in),
        }
    }

    fn chain(&mut self, prefix: &str, input: usize, widths: &[usize]) -> Vec<Dense> {
        let mut fan_in = input;
        widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let d = self.dense(&format!("{prefix}.{i}"), fan_in, w);
                fan_in = w;
                d
            })
            .collect()
    }
}

/// Network parameters plus the architecture that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct RegModel {
    pub arch: Arch,
    pub seed: u64,
    pub params: ParamStore,
    pub(crate) layout: Layout,
}

/// Flattened top three rows of the identity homogeneous transform.
const IDENTITY_3X4: [f64; 12] = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Deterministic initialization: uniform in `±√(1/fan_in)`, except the TNet
/// output layer, which starts at the identity transform.
pub fn init_model(seed: u64, arch: &Arch) -> Result<RegModel, NetworkError> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layout = Layout::build(arch, &mut store, &mut |spec| {
        if spec.name == "tnet.out.weight" {
            return Array2::zeros((spec.rows, spec.cols));
        }
        if spec.name == "tnet.out.bias" {
            return Array2::from_shape_vec((1, 12), IDENTITY_3X4.to_vec()).unwrap();
        }
        let bound = (1.0 / spec.fan_in as f64).sqrt();
        Array2::from_shape_simple_fn((spec.rows, spec.cols), || rng.random_range(-bound..=bound))
    });
    Ok(RegModel {
        arch: arch.clone(),
        seed,
        params: store,
        layout,
    })
}

impl RegModel {
    /// Zeroes the displacement and stress heads, so the model predicts the
    /// identity warp with zero stress everywhere.
    pub fn zero_heads(&mut self) {
        let heads: Vec<Dense> = self.layout.heads().collect();
        for d in heads {
            self.params.get_mut(d.w).fill(0.0);
            self.params.get_mut(d.b).fill(0.0);
        }
    }

    pub fn with_zero_heads(mut self) -> Self {
        self.zero_heads();
        self
    }

    /// Fresh all-zero store with this model's layout, used when loading.
    fn empty_like(arch: &Arch, seed: u64) -> Result<Self, NetworkError> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let layout = Layout::build(arch, &mut store, &mut |s| Array2::zeros((s.rows, s.cols)));
        Ok(Self {
            arch: arch.clone(),
            seed,
            params: store,
            layout,
        })
    }
}

/// Network predictions for every source point, row-aligned with the source.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// mm
    pub displacements: Vec<Vec3>,
    /// kPa, Voigt order
    pub stresses: Vec<[f64; 6]>,
    pub gradients: Option<SpatialGradients>,
}

impl HeadOutput {
    pub fn len(&self) -> usize {
        self.displacements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.displacements.is_empty()
    }
}

pub fn predict(
    model: &RegModel,
    source: &PointSet,
    target: &PointSet,
    want_gradients: bool,
) -> Result<HeadOutput, NetworkError> {
    predict_points(model, &source.points, &target.points, want_gradients)
}

/// [`predict`] over bare coordinate lists.
pub fn predict_points(
    model: &RegModel,
    source: &[Vec3],
    target: &[Vec3],
    want_gradients: bool,
) -> Result<HeadOutput, NetworkError> {
    let norm = Normalizer::from_source(source, model.arch.coord_scale)?;
    let mut tape = Tape::new(&model.params);
    let vars = record_forward(
        model,
        &mut tape,
        &norm,
        source,
        target,
        None,
        want_gradients,
    )?;
    Ok(vars.head_output(&tape, &norm))
}

/// Head outputs at arbitrary query points, using the global features of the
/// given source/target pair. With `want_gradients`, derivatives are taken with
/// respect to the query point only.
pub fn predict_at(
    model: &RegModel,
    source: &[Vec3],
    target: &[Vec3],
    query: &[Vec3],
    want_gradients: bool,
) -> Result<HeadOutput, NetworkError> {
    if query.is_empty() {
        return Err(NetworkError::Empty("query"));
    }
    let norm = Normalizer::from_source(source, model.arch.coord_scale)?;
    let mut tape = Tape::new(&model.params);
    let vars = record_forward(
        model,
        &mut tape,
        &norm,
        source,
        target,
        Some(query),
        want_gradients,
    )?;
    Ok(vars.head_output(&tape, &norm))
}

/// Displacements (mm) at arbitrary query points; used to carry landmarks
/// through the warp.
pub fn predict_displacements_at(
    model: &RegModel,
    source: &[Vec3],
    target: &[Vec3],
    query: &[Vec3],
) -> Result<Vec<Vec3>, NetworkError> {
    if query.is_empty() {
        return Ok(Vec::new());
    }
    Ok(predict_at(model, source, target, query, false)?.displacements)
}

/// TNet transform predicted for `points`, given in network units.
pub fn tnet4(model: &RegModel, points: &[Vec3]) -> Result<[[f64; 4]; 4], NetworkError> {
    if points.is_empty() {
        return Err(NetworkError::Empty("tnet input"));
    }
    let mut tape = Tape::new(&model.params);
    let m = forward::record_tnet(model, &mut tape, &forward::to_array(points))?;
    let v = tape.value(m);
    let mut out = [[0.0; 4]; 4];
    for r in 0..3 {
        for c in 0..4 {
            out[r][c] = v[[0, r * 4 + c]];
        }
    }
    out[3] = [0.0, 0.0, 0.0, 1.0];
    Ok(out)
}

/// Max-pooled global feature of `points`, given in network units.
pub fn encode(model: &RegModel, points: &[Vec3]) -> Result<Vec<f64>, NetworkError> {
    if points.is_empty() {
        return Err(NetworkError::Empty("encoder input"));
    }
    let mut tape = Tape::new(&model.params);
    let (g, _) = forward::record_encode(model, &mut tape, &forward::to_array(points))?;
    Ok(tape.value(g).iter().copied().collect())
}

/// Per-point encoder features before pooling (network units in, one row per point out).
pub fn point_features(model: &RegModel, points: &[Vec3]) -> Result<Array2<f64>, NetworkError> {
    let mut tape = Tape::new(&model.params);
    let h = forward::record_point_features(model, &mut tape, &forward::to_array(points))?;
    Ok(tape.value(h).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_arch_widths() {
        let a = Arch::paper();
        assert_eq!(a.global_width(), 1024);
        assert_eq!(a.trunk_input_width(), 2051);
    }

    #[test]
    fn default_model_trunk_input_is_2051_wide() {
        let m = init_model(0, &Arch::paper()).unwrap();
        let wp = m.params.get(m.layout.trunk_point_w);
        let wg = m.params.get(m.layout.trunk_global_w);
        assert_eq!(wp.ncols() + wg.ncols(), 2051);
        assert_eq!(wp.nrows(), 1024);
        assert_eq!(m.params.get(m.layout.disp.w).dim(), (3, 256));
        for d in &m.layout.stress {
            assert_eq!(m.params.get(d.w).dim(), (1, 256));
        }
    }

    #[test]
    fn seeding_is_deterministic() {
        let a = init_model(3, &Arch::compact()).unwrap();
        let b = init_model(3, &Arch::compact()).unwrap();
        let c = init_model(4, &Arch::compact()).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let m = init_model(1, &Arch::compact()).unwrap();
        for slot in m.params.slots() {
            if slot.name.starts_with("tnet.out") {
                continue;
            }
            let fan_in = if slot.name.starts_with("trunk.0.") {
                m.arch.trunk_input_width()
            } else if slot.name.ends_with(".bias") {
                continue;
            } else {
                slot.value.ncols()
            };
            let bound = (1.0 / fan_in as f64).sqrt();
            assert!(slot.value.iter().all(|v| v.abs() <= bound), "{}", slot.name);
        }
    }

    #[test]
    fn invalid_arch_is_rejected() {
        let mut a = Arch::compact();
        a.trunk_widths.clear();
        assert!(init_model(0, &a).is_err());
        let mut a = Arch::compact();
        a.coord_scale = 0.0;
        assert!(init_model(0, &a).is_err());
    }

    #[test]
    fn arch_json_defaults_to_paper() {
        let a: Arch = serde_json::from_str("{}").unwrap();
        assert_eq!(a, Arch::paper());
    }
}
