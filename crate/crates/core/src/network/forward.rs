use ndarray::Array2;

use crate::autodiff::{DualBatch, Tape, Var, TANGENTS};
use crate::elasticity::SpatialGradients;
use crate::geometry::centroid;
use crate::Vec3;

use super::{Dense, HeadOutput, NetworkError, RegModel};

/// Maps millimetre coordinates to network units: `(p − c)·scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Normalizer {
    pub center: Vec3,
    pub scale: f64,
}

impl Normalizer {
    pub fn from_source(source: &[Vec3], scale: f64) -> Result<Self, NetworkError> {
        if source.is_empty() {
            return Err(NetworkError::Empty("source"));
        }
        Ok(Self {
            center: centroid(source),
            scale,
        })
    }

    pub fn apply(&self, points: &[Vec3]) -> Array2<f64> {
        let mut a = Array2::zeros((points.len(), 3));
        for (i, p) in points.iter().enumerate() {
            for k in 0..3 {
                a[[i, k]] = (p[k] - self.center[k]) * self.scale;
            }
        }
        a
    }
}

pub(crate) fn to_array(points: &[Vec3]) -> Array2<f64> {
    let mut a = Array2::zeros((points.len(), 3));
    for (i, p) in points.iter().enumerate() {
        for k in 0..3 {
            a[[i, k]] = p[k];
        }
    }
    a
}

/// Head nodes on a tape. Values are in network units; when `tangents` is set
/// both nodes are stacked dual batches carrying `∂/∂p_net`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ForwardVars {
    pub disp: Var,
    pub stress: Var,
    pub n: usize,
    pub tangents: bool,
}

impl ForwardVars {
    /// Converts head nodes to physical units. Displacements are divided by the
    /// coordinate scale, so their spatial Jacobian needs no correction; stress
    /// Jacobians pick up one factor of the scale.
    pub fn head_output(&self, tape: &Tape<'_>, norm: &Normalizer) -> HeadOutput {
        let d = tape.value(self.disp);
        let s = tape.value(self.stress);
        let n = self.n;
        let inv = 1.0 / norm.scale;
        let displacements = (0..n)
            .map(|i| [d[[i, 0]] * inv, d[[i, 1]] * inv, d[[i, 2]] * inv])
            .collect();
        let stresses = (0..n).map(|i| std::array::from_fn(|r| s[[i, r]])).collect();
        let gradients = self.tangents.then(|| {
            let mut g = SpatialGradients {
                disp_grad: vec![[[0.0; 3]; 3]; n],
                stress_grad: vec![[[0.0; 3]; 6]; n],
            };
            for k in 0..TANGENTS {
                let row0 = n * (1 + k);
                for i in 0..n {
                    for a in 0..3 {
                        g.disp_grad[i][a][k] = d[[row0 + i, a]];
                    }
                    for r in 0..6 {
                        g.stress_grad[i][r][k] = s[[row0 + i, r]] * norm.scale;
                    }
                }
            }
            g
        });
        HeadOutput {
            displacements,
            stresses,
            gradients,
        }
    }
}

fn dense(
    tape: &mut Tape<'_>,
    x: Var,
    d: Dense,
    rows: usize,
    relu: bool,
) -> Result<Var, NetworkError> {
    let w = tape.param(d.w);
    let b = tape.param(d.b);
    let y = tape.matmul_t(x, w)?;
    let y = tape.add_bias(y, b, rows)?;
    Ok(if relu { tape.relu(y, rows)? } else { y })
}

fn dense_chain(
    tape: &mut Tape<'_>,
    mut x: Var,
    layers: &[Dense],
    rows: usize,
) -> Result<Var, NetworkError> {
    for &d in layers {
        x = dense(tape, x, d, rows, true)?;
    }
    Ok(x)
}

/// TNet output as a `1 × 12` node (top three rows of the 4×4 transform).
pub(crate) fn record_tnet<'p>(
    model: &'p RegModel,
    tape: &mut Tape<'p>,
    points: &Array2<f64>,
) -> Result<Var, NetworkError> {
    let l = &model.layout;
    let x = tape.constant(points.clone());
    let h = dense_chain(tape, x, &l.tnet_point, points.nrows())?;
    let g = tape.column_max(h)?;
    let g = dense_chain(tape, g, &l.tnet_fc, 1)?;
    dense(tape, g, l.tnet_out, 1, false)
}

pub(crate) fn record_point_features<'p>(
    model: &'p RegModel,
    tape: &mut Tape<'p>,
    points: &Array2<f64>,
) -> Result<Var, NetworkError> {
    let m = record_tnet(model, tape, points)?;
    let x = tape.homogeneous_transform(points.clone(), m, false)?;
    dense_chain(tape, x, &model.layout.encoder, points.nrows())
}

/// Global feature (`1 × G`) and the TNet node used to produce it.
pub(crate) fn record_encode<'p>(
    model: &'p RegModel,
    tape: &mut Tape<'p>,
    points: &Array2<f64>,
) -> Result<(Var, Var), NetworkError> {
    let m = record_tnet(model, tape, points)?;
    let x = tape.homogeneous_transform(points.clone(), m, false)?;
    let h = dense_chain(tape, x, &model.layout.encoder, points.nrows())?;
    Ok((tape.column_max(h)?, m))
}

/// Records the full forward pass. Per-point rows come from `query` when given,
/// otherwise from the source itself. With `tangents`, the per-point coordinate
/// channel carries input Jacobians; global features enter as constants of the
/// query point.
pub(crate) fn record_forward<'p>(
    model: &'p RegModel,
    tape: &mut Tape<'p>,
    norm: &Normalizer,
    source: &[Vec3],
    target: &[Vec3],
    query: Option<&[Vec3]>,
    tangents: bool,
) -> Result<ForwardVars, NetworkError> {
    if source.is_empty() {
        return Err(NetworkError::Empty("source"));
    }
    if target.is_empty() {
        return Err(NetworkError::Empty("target"));
    }
    let l = &model.layout;
    let src = norm.apply(source);
    let (g_s, m_s) = record_encode(model, tape, &src)?;
    let (g_t, _) = record_encode(model, tape, &norm.apply(target))?;
    let g = tape.concat_cols(&[g_s, g_t])?;

    let pts = match query {
        Some(q) => norm.apply(q),
        None => src,
    };
    let n = pts.nrows();
    let x = if model.arch.concat_transformed_coords {
        tape.homogeneous_transform(pts, m_s, tangents)?
    } else if tangents {
        let dual = DualBatch::from_points(pts.view())?;
        tape.constant(dual.stacked().clone())
    } else {
        tape.constant(pts)
    };

    let wp = tape.param(l.trunk_point_w);
    let wg = tape.param(l.trunk_global_w);
    let b0 = tape.param(l.trunk_first_b);
    let z = tape.matmul_t(x, wp)?;
    let gproj = tape.matmul_t(g, wg)?;
    let z = tape.add_bias(z, gproj, n)?;
    let z = tape.add_bias(z, b0, n)?;
    let z = tape.relu(z, n)?;
    let z = dense_chain(tape, z, &l.trunk, n)?;
    let h = dense(tape, z, l.trunk_linear, n, false)?;

    let disp = dense(tape, h, l.disp, n, false)?;
    let cols = l
        .stress
        .iter()
        .map(|&d| dense(tape, h, d, n, false))
        .collect::<Result<Vec<_>, _>>()?;
    let stress = tape.concat_cols(&cols)?;
    Ok(ForwardVars {
        disp,
        stress,
        n,
        tangents,
    })
}
