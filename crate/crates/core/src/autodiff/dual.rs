//! Forward propagation of per-sample input Jacobians through per-point layers.
//!
//! A batch is stored *stacked*: rows `[0, n)` hold activations, and rows
//! `[n·(1+k), n·(2+k))` hold `∂activation/∂x_k` for input coordinate `k`.
//! Affine layers then act on all blocks with one matrix product (bias only on
//! the value block) and elementwise nonlinearities scale the tangent blocks by
//! the local derivative evaluated on the value block.

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};

use super::AutodiffError;

/// Number of spatial input directions carried by a dual batch.
pub const TANGENTS: usize = 3;

/// Activations plus their Jacobians with respect to the originating input point.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBatch {
    stacked: Array2<f64>,
    n: usize,
}

impl DualBatch {
    /// Raw input layer: Jacobian of each sample with respect to itself is the identity.
    pub fn from_points(points: ArrayView2<'_, f64>) -> Result<Self, AutodiffError> {
        let (n, d) = points.dim();
        if d != TANGENTS {
            return Err(AutodiffError::Shape(format!(
                "input points must have {TANGENTS} columns, got {d}"
            )));
        }
        let mut stacked = Array2::zeros((n * (1 + TANGENTS), d));
        stacked.slice_mut(s![0..n, ..]).assign(&points);
        for k in 0..TANGENTS {
            stacked.slice_mut(s![n * (1 + k)..n * (2 + k), k]).fill(1.0);
        }
        Ok(Self { stacked, n })
    }

    /// A point-independent feature: all Jacobian blocks are zero.
    pub fn constant(values: Array2<f64>) -> Self {
        let (n, w) = values.dim();
        let mut stacked = Array2::zeros((n * (1 + TANGENTS), w));
        stacked.slice_mut(s![0..n, ..]).assign(&values);
        Self { stacked, n }
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn width(&self) -> usize {
        self.stacked.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.stacked.slice(s![0..self.n, ..])
    }

    /// `∂values/∂x_k` for every sample, shape `batch × width`.
    pub fn jacobian(&self, k: usize) -> ArrayView2<'_, f64> {
        let n = self.n;
        self.stacked.slice(s![n * (1 + k)..n * (2 + k), ..])
    }

    /// Jacobian block of one sample, shape `width × 3`.
    pub fn sample_jacobian(&self, i: usize) -> Array2<f64> {
        let mut out = Array2::zeros((self.width(), TANGENTS));
        for k in 0..TANGENTS {
            out.column_mut(k)
                .assign(&self.stacked.row(self.n * (1 + k) + i));
        }
        out
    }

    pub fn stacked(&self) -> &Array2<f64> {
        &self.stacked
    }
}

/// A per-point layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `y = W·h + b`, with `W` shaped `out × in` and `b` of length `out`.
    Affine {
        weight: Array2<f64>,
        bias: Vec<f64>,
    },
    Relu,
    Tanh,
}

pub fn forward_with_jacobian(layer: &Layer, input: &DualBatch) -> Result<DualBatch, AutodiffError> {
    let n = input.n;
    let stacked = match layer {
        Layer::Affine { weight, bias } => {
            if weight.ncols() != input.width() {
                return Err(AutodiffError::Shape(format!(
                    "affine weight expects width {}, input has {}",
                    weight.ncols(),
                    input.width()
                )));
            }
            if bias.len() != weight.nrows() {
                return Err(AutodiffError::Shape(format!(
                    "bias length {} does not match {} outputs",
                    bias.len(),
                    weight.nrows()
                )));
            }
            let mut y = matmul_t(input.stacked.view(), weight.view());
            add_bias_rows(&mut y, ArrayView1::from(bias.as_slice()), n);
            y
        }
        Layer::Relu => relu_stacked(input.stacked.view(), n),
        Layer::Tanh => {
            let mut y = input.stacked.clone();
            let blocks = y.nrows() / n.max(1);
            let t = input.values().mapv(f64::tanh);
            let dt = t.mapv(|v| 1.0 - v * v);
            y.slice_mut(s![0..n, ..]).assign(&t);
            for b in 1..blocks {
                let mut blk = y.slice_mut(s![b * n..(b + 1) * n, ..]);
                blk *= &dt;
            }
            y
        }
    };
    Ok(DualBatch { stacked, n })
}

/// `x · wᵀ`.
pub(crate) fn matmul_t(x: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>) -> Array2<f64> {
    x.dot(&w.t())
}

pub(crate) fn add_bias_rows(y: &mut Array2<f64>, bias: ArrayView1<'_, f64>, rows: usize) {
    let mut head = y.slice_mut(s![0..rows, ..]);
    head += &bias.insert_axis(Axis(0));
}

/// ReLU on the value block; tangent blocks are masked by the value block's sign.
pub(crate) fn relu_stacked(x: ArrayView2<'_, f64>, n: usize) -> Array2<f64> {
    let mut y = x.to_owned();
    if n == 0 {
        return y;
    }
    let blocks = y.nrows() / n;
    let mask = x.slice(s![0..n, ..]).mapv(|v| v > 0.0);
    for b in 0..blocks {
        let mut blk = y.slice_mut(s![b * n..(b + 1) * n, ..]);
        ndarray::Zip::from(&mut blk).and(&mask).for_each(|v, &m| {
            if !m {
                *v = 0.0;
            }
        });
    }
    y
}

/// Backward of [`relu_stacked`]: masks the upstream adjoint with the forward value block.
pub(crate) fn relu_stacked_backward(
    x: ArrayView2<'_, f64>,
    grad_out: ArrayView2<'_, f64>,
    n: usize,
) -> Array2<f64> {
    relu_backward_masked(x.slice(s![0..n, ..]), grad_out, n)
}

fn relu_backward_masked(
    values: ArrayView2<'_, f64>,
    grad_out: ArrayView2<'_, f64>,
    n: usize,
) -> Array2<f64> {
    let mut g = grad_out.to_owned();
    if n == 0 {
        return g;
    }
    let blocks = g.nrows() / n;
    for b in 0..blocks {
        let mut blk = g.slice_mut(s![b * n..(b + 1) * n, ..]);
        ndarray::Zip::from(&mut blk).and(&values).for_each(|v, &x| {
            if x <= 0.0 {
                *v = 0.0;
            }
        });
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar_layer(w: f64) -> Layer {
        Layer::Affine {
            weight: array![[w]],
            bias: vec![0.0],
        }
    }

    #[test]
    fn input_jacobian_is_identity() {
        let pts = array![[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0]];
        let d = DualBatch::from_points(pts.view()).unwrap();
        for i in 0..2 {
            assert_eq!(d.sample_jacobian(i), Array2::<f64>::eye(3));
        }
    }

    #[test]
    fn constant_feature_has_zero_jacobian() {
        let d = DualBatch::constant(array![[1.0, -2.0], [3.0, 4.0]]);
        let layer = Layer::Affine {
            weight: array![[1.0, 2.0], [0.5, -1.0]],
            bias: vec![0.1, 0.2],
        };
        let y = forward_with_jacobian(&layer, &d).unwrap();
        let y = forward_with_jacobian(&Layer::Tanh, &y).unwrap();
        for k in 0..3 {
            assert!(y.jacobian(k).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn affine_maps_jacobian_by_weight() {
        let pts = array![[0.3, -0.2, 1.0]];
        let w = array![[1.0, 2.0, 3.0], [-1.0, 0.0, 4.0]];
        let layer = Layer::Affine {
            weight: w.clone(),
            bias: vec![5.0, 6.0],
        };
        let y =
            forward_with_jacobian(&layer, &DualBatch::from_points(pts.view()).unwrap()).unwrap();
        assert_eq!(y.sample_jacobian(0), w);
        assert_eq!(
            y.values(),
            array![[0.3 - 0.4 + 3.0 + 5.0, -0.3 + 4.0 + 6.0]]
        );
    }

    #[test]
    fn dead_relu_zeroes_jacobian() {
        let pts = array![[1.0, 1.0, 1.0]];
        let layer = Layer::Affine {
            weight: array![[-1.0, -1.0, -1.0], [-2.0, 0.0, -0.5]],
            bias: vec![0.0, 0.0],
        };
        let h =
            forward_with_jacobian(&layer, &DualBatch::from_points(pts.view()).unwrap()).unwrap();
        let y = forward_with_jacobian(&Layer::Relu, &h).unwrap();
        assert!(y.sample_jacobian(0).iter().all(|&v| v == 0.0));
        assert!(y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let d = DualBatch::constant(array![[1.0, 2.0]]);
        let err = forward_with_jacobian(&scalar_layer(1.0), &d).unwrap_err();
        assert!(matches!(err, AutodiffError::Shape(_)));
    }

    #[test]
    fn two_layer_scalar_chain_matches_finite_difference() {
        // y = 3·relu(2·x) at x = 1.5; only the first coordinate participates.
        let f = |x: f64| 3.0 * (2.0 * x).max(0.0);
        let w1 = Layer::Affine {
            weight: array![[2.0, 0.0, 0.0]],
            bias: vec![0.0],
        };
        let w2 = scalar_layer(3.0);
        let x = array![[1.5, 0.0, 0.0]];
        let mut h = DualBatch::from_points(x.view()).unwrap();
        for layer in [&w1, &Layer::Relu, &w2] {
            h = forward_with_jacobian(layer, &h).unwrap();
        }
        let analytic = h.jacobian(0)[[0, 0]];
        assert_eq!(analytic, 6.0);
        let step = 1e-5;
        let fd = (f(1.5 + step) - f(1.5 - step)) / (2.0 * step);
        assert!(((analytic - fd) / fd).abs() < 1e-6);
    }
}
