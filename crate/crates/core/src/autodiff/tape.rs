use std::borrow::Cow;

use ndarray::{s, Array2, Axis};

use super::dual::{add_bias_rows, matmul_t, relu_stacked, relu_stacked_backward, TANGENTS};
use super::params::{Gradients, ParamId, ParamStore};
use super::AutodiffError;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMulT {
        x: Var,
        w: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
        rows: usize,
    },
    Relu {
        x: Var,
        n: usize,
    },
    ColumnMax {
        x: Var,
        argmax: Vec<usize>,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    Homogeneous {
        points: Array2<f64>,
        m: Var,
        tangents: bool,
    },
    SumSquares {
        x: Var,
    },
    /// Small-output op whose local partials were saved at record time:
    /// `partials[k][j] = ∂out_k / ∂inputs[j]`.
    Fused {
        name: &'static str,
        inputs: Vec<Var>,
        partials: Vec<Vec<Array2<f64>>>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMulT { .. } => "matmul_t",
            Op::AddBias { .. } => "add_bias",
            Op::Relu { .. } => "relu",
            Op::ColumnMax { .. } => "column_max",
            Op::ConcatCols { .. } => "concat_cols",
            Op::Homogeneous { .. } => "homogeneous_transform",
            Op::SumSquares { .. } => "sum_squares",
            Op::Fused { name, .. } => name,
        }
    }
}

struct Node<'p> {
    value: Cow<'p, Array2<f64>>,
    op: Op,
}

/// Reverse-mode record of matrix-valued primitives.
///
/// Nodes are appended in evaluation order, so every node's inputs have
/// smaller indices and a reverse sweep is a valid reverse topological order.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node<'p>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, value: Cow<'p, Array2<f64>>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Cow::Owned(value), Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id);
        self.push(Cow::Borrowed(value), Op::Param(id))
    }

    /// `x · wᵀ`, with `w` shaped `out × in`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var, AutodiffError> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ncols() != wv.ncols() {
            return Err(AutodiffError::Shape(format!(
                "matmul_t: input width {} vs weight width {}",
                xv.ncols(),
                wv.ncols()
            )));
        }
        let y = matmul_t(xv.view(), wv.view());
        Ok(self.push(Cow::Owned(y), Op::MatMulT { x, w }))
    }

    /// Adds the `1 × w` row `bias` to the first `rows` rows of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var, rows: usize) -> Result<Var, AutodiffError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.nrows() != 1 || bv.ncols() != xv.ncols() || rows > xv.nrows() {
            return Err(AutodiffError::Shape(format!(
                "add_bias: bias {:?} onto {:?} ({} rows)",
                bv.dim(),
                xv.dim(),
                rows
            )));
        }
        let mut y = xv.clone();
        add_bias_rows(&mut y, bv.row(0), rows);
        Ok(self.push(Cow::Owned(y), Op::AddBias { x, bias, rows }))
    }

    /// ReLU over a stacked dual batch whose value block has `n` rows.
    pub fn relu(&mut self, x: Var, n: usize) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if n == 0 || xv.nrows() % n != 0 {
            return Err(AutodiffError::Shape(format!(
                "relu: {} rows is not a multiple of batch {}",
                xv.nrows(),
                n
            )));
        }
        let y = relu_stacked(xv.view(), n);
        Ok(self.push(Cow::Owned(y), Op::Relu { x, n }))
    }

    /// Coordinate-wise max over rows; ties resolve to the lowest row.
    pub fn column_max(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if xv.nrows() == 0 {
            return Err(AutodiffError::Shape("column_max over zero rows".into()));
        }
        let mut argmax = vec![0usize; xv.ncols()];
        let mut y = Array2::zeros((1, xv.ncols()));
        for (j, col) in xv.axis_iter(Axis(1)).enumerate() {
            let mut best = 0;
            for (i, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = i;
                }
            }
            argmax[j] = best;
            y[[0, j]] = col[best];
        }
        Ok(self.push(Cow::Owned(y), Op::ColumnMax { x, argmax }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let rows = self.value(parts[0]).nrows();
        if parts.iter().any(|&p| self.value(p).nrows() != rows) {
            return Err(AutodiffError::Shape(
                "concat_cols: row counts differ".into(),
            ));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| AutodiffError::Shape(e.to_string()))?;
        Ok(self.push(
            Cow::Owned(y),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Applies the affine part of a homogeneous 4×4 transform, given as its
    /// top three rows flattened into a `1 × 12` node, to constant `n × 3` points.
    /// With `tangents`, the output is a stacked dual batch whose Jacobian
    /// blocks are the transform's linear part.
    pub fn homogeneous_transform(
        &mut self,
        points: Array2<f64>,
        m: Var,
        tangents: bool,
    ) -> Result<Var, AutodiffError> {
        let mv = self.value(m);
        if mv.dim() != (1, 12) || points.ncols() != 3 {
            return Err(AutodiffError::Shape(format!(
                "homogeneous_transform: matrix {:?}, points {:?}",
                mv.dim(),
                points.dim()
            )));
        }
        let n = points.nrows();
        let blocks = if tangents { 1 + TANGENTS } else { 1 };
        let mut y = Array2::zeros((n * blocks, 3));
        let a = |r: usize, c: usize| mv[[0, r * 4 + c]];
        for i in 0..n {
            for r in 0..3 {
                y[[i, r]] = a(r, 0) * points[[i, 0]]
                    + a(r, 1) * points[[i, 1]]
                    + a(r, 2) * points[[i, 2]]
                    + a(r, 3);
            }
        }
        if tangents {
            for k in 0..TANGENTS {
                for i in 0..n {
                    for r in 0..3 {
                        y[[n * (1 + k) + i, r]] = a(r, k);
                    }
                }
            }
        }
        Ok(self.push(
            Cow::Owned(y),
            Op::Homogeneous {
                points,
                m,
                tangents,
            },
        ))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|v| v * v).sum();
        self.push(
            Cow::Owned(Array2::from_elem((1, 1), s)),
            Op::SumSquares { x },
        )
    }

    /// Records an op with a `1 × m` output whose partials with respect to each
    /// input have already been computed. `partials[k][j]` must match the shape
    /// of `inputs[j]`.
    pub fn fused(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Vec<f64>,
        partials: Vec<Vec<Array2<f64>>>,
    ) -> Result<Var, AutodiffError> {
        if partials.len() != value.len() {
            return Err(AutodiffError::Shape(format!(
                "{name}: {} outputs but {} partial rows",
                value.len(),
                partials.len()
            )));
        }
        for row in &partials {
            if row.len() != inputs.len() {
                return Err(AutodiffError::Shape(format!("{name}: partial arity")));
            }
            for (p, &inp) in row.iter().zip(inputs) {
                if p.dim() != self.value(inp).dim() {
                    return Err(AutodiffError::Shape(format!(
                        "{name}: partial {:?} for input {:?}",
                        p.dim(),
                        self.value(inp).dim()
                    )));
                }
            }
        }
        let m = value.len();
        let y = Array2::from_shape_vec((1, m), value).expect("row vector");
        Ok(self.push(
            Cow::Owned(y),
            Op::Fused {
                name,
                inputs: inputs.to_vec(),
                partials,
            },
        ))
    }

    /// `Σ_k weights[k]·x[0, k]` for a `1 × m` node.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if xv.dim() != (1, weights.len()) {
            return Err(AutodiffError::Shape("weighted_sum: width".into()));
        }
        let total = xv.iter().zip(weights).map(|(a, b)| a * b).sum();
        let partial = Array2::from_shape_vec((1, weights.len()), weights.to_vec()).unwrap();
        self.fused("weighted_sum", &[x], vec![total], vec![vec![partial]])
    }

    /// Reverse sweep from a `1 × 1` node. Parameters the loss does not reach
    /// get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.value(loss).dim() != (1, 1) {
            return Err(AutodiffError::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).dim()
            )));
        }
        let mut grads = self.params.zeros_like();
        let mut adj: Vec<Option<Array2<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if g.iter().any(|v| !v.is_finite()) || node.value.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFinite {
                    node: idx,
                    op: node.op.name(),
                });
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.grads[id.0] += &g,
                Op::MatMulT { x, w } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    accumulate(&mut adj, *x, g.dot(wv));
                    accumulate(&mut adj, *w, g.t().dot(xv));
                }
                Op::AddBias { x, bias, rows } => {
                    let gb = g
                        .slice(s![0..*rows, ..])
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    accumulate(&mut adj, *bias, gb);
                    accumulate(&mut adj, *x, g);
                }
                Op::Relu { x, n } => {
                    let gx = relu_stacked_backward(self.value(*x).view(), g.view(), *n);
                    accumulate(&mut adj, *x, gx);
                }
                Op::ColumnMax { x, argmax } => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    for (j, &i) in argmax.iter().enumerate() {
                        gx[[i, j]] += g[[0, j]];
                    }
                    accumulate(&mut adj, *x, gx);
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        accumulate(&mut adj, p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::Homogeneous {
                    points,
                    m,
                    tangents,
                } => {
                    let n = points.nrows();
                    let mut gm = Array2::zeros((1, 12));
                    for i in 0..n {
                        for r in 0..3 {
                            let gy = g[[i, r]];
                            for c in 0..3 {
                                gm[[0, r * 4 + c]] += gy * points[[i, c]];
                            }
                            gm[[0, r * 4 + 3]] += gy;
                        }
                    }
                    if *tangents {
                        for k in 0..TANGENTS {
                            for i in 0..n {
                                for r in 0..3 {
                                    gm[[0, r * 4 + k]] += g[[n * (1 + k) + i, r]];
                                }
                            }
                        }
                    }
                    accumulate(&mut adj, *m, gm);
                }
                Op::SumSquares { x } => {
                    let scale = 2.0 * g[[0, 0]];
                    accumulate(&mut adj, *x, self.value(*x).mapv(|v| scale * v));
                }
                Op::Fused {
                    inputs, partials, ..
                } => {
                    for (j, &inp) in inputs.iter().enumerate() {
                        let mut gi: Option<Array2<f64>> = None;
                        for (k, row) in partials.iter().enumerate() {
                            let gk = g[[0, k]];
                            if gk == 0.0 {
                                continue;
                            }
                            match gi.as_mut() {
                                Some(acc) => acc.scaled_add(gk, &row[j]),
                                None => gi = Some(row[j].mapv(|v| gk * v)),
                            }
                        }
                        if let Some(gi) = gi {
                            accumulate(&mut adj, inp, gi);
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(adj: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match adj[v.0].as_mut() {
        Some(acc) => *acc += &g,
        None => adj[v.0] = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_gradient() {
        let mut store = ParamStore::new();
        let theta = store.add("theta", array![[1.0, 2.0, 3.0]]);
        let mut tape = Tape::new(&store);
        let t = tape.param(theta);
        let loss = tape.sum_squares(t);
        assert_eq!(tape.scalar(loss), 14.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(theta), &array![[2.0, 4.0, 6.0]]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[1.0, -1.0]]);
        let b = store.add("b", array![[5.0]]);
        let mut tape = Tape::new(&store);
        let av = tape.param(a);
        let loss = tape.sum_squares(av);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(b), &array![[0.0]]);
    }

    #[test]
    fn constant_only_loss_gives_all_zero_gradients() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[1.0]]);
        let mut tape = Tape::new(&store);
        let c = tape.constant(array![[3.0]]);
        let loss = tape.sum_squares(c);
        assert_eq!(tape.backward(loss).unwrap().get(a), &array![[0.0]]);
    }

    #[test]
    fn reused_parameter_accumulates() {
        // loss = Σ (x·wᵀ)² + Σ w² where w appears twice.
        let mut store = ParamStore::new();
        let w = store.add("w", array![[2.0]]);
        let mut tape = Tape::new(&store);
        let x = tape.constant(array![[3.0]]);
        let wv = tape.param(w);
        let y = tape.matmul_t(x, wv).unwrap();
        let l1 = tape.sum_squares(y);
        let l2 = tape.sum_squares(wv);
        let both = tape.concat_cols(&[l1, l2]).unwrap();
        let loss = tape.weighted_sum(both, &[1.0, 1.0]).unwrap();
        // d/dw (9w² + w²) = 20w = 40
        assert_eq!(tape.backward(loss).unwrap().get(w), &array![[40.0]]);
    }

    #[test]
    fn nan_is_reported_with_node() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[f64::NAN]]);
        let mut tape = Tape::new(&store);
        let av = tape.param(a);
        let loss = tape.sum_squares(av);
        match tape.backward(loss) {
            Err(AutodiffError::NonFinite { op, .. }) => assert_eq!(op, "sum_squares"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn column_max_routes_gradient_to_first_maximum() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[1.0, 5.0], [3.0, 5.0], [3.0, 0.0]]);
        let mut tape = Tape::new(&store);
        let av = tape.param(a);
        let m = tape.column_max(av).unwrap();
        assert_eq!(tape.value(m), &array![[3.0, 5.0]]);
        let loss = tape.weighted_sum(m, &[1.0, 10.0]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a), &array![[0.0, 10.0], [1.0, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let c = tape.constant(array![[1.0, 2.0]]);
        assert!(matches!(tape.backward(c), Err(AutodiffError::Shape(_))));
    }
}
