//! Minimal reverse-mode automatic differentiation over dense 2-D `f64` arrays.
//!
//! A [`Tape`] owns the computation graph: nodes are created in topological
//! order by the forward-op methods and hold their values eagerly. Calling
//! [`Tape::backward`] on a scalar root walks the tape in reverse and
//! accumulates adjoints into every leaf created with [`Tape::leaf`].
//!
//! The op set is exactly what the generator, discriminator, sorting
//! relaxation, strategy PnL maps and score losses need. The backward pass is
//! sequential and allocation-order deterministic, so identical tapes produce
//! bit-identical gradients.

use crate::{Result, TailSimError};
use ndarray::{Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
#[allow(dead_code)] // parent ids on stop-gradient ops are kept for graph provenance
enum Op {
    Leaf { requires_grad: bool },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Square(NodeId),
    Abs(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    LeakyRelu(NodeId, f64),
    Clip(NodeId, f64, f64),
    SoftmaxRows(NodeId),
    SoftSort(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    IndicatorLeq(NodeId, NodeId),
    BatchNormTrain { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    BatchNormEval { x: NodeId, gamma: NodeId, beta: NodeId },
    Reshape(NodeId),
    ConcatCols(NodeId, NodeId),
}

#[derive(Debug, Clone, Default)]
struct Aux {
    /// Normalized input and 1/std saved by batch-norm ops.
    xhat: Option<Array2<f64>>,
    inv_std: Option<Array2<f64>>,
    /// Batch statistics saved by train-mode batch norm (for running updates).
    batch_mean: Option<Array2<f64>>,
    batch_var: Option<Array2<f64>>,
    /// Row-stochastic relaxation saved by the fused soft-sort op.
    perm: Option<Array2<f64>>,
}

struct Node {
    value: Array2<f64>,
    op: Op,
    aux: Aux,
}

/// Gradients produced by a backward pass, addressed by [`NodeId`].
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the root with respect to `id`, if `id` is a leaf that
    /// requires gradients and is reachable from the root.
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Reverse-mode tape. Single-owner during construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn binary_shape(a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    if a == b {
        Ok(a)
    } else if a == (1, 1) {
        Ok(b)
    } else if b == (1, 1) {
        Ok(a)
    } else {
        Err(TailSimError::Shape(format!(
            "elementwise op on incompatible shapes {a:?} and {b:?}"
        )))
    }
}

/// Spread/reduce helper: maps an upstream gradient of `shape` onto an operand
/// that may have been broadcast from (1,1).
fn reduce_to(grad: &Array2<f64>, operand_shape: (usize, usize)) -> Array2<f64> {
    if grad.dim() == operand_shape {
        grad.clone()
    } else {
        Array2::from_elem(operand_shape, grad.sum())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    /// Batch statistics (mean, var) recorded by a train-mode batch-norm node.
    pub fn bn_batch_stats(&self, id: NodeId) -> Option<(Array2<f64>, Array2<f64>)> {
        let aux = &self.nodes[id.0].aux;
        match (&aux.batch_mean, &aux.batch_var) {
            (Some(m), Some(v)) => Some((m.clone(), v.clone())),
            _ => None,
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.push_aux(value, op, Aux::default())
    }

    fn push_aux(&mut self, value: Array2<f64>, op: Op, aux: Aux) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, aux });
        id
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf { requires_grad: true })
    }

    /// Non-differentiable input (data, fixed selectors, frozen parameters).
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf { requires_grad: false })
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(TailSimError::Shape(format!(
                "matmul ({ar}x{ac}) . ({br}x{bc})"
            )));
        }
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = binary_shape(self.shape(a), self.shape(b))?;
        let value = broadcast_zip(&self.nodes[a.0].value, &self.nodes[b.0].value, shape, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = binary_shape(self.shape(a), self.shape(b))?;
        let value = broadcast_zip(&self.nodes[a.0].value, &self.nodes[b.0].value, shape, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = binary_shape(self.shape(a), self.shape(b))?;
        let value = broadcast_zip(&self.nodes[a.0].value, &self.nodes[b.0].value, shape, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// `(r,c) + (1,c)` row-broadcast bias add.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xr, xc) = self.shape(x);
        let (br, bc) = self.shape(b);
        if br != 1 || bc != xc {
            return Err(TailSimError::Shape(format!(
                "add_bias ({xr}x{xc}) + ({br}x{bc})"
            )));
        }
        let value = &self.nodes[x.0].value + &self.nodes[b.0].value;
        Ok(self.push(value, Op::AddBias(x, b)))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(value, Op::Square(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.mapv(f64::abs);
        self.push(value, Op::Abs(a))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|x| x * k);
        self.push(value, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|x| x + k);
        self.push(value, Op::AddScalar(a, k))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope))
    }

    pub fn clip(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        self.push(value, Op::Clip(a, lo, hi))
    }

    /// Row-wise numerically stable softmax.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let value = softmax_rows_value(&self.nodes[a.0].value);
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Fused differentiable descending sort of an `(n,1)` column.
    ///
    /// Equivalent to `relaxed_perm(x, tau) . x` but stores only the
    /// permutation matrix and uses a hand-derived adjoint (five mat-vec
    /// products plus an `O(n log n)` signed prefix scan).
    pub fn soft_sort(&mut self, a: NodeId, tau: f64) -> Result<NodeId> {
        let (n, c) = self.shape(a);
        if c != 1 || n == 0 {
            return Err(TailSimError::Shape(format!("soft_sort expects (n,1), got ({n},{c})")));
        }
        if !(tau > 0.0) {
            return Err(TailSimError::Domain(format!("soft_sort temperature must be > 0, got {tau}")));
        }
        let x: Vec<f64> = self.nodes[a.0].value.column(0).to_vec();
        let perm = crate::neuralsort::relaxed_perm_values(&x, tau);
        let mut s = Array2::zeros((n, 1));
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += perm[(i, j)] * x[j];
            }
            s[(i, 0)] = acc;
        }
        let aux = Aux { perm: Some(perm), ..Aux::default() };
        Ok(self.push_aux(s, Op::SoftSort(a, tau), aux))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len() as f64;
        let value = Array2::from_elem((1, 1), self.nodes[a.0].value.sum() / n);
        self.push(value, Op::Mean(a))
    }

    /// `1{a <= b}` elementwise with (1,1) broadcast on either side.
    ///
    /// Treated as a constant during backpropagation: contributes zero
    /// gradient to both arguments.
    pub fn indicator_leq(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = binary_shape(self.shape(a), self.shape(b))?;
        let value = broadcast_zip(&self.nodes[a.0].value, &self.nodes[b.0].value, shape, |x, y| {
            if x <= y {
                1.0
            } else {
                0.0
            }
        });
        Ok(self.push(value, Op::IndicatorLeq(a, b)))
    }

    /// Train-mode batch norm over rows: per-column standardization with the
    /// batch statistics, then affine `gamma * xhat + beta`.
    pub fn batchnorm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = self.shape(id);
            if s != (1, c) {
                return Err(TailSimError::Shape(format!("batchnorm {name} must be (1,{c}), got {s:?}")));
            }
        }
        let xv = &self.nodes[x.0].value;
        let mean = xv.sum_axis(Axis(0)).insert_axis(Axis(0)) / r as f64;
        let mut var = Array2::zeros((1, c));
        for j in 0..c {
            let m = mean[(0, j)];
            let mut acc = 0.0;
            for i in 0..r {
                let d = xv[(i, j)] - m;
                acc += d * d;
            }
            var[(0, j)] = acc / r as f64;
        }
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mut xhat = Array2::zeros((r, c));
        for i in 0..r {
            for j in 0..c {
                xhat[(i, j)] = (xv[(i, j)] - mean[(0, j)]) * inv_std[(0, j)];
            }
        }
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut y = Array2::zeros((r, c));
        for i in 0..r {
            for j in 0..c {
                y[(i, j)] = xhat[(i, j)] * g[(0, j)] + b[(0, j)];
            }
        }
        let aux = Aux {
            xhat: Some(xhat),
            inv_std: Some(inv_std),
            batch_mean: Some(mean),
            batch_var: Some(var),
            perm: None,
        };
        Ok(self.push_aux(y, Op::BatchNormTrain { x, gamma, beta, eps }, aux))
    }

    /// Eval-mode batch norm using frozen running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &Array2<f64>,
        running_var: &Array2<f64>,
        eps: f64,
    ) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if running_mean.dim() != (1, c) || running_var.dim() != (1, c) {
            return Err(TailSimError::Shape("batchnorm running stats must be (1,c)".into()));
        }
        let inv_std = running_var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xv = &self.nodes[x.0].value;
        let mut xhat = Array2::zeros((r, c));
        for i in 0..r {
            for j in 0..c {
                xhat[(i, j)] = (xv[(i, j)] - running_mean[(0, j)]) * inv_std[(0, j)];
            }
        }
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut y = Array2::zeros((r, c));
        for i in 0..r {
            for j in 0..c {
                y[(i, j)] = xhat[(i, j)] * g[(0, j)] + b[(0, j)];
            }
        }
        let aux = Aux {
            xhat: Some(xhat),
            inv_std: Some(inv_std),
            ..Aux::default()
        };
        Ok(self.push_aux(y, Op::BatchNormEval { x, gamma, beta }, aux))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(TailSimError::Shape(format!(
                "reshape ({r}x{c}) -> ({rows}x{cols})"
            )));
        }
        let value = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order((rows, cols))
            .expect("element count checked");
        Ok(self.push(value, Op::Reshape(a)))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br {
            return Err(TailSimError::Shape(format!(
                "concat_cols row mismatch {ar} vs {br}"
            )));
        }
        let mut value = Array2::zeros((ar, ac + bc));
        value.slice_mut(ndarray::s![.., ..ac]).assign(&self.nodes[a.0].value);
        value.slice_mut(ndarray::s![.., ac..]).assign(&self.nodes[b.0].value);
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    /// Backward pass from a scalar root; leaf adjoints are `d root / d leaf`.
    pub fn backward(&self, root: NodeId) -> Result<Grads> {
        if self.shape(root) != (1, 1) {
            return Err(TailSimError::Domain(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        self.backward_from(root, Array2::from_elem((1, 1), 1.0))
    }

    /// Backward pass seeded with an explicit cotangent at `root`.
    ///
    /// Lets a graph be split in stages: a downstream tape's gradient with
    /// respect to its input leaf becomes the cotangent of the upstream node.
    pub fn backward_from(&self, root: NodeId, cotangent: Array2<f64>) -> Result<Grads> {
        if cotangent.dim() != self.shape(root) {
            return Err(TailSimError::Shape("cotangent shape must match root".into()));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(cotangent);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            // keep adjoints only for leaves; interior adjoints were consumed
            if matches!(self.nodes[idx].op, Op::Leaf { requires_grad: true }) {
                grads[idx] = Some(g);
            }
        }
        Ok(Grads { grads })
    }

    fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut Vec<Option<Array2<f64>>>) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf { .. } | Op::IndicatorLeq(_, _) => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                Self::accumulate(grads, *a, g.dot(&bv.t()));
                Self::accumulate(grads, *b, av.t().dot(g));
            }
            Op::Transpose(a) => {
                Self::accumulate(grads, *a, g.t().to_owned());
            }
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, reduce_to(g, self.shape(*a)));
                Self::accumulate(grads, *b, reduce_to(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, reduce_to(g, self.shape(*a)));
                Self::accumulate(grads, *b, reduce_to(&g.mapv(|v| -v), self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let shape = node.value.dim();
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let da = broadcast_zip(g, bv, shape, |x, y| x * y);
                let db = broadcast_zip(g, av, shape, |x, y| x * y);
                Self::accumulate(grads, *a, reduce_to(&da, self.shape(*a)));
                Self::accumulate(grads, *b, reduce_to(&db, self.shape(*b)));
            }
            Op::AddBias(x, b) => {
                Self::accumulate(grads, *x, g.clone());
                Self::accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Square(a) => {
                let av = &self.nodes[a.0].value;
                Self::accumulate(grads, *a, 2.0 * av * g);
            }
            Op::Abs(a) => {
                let av = &self.nodes[a.0].value;
                let mut d = g.clone();
                d.zip_mut_with(av, |gi, &x| *gi *= sign(x));
                Self::accumulate(grads, *a, d);
            }
            Op::Scale(a, k) => {
                Self::accumulate(grads, *a, g.mapv(|v| v * k));
            }
            Op::AddScalar(a, _) => {
                Self::accumulate(grads, *a, g.clone());
            }
            Op::LeakyRelu(a, slope) => {
                let av = &self.nodes[a.0].value;
                let mut d = g.clone();
                d.zip_mut_with(av, |gi, &x| {
                    if x <= 0.0 {
                        *gi *= slope;
                    }
                });
                Self::accumulate(grads, *a, d);
            }
            Op::Clip(a, lo, hi) => {
                let av = &self.nodes[a.0].value;
                let mut d = g.clone();
                d.zip_mut_with(av, |gi, &x| {
                    if x <= *lo || x >= *hi {
                        *gi = 0.0;
                    }
                });
                Self::accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let p = &node.value;
                let (r, c) = p.dim();
                let mut d = Array2::zeros((r, c));
                for i in 0..r {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += p[(i, j)] * g[(i, j)];
                    }
                    for j in 0..c {
                        d[(i, j)] = p[(i, j)] * (g[(i, j)] - dot);
                    }
                }
                Self::accumulate(grads, *a, d);
            }
            Op::SoftSort(a, tau) => {
                let x: Vec<f64> = self.nodes[a.0].value.column(0).to_vec();
                let p = node.aux.perm.as_ref().expect("soft-sort aux");
                let s = &node.value;
                let d = soft_sort_backward(&x, p, s, g, *tau);
                Self::accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let shape = self.shape(*a);
                Self::accumulate(grads, *a, Array2::from_elem(shape, g[(0, 0)]));
            }
            Op::Mean(a) => {
                let shape = self.shape(*a);
                let n = (shape.0 * shape.1) as f64;
                Self::accumulate(grads, *a, Array2::from_elem(shape, g[(0, 0)] / n));
            }
            Op::BatchNormTrain { x, gamma, beta, .. } => {
                let xhat = node.aux.xhat.as_ref().expect("bn aux");
                let inv_std = node.aux.inv_std.as_ref().expect("bn aux");
                let gv = &self.nodes[gamma.0].value;
                let (r, c) = xhat.dim();
                let mut dgamma = Array2::zeros((1, c));
                let mut dbeta = Array2::zeros((1, c));
                for j in 0..c {
                    let mut sg = 0.0;
                    let mut sb = 0.0;
                    for i in 0..r {
                        sg += g[(i, j)] * xhat[(i, j)];
                        sb += g[(i, j)];
                    }
                    dgamma[(0, j)] = sg;
                    dbeta[(0, j)] = sb;
                }
                let mut dx = Array2::zeros((r, c));
                for j in 0..c {
                    // dxhat_ij = g_ij * gamma_j; classic population-variance formula
                    let gamma_j = gv[(0, j)];
                    let mean_dxhat = dbeta[(0, j)] * gamma_j / r as f64;
                    let mean_dxhat_xhat = dgamma[(0, j)] * gamma_j / r as f64;
                    for i in 0..r {
                        let dxhat = g[(i, j)] * gamma_j;
                        dx[(i, j)] = inv_std[(0, j)] * (dxhat - mean_dxhat - xhat[(i, j)] * mean_dxhat_xhat);
                    }
                }
                Self::accumulate(grads, *x, dx);
                Self::accumulate(grads, *gamma, dgamma);
                Self::accumulate(grads, *beta, dbeta);
            }
            Op::BatchNormEval { x, gamma, beta } => {
                let xhat = node.aux.xhat.as_ref().expect("bn aux");
                let inv_std = node.aux.inv_std.as_ref().expect("bn aux");
                let gv = &self.nodes[gamma.0].value;
                let (r, c) = xhat.dim();
                let mut dgamma = Array2::zeros((1, c));
                let mut dbeta = Array2::zeros((1, c));
                let mut dx = Array2::zeros((r, c));
                for j in 0..c {
                    for i in 0..r {
                        dgamma[(0, j)] += g[(i, j)] * xhat[(i, j)];
                        dbeta[(0, j)] += g[(i, j)];
                        dx[(i, j)] = g[(i, j)] * gv[(0, j)] * inv_std[(0, j)];
                    }
                }
                Self::accumulate(grads, *x, dx);
                Self::accumulate(grads, *gamma, dgamma);
                Self::accumulate(grads, *beta, dbeta);
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a);
                let d = g
                    .clone()
                    .into_shape_with_order(shape)
                    .expect("reshape backward");
                Self::accumulate(grads, *a, d);
            }
            Op::ConcatCols(a, b) => {
                let ac = self.shape(*a).1;
                Self::accumulate(grads, *a, g.slice(ndarray::s![.., ..ac]).to_owned());
                Self::accumulate(grads, *b, g.slice(ndarray::s![.., ac..]).to_owned());
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn broadcast_zip(
    a: &Array2<f64>,
    b: &Array2<f64>,
    shape: (usize, usize),
    f: impl Fn(f64, f64) -> f64,
) -> Array2<f64> {
    let (r, c) = shape;
    let a_scalar = a.dim() == (1, 1);
    let b_scalar = b.dim() == (1, 1);
    let mut out = Array2::zeros((r, c));
    for i in 0..r {
        for j in 0..c {
            let x = if a_scalar { a[(0, 0)] } else { a[(i, j)] };
            let y = if b_scalar { b[(0, 0)] } else { b[(i, j)] };
            out[(i, j)] = f(x, y);
        }
    }
    out
}

pub(crate) fn softmax_rows_value(logits: &Array2<f64>) -> Array2<f64> {
    let (r, c) = logits.dim();
    let mut out = Array2::zeros((r, c));
    for i in 0..r {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[(i, j)] = e;
            denom += e;
        }
        for j in 0..c {
            out[(i, j)] /= denom;
        }
    }
    out
}

/// Adjoint of `s = P(x) . x` where `P` is the temperature-relaxed descending
/// sort permutation. Uses the factorization of `dlogits` through `P` so only
/// mat-vec products against `P` are needed, plus a sorted prefix scan for the
/// pairwise |.| term.
fn soft_sort_backward(
    x: &[f64],
    p: &Array2<f64>,
    s: &Array2<f64>,
    g: &Array2<f64>,
    tau: f64,
) -> Array2<f64> {
    let n = x.len();
    let c: Vec<f64> = (0..n).map(|i| (n as f64) - 1.0 - 2.0 * i as f64).collect();
    // column reductions through P
    let mut pt_g = vec![0.0; n]; // P^T g
    let mut pt_gs = vec![0.0; n]; // P^T (g .* s)
    let mut pt_cg = vec![0.0; n]; // P^T (c .* g)
    let mut pt_cgs = vec![0.0; n]; // P^T (c .* g .* s)
    for i in 0..n {
        let gi = g[(i, 0)];
        if gi == 0.0 {
            continue;
        }
        let gsi = gi * s[(i, 0)];
        let cgi = c[i] * gi;
        let cgsi = c[i] * gsi;
        for j in 0..n {
            let pij = p[(i, j)];
            pt_g[j] += pij * gi;
            pt_gs[j] += pij * gsi;
            pt_cg[j] += pij * cgi;
            pt_cgs[j] += pij * cgsi;
        }
    }
    // colsum_j = sum_i dlogits[i,j] * tau ; coldot_j = sum_i c_i dlogits[i,j] * tau
    let colsum: Vec<f64> = (0..n).map(|j| x[j] * pt_g[j] - pt_gs[j]).collect();
    let coldot: Vec<f64> = (0..n).map(|j| x[j] * pt_cg[j] - pt_cgs[j]).collect();

    // signed prefix sums over the value ordering; ties contribute sign 0
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite sort keys"));
    let total: f64 = colsum.iter().sum();
    let mut below_count = vec![0usize; n];
    let mut below_sum = vec![0.0; n];
    let mut group_count = vec![0usize; n];
    let mut group_sum = vec![0.0; n];
    let mut i = 0;
    let mut acc_count = 0usize;
    let mut acc_sum = 0.0;
    while i < n {
        let mut j = i;
        let mut gsum = 0.0;
        while j < n && x[order[j]] == x[order[i]] {
            gsum += colsum[order[j]];
            j += 1;
        }
        for k in i..j {
            let m = order[k];
            below_count[m] = acc_count;
            below_sum[m] = acc_sum;
            group_count[m] = j - i;
            group_sum[m] = gsum;
        }
        acc_count += j - i;
        acc_sum += gsum;
        i = j;
    }

    let mut dx = Array2::zeros((n, 1));
    for m in 0..n {
        let above_count = n - below_count[m] - group_count[m];
        let above_sum = total - below_sum[m] - group_sum[m];
        let r_m = below_count[m] as f64 - above_count as f64;
        let a_m = below_sum[m] - above_sum;
        let logits_term = (coldot[m] - (r_m * colsum[m] + a_m)) / tau;
        dx[(m, 0)] = pt_g[m] + logits_term;
    }
    dx
}

/// Max relative error between analytic gradients and central finite
/// differences for a graph builder evaluated at `points`.
///
/// `build` receives one leaf per input array and must return the scalar root.
/// The finite-difference step is `1e-5 * max(1, |x|)` per coordinate; the
/// relative error is `|analytic - fd| / max(1, |analytic|, |fd|)`.
pub fn grad_check<F>(build: F, points: &[Array2<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |inputs: &[Array2<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|p| tape.leaf(p.clone())).collect();
        let root = build(&mut tape, &ids)?;
        Ok(tape.value(root)[(0, 0)])
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = build(&mut tape, &ids)?;
    let grads = tape.backward(root)?;

    let mut worst: f64 = 0.0;
    for (k, point) in points.iter().enumerate() {
        let analytic = grads
            .get(ids[k])
            .cloned()
            .unwrap_or_else(|| Array2::zeros(point.dim()));
        let (r, c) = point.dim();
        for i in 0..r {
            for j in 0..c {
                let h = 1e-5 * point[(i, j)].abs().max(1.0);
                let mut plus = points.to_vec();
                plus[k][(i, j)] += h;
                let mut minus = points.to_vec();
                minus[k][(i, j)] -= h;
                let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
                let a = analytic[(i, j)];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
                worst = worst.max(err);
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn randn(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
        })
    }

    #[test]
    fn leaky_relu_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[3.0, -3.0]]);
        let y = tape.leaky_relu(x, 0.2);
        assert!((tape.value(y)[(0, 0)] - 3.0).abs() < 1e-15);
        assert!((tape.value(y)[(0, 1)] + 0.6).abs() < 1e-15);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &array![[1.0, 0.2]]);
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, -2.0], [0.5, 4.0]]);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Array2::from_elem((2, 2), 1.0));

        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, -2.0], [0.5, 4.0]]);
        let sq = tape.square(x);
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &array![[2.0, -4.0], [1.0, 8.0]]);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = crate::stream_rng(11, 0);
        let a = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 4, 2);
        let err = grad_check(
            |tape, ids| {
                let m = tape.matmul(ids[0], ids[1])?;
                let sq = tape.square(m);
                Ok(tape.mean(sq))
            },
            &[a, b],
        )
        .unwrap();
        assert!(err < 1e-5, "matmul grad err {err}");
    }

    #[test]
    fn composite_graph_gradient_matches_finite_differences() {
        let mut rng = crate::stream_rng(12, 0);
        let x = randn(&mut rng, 5, 3);
        let w = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 1, 4);
        let err = grad_check(
            |tape, ids| {
                let h = tape.matmul(ids[0], ids[1])?;
                let h = tape.add_bias(h, ids[2])?;
                let h = tape.leaky_relu(h, 0.2);
                let h = tape.square(h);
                Ok(tape.mean(h))
            },
            &[x, w, b],
        )
        .unwrap();
        assert!(err < 1e-4, "composite grad err {err}");
    }

    #[test]
    fn broadcast_and_clip_gradients() {
        let mut rng = crate::stream_rng(13, 0);
        let x = randn(&mut rng, 4, 2);
        let v = randn(&mut rng, 1, 1);
        let err = grad_check(
            |tape, ids| {
                let d = tape.sub(ids[0], ids[1])?;
                let c = tape.clip(d, -0.7, 0.7);
                let m = tape.mul(c, ids[0])?;
                Ok(tape.mean(m))
            },
            &[x, v],
        )
        .unwrap();
        assert!(err < 1e-4, "broadcast/clip grad err {err}");
    }

    #[test]
    fn softmax_rows_gradient() {
        let mut rng = crate::stream_rng(14, 0);
        let x = randn(&mut rng, 3, 5);
        let w = randn(&mut rng, 5, 1);
        let err = grad_check(
            |tape, ids| {
                let p = tape.softmax_rows(ids[0]);
                let y = tape.matmul(p, ids[1])?;
                let y = tape.square(y);
                Ok(tape.sum(y))
            },
            &[x, w],
        )
        .unwrap();
        assert!(err < 1e-5, "softmax grad err {err}");
    }

    #[test]
    fn indicator_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[0.5], [-1.0], [2.0]]);
        let v = tape.leaf(array![[0.0]]);
        let ind = tape.indicator_leq(x, v).unwrap();
        assert_eq!(tape.value(ind), &array![[0.0], [1.0], [0.0]]);
        let prod = tape.mul(ind, x).unwrap();
        let s = tape.sum(prod);
        let grads = tape.backward(s).unwrap();
        // only the direct x path contributes: grad = indicator values
        assert_eq!(grads.get(x).unwrap(), &array![[0.0], [1.0], [0.0]]);
        // v is reached only through the stopped indicator: no gradient at all
        assert!(grads.get(v).is_none() || grads.get(v).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn batchnorm_train_normalizes_and_backprops() {
        let mut rng = crate::stream_rng(15, 0);
        let x = randn(&mut rng, 64, 3).mapv(|v| 2.0 + 3.0 * v);
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let gamma = tape.leaf(Array2::from_elem((1, 3), 1.0));
        let beta = tape.leaf(Array2::zeros((1, 3)));
        let y = tape.batchnorm_train(xid, gamma, beta, 1e-5).unwrap();
        let yv = tape.value(y);
        for j in 0..3 {
            let col = yv.column(j);
            let mean = col.sum() / 64.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-6, "bn mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "bn var {var}");
        }

        let g = randn(&mut rng, 1, 3);
        let b = randn(&mut rng, 1, 3);
        let err = grad_check(
            |tape, ids| {
                let y = tape.batchnorm_train(ids[0], ids[1], ids[2], 1e-5)?;
                let y = tape.square(y);
                Ok(tape.mean(y))
            },
            &[randn(&mut rng, 8, 3), g, b],
        )
        .unwrap();
        assert!(err < 1e-4, "bn train grad err {err}");
    }

    #[test]
    fn batchnorm_eval_uses_frozen_stats() {
        let rm = array![[1.0, -2.0]];
        let rv = array![[4.0, 0.25]];
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, -2.0], [3.0, -1.5]]);
        let gamma = tape.leaf(Array2::from_elem((1, 2), 1.0));
        let beta = tape.leaf(Array2::zeros((1, 2)));
        let y = tape.batchnorm_eval(x, gamma, beta, &rm, &rv, 0.0).unwrap();
        let yv = tape.value(y);
        assert!((yv[(0, 0)] - 0.0).abs() < 1e-12);
        assert!((yv[(1, 0)] - 1.0).abs() < 1e-12);
        assert!((yv[(1, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn soft_sort_gradient_matches_finite_differences() {
        let mut rng = crate::stream_rng(16, 0);
        let x = randn(&mut rng, 12, 1);
        let w = randn(&mut rng, 1, 12);
        for tau in [0.1, 0.5] {
            let err = grad_check(
                |tape, ids| {
                    let s = tape.soft_sort(ids[0], tau)?;
                    let y = tape.matmul(ids[1], s)?;
                    Ok(tape.square(y))
                },
                &[x.clone(), w.clone()],
            )
            .unwrap();
            assert!(err < 1e-4, "soft sort grad err {err} at tau {tau}");
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = crate::stream_rng(17, 0);
            let x = randn(&mut rng, 10, 6);
            let w = randn(&mut rng, 6, 4);
            let mut tape = Tape::new();
            let xi = tape.leaf(x);
            let wi = tape.leaf(w);
            let h = tape.matmul(xi, wi).unwrap();
            let h = tape.leaky_relu(h, 0.2);
            let s = tape.mean(h);
            let grads = tape.backward(s).unwrap();
            (grads.get(xi).unwrap().clone(), grads.get(wi).unwrap().clone())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0]]);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn reshape_and_concat_roundtrip_gradients() {
        let mut rng = crate::stream_rng(18, 0);
        let a = randn(&mut rng, 2, 3);
        let b = randn(&mut rng, 2, 2);
        let err = grad_check(
            |tape, ids| {
                let cat = tape.concat_cols(ids[0], ids[1])?;
                let r = tape.reshape(cat, 5, 2)?;
                let sq = tape.square(r);
                Ok(tape.sum(sq))
            },
            &[a, b],
        )
        .unwrap();
        assert!(err < 1e-6, "reshape/concat grad err {err}");
    }

    #[test]
    fn linear_map_grad_check_is_tight() {
        let mut rng = crate::stream_rng(19, 0);
        let x = randn(&mut rng, 4, 3);
        let err = grad_check(
            |tape, ids| {
                let s = tape.scale(ids[0], 2.5);
                Ok(tape.sum(s))
            },
            &[x],
        )
        .unwrap();
        assert!(err < 1e-9, "linear map err {err}");
    }
}
