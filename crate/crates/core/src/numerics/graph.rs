//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Graph`] is built eagerly: every op computes its value immediately and
//! appends a node recording its inputs. [`Graph::backward`] then walks the
//! nodes in reverse and accumulates adjoints. Only nodes that transitively
//! depend on a parameter receive gradients; [`Graph::stop_gradient`] cuts that
//! dependency.
//!
//! All values are viewed as matrices (`rows × cols`); a rank-1 tensor is a
//! single row.

use super::tensor::{axpy, dot, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise scalar functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Log,
    Exp,
    Square,
    Neg,
    Scale(f64),
    AddScalar(f64),
    LeakyRelu(f64),
    /// Clamp into `[lo, hi]`; gradient is zero outside the interval.
    Clamp { lo: f64, hi: f64 },
    /// Rescaled Student-t kernel of a squared distance:
    /// `(1 + a/nu)^(-(nu+1)/2)`.
    TKernelSq { nu: f64 },
}

impl Unary {
    fn name(&self) -> &'static str {
        match self {
            Unary::Log => "log",
            Unary::Exp => "exp",
            Unary::Square => "square",
            Unary::Neg => "neg",
            Unary::Scale(_) => "scale",
            Unary::AddScalar(_) => "add_scalar",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Clamp { .. } => "clamp",
            Unary::TKernelSq { .. } => "t_kernel",
        }
    }

    fn apply(&self, a: f64) -> f64 {
        match *self {
            Unary::Log => a.ln(),
            Unary::Exp => a.exp(),
            Unary::Square => a * a,
            Unary::Neg => -a,
            Unary::Scale(c) => c * a,
            Unary::AddScalar(c) => a + c,
            Unary::LeakyRelu(s) => {
                if a > 0.0 {
                    a
                } else {
                    s * a
                }
            }
            Unary::Clamp { lo, hi } => a.clamp(lo, hi),
            Unary::TKernelSq { nu } => (1.0 + a / nu).powf(-(nu + 1.0) / 2.0),
        }
    }

    /// Derivative given input `a` and output `y`.
    fn deriv(&self, a: f64, y: f64) -> f64 {
        match *self {
            Unary::Log => 1.0 / a,
            Unary::Exp => y,
            Unary::Square => 2.0 * a,
            Unary::Neg => -1.0,
            Unary::Scale(c) => c,
            Unary::AddScalar(_) => 1.0,
            Unary::LeakyRelu(s) => {
                if a > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Unary::Clamp { lo, hi } => {
                if a < lo || a > hi {
                    0.0
                } else {
                    1.0
                }
            }
            Unary::TKernelSq { nu } => -(nu + 1.0) / (2.0 * nu) * y / (1.0 + a / nu),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Var, Unary),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MatMulT(Var, Var),
    InstanceNorm { a: Var, inv_std: Vec<f64> },
    RowSqDist { a: Var, pairs: Vec<(usize, usize)> },
    SelectRows { a: Var, idx: Vec<usize> },
    SumAll(Var),
    RowSum(Var),
    StopGrad,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Eager computation graph with a reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` if nothing reached it.
    pub fn get_or_zeros(&mut self, v: Var, like: &Tensor) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .map(|g| g.reshape(like.shape().to_vec()).expect("gradient shape"))
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite result in `{name}` (node {})",
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Same value, treated as a constant by the reverse sweep.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.nodes.push(Node {
            value,
            op: Op::StopGrad,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Result<Var> {
        let value = self.value(a).map(|x| f.apply(x));
        let rg = self.rg(a);
        self.push(value, Op::Unary(a, f), rg, f.name())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Neg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Unary::Scale(c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Unary::AddScalar(c))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, Unary::Clamp { lo, hi })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let value = self
            .value(a)
            .zip_map(self.value(b), f)
            .map_err(|e| e.context(name))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// `a[b×n] + row[n]`, broadcasting the row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.len() != av.cols() {
            return Err(Error::Dimension(format!(
                "add_row: row of length {} onto {} columns",
                rv.len(),
                av.cols()
            )));
        }
        let mut out = av.clone();
        let c = av.cols();
        for i in 0..av.rows() {
            for (o, r) in out.row_mut(i).iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        let out = out.reshape(vec![av.rows(), c])?;
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg, "add_row")
    }

    /// `x · wᵀ` with `x: [b×in]`, `w: [out×in]`.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let value = self.value(x).matmul_t(self.value(w))?;
        let rg = self.rg(x) || self.rg(w);
        self.push(value, Op::MatMulT(x, w), rg, "matmul")
    }

    /// Normalizes every row to zero mean and unit variance, with `eps` added
    /// to the variance.
    pub fn instance_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (value, inv_std) = instance_norm_forward(self.value(a), eps);
        let rg = self.rg(a);
        self.push(value, Op::InstanceNorm { a, inv_std }, rg, "instance_norm")
    }

    /// Squared Euclidean distance between row pairs, as an `[m×1]` column.
    pub fn row_sq_dist(&mut self, a: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let av = self.value(a);
        let n = av.rows();
        if pairs.is_empty() {
            return Err(Error::Dimension("row_sq_dist: no pairs".into()));
        }
        let mut out = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs {
            if i >= n || j >= n {
                return Err(Error::Dimension(format!(
                    "row_sq_dist: pair ({i},{j}) out of range for {n} rows"
                )));
            }
            out.push(
                av.row(i)
                    .iter()
                    .zip(av.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum(),
            );
        }
        let value = Tensor::from_parts_unchecked(vec![pairs.len(), 1], out)?;
        let rg = self.rg(a);
        self.push(
            value,
            Op::RowSqDist {
                a,
                pairs: pairs.to_vec(),
            },
            rg,
            "row_sq_dist",
        )
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(idx)?;
        let rg = self.rg(a);
        self.push(
            value,
            Op::SelectRows {
                a,
                idx: idx.to_vec(),
            },
            rg,
            "select_rows",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::from_parts_unchecked(vec![1, 1], vec![self.value(a).sum()])?;
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum across columns: `[b×n] -> [b×1]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let out: Vec<f64> = (0..av.rows()).map(|i| av.row(i).iter().sum()).collect();
        let value = Tensor::from_parts_unchecked(vec![av.rows(), 1], out)?;
        let rg = self.rg(a);
        self.push(value, Op::RowSum(a), rg, "row_sum")
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::StopGrad => {}
                Op::Unary(a, f) => {
                    if self.rg(*a) {
                        let av = self.value(*a).data();
                        let y = node.value.data();
                        let d: Vec<f64> = g
                            .data()
                            .iter()
                            .zip(av.iter().zip(y))
                            .map(|(gi, (&ai, &yi))| gi * f.deriv(ai, yi))
                            .collect();
                        accumulate(&mut grads, *a, self.value(*a), &d);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, self.value(*a), g.data());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, self.value(*b), g.data());
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, self.value(*a), g.data());
                    }
                    if self.rg(*b) {
                        let d: Vec<f64> = g.data().iter().map(|x| -x).collect();
                        accumulate(&mut grads, *b, self.value(*b), &d);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if self.rg(*a) {
                        let d: Vec<f64> = g.data().iter().zip(bv).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *a, self.value(*a), &d);
                    }
                    if self.rg(*b) {
                        let d: Vec<f64> = g.data().iter().zip(av).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads, *b, self.value(*b), &d);
                    }
                }
                Op::AddRow(a, r) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, self.value(*a), g.data());
                    }
                    if self.rg(*r) {
                        let c = g.cols();
                        let mut d = vec![0.0; c];
                        for i in 0..g.rows() {
                            for (di, gi) in d.iter_mut().zip(g.row(i)) {
                                *di += gi;
                            }
                        }
                        accumulate(&mut grads, *r, self.value(*r), &d);
                    }
                }
                Op::MatMulT(x, w) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (b, k, o) = (xv.rows(), xv.cols(), wv.rows());
                    if self.rg(*x) {
                        // dX = G · W
                        let mut d = vec![0.0; b * k];
                        for i in 0..b {
                            let gi = g.row(i);
                            let di = &mut d[i * k..(i + 1) * k];
                            for (j, &gij) in gi.iter().enumerate() {
                                if gij != 0.0 {
                                    axpy(gij, wv.row(j), di);
                                }
                            }
                        }
                        accumulate(&mut grads, *x, xv, &d);
                    }
                    if self.rg(*w) {
                        // dW = Gᵀ · X
                        let mut d = vec![0.0; o * k];
                        for i in 0..b {
                            let xi = xv.row(i);
                            for (j, &gij) in g.row(i).iter().enumerate() {
                                if gij != 0.0 {
                                    axpy(gij, xi, &mut d[j * k..(j + 1) * k]);
                                }
                            }
                        }
                        accumulate(&mut grads, *w, wv, &d);
                    }
                }
                Op::InstanceNorm { a, inv_std } => {
                    if self.rg(*a) {
                        let y = &node.value;
                        let c = y.cols();
                        let mut d = vec![0.0; y.len()];
                        for i in 0..y.rows() {
                            let (gi, yi) = (g.row(i), y.row(i));
                            let mg = gi.iter().sum::<f64>() / c as f64;
                            let mgy = dot(gi, yi) / c as f64;
                            for k in 0..c {
                                d[i * c + k] = inv_std[i] * (gi[k] - mg - yi[k] * mgy);
                            }
                        }
                        accumulate(&mut grads, *a, self.value(*a), &d);
                    }
                }
                Op::RowSqDist { a, pairs } => {
                    if self.rg(*a) {
                        let av = self.value(*a);
                        let c = av.cols();
                        let mut d = vec![0.0; av.len()];
                        for (m, &(i, j)) in pairs.iter().enumerate() {
                            let gm = 2.0 * g.data()[m];
                            for k in 0..c {
                                let diff = gm * (av.row(i)[k] - av.row(j)[k]);
                                d[i * c + k] += diff;
                                d[j * c + k] -= diff;
                            }
                        }
                        accumulate(&mut grads, *a, av, &d);
                    }
                }
                Op::SelectRows { a, idx } => {
                    if self.rg(*a) {
                        let av = self.value(*a);
                        let c = av.cols();
                        let mut d = vec![0.0; av.len()];
                        for (m, &i) in idx.iter().enumerate() {
                            axpy(1.0, g.row(m), &mut d[i * c..(i + 1) * c]);
                        }
                        accumulate(&mut grads, *a, av, &d);
                    }
                }
                Op::SumAll(a) => {
                    if self.rg(*a) {
                        let av = self.value(*a);
                        let d = vec![g.data()[0]; av.len()];
                        accumulate(&mut grads, *a, av, &d);
                    }
                }
                Op::RowSum(a) => {
                    if self.rg(*a) {
                        let av = self.value(*a);
                        let c = av.cols();
                        let mut d = vec![0.0; av.len()];
                        for i in 0..av.rows() {
                            d[i * c..(i + 1) * c].fill(g.data()[i]);
                        }
                        accumulate(&mut grads, *a, av, &d);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, like: &Tensor, d: &[f64]) {
    match &mut grads[v.0] {
        Some(t) => axpy(1.0, d, t.data_mut()),
        slot @ None => {
            *slot = Some(
                Tensor::from_parts_unchecked(like.shape().to_vec(), d.to_vec())
                    .expect("adjoint matches value shape"),
            )
        }
    }
}

pub(crate) fn instance_norm_forward(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let c = x.cols();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let r = x.row(i);
        let mean = r.iter().sum::<f64>() / c as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (o, v) in out.row_mut(i).iter_mut().zip(r) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut g = Graph::new();
        let w = g.param(m(1, 3, &[1.0, 2.0, 3.0]));
        let c = g.input(Tensor::scalar(4.0));
        let _unused = g.scale(w, 2.0).unwrap();
        let loss = g.sum(c).unwrap();
        let mut grads = g.backward(loss).unwrap();
        let gw = grads.get_or_zeros(w, g.value(w));
        assert!(gw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let x = m(1, 3, &[0.5, -1.0, 2.0]);
        let mut g = Graph::new();
        let w = g.param(m(1, 3, &[0.1, 0.2, 0.3]));
        let xv = g.input(x.clone());
        let p = g.mul(w, xv).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), x.data());
        assert!(grads.get(xv).is_none());
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut g = Graph::new();
        let w = g.param(m(1, 2, &[1.0, 2.0]));
        let sq = g.square(w).unwrap();
        let frozen = g.stop_gradient(sq);
        let loss = g.sum(frozen).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(w).is_none());
    }

    #[test]
    fn non_finite_intermediate_is_an_error() {
        let mut g = Graph::new();
        let w = g.param(m(1, 1, &[0.0]));
        assert!(matches!(g.log(w), Err(Error::Numeric(_))));
    }

    #[test]
    fn instance_norm_rows_standardized() {
        let x = m(2, 4, &[1.0, 2.0, 3.0, 10.0, -4.0, 0.5, 0.25, 8.0]);
        let (y, _) = instance_norm_forward(&x, 0.0);
        for i in 0..2 {
            let r = y.row(i);
            let mean = r.iter().sum::<f64>() / 4.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }
}
