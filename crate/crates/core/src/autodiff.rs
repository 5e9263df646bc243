// Reverse-mode tape over `Matrix` values.
//
// Nodes are appended in evaluation order, so the node list is already a
// topological order and backward is a single reverse sweep. Leaves are
// either named parameters (reported by `backward`) or constants.

use std::collections::BTreeMap;

use crate::error::{mismatch, Error, Result};
use crate::tensor::{matmul, softmax_rows, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which branch of the graded ReLU to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReluVariant {
    Primary,
    SignPreserving,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    Softmax(Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    Sigmoid(Var),
    PowConst(Var, f64),
    Clamp(Var, f64, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
    SumCols(Var),
    Max(Var, usize),
    GradedRelu {
        x: Var,
        q: Var,
        variant: ReluVariant,
    },
    ExpActivation {
        x: Var,
        q: Var,
    },
    BceLogits(Var, Matrix),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Recorded computation graph.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    kink_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_str(m: &Matrix) -> String {
    format!("{}x{}", m.rows(), m.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named parameter leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Matrix) -> Var {
        let v = self.push(value, Op::Leaf);
        self.params.push((name.into(), v));
        v
    }

    /// Unregistered leaf; gradients are not reported for it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Smallest distance of any recorded input from a non-smooth point
    /// (ReLU and |x| at 0, clamp bounds, ties in max).
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    fn note_kinks(&mut self, values: impl Iterator<Item = f64>) {
        for v in values {
            self.kink_margin = self.kink_margin.min(v.abs());
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch(op, shape_str(x), shape_str(y)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    fn check_row(&self, op: &'static str, a: Var, r: Var) -> Result<()> {
        let (x, row) = (self.value(a), self.value(r));
        if row.rows() != 1 || row.cols() != x.cols() {
            return Err(mismatch(op, format!("1x{}", x.cols()), shape_str(row)));
        }
        Ok(())
    }

    /// `a + r` with the 1×c row `r` broadcast over rows.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.check_row("add_row", a, r)?;
        let mut v = self.value(a).clone();
        let row = self.value(r).data().to_vec();
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(&row) {
                *o += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, r)))
    }

    /// `a ⊙ r` with the 1×c row `r` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.check_row("mul_row", a, r)?;
        let mut v = self.value(a).clone();
        let row = self.value(r).data().to_vec();
        for i in 0..v.rows() {
            for (o, b) in v.row_mut(i).iter_mut().zip(&row) {
                *o *= b;
            }
        }
        Ok(self.push(v, Op::MulRow(a, r)))
    }

    /// `a ⊙ c` with the r×1 column `c` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (x, col) = (self.value(a), self.value(c));
        if col.cols() != 1 || col.rows() != x.rows() {
            return Err(mismatch("mul_col", format!("{}x1", x.rows()), shape_str(col)));
        }
        let mut v = x.clone();
        let col = col.data().to_vec();
        for (i, s) in col.iter().enumerate() {
            v.row_mut(i).iter_mut().for_each(|o| *o *= s);
        }
        Ok(self.push(v, Op::MulCol(a, c)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a).clone();
        self.note_kinks(x.data().iter().copied());
        let v = x.map(|t| t.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let x = self.value(a).clone();
        self.note_kinks(x.data().iter().copied());
        let v = x.map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::PowConst(a, p))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let x = self.value(a).clone();
        self.note_kinks(x.data().iter().map(|t| (t - lo).abs().min((t - hi).abs())));
        let v = x.map(|t| t.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Row-wise `((z − μ)/√(σ² + ε)) ⊙ γ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check_row("layer_norm", x, gamma)?;
        self.check_row("layer_norm", x, beta)?;
        let xm = self.value(x);
        let (n, d) = xm.shape();
        let mut xhat = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xm.row(i);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|t| (t - mu).powi(2)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            for (o, t) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (t - mu) * s;
            }
            inv_std.push(s);
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = xhat.clone();
        for i in 0..n {
            for (k, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = *o * g[k] + b[k];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xm = self.value(x);
        let mut out = xm.clone();
        let mut norms = Vec::with_capacity(xm.rows());
        for i in 0..xm.rows() {
            let norm = xm.row(i).iter().map(|t| t * t).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroAfterGrading);
            }
            out.row_mut(i).iter_mut().for_each(|t| *t /= norm);
            norms.push(norm);
        }
        Ok(self.push(out, Op::NormalizeRows { x, norms }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::concat_cols(&mats)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, len)?;
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Column sums as a 1×c row.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for (o, t) in out.iter_mut().zip(x.row(i)) {
                *o += t;
            }
        }
        self.push(Matrix::row_vector(&out), Op::SumCols(a))
    }

    /// Largest entry as a 1×1 node; ties resolve to the first index.
    pub fn max(&mut self, a: Var) -> Var {
        let x = self.value(a).clone();
        let mut best = 0;
        for (i, t) in x.data().iter().enumerate() {
            if *t > x.data()[best] {
                best = i;
            }
        }
        let top = x.data()[best];
        let gap = x
            .data()
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != best)
            .map(|(_, t)| top - t)
            .fold(f64::INFINITY, f64::min);
        self.note_kinks(std::iter::once(gap));
        self.push(Matrix::scalar(top), Op::Max(a, best))
    }

    /// Graded ReLU with per-column grades `q` (1×c, strictly positive).
    pub fn graded_relu(&mut self, x: Var, q: Var, variant: ReluVariant) -> Result<Var> {
        self.check_row("graded_relu", x, q)?;
        let qs = self.value(q).data().to_vec();
        if let Some(bad) = qs.iter().find(|g| !(**g > 0.0)) {
            return Err(Error::NonPositiveGrade(*bad));
        }
        let xm = self.value(x).clone();
        self.note_kinks(xm.data().iter().copied());
        let mut out = xm.clone();
        for i in 0..xm.rows() {
            for (k, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = graded_relu_scalar(*o, qs[k], variant);
            }
        }
        Ok(self.push(out, Op::GradedRelu { x, q, variant }))
    }

    /// `exp(x/q) − 1` with per-column grades `q` (1×c, strictly positive).
    pub fn exp_activation(&mut self, x: Var, q: Var) -> Result<Var> {
        self.check_row("exp_activation", x, q)?;
        let qs = self.value(q).data().to_vec();
        if let Some(bad) = qs.iter().find(|g| !(**g > 0.0)) {
            return Err(Error::NonPositiveGrade(*bad));
        }
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            for (k, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = (*o / qs[k]).exp() - 1.0;
            }
        }
        Ok(self.push(out, Op::ExpActivation { x, q }))
    }

    /// Elementwise binary cross-entropy on logits against fixed targets.
    pub fn bce_logits(&mut self, z: Var, targets: &Matrix) -> Result<Var> {
        let zm = self.value(z);
        if zm.shape() != targets.shape() {
            return Err(mismatch("bce_logits", shape_str(zm), shape_str(targets)));
        }
        let mut out = zm.clone();
        for (o, y) in out.data_mut().iter_mut().zip(targets.data()) {
            let t = *o;
            *o = t.max(0.0) - y * t + (-t.abs()).exp().ln_1p();
        }
        Ok(self.push(out, Op::BceLogits(z, targets.clone())))
    }

    /// Reverse sweep from a 1×1 root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let r = self.value(root);
        if r.shape() != (1, 1) {
            return Err(Error::NotScalarRoot {
                rows: r.rows(),
                cols: r.cols(),
            });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(idx, &g, &mut adj);
            adj[idx] = Some(g);
        }
        let mut by_name = BTreeMap::new();
        for (name, v) in &self.params {
            let shape = self.value(*v).shape();
            let g = adj
                .get(v.0)
                .and_then(|a| a.clone())
                .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1));
            by_name.insert(name.clone(), g);
        }
        Ok(Gradients {
            adjoints: adj,
            by_name,
        })
    }

    fn propagate(&self, idx: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                accumulate(adj, *a, matmul(g, &bv.transpose()).expect("shapes recorded"));
                accumulate(adj, *b, matmul(&av.transpose(), g).expect("shapes recorded"));
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let da = g.hadamard(self.value(*b)).expect("shapes recorded");
                let db = g.hadamard(self.value(*a)).expect("shapes recorded");
                accumulate(adj, *a, da);
                accumulate(adj, *b, db);
            }
            Op::AddRow(a, r) => {
                accumulate(adj, *a, g.clone());
                accumulate(adj, *r, col_sums(g));
            }
            Op::MulRow(a, r) => {
                let row = self.value(*r).data();
                let mut da = g.clone();
                for i in 0..da.rows() {
                    for (o, s) in da.row_mut(i).iter_mut().zip(row) {
                        *o *= s;
                    }
                }
                let dr = col_sums(&g.hadamard(self.value(*a)).expect("shapes recorded"));
                accumulate(adj, *a, da);
                accumulate(adj, *r, dr);
            }
            Op::MulCol(a, c) => {
                let col = self.value(*c).data();
                let av = self.value(*a);
                let mut da = g.clone();
                let mut dc = vec![0.0; col.len()];
                for (i, s) in col.iter().enumerate() {
                    da.row_mut(i).iter_mut().for_each(|o| *o *= s);
                    dc[i] = g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum();
                }
                accumulate(adj, *a, da);
                accumulate(adj, *c, Matrix::col_vector(&dc));
            }
            Op::Scale(a, s) => accumulate(adj, *a, g.scale(*s)),
            Op::AddScalar(a) => accumulate(adj, *a, g.clone()),
            Op::Transpose(a) => accumulate(adj, *a, g.transpose()),
            Op::Softmax(a) => {
                let mut da = g.clone();
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let dot: f64 = g.row(i).iter().zip(y).map(|(x, p)| x * p).sum();
                    for (o, p) in da.row_mut(i).iter_mut().zip(y) {
                        *o = p * (*o - dot);
                    }
                }
                accumulate(adj, *a, da);
            }
            Op::Exp(a) => accumulate(adj, *a, g.hadamard(out).expect("shapes recorded")),
            Op::Ln(a) => {
                let x = self.value(*a);
                accumulate(adj, *a, zip(g, x, |d, t| d / t));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                accumulate(adj, *a, zip(g, x, |d, t| if t > 0.0 { d } else { 0.0 }));
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                accumulate(adj, *a, zip(g, x, |d, t| if t == 0.0 { 0.0 } else { d * t.signum() }));
            }
            Op::Sqrt(a) => accumulate(adj, *a, zip(g, out, |d, y| d / (2.0 * y))),
            Op::Sigmoid(a) => accumulate(adj, *a, zip(g, out, |d, y| d * y * (1.0 - y))),
            Op::PowConst(a, p) => {
                let x = self.value(*a);
                accumulate(adj, *a, zip(g, x, |d, t| d * p * t.powf(p - 1.0)));
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                accumulate(
                    adj,
                    *a,
                    zip(g, x, |d, t| if t >= *lo && t <= *hi { d } else { 0.0 }),
                );
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data();
                let (n, d) = xhat.shape();
                let mut dx = Matrix::zeros(n, d);
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for i in 0..n {
                    let gi = g.row(i);
                    let xh = xhat.row(i);
                    let dxhat: Vec<f64> = (0..d).map(|k| gi[k] * gam[k]).collect();
                    for k in 0..d {
                        dgamma[k] += gi[k] * xh[k];
                        dbeta[k] += gi[k];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for (k, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = inv_std[i] * (dxhat[k] - mean_d - xh[k] * mean_dx);
                    }
                }
                accumulate(adj, *x, dx);
                accumulate(adj, *gamma, Matrix::row_vector(&dgamma));
                accumulate(adj, *beta, Matrix::row_vector(&dbeta));
            }
            Op::NormalizeRows { x, norms } => {
                let mut dx = g.clone();
                for (i, norm) in norms.iter().enumerate() {
                    let y = out.row(i);
                    let dot: f64 = g.row(i).iter().zip(y).map(|(a, b)| a * b).sum();
                    for (o, p) in dx.row_mut(i).iter_mut().zip(y) {
                        *o = (*o - p * dot) / norm;
                    }
                }
                accumulate(adj, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    accumulate(adj, *p, g.slice_cols(start, c).expect("shapes recorded"));
                    start += c;
                }
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut da = Matrix::zeros(x.rows(), x.cols());
                for i in 0..g.rows() {
                    da.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(adj, *a, da);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                accumulate(adj, *a, Matrix::filled(r, c, g.item()));
            }
            Op::SumCols(a) => {
                let (r, c) = self.value(*a).shape();
                let mut da = Matrix::zeros(r, c);
                for i in 0..r {
                    da.row_mut(i).copy_from_slice(g.row(0));
                }
                accumulate(adj, *a, da);
            }
            Op::Max(a, best) => {
                let (r, c) = self.value(*a).shape();
                let mut da = Matrix::zeros(r, c);
                da.data_mut()[*best] = g.item();
                accumulate(adj, *a, da);
            }
            Op::GradedRelu { x, q, variant } => {
                let xm = self.value(*x);
                let qs = self.value(*q).data();
                let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                let mut dq = vec![0.0; qs.len()];
                for i in 0..xm.rows() {
                    for k in 0..xm.cols() {
                        let t = xm.get(i, k);
                        let live = match variant {
                            ReluVariant::Primary => t != 0.0,
                            ReluVariant::SignPreserving => t > 0.0,
                        };
                        if !live {
                            continue;
                        }
                        let y = out.get(i, k);
                        let d = g.get(i, k);
                        let qk = qs[k];
                        dx.set(i, k, d * y / (qk * t));
                        dq[k] += -d * y * t.abs().ln() / (qk * qk);
                    }
                }
                accumulate(adj, *x, dx);
                accumulate(adj, *q, Matrix::row_vector(&dq));
            }
            Op::ExpActivation { x, q } => {
                let xm = self.value(*x);
                let qs = self.value(*q).data();
                let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                let mut dq = vec![0.0; qs.len()];
                for i in 0..xm.rows() {
                    for k in 0..xm.cols() {
                        let e = out.get(i, k) + 1.0;
                        let d = g.get(i, k);
                        dx.set(i, k, d * e / qs[k]);
                        dq[k] += -d * e * xm.get(i, k) / (qs[k] * qs[k]);
                    }
                }
                accumulate(adj, *x, dx);
                accumulate(adj, *q, Matrix::row_vector(&dq));
            }
            Op::BceLogits(z, targets) => {
                let zm = self.value(*z);
                let mut dz = zm.map(sigmoid);
                for ((o, y), d) in dz.data_mut().iter_mut().zip(targets.data()).zip(g.data()) {
                    *o = (*o - y) * d;
                }
                accumulate(adj, *z, dz);
            }
        }
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn graded_relu_scalar(x: f64, q: f64, variant: ReluVariant) -> f64 {
    let mag = x.abs().powf(1.0 / q);
    match variant {
        ReluVariant::Primary => mag.max(0.0),
        ReluVariant::SignPreserving => (mag * x.signum()).max(0.0),
    }
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let mut out = a.clone();
    for (o, t) in out.data_mut().iter_mut().zip(b.data()) {
        *o = f(*o, *t);
    }
    out
}

fn col_sums(g: &Matrix) -> Matrix {
    let mut out = vec![0.0; g.cols()];
    for i in 0..g.rows() {
        for (o, t) in out.iter_mut().zip(g.row(i)) {
            *o += t;
        }
    }
    Matrix::row_vector(&out)
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_scaled(&g, 1.0).expect("adjoint shapes match"),
        slot => *slot = Some(g),
    }
}

/// Adjoints from one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    by_name: BTreeMap<String, Matrix>,
}

impl Gradients {
    /// Adjoint of any node reached by the sweep.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.by_name.get(name)
    }

    pub fn named(&self) -> &BTreeMap<String, Matrix> {
        &self.by_name
    }

    pub fn into_named(self) -> BTreeMap<String, Matrix> {
        self.by_name
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter index and flat coordinate of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// `Tape::kink_margin` at the unperturbed point.
    pub kink_margin: f64,
}

/// Compares tape gradients with central differences over every coordinate.
///
/// `f` receives a fresh tape and one leaf per entry of `point`.
pub fn grad_check<F>(f: F, point: &[Matrix], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = point
        .iter()
        .enumerate()
        .flat_map(|(p, m)| (0..m.data().len()).map(move |c| (p, c)))
        .collect();
    grad_check_coords(f, point, h, &coords)
}

/// Finite-difference formula used as the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, truncation O(h²).
    Central,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, truncation O(h⁴).
    FivePoint,
}

/// As `grad_check`, restricted to the listed `(parameter, flat index)` pairs.
pub fn grad_check_coords<F>(f: F, point: &[Matrix], h: f64, coords: &[(usize, usize)]) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_stencil(f, point, h, coords, Stencil::Central)
}

/// Finite-difference check over `coords` with an explicit stencil.
pub fn grad_check_stencil<F>(f: F, point: &[Matrix], h: f64, coords: &[(usize, usize)], stencil: Stencil) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point
        .iter()
        .enumerate()
        .map(|(i, m)| tape.param(format!("p{i}"), m.clone()))
        .collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let kink_margin = tape.kink_margin();

    let eval = |pt: &[Matrix]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = pt.iter().map(|m| t.constant(m.clone())).collect();
        let r = f(&mut t, &vs)?;
        let v = t.value(r).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut work: Vec<Matrix> = point.to_vec();
    let mut at = |p: usize, c: usize, orig: f64, step: f64| -> Result<f64> {
        work[p].data_mut()[c] = orig + step;
        let v = eval(&work);
        work[p].data_mut()[c] = orig;
        v
    };
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        kink_margin,
    };
    for &(p, c) in coords {
        let orig = point[p].data()[c];
        let numeric = match stencil {
            Stencil::Central => (at(p, c, orig, h)? - at(p, c, orig, -h)?) / (2.0 * h),
            Stencil::FivePoint => {
                let (p1, m1) = (at(p, c, orig, h)?, at(p, c, orig, -h)?);
                let (p2, m2) = (at(p, c, orig, 2.0 * h)?, at(p, c, orig, -2.0 * h)?);
                (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
            }
        };
        let analytic = grads.wrt(vars[p]).map_or(0.0, |g| g.data()[c]);
        let rel = (analytic - numeric).abs() / (numeric.abs() + 1e-8);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((p, c));
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{randn_matrix, Rng};

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let w = t.param("W", Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap());
        let s = t.sum(w);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get("W").unwrap(), &Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn squared_norm_gradient_is_two_x() {
        let x = Matrix::row_vector(&[0.3, -1.2, 2.0]);
        let mut t = Tape::new();
        let v = t.param("x", x.clone());
        let sq = t.mul(v, v).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get("x").unwrap(), &x.scale(2.0));
    }

    #[test]
    fn graded_mse_gradient_hand_case() {
        // L = (1/n) Σ q_i (y_i − ŷ_i)², q = (2,3), y − ŷ = (1, 0)
        let mut t = Tape::new();
        let yhat = t.param("yhat", Matrix::row_vector(&[0.0, 5.0]));
        let y = t.constant(Matrix::row_vector(&[1.0, 5.0]));
        let q = t.constant(Matrix::row_vector(&[2.0, 3.0]));
        let e = t.sub(y, yhat).unwrap();
        let e2 = t.mul(e, e).unwrap();
        let w = t.mul_row(e2, q).unwrap();
        let s = t.sum(w);
        let l = t.scale(s, 0.5);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get("yhat").unwrap().data(), &[-2.0, 0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let w = t.param("W", Matrix::zeros(2, 1));
        assert!(matches!(t.backward(w), Err(Error::NotScalarRoot { rows: 2, cols: 1 })));
    }

    #[test]
    fn unreached_params_get_zero_adjoints() {
        let mut t = Tape::new();
        let a = t.param("a", Matrix::filled(1, 2, 1.0));
        let _b = t.param("b", Matrix::filled(3, 1, 1.0));
        let s = t.sum(a);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get("b").unwrap(), &Matrix::zeros(3, 1));
    }

    #[test]
    fn grad_check_quadratic() {
        let x = Matrix::row_vector(&[0.7, -1.3, 2.2]);
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let lin = t.scale(v[0], 3.0);
                let s = t.add(sq, lin)?;
                Ok(t.sum(s))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn five_point_stencil_is_exact_on_quartics() {
        let x = Matrix::row_vector(&[0.7, -1.3, 2.2]);
        let quartic = |t: &mut Tape, v: &[Var]| {
            let sq = t.mul(v[0], v[0])?;
            let q4 = t.mul(sq, sq)?;
            Ok(t.sum(q4))
        };
        let coords = [(0, 0), (0, 1), (0, 2)];
        let five = grad_check_stencil(quartic, &[x.clone()], 1e-2, &coords, Stencil::FivePoint).unwrap();
        let central = grad_check_stencil(quartic, &[x], 1e-2, &coords, Stencil::Central).unwrap();
        assert!(five.max_rel_error <= 1e-10, "{five:?}");
        assert!(central.max_rel_error > 1e-6);
    }

    #[test]
    fn grad_check_reports_non_finite() {
        let x = Matrix::row_vector(&[1e-6]);
        let r = grad_check(
            |t, v| {
                let l = t.ln(v[0]);
                Ok(t.sum(l))
            },
            &[x],
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    fn check(f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, point: &[Matrix]) -> f64 {
        grad_check(f, point, 1e-5).unwrap().max_rel_error
    }

    /// Weighted sum with a fixed random weight so every output coordinate matters.
    fn contract(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
        let (r, c) = t.value(y).shape();
        let w = t.constant(randn_matrix(&mut Rng::new(seed), r, c));
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    }

    #[test]
    fn primitive_gradients_match_central_differences() {
        let mut rng = Rng::new(21);
        for trial in 0..20 {
            let a = randn_matrix(&mut rng, 3, 4);
            let b = randn_matrix(&mut rng, 4, 2);
            let row = randn_matrix(&mut rng, 1, 4);
            let col = randn_matrix(&mut rng, 3, 1);
            let pos = randn_matrix(&mut rng, 3, 4).map(|v| v.abs() + 0.5);
            let q = Matrix::row_vector(&[0.5, 1.0, 2.0, 3.0]);
            let s = trial as u64;
            let tol = 1e-4;

            assert!(check(|t, v| { let y = t.matmul(v[0], v[1])?; contract(t, y, s) }, &[a.clone(), b.clone()]) <= tol);
            assert!(check(|t, v| { let y = t.softmax_rows(v[0]); contract(t, y, s) }, &[a.clone()]) <= tol);
            assert!(check(|t, v| { let y = t.mul_row(v[0], v[1])?; contract(t, y, s) }, &[a.clone(), row.clone()]) <= tol);
            assert!(check(|t, v| { let y = t.add_row(v[0], v[1])?; contract(t, y, s) }, &[a.clone(), row.clone()]) <= tol);
            assert!(check(|t, v| { let y = t.mul_col(v[0], v[1])?; contract(t, y, s) }, &[a.clone(), col.clone()]) <= tol);
            assert!(check(
                |t, v| { let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?; contract(t, y, s) },
                &[a.clone(), row.clone(), row.map(|x| x * 0.5)]
            ) <= tol);
            assert!(check(|t, v| { let y = t.normalize_rows(v[0])?; contract(t, y, s) }, &[a.clone()]) <= tol);
            assert!(check(|t, v| { let y = t.transpose(v[0]); contract(t, y, s) }, &[a.clone()]) <= tol);
            assert!(check(|t, v| { let y = t.exp(v[0]); contract(t, y, s) }, &[a.clone()]) <= tol);
            assert!(check(|t, v| { let y = t.ln(v[0]); contract(t, y, s) }, &[pos.clone()]) <= tol);
            assert!(check(|t, v| { let y = t.sqrt(v[0]); contract(t, y, s) }, &[pos.clone()]) <= tol);
            assert!(check(|t, v| { let y = t.sigmoid(v[0]); contract(t, y, s) }, &[a.clone()]) <= tol);
            assert!(check(|t, v| { let y = t.pow_const(v[0], 1.7); contract(t, y, s) }, &[pos.clone()]) <= tol);
            assert!(check(
                |t, v| {
                    let parts = [v[0], v[1]];
                    let y = t.concat_cols(&parts)?;
                    let z = t.slice_cols(y, 1, 3)?;
                    contract(t, z, s)
                },
                &[a.clone(), col.clone()]
            ) <= tol);
            assert!(check(|t, v| { let y = t.sum_cols(v[0]); contract(t, y, s) }, &[a.clone()]) <= tol);
            assert!(check(
                |t, v| { let y = t.graded_relu(v[0], v[1], ReluVariant::Primary)?; contract(t, y, s) },
                &[a.clone(), q.clone()]
            ) <= tol);
            assert!(check(
                |t, v| { let y = t.graded_relu(v[0], v[1], ReluVariant::SignPreserving)?; contract(t, y, s) },
                &[a.clone(), q.clone()]
            ) <= tol);
            assert!(check(
                |t, v| { let y = t.exp_activation(v[0], v[1])?; contract(t, y, s) },
                &[a.clone(), q.clone()]
            ) <= tol);
            let targets = a.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            assert!(check(|t, v| { let y = t.bce_logits(v[0], &targets)?; contract(t, y, s) }, &[a.clone()]) <= tol);
        }
    }

    #[test]
    fn softmax_log_gradient_matches_brute_force_jacobian() {
        let mut rng = Rng::new(77);
        for _ in 0..10 {
            let x = randn_matrix(&mut rng, 3, 3);
            let w = randn_matrix(&mut rng, 3, 3);
            let mut t = Tape::new();
            let xv = t.param("x", x.clone());
            let s = t.softmax_rows(xv);
            let l = t.ln(s);
            let wv = t.constant(w.clone());
            let p = t.mul(l, wv).unwrap();
            let root = t.sum(p);
            let g = t.backward(root).unwrap();

            let y = softmax_rows(&x);
            for i in 0..3 {
                for k in 0..3 {
                    // ∂f/∂x_ik = Σ_j (w_ij / y_ij) · J_jk, J = diag(y) − y yᵀ
                    let mut expect = 0.0;
                    for j in 0..3 {
                        let jac = if j == k { y.get(i, j) * (1.0 - y.get(i, k)) } else { -y.get(i, j) * y.get(i, k) };
                        expect += w.get(i, j) / y.get(i, j) * jac;
                    }
                    assert!((g.get("x").unwrap().get(i, k) - expect).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn kink_margin_tracks_relu_inputs() {
        let mut t = Tape::new();
        let x = t.param("x", Matrix::row_vector(&[0.5, -0.01, 2.0]));
        let _ = t.relu(x);
        assert!((t.kink_margin() - 0.01).abs() < 1e-15);
    }
}
