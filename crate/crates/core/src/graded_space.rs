//! Graded vector spaces: the star action, grading matrices, graded norms
//! and graded activations.

use serde::{Deserialize, Serialize};

use crate::autodiff::{graded_relu_scalar, ReluVariant, Tape, Var};
use crate::error::{mismatch, Error, Result};
use crate::tensor::Matrix;

/// Grades attached to feature dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct GradingTuple(Vec<f64>);

impl GradingTuple {
    /// Non-negative finite grades.
    pub fn new(grades: Vec<f64>) -> Result<Self> {
        if let Some(bad) = grades.iter().find(|g| !g.is_finite() || **g < 0.0) {
            return Err(Error::InvalidGrade(*bad));
        }
        Ok(Self(grades))
    }

    /// Finite grades of either sign.
    pub fn signed(grades: Vec<f64>) -> Result<Self> {
        if let Some(bad) = grades.iter().find(|g| !g.is_finite()) {
            return Err(Error::InvalidGrade(*bad));
        }
        Ok(Self(grades))
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    /// Warm start `q_k = c·k` for `k = 0..d`.
    pub fn ramp(d: usize, c: f64) -> Result<Self> {
        Self::new((0..d).map(|k| c * k as f64).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sub-tuple `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.0.len() {
            return Err(mismatch("GradingTuple::slice", self.0.len(), start + len));
        }
        Ok(Self(self.0[start..start + len].to_vec()))
    }
}

impl TryFrom<Vec<f64>> for GradingTuple {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<GradingTuple> for Vec<f64> {
    fn from(q: GradingTuple) -> Self {
        q.0
    }
}

/// Scalar map `f` turning a grade into a linear grading weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightMap {
    AbsPlusOne,
    #[default]
    PlusOne,
    Identity,
    Affine { a: f64, b: f64 },
}

impl WeightMap {
    pub fn apply(&self, q: f64) -> f64 {
        match *self {
            WeightMap::AbsPlusOne => q.abs() + 1.0,
            WeightMap::PlusOne => q + 1.0,
            WeightMap::Identity => q,
            WeightMap::Affine { a, b } => a * q + b,
        }
    }

    pub fn derivative(&self, q: f64) -> f64 {
        match *self {
            WeightMap::AbsPlusOne => q.signum() * f64::from(q != 0.0),
            WeightMap::PlusOne => 1.0,
            WeightMap::Identity => 1.0,
            WeightMap::Affine { a, .. } => a,
        }
    }
}

/// How grades become diagonal weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GradingSpec {
    /// `diag(f(q_i))`.
    Linear {
        #[serde(default)]
        weight_map: WeightMap,
    },
    /// `diag(λ^{q_i})`, λ > 1.
    Exponential { lambda: f64 },
}

impl GradingSpec {
    pub fn linear(weight_map: WeightMap) -> Self {
        GradingSpec::Linear { weight_map }
    }

    pub fn exponential(lambda: f64) -> Self {
        GradingSpec::Exponential { lambda }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            GradingSpec::Exponential { lambda } if !(lambda > 1.0) || !lambda.is_finite() => {
                Err(Error::InvalidSpec(format!("lambda must exceed 1, got {lambda}")))
            }
            _ => Ok(()),
        }
    }

    /// Weight for one grade.
    pub fn weight(&self, q: f64) -> Result<f64> {
        match *self {
            GradingSpec::Linear { weight_map } => {
                let w = weight_map.apply(q);
                if !(w > 0.0) || !w.is_finite() {
                    return Err(Error::InvalidSpec(format!(
                        "weight map gives {w} at grade {q}; weights must be positive"
                    )));
                }
                Ok(w)
            }
            GradingSpec::Exponential { lambda } => {
                self.validate()?;
                Ok((q * lambda.ln()).exp())
            }
        }
    }

    /// Diagonal weights for a whole tuple.
    pub fn weights(&self, q: &GradingTuple) -> Result<Vec<f64>> {
        q.as_slice().iter().map(|g| self.weight(*g)).collect()
    }

    /// Largest diagonal weight `m_max`.
    pub fn max_weight(&self, q: &GradingTuple) -> Result<f64> {
        Ok(self.weights(q)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
    }
}

fn is_integer(q: f64) -> bool {
    q.fract() == 0.0
}

/// `λ ⋆ x`: component i scaled by `λ^{q_i}`.
pub fn star_action(lambda: f64, q: &GradingTuple, x: &[f64]) -> Result<Vec<f64>> {
    if q.len() != x.len() {
        return Err(mismatch("star_action", q.len(), x.len()));
    }
    q.as_slice()
        .iter()
        .zip(x)
        .map(|(g, v)| {
            if lambda > 0.0 {
                Ok(lambda.powf(*g) * v)
            } else if is_integer(*g) {
                Ok(lambda.powi(*g as i32) * v)
            } else {
                Err(Error::NegativeBaseFractionalGrade {
                    base: lambda,
                    grade: *g,
                })
            }
        })
        .collect()
}

/// Diagonal grading matrix.
pub fn grading_matrix(q: &GradingTuple, spec: &GradingSpec) -> Result<Matrix> {
    spec.validate()?;
    Ok(Matrix::diag(&spec.weights(q)?))
}

fn scale_columns(x: &Matrix, w: &[f64], op: &'static str) -> Result<Matrix> {
    if x.cols() != w.len() {
        return Err(mismatch(op, w.len(), x.cols()));
    }
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (o, s) in out.row_mut(i).iter_mut().zip(w) {
            *o *= s;
        }
    }
    Ok(out)
}

/// Replaces every row `x_i` of `X` by `M x_i`.
pub fn apply_grading(q: &GradingTuple, spec: &GradingSpec, x: &Matrix) -> Result<Matrix> {
    spec.validate()?;
    scale_columns(x, &spec.weights(q)?, "apply_grading")
}

/// Undoes [`apply_grading`].
pub fn inverse_grading(q: &GradingTuple, spec: &GradingSpec, x: &Matrix) -> Result<Matrix> {
    spec.validate()?;
    let inv: Vec<f64> = spec.weights(q)?.iter().map(|w| 1.0 / w).collect();
    scale_columns(x, &inv, "inverse_grading")
}

/// Grades each row with its own tuple.
pub fn apply_grading_per_row(tuples: &[GradingTuple], spec: &GradingSpec, x: &Matrix) -> Result<Matrix> {
    if tuples.len() != x.rows() {
        return Err(mismatch("apply_grading_per_row", x.rows(), tuples.len()));
    }
    let mut out = x.clone();
    for (i, q) in tuples.iter().enumerate() {
        let w = spec.weights(q)?;
        if w.len() != x.cols() {
            return Err(mismatch("apply_grading_per_row", x.cols(), w.len()));
        }
        for (o, s) in out.row_mut(i).iter_mut().zip(&w) {
            *o *= s;
        }
    }
    Ok(out)
}

/// `sqrt(Σ q_i x_i²)`.
pub fn graded_norm(q: &GradingTuple, x: &[f64]) -> Result<f64> {
    if q.len() != x.len() {
        return Err(mismatch("graded_norm", q.len(), x.len()));
    }
    if let Some(bad) = q.as_slice().iter().find(|g| !(**g > 0.0)) {
        return Err(Error::NonPositiveGrade(*bad));
    }
    Ok(q.as_slice().iter().zip(x).map(|(g, v)| g * v * v).sum::<f64>().sqrt())
}

/// Distinct grades in ascending order, each with the coordinates carrying it.
pub fn grade_blocks(q: &GradingTuple) -> Vec<(f64, Vec<usize>)> {
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|a, b| q.as_slice()[*a].total_cmp(&q.as_slice()[*b]));
    let mut blocks: Vec<(f64, Vec<usize>)> = Vec::new();
    for i in order {
        let g = q.as_slice()[i];
        match blocks.last_mut() {
            Some((d, members)) if (g - *d).abs() <= 1e-12 * d.abs().max(1.0) => members.push(i),
            _ => blocks.push((g, vec![i])),
        }
    }
    blocks
}

/// `(Σ_j ‖x_{d_j}‖^{2(r−j+1)})^{1/r}` over the r distinct grades
/// `d_1 < … < d_r`, with Euclidean block norms.
pub fn homogeneous_norm(q: &GradingTuple, x: &[f64]) -> Result<f64> {
    if q.len() != x.len() {
        return Err(mismatch("homogeneous_norm", q.len(), x.len()));
    }
    let blocks = grade_blocks(q);
    let r = blocks.len();
    if r == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (j, (_, members)) in blocks.iter().enumerate() {
        let sq: f64 = members.iter().map(|&i| x[i] * x[i]).sum();
        // ‖·‖^{2(r−j+1)} with 1-based j is (‖·‖²)^{r−j+1}
        total += sq.powi((r - j) as i32);
    }
    Ok(total.powf(1.0 / r as f64))
}

/// Componentwise graded ReLU; grades must be positive.
pub fn graded_relu(q: &GradingTuple, x: &[f64], variant: ReluVariant) -> Result<Vec<f64>> {
    if q.len() != x.len() {
        return Err(mismatch("graded_relu", q.len(), x.len()));
    }
    q.as_slice()
        .iter()
        .zip(x)
        .map(|(g, v)| {
            if !(*g > 0.0) {
                return Err(Error::NonPositiveGrade(*g));
            }
            Ok(graded_relu_scalar(*v, *g, variant))
        })
        .collect()
}

/// Componentwise `exp(x_i/q_i) − 1`.
pub fn exp_activation(q: &GradingTuple, x: &[f64]) -> Result<Vec<f64>> {
    if q.len() != x.len() {
        return Err(mismatch("exp_activation", q.len(), x.len()));
    }
    q.as_slice()
        .iter()
        .zip(x)
        .map(|(g, v)| {
            if !(*g > 0.0) {
                return Err(Error::NonPositiveGrade(*g));
            }
            Ok((v / g).exp() - 1.0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Homogeneity {
    /// Common degree `d` with `r_i = q_j + d` on every nonzero entry.
    /// The zero matrix reports `Degree(0.0)`.
    Degree(f64),
    NotHomogeneous,
}

/// Degree of `A` as a map from grades `q_in` (columns) to `q_out` (rows).
pub fn homogeneity_degree(a: &Matrix, q_in: &GradingTuple, q_out: &GradingTuple, tol: f64) -> Result<Homogeneity> {
    if a.cols() != q_in.len() {
        return Err(mismatch("homogeneity_degree", q_in.len(), a.cols()));
    }
    if a.rows() != q_out.len() {
        return Err(mismatch("homogeneity_degree", q_out.len(), a.rows()));
    }
    let mut degree: Option<f64> = None;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            if a.get(i, j).abs() <= tol {
                continue;
            }
            let d = q_out.as_slice()[i] - q_in.as_slice()[j];
            match degree {
                None => degree = Some(d),
                Some(d0) if (d - d0).abs() > tol => return Ok(Homogeneity::NotHomogeneous),
                _ => {}
            }
        }
    }
    Ok(Homogeneity::Degree(degree.unwrap_or(0.0)))
}

/// Diagonal weights from a grade row on the tape: `f(q)` in linear mode,
/// `λ^q = exp(q ln λ)` in exponential mode.
pub fn grading_weights_on_tape(tape: &mut Tape, q: Var, spec: &GradingSpec) -> Result<Var> {
    spec.validate()?;
    let out = match *spec {
        GradingSpec::Linear { weight_map } => match weight_map {
            WeightMap::PlusOne => tape.add_scalar(q, 1.0),
            WeightMap::AbsPlusOne => {
                let a = tape.abs(q);
                tape.add_scalar(a, 1.0)
            }
            WeightMap::Identity => q,
            WeightMap::Affine { a, b } => {
                let s = tape.scale(q, a);
                tape.add_scalar(s, b)
            }
        },
        GradingSpec::Exponential { lambda } => {
            let s = tape.scale(q, lambda.ln());
            tape.exp(s)
        }
    };
    if let Some(bad) = tape.value(out).data().iter().find(|w| !(**w > 0.0)) {
        return Err(Error::InvalidSpec(format!("loss weight {bad} is not positive")));
    }
    Ok(out)
}

/// `d_eff = |{i : q_i ≥ q_max − δ}|`.
pub fn effective_dimension(q: &GradingTuple, delta: f64) -> usize {
    let top = q.max();
    q.as_slice().iter().filter(|g| **g >= top - delta).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{randn_matrix, Rng};

    fn t(v: &[f64]) -> GradingTuple {
        GradingTuple::new(v.to_vec()).unwrap()
    }

    #[test]
    fn tuple_validation() {
        assert!(GradingTuple::new(vec![-0.5]).is_err());
        assert!(GradingTuple::new(vec![f64::NAN]).is_err());
        assert!(GradingTuple::signed(vec![-0.5]).is_ok());
        assert_eq!(GradingTuple::ramp(4, 0.5).unwrap().as_slice(), &[0.0, 0.5, 1.0, 1.5]);
        let parsed: std::result::Result<GradingTuple, _> = serde_json::from_str("[1.0, -2.0]");
        assert!(parsed.is_err());
    }

    #[test]
    fn star_action_examples() {
        let x = [3.0, 4.0];
        assert_eq!(star_action(1.0, &t(&[1.0, 2.0]), &x).unwrap(), x.to_vec());
        assert_eq!(star_action(2.0, &t(&[1.0, 2.0]), &x).unwrap(), vec![6.0, 16.0]);
        assert_eq!(star_action(-2.0, &t(&[1.0, 2.0]), &x).unwrap(), vec![-6.0, 16.0]);
        assert!(matches!(
            star_action(-2.0, &t(&[0.5, 2.0]), &x),
            Err(Error::NegativeBaseFractionalGrade { .. })
        ));
        assert!(star_action(0.0, &t(&[0.5]), &[1.0]).is_err());
    }

    #[test]
    fn star_action_composition() {
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let q = t(&[rng.uniform_range(0.0, 3.0), rng.uniform_range(0.0, 3.0), 1.0]);
            let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let (l, m) = (rng.uniform_range(0.1, 3.0), rng.uniform_range(0.1, 3.0));
            let lhs = star_action(l, &q, &star_action(m, &q, &x).unwrap()).unwrap();
            let rhs = star_action(l * m, &q, &x).unwrap();
            for (a, b) in lhs.iter().zip(rhs) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn grading_matrix_examples() {
        let m = grading_matrix(&t(&[1.0, 0.5, 0.0, 0.0]), &GradingSpec::linear(WeightMap::AbsPlusOne)).unwrap();
        assert_eq!(m, Matrix::diag(&[2.0, 1.5, 1.0, 1.0]));
        let e = grading_matrix(&t(&[0.0, 1.0, 2.0]), &GradingSpec::exponential(2.0)).unwrap();
        for (a, b) in e.data().iter().zip(Matrix::diag(&[1.0, 2.0, 4.0]).data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let id = grading_matrix(&GradingTuple::zeros(3), &GradingSpec::exponential(5.0)).unwrap();
        assert_eq!(id, Matrix::identity(3));
        assert!(grading_matrix(&t(&[0.0]), &GradingSpec::exponential(1.0)).is_err());
        assert!(grading_matrix(&t(&[0.0]), &GradingSpec::linear(WeightMap::Identity)).is_err());
    }

    #[test]
    fn photonic_grading() {
        let spec = GradingSpec::linear(WeightMap::Affine { a: 0.1, b: 1.0 });
        let q = t(&[0.0, 1.0, 2.0]);
        let x = Matrix::row_vector(&[1.0, 0.5, 0.1]);
        let g = apply_grading(&q, &spec, &x).unwrap();
        for (a, b) in g.data().iter().zip([1.0, 0.55, 0.12]) {
            assert!((a - b).abs() < 1e-12);
        }
        let norm = g.frobenius_norm();
        assert!((norm - 1.148).abs() < 1e-3);
        let unit = g.scale(1.0 / norm);
        for (a, b) in unit.data().iter().zip([0.871, 0.479, 0.105]) {
            assert!((a - b).abs() < 5e-4);
        }
    }

    #[test]
    fn grading_round_trip_and_identity() {
        let mut rng = Rng::new(8);
        let x = randn_matrix(&mut rng, 5, 4);
        let q = t(&[0.0, 0.7, 1.2, 3.0]);
        for spec in [GradingSpec::linear(WeightMap::PlusOne), GradingSpec::exponential(3.0)] {
            let back = inverse_grading(&q, &spec, &apply_grading(&q, &spec, &x).unwrap()).unwrap();
            assert!(back.max_abs_diff(&x) <= 1e-12);
        }
        let unit = apply_grading(&GradingTuple::zeros(4), &GradingSpec::linear(WeightMap::PlusOne), &x).unwrap();
        assert_eq!(unit, x);
        assert!(apply_grading(&t(&[1.0]), &GradingSpec::linear(WeightMap::PlusOne), &x).is_err());
    }

    #[test]
    fn norms() {
        // (‖e_2‖⁴ + ‖e_3‖²)^{1/2} for grades 2 and 3
        let q = t(&[2.0, 3.0, 2.0]);
        let x = [1.0, 2.0, 3.0];
        let e2 = 1.0f64 + 9.0;
        let e3 = 4.0f64;
        let expect = (e2.powi(2) + e3).sqrt();
        assert!((homogeneous_norm(&q, &x).unwrap() - expect).abs() < 1e-12);

        assert_eq!(homogeneous_norm(&q, &[0.0; 3]).unwrap(), 0.0);
        assert_eq!(graded_norm(&q, &[0.0; 3]).unwrap(), 0.0);

        let ones = t(&[1.0; 4]);
        let v = [1.0, -2.0, 0.5, 3.0];
        let sq: f64 = v.iter().map(|a| a * a).sum();
        assert!((homogeneous_norm(&ones, &v).unwrap() - sq).abs() < 1e-12);
        assert!((graded_norm(&ones, &v).unwrap() - sq.sqrt()).abs() < 1e-12);
        assert!(matches!(graded_norm(&t(&[0.0, 1.0]), &[1.0, 1.0]), Err(Error::NonPositiveGrade(_))));
    }

    #[test]
    fn activations() {
        assert_eq!(graded_relu(&t(&[2.0]), &[4.0], ReluVariant::Primary).unwrap(), vec![2.0]);
        assert_eq!(graded_relu(&t(&[2.0]), &[-4.0], ReluVariant::Primary).unwrap(), vec![2.0]);
        assert_eq!(graded_relu(&t(&[2.0]), &[-4.0], ReluVariant::SignPreserving).unwrap(), vec![0.0]);
        assert_eq!(graded_relu(&t(&[0.3]), &[0.0], ReluVariant::Primary).unwrap(), vec![0.0]);
        assert!(graded_relu(&t(&[0.0]), &[1.0], ReluVariant::Primary).is_err());

        assert_eq!(exp_activation(&t(&[3.0]), &[0.0]).unwrap(), vec![0.0]);
        assert!((exp_activation(&t(&[2.0]), &[2.0]).unwrap()[0] - 1.718_281_828_459_045).abs() < 1e-12);
        let q = t(&[0.5, 2.0]);
        let lam = 1.7;
        let scaled = star_action(lam, &q, &[0.3, -0.4]).unwrap();
        let got = exp_activation(&q, &scaled).unwrap();
        for (k, g) in got.iter().enumerate() {
            let direct = (lam.powf(q.as_slice()[k]) * [0.3, -0.4][k] / q.as_slice()[k]).exp() - 1.0;
            assert!((g - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn homogeneity_examples() {
        let q = t(&[0.0, 1.0, 2.0]);
        assert_eq!(
            homogeneity_degree(&Matrix::identity(3), &q, &q, 1e-9).unwrap(),
            Homogeneity::Degree(0.0)
        );
        let mut a = Matrix::zeros(2, 2);
        a.set(1, 0, 5.0);
        let d = homogeneity_degree(&a, &t(&[1.0, 7.0]), &t(&[0.0, 3.0]), 1e-9).unwrap();
        assert_eq!(d, Homogeneity::Degree(2.0));
        let mut rng = Rng::new(3);
        let dense = randn_matrix(&mut rng, 3, 3);
        let qi = t(&[0.1, 0.5, 2.3]);
        let qo = t(&[0.4, 1.9, 3.3]);
        assert_eq!(homogeneity_degree(&dense, &qi, &qo, 1e-9).unwrap(), Homogeneity::NotHomogeneous);
    }

    #[test]
    fn effective_dimension_counts_top_grades() {
        let q = t(&[0.0, 0.5, 1.9, 2.0]);
        assert_eq!(effective_dimension(&q, 0.0), 1);
        assert_eq!(effective_dimension(&q, 0.2), 2);
        assert_eq!(effective_dimension(&q, 5.0), 4);
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = GradingSpec::linear(WeightMap::Affine { a: 0.1, b: 1.0 });
        let s = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<GradingSpec>(&s).unwrap(), spec);
        let e: GradingSpec = serde_json::from_str(r#"{"mode":"exponential","lambda":2.0}"#).unwrap();
        assert_eq!(e, GradingSpec::exponential(2.0));
        let l: GradingSpec = serde_json::from_str(r#"{"mode":"linear"}"#).unwrap();
        assert_eq!(l, GradingSpec::linear(WeightMap::PlusOne));
    }
}
