//! Graded neurons, layers and losses.
//!
//! Losses are written once against the tape (`*_on_tape`) so the same code
//! serves plain evaluation and training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ReluVariant, Tape, Var};
use crate::error::{mismatch, Error, Result};
use crate::graded_space::{exp_activation, grade_blocks, graded_relu, GradingSpec, GradingTuple, WeightMap};
use crate::tensor::Matrix;

fn graded_power(w: f64, q: f64) -> Result<f64> {
    if w > 0.0 {
        Ok(w.powf(q))
    } else if q.fract() == 0.0 {
        Ok(w.powi(q as i32))
    } else {
        Err(Error::NegativeWeightFractionalGrade { weight: w, grade: q })
    }
}

/// `Σ w_i^{q_i} x_i + b`.
pub fn additive_neuron(w: &[f64], q: &GradingTuple, b: f64, x: &[f64]) -> Result<f64> {
    if w.len() != q.len() || x.len() != q.len() {
        return Err(mismatch("additive_neuron", q.len(), format!("w {} x {}", w.len(), x.len())));
    }
    let mut acc = b;
    for ((wi, qi), xi) in w.iter().zip(q.as_slice()).zip(x) {
        acc += graded_power(*wi, *qi)? * xi;
    }
    Ok(acc)
}

/// `Π (w_i x_i)^{q_i} + b`, evaluated in the log domain when any grade is fractional.
pub fn multiplicative_neuron(w: &[f64], q: &GradingTuple, b: f64, x: &[f64]) -> Result<f64> {
    if w.len() != q.len() || x.len() != q.len() {
        return Err(mismatch("multiplicative_neuron", q.len(), format!("w {} x {}", w.len(), x.len())));
    }
    let fractional = q.as_slice().iter().any(|g| g.fract() != 0.0);
    if fractional {
        let mut log = 0.0;
        for ((wi, qi), xi) in w.iter().zip(q.as_slice()).zip(x) {
            let f = wi * xi;
            if !(f > 0.0) {
                return Err(Error::DomainError(f));
            }
            log += qi * f.ln();
        }
        Ok(log.exp() + b)
    } else {
        let prod: f64 = w
            .iter()
            .zip(q.as_slice())
            .zip(x)
            .map(|((wi, qi), xi)| (wi * xi).powi(*qi as i32))
            .product();
        Ok(prod + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    GradedRelu,
    GradedReluSignPreserving,
    ExpGraded,
    Identity,
}

/// One graded layer `x ↦ g(W′x + b)` with `W′_{j,i} = w_{j,i}^{q_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradedLayerParams {
    /// Raw weights, `n_out × n_in`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    /// Grades of the inputs.
    pub grades: GradingTuple,
    /// Grades used by the activation; one per output.
    pub output_grades: GradingTuple,
    pub activation: Activation,
}

impl GradedLayerParams {
    /// Square layer sharing one tuple between inputs and outputs.
    pub fn square(weights: Matrix, bias: Vec<f64>, grades: GradingTuple, activation: Activation) -> Result<Self> {
        Self::new(weights, bias, grades.clone(), grades, activation)
    }

    pub fn new(
        weights: Matrix,
        bias: Vec<f64>,
        grades: GradingTuple,
        output_grades: GradingTuple,
        activation: Activation,
    ) -> Result<Self> {
        if weights.cols() != grades.len() {
            return Err(mismatch("GradedLayerParams", grades.len(), weights.cols()));
        }
        if weights.rows() != bias.len() || weights.rows() != output_grades.len() {
            return Err(mismatch(
                "GradedLayerParams",
                weights.rows(),
                format!("bias {} output grades {}", bias.len(), output_grades.len()),
            ));
        }
        Ok(Self {
            weights,
            bias,
            grades,
            output_grades,
            activation,
        })
    }

    /// Builds positive weights `w = ln(1 + e^u)` from unconstrained pre-weights.
    pub fn from_pre_weights(
        pre: &Matrix,
        bias: Vec<f64>,
        grades: GradingTuple,
        output_grades: GradingTuple,
        activation: Activation,
    ) -> Result<Self> {
        let w = pre.map(|u| if u > 30.0 { u } else { u.exp().ln_1p() });
        Self::new(w, bias, grades, output_grades, activation)
    }

    /// `w_{j,i}^{q_i}`.
    pub fn effective_weights(&self) -> Result<Matrix> {
        let mut out = self.weights.clone();
        for j in 0..out.rows() {
            for (i, w) in out.row_mut(j).iter_mut().enumerate() {
                *w = graded_power(*w, self.grades.as_slice()[i])?;
            }
        }
        Ok(out)
    }
}

pub fn graded_layer_forward(params: &GradedLayerParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.grades.len() {
        return Err(mismatch("graded_layer_forward", params.grades.len(), x.len()));
    }
    let w = params.effective_weights()?;
    let pre: Vec<f64> = (0..w.rows())
        .map(|j| w.row(j).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + params.bias[j])
        .collect();
    match params.activation {
        Activation::Identity => Ok(pre),
        Activation::GradedRelu => graded_relu(&params.output_grades, &pre, ReluVariant::Primary),
        Activation::GradedReluSignPreserving => graded_relu(&params.output_grades, &pre, ReluVariant::SignPreserving),
        Activation::ExpGraded => exp_activation(&params.output_grades, &pre),
    }
}

/// Stack of graded layers applied in order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradedNetwork {
    pub layers: Vec<GradedLayerParams>,
}

impl GradedNetwork {
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = graded_layer_forward(layer, &h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Norm,
    Homogeneous,
    CrossEntropy,
    MaxGraded,
}

/// Per-element base loss ℓ used by the sequence losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLoss {
    /// `(y − ŷ)²` on raw outputs.
    SquaredError,
    /// `−y log ŷ` on row-softmax probabilities.
    CrossEntropy,
    /// Binary cross-entropy of sigmoid(logit) against 0/1 targets.
    BinaryCrossEntropy,
}

pub const PROB_FLOOR: f64 = 1e-12;

fn check_positive(q: &Matrix) -> Result<()> {
    match q.data().iter().find(|g| !(**g > 0.0)) {
        Some(bad) => Err(Error::NonPositiveGrade(*bad)),
        None => Ok(()),
    }
}

fn check_probabilities(p: &Matrix) -> Result<()> {
    match p.data().iter().find(|v| !(**v >= 0.0 && **v <= 1.0 + 1e-12)) {
        Some(bad) => Err(Error::ProbabilityDomain(*bad)),
        None => Ok(()),
    }
}

/// One graded loss on the tape. `q` is a 1×d row of grades, `y` and `yhat` are n×d.
pub fn graded_loss_on_tape(tape: &mut Tape, kind: LossKind, q: Var, y: Var, yhat: Var) -> Result<Var> {
    let qv = tape.value(q).clone();
    match kind {
        LossKind::Mse | LossKind::Norm => {
            check_positive(&qv)?;
            let e = tape.sub(y, yhat)?;
            let e2 = tape.mul(e, e)?;
            let w = tape.mul_row(e2, q)?;
            let s = tape.sum(w);
            if kind == LossKind::Mse {
                let n = tape.value(y).data().len() as f64;
                Ok(tape.scale(s, 1.0 / n))
            } else {
                Ok(s)
            }
        }
        LossKind::Homogeneous => {
            let grades = GradingTuple::signed(qv.data().to_vec())?;
            let blocks = grade_blocks(&grades);
            let r = blocks.len();
            let e = tape.sub(y, yhat)?;
            let e2 = tape.mul(e, e)?;
            let mut total: Option<Var> = None;
            for (j, (_, members)) in blocks.iter().enumerate() {
                let mut mask = vec![0.0; grades.len()];
                members.iter().for_each(|&i| mask[i] = 1.0);
                let m = tape.constant(Matrix::row_vector(&mask));
                let block = tape.mul_row(e2, m)?;
                let sq = tape.sum(block);
                let term = tape.pow_const(sq, (r - j) as f64);
                total = Some(match total {
                    Some(t) => tape.add(t, term)?,
                    None => term,
                });
            }
            match total {
                Some(t) => Ok(tape.pow_const(t, 1.0 / r as f64)),
                None => Ok(tape.constant(Matrix::scalar(0.0))),
            }
        }
        LossKind::CrossEntropy => {
            check_probabilities(tape.value(yhat))?;
            let p = tape.clamp(yhat, PROB_FLOOR, 1.0);
            let lp = tape.ln(p);
            let t = tape.mul(y, lp)?;
            let w = tape.mul_row(t, q)?;
            let s = tape.sum(w);
            Ok(tape.scale(s, -1.0))
        }
        LossKind::MaxGraded => {
            let e = tape.sub(y, yhat)?;
            let a = tape.abs(e);
            let root = tape.sqrt(q);
            let w = tape.mul_row(a, root)?;
            let m = tape.max(w);
            Ok(tape.mul(m, m)?)
        }
    }
}

/// Plain evaluation of one graded loss on vectors.
pub fn graded_loss(kind: LossKind, q: &GradingTuple, y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != q.len() || yhat.len() != q.len() {
        return Err(mismatch("graded_loss", q.len(), format!("y {} yhat {}", y.len(), yhat.len())));
    }
    let mut tape = Tape::new();
    let qv = tape.constant(Matrix::row_vector(q.as_slice()));
    let yv = tape.constant(Matrix::row_vector(y));
    let hv = tape.constant(Matrix::row_vector(yhat));
    let l = graded_loss_on_tape(&mut tape, kind, qv, yv, hv)?;
    Ok(tape.value(l).item())
}

/// Elementwise base loss ℓ(ŷ, y) as an n×d node.
pub fn base_loss_on_tape(tape: &mut Tape, base: BaseLoss, outputs: Var, targets: &Matrix) -> Result<Var> {
    match base {
        BaseLoss::SquaredError => {
            let y = tape.constant(targets.clone());
            let e = tape.sub(y, outputs)?;
            tape.mul(e, e)
        }
        BaseLoss::CrossEntropy => {
            let p = tape.softmax_rows(outputs);
            let c = tape.clamp(p, PROB_FLOOR, 1.0);
            let lp = tape.ln(c);
            let y = tape.constant(targets.clone());
            let t = tape.mul(y, lp)?;
            Ok(tape.scale(t, -1.0))
        }
        BaseLoss::BinaryCrossEntropy => tape.bce_logits(outputs, targets),
    }
}

/// `Σ_i Σ_k w_k ℓ(ŷ_ik, y_ik)` with a 1×d weight row.
pub fn weighted_sequence_loss_on_tape(
    tape: &mut Tape,
    base: BaseLoss,
    weights: Var,
    outputs: Var,
    targets: &Matrix,
) -> Result<Var> {
    let l = base_loss_on_tape(tape, base, outputs, targets)?;
    let w = tape.mul_row(l, weights)?;
    Ok(tape.sum(w))
}

/// Per-dimension multipliers `f(q_k)`.
pub fn lgt_loss_weights(q: &GradingTuple, f: WeightMap) -> Result<Vec<f64>> {
    GradingSpec::linear(f).weights(q)
}

/// Per-dimension multipliers `λ^{q_k}`.
pub fn egt_loss_weights(q: &GradingTuple, lambda: f64) -> Result<Vec<f64>> {
    GradingSpec::exponential(lambda).weights(q)
}

/// Plain evaluation of the weighted sequence loss.
pub fn sequence_loss(weights: &[f64], base: BaseLoss, outputs: &Matrix, targets: &Matrix) -> Result<f64> {
    let mut tape = Tape::new();
    let w = tape.constant(Matrix::row_vector(weights));
    let o = tape.constant(outputs.clone());
    let l = weighted_sequence_loss_on_tape(&mut tape, base, w, o, targets)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graded_space::{homogeneous_norm, star_action};
    use crate::tensor::{randn_matrix, Rng};

    fn t(v: &[f64]) -> GradingTuple {
        GradingTuple::new(v.to_vec()).unwrap()
    }

    #[test]
    fn additive_neuron_examples() {
        let w = [0.5, -2.0, 1.5];
        let x = [1.0, 2.0, -1.0];
        let plain: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + 0.3;
        assert!((additive_neuron(&w, &t(&[1.0; 3]), 0.3, &x).unwrap() - plain).abs() < 1e-15);
        assert_eq!(additive_neuron(&[4.0], &t(&[0.5]), 1.0, &[3.0]).unwrap(), 7.0);
        assert_eq!(additive_neuron(&w, &t(&[1.0, 2.0, 0.5]), -1.5, &[0.0; 3]).unwrap(), -1.5);
        assert!(matches!(
            additive_neuron(&[-4.0], &t(&[0.5]), 0.0, &[1.0]),
            Err(Error::NegativeWeightFractionalGrade { .. })
        ));
    }

    #[test]
    fn multiplicative_neuron_examples() {
        assert_eq!(multiplicative_neuron(&[2.0, 5.0], &t(&[0.0, 0.0]), 0.5, &[3.0, 1.0]).unwrap(), 1.5);
        assert_eq!(multiplicative_neuron(&[2.0, 3.0], &t(&[1.0, 2.0]), 0.0, &[1.0, 1.0]).unwrap(), 18.0);
        assert!(matches!(
            multiplicative_neuron(&[2.0], &t(&[0.5]), 0.0, &[-1.0]),
            Err(Error::DomainError(_))
        ));
        // β(λ⋆x) = λ^{Σq²} β(x)
        let mut rng = Rng::new(6);
        for _ in 0..50 {
            let q = t(&[rng.uniform_range(0.1, 2.0), rng.uniform_range(0.1, 2.0)]);
            let w = [rng.uniform_range(0.2, 2.0), rng.uniform_range(0.2, 2.0)];
            let x = [rng.uniform_range(0.2, 2.0), rng.uniform_range(0.2, 2.0)];
            let lam = rng.uniform_range(0.5, 2.0);
            let lhs = multiplicative_neuron(&w, &q, 0.0, &star_action(lam, &q, &x).unwrap()).unwrap();
            let s: f64 = q.as_slice().iter().map(|g| g * g).sum();
            let rhs = lam.powf(s) * multiplicative_neuron(&w, &q, 0.0, &x).unwrap();
            assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn layer_examples() {
        let mut rng = Rng::new(2);
        let w = randn_matrix(&mut rng, 3, 3);
        let b = vec![0.1, -0.2, 0.3];
        let ones = t(&[1.0; 3]);
        let x = [0.4, -1.0, 2.0];
        let layer = GradedLayerParams::square(w.clone(), b.clone(), ones, Activation::Identity).unwrap();
        let out = graded_layer_forward(&layer, &x).unwrap();
        for j in 0..3 {
            let expect: f64 = w.row(j).iter().zip(&x).map(|(a, c)| a * c).sum::<f64>() + b[j];
            assert!((out[j] - expect).abs() < 1e-15);
        }

        let q = t(&[0.5, 1.5]);
        let pre = randn_matrix(&mut rng, 1, 2);
        let single = GradedLayerParams::from_pre_weights(&pre, vec![0.2], q.clone(), t(&[1.0]), Activation::Identity).unwrap();
        let got = graded_layer_forward(&single, &[0.7, -0.3]).unwrap()[0];
        let neuron = additive_neuron(single.weights.row(0), &q, 0.2, &[0.7, -0.3]).unwrap();
        assert!((got - neuron).abs() < 1e-15);

        let q2 = t(&[1.0, 2.0]);
        let l1 = GradedLayerParams::square(
            Matrix::from_rows(&[vec![0.5, 1.0], vec![2.0, -1.0]]).unwrap(),
            vec![0.1, 0.2],
            q2.clone(),
            Activation::GradedRelu,
        )
        .unwrap();
        let l2 = GradedLayerParams::square(
            Matrix::from_rows(&[vec![1.5, 0.5], vec![-0.5, 1.0]]).unwrap(),
            vec![0.0, -0.1],
            q2,
            Activation::ExpGraded,
        )
        .unwrap();
        let net = GradedNetwork { layers: vec![l1.clone(), l2.clone()] };
        let xin = [0.3, 0.8];
        let composed = graded_layer_forward(&l2, &graded_layer_forward(&l1, &xin).unwrap()).unwrap();
        assert_eq!(net.forward(&xin).unwrap(), composed);
    }

    #[test]
    fn loss_weight_examples() {
        let q = t(&[0.0, 0.5, 1.0, 2.0]);
        assert_eq!(lgt_loss_weights(&q, WeightMap::PlusOne).unwrap(), vec![1.0, 1.5, 2.0, 3.0]);
        let e = egt_loss_weights(&q, 2.0).unwrap();
        for (a, b) in e.iter().zip([1.0, 2f64.sqrt(), 2.0, 4.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_error_gives_zero_loss() {
        let q = t(&[0.5, 1.0, 2.0]);
        let y = [0.2, -0.3, 1.1];
        for kind in [LossKind::Mse, LossKind::Norm, LossKind::Homogeneous, LossKind::MaxGraded] {
            assert_eq!(graded_loss(kind, &q, &y, &y).unwrap(), 0.0, "{kind:?}");
        }
    }

    #[test]
    fn closed_forms() {
        let q = t(&[2.0, 3.0, 0.5]);
        let y = [1.0, -1.0, 0.5];
        let yh = [0.5, 0.0, 0.25];
        let e: Vec<f64> = y.iter().zip(&yh).map(|(a, b)| a - b).collect();
        let norm: f64 = q.as_slice().iter().zip(&e).map(|(g, v)| g * v * v).sum();
        assert!((graded_loss(LossKind::Norm, &q, &y, &yh).unwrap() - norm).abs() < 1e-14);
        assert!((graded_loss(LossKind::Mse, &q, &y, &yh).unwrap() - norm / 3.0).abs() < 1e-14);
        let mx = q.as_slice().iter().zip(&e).map(|(g, v)| g.sqrt() * v.abs()).fold(0.0, f64::max);
        assert!((graded_loss(LossKind::MaxGraded, &q, &y, &yh).unwrap() - mx * mx).abs() < 1e-14);
        assert!((graded_loss(LossKind::Homogeneous, &q, &y, &yh).unwrap() - homogeneous_norm(&q, &e).unwrap()).abs() < 1e-12);

        let p = [0.2, 0.5, 0.3];
        let onehot = [0.0, 1.0, 0.0];
        let ce = graded_loss(LossKind::CrossEntropy, &q, &onehot, &p).unwrap();
        assert!((ce - (-3.0 * 0.5f64.ln())).abs() < 1e-14);
        assert!(matches!(
            graded_loss(LossKind::CrossEntropy, &q, &onehot, &[0.2, 1.5, 0.3]),
            Err(Error::ProbabilityDomain(_))
        ));
        assert!(matches!(
            graded_loss(LossKind::Mse, &t(&[0.0, 1.0, 1.0]), &y, &yh),
            Err(Error::NonPositiveGrade(_))
        ));
    }

    #[test]
    fn graded_mse_scaling() {
        let mut rng = Rng::new(12);
        for _ in 0..20 {
            let q = t(&[rng.uniform_range(0.1, 2.0), rng.uniform_range(0.1, 2.0), rng.uniform_range(0.1, 2.0)]);
            let y: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let yh: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let lam = rng.uniform_range(0.5, 2.0);
            let lhs = graded_loss(
                LossKind::Mse,
                &q,
                &star_action(lam, &q, &y).unwrap(),
                &star_action(lam, &q, &yh).unwrap(),
            )
            .unwrap();
            let rhs: f64 = (0..3)
                .map(|i| {
                    let g = q.as_slice()[i];
                    g * lam.powf(2.0 * g) * (y[i] - yh[i]).powi(2)
                })
                .sum::<f64>()
                / 3.0;
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
        }
    }

    #[test]
    fn sequence_loss_weights_columns() {
        let out = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0]]).unwrap();
        let tgt = Matrix::zeros(2, 2);
        let l = sequence_loss(&[1.0, 3.0], BaseLoss::SquaredError, &out, &tgt).unwrap();
        assert_eq!(l, 4.0 + 3.0);
    }
}
