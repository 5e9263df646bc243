//! Grade-aware optimization: composite losses with grade regularizers,
//! global-norm clipping, λ-annealing, grade learning-rate bounds, Adam, and
//! the LGT/EGT training loops.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gnn::{weighted_sequence_loss_on_tape, BaseLoss};
use crate::graded_space::{grading_weights_on_tape, GradingSpec};
use crate::graded_transformer::{
    forward_on_tape, head_grade_name, is_grade_param, GradedModel, GradedModelConfig, LossWeighting, ModelInput,
    FEATURE_GRADES, MODEL_GRADES,
};
use crate::params::{Bindings, ParamStore};
use crate::tensor::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Lgt,
    Egt,
}

impl TrainMode {
    pub fn of(spec: &GradingSpec) -> Self {
        match spec {
            GradingSpec::Linear { .. } => TrainMode::Lgt,
            GradingSpec::Exponential { .. } => TrainMode::Egt,
        }
    }
}

/// Grade warm start applied before the first step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GradeInit {
    /// Keep the grades the model was built with.
    #[default]
    Keep,
    /// `q_k = c·k` (0-based) for the global tuples and every head tuple.
    Ramp { c: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Total steps `T`.
    pub steps: usize,
    /// Learning rate η for non-grade parameters.
    pub lr: f64,
    /// Requested grade learning rate η_q; capped at 0.9 × the mode bound.
    pub grade_lr: f64,
    pub gamma: f64,
    /// `None` means 0 in LGT mode and [`DEFAULT_GAMMA_PRIME`] in EGT mode.
    pub gamma_prime: Option<f64>,
    pub gamma_coord: f64,
    /// Clip threshold τ.
    pub clip: f64,
    /// Annealing target; defaults to the model's λ.
    pub lambda_max: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub seed: u64,
    pub grade_init: GradeInit,
    pub learnable_grades: bool,
    pub batch_size: usize,
    /// Write a checkpoint every K steps when an artifact directory is given.
    pub checkpoint_every: Option<usize>,
}

pub const DEFAULT_GAMMA_PRIME: f64 = 1e-4;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 3e-3,
            grade_lr: 1e-2,
            gamma: 1e-4,
            gamma_prime: None,
            gamma_coord: 1e-3,
            clip: 1.0,
            lambda_max: None,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            seed: 42,
            grade_init: GradeInit::Keep,
            learnable_grades: true,
            batch_size: 8,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn gamma_prime_for(&self, mode: TrainMode) -> f64 {
        match (self.gamma_prime, mode) {
            (Some(g), _) => g,
            (None, TrainMode::Lgt) => 0.0,
            (None, TrainMode::Egt) => DEFAULT_GAMMA_PRIME,
        }
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps_adam,
        }
    }

    pub fn validate(&self, mode: TrainMode) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip threshold must be positive, got {}", self.clip));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("gamma_prime", self.gamma_prime_for(mode)),
            ("gamma_coord", self.gamma_coord),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(self.lr > 0.0) || !(self.grade_lr >= 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps_adam > 0.0) {
            return bad("Adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        if let GradeInit::Ramp { c } = self.grade_init {
            if !(c >= 0.0) || !c.is_finite() {
                return bad(format!("ramp constant must be non-negative, got {c}"));
            }
        }
        if let Some(l) = self.lambda_max {
            if mode == TrainMode::Egt && !(l > 1.0 && l.is_finite()) {
                return bad(format!("lambda_max must exceed 1, got {l}"));
            }
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be at least 1".into());
        }
        Ok(())
    }
}

/// `λ_t = 1 + (λ_max − 1)·t/T`.
pub fn anneal_lambda(t: usize, total: usize, lambda_max: f64) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::StepOutOfRange { t, total });
    }
    if !(lambda_max >= 1.0) || !lambda_max.is_finite() {
        return Err(Error::InvalidLambda(lambda_max));
    }
    Ok(1.0 + (lambda_max - 1.0) * (t as f64 / total as f64))
}

/// EGT bound `1/(λ^{q_max} ln λ)`.
pub fn egt_grade_lr_bound(lambda: f64, q_max: f64) -> Result<f64> {
    if !(lambda > 1.0) || !lambda.is_finite() {
        return Err(Error::InvalidLambda(lambda));
    }
    if !(q_max >= 0.0) || !q_max.is_finite() {
        return Err(Error::InvalidGrade(q_max));
    }
    Ok(1.0 / (lambda.powf(q_max) * lambda.ln()))
}

/// LGT bound `1/q̃_max`, with `q̃_max` the largest linear weight.
pub fn lgt_grade_lr_bound(q_tilde_max: f64) -> Result<f64> {
    if !(q_tilde_max > 0.0) || !q_tilde_max.is_finite() {
        return Err(Error::InvalidGrade(q_tilde_max));
    }
    Ok(1.0 / q_tilde_max)
}

/// Mode dispatch: `value` is `q_max` for EGT and `q̃_max` for LGT.
pub fn grade_lr_bound(mode: TrainMode, lambda: f64, value: f64) -> Result<f64> {
    match mode {
        TrainMode::Egt => egt_grade_lr_bound(lambda, value),
        TrainMode::Lgt => lgt_grade_lr_bound(value),
    }
}

/// `min(η_q, 0.9·bound)`.
pub fn effective_grade_lr(requested: f64, bound: f64) -> f64 {
    requested.min(0.9 * bound)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClipReport {
    pub norm_before: f64,
    pub norm_after: f64,
    pub fired: bool,
}

pub fn global_norm(grads: &BTreeMap<String, Matrix>) -> f64 {
    grads
        .values()
        .flat_map(|m| m.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// `g′ = min(1, τ/‖g‖₂)·g` over the concatenation of every gradient.
pub fn clip_gradient(grads: &mut BTreeMap<String, Matrix>, tau: f64) -> Result<ClipReport> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("clip threshold must be positive, got {tau}")));
    }
    let before = global_norm(grads);
    if !before.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if before <= tau {
        return Ok(ClipReport {
            norm_before: before,
            norm_after: before,
            fired: false,
        });
    }
    let original = grads.clone();
    let mut factor = tau / before;
    loop {
        for (k, g) in grads.iter_mut() {
            *g = original[k].scale(factor);
        }
        let after = global_norm(grads);
        if after <= tau {
            return Ok(ClipReport {
                norm_before: before,
                norm_after: after,
                fired: true,
            });
        }
        factor *= 1.0 - f64::EPSILON;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
}

impl AdamState {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_step(param: &mut Matrix, grad: &Matrix, state: &mut AdamState, t: u64, lr: f64, h: &AdamHyper) -> Result<()> {
    if param.shape() != grad.shape() || state.m.shape() != grad.shape() || state.v.shape() != grad.shape() {
        return Err(crate::error::mismatch("adam_step", format!("{:?}", param.shape()), format!("{:?}", grad.shape())));
    }
    let t = t.max(1) as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (i, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        *p -= lr * mh / (vh.sqrt() + h.eps);
    }
    Ok(())
}

/// Adam over a named parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub t: u64,
    pub states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(hyper: AdamHyper) -> Self {
        Self {
            hyper,
            t: 0,
            states: BTreeMap::new(),
        }
    }

    /// Updates every parameter that has a gradient, with a per-name rate.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Matrix>, lr: impl Fn(&str) -> f64) -> Result<()> {
        self.t += 1;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::zeros(g.rows(), g.cols()));
            adam_step(p, g, state, self.t, lr(name), &self.hyper)?;
        }
        Ok(())
    }
}

/// Grade tuples as tape variables: global tuples and head tuples grouped per block.
#[derive(Debug, Clone, Default)]
pub struct GradeVars {
    pub global: Vec<Var>,
    pub heads: Vec<Vec<Var>>,
}

impl GradeVars {
    pub fn of_model(model: &GradedModel, b: &Bindings) -> Result<Self> {
        let global = vec![b.get(FEATURE_GRADES)?, b.get(MODEL_GRADES)?];
        let heads = model
            .head_grade_groups()
            .iter()
            .map(|g| g.iter().map(|n| b.get(n)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { global, heads })
    }
}

/// Components of `𝓛_total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossTerms<T> {
    pub data: T,
    pub grade_l2: T,
    pub head_l2: T,
    pub coord: T,
    pub total: T,
}

fn squared_norm(tape: &mut Tape, v: Var) -> Result<Var> {
    let sq = tape.mul(v, v)?;
    Ok(tape.sum(sq))
}

fn sum_all(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = tape.constant(Matrix::scalar(0.0));
    for v in vars {
        acc = tape.add(acc, *v)?;
    }
    Ok(acc)
}

/// `Σ_i ‖q_i − mean_j q_j‖²` for one block of head tuples.
pub fn coordination_on_tape(tape: &mut Tape, heads: &[Var]) -> Result<Var> {
    if heads.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let mut sum = heads[0];
    for h in &heads[1..] {
        sum = tape.add(sum, *h)?;
    }
    let mean = tape.scale(sum, 1.0 / heads.len() as f64);
    let mut terms = Vec::with_capacity(heads.len());
    for h in heads {
        let d = tape.sub(*h, mean)?;
        terms.push(squared_norm(tape, d)?);
    }
    sum_all(tape, &terms)
}

/// Plain `Σ_i ‖q_i − mean_j q_j‖²`.
pub fn coordination_loss(heads: &[Vec<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = heads.iter().map(|h| tape.constant(Matrix::row_vector(h))).collect();
    let v = coordination_on_tape(&mut tape, &vars)?;
    Ok(tape.value(v).item())
}

/// `𝓛 + γ‖q‖² + γ′Σ‖q_i‖² + γ_coord·Σ_blocks Σ_i ‖q_i − q̄‖²`.
pub fn total_loss(tape: &mut Tape, data: Var, grades: &GradeVars, cfg: &TrainConfig, mode: TrainMode) -> Result<LossTerms<Var>> {
    let mut g = Vec::new();
    for q in &grades.global {
        g.push(squared_norm(tape, *q)?);
    }
    let grade_l2 = sum_all(tape, &g)?;
    let mut h = Vec::new();
    let mut c = Vec::new();
    for block in &grades.heads {
        for q in block {
            h.push(squared_norm(tape, *q)?);
        }
        c.push(coordination_on_tape(tape, block)?);
    }
    let head_l2 = sum_all(tape, &h)?;
    let coord = sum_all(tape, &c)?;
    let a = tape.scale(grade_l2, cfg.gamma);
    let b = tape.scale(head_l2, cfg.gamma_prime_for(mode));
    let cc = tape.scale(coord, cfg.gamma_coord);
    let mut total = tape.add(data, a)?;
    total = tape.add(total, b)?;
    total = tape.add(total, cc)?;
    Ok(LossTerms {
        data,
        grade_l2,
        head_l2,
        coord,
        total,
    })
}

/// One training sequence: model input and an `n × output_dim` target.
///
/// Cross-entropy targets are one-hot rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: ModelInput,
    pub target: Matrix,
}

impl Example {
    pub fn classes(input: ModelInput, labels: &[usize], classes: usize) -> Result<Self> {
        let mut target = Matrix::zeros(labels.len(), classes);
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::TokenOutOfRange { token: l, vocab: classes });
            }
            target.set(i, l, 1.0);
        }
        Ok(Self { input, target })
    }
}

fn check_data(data: &[Example], cfg: &GradedModelConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("training data is empty".into()));
    }
    for (i, ex) in data.iter().enumerate() {
        if ex.target.shape() != (ex.input.len(), cfg.output_dim) {
            return Err(crate::error::mismatch(
                "training example",
                format!("{}x{}", ex.input.len(), cfg.output_dim),
                format!("example {i}: {}x{}", ex.target.rows(), ex.target.cols()),
            ));
        }
    }
    Ok(())
}

/// Per-output-dimension loss weights as a 1×output_dim node.
pub fn loss_weights_on_tape(tape: &mut Tape, b: &Bindings, cfg: &GradedModelConfig, spec: &GradingSpec) -> Result<Var> {
    match &cfg.loss_weighting {
        LossWeighting::Uniform => Ok(tape.constant(Matrix::filled(1, cfg.output_dim, 1.0))),
        LossWeighting::Tied => grading_weights_on_tape(tape, b.get(FEATURE_GRADES)?, spec),
        LossWeighting::Fixed { grades } => Ok(tape.constant(Matrix::row_vector(&spec.weights(grades)?))),
    }
}

/// Weighted loss summed over a batch and divided by its token count.
pub fn batch_loss_on_tape(
    tape: &mut Tape,
    b: &Bindings,
    cfg: &GradedModelConfig,
    spec: &GradingSpec,
    batch: &[&Example],
) -> Result<Var> {
    let w = loss_weights_on_tape(tape, b, cfg, spec)?;
    let mut parts = Vec::with_capacity(batch.len());
    let mut tokens = 0usize;
    for ex in batch {
        let f = forward_on_tape(tape, b, cfg, spec, &ex.input)?;
        parts.push(weighted_sequence_loss_on_tape(tape, cfg.base_loss, w, f.logits, &ex.target)?);
        tokens += ex.input.len();
    }
    let s = sum_all(tape, &parts)?;
    Ok(tape.scale(s, 1.0 / tokens.max(1) as f64))
}

/// Loss and per-dimension error over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Weighted loss per token.
    pub loss: f64,
    /// Unweighted mean base loss per output dimension.
    pub per_dim_error: Vec<f64>,
    /// Label accuracy for classification losses.
    pub accuracy: Option<f64>,
}

pub fn evaluate(model: &GradedModel, data: &[Example], spec: &GradingSpec) -> Result<EvalReport> {
    let cfg = &model.config;
    check_data(data, cfg)?;
    let od = cfg.output_dim;
    let mut tape = Tape::new();
    let b = model.params.bind_constants(&mut tape);
    let wv = loss_weights_on_tape(&mut tape, &b, cfg, spec)?;
    let weights = tape.value(wv).data().to_vec();
    let mut loss = 0.0;
    let mut per_dim = vec![0.0; od];
    let (mut hits, mut total) = (0usize, 0usize);
    let mut tokens = 0usize;
    for ex in data {
        let mut t = Tape::new();
        let b = model.params.bind_constants(&mut t);
        let f = forward_on_tape(&mut t, &b, cfg, spec, &ex.input)?;
        let l = crate::gnn::base_loss_on_tape(&mut t, cfg.base_loss, f.logits, &ex.target)?;
        let lm = t.value(l);
        let z = t.value(f.logits);
        for i in 0..lm.rows() {
            for k in 0..od {
                per_dim[k] += lm.get(i, k);
                loss += weights[k] * lm.get(i, k);
            }
            match cfg.base_loss {
                BaseLoss::BinaryCrossEntropy => {
                    for k in 0..od {
                        hits += usize::from((z.get(i, k) > 0.0) == (ex.target.get(i, k) > 0.5));
                        total += 1;
                    }
                }
                BaseLoss::CrossEntropy => {
                    let pred = crate::transformer::argmax(z.row(i));
                    let want = crate::transformer::argmax(ex.target.row(i));
                    hits += usize::from(pred == want);
                    total += 1;
                }
                BaseLoss::SquaredError => {}
            }
        }
        tokens += ex.input.len();
    }
    let n = tokens.max(1) as f64;
    Ok(EvalReport {
        loss: loss / n,
        per_dim_error: per_dim.into_iter().map(|v| v / n).collect(),
        accuracy: (total > 0).then(|| hits as f64 / total as f64),
    })
}

/// One CSV row of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    /// `λ_t`; empty in LGT mode.
    pub lambda: Option<f64>,
    pub loss: f64,
    pub loss_data: f64,
    pub grade_l2: f64,
    pub head_l2: f64,
    pub coord: f64,
    pub grad_norm_pre: f64,
    pub grad_norm_post: f64,
    pub clipped: bool,
    pub feature_grade_norm: f64,
    pub model_grade_norm: f64,
    pub head_grade_norm: f64,
    pub q_max: f64,
    pub grade_lr_bound: f64,
    pub grade_lr_eff: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GradedModel,
    pub mode: TrainMode,
    pub metrics: Vec<StepMetrics>,
    /// Evaluation before the first update (EGT: at `λ_1`).
    pub initial: EvalReport,
    /// Evaluation after the last update (EGT: at `λ_T`); absent on divergence.
    pub final_eval: Option<EvalReport>,
    pub wall_seconds: f64,
}

/// Applies a warm start to every grade tuple of the model.
pub fn apply_grade_init(model: &mut GradedModel, init: GradeInit) -> Result<()> {
    let GradeInit::Ramp { c } = init else {
        return Ok(());
    };
    let ramp = |n: usize| Matrix::row_vector(&(0..n).map(|k| c * k as f64).collect::<Vec<_>>());
    model.params.insert(FEATURE_GRADES, ramp(model.config.input_width()));
    model.params.insert(MODEL_GRADES, ramp(model.config.base.d_model));
    let dk = model.config.base.d_k();
    for (prefix, _) in model.config.attention_prefixes() {
        for h in 0..model.config.base.heads {
            model.params.insert(head_grade_name(&prefix, h), ramp(dk));
        }
    }
    Ok(())
}

fn row_norm(store: &ParamStore, name: &str) -> Result<f64> {
    Ok(store.get(name)?.frobenius_norm())
}

fn lambda_max_of(model: &GradedModel, cfg: &TrainConfig) -> Result<f64> {
    match (cfg.lambda_max, model.config.grading) {
        (Some(l), _) => Ok(l),
        (None, GradingSpec::Exponential { lambda }) => Ok(lambda),
        (None, GradingSpec::Linear { .. }) => Err(Error::Config("EGT training needs lambda_max".into())),
    }
}

/// Runs the mode's training algorithm. With `artifacts`, streams
/// `metrics.csv` and writes `step_XXXXXX.gtck` every `checkpoint_every` steps.
pub fn train(data: &[Example], mut model: GradedModel, cfg: &TrainConfig, artifacts: Option<&Path>) -> Result<TrainOutcome> {
    let started = Instant::now();
    let mode = TrainMode::of(&model.config.grading);
    cfg.validate(mode)?;
    model.config.validate()?;
    check_data(data, &model.config)?;
    apply_grade_init(&mut model, cfg.grade_init)?;
    let lambda_max = match mode {
        TrainMode::Egt => Some(lambda_max_of(&model, cfg)?),
        TrainMode::Lgt => None,
    };
    let spec_at = |t: usize| -> Result<GradingSpec> {
        match lambda_max {
            Some(l) => Ok(GradingSpec::exponential(anneal_lambda(t, cfg.steps, l)?)),
            None => Ok(model.config.grading),
        }
    };

    let mut writer = match artifacts {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(csv::Writer::from_path(dir.join("metrics.csv")).map_err(csv_err)?)
        }
        None => None,
    };

    let initial = evaluate(&model, data, &spec_at(1)?)?;
    let mut adam = Adam::new(cfg.adam());
    let mut rng = Rng::new(cfg.seed);
    let mut order = rng.permutation(data.len());
    let mut cursor = 0usize;
    let mut metrics = Vec::with_capacity(cfg.steps);

    for t in 1..=cfg.steps {
        let spec = spec_at(t)?;
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order = rng.permutation(data.len());
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }

        let mut tape = Tape::new();
        let b = model.params.bind(&mut tape);
        let data_loss = batch_loss_on_tape(&mut tape, &b, &model.config, &spec, &batch)?;
        let grade_vars = GradeVars::of_model(&model, &b)?;
        let terms = total_loss(&mut tape, data_loss, &grade_vars, cfg, mode)?;
        let loss = tape.value(terms.total).item();
        let diverged = |model: &GradedModel, metrics: &Vec<StepMetrics>| Error::DivergenceDetected {
            step: t,
            last_good: Box::new(TrainOutcome {
                model: model.clone(),
                mode,
                metrics: metrics.clone(),
                initial: initial.clone(),
                final_eval: None,
                wall_seconds: started.elapsed().as_secs_f64(),
            }),
        };
        if !loss.is_finite() {
            return Err(diverged(&model, &metrics));
        }

        let mut grads = tape.backward(terms.total)?.into_named();
        if !cfg.learnable_grades {
            grads.retain(|k, _| !is_grade_param(k));
        }
        if !grads.values().all(Matrix::is_finite) {
            return Err(diverged(&model, &metrics));
        }
        let clip = clip_gradient(&mut grads, cfg.clip)?;

        let q_max = model.q_max();
        let bound = match mode {
            TrainMode::Egt => egt_grade_lr_bound(spec_lambda(&spec), q_max)?,
            TrainMode::Lgt => lgt_grade_lr_bound(model.max_weight(&spec)?)?,
        };
        let grade_lr = effective_grade_lr(cfg.grade_lr, bound);

        let snapshot = model.params.clone();
        adam.step(&mut model.params, &grads, |name| if is_grade_param(name) { grade_lr } else { cfg.lr })?;
        for name in model.grade_names() {
            model.params.get_mut(&name)?.data_mut().iter_mut().for_each(|q| *q = q.max(0.0));
        }
        if !model.params.all_finite() {
            model.params = snapshot;
            return Err(diverged(&model, &metrics));
        }

        let head_sq: f64 = model
            .head_grade_groups()
            .iter()
            .flatten()
            .map(|n| row_norm(&model.params, n).map(|v| v * v))
            .sum::<Result<f64>>()?;
        let row = StepMetrics {
            step: t,
            lambda: lambda_max.map(|_| spec_lambda(&spec)),
            loss,
            loss_data: tape.value(terms.data).item(),
            grade_l2: tape.value(terms.grade_l2).item(),
            head_l2: tape.value(terms.head_l2).item(),
            coord: tape.value(terms.coord).item(),
            grad_norm_pre: clip.norm_before,
            grad_norm_post: clip.norm_after,
            clipped: clip.fired,
            feature_grade_norm: row_norm(&model.params, FEATURE_GRADES)?,
            model_grade_norm: row_norm(&model.params, MODEL_GRADES)?,
            head_grade_norm: head_sq.sqrt(),
            q_max,
            grade_lr_bound: bound,
            grade_lr_eff: grade_lr,
        };
        if let Some(w) = writer.as_mut() {
            w.serialize(&row).map_err(csv_err)?;
            w.flush()?;
        }
        metrics.push(row);

        if let (Some(dir), Some(k)) = (artifacts, cfg.checkpoint_every) {
            if t % k == 0 {
                model.save(&dir.join(format!("step_{t:06}.gtck")))?;
            }
        }
    }

    let final_spec = spec_at(cfg.steps)?;
    model.config.grading = final_spec;
    let final_eval = evaluate(&model, data, &final_spec)?;
    Ok(TrainOutcome {
        model,
        mode,
        metrics,
        initial,
        final_eval: Some(final_eval),
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

fn spec_lambda(spec: &GradingSpec) -> f64 {
    match spec {
        GradingSpec::Exponential { lambda } => *lambda,
        GradingSpec::Linear { .. } => 1.0,
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Grade initialization and training for a linear-mode model.
pub fn train_lgt(data: &[Example], model: GradedModel, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if TrainMode::of(&model.config.grading) != TrainMode::Lgt {
        return Err(Error::Config("train_lgt needs a linear grading spec".into()));
    }
    train(data, model, cfg, None)
}

/// Exponentially graded training with λ-annealing.
pub fn train_egt(data: &[Example], model: GradedModel, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if TrainMode::of(&model.config.grading) != TrainMode::Egt {
        return Err(Error::Config("train_egt needs an exponential grading spec".into()));
    }
    train(data, model, cfg, None)
}
