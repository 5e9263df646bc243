//! Linearly and exponentially graded transformers.
//!
//! Pipeline: grade the input (`M x`), optionally normalize, project feature
//! inputs with `ReLU(W_in x″ + b_in)`, add the graded positional encoding,
//! run the stack with graded attention heads and graded FFN outputs, and
//! finish with `z = W_out(M h) + b_out`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{mismatch, Error, Result};
use crate::gnn::BaseLoss;
use crate::graded_space::{effective_dimension, grading_weights_on_tape, GradingSpec, GradingTuple};
use crate::params::{load_checkpoint, save_checkpoint, Bindings, ParamStore};
use crate::tensor::{randn_matrix, softmax_rows, Matrix, Rng};
use crate::transformer::{
    attend, decoder_on_tape, encoder_on_tape, init_transformer_store, positional_encoding, positional_matrix,
    token_embedding_on_tape, AttentionRecord, AttentionSite, ModelConfig, Standard, Sublayers, TransformerParams,
};

/// Placement of the grading matrix inside attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    /// Ungraded heads.
    #[default]
    Standard,
    /// `softmax(Q M Kᵀ/√d_k) V` with each head's own tuple.
    ScoresSingleM,
    /// `(QM)(KM)ᵀ` with one shared tuple (the block's head-0 tuple) for every head.
    QueriesKeysDoubleM,
    /// `(QM_h)(KM_h)ᵀ` with a distinct tuple per head.
    MultiHead,
    /// Standard scores, values `M v_j`.
    Values,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 5] = [
        AttentionVariant::Standard,
        AttentionVariant::ScoresSingleM,
        AttentionVariant::QueriesKeysDoubleM,
        AttentionVariant::MultiHead,
        AttentionVariant::Values,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PositionalGrading {
    #[default]
    Off,
    /// `Pe′(t) = (1 − αt) Pe(t)`.
    LinearDecay { alpha: f64 },
    /// `Pe′(t) = λ^{−αt} Pe(t)`; `base` overrides λ (required in linear mode).
    ExpDecay {
        alpha: f64,
        #[serde(default)]
        base: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputKind {
    #[default]
    Tokens,
    Features { dim: usize },
}

/// Per-output-dimension weights of the sequence loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossWeighting {
    #[default]
    Uniform,
    /// Weights from the learnable feature tuple (needs `output_dim` = input width).
    Tied,
    /// Weights from a fixed tuple.
    Fixed { grades: GradingTuple },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradedModelConfig {
    pub base: ModelConfig,
    #[serde(default)]
    pub input: InputKind,
    pub output_dim: usize,
    pub grading: GradingSpec,
    /// Grades of the raw input features (length = input width).
    pub feature_grades: GradingTuple,
    /// Model-level tuple (length `d_model`) used by the FFN and output grading
    /// and as the default source of head tuples.
    pub model_grades: GradingTuple,
    /// Encoder head tuples `[layer][head]`; defaults to slices of `model_grades`.
    #[serde(default)]
    pub head_grades: Option<Vec<Vec<GradingTuple>>>,
    #[serde(default)]
    pub variant: AttentionVariant,
    #[serde(default)]
    pub positional: PositionalGrading,
    #[serde(default = "yes")]
    pub grade_input: bool,
    #[serde(default = "yes")]
    pub normalize_input: bool,
    #[serde(default = "yes")]
    pub grade_ffn: bool,
    #[serde(default = "yes")]
    pub normalize_ffn: bool,
    #[serde(default = "yes")]
    pub grade_output: bool,
    /// Per-position input tuples, replacing `feature_grades` when present.
    #[serde(default)]
    pub position_grades: Option<Vec<GradingTuple>>,
    #[serde(default)]
    pub loss_weighting: LossWeighting,
    #[serde(default = "default_base_loss")]
    pub base_loss: BaseLoss,
}

fn default_base_loss() -> BaseLoss {
    BaseLoss::CrossEntropy
}

impl GradedModelConfig {
    /// Zero-grade, unnormalized configuration over a token vocabulary.
    pub fn tokens(base: ModelConfig, grading: GradingSpec) -> Self {
        let d = base.d_model;
        Self {
            output_dim: base.vocab_size,
            base,
            input: InputKind::Tokens,
            grading,
            feature_grades: GradingTuple::zeros(d),
            model_grades: GradingTuple::zeros(d),
            head_grades: None,
            variant: AttentionVariant::Standard,
            positional: PositionalGrading::Off,
            grade_input: true,
            normalize_input: false,
            grade_ffn: true,
            normalize_ffn: false,
            grade_output: true,
            position_grades: None,
            loss_weighting: LossWeighting::Uniform,
            base_loss: BaseLoss::CrossEntropy,
        }
    }

    pub fn input_width(&self) -> usize {
        match self.input {
            InputKind::Tokens => self.base.d_model,
            InputKind::Features { dim } => dim,
        }
    }

    /// Tuple of head `h` in the attention block `prefix`.
    pub fn head_tuple(&self, prefix: &str, layer: usize, h: usize) -> Result<GradingTuple> {
        let dk = self.base.d_k();
        if prefix.starts_with("enc.") {
            if let Some(tuples) = &self.head_grades {
                return tuples
                    .get(layer)
                    .and_then(|l| l.get(h))
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("missing head tuple for layer {layer} head {h}")));
            }
        }
        self.model_grades.slice(h * dk, dk)
    }

    pub fn attention_prefixes(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = (0..self.base.layers).map(|l| (format!("enc.{l}.attn"), l)).collect();
        for l in 0..self.base.decoder_depth() {
            out.push((format!("dec.{l}.self"), l));
            out.push((format!("dec.{l}.cross"), l));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        self.grading.validate().map_err(|e| Error::Config(e.to_string()))?;
        let d = self.base.d_model;
        let width = self.input_width();
        if width == 0 || self.output_dim == 0 {
            return Err(Error::Config("input and output widths must be at least 1".into()));
        }
        if self.feature_grades.len() != width {
            return Err(Error::Config(format!(
                "feature_grades has {} entries, input width is {width}",
                self.feature_grades.len()
            )));
        }
        if self.model_grades.len() != d {
            return Err(Error::Config(format!(
                "model_grades has {} entries, d_model is {d}",
                self.model_grades.len()
            )));
        }
        if let Some(tuples) = &self.head_grades {
            if tuples.len() != self.base.layers || tuples.iter().any(|l| l.len() != self.base.heads) {
                return Err(Error::Config("head_grades must be [layers][heads]".into()));
            }
            if tuples.iter().flatten().any(|q| q.len() != self.base.d_k()) {
                return Err(Error::Config("every head tuple must have d_k entries".into()));
            }
        }
        let spec = self.grading;
        let mut tuples = vec![&self.feature_grades, &self.model_grades];
        if let Some(h) = &self.head_grades {
            tuples.extend(h.iter().flatten());
        }
        for q in tuples {
            spec.weights(q).map_err(|e| Error::Config(e.to_string()))?;
        }
        match self.positional {
            PositionalGrading::Off => {}
            PositionalGrading::LinearDecay { alpha } => {
                if !(alpha >= 0.0) || alpha * self.base.max_len as f64 >= 1.0 {
                    return Err(Error::Config(format!(
                        "linear positional decay needs 0 <= alpha and alpha * max_len < 1, got alpha {alpha}"
                    )));
                }
            }
            PositionalGrading::ExpDecay { alpha, base } => {
                if !(alpha >= 0.0) {
                    return Err(Error::Config(format!("alpha must be non-negative, got {alpha}")));
                }
                match (base, spec) {
                    (Some(b), _) if !(b > 1.0) => {
                        return Err(Error::Config(format!("exponential decay base must exceed 1, got {b}")))
                    }
                    (None, GradingSpec::Linear { .. }) => {
                        return Err(Error::Config("exponential positional decay in linear mode needs a base".into()))
                    }
                    _ => {}
                }
            }
        }
        if let Some(pos) = &self.position_grades {
            if pos.len() < self.base.max_len || pos.iter().any(|q| q.len() != width) {
                return Err(Error::Config(format!(
                    "position_grades needs max_len ({}) tuples of width {width}",
                    self.base.max_len
                )));
            }
        }
        match &self.loss_weighting {
            LossWeighting::Tied if width != self.output_dim => {
                return Err(Error::Config("tied loss weighting needs output_dim equal to the input width".into()))
            }
            LossWeighting::Fixed { grades } if grades.len() != self.output_dim => {
                return Err(Error::Config("fixed loss grades must have output_dim entries".into()))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Name of the learnable tuple of head `h` in block `prefix`.
pub fn head_grade_name(prefix: &str, h: usize) -> String {
    format!("grade.{prefix}.{h}")
}

pub const FEATURE_GRADES: &str = "grade.feature";
pub const MODEL_GRADES: &str = "grade.model";

pub fn is_grade_param(name: &str) -> bool {
    name.starts_with("grade.")
}

/// Scale applied to `Pe(t)` at 1-based position `t`.
pub fn positional_scale(t: usize, positional: &PositionalGrading, spec: &GradingSpec) -> Result<f64> {
    match *positional {
        PositionalGrading::Off => Ok(1.0),
        PositionalGrading::LinearDecay { alpha } => Ok(1.0 - alpha * t as f64),
        PositionalGrading::ExpDecay { alpha, base } => {
            let lambda = match (base, spec) {
                (Some(b), _) => b,
                (None, GradingSpec::Exponential { lambda }) => *lambda,
                (None, GradingSpec::Linear { .. }) => {
                    return Err(Error::Config("exponential positional decay in linear mode needs a base".into()))
                }
            };
            Ok(lambda.powf(-alpha * t as f64))
        }
    }
}

/// Input of a graded model.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput {
    Tokens(Vec<usize>),
    Features(Matrix),
}

impl ModelInput {
    pub fn len(&self) -> usize {
        match self {
            ModelInput::Tokens(t) => t.len(),
            ModelInput::Features(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Graded replacements for attention heads and FFN outputs.
pub struct GradedSublayers<'a> {
    b: &'a Bindings,
    cfg: &'a GradedModelConfig,
    spec: GradingSpec,
    model_weights: Option<Var>,
    head_weights: HashMap<(String, usize), Var>,
    pub trace: Vec<AttentionRecord>,
}

impl<'a> GradedSublayers<'a> {
    pub fn new(b: &'a Bindings, cfg: &'a GradedModelConfig, spec: GradingSpec) -> Self {
        Self {
            b,
            cfg,
            spec,
            model_weights: None,
            head_weights: HashMap::new(),
            trace: Vec::new(),
        }
    }

    fn model_weights(&mut self, tape: &mut Tape) -> Result<Var> {
        if let Some(v) = self.model_weights {
            return Ok(v);
        }
        let q = self.b.get(MODEL_GRADES)?;
        let w = grading_weights_on_tape(tape, q, &self.spec)?;
        self.model_weights = Some(w);
        Ok(w)
    }

    fn head_weights(&mut self, tape: &mut Tape, prefix: &str, h: usize) -> Result<Var> {
        let key = (prefix.to_string(), h);
        if let Some(v) = self.head_weights.get(&key) {
            return Ok(*v);
        }
        let q = self.b.get(&head_grade_name(prefix, h))?;
        let w = grading_weights_on_tape(tape, q, &self.spec)?;
        self.head_weights.insert(key, w);
        Ok(w)
    }
}

impl Sublayers for GradedSublayers<'_> {
    fn head(
        &mut self,
        tape: &mut Tape,
        site: &AttentionSite,
        head: usize,
        q: Var,
        k: Var,
        v: Var,
        causal: bool,
    ) -> Result<(Var, Var)> {
        let variant = self.cfg.variant;
        match variant {
            AttentionVariant::Standard => Standard::default().head(tape, site, head, q, k, v, causal),
            AttentionVariant::ScoresSingleM => {
                let m = self.head_weights(tape, &site.prefix, head)?;
                let qm = tape.mul_row(q, m)?;
                let kt = tape.transpose(k);
                let s = tape.matmul(qm, kt)?;
                attend(tape, s, v, causal)
            }
            AttentionVariant::QueriesKeysDoubleM | AttentionVariant::MultiHead => {
                let which = if variant == AttentionVariant::MultiHead { head } else { 0 };
                let m = self.head_weights(tape, &site.prefix, which)?;
                let qm = tape.mul_row(q, m)?;
                let km = tape.mul_row(k, m)?;
                let kt = tape.transpose(km);
                let s = tape.matmul(qm, kt)?;
                attend(tape, s, v, causal)
            }
            AttentionVariant::Values => {
                let m = self.head_weights(tape, &site.prefix, head)?;
                let vm = tape.mul_row(v, m)?;
                let kt = tape.transpose(k);
                let s = tape.matmul(q, kt)?;
                attend(tape, s, vm, causal)
            }
        }
    }

    fn ffn_output(&mut self, tape: &mut Tape, _site: &str, y: Var) -> Result<Var> {
        let mut out = y;
        if self.cfg.grade_ffn {
            let m = self.model_weights(tape)?;
            out = tape.mul_row(out, m)?;
        }
        if self.cfg.normalize_ffn {
            out = tape.normalize_rows(out)?;
        }
        Ok(out)
    }

    fn record(&mut self, record: AttentionRecord) {
        self.trace.push(record);
    }
}

/// Tape handles produced by one graded forward pass.
#[derive(Debug, Clone)]
pub struct GradedForward {
    pub hidden: Var,
    pub logits: Var,
    pub attention: Vec<AttentionRecord>,
}

/// Graded input rows `M x` (optionally normalized) before any projection.
pub fn graded_input_on_tape(
    tape: &mut Tape,
    b: &Bindings,
    cfg: &GradedModelConfig,
    spec: &GradingSpec,
    x: Var,
) -> Result<Var> {
    let (n, w) = tape.value(x).shape();
    if w != cfg.input_width() {
        return Err(mismatch("graded_input", cfg.input_width(), w));
    }
    let mut out = x;
    if cfg.grade_input {
        if let Some(pos) = &cfg.position_grades {
            let mut weights = Matrix::zeros(n, w);
            for i in 0..n {
                let q = pos.get(i).ok_or(Error::SequenceTooLong { len: n, max: pos.len() })?;
                weights.row_mut(i).copy_from_slice(&spec.weights(q)?);
            }
            let wv = tape.constant(weights);
            out = tape.mul(out, wv)?;
        } else {
            let q = b.get(FEATURE_GRADES)?;
            let m = grading_weights_on_tape(tape, q, spec)?;
            out = tape.mul_row(out, m)?;
        }
    }
    if cfg.normalize_input {
        out = tape.normalize_rows(out)?;
    }
    Ok(out)
}

/// Rows `Pe′(1..=n)`.
pub fn graded_positional_matrix(n: usize, cfg: &GradedModelConfig, spec: &GradingSpec) -> Result<Matrix> {
    let mut pe = positional_matrix(n, cfg.base.d_model, cfg.base.max_len)?;
    for t in 1..=n {
        let s = positional_scale(t, &cfg.positional, spec)?;
        pe.row_mut(t - 1).iter_mut().for_each(|v| *v *= s);
    }
    Ok(pe)
}

/// Everything up to and including the graded positional term.
fn encoder_input_on_tape(
    tape: &mut Tape,
    b: &Bindings,
    cfg: &GradedModelConfig,
    spec: &GradingSpec,
    input: &ModelInput,
) -> Result<Var> {
    let n = input.len();
    if n > cfg.base.max_len {
        return Err(Error::SequenceTooLong {
            len: n,
            max: cfg.base.max_len,
        });
    }
    let x = match input {
        ModelInput::Tokens(tokens) => {
            if cfg.input != InputKind::Tokens {
                return Err(Error::Config("model expects feature input".into()));
            }
            token_embedding_on_tape(tape, b, &cfg.base, tokens)?
        }
        ModelInput::Features(m) => {
            if cfg.input == InputKind::Tokens {
                return Err(Error::Config("model expects token input".into()));
            }
            tape.constant(m.clone())
        }
    };
    let mut h = graded_input_on_tape(tape, b, cfg, spec, x)?;
    if let InputKind::Features { .. } = cfg.input {
        let w = b.get("in.w")?;
        let bias = b.get("in.b")?;
        let p = tape.matmul(h, w)?;
        let p = tape.add_row(p, bias)?;
        h = tape.relu(p);
    }
    let pe = tape.constant(graded_positional_matrix(n, cfg, spec)?);
    tape.add(h, pe)
}

/// `z = W_out (M h) + b_out`.
pub fn graded_output_on_tape(
    tape: &mut Tape,
    b: &Bindings,
    cfg: &GradedModelConfig,
    spec: &GradingSpec,
    hidden: Var,
) -> Result<Var> {
    let mut h = hidden;
    if cfg.grade_output {
        let q = b.get(MODEL_GRADES)?;
        let m = grading_weights_on_tape(tape, q, spec)?;
        h = tape.mul_row(h, m)?;
    }
    let w = b.get("out.w")?;
    let bias = b.get("out.b")?;
    let z = tape.matmul(h, w)?;
    tape.add_row(z, bias)
}

/// Full encoder pass with graded components and the output head.
pub fn forward_on_tape(
    tape: &mut Tape,
    b: &Bindings,
    cfg: &GradedModelConfig,
    spec: &GradingSpec,
    input: &ModelInput,
) -> Result<GradedForward> {
    let x = encoder_input_on_tape(tape, b, cfg, spec, input)?;
    let mut parts = GradedSublayers::new(b, cfg, *spec);
    let hidden = encoder_on_tape(tape, b, &cfg.base, x, &mut parts)?;
    let attention = std::mem::take(&mut parts.trace);
    let logits = graded_output_on_tape(tape, b, cfg, spec, hidden)?;
    Ok(GradedForward {
        hidden,
        logits,
        attention,
    })
}

/// Graded decoder over target tokens given encoder output `z`.
pub fn decode_on_tape(
    tape: &mut Tape,
    b: &Bindings,
    cfg: &GradedModelConfig,
    spec: &GradingSpec,
    tokens: &[usize],
    z: Var,
) -> Result<Var> {
    let y = encoder_input_on_tape(tape, b, cfg, spec, &ModelInput::Tokens(tokens.to_vec()))?;
    let mut parts = GradedSublayers::new(b, cfg, *spec);
    decoder_on_tape(tape, b, &cfg.base, y, z, &mut parts)
}

/// Values read back from a graded forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GradedOutput {
    pub hidden: Matrix,
    pub logits: Matrix,
    /// `(block prefix, head, attention weights)` in evaluation order.
    pub attention: Vec<(String, usize, Matrix)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradedModel {
    pub config: GradedModelConfig,
    pub params: ParamStore,
}

impl GradedModel {
    pub fn init(config: GradedModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let base = &config.base;
        let d = base.d_model;
        let mut params = init_transformer_store(base, &mut rng, config.input == InputKind::Tokens);
        if let InputKind::Features { dim } = config.input {
            params.insert("in.w", randn_matrix(&mut rng, dim, d).scale(1.0 / (dim as f64).sqrt()));
            params.insert("in.b", Matrix::zeros(1, d));
        }
        params.insert("out.w", randn_matrix(&mut rng, d, config.output_dim).scale(1.0 / (d as f64).sqrt()));
        params.insert("out.b", Matrix::zeros(1, config.output_dim));
        params.insert(FEATURE_GRADES, Matrix::row_vector(config.feature_grades.as_slice()));
        params.insert(MODEL_GRADES, Matrix::row_vector(config.model_grades.as_slice()));
        for (prefix, layer) in config.attention_prefixes() {
            for h in 0..base.heads {
                let q = config.head_tuple(&prefix, layer, h)?;
                params.insert(head_grade_name(&prefix, h), Matrix::row_vector(q.as_slice()));
            }
        }
        Ok(Self { config, params })
    }

    /// Current value of a stored grade row.
    pub fn grades(&self, name: &str) -> Result<GradingTuple> {
        GradingTuple::new(self.params.get(name)?.data().to_vec())
    }

    /// Names of every learnable grade row.
    pub fn grade_names(&self) -> Vec<String> {
        self.params.names().filter(|n| is_grade_param(n)).cloned().collect()
    }

    /// Names of head tuples, grouped per attention block.
    pub fn head_grade_groups(&self) -> Vec<Vec<String>> {
        self.config
            .attention_prefixes()
            .into_iter()
            .map(|(p, _)| (0..self.config.base.heads).map(|h| head_grade_name(&p, h)).collect())
            .collect()
    }

    /// Largest grade over the feature, model and head tuples.
    pub fn q_max(&self) -> f64 {
        self.grade_names()
            .iter()
            .filter_map(|n| self.params.get(n).ok())
            .flat_map(|m| m.data().iter().copied())
            .fold(0.0, f64::max)
    }

    /// Largest grading weight `m_max` over all stored tuples under `spec`.
    pub fn max_weight(&self, spec: &GradingSpec) -> Result<f64> {
        let mut best = f64::NEG_INFINITY;
        for n in self.grade_names() {
            let q = GradingTuple::signed(self.params.get(&n)?.data().to_vec())?;
            best = best.max(spec.max_weight(&q)?);
        }
        Ok(best)
    }

    /// `d_eff` of the model tuple.
    pub fn effective_dimension(&self, delta: f64) -> Result<usize> {
        Ok(effective_dimension(&self.grades(MODEL_GRADES)?, delta))
    }

    pub fn forward_with(&self, input: &ModelInput, spec: &GradingSpec) -> Result<GradedOutput> {
        let mut tape = Tape::new();
        let b = self.params.bind_constants(&mut tape);
        let f = forward_on_tape(&mut tape, &b, &self.config, spec, input)?;
        Ok(GradedOutput {
            hidden: tape.value(f.hidden).clone(),
            logits: tape.value(f.logits).clone(),
            attention: f
                .attention
                .iter()
                .map(|r| (r.site.prefix.clone(), r.head, tape.value(r.weights).clone()))
                .collect(),
        })
    }

    pub fn forward(&self, input: &ModelInput) -> Result<GradedOutput> {
        self.forward_with(input, &self.config.grading)
    }

    /// Graded decoder representations for `targets` given an encoder output.
    pub fn decode(&self, targets: &[usize], z: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let b = self.params.bind_constants(&mut tape);
        let zv = tape.constant(z.clone());
        let v = decode_on_tape(&mut tape, &b, &self.config, &self.config.grading, targets, zv)?;
        Ok(tape.value(v).clone())
    }

    /// The ungraded twin sharing this model's transformer weights.
    pub fn baseline(&self) -> Result<TransformerParams> {
        let mut store = ParamStore::new();
        for (k, v) in self.params.iter() {
            if k == "embed" || k.starts_with("enc.") || k.starts_with("dec.") {
                store.insert(k.clone(), v.clone());
            }
        }
        Ok(TransformerParams {
            config: self.config.base.clone(),
            store,
        })
    }

    pub fn header(&self) -> serde_json::Value {
        serde_json::json!({"kind": "graded", "config": self.config})
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.header(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, params) = load_checkpoint(path)?;
        if header.get("kind").and_then(|k| k.as_str()) != Some("graded") {
            return Err(Error::Checkpoint("not a graded model checkpoint".into()));
        }
        let config: GradedModelConfig = serde_json::from_value(header["config"].clone())?;
        config.validate()?;
        let fresh = Self::init(config.clone(), 0)?;
        for (name, m) in fresh.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter {name}")))?;
            if got.shape() != m.shape() {
                return Err(Error::Checkpoint(format!("parameter {name} has the wrong shape")));
            }
        }
        Ok(Self { config, params })
    }
}

/// LGT forward; the model must be in linear mode.
pub fn lgt_forward(model: &GradedModel, input: &ModelInput) -> Result<GradedOutput> {
    match model.config.grading {
        GradingSpec::Linear { .. } => model.forward(input),
        GradingSpec::Exponential { .. } => Err(Error::Config("lgt_forward needs a linear grading spec".into())),
    }
}

/// EGT forward; the model must be in exponential mode.
pub fn egt_forward(model: &GradedModel, input: &ModelInput) -> Result<GradedOutput> {
    match model.config.grading {
        GradingSpec::Exponential { .. } => model.forward(input),
        GradingSpec::Linear { .. } => Err(Error::Config("egt_forward needs an exponential grading spec".into())),
    }
}

/// `M x`, divided by `‖M x‖₂` when `normalize` is set.
pub fn graded_input(x: &[f64], q: &GradingTuple, spec: &GradingSpec, normalize: bool) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let xv = tape.constant(Matrix::row_vector(x));
    let qv = tape.constant(Matrix::row_vector(q.as_slice()));
    if q.len() != x.len() {
        return Err(mismatch("graded_input", q.len(), x.len()));
    }
    let m = grading_weights_on_tape(&mut tape, qv, spec)?;
    let mut out = tape.mul_row(xv, m)?;
    if normalize {
        out = tape.normalize_rows(out)?;
    }
    Ok(tape.value(out).data().to_vec())
}

/// `Pe′(t)` for a 1-based position.
pub fn graded_positional(t: usize, d: usize, max_len: usize, positional: &PositionalGrading, spec: &GradingSpec) -> Result<Vec<f64>> {
    let s = positional_scale(t, positional, spec)?;
    Ok(positional_encoding(t, d, max_len)?.into_iter().map(|v| v * s).collect())
}

/// Pre-softmax scores of one graded head (before the `1/√d_k` factor).
pub fn graded_scores(q: &Matrix, k: &Matrix, tuple: &GradingTuple, variant: AttentionVariant, spec: &GradingSpec) -> Result<Matrix> {
    if q.cols() != k.cols() {
        return Err(mismatch("graded_scores", q.cols(), k.cols()));
    }
    let m = spec.weights(tuple)?;
    if m.len() != q.cols() {
        return Err(mismatch("graded_scores", q.cols(), m.len()));
    }
    let scale = |x: &Matrix| -> Matrix {
        let mut o = x.clone();
        for i in 0..o.rows() {
            for (v, w) in o.row_mut(i).iter_mut().zip(&m) {
                *v *= w;
            }
        }
        o
    };
    match variant {
        AttentionVariant::Standard | AttentionVariant::Values => q.matmul(&k.transpose()),
        AttentionVariant::ScoresSingleM => scale(q).matmul(&k.transpose()),
        AttentionVariant::QueriesKeysDoubleM | AttentionVariant::MultiHead => scale(q).matmul(&scale(k).transpose()),
    }
}

/// One graded head: `(output, attention weights)`.
pub fn graded_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    tuple: &GradingTuple,
    variant: AttentionVariant,
    spec: &GradingSpec,
    causal: bool,
) -> Result<(Matrix, Matrix)> {
    if k.rows() != v.rows() {
        return Err(mismatch("graded_attention", k.rows(), v.rows()));
    }
    if q.cols() != k.cols() || tuple.len() != q.cols() {
        return Err(mismatch("graded_attention", q.cols(), format!("k {} tuple {}", k.cols(), tuple.len())));
    }
    let dk = q.cols();
    let mut cfg = GradedModelConfig::tokens(
        ModelConfig {
            d_model: dk,
            heads: 1,
            ..ModelConfig::default()
        },
        *spec,
    );
    cfg.variant = variant;
    let mut tape = Tape::new();
    let mut store = ParamStore::new();
    store.insert(head_grade_name("att", 0), Matrix::row_vector(tuple.as_slice()));
    let b = store.bind_constants(&mut tape);
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let site = AttentionSite {
        prefix: "att".into(),
        layer: 0,
        kind: crate::transformer::SiteKind::Encoder,
    };
    let mut parts = GradedSublayers::new(&b, &cfg, *spec);
    let (out, a) = parts.head(&mut tape, &site, 0, qv, kv, vv, causal)?;
    Ok((tape.value(out).clone(), tape.value(a).clone()))
}

/// `M · Fnn(x)` for the block at `prefix`, normalized when asked.
pub fn graded_ffn(x: &Matrix, params: &ParamStore, prefix: &str, q: &GradingTuple, spec: &GradingSpec, normalize: bool) -> Result<Matrix> {
    let mut tape = Tape::new();
    let b = params.bind_constants(&mut tape);
    let xv = tape.constant(x.clone());
    let f = crate::transformer::feed_forward_on_tape(&mut tape, &b, prefix, xv)?;
    let qv = tape.constant(Matrix::row_vector(q.as_slice()));
    let m = grading_weights_on_tape(&mut tape, qv, spec)?;
    let mut out = tape.mul_row(f, m)?;
    if normalize {
        out = tape.normalize_rows(out)?;
    }
    Ok(tape.value(out).clone())
}

/// `softmax(W_out (M h) + b_out)` row-wise; returns `(logits, probabilities)`.
pub fn graded_output(h: &Matrix, w_out: &Matrix, b_out: &[f64], q: &GradingTuple, spec: &GradingSpec) -> Result<(Matrix, Matrix)> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let qv = tape.constant(Matrix::row_vector(q.as_slice()));
    let m = grading_weights_on_tape(&mut tape, qv, spec)?;
    let mh = tape.mul_row(hv, m)?;
    let w = tape.constant(w_out.clone());
    let z = tape.matmul(mh, w)?;
    let bv = tape.constant(Matrix::row_vector(b_out));
    let z = tape.add_row(z, bv)?;
    let logits = tape.value(z).clone();
    let probs = softmax_rows(&logits);
    Ok((logits, probs))
}

/// Result of the attention expressivity construction.
#[derive(Debug, Clone)]
pub struct AttentionConstruction {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Smoothed target `A₀′`.
    pub smoothed: Matrix,
    /// `softmax(QKᵀ/√d_k) V`.
    pub achieved: Matrix,
    /// `‖achieved − A₀‖_F`.
    pub error: f64,
}

/// Builds `Q, K, V` whose attention output approximates a row-stochastic `A₀`
/// within `δ` in Frobenius norm (`d_k = n`).
pub fn construct_attention_target(a0: &Matrix, delta: f64) -> Result<AttentionConstruction> {
    let n = a0.rows();
    if a0.cols() != n || n == 0 {
        return Err(Error::NotRowStochastic(format!("target must be square, got {}x{}", a0.rows(), a0.cols())));
    }
    for i in 0..n {
        let row = a0.row(i);
        if row.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::NotRowStochastic(format!("row {i} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::NotRowStochastic(format!("row {i} sums to {s}")));
        }
    }
    if !(delta > 0.0) {
        return Err(Error::Config(format!("delta must be positive, got {delta}")));
    }
    let dk = n;
    let eps = delta / (2.0 * ((n * dk) as f64).sqrt());
    let mut smoothed = a0.map(|v| v.max(eps));
    for i in 0..n {
        let s: f64 = smoothed.row(i).iter().sum();
        smoothed.row_mut(i).iter_mut().for_each(|v| *v /= s);
    }
    let q = smoothed.map(|v| (dk as f64).sqrt() * v.ln());
    let k = Matrix::identity(dk);
    let v = Matrix::identity(dk);
    let achieved = crate::transformer::attention_head(&q, &k, &v, false)?;
    let error = achieved.sub(a0)?.frobenius_norm();
    Ok(AttentionConstruction {
        q,
        k,
        v,
        smoothed,
        achieved,
        error,
    })
}
