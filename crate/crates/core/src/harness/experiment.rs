//! Experiment configs, graded runs with an ungraded twin, and run artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tasks::{gen_task, poly_grades, TaskKind, HIERCOPY_VOCAB, POLY_DIM};
use crate::error::{Error, Result};
use crate::gnn::BaseLoss;
use crate::graded_space::{effective_dimension, GradingSpec, GradingTuple, WeightMap};
use crate::graded_transformer::{
    AttentionVariant, GradedModel, GradedModelConfig, InputKind, LossWeighting, PositionalGrading,
};
use crate::training::{train, EvalReport, Example, GradeInit, StepMetrics, TrainConfig, TrainMode, TrainOutcome};
use crate::transformer::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub size: usize,
    pub len: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    42
}

fn default_delta() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub model: GradedModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Also train the ungraded twin on the same data and seed.
    #[serde(default)]
    pub baseline: bool,
    /// δ used for the reported effective dimension.
    #[serde(default = "default_delta")]
    pub d_eff_delta: f64,
    /// Model init seed; defaults to the training seed.
    #[serde(default)]
    pub init_seed: Option<u64>,
}

/// Toy-scale base shape: d=16, h=2, N=2, d_f=32, n≤16, vocab 16.
pub fn toy_base() -> ModelConfig {
    ModelConfig {
        vocab_size: HIERCOPY_VOCAB,
        d_model: 16,
        heads: 2,
        layers: 2,
        decoder_layers: Some(0),
        ffn_dim: 32,
        max_len: 16,
        max_out_len: 16,
        ln_eps: 1e-5,
    }
}

fn spec_for(mode: TrainMode) -> GradingSpec {
    match mode {
        TrainMode::Lgt => GradingSpec::linear(WeightMap::PlusOne),
        TrainMode::Egt => GradingSpec::exponential(2.0),
    }
}

/// Default PolyDegree experiment for one mode.
pub fn poly_experiment(mode: TrainMode) -> ExperimentConfig {
    let base = toy_base();
    let mut model = GradedModelConfig::tokens(base.clone(), spec_for(mode));
    model.input = InputKind::Features { dim: POLY_DIM };
    model.output_dim = POLY_DIM;
    model.feature_grades = poly_grades();
    model.model_grades = GradingTuple::ramp(base.d_model, 0.05).expect("ramp");
    model.variant = AttentionVariant::ScoresSingleM;
    model.normalize_input = false;
    model.loss_weighting = LossWeighting::Fixed { grades: poly_grades() };
    model.base_loss = BaseLoss::BinaryCrossEntropy;
    ExperimentConfig {
        task: TaskConfig {
            kind: TaskKind::Poly,
            size: 512,
            len: 8,
            seed: 42,
        },
        model,
        train: TrainConfig {
            lambda_max: (mode == TrainMode::Egt).then_some(2.0),
            ..TrainConfig::default()
        },
        baseline: false,
        d_eff_delta: 0.5,
        init_seed: None,
    }
}

/// Default HierCopy experiment for one mode, with positional decay on.
pub fn hiercopy_experiment(mode: TrainMode) -> ExperimentConfig {
    let base = toy_base();
    let mut model = GradedModelConfig::tokens(base.clone(), spec_for(mode));
    model.output_dim = HIERCOPY_VOCAB;
    model.model_grades = GradingTuple::ramp(base.d_model, 0.05).expect("ramp");
    model.variant = AttentionVariant::MultiHead;
    model.positional = match mode {
        TrainMode::Egt => PositionalGrading::ExpDecay { alpha: 0.5, base: None },
        TrainMode::Lgt => PositionalGrading::LinearDecay { alpha: 0.05 },
    };
    model.base_loss = BaseLoss::CrossEntropy;
    ExperimentConfig {
        task: TaskConfig {
            kind: TaskKind::Hiercopy,
            size: 512,
            len: 6,
            seed: 42,
        },
        model,
        train: TrainConfig {
            lambda_max: (mode == TrainMode::Egt).then_some(2.0),
            ..TrainConfig::default()
        },
        baseline: false,
        d_eff_delta: 0.5,
        init_seed: None,
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(TrainMode::of(&self.model.grading))?;
        if self.task.size == 0 || self.task.len == 0 {
            return Err(Error::Config("task size and len must be at least 1".into()));
        }
        if self.task.len > self.model.base.max_len {
            return Err(Error::Config(format!(
                "task len {} exceeds max_len {}",
                self.task.len, self.model.base.max_len
            )));
        }
        let want_input = match self.task.kind {
            TaskKind::Poly => InputKind::Features { dim: POLY_DIM },
            TaskKind::Hiercopy => InputKind::Tokens,
        };
        if self.model.input != want_input {
            return Err(Error::Config(format!("task {:?} needs input {:?}", self.task.kind, want_input)));
        }
        let want_out = match self.task.kind {
            TaskKind::Poly => POLY_DIM,
            TaskKind::Hiercopy => HIERCOPY_VOCAB,
        };
        if self.model.output_dim != want_out {
            return Err(Error::Config(format!("task {:?} needs output_dim {want_out}", self.task.kind)));
        }
        if self.task.kind == TaskKind::Hiercopy && self.model.base.vocab_size < HIERCOPY_VOCAB {
            return Err(Error::Config(format!("hiercopy needs vocab_size >= {HIERCOPY_VOCAB}")));
        }
        if !(self.d_eff_delta >= 0.0) {
            return Err(Error::Config("d_eff_delta must be non-negative".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The ungraded twin: unit weights everywhere, no positional decay,
/// standard heads, uniform loss weights and frozen grades.
pub fn baseline_twin(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut t = cfg.clone();
    let m = &mut t.model;
    m.grading = GradingSpec::linear(WeightMap::PlusOne);
    m.feature_grades = GradingTuple::zeros(m.input_width());
    m.model_grades = GradingTuple::zeros(m.base.d_model);
    m.head_grades = None;
    m.position_grades = None;
    m.variant = AttentionVariant::Standard;
    m.positional = PositionalGrading::Off;
    m.normalize_input = false;
    m.normalize_ffn = false;
    m.loss_weighting = LossWeighting::Uniform;
    t.train.learnable_grades = false;
    t.train.grade_init = GradeInit::Keep;
    t.train.lambda_max = None;
    t.baseline = false;
    t
}

/// Errors of the upper and lower halves of output dimensions ranked by grade.
pub fn grade_split_errors(per_dim: &[f64], grades: &[f64]) -> (f64, f64) {
    let mut idx: Vec<usize> = (0..per_dim.len()).collect();
    idx.sort_by(|a, b| grades[*a].total_cmp(&grades[*b]).then(a.cmp(b)));
    let half = idx.len() / 2;
    let mean = |s: &[usize]| s.iter().map(|i| per_dim[*i]).sum::<f64>() / s.len().max(1) as f64;
    let low = mean(&idx[..half]);
    let high = mean(&idx[idx.len() - half..]);
    (high, low)
}

/// Summary JSON for one training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub task: TaskKind,
    pub mode: TrainMode,
    pub steps: usize,
    pub initial: EvalReport,
    pub final_eval: Option<EvalReport>,
    /// `final loss / initial loss` from the two evaluations.
    pub loss_ratio: Option<f64>,
    pub first_step_loss: Option<f64>,
    pub last_step_loss: Option<f64>,
    /// Mean per-dimension error over the upper half of grades.
    pub high_grade_error: Option<f64>,
    pub low_grade_error: Option<f64>,
    pub clip_events: usize,
    pub d_eff: usize,
    pub diverged: Option<usize>,
    pub wall_seconds: f64,
}

fn loss_grades(cfg: &GradedModelConfig) -> Vec<f64> {
    match &cfg.loss_weighting {
        LossWeighting::Fixed { grades } => grades.as_slice().to_vec(),
        _ => cfg.feature_grades.as_slice().to_vec(),
    }
}

pub fn summarize(run_id: &str, cfg: &ExperimentConfig, out: &TrainOutcome, diverged: Option<usize>) -> Result<RunSummary> {
    let grades = loss_grades(&cfg.model);
    let (high, low) = match &out.final_eval {
        Some(f) if grades.len() == f.per_dim_error.len() => {
            let (h, l) = grade_split_errors(&f.per_dim_error, &grades);
            (Some(h), Some(l))
        }
        _ => (None, None),
    };
    let feature = out.model.grades(crate::graded_transformer::FEATURE_GRADES)?;
    Ok(RunSummary {
        run_id: run_id.to_string(),
        task: cfg.task.kind,
        mode: out.mode,
        steps: out.metrics.len(),
        initial: out.initial.clone(),
        final_eval: out.final_eval.clone(),
        loss_ratio: out.final_eval.as_ref().map(|f| f.loss / out.initial.loss),
        first_step_loss: out.metrics.first().map(|m| m.loss_data),
        last_step_loss: out.metrics.last().map(|m| m.loss_data),
        high_grade_error: high,
        low_grade_error: low,
        clip_events: out.metrics.iter().filter(|m| m.clipped).count(),
        d_eff: effective_dimension(&feature, cfg.d_eff_delta),
        diverged,
        wall_seconds: out.wall_seconds,
    })
}

/// Artifacts and summaries of an experiment.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub graded: RunSummary,
    pub baseline: Option<RunSummary>,
    pub graded_outcome: TrainOutcome,
    pub out_dir: Option<PathBuf>,
}

fn run_one(run_id: &str, cfg: &ExperimentConfig, data: &[Example], dir: Option<&Path>) -> Result<(RunSummary, TrainOutcome)> {
    let model = GradedModel::init(cfg.model.clone(), cfg.init_seed.unwrap_or(cfg.train.seed))?;
    let sub = dir.map(|d| d.join(run_id));
    let result = train(data, model, &cfg.train, sub.as_deref());
    let (outcome, diverged) = match result {
        Ok(o) => (o, None),
        Err(Error::DivergenceDetected { step, last_good }) => {
            if let Some(s) = &sub {
                let summary = summarize(run_id, cfg, &last_good, Some(step))?;
                std::fs::write(s.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
                last_good.model.save(&s.join("last_good.gtck"))?;
            }
            return Err(Error::DivergenceDetected { step, last_good });
        }
        Err(e) => return Err(e),
    };
    let summary = summarize(run_id, cfg, &outcome, diverged)?;
    if let Some(s) = &sub {
        std::fs::write(s.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        outcome.model.save(&s.join("model.gtck"))?;
    }
    Ok((summary, outcome))
}

/// Trains the graded model (and the twin when asked) on one generated dataset.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = gen_task(cfg.task.kind, cfg.task.size, cfg.task.len, cfg.task.seed)?;
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    }
    let (graded, outcome) = run_one("graded", cfg, &data, out_dir)?;
    let baseline = if cfg.baseline {
        Some(run_one("baseline", &baseline_twin(cfg), &data, out_dir)?.0)
    } else {
        None
    };
    Ok(ExperimentReport {
        graded,
        baseline,
        graded_outcome: outcome,
        out_dir: out_dir.map(Path::to_path_buf),
    })
}

/// Mean attention mass that rows of the final encoder layer put on position 1.
pub fn first_position_attention(model: &GradedModel, data: &[Example]) -> Result<f64> {
    let last = format!("enc.{}.attn", model.config.base.layers - 1);
    let (mut sum, mut count) = (0.0, 0usize);
    for ex in data {
        let out = model.forward(&ex.input)?;
        for (prefix, _, a) in out.attention.iter().filter(|(p, _, _)| *p == last) {
            debug_assert_eq!(prefix, &last);
            for i in 0..a.rows() {
                sum += a.get(i, 0);
                count += 1;
            }
        }
    }
    Ok(sum / count.max(1) as f64)
}

/// Mean sequence length of a dataset.
pub fn mean_len(data: &[Example]) -> f64 {
    data.iter().map(|e| e.input.len() as f64).sum::<f64>() / data.len().max(1) as f64
}

/// Step rows as CSV text (same schema as the streamed file).
pub fn metrics_csv(rows: &[StepMetrics]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}
