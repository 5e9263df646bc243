//! Synthetic tasks and the dataset file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graded_space::GradingTuple;
use crate::graded_transformer::ModelInput;
use crate::tensor::{Matrix, Rng};
use crate::training::Example;
use crate::transformer::{EOS_TOKEN, START_TOKEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Presence of each monomial degree in coefficient vectors.
    Poly,
    /// Copy with a head-token-selected shift.
    Hiercopy,
}

/// Degrees 0..=3.
pub const POLY_DIM: usize = 4;
/// Noise scale on the low-degree input coordinates.
pub const POLY_NOISE: f64 = 0.15;
/// Low-degree coordinates that receive input noise.
pub const POLY_NOISY_DIMS: usize = 2;

/// `q = (0, 0.5, 1, 2)`.
pub fn poly_grades() -> GradingTuple {
    GradingTuple::new(vec![0.0, 0.5, 1.0, 2.0]).expect("static grades")
}

pub const HIERCOPY_VOCAB: usize = 16;
/// Number of head tokens; token `FIRST_CONTENT + j` selects shift `j`.
pub const HIERCOPY_HEADS: usize = 4;
pub const FIRST_CONTENT: usize = 3;
pub const CONTENT_TOKENS: usize = HIERCOPY_VOCAB - FIRST_CONTENT;

/// One sequence of `len` coefficient vectors with presence labels.
pub fn poly_example(rng: &mut Rng, len: usize) -> Result<Example> {
    let mut x = Matrix::zeros(len, POLY_DIM);
    let mut y = Matrix::zeros(len, POLY_DIM);
    for i in 0..len {
        for k in 0..POLY_DIM {
            let present = rng.bernoulli(0.5);
            let mut v = 0.0;
            if present {
                let sign = if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
                v = sign * rng.uniform_range(0.5, 1.5);
                y.set(i, k, 1.0);
            }
            if k < POLY_NOISY_DIMS {
                v += POLY_NOISE * rng.normal();
            }
            x.set(i, k, v);
        }
    }
    Ok(Example {
        input: ModelInput::Features(x),
        target: y,
    })
}

/// Head token at position 1, content after it; target at position 1 is the
/// head itself and later positions are content shifted by the head's index.
pub fn hiercopy_example(rng: &mut Rng, len: usize) -> Result<Example> {
    if len < 2 {
        return Err(Error::Config("hiercopy sequences need at least 2 tokens".into()));
    }
    let j = rng.below(HIERCOPY_HEADS);
    let head = FIRST_CONTENT + j;
    let mut tokens = vec![head];
    let mut labels = vec![head];
    for _ in 1..len {
        let c = rng.below(CONTENT_TOKENS);
        tokens.push(FIRST_CONTENT + c);
        labels.push(FIRST_CONTENT + (c + j) % CONTENT_TOKENS);
    }
    debug_assert!(tokens.iter().all(|t| *t != START_TOKEN && *t != EOS_TOKEN));
    Example::classes(ModelInput::Tokens(tokens), &labels, HIERCOPY_VOCAB)
}

pub fn gen_task(kind: TaskKind, size: usize, len: usize, seed: u64) -> Result<Vec<Example>> {
    if size == 0 || len == 0 {
        return Err(Error::Config("dataset size and sequence length must be at least 1".into()));
    }
    let mut rng = Rng::new(seed);
    (0..size)
        .map(|_| match kind {
            TaskKind::Poly => poly_example(&mut rng, len),
            TaskKind::Hiercopy => hiercopy_example(&mut rng, len),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum InputRecord {
    Tokens(Vec<usize>),
    Features(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExampleRecord {
    input: InputRecord,
    target: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub task: TaskKind,
    pub seed: u64,
    pub len: usize,
    examples: Vec<ExampleRecord>,
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

impl DatasetFile {
    pub fn new(task: TaskKind, seed: u64, len: usize, data: &[Example]) -> Self {
        let examples = data
            .iter()
            .map(|e| ExampleRecord {
                input: match &e.input {
                    ModelInput::Tokens(t) => InputRecord::Tokens(t.clone()),
                    ModelInput::Features(m) => InputRecord::Features(rows(m)),
                },
                target: rows(&e.target),
            })
            .collect();
        Self {
            task,
            seed,
            len,
            examples,
        }
    }

    pub fn examples(&self) -> Result<Vec<Example>> {
        self.examples
            .iter()
            .map(|r| {
                let input = match &r.input {
                    InputRecord::Tokens(t) => ModelInput::Tokens(t.clone()),
                    InputRecord::Features(f) => ModelInput::Features(Matrix::from_rows(f)?),
                };
                Ok(Example {
                    input,
                    target: Matrix::from_rows(&r.target)?,
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
