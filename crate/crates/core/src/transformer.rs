//! Baseline encoder/decoder transformer.
//!
//! Layers are post-norm: `X′ = Ln(X + Mh(X))`, `Ln(X′ + Fnn(X′))`.
//! Everything is written against the tape; the plain functions bind the
//! parameters as constants and read the result back.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{mismatch, Error, Result};
use crate::params::{Bindings, ParamStore};
use crate::tensor::{randn_matrix, Matrix, Rng};

pub const START_TOKEN: usize = 1;
pub const EOS_TOKEN: usize = 2;
const MASK_VALUE: f64 = -1e30;

fn default_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Encoder depth N.
    pub layers: usize,
    /// Decoder depth; defaults to `layers`.
    #[serde(default)]
    pub decoder_layers: Option<usize>,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub max_out_len: usize,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            d_model: 16,
            heads: 2,
            layers: 2,
            decoder_layers: None,
            ffn_dim: 32,
            max_len: 16,
            max_out_len: 16,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn decoder_depth(&self) -> usize {
        self.decoder_layers.unwrap_or(self.layers)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("max_len", self.max_len),
            ("max_out_len", self.max_out_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config(format!("ln_eps must be positive, got {}", self.ln_eps)));
        }
        Ok(())
    }
}

/// `Pe(i)` for a 1-based position.
pub fn positional_encoding(position: usize, d: usize, max_len: usize) -> Result<Vec<f64>> {
    if position < 1 || position > max_len {
        return Err(Error::PositionOutOfRange { position, max: max_len });
    }
    let i = position as f64;
    Ok((0..d)
        .map(|k| {
            if k % 2 == 0 {
                (i / 10000f64.powf(k as f64 / d as f64)).sin()
            } else {
                (i / 10000f64.powf((k - 1) as f64 / d as f64)).cos()
            }
        })
        .collect())
}

/// Rows `Pe(1..=n)`.
pub fn positional_matrix(n: usize, d: usize, max_len: usize) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = (1..=n)
        .map(|i| positional_encoding(i, d, max_len))
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, d));
    }
    Matrix::from_rows(&rows)
}

fn attention_prefixes(cfg: &ModelConfig) -> Vec<String> {
    let mut out: Vec<String> = (0..cfg.layers).map(|l| format!("enc.{l}.attn")).collect();
    for l in 0..cfg.decoder_depth() {
        out.push(format!("dec.{l}.self"));
        out.push(format!("dec.{l}.cross"));
    }
    out
}

fn init_attention(store: &mut ParamStore, rng: &mut Rng, prefix: &str, cfg: &ModelConfig) {
    let (d, dk) = (cfg.d_model, cfg.d_k());
    let s = 1.0 / (d as f64).sqrt();
    for h in 0..cfg.heads {
        for p in ["q", "k", "v"] {
            store.insert(format!("{prefix}.{p}.{h}"), randn_matrix(rng, d, dk).scale(s));
        }
    }
    store.insert(format!("{prefix}.o"), randn_matrix(rng, cfg.heads * dk, d).scale(s));
}

fn init_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.gamma"), Matrix::filled(1, d, 1.0));
    store.insert(format!("{prefix}.beta"), Matrix::zeros(1, d));
}

fn init_ffn(store: &mut ParamStore, rng: &mut Rng, prefix: &str, cfg: &ModelConfig) {
    let (d, f) = (cfg.d_model, cfg.ffn_dim);
    store.insert(format!("{prefix}.w1"), randn_matrix(rng, d, f).scale(1.0 / (d as f64).sqrt()));
    store.insert(format!("{prefix}.b1"), Matrix::zeros(1, f));
    store.insert(format!("{prefix}.w2"), randn_matrix(rng, f, d).scale(1.0 / (f as f64).sqrt()));
    store.insert(format!("{prefix}.b2"), Matrix::zeros(1, d));
}

/// Gaussian initialization with standard deviation `1/√fan_in`.
pub fn init_transformer_store(cfg: &ModelConfig, rng: &mut Rng, with_embedding: bool) -> ParamStore {
    let mut store = ParamStore::new();
    let d = cfg.d_model;
    if with_embedding {
        store.insert("embed", randn_matrix(rng, cfg.vocab_size, d).scale(1.0 / (d as f64).sqrt()));
    }
    for l in 0..cfg.layers {
        init_attention(&mut store, rng, &format!("enc.{l}.attn"), cfg);
        init_norm(&mut store, &format!("enc.{l}.ln1"), d);
        init_ffn(&mut store, rng, &format!("enc.{l}.ffn"), cfg);
        init_norm(&mut store, &format!("enc.{l}.ln2"), d);
    }
    for l in 0..cfg.decoder_depth() {
        init_attention(&mut store, rng, &format!("dec.{l}.self"), cfg);
        init_norm(&mut store, &format!("dec.{l}.ln1"), d);
        init_attention(&mut store, rng, &format!("dec.{l}.cross"), cfg);
        init_norm(&mut store, &format!("dec.{l}.ln2"), d);
        init_ffn(&mut store, rng, &format!("dec.{l}.ffn"), cfg);
        init_norm(&mut store, &format!("dec.{l}.ln3"), d);
    }
    store
}

/// Where an attention block sits in the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteKind {
    Encoder,
    DecoderSelf,
    DecoderCross,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionSite {
    pub prefix: String,
    pub layer: usize,
    pub kind: SiteKind,
}

/// Attention weights recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub site: AttentionSite,
    pub head: usize,
    pub weights: Var,
}

/// Hooks that let graded models replace pieces of the stack.
pub trait Sublayers {
    /// One head: returns `(output n×d_k, attention weights n×m)`.
    fn head(
        &mut self,
        tape: &mut Tape,
        site: &AttentionSite,
        head: usize,
        q: Var,
        k: Var,
        v: Var,
        causal: bool,
    ) -> Result<(Var, Var)>;

    /// Post-processing of each FFN output before the residual.
    fn ffn_output(&mut self, _tape: &mut Tape, _site: &str, y: Var) -> Result<Var> {
        Ok(y)
    }

    fn record(&mut self, _record: AttentionRecord) {}
}

/// Ungraded components, optionally keeping attention maps.
#[derive(Debug, Default)]
pub struct Standard {
    pub trace: Vec<AttentionRecord>,
}

impl Sublayers for Standard {
    fn head(
        &mut self,
        tape: &mut Tape,
        _site: &AttentionSite,
        _head: usize,
        q: Var,
        k: Var,
        v: Var,
        causal: bool,
    ) -> Result<(Var, Var)> {
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt)?;
        attend(tape, scores, v, causal)
    }

    fn record(&mut self, record: AttentionRecord) {
        self.trace.push(record);
    }
}

/// `softmax(S/√d_k [+ mask]) V` from raw scores `S`; `d_k` is read from `v`.
pub fn attend(tape: &mut Tape, scores: Var, v: Var, causal: bool) -> Result<(Var, Var)> {
    let dk = tape.value(v).cols() as f64;
    let mut s = tape.scale(scores, 1.0 / dk.sqrt());
    if causal {
        let (n, m) = tape.value(s).shape();
        let mut mask = Matrix::zeros(n, m);
        for i in 0..n {
            for j in (i + 1)..m {
                mask.set(i, j, MASK_VALUE);
            }
        }
        let mv = tape.constant(mask);
        s = tape.add(s, mv)?;
    }
    let a = tape.softmax_rows(s);
    let out = tape.matmul(a, v)?;
    Ok((out, a))
}

/// Multi-head attention with queries from `xq` and keys/values from `xkv`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_on_tape(
    tape: &mut Tape,
    b: &Bindings,
    cfg: &ModelConfig,
    site: &AttentionSite,
    xq: Var,
    xkv: Var,
    causal: bool,
    parts: &mut dyn Sublayers,
) -> Result<Var> {
    let d = cfg.d_model;
    for x in [xq, xkv] {
        if tape.value(x).cols() != d {
            return Err(mismatch("multi_head", d, tape.value(x).cols()));
        }
    }
    let p = &site.prefix;
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let wq = b.get(&format!("{p}.q.{h}"))?;
        let wk = b.get(&format!("{p}.k.{h}"))?;
        let wv = b.get(&format!("{p}.v.{h}"))?;
        let q = tape.matmul(xq, wq)?;
        let k = tape.matmul(xkv, wk)?;
        let v = tape.matmul(xkv, wv)?;
        let (out, weights) = parts.head(tape, site, h, q, k, v, causal)?;
        parts.record(AttentionRecord {
            site: site.clone(),
            head: h,
            weights,
        });
        heads.push(out);
    }
    let cat = tape.concat_cols(&heads)?;
    let wo = b.get(&format!("{p}.o"))?;
    tape.matmul(cat, wo)
}

pub fn feed_forward_on_tape(tape: &mut Tape, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let w1 = b.get(&format!("{prefix}.w1"))?;
    let b1 = b.get(&format!("{prefix}.b1"))?;
    let w2 = b.get(&format!("{prefix}.w2"))?;
    let b2 = b.get(&format!("{prefix}.b2"))?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, w2)?;
    tape.add_row(o, b2)
}

pub fn layer_norm_on_tape(tape: &mut Tape, b: &Bindings, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let g = b.get(&format!("{prefix}.gamma"))?;
    let be = b.get(&format!("{prefix}.beta"))?;
    tape.layer_norm(x, g, be, eps)
}

fn residual_norm(tape: &mut Tape, b: &Bindings, prefix: &str, x: Var, y: Var, eps: f64) -> Result<Var> {
    let s = tape.add(x, y)?;
    layer_norm_on_tape(tape, b, prefix, s, eps)
}

pub fn encoder_on_tape(tape: &mut Tape, b: &Bindings, cfg: &ModelConfig, x: Var, parts: &mut dyn Sublayers) -> Result<Var> {
    let mut h = x;
    for l in 0..cfg.layers {
        let site = AttentionSite {
            prefix: format!("enc.{l}.attn"),
            layer: l,
            kind: SiteKind::Encoder,
        };
        let a = multi_head_on_tape(tape, b, cfg, &site, h, h, false, parts)?;
        let h1 = residual_norm(tape, b, &format!("enc.{l}.ln1"), h, a, cfg.ln_eps)?;
        let ffn = format!("enc.{l}.ffn");
        let f = feed_forward_on_tape(tape, b, &ffn, h1)?;
        let f = parts.ffn_output(tape, &ffn, f)?;
        h = residual_norm(tape, b, &format!("enc.{l}.ln2"), h1, f, cfg.ln_eps)?;
    }
    Ok(h)
}

pub fn decoder_on_tape(
    tape: &mut Tape,
    b: &Bindings,
    cfg: &ModelConfig,
    y: Var,
    z: Var,
    parts: &mut dyn Sublayers,
) -> Result<Var> {
    let mut h = y;
    for l in 0..cfg.decoder_depth() {
        let self_site = AttentionSite {
            prefix: format!("dec.{l}.self"),
            layer: l,
            kind: SiteKind::DecoderSelf,
        };
        let a = multi_head_on_tape(tape, b, cfg, &self_site, h, h, true, parts)?;
        let h1 = residual_norm(tape, b, &format!("dec.{l}.ln1"), h, a, cfg.ln_eps)?;
        let cross_site = AttentionSite {
            prefix: format!("dec.{l}.cross"),
            layer: l,
            kind: SiteKind::DecoderCross,
        };
        let c = multi_head_on_tape(tape, b, cfg, &cross_site, h1, z, false, parts)?;
        let h2 = residual_norm(tape, b, &format!("dec.{l}.ln2"), h1, c, cfg.ln_eps)?;
        let ffn = format!("dec.{l}.ffn");
        let f = feed_forward_on_tape(tape, b, &ffn, h2)?;
        let f = parts.ffn_output(tape, &ffn, f)?;
        h = residual_norm(tape, b, &format!("dec.{l}.ln3"), h2, f, cfg.ln_eps)?;
    }
    Ok(h)
}

/// One-hot rows for 1-based token ids.
pub fn one_hot(tokens: &[usize], vocab: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(tokens.len(), vocab);
    for (i, &t) in tokens.iter().enumerate() {
        if t < 1 || t > vocab {
            return Err(Error::TokenOutOfRange { token: t, vocab });
        }
        m.set(i, t - 1, 1.0);
    }
    Ok(m)
}

/// Embedding lookup without the positional term.
pub fn token_embedding_on_tape(tape: &mut Tape, b: &Bindings, cfg: &ModelConfig, tokens: &[usize]) -> Result<Var> {
    if tokens.len() > cfg.max_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_len,
        });
    }
    let oh = tape.constant(one_hot(tokens, cfg.vocab_size)?);
    let we = b.get("embed")?;
    tape.matmul(oh, we)
}

pub fn embed_on_tape(tape: &mut Tape, b: &Bindings, cfg: &ModelConfig, tokens: &[usize]) -> Result<Var> {
    let x = token_embedding_on_tape(tape, b, cfg, tokens)?;
    let pe = tape.constant(positional_matrix(tokens.len(), cfg.d_model, cfg.max_len)?);
    tape.add(x, pe)
}

/// Baseline model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl TransformerParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let store = init_transformer_store(&config, &mut Rng::new(seed), true);
        Ok(Self { config, store })
    }

    /// Checks that every expected matrix is present with the right shape.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let expect_shape = |name: &str, r: usize, k: usize| -> Result<()> {
            let m = self.store.get(name)?;
            if m.shape() != (r, k) {
                return Err(mismatch("TransformerParams", format!("{name} {r}x{k}"), format!("{}x{}", m.rows(), m.cols())));
            }
            Ok(())
        };
        expect_shape("embed", c.vocab_size, c.d_model)?;
        for p in attention_prefixes(c) {
            for h in 0..c.heads {
                for w in ["q", "k", "v"] {
                    expect_shape(&format!("{p}.{w}.{h}"), c.d_model, c.d_k())?;
                }
            }
            expect_shape(&format!("{p}.o"), c.heads * c.d_k(), c.d_model)?;
        }
        Ok(())
    }

    pub fn header(&self) -> serde_json::Value {
        serde_json::json!({"kind": "transformer", "config": self.config})
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::params::save_checkpoint(path, &self.header(), &self.store)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (header, store) = crate::params::load_checkpoint(path)?;
        if header.get("kind").and_then(|k| k.as_str()) != Some("transformer") {
            return Err(Error::Checkpoint("not a baseline transformer checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_value(header["config"].clone())?;
        let p = Self { config, store };
        p.validate()?;
        Ok(p)
    }
}

fn with_constants<T>(store: &ParamStore, f: impl FnOnce(&mut Tape, &Bindings) -> Result<T>) -> Result<T> {
    let mut tape = Tape::new();
    let b = store.bind_constants(&mut tape);
    f(&mut tape, &b)
}

/// Token embeddings plus `Pe(1..=n)`.
pub fn embed(tokens: &[usize], params: &TransformerParams) -> Result<Matrix> {
    with_constants(&params.store, |t, b| {
        let v = embed_on_tape(t, b, &params.config, tokens)?;
        Ok(t.value(v).clone())
    })
}

/// `softmax(QKᵀ/√d_k [+ mask]) V`.
pub fn attention_head(q: &Matrix, k: &Matrix, v: &Matrix, causal: bool) -> Result<Matrix> {
    Ok(attention_head_with_weights(q, k, v, causal)?.0)
}

/// As [`attention_head`], also returning the attention matrix.
pub fn attention_head_with_weights(q: &Matrix, k: &Matrix, v: &Matrix, causal: bool) -> Result<(Matrix, Matrix)> {
    if q.cols() != k.cols() {
        return Err(mismatch("attention_head", q.cols(), k.cols()));
    }
    if k.rows() != v.rows() {
        return Err(mismatch("attention_head", k.rows(), v.rows()));
    }
    let mut t = Tape::new();
    let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
    let site = AttentionSite {
        prefix: String::new(),
        layer: 0,
        kind: SiteKind::Encoder,
    };
    let (out, a) = Standard::default().head(&mut t, &site, 0, qv, kv, vv, causal)?;
    Ok((t.value(out).clone(), t.value(a).clone()))
}

/// Self-attention of the block at `prefix` (e.g. `enc.0.attn`).
pub fn multi_head(x: &Matrix, params: &TransformerParams, prefix: &str, causal: bool) -> Result<Matrix> {
    with_constants(&params.store, |t, b| {
        let xv = t.constant(x.clone());
        let site = AttentionSite {
            prefix: prefix.to_string(),
            layer: 0,
            kind: SiteKind::Encoder,
        };
        let v = multi_head_on_tape(t, b, &params.config, &site, xv, xv, causal, &mut Standard::default())?;
        Ok(t.value(v).clone())
    })
}

/// Queries from `y`, keys and values from `z`.
pub fn cross_attention(y: &Matrix, z: &Matrix, params: &TransformerParams, prefix: &str) -> Result<Matrix> {
    with_constants(&params.store, |t, b| {
        let yv = t.constant(y.clone());
        let zv = t.constant(z.clone());
        let site = AttentionSite {
            prefix: prefix.to_string(),
            layer: 0,
            kind: SiteKind::DecoderCross,
        };
        let v = multi_head_on_tape(t, b, &params.config, &site, yv, zv, false, &mut Standard::default())?;
        Ok(t.value(v).clone())
    })
}

/// Row-wise `W₂ ReLU(W₁ z + b₁) + b₂` of the block at `prefix`.
pub fn feed_forward(x: &Matrix, params: &TransformerParams, prefix: &str) -> Result<Matrix> {
    with_constants(&params.store, |t, b| {
        let xv = t.constant(x.clone());
        let v = feed_forward_on_tape(t, b, prefix, xv)?;
        Ok(t.value(v).clone())
    })
}

/// Row-wise `((z − μ)/√(σ² + ε)) ⊙ γ + β`.
pub fn layer_norm(z: &Matrix, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Matrix> {
    let mut t = Tape::new();
    let zv = t.constant(z.clone());
    let g = t.constant(Matrix::row_vector(gamma));
    let b = t.constant(Matrix::row_vector(beta));
    let v = t.layer_norm(zv, g, b, eps)?;
    Ok(t.value(v).clone())
}

pub fn encoder(x: &Matrix, params: &TransformerParams) -> Result<Matrix> {
    with_constants(&params.store, |t, b| {
        let xv = t.constant(x.clone());
        let v = encoder_on_tape(t, b, &params.config, xv, &mut Standard::default())?;
        Ok(t.value(v).clone())
    })
}

pub fn decoder(y: &Matrix, z: &Matrix, params: &TransformerParams) -> Result<Matrix> {
    with_constants(&params.store, |t, b| {
        let yv = t.constant(y.clone());
        let zv = t.constant(z.clone());
        let v = decoder_on_tape(t, b, &params.config, yv, zv, &mut Standard::default())?;
        Ok(t.value(v).clone())
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from `START_TOKEN` until `eos` is emitted or `max_out`
/// tokens exist. The emitted `eos` is kept as the last token.
pub fn generate(tokens: &[usize], params: &TransformerParams, max_out: usize, eos: usize) -> Result<Vec<usize>> {
    let cfg = &params.config;
    let cap = max_out.min(cfg.max_out_len);
    let z = encoder(&embed(tokens, params)?, params)?;
    let we = params.store.get("embed")?;
    let mut out: Vec<usize> = Vec::new();
    while out.len() < cap {
        let mut prefix = vec![START_TOKEN];
        prefix.extend_from_slice(&out);
        if prefix.len() > cfg.max_len {
            break;
        }
        let y = embed(&prefix, params)?;
        let dec = decoder(&y, &z, params)?;
        let last = Matrix::row_vector(dec.row(dec.rows() - 1));
        let logits = last.matmul(&we.transpose())?;
        let probs = crate::tensor::softmax_rows(&logits);
        let next = argmax(probs.data()) + 1;
        out.push(next);
        if next == eos {
            break;
        }
    }
    Ok(out)
}
