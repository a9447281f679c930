//! Toy tag-conditioned speech-translation model.
//!
//! Encoder: ×4 temporal mean pooling of the log-mel frames, a linear projection plus
//! learned frame positions, then residual feed-forward blocks.
//!
//! Decoder: step `t` sees the previous token, its position, and the sequence-start
//! token (`<bos>`, or the `<F>`/`<M>` tag under target forcing) as a global
//! conditioning vector; single-head dot-product attention over the encoder frames
//! feeds a tanh output layer, optional residual blocks and the vocabulary projection.
//!
//! Discriminator: gradient reversal, two per-frame linear layers with a ReLU between,
//! then a mean over time giving two logits (F, M).

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamSet, Tensor, Var};
use crate::dsp::{FeatureMatrix, NUM_MEL};
use crate::perturb::SpeakerGender;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const TAG_F: usize = 3;
pub const TAG_M: usize = 4;
pub const RESERVED_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<F>", "<M>"];

/// Temporal downsampling of the encoder front end.
pub const POOL: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("empty decoder prefix")]
    EmptyPrefix,
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {0} outside the vocabulary")]
    UnknownTokenId(usize),
    #[error("prefix must start with <bos>")]
    MissingBos,
    #[error("invalid prefix start {0} for this mode")]
    InvalidPrefixStart(usize),
    #[error("frequencies must be positive, got f_f={0}, f_m={1}")]
    DegenerateFrequency(f64, f64),
    #[error("frequencies must sum to 1, got {0}")]
    FrequencySum(f64),
    #[error("not a probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("non-finite loss")]
    NonFinite,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint does not match the model layout: {0}")]
    LayoutMismatch(String),
    #[error("malformed checkpoint metadata: {0}")]
    MalformedMeta(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by `extra` in order (duplicates and reserved names skipped).
    pub fn new<S: AsRef<str>>(extra: impl IntoIterator<Item = S>) -> Self {
        let mut v = Self { tokens: Vec::new(), index: HashMap::new() };
        for t in RESERVED_TOKENS {
            v.push(t);
        }
        for t in extra {
            v.push(t.as_ref());
        }
        v
    }

    fn push(&mut self, t: &str) {
        if !self.index.contains_key(t) {
            self.index.insert(t.to_string(), self.tokens.len());
            self.tokens.push(t.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index.get(token).copied().ok_or_else(|| ModelError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(ModelError::UnknownTokenId(id))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    /// Maps ids back to tokens, dropping reserved ones.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().filter(|&&i| i >= RESERVED_TOKENS.len()).filter_map(|&i| self.tokens.get(i).cloned()).collect()
    }
}

pub fn tag_for(gender: SpeakerGender) -> usize {
    match gender {
        SpeakerGender::F => TAG_F,
        SpeakerGender::M => TAG_M,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    #[default]
    GenderUnaware,
    MultiGender,
    SpecializedF,
    SpecializedM,
}

impl ModelMode {
    pub fn uses_tags(self) -> bool {
        self == ModelMode::MultiGender
    }

    pub fn allows_discriminator(self) -> bool {
        matches!(self, ModelMode::GenderUnaware | ModelMode::MultiGender)
    }

    /// The speaker gender a specialized model is restricted to.
    pub fn specialized_gender(self) -> Option<SpeakerGender> {
        match self {
            ModelMode::SpecializedF => Some(SpeakerGender::F),
            ModelMode::SpecializedM => Some(SpeakerGender::M),
            _ => None,
        }
    }
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelMode::GenderUnaware => "gender_unaware",
            ModelMode::MultiGender => "multi_gender",
            ModelMode::SpecializedF => "specialized_F",
            ModelMode::SpecializedM => "specialized_M",
        })
    }
}

impl std::str::FromStr for ModelMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gender_unaware" => Ok(ModelMode::GenderUnaware),
            "multi_gender" => Ok(ModelMode::MultiGender),
            "specialized_F" | "specialized_f" => Ok(ModelMode::SpecializedF),
            "specialized_M" | "specialized_m" => Ok(ModelMode::SpecializedM),
            other => Err(ModelError::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub disc_hidden: usize,
    pub label_smoothing: f64,
    pub disc_loss_weight: f64,
    /// Kept for configuration compatibility; desk-scale training runs without dropout.
    pub dropout: f64,
    pub mode: ModelMode,
    /// Learned encoder positions; longer inputs reuse the last position.
    pub max_source_frames: usize,
    pub max_target_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: NUM_MEL,
            hidden_dim: 64,
            encoder_layers: 2,
            decoder_layers: 1,
            disc_hidden: 64,
            label_smoothing: 0.1,
            disc_loss_weight: 0.5,
            dropout: 0.0,
            mode: ModelMode::GenderUnaware,
            max_source_frames: 128,
            max_target_len: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.feature_dim != NUM_MEL {
            return bad("feature_dim must be 80");
        }
        if self.hidden_dim == 0 || self.encoder_layers == 0 || self.disc_hidden == 0 {
            return bad("dimensions must be positive");
        }
        if self.max_source_frames == 0 || self.max_target_len < 2 {
            return bad("position tables too small");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        if !self.disc_loss_weight.is_finite() || self.disc_loss_weight < 0.0 {
            return bad("disc_loss_weight must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }
}

/// Discriminator class weights (F, M).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w_f: f64,
    pub w_m: f64,
}

impl ClassWeights {
    pub fn uniform() -> Self {
        Self { w_f: 1.0, w_m: 1.0 }
    }

    pub fn for_gender(&self, g: SpeakerGender) -> f64 {
        match g {
            SpeakerGender::F => self.w_f,
            SpeakerGender::M => self.w_m,
        }
    }
}

/// Inverse-frequency weights normalized so that `w_f·f_f + w_m·f_m = 1`, i.e.
/// `w = 1 / (2 f)` for each class.
pub fn compute_class_weights(f_f: f64, f_m: f64) -> Result<ClassWeights> {
    if !(f_f > 0.0 && f_m > 0.0) {
        return Err(ModelError::DegenerateFrequency(f_f, f_m));
    }
    if ((f_f + f_m) - 1.0).abs() > 1e-6 {
        return Err(ModelError::FrequencySum(f_f + f_m));
    }
    let total = f_f + f_m;
    let (pf, pm) = (f_f / total, f_m / total);
    Ok(ClassWeights { w_f: 1.0 / (2.0 * pf), w_m: 1.0 / (2.0 * pm) })
}

/// Replaces the leading `<bos>` with the gender tag.
pub fn apply_target_forcing(prefix: &[usize], gender: SpeakerGender) -> Result<Vec<usize>> {
    match prefix.first() {
        Some(&BOS) => {
            let mut out = prefix.to_vec();
            out[0] = tag_for(gender);
            Ok(out)
        }
        _ => Err(ModelError::MissingBos),
    }
}

/// Label-smoothed cross-entropy of one distribution against `target`: the target gets
/// `1 - smoothing`, every other entry `smoothing / (|V| - 1)`. Pad targets cost zero.
pub fn label_smoothed_ce(probs: &[f64], target: usize, smoothing: f64) -> Result<f64> {
    let total: f64 = probs.iter().sum();
    if probs.len() < 2 || (total - 1.0).abs() > 1e-6 || probs.iter().any(|p| !(*p >= 0.0)) {
        return Err(ModelError::InvalidDistribution(format!("{} entries summing to {total}", probs.len())));
    }
    if target >= probs.len() {
        return Err(ModelError::UnknownTokenId(target));
    }
    if target == PAD {
        return Ok(0.0);
    }
    let off = smoothing / (probs.len() - 1) as f64;
    let mut loss = 0.0;
    for (v, p) in probs.iter().enumerate() {
        let q = if v == target { 1.0 - smoothing } else { off };
        if q > 0.0 {
            loss -= q * p.ln();
        }
    }
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(ModelError::NonFinite)
    }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Class-weighted cross-entropy of the discriminator logits (F, M).
pub fn weighted_disc_loss(logits: [f64; 2], label: SpeakerGender, weights: &ClassWeights) -> f64 {
    weights.for_gender(label) * (log_sum_exp(&logits) - logits[label.index()])
}

/// `translation + weight · disc` when the discriminator is active.
pub fn combined_loss(translation_loss: f64, disc_loss: Option<f64>, cfg: &ModelConfig) -> Result<f64> {
    let total = translation_loss + disc_loss.map_or(0.0, |d| cfg.disc_loss_weight * d);
    if translation_loss.is_finite() && disc_loss.is_none_or(f64::is_finite) && total.is_finite() {
        Ok(total)
    } else {
        Err(ModelError::NonFinite)
    }
}

struct Block {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Parameter leaves of one forward pass.
pub struct Bound {
    vars: Vec<Var>,
    enc_in_w: Var,
    enc_in_b: Var,
    enc_pos: Var,
    enc_blocks: Vec<Block>,
    emb: Var,
    dec_pos: Var,
    dec_cond: Var,
    dec_in_w: Var,
    dec_in_b: Var,
    att_q: Var,
    out_w: Var,
    out_b: Var,
    dec_blocks: Vec<Block>,
    vocab_w: Var,
    vocab_b: Var,
    disc_w1: Var,
    disc_b1: Var,
    disc_w2: Var,
    disc_b2: Var,
}

impl Bound {
    /// Gradients of every parameter, in parameter order (zeros where none arrived).
    pub fn grads(&self, g: &Graph<f64>) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|v| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(*v).len()]))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    vocab_size: usize,
    params: ParamSet<f64>,
}

fn param_layout(cfg: &ModelConfig, vocab: usize) -> Vec<(String, Vec<usize>)> {
    let h = cfg.hidden_dim;
    let mut v: Vec<(String, Vec<usize>)> = vec![
        ("enc.in.w".into(), vec![cfg.feature_dim, h]),
        ("enc.in.b".into(), vec![h]),
        ("enc.pos".into(), vec![cfg.max_source_frames, h]),
    ];
    for l in 0..cfg.encoder_layers {
        v.push((format!("enc.block{l}.w1"), vec![h, h]));
        v.push((format!("enc.block{l}.b1"), vec![h]));
        v.push((format!("enc.block{l}.w2"), vec![h, h]));
        v.push((format!("enc.block{l}.b2"), vec![h]));
    }
    v.extend([
        ("dec.emb".into(), vec![vocab, h]),
        ("dec.pos".into(), vec![cfg.max_target_len, h]),
        ("dec.cond".into(), vec![h, h]),
        ("dec.in.w".into(), vec![h, h]),
        ("dec.in.b".into(), vec![h]),
        ("dec.att.q".into(), vec![h, h]),
        ("dec.out.w".into(), vec![2 * h, h]),
        ("dec.out.b".into(), vec![h]),
    ]);
    for l in 0..cfg.decoder_layers {
        v.push((format!("dec.block{l}.w1"), vec![h, h]));
        v.push((format!("dec.block{l}.b1"), vec![h]));
        v.push((format!("dec.block{l}.w2"), vec![h, h]));
        v.push((format!("dec.block{l}.b2"), vec![h]));
    }
    v.extend([
        ("dec.vocab.w".into(), vec![h, vocab]),
        ("dec.vocab.b".into(), vec![vocab]),
        ("disc.w1".into(), vec![h, cfg.disc_hidden]),
        ("disc.b1".into(), vec![cfg.disc_hidden]),
        ("disc.w2".into(), vec![cfg.disc_hidden, 2]),
        ("disc.b2".into(), vec![2]),
    ]);
    v
}

/// `[T', T]` averaging matrix for ×4 pooling; the last group may be partial.
fn pooling_matrix(frames: usize) -> Tensor<f64> {
    let out = frames.div_ceil(POOL);
    let mut m = vec![0.0; out * frames];
    for r in 0..out {
        let lo = r * POOL;
        let hi = (lo + POOL).min(frames);
        for c in lo..hi {
            m[r * frames + c] = 1.0 / (hi - lo) as f64;
        }
    }
    Tensor::matrix(out, frames, m).expect("consistent shape")
}

impl Model {
    /// Xavier-uniform matrices, zero biases.
    pub fn new(cfg: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in param_layout(&cfg, vocab_size) {
            let n: usize = shape.iter().product();
            let values = if shape.len() == 2 {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            } else {
                vec![0.0; n]
            };
            params.insert(name, Tensor::new(shape, values)?);
        }
        Ok(Self { cfg, vocab_size, params })
    }

    /// Model with every parameter zero.
    pub fn zeroed(cfg: ModelConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in param_layout(&cfg, vocab_size) {
            params.insert(name, Tensor::zeros(&shape));
        }
        Ok(Self { cfg, vocab_size, params })
    }

    pub fn from_params(cfg: ModelConfig, vocab_size: usize, params: ParamSet<f64>) -> Result<Self> {
        cfg.validate()?;
        let layout = param_layout(&cfg, vocab_size);
        if layout.len() != params.len() {
            return Err(ModelError::LayoutMismatch(format!("{} parameters, expected {}", params.len(), layout.len())));
        }
        for ((name, shape), (pname, t)) in layout.iter().zip(params.iter()) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(ModelError::LayoutMismatch(format!("{pname} {:?}, expected {name} {shape:?}", t.shape())));
            }
        }
        Ok(Self { cfg, vocab_size, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn config_mut(&mut self) -> &mut ModelConfig {
        &mut self.cfg
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamSet<f64> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f64> {
        &mut self.params
    }

    /// Decoder start token for an utterance under this model's mode.
    pub fn start_token(&self, gender: SpeakerGender) -> usize {
        if self.cfg.mode.uses_tags() {
            tag_for(gender)
        } else {
            BOS
        }
    }

    /// Adds every parameter to `g` as a leaf (gradient-tracked iff `trainable`).
    pub fn bind(&self, g: &mut Graph<f64>, trainable: bool) -> Bound {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| {
                let t = t.clone();
                if trainable {
                    g.leaf(t.with_grad())
                } else {
                    g.constant(t)
                }
            })
            .collect();
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("layout");
        let enc_in_w = next();
        let enc_in_b = next();
        let enc_pos = next();
        let mut enc_blocks = Vec::new();
        for _ in 0..self.cfg.encoder_layers {
            enc_blocks.push(Block { w1: next(), b1: next(), w2: next(), b2: next() });
        }
        let (emb, dec_pos, dec_cond, dec_in_w, dec_in_b, att_q, out_w, out_b) =
            (next(), next(), next(), next(), next(), next(), next(), next());
        let mut dec_blocks = Vec::new();
        for _ in 0..self.cfg.decoder_layers {
            dec_blocks.push(Block { w1: next(), b1: next(), w2: next(), b2: next() });
        }
        let (vocab_w, vocab_b, disc_w1, disc_b1, disc_w2, disc_b2) = (next(), next(), next(), next(), next(), next());
        Bound {
            vars,
            enc_in_w,
            enc_in_b,
            enc_pos,
            enc_blocks,
            emb,
            dec_pos,
            dec_cond,
            dec_in_w,
            dec_in_b,
            att_q,
            out_w,
            out_b,
            dec_blocks,
            vocab_w,
            vocab_b,
            disc_w1,
            disc_b1,
            disc_w2,
            disc_b2,
        }
    }

    fn residual(g: &mut Graph<f64>, x: Var, b: &Block) -> Result<Var> {
        let h = g.matmul(x, b.w1)?;
        let h = g.add(h, b.b1)?;
        let h = g.relu(h)?;
        let h = g.matmul(h, b.w2)?;
        let h = g.add(h, b.b2)?;
        Ok(g.add(x, h)?)
    }

    /// Encoder states `[ceil(T / 4), hidden]` for a `[T, 80]` feature matrix.
    pub fn encode_graph(&self, g: &mut Graph<f64>, b: &Bound, features: &FeatureMatrix<f64>) -> Result<Var> {
        let frames = features.num_frames();
        let x = g.constant(Tensor::matrix(frames, NUM_MEL, features.as_slice().to_vec())?);
        let pool = g.constant(pooling_matrix(frames));
        let pooled = g.matmul(pool, x)?;
        let mut h = g.matmul(pooled, b.enc_in_w)?;
        h = g.add(h, b.enc_in_b)?;
        let positions: Vec<usize> =
            (0..frames.div_ceil(POOL)).map(|i| i.min(self.cfg.max_source_frames - 1)).collect();
        let pos = g.embedding(b.enc_pos, &positions)?;
        h = g.add(h, pos)?;
        for block in &b.enc_blocks {
            h = Self::residual(g, h, block)?;
        }
        Ok(g.tanh(h)?)
    }

    /// Decoder logits `[tokens.len(), V]` for `tokens` occupying positions
    /// `start_pos..`, conditioned on the sequence-start token `first`.
    pub fn decoder_logits(
        &self,
        g: &mut Graph<f64>,
        b: &Bound,
        enc: Var,
        first: usize,
        tokens: &[usize],
        start_pos: usize,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyPrefix);
        }
        if let Some(&bad) = tokens.iter().chain(std::iter::once(&first)).find(|&&t| t >= self.vocab_size) {
            return Err(ModelError::UnknownTokenId(bad));
        }
        let h_dim = self.cfg.hidden_dim;
        let positions: Vec<usize> =
            (start_pos..start_pos + tokens.len()).map(|p| p.min(self.cfg.max_target_len - 1)).collect();
        let tok = g.embedding(b.emb, tokens)?;
        let pos = g.embedding(b.dec_pos, &positions)?;
        let x = g.add(tok, pos)?;
        let start = g.embedding(b.emb, &[first])?;
        let cond = g.matmul(start, b.dec_cond)?;
        let cond = g.mean_axis(cond, 0)?;
        let mut h = g.matmul(x, b.dec_in_w)?;
        h = g.add(h, b.dec_in_b)?;
        h = g.add(h, cond)?;
        h = g.tanh(h)?;

        let q = g.matmul(h, b.att_q)?;
        let keys = g.transpose(enc)?;
        let scores = g.matmul(q, keys)?;
        let scores = g.scale(scores, 1.0 / (h_dim as f64).sqrt())?;
        let attn = g.softmax(scores)?;
        let ctx = g.matmul(attn, enc)?;

        let joined = g.concat(&[h, ctx], 1)?;
        let mut o = g.matmul(joined, b.out_w)?;
        o = g.add(o, b.out_b)?;
        o = g.tanh(o)?;
        for block in &b.dec_blocks {
            o = Self::residual(g, o, block)?;
        }
        let logits = g.matmul(o, b.vocab_w)?;
        Ok(g.add(logits, b.vocab_b)?)
    }

    /// Per-frame two-layer discriminator behind a gradient-reversal layer, averaged over
    /// time into the (F, M) logits.
    pub fn discriminate_graph(&self, g: &mut Graph<f64>, b: &Bound, enc: Var, lambda: f64) -> Result<Var> {
        let x = g.grl(enc, lambda)?;
        disc_head(g, x, [b.disc_w1, b.disc_b1, b.disc_w2, b.disc_b2])
    }

    /// Label-smoothed cross-entropy summed over `targets` (pad positions skipped).
    pub fn smoothed_ce_graph(&self, g: &mut Graph<f64>, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.vocab_size;
        let s = self.cfg.label_smoothing;
        let off = s / (v - 1) as f64;
        let mut q = vec![0.0; targets.len() * v];
        for (r, &t) in targets.iter().enumerate() {
            if t == PAD {
                continue;
            }
            q[r * v..(r + 1) * v].iter_mut().for_each(|x| *x = off);
            q[r * v + t] = 1.0 - s;
        }
        let logp = g.log_softmax(logits)?;
        let qv = g.constant(Tensor::matrix(targets.len(), v, q)?);
        let prod = g.mul(logp, qv)?;
        let total = g.sum(prod)?;
        Ok(g.scale(total, -1.0)?)
    }

    /// Teacher-forced translation loss of one utterance, summed over target tokens.
    pub fn translation_loss_graph(
        &self,
        g: &mut Graph<f64>,
        b: &Bound,
        enc: Var,
        first: usize,
        target: &[usize],
    ) -> Result<Var> {
        let mut inputs = Vec::with_capacity(target.len() + 1);
        inputs.push(first);
        inputs.extend_from_slice(target);
        let mut outputs = target.to_vec();
        outputs.push(EOS);
        let logits = self.decoder_logits(g, b, enc, first, &inputs, 0)?;
        self.smoothed_ce_graph(g, logits, &outputs)
    }

    pub fn encode(&self, features: &FeatureMatrix<f64>) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let enc = self.encode_graph(&mut g, &b, features)?;
        Ok(g.value(enc).clone())
    }

    /// Next-token distribution after `prefix`, whose first token must be a valid
    /// sequence start (`<bos>`, `<F>` or `<M>`).
    pub fn decode_step(&self, enc_out: &Tensor<f64>, prefix: &[usize]) -> Result<Vec<f64>> {
        let &first = prefix.first().ok_or(ModelError::EmptyPrefix)?;
        if ![BOS, TAG_F, TAG_M].contains(&first) {
            return Err(ModelError::InvalidPrefixStart(first));
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let enc = g.constant(enc_out.clone());
        let last = prefix.len() - 1;
        let logits = self.decoder_logits(&mut g, &b, enc, first, &prefix[last..], last)?;
        let p = g.softmax(logits)?;
        Ok(g.value(p).values().to_vec())
    }

    /// Greedy decoding from `first` until `<eos>` or `max_len` tokens.
    pub fn greedy_decode(&self, features: &FeatureMatrix<f64>, first: usize, max_len: usize) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let enc = self.encode_graph(&mut g, &b, features)?;
        let mut out = Vec::new();
        let mut prev = first;
        for step in 0..max_len {
            let logits = self.decoder_logits(&mut g, &b, enc, first, &[prev], step)?;
            let row = g.value(logits).values();
            let next = row
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != PAD && *i != BOS && *i != TAG_F && *i != TAG_M)
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("vocabulary has ordinary tokens");
            if next == EOS {
                break;
            }
            out.push(next);
            prev = next;
        }
        Ok(out)
    }

    /// Discriminator logits for already-computed encoder states.
    pub fn discriminate(&self, enc_out: &Tensor<f64>, lambda: f64) -> Result<[f64; 2]> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let enc = g.constant(enc_out.clone());
        let d = self.discriminate_graph(&mut g, &b, enc, lambda)?;
        let v = g.value(d).values();
        Ok([v[0], v[1]])
    }

    pub fn save(&self, path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.params.to_bytes())?;
        fs::write(meta_path(path), self.meta_text(vocab))?;
        Ok(())
    }

    /// Key-value header stored next to the binary parameters.
    pub fn meta_text(&self, vocab: &Vocabulary) -> String {
        let c = &self.cfg;
        let mut s = String::new();
        for (k, v) in [
            ("feature_dim", c.feature_dim.to_string()),
            ("hidden_dim", c.hidden_dim.to_string()),
            ("encoder_layers", c.encoder_layers.to_string()),
            ("decoder_layers", c.decoder_layers.to_string()),
            ("disc_hidden", c.disc_hidden.to_string()),
            ("label_smoothing", c.label_smoothing.to_string()),
            ("disc_loss_weight", c.disc_loss_weight.to_string()),
            ("dropout", c.dropout.to_string()),
            ("mode", c.mode.to_string()),
            ("max_source_frames", c.max_source_frames.to_string()),
            ("max_target_len", c.max_target_len.to_string()),
            ("vocab", vocab.tokens()[RESERVED_TOKENS.len()..].join(" ")),
        ] {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Vocabulary)> {
        let path = path.as_ref();
        let params = ParamSet::read_from(io::BufReader::new(fs::File::open(path)?))?;
        let meta = fs::read_to_string(meta_path(path))?;
        let (cfg, vocab) = parse_meta(&meta)?;
        Ok((Self::from_params(cfg, vocab.len(), params)?, vocab))
    }
}

fn disc_head(g: &mut Graph<f64>, x: Var, w: [Var; 4]) -> Result<Var> {
    let h = g.matmul(x, w[0])?;
    let h = g.add(h, w[1])?;
    let h = g.relu(h)?;
    let o = g.matmul(h, w[2])?;
    let o = g.add(o, w[3])?;
    Ok(g.mean_axis(o, 0)?)
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

pub fn parse_meta(text: &str) -> Result<(ModelConfig, Vocabulary)> {
    let mut cfg = ModelConfig::default();
    let mut vocab = None;
    let bad = |k: &str, v: &str| ModelError::MalformedMeta(format!("{k}={v}"));
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| ModelError::MalformedMeta(line.to_string()))?;
        let uint = || v.parse::<usize>().map_err(|_| bad(k, v));
        let real = || v.parse::<f64>().map_err(|_| bad(k, v));
        match k {
            "feature_dim" => cfg.feature_dim = uint()?,
            "hidden_dim" => cfg.hidden_dim = uint()?,
            "encoder_layers" => cfg.encoder_layers = uint()?,
            "decoder_layers" => cfg.decoder_layers = uint()?,
            "disc_hidden" => cfg.disc_hidden = uint()?,
            "label_smoothing" => cfg.label_smoothing = real()?,
            "disc_loss_weight" => cfg.disc_loss_weight = real()?,
            "dropout" => cfg.dropout = real()?,
            "mode" => cfg.mode = v.parse()?,
            "max_source_frames" => cfg.max_source_frames = uint()?,
            "max_target_len" => cfg.max_target_len = uint()?,
            "vocab" => vocab = Some(Vocabulary::new(v.split_whitespace())),
            _ => return Err(ModelError::MalformedMeta(format!("unknown key {k}"))),
        }
    }
    let vocab = vocab.ok_or_else(|| ModelError::MalformedMeta("missing vocab".into()))?;
    cfg.validate()?;
    Ok((cfg, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(frames: usize, seed: u64) -> FeatureMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix::from_rows((0..frames * NUM_MEL).map(|_| rng.random_range(-1.0..1.0)).collect(), frames, true)
            .unwrap()
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig { hidden_dim: 8, disc_hidden: 6, max_source_frames: 32, max_target_len: 8, ..Default::default() }
    }

    #[test]
    fn vocabulary_reserved_ids() {
        let v = Vocabulary::new(["ciao", "<bos>", "ciao", "mondo"]);
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("<pad>").unwrap(), PAD);
        assert_eq!(v.id("<M>").unwrap(), TAG_M);
        assert_eq!(v.id("mondo").unwrap(), 6);
        assert!(matches!(v.id("nope"), Err(ModelError::UnknownToken(_))));
        assert_eq!(v.decode(&[BOS, 5, 6, EOS]), vec!["ciao", "mondo"]);
    }

    #[test]
    fn target_forcing_examples() {
        assert_eq!(apply_target_forcing(&[BOS, 7, 9], SpeakerGender::F).unwrap(), vec![TAG_F, 7, 9]);
        assert_eq!(apply_target_forcing(&[BOS], SpeakerGender::M).unwrap(), vec![TAG_M]);
        let once = apply_target_forcing(&[BOS, 7], SpeakerGender::F).unwrap();
        assert!(matches!(apply_target_forcing(&once, SpeakerGender::F), Err(ModelError::MissingBos)));
        assert!(matches!(apply_target_forcing(&[], SpeakerGender::F), Err(ModelError::MissingBos)));
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(compute_class_weights(0.5, 0.5).unwrap(), ClassWeights { w_f: 1.0, w_m: 1.0 });
        let w = compute_class_weights(0.3, 0.7).unwrap();
        assert!((w.w_f - 1.6667).abs() < 1e-4 && (w.w_m - 0.7143).abs() < 1e-4);
        assert!(matches!(compute_class_weights(0.0, 1.0), Err(ModelError::DegenerateFrequency(..))));
        assert!(matches!(compute_class_weights(0.3, 0.3), Err(ModelError::FrequencySum(_))));
    }

    #[test]
    fn smoothed_ce_examples() {
        assert_eq!(label_smoothed_ce(&[0.0, 1.0, 0.0], 1, 0.0).unwrap(), 0.0);
        assert!((label_smoothed_ce(&[0.2, 0.5, 0.3], 2, 0.0).unwrap() + 0.3f64.ln()).abs() < 1e-15);
        assert!((label_smoothed_ce(&[0.125; 8], 3, 0.1).unwrap() - 8f64.ln()).abs() < 1e-12);
        assert_eq!(label_smoothed_ce(&[0.5, 0.5], PAD, 0.1).unwrap(), 0.0);
        assert!(label_smoothed_ce(&[0.5, 0.6], 1, 0.1).is_err());
    }

    #[test]
    fn disc_loss_examples() {
        let l = weighted_disc_loss([0.0, 0.0], SpeakerGender::F, &ClassWeights::uniform());
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let w = ClassWeights { w_f: 1.4, w_m: 0.8 };
        assert!((weighted_disc_loss([0.0, 0.0], SpeakerGender::F, &w) - 0.9704).abs() < 1e-4);
        assert!(weighted_disc_loss([50.0, -50.0], SpeakerGender::F, &w) < 1e-40);
        assert!(weighted_disc_loss([-50.0, 50.0], SpeakerGender::M, &w) < 1e-40);
    }

    #[test]
    fn combined_loss_examples() {
        let cfg = ModelConfig::default();
        assert_eq!(combined_loss(2.0, Some(1.0), &cfg).unwrap(), 2.5);
        assert_eq!(combined_loss(1.7, None, &cfg).unwrap(), 1.7);
        assert_eq!(combined_loss(0.0, Some(0.0), &cfg).unwrap(), 0.0);
        assert!(combined_loss(f64::NAN, None, &cfg).is_err());
    }

    #[test]
    fn encoder_output_length() {
        let m = Model::new(small_cfg(), 12, 1).unwrap();
        let enc = m.encode(&features(98, 0)).unwrap();
        assert_eq!(enc.shape(), &[25, 8]);
        let z = Model::zeroed(small_cfg(), 12).unwrap();
        let zero = FeatureMatrix::from_rows(vec![0.0; 98 * NUM_MEL], 98, true).unwrap();
        assert!(z.encode(&zero).unwrap().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decode_step_is_a_distribution() {
        let m = Model::new(small_cfg(), 12, 2).unwrap();
        let enc = m.encode(&features(40, 1)).unwrap();
        for prefix in [vec![BOS], vec![TAG_F, 7, 8], vec![TAG_M, 5]] {
            let p = m.decode_step(&enc, &prefix).unwrap();
            assert_eq!(p.len(), 12);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|x| *x > 0.0));
            assert_eq!(p, m.decode_step(&enc, &prefix).unwrap());
        }
        assert!(matches!(m.decode_step(&enc, &[]), Err(ModelError::EmptyPrefix)));
        assert!(matches!(m.decode_step(&enc, &[7]), Err(ModelError::InvalidPrefixStart(7))));
        assert!(matches!(m.decode_step(&enc, &[BOS, 40]), Err(ModelError::UnknownTokenId(40))));
    }

    #[test]
    fn decode_step_matches_teacher_forcing() {
        let m = Model::new(small_cfg(), 12, 3).unwrap();
        let f = features(30, 2);
        let enc = m.encode(&f).unwrap();
        let prefix = [TAG_F, 6, 9, 5];
        let mut g = Graph::new();
        let b = m.bind(&mut g, false);
        let e = g.constant(enc.clone());
        let logits = m.decoder_logits(&mut g, &b, e, TAG_F, &prefix, 0).unwrap();
        let p = g.softmax(logits).unwrap();
        let full = g.value(p).values()[3 * 12..4 * 12].to_vec();
        let step = m.decode_step(&enc, &prefix).unwrap();
        for (a, b) in full.iter().zip(&step) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_frames_pool_to_frame_logit() {
        let m = Model::new(small_cfg(), 12, 4).unwrap();
        let frame: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        let enc = Tensor::matrix(5, 8, frame.iter().cycle().take(40).copied().collect()).unwrap();
        let single = Tensor::matrix(1, 8, frame).unwrap();
        let a = m.discriminate(&enc, 0.5).unwrap();
        let b = m.discriminate(&single, 0.5).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    }

    #[test]
    fn meta_round_trip() {
        let mut cfg = small_cfg();
        cfg.mode = ModelMode::MultiGender;
        let vocab = Vocabulary::new(["a", "b"]);
        let m = Model::new(cfg.clone(), vocab.len(), 5).unwrap();
        let (back_cfg, back_vocab) = parse_meta(&m.meta_text(&vocab)).unwrap();
        assert_eq!(back_cfg, cfg);
        assert_eq!(back_vocab, vocab);
        assert!(parse_meta("hidden_dim=8\n").is_err());
        assert!(parse_meta("bogus=1\nvocab=a\n").is_err());
    }

    #[test]
    fn layout_mismatch_detected() {
        let m = Model::new(small_cfg(), 12, 1).unwrap();
        assert!(Model::from_params(small_cfg(), 13, m.params().clone()).is_err());
        assert!(Model::from_params(small_cfg(), 12, m.params().clone()).is_ok());
    }
}
