//! Training loops, learning-rate schedule, checkpoint averaging and the post-hoc gender probe.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioError, Waveform};
use crate::autodiff::{AutodiffError, Graph, LambdaSchedule, ParamSet, Tensor, Var};
use crate::dsp::{self, DspError, FeatureMatrix};
use crate::model::{
    compute_class_weights, Bound, ClassWeights, Model, ModelConfig, ModelError, ModelMode, Vocabulary, BOS, TAG_F,
    TAG_M,
};
use crate::perturb::{self, PerturbConfig, PerturbError, SpeakerGender};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("fine_tune needs an initial gender_unaware checkpoint")]
    MissingInit,
    #[error("fine_tune initial checkpoint must be gender_unaware, got {0}")]
    InitMode(ModelMode),
    #[error("fine_tune produces a multi_gender model, got mode {0}")]
    FineTuneMode(ModelMode),
    #[error("{mode} model trained on a {found} utterance ({id})")]
    GenderFilter { mode: ModelMode, found: SpeakerGender, id: String },
    #[error("validation loss diverged at step {step}: {loss} (initial {initial})")]
    DivergedLoss { step: u64, loss: f64, initial: f64 },
    #[error("no checkpoints to average")]
    EmptyList,
    #[error("checkpoints disagree on parameter layout")]
    ShapeMismatch,
    #[error("probe data needs both genders")]
    SingleClassData,
    #[error("corpus too small: {0}")]
    TooFewUtterances(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub audio: Waveform<f64>,
    pub gender: SpeakerGender,
    pub source: Vec<String>,
    pub target: Vec<String>,
}

/// One line of the training manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub wav_path: String,
    pub gender: SpeakerGender,
    pub source_text: String,
    pub target_text: String,
}

pub fn write_manifest(rows: &[ManifestRow], mut out: impl Write) -> io::Result<()> {
    for r in rows {
        writeln!(out, "{}\t{}\t{}\t{}\t{}", r.id, r.wav_path, r.gender, r.source_text, r.target_text)?;
    }
    Ok(())
}

pub fn read_manifest(input: impl BufRead) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let err = |msg: String| TrainError::Manifest { line: i + 1, msg };
        if cols.len() != 5 {
            return Err(err(format!("expected 5 columns, found {}", cols.len())));
        }
        let gender = cols[2].parse().map_err(|_| err(format!("bad gender {:?}", cols[2])))?;
        rows.push(ManifestRow {
            id: cols[0].to_string(),
            wav_path: cols[1].to_string(),
            gender,
            source_text: cols[3].to_string(),
            target_text: cols[4].to_string(),
        });
    }
    Ok(rows)
}

/// Reads a manifest and its audio; relative wav paths resolve against the manifest's directory.
pub fn load_corpus(manifest: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let rows = read_manifest(io::BufReader::new(fs::File::open(manifest)?))?;
    rows.into_iter()
        .map(|r| {
            let p = PathBuf::from(&r.wav_path);
            let p = if p.is_absolute() { p } else { base.join(p) };
            Ok(Utterance {
                id: r.id,
                audio: audio::read_wav(&p)?,
                gender: r.gender,
                source: r.source_text.split_whitespace().map(String::from).collect(),
                target: r.target_text.split_whitespace().map(String::from).collect(),
            })
        })
        .collect()
}

/// Vocabulary over every target token of `corpus`, sorted for stability.
pub fn build_vocabulary(corpus: &[Utterance]) -> Vocabulary {
    let mut words: Vec<&str> = corpus.iter().flat_map(|u| u.target.iter().map(String::as_str)).collect();
    words.sort_unstable();
    words.dedup();
    Vocabulary::new(words)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Scratch,
    FineTune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub use_grl: bool,
    /// Defaults to fixed 10 for fine-tuning and fixed 0.5 from scratch.
    pub grl_schedule: Option<LambdaSchedule>,
    pub perturb: Option<PerturbConfig>,
    pub lr_peak: f64,
    pub warmup_updates: u64,
    pub total_updates: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub average_last: usize,
    /// Defaults to `total_updates / 10`.
    pub checkpoint_interval: Option<u64>,
    /// Share of the corpus held out for the divergence guard.
    pub validation_fraction: f64,
    pub cmvn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Scratch,
            use_grl: false,
            grl_schedule: None,
            perturb: None,
            lr_peak: 4e-3,
            warmup_updates: 200,
            total_updates: 2_000,
            batch_size: 8,
            seed: 0,
            average_last: 7,
            checkpoint_interval: None,
            validation_fraction: 0.1,
            cmvn: true,
        }
    }
}

impl TrainConfig {
    pub fn checkpoint_every(&self) -> u64 {
        self.checkpoint_interval.unwrap_or(self.total_updates / 10).max(1)
    }

    pub fn schedule(&self) -> LambdaSchedule {
        let mut s = self.grl_schedule.unwrap_or_else(|| match self.strategy {
            Strategy::FineTune => LambdaSchedule::fixed(10.0),
            Strategy::Scratch => LambdaSchedule::fixed(0.5),
        });
        s.total_updates = self.total_updates;
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.total_updates == 0 || self.warmup_updates == 0 || self.batch_size == 0 || self.average_last == 0 {
            return bad("total_updates, warmup_updates, batch_size and average_last must be positive");
        }
        if self.warmup_updates > self.total_updates {
            return bad("warmup_updates exceeds total_updates");
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return bad("lr_peak must be positive");
        }
        if (self.total_updates / self.checkpoint_every()) < self.average_last as u64 {
            return bad("fewer checkpoints than average_last");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must be in [0, 1)");
        }
        if let Some(p) = &self.perturb {
            p.validate()?;
        }
        if let Some(s) = &self.grl_schedule {
            if !(s.gamma.is_finite() && s.fixed_lambda.is_none_or(|l| l.is_finite() && l >= 0.0)) {
                return bad("grl_schedule needs finite gamma and non-negative lambda");
            }
        }
        Ok(())
    }
}

/// `lr_peak · min(step / warmup, sqrt(warmup / step))`.
pub fn noam_lr(step: u64, warmup: u64, lr_peak: f64) -> f64 {
    let (s, w) = (step.max(1) as f64, warmup.max(1) as f64);
    lr_peak * (s / w).min((w / s).sqrt())
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamSet<f64>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamSet<f64>, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((_, p), g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (i, x) in p.values_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    pub translation_loss: f64,
    pub disc_loss: Option<f64>,
    pub lambda: Option<f64>,
}

pub fn write_metrics(records: &[MetricsRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub params: ParamSet<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub checkpoints: Vec<Checkpoint>,
    pub metrics: Vec<MetricsRecord>,
    /// (step, held-out translation loss per token), starting with step 0.
    pub validation: Vec<(u64, f64)>,
}

impl TrainOutcome {
    /// Model whose parameters average the last `k` checkpoints.
    pub fn averaged(&self, k: usize) -> Result<Model> {
        let start = self.checkpoints.len().saturating_sub(k);
        let params: Vec<&ParamSet<f64>> = self.checkpoints[start..].iter().map(|c| &c.params).collect();
        let avg = average_checkpoints(&params)?;
        Ok(Model::from_params(self.model.config().clone(), self.model.vocab_size(), avg)?)
    }
}

/// Features of every utterance, optionally through this epoch's voice perturbation.
pub fn extract_features(
    corpus: &[Utterance],
    perturb: Option<(&PerturbConfig, u64, u64)>,
    cmvn: bool,
) -> Result<Vec<FeatureMatrix<f64>>> {
    corpus
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let feats = match perturb {
                Some((cfg, seed, epoch)) => {
                    let mut rng = perturb::utterance_rng(seed, i as u64, epoch);
                    let (w, _) = perturb::apply_opposite(&u.audio, u.gender, cfg, &mut rng)?;
                    dsp::logmel_features(&w, cmvn)?
                }
                None => dsp::logmel_features(&u.audio, cmvn)?,
            };
            Ok(feats)
        })
        .collect()
}

struct Example {
    features: FeatureMatrix<f64>,
    gender: SpeakerGender,
    target: Vec<usize>,
}

fn weighted_disc_loss_graph(
    g: &mut Graph<f64>,
    logits: Var,
    label: SpeakerGender,
    weights: &ClassWeights,
) -> Result<Var> {
    let logp = g.log_softmax(logits)?;
    let mut pick = vec![0.0; 2];
    pick[label.index()] = -weights.for_gender(label);
    let pick = g.constant(Tensor::vector(pick));
    let prod = g.mul(logp, pick)?;
    Ok(g.sum(prod)?)
}

/// Mean per-token translation loss and, when `disc` is given, the mean weighted
/// discriminator loss over `batch`, built on one graph.
fn batch_losses(
    model: &Model,
    g: &mut Graph<f64>,
    b: &Bound,
    batch: &[&Example],
    disc: Option<(f64, &ClassWeights)>,
) -> Result<(Var, Option<Var>)> {
    let mut trans = Vec::new();
    let mut discs = Vec::new();
    let mut tokens = 0usize;
    for ex in batch {
        let enc = model.encode_graph(g, b, &ex.features)?;
        let first = model.start_token(ex.gender);
        trans.push(model.translation_loss_graph(g, b, enc, first, &ex.target)?);
        tokens += ex.target.len() + 1;
        if let Some((lambda, weights)) = disc {
            let logits = model.discriminate_graph(g, b, enc, lambda)?;
            discs.push(weighted_disc_loss_graph(g, logits, ex.gender, weights)?);
        }
    }
    let stack = |g: &mut Graph<f64>, parts: &[Var], denom: f64| -> Result<Var> {
        let mut s = parts[0];
        for &p in &parts[1..] {
            s = g.add(s, p)?;
        }
        Ok(g.scale(s, 1.0 / denom)?)
    };
    let t = stack(g, &trans, tokens as f64)?;
    let d = if discs.is_empty() { None } else { Some(stack(g, &discs, discs.len() as f64)?) };
    Ok((t, d))
}

/// Held-out translation loss per token.
fn validation_loss(model: &Model, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in examples.chunks(16) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let (t, _) = batch_losses(model, &mut g, &b, &refs, None)?;
        let n: usize = chunk.iter().map(|e| e.target.len() + 1).sum();
        total += g.value(t).item() * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

fn split_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Prepares a fine-tuning start point: a multi-gender copy of `init` whose tag
/// embeddings equal the `<bos>` embedding, so its first predictions match `init`.
pub fn fine_tune_init(init: &Model, cfg: &ModelConfig) -> Result<Model> {
    if init.config().mode != ModelMode::GenderUnaware {
        return Err(TrainError::InitMode(init.config().mode));
    }
    let mut m = init.clone();
    m.config_mut().mode = cfg.mode;
    let emb = m.params_mut().get_mut("dec.emb").expect("decoder embedding");
    let h = emb.cols();
    let vals = emb.values_mut();
    let bos: Vec<f64> = vals[BOS * h..(BOS + 1) * h].to_vec();
    for tag in [TAG_F, TAG_M] {
        vals[tag * h..(tag + 1) * h].copy_from_slice(&bos);
    }
    Ok(m)
}

pub fn train_loop(
    corpus: &[Utterance],
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    init: Option<&Model>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if let Some(g) = model_cfg.mode.specialized_gender() {
        if let Some(u) = corpus.iter().find(|u| u.gender != g) {
            return Err(TrainError::GenderFilter { mode: model_cfg.mode, found: u.gender, id: u.id.clone() });
        }
    }
    let mut model = match cfg.strategy {
        Strategy::Scratch => Model::new(model_cfg.clone(), vocab.len(), cfg.seed)?,
        Strategy::FineTune => {
            let init = init.ok_or(TrainError::MissingInit)?;
            if model_cfg.mode != ModelMode::MultiGender {
                return Err(TrainError::FineTuneMode(model_cfg.mode));
            }
            fine_tune_init(init, model_cfg)?
        }
    };

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut split_rng(cfg.seed, 1));
    let n_val = (corpus.len() as f64 * cfg.validation_fraction).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    if train_idx.is_empty() {
        return Err(TrainError::TooFewUtterances(format!("{} utterances", corpus.len())));
    }
    let train: Vec<Utterance> = train_idx.iter().map(|&i| corpus[i].clone()).collect();
    let targets: Vec<Vec<usize>> = train.iter().map(|u| vocab.encode(&u.target)).collect::<Result<_, _>>()?;

    let disc_weights = if cfg.use_grl && model_cfg.mode.allows_discriminator() {
        let f = train.iter().filter(|u| u.gender == SpeakerGender::F).count() as f64 / train.len() as f64;
        Some(compute_class_weights(f, 1.0 - f).unwrap_or(ClassWeights::uniform()))
    } else {
        None
    };
    let schedule = cfg.schedule();

    let val_utts: Vec<Utterance> = val_idx.iter().map(|&i| corpus[i].clone()).collect();
    let val_examples: Vec<Example> = extract_features(&val_utts, None, cfg.cmvn)?
        .into_iter()
        .zip(&val_utts)
        .map(|(features, u)| Ok(Example { features, gender: u.gender, target: vocab.encode(&u.target)? }))
        .collect::<Result<_>>()?;
    let initial_val = validation_loss(&model, &val_examples)?;
    let mut validation = vec![(0, initial_val)];

    let mut adam = Adam::new(model.params());
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let clean = if cfg.perturb.is_none() { Some(extract_features(&train, None, cfg.cmvn)?) } else { None };
    let every = cfg.checkpoint_every();
    let mut step = 0u64;
    let mut epoch = 0u64;
    while step < cfg.total_updates {
        let feats = match (&cfg.perturb, &clean) {
            (Some(p), _) => extract_features(&train, Some((p, cfg.seed ^ p.seed, epoch)), cfg.cmvn)?,
            (None, Some(f)) => f.clone(),
            (None, None) => unreachable!(),
        };
        let examples: Vec<Example> = feats
            .into_iter()
            .zip(&train)
            .zip(&targets)
            .map(|((features, u), t)| Example { features, gender: u.gender, target: t.clone() })
            .collect();
        let mut perm: Vec<usize> = (0..examples.len()).collect();
        perm.shuffle(&mut split_rng(cfg.seed, 1000 + epoch));
        for chunk in perm.chunks(cfg.batch_size) {
            if step >= cfg.total_updates {
                break;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let lambda = match disc_weights {
                Some(_) => Some(schedule.lambda_at(step)?),
                None => None,
            };
            let mut g = Graph::new();
            let b_disc = lambda.zip(disc_weights.as_ref());
            let b = model.bind(&mut g, true);
            let (t, d) = batch_losses(&model, &mut g, &b, &batch, b_disc)?;
            let loss = match d {
                Some(d) => {
                    let wd = g.scale(d, model_cfg.disc_loss_weight)?;
                    g.add(t, wd)?
                }
                None => t,
            };
            g.backward(loss)?;
            let grads = b.grads(&g);
            step += 1;
            let lr = noam_lr(step, cfg.warmup_updates, cfg.lr_peak);
            adam.step(model.params_mut(), &grads, lr);
            metrics.push(MetricsRecord {
                step,
                lr,
                translation_loss: g.value(t).item(),
                disc_loss: d.map(|d| g.value(d).item()),
                lambda,
            });
            if step.is_multiple_of(every) {
                checkpoints.push(Checkpoint { step, params: model.params().clone() });
                let v = validation_loss(&model, &val_examples)?;
                if !v.is_finite() && initial_val.is_finite() || v > 10.0 * initial_val {
                    return Err(TrainError::DivergedLoss { step, loss: v, initial: initial_val });
                }
                validation.push((step, v));
            }
        }
        epoch += 1;
    }
    Ok(TrainOutcome { model, checkpoints, metrics, validation })
}

/// Elementwise mean of parameter sets sharing one layout.
pub fn average_checkpoints(ckpts: &[&ParamSet<f64>]) -> Result<ParamSet<f64>> {
    let (first, rest) = ckpts.split_first().ok_or(TrainError::EmptyList)?;
    if rest.iter().any(|c| !c.same_layout(first)) {
        return Err(TrainError::ShapeMismatch);
    }
    let mut out = (*first).clone();
    for (name, t) in out.iter_mut() {
        let vals = t.values_mut();
        for c in rest {
            for (a, b) in vals.iter_mut().zip(c.get(name).expect("same layout").values()) {
                *a += *b;
            }
        }
        let k = ckpts.len() as f64;
        vals.iter_mut().for_each(|v| *v /= k);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Share of the held-out set used to fit the probe; the rest scores it.
    pub fit_fraction: f64,
    pub seed: u64,
    pub cmvn: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { hidden: 64, epochs: 300, lr: 1e-2, fit_fraction: 0.5, seed: 0, cmvn: true }
    }
}

/// Probe network output: per-utterance (F, M) logits for stacked encoder frames.
fn probe_logits(g: &mut Graph<f64>, w: [Var; 4], frames: Var, pool: Var) -> Result<Var> {
    let h = g.matmul(frames, w[0])?;
    let h = g.add(h, w[1])?;
    let h = g.relu(h)?;
    let o = g.matmul(h, w[2])?;
    let o = g.add(o, w[3])?;
    Ok(g.matmul(pool, o)?)
}

/// Stacks encoder outputs into `[sum T', H]` plus the `[N, sum T']` per-utterance mean matrix.
fn stack_frames(encs: &[Tensor<f64>]) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let h = encs[0].cols();
    let total: usize = encs.iter().map(Tensor::rows).sum();
    let mut data = Vec::with_capacity(total * h);
    let mut pool = vec![0.0; encs.len() * total];
    let mut off = 0;
    for (i, e) in encs.iter().enumerate() {
        data.extend_from_slice(e.values());
        for r in 0..e.rows() {
            pool[i * total + off + r] = 1.0 / e.rows() as f64;
        }
        off += e.rows();
    }
    Ok((Tensor::matrix(total, h, data)?, Tensor::matrix(encs.len(), total, pool)?))
}

/// Indices used to fit the probe and to score it.
pub fn probe_split(n: usize, cfg: &ProbeConfig) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut split_rng(cfg.seed, 7));
    let n_fit = ((n as f64 * cfg.fit_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let score = order.split_off(n_fit);
    (order, score)
}

/// Trains a fresh two-layer gender classifier on the frozen encoder's outputs for part of
/// `held_out` and returns its accuracy on the rest.
pub fn probe_discriminator(model: &Model, held_out: &[Utterance], cfg: &ProbeConfig) -> Result<f64> {
    let genders: Vec<SpeakerGender> = held_out.iter().map(|u| u.gender).collect();
    if !genders.contains(&SpeakerGender::F) || !genders.contains(&SpeakerGender::M) {
        return Err(TrainError::SingleClassData);
    }
    let feats = extract_features(held_out, None, cfg.cmvn)?;
    let encs: Vec<Tensor<f64>> = feats.iter().map(|f| model.encode(f)).collect::<Result<_, _>>()?;
    let (fit, score) = probe_split(held_out.len(), cfg);
    let (fit, score) = (fit.as_slice(), score.as_slice());

    let pick = |idx: &[usize]| -> Result<(Tensor<f64>, Tensor<f64>, Vec<SpeakerGender>)> {
        let e: Vec<Tensor<f64>> = idx.iter().map(|&i| encs[i].clone()).collect();
        let (frames, pool) = stack_frames(&e)?;
        Ok((frames, pool, idx.iter().map(|&i| genders[i]).collect()))
    };
    let (fit_frames, fit_pool, fit_labels) = pick(fit)?;
    let (score_frames, score_pool, score_labels) = pick(score)?;

    let hdim = model.config().hidden_dim;
    let probe_cfg = ModelConfig { hidden_dim: hdim, disc_hidden: cfg.hidden, ..ModelConfig::default() };
    let mut params = ParamSet::new();
    {
        let m = Model::new(probe_cfg, 8, cfg.seed)?;
        for name in ["disc.w1", "disc.b1", "disc.w2", "disc.b2"] {
            params.insert(name, m.params().get(name).expect("discriminator").clone());
        }
    }
    let mut onehot = vec![0.0; fit_labels.len() * 2];
    for (i, g) in fit_labels.iter().enumerate() {
        onehot[i * 2 + g.index()] = -1.0 / fit_labels.len() as f64;
    }
    let onehot = Tensor::matrix(fit_labels.len(), 2, onehot)?;
    let mut adam = Adam::new(&params);
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let w: Vec<Var> = params.iter().map(|(_, t)| g.leaf(t.clone().with_grad())).collect();
        let frames = g.constant(fit_frames.clone());
        let pool = g.constant(fit_pool.clone());
        let logits = probe_logits(&mut g, [w[0], w[1], w[2], w[3]], frames, pool)?;
        let logp = g.log_softmax(logits)?;
        let y = g.constant(onehot.clone());
        let prod = g.mul(logp, y)?;
        let loss = g.sum(prod)?;
        g.backward(loss)?;
        let grads: Vec<Vec<f64>> = w.iter().map(|v| g.grad(*v).expect("leaf grad").to_vec()).collect();
        adam.step(&mut params, &grads, cfg.lr);
    }
    let mut g = Graph::new();
    let w: Vec<Var> = params.iter().map(|(_, t)| g.constant(t.clone())).collect();
    let frames = g.constant(score_frames);
    let pool = g.constant(score_pool);
    let logits = probe_logits(&mut g, [w[0], w[1], w[2], w[3]], frames, pool)?;
    let vals = g.value(logits).values();
    let correct = score_labels
        .iter()
        .enumerate()
        .filter(|(i, gl)| {
            let pred = if vals[i * 2 + 1] > vals[i * 2] { SpeakerGender::M } else { SpeakerGender::F };
            pred == **gl
        })
        .count();
    Ok(correct as f64 / score_labels.len() as f64)
}
