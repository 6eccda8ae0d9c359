//! Optimisation, dev evaluation, staged transfer and checkpoint files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adcore::{Mode, Tensor};
use crate::beam::{decode_encoding, BeamError, DecodeConfig, DecodeMode};
use crate::ctc::ctc_greedy_decode;
use crate::metrics::{bleu, corpus_rouge_l, corpus_wer, MetricsError, ScoreReport, ScoreRow};
use crate::model::{validate_sample, Model, ModelConfig, ModelError, ModelParams, Sample};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Beam(#[from] BeamError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite gradient at step {step} in tensor {tensor}")]
    NonFiniteGradient { step: u64, tensor: String },
    #[error("gradient for unknown tensor {0}")]
    UnknownTensor(String),
    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Single,
    Warmstart,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimiser steps; 0 means no limit.
    pub max_steps: u64,
    /// Dev evaluation every this many epochs.
    pub eval_every: usize,
    /// Evaluations without dev B@4 improvement before stopping; 0 disables.
    pub patience: usize,
    pub clip_norm: f64,
    /// Name prefixes of tensors that are never updated.
    pub frozen: Vec<String>,
    /// Decoding length limit for dev evaluation during training.
    pub eval_max_len: usize,
    pub seed: u64,
    pub stage: Stage,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.998,
            adam_eps: 1e-8,
            batch_size: 64,
            epochs: 30,
            max_steps: 0,
            eval_every: 1,
            patience: 0,
            clip_norm: 5.0,
            frozen: Vec::new(),
            eval_max_len: 30,
            seed: 0,
            stage: Stage::Single,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.eval_every == 0 || self.eval_max_len == 0 {
            return bad("eval_every and eval_max_len must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }
}

/// First and second moment estimates per tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

/// One bias-corrected Adam update. Tensors without a gradient keep their
/// moments and values; frozen tensors are skipped entirely.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[(String, Tensor)],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient {
                step: state.step + 1,
                tensor: name.clone(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        if cfg.is_frozen(name) {
            continue;
        }
        let w = params.get_mut(name).ok_or_else(|| TrainError::UnknownTensor(name.clone()))?;
        let m = state.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
        let v = state.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
        for (((w, m), v), &g) in w
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *w -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(String, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Dev metrics plus the hypotheses that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: ScoreReport,
    pub hypotheses: Vec<(u64, Vec<usize>)>,
}

/// Decodes every sample with `decode`; gloss WER comes from greedy decoding of
/// the gloss CTC head.
pub fn evaluate(model: &Model, samples: &[Sample], decode: &DecodeConfig) -> Result<Evaluation, TrainError> {
    let mut refs = Vec::with_capacity(samples.len());
    let mut hyps = Vec::with_capacity(samples.len());
    let mut gloss_refs = Vec::with_capacity(samples.len());
    let mut gloss_hyps = Vec::with_capacity(samples.len());
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let enc = model.encode(&s.features)?;
        gloss_refs.push(s.gloss.clone());
        gloss_hyps.push(ctc_greedy_decode(&enc.gls_lattice));
        let best = decode_encoding(model, &enc, decode)?;
        let text = best[0].text().to_vec();
        refs.push(s.text.clone());
        hyps.push(text.clone());
        out.push((s.id, text));
    }
    let report = ScoreReport {
        bleu: bleu(&refs, &hyps)?,
        rouge_l: corpus_rouge_l(&refs, &hyps)?,
        wer: Some(corpus_wer(&gloss_refs, &gloss_hyps)?),
        sentences: samples.len(),
    };
    Ok(Evaluation {
        report,
        hypotheses: out,
    })
}

/// Cheap decoder used for model selection during training.
pub fn greedy_decode_config(max_len: usize) -> DecodeConfig {
    DecodeConfig {
        beam_size: 1,
        max_len,
        mode: DecodeMode::AttentionOnly,
        ..DecodeConfig::default()
    }
}

/// Serialisable state of the shuffling generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub adam: AdamState,
    pub step: u64,
    pub rng: RngState,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"JCTCCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HASH_LEN: usize = 32;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

fn put_table<'a>(out: &mut Vec<u8>, table: impl ExactSizeIterator<Item = (&'a String, &'a Tensor)>) {
    put_u32(out, table.len() as u32);
    for (name, t) in table {
        put_bytes(out, name.as_bytes());
        put_u64(out, t.rows() as u64);
        put_u64(out, t.cols() as u64);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| TrainError::Format(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8], TrainError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn table(&mut self) -> Result<BTreeMap<String, Tensor>, TrainError> {
        let n = self.u32()?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let name = String::from_utf8(self.bytes()?.to_vec())
                .map_err(|_| TrainError::Format("tensor name is not utf-8".into()))?;
            let rows = self.u64()? as usize;
            let cols = self.u64()? as usize;
            let len = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| TrainError::Format(format!("tensor {name} too large")))?;
            let data = self
                .take(len)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::from_vec(rows, cols, data).map_err(|e| TrainError::Format(e.to_string()))?;
            out.insert(name, t);
        }
        Ok(out)
    }
}

impl Checkpoint {
    /// Binary encoding with a trailing SHA-256 of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_bytes(&mut out, serde_json::to_string(&self.config).expect("config serialises").as_bytes());
        put_u64(&mut out, self.step);
        out.extend_from_slice(&self.rng.seed);
        put_u64(&mut out, self.rng.stream);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_table(&mut out, self.params.iter());
        put_u64(&mut out, self.adam.step);
        put_table(&mut out, self.adam.first.iter());
        put_table(&mut out, self.adam.second.iter());
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Decodes and validates tensors against the stored config.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        Self::decode(bytes, None)
    }

    /// Decodes and validates tensors against `expected` instead of the stored config.
    pub fn from_bytes_for(bytes: &[u8], expected: &ModelConfig) -> Result<Self, TrainError> {
        Self::decode(bytes, Some(expected))
    }

    fn decode(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self, TrainError> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + HASH_LEN {
            return Err(TrainError::Integrity(format!("file too short ({} bytes)", bytes.len())));
        }
        let (body, digest) = bytes.split_at(bytes.len() - HASH_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(TrainError::Integrity("content hash mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(TrainError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let stored: ModelConfig =
            serde_json::from_slice(r.bytes()?).map_err(|e| TrainError::Format(format!("config: {e}")))?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let tensors = r.table()?;
        let adam_step = r.u64()?;
        let first = r.table()?;
        let second = r.table()?;
        if r.pos != body.len() {
            return Err(TrainError::Format("trailing bytes".into()));
        }
        let config = expected.cloned().unwrap_or(stored);
        let params = ModelParams::from_tensors(&config, tensors)?;
        Ok(Self {
            config,
            params,
            adam: AdamState {
                step: adam_step,
                first,
                second,
            },
            step,
            rng: RngState { seed, stream, word_pos },
        })
    }

    /// Hex SHA-256 of the encoded checkpoint.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn model(&self) -> Model {
        Model::from_params(self.config.clone(), self.params.clone())
    }
}

/// Path with `.partial` appended, used while a file is being written.
pub fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

/// Writes to `<path>.partial` and renames into place once complete.
pub fn write_atomically(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    let tmp = partial_path(path);
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    write_atomically(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    Checkpoint::from_bytes(&fs::read(path).map_err(io_err(path))?)
}

/// One point of the training curve.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub step: u64,
    pub epoch: usize,
    pub report: ScoreReport,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    /// Checkpoint with the best dev B@4 (the earliest one on ties).
    pub best: Checkpoint,
    pub best_b4: f64,
    pub last: Checkpoint,
    /// Total loss of every optimiser step.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
}

impl StageOutput {
    /// Metrics log rows; the config id carries the run name and step.
    pub fn log_rows(&self, run: &str, seed: u64, steps_per_epoch: usize) -> Vec<ScoreRow> {
        let mut rows = Vec::new();
        for (chunk_idx, chunk) in self.losses.chunks(steps_per_epoch.max(1)).enumerate() {
            let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
            let step = ((chunk_idx + 1) * steps_per_epoch.max(1)).min(self.losses.len());
            rows.push(ScoreRow {
                metric: "loss".into(),
                split: "train".into(),
                config_id: format!("{run}@{step}"),
                seed,
                value: mean,
            });
        }
        for e in &self.evals {
            rows.extend(e.report.rows("dev", &format!("{run}@{}", e.step), seed));
        }
        rows
    }
}

/// Trains from `init` (or a fresh model seeded by `cfg.seed`) on `train`,
/// selecting the checkpoint with the best dev B@4 under greedy decoding.
/// A stage started from `init` is also evaluated before its first step.
pub fn train_stage(
    model_cfg: &ModelConfig,
    train: &[Sample],
    dev: &[Sample],
    cfg: &TrainConfig,
    init: Option<&Checkpoint>,
) -> Result<StageOutput, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("empty training corpus".into()));
    }
    let mut model = match init {
        Some(c) => Model::from_params(model_cfg.clone(), ModelParams::from_tensors(model_cfg, c.params.clone().into_tensors())?),
        None => Model::new(model_cfg.clone(), cfg.seed)?,
    };
    for s in train.iter().chain(dev) {
        validate_sample(s, model_cfg)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::default();
    let mut step = 0u64;
    let decode = greedy_decode_config(cfg.eval_max_len);
    let snapshot = |model: &Model, adam: &AdamState, step: u64, rng: &ChaCha8Rng| Checkpoint {
        config: model.config.clone(),
        params: model.params.clone(),
        adam: adam.clone(),
        step,
        rng: RngState::capture(rng),
    };

    let mut evals = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut stale = 0;
    let mut consider = |model: &Model, adam: &AdamState, step: u64, epoch: usize, rng: &ChaCha8Rng| -> Result<bool, TrainError> {
        if dev.is_empty() {
            return Ok(false);
        }
        let report = evaluate(model, dev, &decode)?.report;
        let b4 = report.b4();
        evals.push(EvalPoint { step, epoch, report });
        if best.as_ref().is_none_or(|(score, _)| b4 > *score) {
            best = Some((b4, snapshot(model, adam, step, rng)));
            stale = 0;
        } else {
            stale += 1;
        }
        Ok(cfg.patience > 0 && stale >= cfg.patience)
    };

    if init.is_some() {
        consider(&model, &adam, 0, 0, &rng)?;
    }
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&Sample> = batch.iter().map(|&i| &train[i]).collect();
            let dropout_seed = cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(step);
            let mut fw = model.forward(Mode::Train, dropout_seed);
            let (loss, values) = fw.total_loss(&samples)?;
            let mut grads = fw.graph.backward(loss).map_err(ModelError::from)?;
            let mut named = fw.param_grads(&mut grads);
            drop(fw);
            named.retain(|(n, _)| !cfg.is_frozen(n));
            clip_global_norm(&mut named, cfg.clip_norm);
            adam_step(&mut model.params, &named, &mut adam, cfg)?;
            losses.push(values.total);
            step += 1;
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                consider(&model, &adam, step, epoch + 1, &rng)?;
                break 'epochs;
            }
        }
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            if consider(&model, &adam, step, epoch + 1, &rng)? {
                break;
            }
        }
    }
    let last = snapshot(&model, &adam, step, &rng);
    let (best_b4, best) = best.unwrap_or_else(|| (f64::NAN, last.clone()));
    Ok(StageOutput {
        best,
        best_b4,
        last,
        losses,
        evals,
    })
}
