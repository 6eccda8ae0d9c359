//! The trainable network.
//!
//! Frame features are stacked `downsample` at a time and projected to the
//! hidden size (sign-embedding stand-in). A gloss-oriented encoder stack
//! produces `h_gls`, supervised by the gloss CTC head; a text-oriented stack
//! on top produces `h_txt`, supervised by the text CTC head and attended to by
//! an autoregressive decoder. All layers are pre-norm transformer blocks with
//! sinusoidal positions.

mod config;
mod params;

pub use config::{Activation, ModelConfig};
pub use params::ModelParams;

use std::collections::HashMap;

use thiserror::Error;

use crate::adcore::{AdError, Gradients, Graph, Mode, Tensor, Var};
use crate::ctc::{ctc_grad, min_frames, CtcError, LogProbLattice};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error("sample {sample}: {which} sequence needs {needed} frames after downsampling, has {frames}")]
    Infeasible {
        sample: u64,
        which: &'static str,
        needed: usize,
        frames: usize,
    },
    #[error("sample {sample}: {reason}")]
    InvalidSample { sample: u64, reason: String },
    #[error("tensor {name}: expected shape {}x{}, found {}x{}", expected.0, expected.1, found.0, found.1)]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("tensor {0} has non-finite values")]
    NonFinite(String),
    #[error("sequence of length {len} exceeds the position table ({max})")]
    Capacity { len: usize, max: usize },
    #[error("token {token} outside decoder input vocabulary of size {vocab}")]
    Vocab { token: usize, vocab: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
}

/// One training triple plus the id of the feature rendering that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// `frames x feature_dim`.
    pub features: Tensor,
    pub gloss: Vec<usize>,
    /// Text tokens without `<eos>`.
    pub text: Vec<usize>,
    pub variant: usize,
}

impl Sample {
    /// Number of encoder steps after stacking `k` frames at a time.
    pub fn downsampled_len(&self, k: usize) -> usize {
        self.features.rows().div_ceil(k)
    }
}

/// Checks vocabularies, feature width and CTC feasibility of both targets.
pub fn validate_sample(sample: &Sample, cfg: &ModelConfig) -> Result<(), ModelError> {
    let invalid = |reason: String| ModelError::InvalidSample {
        sample: sample.id,
        reason,
    };
    if sample.features.rows() == 0 {
        return Err(invalid("no frames".into()));
    }
    if sample.features.cols() != cfg.feature_dim {
        return Err(invalid(format!(
            "feature width {} != configured {}",
            sample.features.cols(),
            cfg.feature_dim
        )));
    }
    if let Some(&g) = sample.gloss.iter().find(|&&g| g >= cfg.gloss_vocab) {
        return Err(invalid(format!("gloss token {g} outside vocabulary {}", cfg.gloss_vocab)));
    }
    if let Some(&t) = sample.text.iter().find(|&&t| t >= cfg.text_vocab) {
        return Err(invalid(format!("text token {t} outside vocabulary {}", cfg.text_vocab)));
    }
    if sample.text.len() + 1 > cfg.max_positions {
        return Err(ModelError::Capacity {
            len: sample.text.len() + 1,
            max: cfg.max_positions,
        });
    }
    let frames = sample.downsampled_len(cfg.downsample);
    if frames > cfg.max_positions {
        return Err(ModelError::Capacity {
            len: frames,
            max: cfg.max_positions,
        });
    }
    for (which, seq) in [("gloss", &sample.gloss), ("text", &sample.text)] {
        let needed = min_frames(seq);
        if needed > frames {
            return Err(ModelError::Infeasible {
                sample: sample.id,
                which,
                needed,
                frames,
            });
        }
    }
    Ok(())
}

fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(len, d);
    for p in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = p as f64 / 10000f64.powf(exponent);
            t.set(p, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

/// Stacks `k` consecutive frames per row, zero-padding the tail.
pub fn stack_frames(features: &Tensor, k: usize) -> Tensor {
    let steps = features.rows().div_ceil(k);
    let f = features.cols();
    let mut out = Tensor::zeros(steps, k * f);
    for s in 0..steps {
        for j in 0..k {
            let frame = s * k + j;
            if frame < features.rows() {
                out.row_mut(s)[j * f..(j + 1) * f].copy_from_slice(features.row(frame));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    positions: Tensor,
}

/// Eval-mode encoder outputs for one input.
#[derive(Debug, Clone)]
pub struct Encoding {
    pub h_gls: Tensor,
    pub h_txt: Tensor,
    pub gls_lattice: LogProbLattice,
    /// Absent for the shared-encoder layout, which has no text CTC head.
    pub txt_lattice: Option<LogProbLattice>,
}

/// Unweighted per-batch averages of the loss terms (0 for disabled terms).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub gls_ctc: f64,
    pub txt_ctc: f64,
    pub mle: f64,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self::from_params(config, params))
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Self {
        let positions = sinusoidal_positions(config.max_positions, config.hidden);
        Self {
            config,
            params,
            positions,
        }
    }

    pub fn forward(&self, mode: Mode, seed: u64) -> Forward<'_> {
        Forward {
            graph: Graph::new(mode, seed),
            model: self,
            vars: HashMap::new(),
        }
    }

    /// Runs both encoder stacks and CTC heads in eval mode.
    pub fn encode(&self, features: &Tensor) -> Result<Encoding, ModelError> {
        let mut fw = self.forward(Mode::Eval, 0);
        let f = fw.sign_embed(features)?;
        let h_gls = fw.gls_encode(f)?;
        let h_txt = fw.txt_encode(h_gls)?;
        let gls = fw.gls_logits(h_gls)?;
        let txt = if self.config.has_txt_ctc() {
            Some(fw.txt_logits(h_txt)?)
        } else {
            None
        };
        let g = &fw.graph;
        Ok(Encoding {
            h_gls: g.value(h_gls).clone(),
            h_txt: g.value(h_txt).clone(),
            gls_lattice: LogProbLattice::from_logits(g.value(gls))?,
            txt_lattice: txt.map(|v| LogProbLattice::from_logits(g.value(v))).transpose()?,
        })
    }

    fn check_prefix(&self, prefix: &[usize]) -> Result<(), ModelError> {
        let cfg = &self.config;
        if let Some(&t) = prefix.iter().find(|&&t| t >= cfg.text_vocab) {
            return Err(ModelError::Vocab {
                token: t,
                vocab: cfg.text_vocab,
            });
        }
        if prefix.len() + 1 > cfg.max_positions {
            return Err(ModelError::Capacity {
                len: prefix.len() + 1,
                max: cfg.max_positions,
            });
        }
        Ok(())
    }

    /// Log-distribution over text tokens and `<eos>` following `prefix`.
    pub fn decode_step(&self, h_txt: &Tensor, prefix: &[usize]) -> Result<Vec<f64>, ModelError> {
        let logp = self.teacher_forced(h_txt, prefix)?;
        Ok(logp.row(logp.rows() - 1).to_vec())
    }

    /// Decoder log-probabilities for every position of `<bos> ⊕ prefix`.
    pub fn teacher_forced(&self, h_txt: &Tensor, prefix: &[usize]) -> Result<Tensor, ModelError> {
        self.check_prefix(prefix)?;
        let mut fw = self.forward(Mode::Eval, 0);
        let memory = fw.graph.leaf(h_txt)?;
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(self.config.bos());
        inputs.extend_from_slice(prefix);
        let logp = fw.decoder_log_probs(memory, &inputs)?;
        Ok(fw.graph.value(logp).clone())
    }

    /// Multi-task loss over a batch, evaluated without dropout.
    pub fn total_loss(&self, batch: &[&Sample]) -> Result<LossValues, ModelError> {
        let mut fw = self.forward(Mode::Eval, 0);
        let (_, values) = fw.total_loss(batch)?;
        Ok(values)
    }
}

/// One recorded forward pass. Parameters enter the graph lazily, so tensors not
/// reached by the computation never appear in it and get no gradient.
pub struct Forward<'p> {
    pub graph: Graph<'p>,
    model: &'p Model,
    vars: HashMap<String, Var>,
}

impl<'p> Forward<'p> {
    fn cfg(&self) -> &'p ModelConfig {
        &self.model.config
    }

    pub fn param(&mut self, name: &str) -> Result<Var, ModelError> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.model.params.get(name)?;
        let v = self.graph.leaf(t)?;
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter gradients for every tensor that entered the graph.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .vars
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = self.graph.matmul(x, w)?;
        Ok(self.graph.add_row(y, b)?)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let n = self.graph.layer_norm_rows(x)?;
        let n = self.graph.mul_row(n, g)?;
        Ok(self.graph.add_row(n, b)?)
    }

    fn projection(&mut self, x: Var, prefix: &str, part: &str) -> Result<Var, ModelError> {
        let w = self.param(&format!("{prefix}.w{part}"))?;
        let b = self.param(&format!("{prefix}.b{part}"))?;
        let y = self.graph.matmul(x, w)?;
        Ok(self.graph.add_row(y, b)?)
    }

    fn attention(&mut self, query: Var, memory: Var, prefix: &str, causal: bool) -> Result<Var, ModelError> {
        let cfg = self.cfg();
        let dh = cfg.head_dim();
        let q = self.projection(query, prefix, "q")?;
        let q = self.graph.scale(q, 1.0 / (dh as f64).sqrt())?;
        let k = self.projection(memory, prefix, "k")?;
        let v = self.projection(memory, prefix, "v")?;
        let (lq, lk) = (self.graph.shape(q).0, self.graph.shape(k).0);
        let mask = if causal {
            let mut m = Tensor::zeros(lq, lk);
            for i in 0..lq {
                for j in (i + 1)..lk {
                    m.set(i, j, -1e9);
                }
            }
            Some(self.graph.leaf_owned(m)?)
        } else {
            None
        };
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = self.graph.slice_cols(q, h * dh, dh)?;
            let kh = self.graph.slice_cols(k, h * dh, dh)?;
            let vh = self.graph.slice_cols(v, h * dh, dh)?;
            let mut scores = self.graph.matmul_nt(qh, kh)?;
            if let Some(m) = mask {
                scores = self.graph.add(scores, m)?;
            }
            let weights = self.graph.softmax_rows(scores)?;
            heads.push(self.graph.matmul(weights, vh)?);
        }
        let joined = if heads.len() == 1 { heads[0] } else { self.graph.concat_cols(&heads)? };
        self.projection(joined, prefix, "o")
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let h = self.linear(x, &format!("{prefix}.ff1"))?;
        let h = match self.cfg().activation {
            Activation::Relu => self.graph.relu(h)?,
            Activation::Softsign => self.graph.softsign(h)?,
        };
        let h = self.graph.dropout(h, self.cfg().dropout)?;
        self.linear(h, &format!("{prefix}.ff2"))
    }

    fn residual(&mut self, x: Var, sub: Var) -> Result<Var, ModelError> {
        let sub = self.graph.dropout(sub, self.cfg().dropout)?;
        Ok(self.graph.add(x, sub)?)
    }

    fn encoder_layer(&mut self, x: Var, prefix: &str) -> Result<Var, ModelError> {
        let a = self.norm(x, &format!("{prefix}.ln1"))?;
        let a = self.attention(a, a, &format!("{prefix}.attn"), false)?;
        let x = self.residual(x, a)?;
        let b = self.norm(x, &format!("{prefix}.ln2"))?;
        let b = self.feed_forward(b, prefix)?;
        self.residual(x, b)
    }

    fn decoder_layer(&mut self, x: Var, memory: Var, prefix: &str) -> Result<Var, ModelError> {
        let a = self.norm(x, &format!("{prefix}.ln1"))?;
        let a = self.attention(a, a, &format!("{prefix}.self"), true)?;
        let x = self.residual(x, a)?;
        let b = self.norm(x, &format!("{prefix}.ln2"))?;
        let b = self.attention(b, memory, &format!("{prefix}.cross"), false)?;
        let x = self.residual(x, b)?;
        let c = self.norm(x, &format!("{prefix}.ln3"))?;
        let c = self.feed_forward(c, prefix)?;
        self.residual(x, c)
    }

    fn add_positions(&mut self, x: Var) -> Result<Var, ModelError> {
        let (len, d) = self.graph.shape(x);
        let max = self.cfg().max_positions;
        if len > max {
            return Err(ModelError::Capacity { len, max });
        }
        let pos = &self.model.positions;
        let data = pos.data()[..len * d].to_vec();
        let p = self.graph.leaf_owned(Tensor::from_vec(len, d, data)?)?;
        Ok(self.graph.add(x, p)?)
    }

    /// Frame stacking and linear projection: `frames x F` to `ceil(frames/k) x d`.
    pub fn sign_embed(&mut self, features: &Tensor) -> Result<Var, ModelError> {
        if features.rows() == 0 {
            return Err(ModelError::Empty("no frames"));
        }
        let cfg = self.cfg();
        if features.cols() != cfg.feature_dim {
            return Err(ModelError::Shape {
                name: "features".into(),
                expected: (features.rows(), cfg.feature_dim),
                found: features.shape(),
            });
        }
        let stacked = self.graph.leaf_owned(stack_frames(features, cfg.downsample))?;
        self.linear(stacked, "embed.proj")
    }

    fn stack(&mut self, input: Var, name: &str, layers: usize) -> Result<Var, ModelError> {
        let mut x = input;
        for i in 0..layers {
            x = self.encoder_layer(x, &format!("{name}.{i}"))?;
        }
        self.norm(x, &format!("{name}.ln"))
    }

    /// Gloss-oriented stack over the embedded features.
    pub fn gls_encode(&mut self, embedded: Var) -> Result<Var, ModelError> {
        let x = self.add_positions(embedded)?;
        let x = self.graph.dropout(x, self.cfg().dropout)?;
        self.stack(x, "gls", self.cfg().gls_layers)
    }

    /// Text-oriented stack over `h_gls`; identity when it has no layers.
    pub fn txt_encode(&mut self, h_gls: Var) -> Result<Var, ModelError> {
        match self.cfg().txt_layers {
            0 => Ok(h_gls),
            n => self.stack(h_gls, "txt", n),
        }
    }

    pub fn gls_logits(&mut self, h_gls: Var) -> Result<Var, ModelError> {
        self.linear(h_gls, "gls_ctc")
    }

    pub fn txt_logits(&mut self, h_txt: Var) -> Result<Var, ModelError> {
        self.linear(h_txt, "txt_ctc")
    }

    /// Row `i` is the log-distribution of the token following `inputs[..=i]`.
    pub fn decoder_log_probs(&mut self, memory: Var, inputs: &[usize]) -> Result<Var, ModelError> {
        let cfg = self.cfg();
        let table = self.param("dec.embed")?;
        let x = self.graph.gather_rows(table, inputs)?;
        let x = self.graph.scale(x, (cfg.hidden as f64).sqrt())?;
        let x = self.add_positions(x)?;
        let mut x = self.graph.dropout(x, cfg.dropout)?;
        for i in 0..cfg.dec_layers {
            x = self.decoder_layer(x, memory, &format!("dec.{i}"))?;
        }
        let x = self.norm(x, "dec.ln")?;
        let logits = self.linear(x, "dec.out")?;
        Ok(self.graph.log_softmax_rows(logits)?)
    }

    /// `-log P_ctc(target | logits)` as a graph scalar.
    pub fn ctc_loss(&mut self, logits: Var, target: &[usize]) -> Result<Var, ModelError> {
        let (loglik, grad) = ctc_grad(self.graph.value(logits), target)?;
        Ok(self.graph.custom_scalar(logits, -loglik, grad)?)
    }

    /// Label-smoothed cross-entropy summed over positions.
    pub fn mle_loss(&mut self, log_probs: Var, targets: &[usize]) -> Result<Var, ModelError> {
        let (rows, classes) = self.graph.shape(log_probs);
        let eps = self.cfg().label_smoothing;
        let mut q = Tensor::full(rows, classes, eps / classes as f64);
        for (r, &t) in targets.iter().enumerate() {
            q.set(r, t, q.get(r, t) + 1.0 - eps);
        }
        let q = self.graph.leaf_owned(q)?;
        let weighted = self.graph.mul(log_probs, q)?;
        let s = self.graph.sum(weighted)?;
        Ok(self.graph.scale(s, -1.0)?)
    }

    /// Weighted multi-task loss averaged over the batch. Terms with zero weight
    /// are not built.
    pub fn total_loss(&mut self, batch: &[&Sample]) -> Result<(Var, LossValues), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Empty("batch"));
        }
        let cfg = self.cfg();
        for s in batch {
            validate_sample(s, cfg)?;
        }
        let n = batch.len() as f64;
        let mut gls_terms = Vec::new();
        let mut txt_terms = Vec::new();
        let mut mle_terms = Vec::new();
        for s in batch {
            let f = self.sign_embed(&s.features)?;
            let h_gls = self.gls_encode(f)?;
            if cfg.lambda_gls > 0.0 {
                let logits = self.gls_logits(h_gls)?;
                gls_terms.push(self.ctc_loss(logits, &s.gloss)?);
            }
            if cfg.lambda_txt == 0.0 && cfg.lambda_mle == 0.0 {
                continue;
            }
            let h_txt = self.txt_encode(h_gls)?;
            if cfg.lambda_txt > 0.0 {
                let logits = self.txt_logits(h_txt)?;
                txt_terms.push(self.ctc_loss(logits, &s.text)?);
            }
            if cfg.lambda_mle > 0.0 {
                let mut inputs = Vec::with_capacity(s.text.len() + 1);
                inputs.push(cfg.bos());
                inputs.extend_from_slice(&s.text);
                let mut targets = s.text.clone();
                targets.push(cfg.eos());
                let logp = self.decoder_log_probs(h_txt, &inputs)?;
                mle_terms.push(self.mle_loss(logp, &targets)?);
            }
        }
        let mut values = LossValues {
            total: 0.0,
            gls_ctc: 0.0,
            txt_ctc: 0.0,
            mle: 0.0,
        };
        let mut total: Option<Var> = None;
        for (terms, weight, slot) in [
            (&gls_terms, cfg.lambda_gls, &mut values.gls_ctc),
            (&txt_terms, cfg.lambda_txt, &mut values.txt_ctc),
            (&mle_terms, cfg.lambda_mle, &mut values.mle),
        ] {
            if terms.is_empty() {
                continue;
            }
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = self.graph.add(acc, t)?;
            }
            *slot = self.graph.value(acc).item() / n;
            let weighted = self.graph.scale(acc, weight / n)?;
            total = Some(match total {
                None => weighted,
                Some(t) => self.graph.add(t, weighted)?,
            });
        }
        let total = match total {
            Some(t) => t,
            None => self.graph.leaf_owned(Tensor::scalar(0.0))?,
        };
        values.total = self.graph.value(total).item();
        Ok((total, values))
    }
}
