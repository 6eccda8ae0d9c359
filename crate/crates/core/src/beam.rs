//! Label-synchronous beam search.
//!
//! At every step the attentional decoder proposes the top `beam_size`
//! continuations of each live hypothesis. Extensions are scored by
//!
//! ```text
//! w * ctc + (1 - w) * attn + length_penalty * len
//! ```
//!
//! where `ctc` is the text CTC prefix score (or the end-of-sequence score once
//! `<eos>` is emitted). Hypotheses ending in `<eos>` or reaching `max_len` are
//! retired; the rest are pruned to the global top `beam_size`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adcore::Tensor;
use crate::ctc::LogProbLattice;
use crate::model::{Encoding, Model, ModelError};
use crate::prefix::{PrefixState, PrefixVocabError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeamError {
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prefix(#[from] PrefixVocabError),
    #[error("text lattice has {lattice} labels but the decoder emits {decoder} tokens")]
    LatticeVocab { lattice: usize, decoder: usize },
    #[error("joint decoding needs a text CTC head")]
    MissingLattice,
    #[error("decoder returned {found} scores, expected {expected}")]
    StepWidth { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    Joint,
    AttentionOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
    pub length_penalty: f64,
    pub ctc_weight: f64,
    pub mode: DecodeMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            max_len: 30,
            length_penalty: 0.6,
            ctc_weight: 0.3,
            mode: DecodeMode::Joint,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), BeamError> {
        if self.beam_size == 0 {
            return Err(BeamError::Config("beam_size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(BeamError::Config("max_len must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(BeamError::Config(format!("ctc_weight {} outside [0, 1]", self.ctc_weight)));
        }
        if !(self.length_penalty >= 0.0 && self.length_penalty.is_finite()) {
            return Err(BeamError::Config(format!(
                "length_penalty must be finite and non-negative, got {}",
                self.length_penalty
            )));
        }
        Ok(())
    }
}

/// Source of decoder distributions over text tokens plus `<eos>`.
pub trait StepScorer {
    /// Index of `<eos>`; the distribution has `eos() + 1` entries.
    fn eos(&self) -> usize;
    fn step(&self, prefix: &[usize]) -> Result<Vec<f64>, BeamError>;
}

/// Decoder of a trained model conditioned on one encoded input.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub h_txt: &'a Tensor,
}

impl StepScorer for ModelScorer<'_> {
    fn eos(&self) -> usize {
        self.model.config.eos()
    }

    fn step(&self, prefix: &[usize]) -> Result<Vec<f64>, BeamError> {
        Ok(self.model.decode_step(self.h_txt, prefix)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, including a trailing `<eos>` when the search produced one.
    pub tokens: Vec<usize>,
    pub attn_score: f64,
    pub ctc_score: f64,
    pub length_bonus: f64,
    pub score: f64,
    pub finished: bool,
    pub ended_with_eos: bool,
}

impl Hypothesis {
    /// Tokens without the terminating `<eos>`.
    pub fn text(&self) -> &[usize] {
        if self.ended_with_eos {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }
}

/// Additive bonus for a hypothesis of length `len`.
pub fn length_penalty(len: usize, weight: f64) -> f64 {
    weight * len as f64
}

pub fn joint_score(ctc: f64, attn: f64, bonus: f64, ctc_weight: f64) -> f64 {
    ctc_weight * ctc + (1.0 - ctc_weight) * attn + bonus
}

/// Higher score first, then higher attention score, then lexicographic tokens.
pub fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.attn_score.total_cmp(&a.attn_score))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

struct Live<'a> {
    hyp: Hypothesis,
    state: Option<PrefixState<'a>>,
}

fn top_candidates(logp: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logp.len()).collect();
    idx.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn search<S: StepScorer>(
    scorer: &S,
    lattice: Option<&LogProbLattice>,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>, BeamError> {
    cfg.validate()?;
    let eos = scorer.eos();
    if let Some(lat) = lattice {
        if lat.vocab() != eos {
            return Err(BeamError::LatticeVocab {
                lattice: lat.vocab(),
                decoder: eos,
            });
        }
    }
    let weight = if lattice.is_some() { cfg.ctc_weight } else { 0.0 };
    let mut live = vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            attn_score: 0.0,
            ctc_score: 0.0,
            length_bonus: 0.0,
            score: 0.0,
            finished: false,
            ended_with_eos: false,
        },
        state: lattice.map(PrefixState::init),
    }];
    let mut finished = Vec::new();
    for len in 1..=cfg.max_len {
        let bonus = length_penalty(len, cfg.length_penalty);
        let mut next = Vec::new();
        for h in &live {
            let logp = scorer.step(&h.hyp.tokens)?;
            if logp.len() != eos + 1 {
                return Err(BeamError::StepWidth {
                    expected: eos + 1,
                    found: logp.len(),
                });
            }
            for tok in top_candidates(&logp, cfg.beam_size) {
                let attn = h.hyp.attn_score + logp[tok];
                let (ctc, state) = match &h.state {
                    None => (0.0, None),
                    Some(s) if tok == eos => (s.eos_score(), None),
                    Some(s) => {
                        let (score, st) = s.extend(tok)?;
                        (score, Some(st))
                    }
                };
                let mut tokens = h.hyp.tokens.clone();
                tokens.push(tok);
                let done = tok == eos || len == cfg.max_len;
                let hyp = Hypothesis {
                    tokens,
                    attn_score: attn,
                    ctc_score: ctc,
                    length_bonus: bonus,
                    score: joint_score(ctc, attn, bonus, weight),
                    finished: done,
                    ended_with_eos: tok == eos,
                };
                if done {
                    finished.push(hyp);
                } else {
                    next.push(Live { hyp, state });
                }
            }
        }
        next.sort_by(|a, b| rank(&a.hyp, &b.hyp));
        next.truncate(cfg.beam_size);
        live = next;
        if live.is_empty() {
            break;
        }
    }
    assert!(!finished.is_empty(), "beam search retired no hypothesis");
    finished.sort_by(rank);
    Ok(finished)
}

/// Joint CTC/attention search; returns finished hypotheses best first.
pub fn joint_beam_search<S: StepScorer>(
    scorer: &S,
    txt_lattice: &LogProbLattice,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>, BeamError> {
    search(scorer, Some(txt_lattice), cfg)
}

/// Attention-only baseline: same search without the CTC term.
pub fn attention_beam_search<S: StepScorer>(scorer: &S, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>, BeamError> {
    search(scorer, None, cfg)
}

/// Encodes `features` and decodes according to `cfg.mode`.
pub fn decode_features(model: &Model, features: &Tensor, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>, BeamError> {
    decode_encoding(model, &model.encode(features)?, cfg)
}

/// Decodes an existing encoding according to `cfg.mode`.
pub fn decode_encoding(model: &Model, enc: &Encoding, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>, BeamError> {
    let scorer = ModelScorer {
        model,
        h_txt: &enc.h_txt,
    };
    match cfg.mode {
        DecodeMode::AttentionOnly => attention_beam_search(&scorer, cfg),
        DecodeMode::Joint => {
            let lat = enc.txt_lattice.as_ref().ok_or(BeamError::MissingLattice)?;
            joint_beam_search(&scorer, lat, cfg)
        }
    }
}
