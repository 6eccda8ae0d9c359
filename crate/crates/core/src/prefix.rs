//! Incremental CTC prefix scoring.
//!
//! For a prefix `g` the state keeps, per frame `t`, the log mass of all
//! alignments of `x[0..=t]` that collapse to exactly `g`, split by whether the
//! last emitted frame was blank (`gamma_b`) or the last label of `g` (`gamma_n`).
//! Extending by a token yields the probability that the complete output
//! *starts with* the new prefix; [`PrefixState::eos_score`] yields the
//! probability that the prefix *is* the complete output.

use crate::ctc::{log_add, log_mul, LogProbLattice, NEG_INF};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("token {token} is not a label of a lattice with {vocab} labels")]
pub struct PrefixVocabError {
    pub token: usize,
    pub vocab: usize,
}

/// Persistent prefix state; extending returns a new value and leaves `self` intact.
#[derive(Debug, Clone)]
pub struct PrefixState<'a> {
    lattice: &'a LogProbLattice,
    tokens: Vec<usize>,
    gamma_b: Vec<f64>,
    gamma_n: Vec<f64>,
    /// Log prefix probability of `tokens`; 0 for the empty prefix.
    score: f64,
}

impl<'a> PrefixState<'a> {
    /// State of the empty prefix.
    pub fn init(lattice: &'a LogProbLattice) -> Self {
        let frames = lattice.frames();
        let blank = lattice.blank();
        let mut gamma_b = Vec::with_capacity(frames);
        let mut acc = 0.0;
        for t in 0..frames {
            acc = log_mul(acc, lattice.logp(t, blank));
            gamma_b.push(acc);
        }
        Self {
            lattice,
            tokens: Vec::new(),
            gamma_b,
            gamma_n: vec![NEG_INF; frames],
            score: 0.0,
        }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn gamma_blank(&self) -> &[f64] {
        &self.gamma_b
    }

    pub fn gamma_label(&self) -> &[f64] {
        &self.gamma_n
    }

    /// Log prefix probability of the current prefix.
    pub fn prefix_score(&self) -> f64 {
        self.score
    }

    /// `log P(prefix is the complete label sequence)`.
    pub fn eos_score(&self) -> f64 {
        let last = self.lattice.frames() - 1;
        log_add(self.gamma_b[last], self.gamma_n[last])
    }

    /// Extends the prefix by `token`, returning the log prefix probability of
    /// the extension and its state.
    pub fn extend(&self, token: usize) -> Result<(f64, PrefixState<'a>), PrefixVocabError> {
        let lat = self.lattice;
        if token >= lat.vocab() {
            return Err(PrefixVocabError {
                token,
                vocab: lat.vocab(),
            });
        }
        let frames = lat.frames();
        let blank = lat.blank();
        let repeat = self.tokens.last() == Some(&token);
        // Mass that may precede a fresh emission of `token` right after frame t.
        let phi = |t: usize| {
            if repeat {
                self.gamma_b[t]
            } else {
                log_add(self.gamma_b[t], self.gamma_n[t])
            }
        };
        let mut gamma_n = vec![NEG_INF; frames];
        let mut gamma_b = vec![NEG_INF; frames];
        let start = if self.tokens.is_empty() { 0.0 } else { NEG_INF };
        gamma_n[0] = log_mul(start, lat.logp(0, token));
        let mut score = gamma_n[0];
        for t in 1..frames {
            let fresh = phi(t - 1);
            gamma_n[t] = log_mul(log_add(gamma_n[t - 1], fresh), lat.logp(t, token));
            gamma_b[t] = log_mul(log_add(gamma_b[t - 1], gamma_n[t - 1]), lat.logp(t, blank));
            score = log_add(score, log_mul(fresh, lat.logp(t, token)));
        }
        let mut tokens = self.tokens.clone();
        tokens.push(token);
        let next = PrefixState {
            lattice: lat,
            tokens,
            gamma_b,
            gamma_n,
            score,
        };
        Ok((score, next))
    }
}

/// Prefix state of the empty hypothesis.
pub fn prefix_init(lattice: &LogProbLattice) -> PrefixState<'_> {
    PrefixState::init(lattice)
}

pub fn prefix_extend<'a>(state: &PrefixState<'a>, token: usize) -> Result<(f64, PrefixState<'a>), PrefixVocabError> {
    state.extend(token)
}

pub fn prefix_eos_score(state: &PrefixState<'_>) -> f64 {
    state.eos_score()
}
