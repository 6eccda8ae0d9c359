//! Connectionist temporal classification in log space.
//!
//! Lattices are `T x (V+1)` tables of per-frame log-probabilities where the last
//! column is the blank symbol. Zero probability is represented by [`NEG_INF`],
//! which only ever enters arithmetic through [`log_add`] and [`log_mul`].

use thiserror::Error;

use crate::adcore::{log_softmax_rows, Tensor};

/// Log of zero probability.
pub const NEG_INF: f64 = -1e30;

/// Largest brute-force search space accepted by [`ctc_brute_force`].
pub const BRUTE_FORCE_LIMIT: usize = 1_000_000;

const NORMALIZATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtcError {
    #[error("target of length {len} with {repeats} adjacent repeats needs {} frames, lattice has {frames}", len + repeats)]
    Infeasible { len: usize, repeats: usize, frames: usize },
    #[error("token {token} outside label vocabulary of size {vocab}")]
    Vocab { token: usize, vocab: usize },
    #[error("brute-force search space {size} exceeds {BRUTE_FORCE_LIMIT}")]
    SearchTooLarge { size: u128 },
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),
}

#[inline]
pub fn is_zero(x: f64) -> bool {
    x <= NEG_INF
}

/// `log(exp(a) + exp(b))` with [`NEG_INF`] as the additive identity.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if is_zero(lo) {
        return hi.max(NEG_INF);
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `log(exp(a) * exp(b))` with [`NEG_INF`] absorbing.
#[inline]
pub fn log_mul(a: f64, b: f64) -> f64 {
    if is_zero(a) || is_zero(b) {
        NEG_INF
    } else {
        a + b
    }
}

/// Time-major table of per-frame log-distributions; blank is the last column.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbLattice {
    table: Tensor,
}

impl LogProbLattice {
    /// Wraps log-probabilities, checking that every row log-normalizes to 0.
    pub fn from_log_probs(table: Tensor) -> Result<Self, CtcError> {
        if table.rows() == 0 || table.cols() < 2 {
            return Err(CtcError::InvalidLattice(format!(
                "need at least one frame and one label besides blank, got {}x{}",
                table.rows(),
                table.cols()
            )));
        }
        for t in 0..table.rows() {
            let row = table.row(t);
            if row.iter().any(|v| v.is_nan()) {
                return Err(CtcError::InvalidLattice(format!("NaN in frame {t}")));
            }
            let total = crate::adcore::log_sum_exp(row);
            if total.abs() > NORMALIZATION_TOL {
                return Err(CtcError::InvalidLattice(format!(
                    "frame {t} log-normalizes to {total:e}"
                )));
            }
        }
        Ok(Self { table })
    }

    /// Applies a row-wise log-softmax to unnormalized scores.
    pub fn from_logits(logits: &Tensor) -> Result<Self, CtcError> {
        if !logits.is_finite() {
            return Err(CtcError::InvalidLattice("non-finite logits".into()));
        }
        Self::from_log_probs(log_softmax_rows(logits))
    }

    pub fn frames(&self) -> usize {
        self.table.rows()
    }

    /// Number of non-blank labels.
    pub fn vocab(&self) -> usize {
        self.table.cols() - 1
    }

    pub fn blank(&self) -> usize {
        self.table.cols() - 1
    }

    #[inline]
    pub fn logp(&self, t: usize, k: usize) -> f64 {
        self.table.get(t, k)
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }
}

/// Number of adjacent equal pairs; each needs a separating blank.
pub fn adjacent_repeats(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Minimum frame count able to emit `target`.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + adjacent_repeats(target)
}

pub fn check_feasible(frames: usize, target: &[usize]) -> Result<(), CtcError> {
    let repeats = adjacent_repeats(target);
    if target.len() + repeats > frames {
        return Err(CtcError::Infeasible {
            len: target.len(),
            repeats,
            frames,
        });
    }
    Ok(())
}

fn check_target(lattice: &LogProbLattice, target: &[usize]) -> Result<(), CtcError> {
    if let Some(&token) = target.iter().find(|&&k| k >= lattice.vocab()) {
        return Err(CtcError::Vocab {
            token,
            vocab: lattice.vocab(),
        });
    }
    check_feasible(lattice.frames(), target)
}

/// Blank-interleaved label sequence: `blank y1 blank y2 ... yU blank`.
fn extended(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    ext
}

#[inline]
fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

/// Forward variables `alpha[t][s]`, emission at `t` included.
fn forward(lattice: &LogProbLattice, ext: &[usize]) -> Vec<Vec<f64>> {
    let (frames, blank, n) = (lattice.frames(), lattice.blank(), ext.len());
    let mut alpha = vec![vec![NEG_INF; n]; frames];
    alpha[0][0] = lattice.logp(0, ext[0]);
    if n > 1 {
        alpha[0][1] = lattice.logp(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..n {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if can_skip(ext, s, blank) {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = log_mul(acc, lattice.logp(t, ext[s]));
        }
    }
    alpha
}

/// Backward variables `beta[t][s]`, emission at `t` excluded.
fn backward(lattice: &LogProbLattice, ext: &[usize]) -> Vec<Vec<f64>> {
    let (frames, blank, n) = (lattice.frames(), lattice.blank(), ext.len());
    let mut beta = vec![vec![NEG_INF; n]; frames];
    beta[frames - 1][n - 1] = 0.0;
    if n > 1 {
        beta[frames - 1][n - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..n {
            let mut acc = log_mul(lattice.logp(t + 1, ext[s]), beta[t + 1][s]);
            if s + 1 < n {
                acc = log_add(acc, log_mul(lattice.logp(t + 1, ext[s + 1]), beta[t + 1][s + 1]));
            }
            if s + 2 < n && can_skip(ext, s + 2, blank) {
                acc = log_add(acc, log_mul(lattice.logp(t + 1, ext[s + 2]), beta[t + 1][s + 2]));
            }
            beta[t][s] = acc;
        }
    }
    beta
}

/// `log P(target | lattice)`, summed over every alignment collapsing to `target`.
pub fn ctc_log_likelihood(lattice: &LogProbLattice, target: &[usize]) -> Result<f64, CtcError> {
    check_target(lattice, target)?;
    let ext = extended(target, lattice.blank());
    let alpha = forward(lattice, &ext);
    let last = &alpha[lattice.frames() - 1];
    let n = ext.len();
    Ok(if n > 1 { log_add(last[n - 1], last[n - 2]) } else { last[0] })
}

/// Collapses an alignment path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &z in path {
        if Some(z) != prev && z != blank {
            out.push(z);
        }
        prev = Some(z);
    }
    out
}

/// Exhaustive enumeration of all `(V+1)^T` alignment paths.
///
/// Test oracle for [`ctc_log_likelihood`]; returns [`NEG_INF`] for targets no path reaches.
pub fn ctc_brute_force(lattice: &LogProbLattice, target: &[usize]) -> Result<f64, CtcError> {
    let width = lattice.vocab() + 1;
    let frames = lattice.frames();
    let size = (width as u128).checked_pow(frames as u32).unwrap_or(u128::MAX);
    if size > BRUTE_FORCE_LIMIT as u128 {
        return Err(CtcError::SearchTooLarge { size });
    }
    let mut path = vec![0usize; frames];
    let mut total = NEG_INF;
    loop {
        if collapse(&path, lattice.blank()) == target {
            let lp = path
                .iter()
                .enumerate()
                .fold(0.0, |acc, (t, &z)| log_mul(acc, lattice.logp(t, z)));
            total = log_add(total, lp);
        }
        // odometer increment
        let mut t = 0;
        loop {
            if t == frames {
                return Ok(total);
            }
            path[t] += 1;
            if path[t] < width {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}

/// Per-frame posterior of each symbol under alignments of `target` (rows sum to 1).
pub fn alignment_posterior(lattice: &LogProbLattice, target: &[usize]) -> Result<(f64, Tensor), CtcError> {
    check_target(lattice, target)?;
    let ext = extended(target, lattice.blank());
    let alpha = forward(lattice, &ext);
    let beta = backward(lattice, &ext);
    let frames = lattice.frames();
    let n = ext.len();
    let last = &alpha[frames - 1];
    let loglik = if n > 1 { log_add(last[n - 1], last[n - 2]) } else { last[0] };
    let width = lattice.vocab() + 1;
    let mut acc = vec![vec![NEG_INF; width]; frames];
    for t in 0..frames {
        for s in 0..n {
            acc[t][ext[s]] = log_add(acc[t][ext[s]], log_mul(alpha[t][s], beta[t][s]));
        }
    }
    let mut post = Tensor::zeros(frames, width);
    for t in 0..frames {
        for k in 0..width {
            if !is_zero(acc[t][k]) {
                post.set(t, k, (acc[t][k] - loglik).exp());
            }
        }
    }
    Ok((loglik, post))
}

/// Log-likelihood of `target` and the gradient of `-log P` w.r.t. the
/// pre-softmax `logits`: `softmax(logits) - posterior`.
pub fn ctc_grad(logits: &Tensor, target: &[usize]) -> Result<(f64, Tensor), CtcError> {
    let lattice = LogProbLattice::from_logits(logits)?;
    let (loglik, post) = alignment_posterior(&lattice, target)?;
    let mut grad = lattice.table().map(f64::exp);
    for (g, p) in grad.data_mut().iter_mut().zip(post.data()) {
        *g -= p;
    }
    Ok((loglik, grad))
}

/// Best-path decoding: per-frame argmax (lowest index on ties), then collapse.
pub fn ctc_greedy_decode(lattice: &LogProbLattice) -> Vec<usize> {
    let path: Vec<usize> = (0..lattice.frames())
        .map(|t| {
            let row = lattice.table().row(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&path, lattice.blank())
}
