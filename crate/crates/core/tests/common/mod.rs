//! Independent reference implementations shared by the integration suites.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::HashMap;

use jointctc::adcore::Tensor;
use jointctc::beam::DecodeConfig;
use jointctc::ctc::LogProbLattice;
use jointctc::model::{ModelConfig, Sample};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_logits(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

pub fn random_lattice(rng: &mut ChaCha8Rng, frames: usize, labels: usize) -> LogProbLattice {
    LogProbLattice::from_logits(&random_logits(rng, frames, labels + 1)).unwrap()
}

/// Relative error, falling back to absolute error for tiny magnitudes.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale > 1e-6 {
        (a - b).abs() / scale
    } else {
        (a - b).abs()
    }
}

/// Every sequence over `0..symbols` with length at most `max_len`, shortest first.
pub fn sequences(symbols: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for k in 0..symbols {
                let mut t: Vec<usize> = s.clone();
                t.push(k);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, &z) in path.iter().enumerate() {
        if z != blank && (i == 0 || path[i - 1] != z) {
            out.push(z);
        }
    }
    out
}

/// Probability mass of every label sequence, by enumerating all alignment
/// paths of a lattice in linear probability space.
pub struct PathTable {
    mass: HashMap<Vec<usize>, f64>,
}

impl PathTable {
    pub fn new(lattice: &LogProbLattice) -> Self {
        let width = lattice.vocab() + 1;
        let frames = lattice.frames();
        let probs: Vec<Vec<f64>> = (0..frames)
            .map(|t| (0..width).map(|k| lattice.logp(t, k).exp()).collect())
            .collect();
        let mut mass = HashMap::new();
        for path in sequences(width, frames).into_iter().filter(|p| p.len() == frames) {
            let p: f64 = path.iter().enumerate().map(|(t, &z)| probs[t][z]).product();
            *mass.entry(collapse(&path, lattice.blank())).or_insert(0.0) += p;
        }
        Self { mass }
    }

    /// `log P(y)`; negative infinity when no path emits `y`.
    pub fn log_likelihood(&self, y: &[usize]) -> f64 {
        self.mass.get(y).copied().unwrap_or(0.0).ln()
    }

    /// `log` of the mass of all label sequences starting with `prefix`.
    pub fn log_prefix(&self, prefix: &[usize]) -> f64 {
        self.mass
            .iter()
            .filter(|(y, _)| y.starts_with(prefix))
            .map(|(_, p)| p)
            .sum::<f64>()
            .ln()
    }

    pub fn total(&self) -> f64 {
        self.mass.values().sum()
    }

    pub fn outputs(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.mass.keys()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub tokens: Vec<usize>,
    pub attn: f64,
    pub score: f64,
}

fn better(a: &Scored, b: &Scored) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.attn.total_cmp(&a.attn))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Every complete output of length at most `cfg.max_len`, scored with the
/// joint objective, best first. Outputs end with `eos` unless they hit the
/// length limit.
pub fn exhaustive_joint(
    step: &dyn Fn(&[usize]) -> Vec<f64>,
    eos: usize,
    paths: Option<&PathTable>,
    cfg: &DecodeConfig,
) -> Vec<Scored> {
    let w = if paths.is_some() { cfg.ctc_weight } else { 0.0 };
    let mut out = Vec::new();
    let mut stack = vec![(Vec::<usize>::new(), 0.0f64)];
    while let Some((prefix, attn)) = stack.pop() {
        let logp = step(&prefix);
        for (tok, &lp) in logp.iter().enumerate() {
            let mut tokens = prefix.clone();
            tokens.push(tok);
            let a = attn + lp;
            let len = tokens.len();
            let ctc = match paths {
                None => 0.0,
                Some(t) if tok == eos => t.log_likelihood(&prefix),
                Some(t) => t.log_prefix(&tokens),
            };
            if tok == eos || len == cfg.max_len {
                let score = w * ctc + (1.0 - w) * a + cfg.length_penalty * len as f64;
                out.push(Scored { tokens, attn: a, score });
            } else {
                stack.push((tokens, a));
            }
        }
    }
    out.sort_by(better);
    out
}

/// Deliberately small model shape for oracle comparisons.
pub fn tiny_config(text_vocab: usize) -> ModelConfig {
    ModelConfig {
        hidden: 8,
        heads: 2,
        gls_layers: 1,
        txt_layers: 1,
        dec_layers: 1,
        ff_dim: 8,
        gloss_vocab: 3,
        text_vocab,
        feature_dim: 3,
        max_positions: 16,
        ..ModelConfig::default()
    }
}

pub fn random_sample(rng: &mut ChaCha8Rng, id: u64, frames: usize, cfg: &ModelConfig, gloss: Vec<usize>, text: Vec<usize>) -> Sample {
    let features = random_logits(rng, frames, cfg.feature_dim);
    Sample {
        id,
        features,
        gloss,
        text,
        variant: 0,
    }
}

/// Corpus BLEU written from the definition: clipped n-gram precisions over
/// the whole corpus, geometric mean, brevity penalty. In percent.
pub fn oracle_bleu(refs: &[Vec<usize>], hyps: &[Vec<usize>], n_max: usize) -> f64 {
    let mut log_p = 0.0;
    for n in 1..=n_max {
        let (mut hit, mut total) = (0usize, 0usize);
        for (r, h) in refs.iter().zip(hyps) {
            let grams = |s: &[usize]| -> Vec<Vec<usize>> {
                if s.len() < n {
                    Vec::new()
                } else {
                    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
                }
            };
            let mut pool = grams(r);
            for g in grams(h) {
                total += 1;
                if let Some(pos) = pool.iter().position(|x| *x == g) {
                    pool.swap_remove(pos);
                    hit += 1;
                }
            }
        }
        if hit == 0 {
            return 0.0;
        }
        log_p += (hit as f64 / total as f64).ln() / n_max as f64;
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * log_p.exp()
}

/// Levenshtein distance by memoised recursion.
pub fn oracle_edits(a: &[usize], b: &[usize]) -> usize {
    fn go(a: &[usize], b: &[usize], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let sub = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
        let del = go(a, b, i + 1, j, memo) + 1;
        let ins = go(a, b, i, j + 1, memo) + 1;
        let v = sub.min(del).min(ins);
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

/// Longest common subsequence length by memoised recursion.
pub fn oracle_lcs(a: &[usize], b: &[usize]) -> usize {
    fn go(a: &[usize], b: &[usize], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

pub fn oracle_rouge_l(r: &[usize], h: &[usize]) -> f64 {
    let l = oracle_lcs(r, h) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, rc) = (l / h.len() as f64, l / r.len() as f64);
    2.0 * p * rc / (p + rc)
}
pub mod checks;
