//! Corpus BLEU, ROUGE-L F1 and word error rate over token-id sequences.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{refs} references but {hyps} hypotheses")]
    LengthMismatch { refs: usize, hyps: usize },
    #[error("reference {0} is empty")]
    EmptyReference(usize),
    #[error("score csv: {0}")]
    Csv(#[from] csv::Error),
}

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_pairs<T>(refs: &[T], hyps: &[T]) -> Result<(), MetricsError> {
    if refs.len() != hyps.len() {
        return Err(MetricsError::LengthMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    if refs.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    Ok(())
}

/// Corpus BLEU without smoothing; entry `k - 1` is B@k in percent.
pub fn bleu(references: &[Vec<usize>], hypotheses: &[Vec<usize>]) -> Result<[f64; 4], MetricsError> {
    check_pairs(references, hypotheses)?;
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut ref_len, mut hyp_len) = (0usize, 0usize);
    for (r, h) in references.iter().zip(hypotheses) {
        ref_len += r.len();
        hyp_len += h.len();
        for n in 1..=4 {
            let ref_counts = ngram_counts(r, n);
            for (gram, count) in ngram_counts(h, n) {
                matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
                totals[n - 1] += count;
            }
        }
    }
    let brevity = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let mut out = [0.0; 4];
    let mut log_sum = 0.0f64;
    for k in 1..=4 {
        if matches[k - 1] == 0 || !log_sum.is_finite() {
            log_sum = f64::NEG_INFINITY;
        } else {
            log_sum += (matches[k - 1] as f64 / totals[k - 1] as f64).ln();
        }
        out[k - 1] = if log_sum.is_finite() {
            100.0 * brevity * (log_sum / k as f64).exp()
        } else {
            0.0
        };
    }
    Ok(out)
}

fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for &x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Sentence-level ROUGE-L F1 in `[0, 1]`.
pub fn rouge_l_f1(reference: &[usize], hypothesis: &[usize]) -> f64 {
    if reference.is_empty() || hypothesis.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(reference, hypothesis) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hypothesis.len() as f64;
    let r = lcs / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Mean sentence ROUGE-L F1 in percent.
pub fn corpus_rouge_l(references: &[Vec<usize>], hypotheses: &[Vec<usize>]) -> Result<f64, MetricsError> {
    check_pairs(references, hypotheses)?;
    let total: f64 = references.iter().zip(hypotheses).map(|(r, h)| rouge_l_f1(r, h)).sum();
    Ok(100.0 * total / references.len() as f64)
}

/// Levenshtein distance with unit costs.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, &x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

pub fn wer(reference: &[usize], hypothesis: &[usize]) -> Result<f64, MetricsError> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference(0));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Total edits over total reference length, in percent.
pub fn corpus_wer(references: &[Vec<usize>], hypotheses: &[Vec<usize>]) -> Result<f64, MetricsError> {
    check_pairs(references, hypotheses)?;
    let mut edits = 0;
    let mut len = 0;
    for (i, (r, h)) in references.iter().zip(hypotheses).enumerate() {
        if r.is_empty() {
            return Err(MetricsError::EmptyReference(i));
        }
        edits += edit_distance(r, h);
        len += r.len();
    }
    Ok(100.0 * edits as f64 / len as f64)
}

/// All text metrics, plus gloss WER when available.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub wer: Option<f64>,
    pub sentences: usize,
}

impl ScoreReport {
    pub fn text(references: &[Vec<usize>], hypotheses: &[Vec<usize>]) -> Result<Self, MetricsError> {
        Ok(Self {
            bleu: bleu(references, hypotheses)?,
            rouge_l: corpus_rouge_l(references, hypotheses)?,
            wer: None,
            sentences: references.len(),
        })
    }

    pub fn b4(&self) -> f64 {
        self.bleu[3]
    }

    /// `(metric, value)` pairs in report order.
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![
            ("bleu1", self.bleu[0]),
            ("bleu2", self.bleu[1]),
            ("bleu3", self.bleu[2]),
            ("bleu4", self.bleu[3]),
            ("rouge_l", self.rouge_l),
        ];
        if let Some(w) = self.wer {
            v.push(("wer", w));
        }
        v
    }

    pub fn rows(&self, split: &str, config_id: &str, seed: u64) -> Vec<ScoreRow> {
        self.metrics()
            .into_iter()
            .map(|(metric, value)| ScoreRow {
                metric: metric.to_string(),
                split: split.to_string(),
                config_id: config_id.to_string(),
                seed,
                value,
            })
            .collect()
    }
}

/// One line of a score CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub metric: String,
    pub split: String,
    pub config_id: String,
    pub seed: u64,
    pub value: f64,
}

pub const SCORE_HEADER: [&str; 5] = ["metric", "split", "config_id", "seed", "value"];

/// Writes rows with the fixed header (also when `rows` is empty).
pub fn write_scores<W: Write>(out: W, rows: &[ScoreRow]) -> Result<(), MetricsError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(SCORE_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_scores<R: Read>(input: R) -> Result<Vec<ScoreRow>, MetricsError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(SCORE_HEADER) {
        return Err(MetricsError::Csv(csv::Error::from(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("unexpected score header {header:?}"),
        ))));
    }
    r.deserialize().map(|row| row.map_err(MetricsError::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_corpus_scores_perfectly() {
        let refs = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8, 9]];
        let b = bleu(&refs, &refs).unwrap();
        assert!(b.iter().all(|&v| (v - 100.0).abs() < 1e-9));
        assert!((corpus_rouge_l(&refs, &refs).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(corpus_wer(&refs, &refs).unwrap(), 0.0);
    }

    #[test]
    fn brevity_penalty_case() {
        let b = bleu(&[vec![0, 1, 2, 3]], &[vec![0, 1, 2]]).unwrap();
        let expect = 100.0 * (-1.0f64 / 3.0).exp();
        assert!((b[2] - expect).abs() < 1e-6);
        assert!((b[2] - 71.65).abs() < 5e-3);
        assert_eq!(b[3], 0.0);
    }

    #[test]
    fn disjoint_scores_zero() {
        let b = bleu(&[vec![0, 1, 2]], &[vec![3, 4]]).unwrap();
        assert_eq!(b, [0.0; 4]);
        assert_eq!(rouge_l_f1(&[0, 1], &[2, 3]), 0.0);
    }

    #[test]
    fn rouge_and_wer_examples() {
        assert!((rouge_l_f1(&[0, 1, 2], &[0, 2]) - 0.8).abs() < 1e-12);
        assert_eq!(rouge_l_f1(&[0, 1], &[]), 0.0);
        assert!((wer(&[0, 1, 2], &[0, 2]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(wer(&[0], &[1, 2]).unwrap(), 2.0);
        assert!(wer(&[], &[1]).is_err());
    }

    #[test]
    fn corpus_errors() {
        assert!(matches!(bleu(&[], &[]), Err(MetricsError::EmptyCorpus)));
        assert!(matches!(
            bleu(&[vec![1]], &[]),
            Err(MetricsError::LengthMismatch { refs: 1, hyps: 0 })
        ));
    }

    #[test]
    fn csv_round_trip_with_header() {
        let report = ScoreReport {
            bleu: [50.0, 40.0, 30.0, 20.0],
            rouge_l: 45.5,
            wer: Some(12.0),
            sentences: 3,
        };
        let rows = report.rows("dev", "baseline", 7);
        let mut buf = Vec::new();
        write_scores(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("metric,split,config_id,seed,value\n"));
        assert!(text.contains("bleu4,dev,baseline,7,20.0"));
        assert_eq!(read_scores(&buf[..]).unwrap(), rows);
    }
}
