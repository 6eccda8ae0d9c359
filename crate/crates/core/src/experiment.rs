//! Experiment files, hypothesis files and the ablation ladder runner.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beam::{BeamError, DecodeConfig, DecodeMode};
use crate::metrics::{bleu, corpus_rouge_l, MetricsError, ScoreReport, ScoreRow};
use crate::model::{ModelConfig, ModelError, Sample};
use crate::synth::{build_warmstart_corpus, Dataset, Split, SynthError, TaskSpec};
use crate::train::{evaluate, train_stage, Checkpoint, Stage, StageOutput, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Beam(#[from] BeamError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("hypothesis file line {line}: {msg}")]
    Hypotheses { line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    /// True when the failure is caused by configuration rather than data or runtime state.
    pub fn is_config(&self) -> bool {
        match self {
            ExperimentError::Config(_) => true,
            ExperimentError::Synth(e) => matches!(e, SynthError::Config(_)),
            ExperimentError::Model(e) => matches!(e, ModelError::Config(_)),
            ExperimentError::Beam(e) => matches!(e, BeamError::Config(_)),
            ExperimentError::Train(e) => matches!(
                e,
                TrainError::Config(_) | TrainError::Model(ModelError::Config(_)) | TrainError::Beam(BeamError::Config(_))
            ),
            _ => false,
        }
    }
}

/// How a ladder rung obtains its model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Training {
    /// One stage on the original training pairs.
    Single,
    /// One stage on the augmented corpus only.
    Warmstart,
    /// Augmented corpus, then the original pairs starting from that model.
    WarmstartFinetune,
}

/// One named configuration of the ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rung {
    pub name: String,
    #[serde(default)]
    pub lambda_gls: f64,
    #[serde(default)]
    pub lambda_txt: f64,
    #[serde(default = "attention_only")]
    pub decode: DecodeMode,
    #[serde(default = "single")]
    pub training: Training,
}

fn attention_only() -> DecodeMode {
    DecodeMode::AttentionOnly
}

fn single() -> Training {
    Training::Single
}

impl Rung {
    fn new(name: &str, lambda_gls: f64, lambda_txt: f64, decode: DecodeMode, training: Training) -> Self {
        Self {
            name: name.to_string(),
            lambda_gls,
            lambda_txt,
            decode,
            training,
        }
    }
}

/// The cumulative ladder: each rung adds one component to the previous one.
pub fn default_ladder() -> Vec<Rung> {
    use DecodeMode::{AttentionOnly, Joint};
    vec![
        Rung::new("baseline", 0.0, 0.0, AttentionOnly, Training::Single),
        Rung::new("+glsctc", 1.0, 0.0, AttentionOnly, Training::Single),
        Rung::new("+glsctc+txtctc", 1.0, 1.0, AttentionOnly, Training::Single),
        Rung::new("+joint-decode", 1.0, 1.0, Joint, Training::Single),
        Rung::new("+warmstart+finetune", 1.0, 1.0, Joint, Training::WarmstartFinetune),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub split: Split,
    /// Epochs of the warm-start stage; defaults to `train.epochs`.
    pub warmstart_epochs: Option<usize>,
    /// Epochs of the fine-tuning stage; defaults to `train.epochs`.
    pub finetune_epochs: Option<usize>,
    pub ladder: Vec<Rung>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            split: Split::Dev,
            warmstart_epochs: None,
            finetune_epochs: None,
            ladder: default_ladder(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub ablation: AblationConfig,
}

fn section<T: serde::de::DeserializeOwned>(name: &str, value: toml::Value) -> Result<T, ExperimentError> {
    value
        .try_into()
        .map_err(|e: toml::de::Error| ExperimentError::Config(format!("[{name}] {}", e.message())))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ExperimentError::Config(e.message().to_string()))?;
        let mut cfg = Self::default();
        for (key, value) in table {
            match key.as_str() {
                "task" => {
                    let toml::Value::Table(t) = value else {
                        return Err(ExperimentError::Config("[task] must be a table".into()));
                    };
                    cfg.task = TaskSpec::from_table(t).map_err(|e| ExperimentError::Config(format!("[task] {e}")))?;
                }
                "model" => cfg.model = section(&key, value)?,
                "train" => cfg.train = section(&key, value)?,
                "decode" => cfg.decode = section(&key, value)?,
                "ablation" => cfg.ablation = section(&key, value)?,
                other => return Err(ExperimentError::Config(format!("unknown section [{other}]"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.task.validate()?;
        self.model_config().validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        let ab = &self.ablation;
        if ab.seeds.is_empty() {
            return Err(ExperimentError::Config("[ablation] seeds is empty".into()));
        }
        if ab.ladder.is_empty() {
            return Err(ExperimentError::Config("[ablation] ladder is empty".into()));
        }
        if ab.warmstart_epochs == Some(0) || ab.finetune_epochs == Some(0) {
            return Err(ExperimentError::Config("[ablation] stage epochs must be positive".into()));
        }
        let mut names = HashSet::new();
        for rung in &ab.ladder {
            if !names.insert(rung.name.as_str()) {
                return Err(ExperimentError::Config(format!("[ablation] duplicate rung {:?}", rung.name)));
            }
            let cfg = self.rung_model_config(rung);
            cfg.validate()
                .map_err(|e| ExperimentError::Config(format!("[ablation] rung {:?}: {e}", rung.name)))?;
            if rung.decode == DecodeMode::Joint && !(rung.lambda_txt > 0.0) {
                return Err(ExperimentError::Config(format!(
                    "[ablation] rung {:?} decodes jointly without a text CTC loss",
                    rung.name
                )));
            }
        }
        Ok(())
    }

    /// `[model]` with vocabularies and input width taken from `[task]`.
    pub fn model_config(&self) -> ModelConfig {
        self.task.configure(&self.model)
    }

    pub fn rung_model_config(&self, rung: &Rung) -> ModelConfig {
        ModelConfig {
            lambda_gls: rung.lambda_gls,
            lambda_txt: rung.lambda_txt,
            ..self.model_config()
        }
    }

    pub fn rung_decode(&self, rung: &Rung) -> DecodeConfig {
        DecodeConfig {
            mode: rung.decode,
            ..self.decode.clone()
        }
    }

    /// `[train]` specialised to one stage and seed.
    pub fn stage_train_config(&self, stage: Stage, seed: u64) -> TrainConfig {
        let epochs = match stage {
            Stage::Single => self.train.epochs,
            Stage::Warmstart => self.ablation.warmstart_epochs.unwrap_or(self.train.epochs),
            Stage::Finetune => self.ablation.finetune_epochs.unwrap_or(self.train.epochs),
        };
        TrainConfig {
            epochs,
            seed,
            stage,
            ..self.train.clone()
        }
    }
}

/// Runs one stage: warm-start trains on the augmented corpus, the others on
/// the original training split. Model selection always uses the dev split.
pub fn run_stage(
    task: &TaskSpec,
    model_cfg: &ModelConfig,
    data: &Dataset,
    train_cfg: &TrainConfig,
    init: Option<&Checkpoint>,
) -> Result<StageOutput, ExperimentError> {
    if train_cfg.stage == Stage::Finetune && init.is_none() {
        return Err(ExperimentError::Config("fine-tuning requires an initial checkpoint".into()));
    }
    let augmented;
    let train: &[Sample] = if train_cfg.stage == Stage::Warmstart {
        augmented = build_warmstart_corpus(&data.train, task)?;
        &augmented.samples
    } else {
        &data.train.samples
    };
    Ok(train_stage(model_cfg, train, &data.dev.samples, train_cfg, init)?)
}

/// Result of one (rung, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub rung: String,
    pub seed: u64,
    pub report: ScoreReport,
    pub hypotheses: Vec<(u64, Vec<usize>)>,
    pub checkpoint_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutcome {
    pub split: Split,
    /// Cells in ladder order, seeds inner.
    pub cells: Vec<Cell>,
}

/// Metrics of every ablation cell; WER is NaN when the rung has no gloss CTC loss.
pub const ABLATION_METRICS: [&str; 6] = ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "wer"];

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

impl AblationOutcome {
    /// One row per (rung, seed, metric).
    pub fn rows(&self) -> Vec<ScoreRow> {
        let mut rows = Vec::with_capacity(self.cells.len() * ABLATION_METRICS.len());
        for c in &self.cells {
            let r = &c.report;
            let values = [r.bleu[0], r.bleu[1], r.bleu[2], r.bleu[3], r.rouge_l, r.wer.unwrap_or(f64::NAN)];
            for (metric, value) in ABLATION_METRICS.iter().zip(values) {
                rows.push(ScoreRow {
                    metric: metric.to_string(),
                    split: self.split.name().to_string(),
                    config_id: c.rung.clone(),
                    seed: c.seed,
                    value,
                });
            }
        }
        rows
    }

    pub fn b4(&self, rung: &str, seed: u64) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.rung == rung && c.seed == seed)
            .map(|c| c.report.b4())
    }

    pub fn median_b4(&self, rung: &str) -> Option<f64> {
        let mut v: Vec<f64> = self.cells.iter().filter(|c| c.rung == rung).map(|c| c.report.b4()).collect();
        median(&mut v)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct TrainingKey {
    lambda_gls: u64,
    lambda_txt: u64,
    stage: Stage,
    seed: u64,
}

/// Trains and evaluates every rung for every seed. Rungs that differ only in
/// decoding share one training run, and fine-tuning reuses the warm-start run.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    data: &Dataset,
    progress: &mut dyn FnMut(&Cell),
) -> Result<AblationOutcome, ExperimentError> {
    cfg.validate()?;
    let split = cfg.ablation.split;
    let eval_samples = &data.split(split).samples;
    let mut cache: HashMap<TrainingKey, Checkpoint> = HashMap::new();
    let mut cells = Vec::new();
    for rung in &cfg.ablation.ladder {
        let model_cfg = cfg.rung_model_config(rung);
        for &seed in &cfg.ablation.seeds {
            let key = |stage| TrainingKey {
                lambda_gls: rung.lambda_gls.to_bits(),
                lambda_txt: rung.lambda_txt.to_bits(),
                stage,
                seed,
            };
            let mut train = |stage: Stage, init: Option<&Checkpoint>| -> Result<Checkpoint, ExperimentError> {
                if let Some(c) = cache.get(&key(stage)) {
                    return Ok(c.clone());
                }
                let out = run_stage(&cfg.task, &model_cfg, data, &cfg.stage_train_config(stage, seed), init)?;
                cache.insert(key(stage), out.best.clone());
                Ok(out.best)
            };
            let ckpt = match rung.training {
                Training::Single => train(Stage::Single, None)?,
                Training::Warmstart => train(Stage::Warmstart, None)?,
                Training::WarmstartFinetune => {
                    let warm = train(Stage::Warmstart, None)?;
                    train(Stage::Finetune, Some(&warm))?
                }
            };
            let model = ckpt.model();
            let mut eval = evaluate(&model, eval_samples, &cfg.rung_decode(rung))?;
            if !(rung.lambda_gls > 0.0) {
                eval.report.wer = None;
            }
            let cell = Cell {
                rung: rung.name.clone(),
                seed,
                report: eval.report,
                hypotheses: eval.hypotheses,
                checkpoint_hash: ckpt.content_hash(),
            };
            progress(&cell);
            cells.push(cell);
        }
    }
    Ok(AblationOutcome { split, cells })
}

/// One line per sample: `id<TAB>space-separated token ids`.
pub fn format_hypotheses(hyps: &[(u64, Vec<usize>)]) -> String {
    let mut out = String::new();
    for (id, tokens) in hyps {
        let ids: Vec<String> = tokens.iter().map(usize::to_string).collect();
        writeln!(out, "{id}\t{}", ids.join(" ")).expect("write to string");
    }
    out
}

pub fn parse_hypotheses(text: &str) -> Result<Vec<(u64, Vec<usize>)>, ExperimentError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| ExperimentError::Hypotheses { line: n + 1, msg };
        let (id, tokens) = line.split_once('\t').ok_or_else(|| err("missing tab".into()))?;
        let id: u64 = id.parse().map_err(|_| err(format!("bad id {id:?}")))?;
        if !seen.insert(id) {
            return Err(err(format!("duplicate id {id}")));
        }
        let tokens = tokens
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| err(format!("bad token id {t:?}"))))
            .collect::<Result<Vec<usize>, _>>()?;
        out.push((id, tokens));
    }
    Ok(out)
}

/// Text metrics of `hyps` against the references in `samples`, matched by id.
pub fn score_hypotheses(samples: &[Sample], hyps: &[(u64, Vec<usize>)]) -> Result<ScoreReport, ExperimentError> {
    let by_id: BTreeMap<u64, &Vec<usize>> = hyps.iter().map(|(id, t)| (*id, t)).collect();
    if by_id.len() != samples.len() {
        return Err(ExperimentError::Config(format!(
            "{} hypotheses for {} references",
            by_id.len(),
            samples.len()
        )));
    }
    let mut refs = Vec::with_capacity(samples.len());
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let h = by_id
            .get(&s.id)
            .ok_or_else(|| ExperimentError::Config(format!("no hypothesis for sample {}", s.id)))?;
        refs.push(s.text.clone());
        out.push((*h).clone());
    }
    Ok(ScoreReport {
        bleu: bleu(&refs, &out)?,
        rouge_l: corpus_rouge_l(&refs, &out)?,
        wer: None,
        sentences: samples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gen_corpus;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.ablation.ladder.len(), 5);
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.decode.beam_size, 5);
    }

    #[test]
    fn sections_override_fields() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            [task]
            preset = "b"
            noise = 0.5
            [model]
            hidden = 32
            heads = 2
            [train]
            batch_size = 16
            [decode]
            ctc_weight = 0.5
            mode = "attention-only"
            [ablation]
            seeds = [7]
            ladder = [{ name = "base" }, { name = "joint", lambda_txt = 1.0, decode = "joint" }]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.task.gloss_vocab, 40);
        assert_eq!(cfg.task.noise, 0.5);
        assert_eq!(cfg.model.hidden, 32);
        assert_eq!(cfg.model_config().text_vocab, cfg.task.text_vocab());
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.decode.ctc_weight, 0.5);
        assert_eq!(cfg.ablation.ladder[0].decode, DecodeMode::AttentionOnly);
        assert_eq!(cfg.ablation.ladder[1].training, Training::Single);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        for (text, needle) in [
            ("[model]\nhiden = 3", "hiden"),
            ("[task]\nnoize = 1.0", "noize"),
            ("[train]\nlr = 1.0", "lr"),
            ("[decode]\nbeam = 2", "beam"),
            ("[ablation]\nseed = [1]", "seed"),
            ("[ablation]\nladder = [{ name = \"x\", weight = 1 }]", "weight"),
            ("[optim]\nx = 1", "optim"),
        ] {
            let err = ExperimentConfig::from_toml_str(text).unwrap_err();
            assert!(err.is_config(), "{text}");
            assert!(err.to_string().contains(needle), "{err}");
        }
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        for text in [
            "[model]\nhidden = 30\nheads = 4",
            "[ablation]\nseeds = []",
            "[ablation]\nladder = [{ name = \"a\" }, { name = \"a\" }]",
            "[ablation]\nladder = [{ name = \"j\", decode = \"joint\" }]",
            "[train]\nbatch_size = 0",
            "[decode]\nbeam_size = 0",
        ] {
            let err = ExperimentConfig::from_toml_str(text).unwrap_err();
            assert!(err.is_config(), "{text}: {err}");
        }
    }

    #[test]
    fn hypothesis_file_round_trip() {
        let hyps = vec![(3, vec![1, 2, 3]), (10, vec![]), (4, vec![0])];
        let text = format_hypotheses(&hyps);
        assert_eq!(text, "3\t1 2 3\n10\t\n4\t0\n");
        assert_eq!(parse_hypotheses(&text).unwrap(), hyps);
        assert!(parse_hypotheses("1\t2\n1\t3\n").is_err());
        assert!(parse_hypotheses("1 2\n").is_err());
        assert!(parse_hypotheses("1\tx\n").is_err());
    }

    #[test]
    fn reference_hypotheses_score_perfectly() {
        let spec = TaskSpec {
            train_size: 2,
            dev_size: 5,
            test_size: 1,
            ..TaskSpec::default()
        };
        let data = gen_corpus(&spec).unwrap();
        let hyps: Vec<_> = data.dev.samples.iter().rev().map(|s| (s.id, s.text.clone())).collect();
        let report = score_hypotheses(&data.dev.samples, &hyps).unwrap();
        assert!((report.b4() - 100.0).abs() < 1e-9);
        assert!((report.rouge_l - 100.0).abs() < 1e-9);
        assert!(score_hypotheses(&data.dev.samples, &hyps[1..]).is_err());
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn tiny_ladder_shares_training_and_emits_full_grid() {
        let text = r#"
            [task]
            train_size = 12
            dev_size = 4
            test_size = 1
            [model]
            hidden = 8
            heads = 2
            gls_layers = 1
            dec_layers = 1
            ff_dim = 8
            max_positions = 64
            [train]
            batch_size = 6
            epochs = 1
            [decode]
            beam_size = 2
            max_len = 6
            [ablation]
            seeds = [1, 2]
            finetune_epochs = 1
            warmstart_epochs = 1
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        let data = gen_corpus(&cfg.task).unwrap();
        let mut seen = 0;
        let out = run_ablation(&cfg, &data, &mut |_| seen += 1).unwrap();
        assert_eq!(seen, 10);
        let rows = out.rows();
        assert_eq!(rows.len(), 5 * 2 * ABLATION_METRICS.len());
        let both = |seed| out.cells.iter().find(|c| c.rung == "+glsctc+txtctc" && c.seed == seed).unwrap();
        let joint = |seed| out.cells.iter().find(|c| c.rung == "+joint-decode" && c.seed == seed).unwrap();
        assert_eq!(both(1).checkpoint_hash, joint(1).checkpoint_hash);
        assert_ne!(both(1).checkpoint_hash, both(2).checkpoint_hash);
        assert!(out.cells.iter().find(|c| c.rung == "baseline").unwrap().report.wer.is_none());
        assert!(out.median_b4("baseline").is_some());
    }
}
