use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use jointctc::experiment::{
    format_hypotheses, parse_hypotheses, run_ablation, run_stage, score_hypotheses, ExperimentConfig,
    ExperimentError,
};
use jointctc::metrics::{write_scores, MetricsError, ScoreRow};
use jointctc::synth::{gen_corpus, read_dataset, write_dataset, Dataset, Split, SynthError, TaskSpec};
use jointctc::train::{evaluate, load_checkpoint, partial_path, save_checkpoint, write_atomically, Stage, TrainError};

#[derive(Parser)]
#[command(name = "jointctc", version, about = "Joint CTC/attention transduction experiments on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with vocab sidecars and statistics.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the task seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train from scratch (single or warm-start stage, per `[train] stage`).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics log; defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint on the original training pairs.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Decode one split with the `[decode]` settings.
    Decode {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dev", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a hypothesis file against the references of one split.
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dev", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "eval")]
        config_id: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the `[ablation]` ladder over all seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Existing corpus; generated from `[task]` when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated seeds overriding `[ablation] seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split {s:?}; expected train, dev or test"))
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        let config = match self {
            CliError::Config(_) => true,
            CliError::Experiment(e) => e.is_config(),
            CliError::Synth(e) => matches!(e, SynthError::Config(_)),
            CliError::Train(e) => matches!(e, TrainError::Config(_)),
            _ => false,
        };
        if config {
            2
        } else {
            1
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::from_toml_str(&read_text(path)?)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn scores_csv(rows: &[ScoreRow]) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_scores(&mut buf, rows)?;
    Ok(buf)
}

fn default_log(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".log.csv");
    PathBuf::from(s)
}

fn gen_data(spec: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let table: toml::Table = read_text(spec)?
        .parse()
        .map_err(|e: toml::de::Error| CliError::Config(format!("{}: {}", spec.display(), e.message())))?;
    let mut task = TaskSpec::from_table(table)?;
    if let Some(s) = seed {
        task.seed = s;
    }
    let data = gen_corpus(&task)?;
    let staging = partial_path(out);
    write_dataset(&staging, &task, &data)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    for entry in fs::read_dir(&staging).map_err(io_err(&staging))? {
        let entry = entry.map_err(io_err(&staging))?;
        let target = out.join(entry.file_name());
        fs::rename(entry.path(), &target).map_err(io_err(&target))?;
    }
    fs::remove_dir(&staging).map_err(io_err(&staging))
}

fn train(
    cfg: &ExperimentConfig,
    data: &Dataset,
    stage: Stage,
    init: Option<&Path>,
    out: &Path,
    log: Option<PathBuf>,
) -> Result<(), CliError> {
    let model_cfg = cfg.model_config();
    let init = init.map(load_checkpoint).transpose()?;
    let train_cfg = jointctc::train::TrainConfig {
        stage,
        ..cfg.train.clone()
    };
    let output = run_stage(&cfg.task, &model_cfg, data, &train_cfg, init.as_ref())?;
    let steps_per_epoch = output.losses.len().div_ceil(train_cfg.epochs.max(1));
    let rows = output.log_rows(stage_name(stage), train_cfg.seed, steps_per_epoch);
    save_checkpoint(&output.best, out)?;
    let log = log.unwrap_or_else(|| default_log(out));
    Ok(write_atomically(&log, &scores_csv(&rows)?)?)
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Single => "single",
        Stage::Warmstart => "warmstart",
        Stage::Finetune => "finetune",
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { spec, out, seed } => gen_data(&spec, &out, seed),
        Command::Train {
            config,
            data,
            out,
            seed,
            log,
        } => {
            let cfg = load_config(&config, seed)?;
            if cfg.train.stage == Stage::Finetune {
                return Err(CliError::Config("[train] stage = \"finetune\" requires the finetune command".into()));
            }
            train(&cfg, &read_dataset(&data)?, cfg.train.stage, None, &out, log)
        }
        Command::Finetune {
            config,
            data,
            init,
            out,
            seed,
            log,
        } => {
            let cfg = load_config(&config, seed)?;
            train(&cfg, &read_dataset(&data)?, Stage::Finetune, Some(&init), &out, log)
        }
        Command::Decode {
            config,
            checkpoint,
            data,
            split,
            out,
        } => {
            let cfg = load_config(&config, None)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let data = read_dataset(&data)?;
            let eval = evaluate(&ckpt.model(), &data.split(split).samples, &cfg.decode)?;
            Ok(write_atomically(&out, format_hypotheses(&eval.hypotheses).as_bytes())?)
        }
        Command::Eval {
            hyp,
            data,
            split,
            out,
            config_id,
            seed,
        } => {
            let hyps = parse_hypotheses(&read_text(&hyp)?)?;
            let data = read_dataset(&data)?;
            let report = score_hypotheses(&data.split(split).samples, &hyps)?;
            let rows = report.rows(split.name(), &config_id, seed);
            Ok(write_atomically(&out, &scores_csv(&rows)?)?)
        }
        Command::Ablate {
            config,
            out,
            data,
            seeds,
        } => {
            let mut cfg = load_config(&config, None)?;
            if let Some(s) = seeds {
                cfg.ablation.seeds = s;
                cfg.validate()?;
            }
            let data = match data {
                Some(dir) => read_dataset(&dir)?,
                None => gen_corpus(&cfg.task)?,
            };
            let partial = partial_path(&out);
            let mut done: Vec<ScoreRow> = Vec::new();
            let mut write_err = None;
            let outcome = run_ablation(&cfg, &data, &mut |cell| {
                eprintln!("{} seed {}: B@4 {:.2}", cell.rung, cell.seed, cell.report.b4());
                let single = jointctc::experiment::AblationOutcome {
                    split: cfg.ablation.split,
                    cells: vec![cell.clone()],
                };
                done.extend(single.rows());
                let res = scores_csv(&done).and_then(|b| fs::write(&partial, b).map_err(io_err(&partial)));
                if let Err(e) = res {
                    write_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = write_err {
                return Err(e);
            }
            Ok(write_atomically(&out, &scores_csv(&outcome.rows())?)?)
        }
    }
}

fn error_line(kind: &str, code: u8, message: &str) -> String {
    serde_json::json!({ "error": kind, "exit_code": code, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", error_line("config", 2, first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("{}", error_line(if code == 2 { "config" } else { "runtime" }, code, &e.to_string()));
            ExitCode::from(code)
        }
    }
}
