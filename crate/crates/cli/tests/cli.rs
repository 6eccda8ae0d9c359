use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use tempfile::TempDir;

const TINY: &str = r#"
[task]
train_size = 16
dev_size = 6
test_size = 4

[model]
hidden = 8
heads = 2
gls_layers = 1
txt_layers = 1
dec_layers = 1
ff_dim = 8
max_positions = 64

[train]
batch_size = 8
epochs = 2

[decode]
beam_size = 3
max_len = 8

[ablation]
seeds = [1, 2]
warmstart_epochs = 1
finetune_epochs = 1
ladder = [
  { name = "baseline" },
  { name = "+both", lambda_gls = 1.0, lambda_txt = 1.0 },
  { name = "+joint", lambda_gls = 1.0, lambda_txt = 1.0, decode = "joint" },
]
"#;

fn jointctc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointctc"))
        .args(args)
        .output()
        .expect("run jointctc")
}

fn ok(args: &[&str]) -> Output {
    let out = jointctc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn error_json(out: &Output) -> serde_json::Value {
    let line = String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or_default().to_string();
    serde_json::from_str(&line).unwrap_or_else(|_| panic!("not a json error line: {line:?}"))
}

/// Writes the tiny task as a standalone spec and generates its corpus.
fn tiny_data(dir: &Path) -> (String, String) {
    let task = TINY.split("[model]").next().unwrap().replace("[task]", "");
    let spec = write(dir, "task.toml", &task);
    let cfg = write(dir, "exp.toml", TINY);
    let data = dir.join("data");
    ok(&["gen-data", "--spec", &spec, "--out", p(&data), "--seed", "3"]);
    (cfg, data.to_str().unwrap().to_string())
}

#[test]
fn gen_data_default_preset_writes_corpus_and_stats() {
    let dir = TempDir::new().unwrap();
    let spec = write(dir.path(), "a.toml", "preset = \"a\"\n");
    let start = Instant::now();
    ok(&["gen-data", "--spec", &spec, "--out", p(&dir.path().join("a")), "--seed", "5"]);
    assert!(start.elapsed().as_secs() < 30, "{:?}", start.elapsed());
    for f in ["train.tsv", "dev.tsv", "test.tsv", "gloss.vocab", "text.vocab", "stats.csv"] {
        assert!(dir.path().join("a").join(f).is_file(), "{f}");
    }
    assert!(!dir.path().join("a.partial").exists());
    let stats = fs::read_to_string(dir.path().join("a/stats.csv")).unwrap();
    assert!(stats.starts_with("split,level,sentences,vocab,words,oovs\n"));
    assert!(stats.contains("train,gloss,2000,"));
    assert!(stats.contains("dev,text,200,"));
    let train = fs::read_to_string(dir.path().join("a/train.tsv")).unwrap();
    assert_eq!(train.lines().count(), 2000);

    ok(&["gen-data", "--spec", &spec, "--out", p(&dir.path().join("b")), "--seed", "5"]);
    for f in ["train.tsv", "dev.tsv", "test.tsv", "gloss.vocab", "text.vocab", "stats.csv"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn bad_spec_exits_two_naming_the_key() {
    let dir = TempDir::new().unwrap();
    let spec = write(dir.path(), "bad.toml", "gloss_vocabb = 3\n");
    let out = jointctc(&["gen-data", "--spec", &spec, "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_json(&out);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("gloss_vocabb"), "{err}");

    let spec = write(dir.path(), "bad2.toml", "verbs = 0\n");
    let out = jointctc(&["gen-data", "--spec", &spec, "--out", p(&dir.path().join("y"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_and_runtime_failures_have_distinct_codes() {
    let dir = TempDir::new().unwrap();
    let out = jointctc(&["finetune", "--config", "x.toml", "--data", "d", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["exit_code"], 2);

    let cfg = write(dir.path(), "exp.toml", TINY);
    let missing = dir.path().join("missing");
    let out = jointctc(&["train", "--config", &cfg, "--data", p(&missing), "--out", p(&dir.path().join("m.ckpt"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "runtime");

    let bad = write(dir.path(), "bad.toml", "[train]\nepoch = 3\n");
    let out = jointctc(&["train", "--config", &bad, "--data", p(&missing), "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_json(&out)["message"].as_str().unwrap().contains("epoch"));

    let out = jointctc(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn train_finetune_decode_eval_pipeline() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let (cfg, data) = tiny_data(d);
    let ckpt = d.join("m.ckpt");
    ok(&["train", "--config", &cfg, "--data", &data, "--out", p(&ckpt), "--seed", "4"]);
    assert!(ckpt.is_file());
    assert!(!d.join("m.ckpt.partial").exists());
    let log = fs::read_to_string(d.join("m.ckpt.log.csv")).unwrap();
    assert!(log.starts_with("metric,split,config_id,seed,value\n"));
    assert!(log.contains("loss,train,single@"));
    assert!(log.contains("bleu4,dev,single@"));

    let ckpt2 = d.join("m2.ckpt");
    ok(&["train", "--config", &cfg, "--data", &data, "--out", p(&ckpt2), "--seed", "4"]);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&ckpt2).unwrap());

    let ft = d.join("ft.ckpt");
    ok(&["finetune", "--config", &cfg, "--data", &data, "--init", p(&ckpt), "--out", p(&ft)]);
    assert!(fs::read_to_string(d.join("ft.ckpt.log.csv")).unwrap().contains("finetune@0"));

    let joint0 = write(d, "joint0.toml", &TINY.replace("max_len = 8", "max_len = 8\nmode = \"joint\"\nctc_weight = 0.0"));
    let attn = write(d, "attn.toml", &TINY.replace("max_len = 8", "max_len = 8\nmode = \"attention-only\""));
    let (h1, h2) = (d.join("joint0.hyp"), d.join("attn.hyp"));
    ok(&["decode", "--config", &joint0, "--checkpoint", p(&ft), "--data", &data, "--split", "test", "--out", p(&h1)]);
    ok(&["decode", "--config", &attn, "--checkpoint", p(&ft), "--data", &data, "--split", "test", "--out", p(&h2)]);
    let hyp = fs::read_to_string(&h1).unwrap();
    assert_eq!(hyp, fs::read_to_string(&h2).unwrap());
    assert_eq!(hyp.lines().count(), 4);

    let scores = d.join("scores.csv");
    ok(&["eval", "--hyp", p(&h1), "--data", &data, "--split", "test", "--out", p(&scores), "--config-id", "ft", "--seed", "4"]);
    let csv = fs::read_to_string(&scores).unwrap();
    assert!(csv.starts_with("metric,split,config_id,seed,value\n"));
    assert!(csv.contains("bleu4,test,ft,4,"));

    // References written as hypotheses score perfectly.
    let refs: String = fs::read_to_string(Path::new(&data).join("test.tsv"))
        .unwrap()
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            format!("{}\t{}\n", f[0], f[5])
        })
        .collect();
    let ref_hyp = write(d, "refs.hyp", &refs);
    ok(&["eval", "--hyp", &ref_hyp, "--data", &data, "--split", "test", "--out", p(&scores)]);
    let csv = fs::read_to_string(&scores).unwrap();
    assert!(csv.contains("bleu4,test,eval,0,100.0"), "{csv}");
    assert!(csv.contains("rouge_l,test,eval,0,100.0"), "{csv}");
    assert!(!csv.contains("wer"));

    let short = write(d, "short.hyp", refs.lines().next().unwrap());
    let out = jointctc(&["eval", "--hyp", &short, "--data", &data, "--split", "test", "--out", p(&scores)]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn ablate_emits_full_grid_and_is_idempotent() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let (cfg, data) = tiny_data(d);
    let (a, b) = (d.join("a.csv"), d.join("b.csv"));
    ok(&["ablate", "--config", &cfg, "--data", &data, "--out", p(&a)]);
    ok(&["ablate", "--config", &cfg, "--data", &data, "--out", p(&b)]);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert!(!d.join("a.csv.partial").exists());
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3 * 2 * 6);
    for rung in ["baseline", "+both", "+joint"] {
        for seed in [1, 2] {
            for metric in ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "wer"] {
                let prefix = format!("{metric},dev,{rung},{seed},");
                assert_eq!(rows.iter().filter(|r| r.starts_with(&prefix)).count(), 1, "{prefix}");
            }
        }
    }

    let out = jointctc(&["ablate", "--config", &cfg, "--data", &data, "--out", p(&a), "--seeds", ""]);
    assert_eq!(out.status.code(), Some(2));
}
