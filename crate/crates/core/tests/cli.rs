use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use protonorm::config::RunConfig;
use protonorm::encoder::{count_parameters, EncoderConfig, HeadKind};
use protonorm::norm::NormMode;
use protonorm::train::{evaluate, Checkpoint};
use tempfile::TempDir;

const TINY: &str = r#"
seed = 3

[encoder]
d_model = 16
n_heads = 2
n_layers = 1
n_prototypes = 2

[data.synthetic]
n_per_dataset = 24

[pretrain]
epochs = 1
batch_size = 8

[finetune]
epochs = 2
batch_size = 8
"#;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_protonorm"));
    for (k, _) in std::env::vars() {
        if k.starts_with("PROTONORM_") {
            cmd.env_remove(k);
        }
    }
    cmd
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, format!("{TINY}\n{extra}")).unwrap();
    path
}

fn run(cmd: &mut Command) -> (Output, PathBuf) {
    let out = cmd.output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).trim().to_string();
    (out, PathBuf::from(stdout))
}

fn ok(cmd: &mut Command) -> PathBuf {
    let (out, dir) = run(cmd);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    dir
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn flag_beats_env_beats_file() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("runs");
    let base = || {
        let mut c = bin();
        c.arg("--config").arg(&cfg).arg("--out").arg(&out);
        c
    };
    let file = ok(base().arg("generate"));
    assert!(file.to_string_lossy().ends_with("-s3"), "{}", file.display());
    let env = ok(base().env("PROTONORM_SEED", "5").arg("generate"));
    assert!(env.to_string_lossy().ends_with("-s5"));
    let flag = ok(base().env("PROTONORM_SEED", "5").args(["--seed", "7", "generate"]));
    assert!(flag.to_string_lossy().ends_with("-s7"));

    let dir = ok(base()
        .env("PROTONORM_NORM_MODE", "dataset")
        .env("PROTONORM_LAMBDA", "0.5")
        .args(["--norm-mode", "plain", "generate"]));
    let resolved = RunConfig::load(dir.join("config.toml")).unwrap();
    assert_eq!(resolved.encoder.norm_mode, NormMode::Plain);
    assert_eq!(resolved.pretrain.loss.lambda_orth, 0.5);
}

#[test]
fn norm_mode_flag_changes_only_the_mode() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("runs");
    let proto = ok(bin().arg("--config").arg(&cfg).arg("--out").arg(&out).arg("generate"));
    let plain = ok(bin()
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--norm-mode", "plain-ln", "generate"]));
    assert_ne!(proto, plain);
    let a = fs::read_to_string(proto.join("config.toml")).unwrap();
    let b = fs::read_to_string(plain.join("config.toml")).unwrap();
    let diff: Vec<_> = a.lines().zip(b.lines()).filter(|(x, y)| x != y).collect();
    assert_eq!(diff, vec![("norm_mode = \"proto\"", "norm_mode = \"plain\"")]);
}

#[test]
fn invalid_config_exits_2_with_field_message() {
    let tmp = TempDir::new().unwrap();
    for (extra, needle) in [
        ("[augment]\nx = 1\n", "augment"),
        ("[encoder.extra]\n", "extra"),
    ] {
        let path = tmp.path().join("bad.toml");
        fs::write(&path, format!("{extra}{TINY}")).unwrap();
        let (out, _) = run(bin().arg("--config").arg(&path).arg("--out").arg(tmp.path()).arg("pretrain"));
        let err = String::from_utf8_lossy(&out.stderr);
        assert_eq!(out.status.code(), Some(2), "{err}");
        assert!(err.contains(needle), "{err}");
    }
    let cfg = write_config(tmp.path(), "");
    let (out, _) = run(bin()
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path())
        .args(["--prototypes", "64", "pretrain"]));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(2));
    assert!(err.contains("encoder: n_prototypes 64 exceeds d_model 16"), "{err}");
    assert!(!tmp.path().read_dir().unwrap().any(|e| e.unwrap().file_name().to_string_lossy().starts_with("pretrain-")));
}

#[test]
fn generate_is_deterministic_and_zero_noise_is_identity() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[generate]\nsigmas = [0.0, 0.3]\n");
    let a = ok(bin().arg("--config").arg(&cfg).arg("--out").arg(tmp.path().join("a")).arg("generate"));
    let b = ok(bin().arg("--config").arg(&cfg).arg("--out").arg(tmp.path().join("b")).arg("generate"));
    let manifest = json(&a.join("manifest.json"));
    let files: Vec<String> = manifest
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["file"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(files.len(), 4);
    for f in &files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let source = fs::read(a.join("synthetic-0.tsv")).unwrap();
    assert_eq!(fs::read(a.join("synthetic-0-sigma0.tsv")).unwrap(), source);
    assert_ne!(fs::read(a.join("synthetic-0-sigma0.3.tsv")).unwrap(), source);
    assert_eq!(manifest[3]["sigma"], 0.3);
    assert_eq!(manifest[3]["dataset_id"], 3);
}

#[test]
fn pipeline_outputs_replay_and_eval_matches_library() {
    let tmp = TempDir::new().unwrap();
    let cfg_path = write_config(tmp.path(), "");
    let out = tmp.path().join("runs");
    let cmd = || {
        let mut c = bin();
        c.arg("--config").arg(&cfg_path).arg("--out").arg(&out);
        c
    };
    let pre = ok(cmd().arg("pretrain"));
    let status = json(&pre.join("status.json"));
    assert_eq!(status["state"], "complete");
    for f in ["trace.csv", "last.ckpt", "best.ckpt", "pretrain.json", "config.toml"] {
        assert!(pre.join(f).exists(), "{f}");
    }

    let replay = ok(bin()
        .arg("--config")
        .arg(pre.join("config.toml"))
        .arg("--out")
        .arg(tmp.path().join("replay"))
        .arg("pretrain"));
    assert_eq!(replay.file_name(), pre.file_name());
    for f in ["trace.csv", "last.ckpt"] {
        assert_eq!(fs::read(pre.join(f)).unwrap(), fs::read(replay.join(f)).unwrap(), "{f}");
    }

    let fine = ok(cmd().arg("finetune").arg("--checkpoint").arg(pre.join("best.ckpt")));
    let metrics = json(&fine.join("metrics.json"));
    let model = Checkpoint::load(fine.join("model.ckpt")).unwrap().encoder;
    assert_eq!(metrics["parameters"], count_parameters(model.config(), HeadKind::Classifier(2)));

    let ev = ok(cmd().arg("eval").arg("--model").arg(fine.join("model.ckpt")));
    let m = json(&ev.join("metrics.json"));
    let cfg = RunConfig::load(ev.join("config.toml")).unwrap();
    let exp = cfg.resolve_data().unwrap();
    let expected = evaluate(&model, &exp.test, cfg.finetune.batch_size).unwrap();
    assert_eq!(m["accuracy"].as_f64().unwrap().to_bits(), expected.accuracy.to_bits());
    assert_eq!(m["macro_f1"].as_f64().unwrap().to_bits(), expected.macro_f1.to_bits());
    assert_eq!(m["accuracy"], metrics["test"]["accuracy"]);
    let hist = m["gating_histogram"].as_array().unwrap();
    assert_eq!(hist.len(), 2);
    for site in hist {
        let total: u64 = site["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).sum();
        assert_eq!(total as usize, exp.test.len());
    }

    let (bad, _) = run(cmd().arg("eval").arg("--model").arg(pre.join("best.ckpt")));
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn failed_run_is_flagged_in_status() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing.tsv");
    let cfg = write_config(tmp.path(), &format!("[data]\npool = [{:?}]\n", missing.to_str().unwrap()));
    let out = tmp.path().join("runs");
    let (res, _) = run(bin().arg("--config").arg(&cfg).arg("--out").arg(&out).arg("pretrain"));
    assert_eq!(res.status.code(), Some(1));
    let dir = fs::read_dir(&out).unwrap().next().unwrap().unwrap().path();
    let status = json(&dir.join("status.json"));
    assert_eq!(status["state"], "failed");
    assert!(status["error"].as_str().unwrap().contains("missing.tsv"));
}

#[test]
fn sweep_writes_one_row_per_value_and_survives_failed_legs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[sweep]\naxis = \"n_prototypes\"\nvalues = [1, 4, 32]\n");
    let dir = ok(bin().arg("--config").arg(&cfg).arg("--out").arg(tmp.path()).arg("sweep"));
    let text = fs::read_to_string(dir.join("sweep.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.splitn(8, ',').collect()).collect();
    assert_eq!(rows.len(), 3, "{text}");
    let base = EncoderConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        ..EncoderConfig::default()
    };
    for (row, n) in rows[..2].iter().zip([1, 4]) {
        assert_eq!(row[..3], ["n_prototypes", &n.to_string(), "ok"]);
        let cfg = EncoderConfig {
            n_prototypes: n,
            ..base.clone()
        };
        assert_eq!(row[5], count_parameters(&cfg, HeadKind::Classifier(2)).to_string());
    }
    assert!(rows[0][5].parse::<usize>().unwrap() < rows[1][5].parse::<usize>().unwrap());
    assert_eq!(rows[2][2], "failed");
    assert!(rows[2][7].contains("exceeds d_model"), "{}", rows[2][7]);

    let lambda = ok(bin()
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path())
        .args(["sweep", "--axis", "lambda"]));
    let text = fs::read_to_string(lambda.join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 3);
    assert!(text.lines().skip(1).all(|l| l.starts_with("lambda,") && l.contains(",ok,")), "{text}");
}
