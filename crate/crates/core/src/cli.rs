//! Command-line front end: argument parsing, run directories and the five
//! commands.

use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgAction, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{Overrides, RunConfig, SweepAxis};
use crate::data::{load_ucr_tsv_raw, make_shifted_variant, make_synthetic_clusters, write_ucr};
use crate::encoder::{count_parameters, Encoder, HeadKind};
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::norm::NormMode;
use crate::rng::{self, RngState};
use crate::train::{
    evaluate, finetune, predict, AdamW, Checkpoint, EpochLog, Metrics, Pretrainer, StepLog, TrainState,
};

#[derive(Debug, Parser)]
#[command(name = "protonorm", version, about = "Prototype-gated normalization for time-series encoders")]
pub struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true, env = "PROTONORM_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "PROTONORM_SEED")]
    pub seed: Option<u64>,
    /// Parent directory of run directories.
    #[arg(long, global = true, env = "PROTONORM_OUT", default_value = "runs")]
    pub out: PathBuf,
    /// proto, dataset or plain.
    #[arg(long, global = true, env = "PROTONORM_NORM_MODE")]
    pub norm_mode: Option<NormMode>,
    #[arg(long, global = true, env = "PROTONORM_PROTOTYPES")]
    pub prototypes: Option<usize>,
    /// Orthogonality weight.
    #[arg(long, global = true, env = "PROTONORM_LAMBDA")]
    pub lambda: Option<f64>,
    #[arg(long, global = true, env = "PROTONORM_FREEZE_PROTOTYPES", action = ArgAction::Set)]
    pub freeze_prototypes: Option<bool>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic datasets and noisy variants in UCR text format.
    Generate,
    /// Contrastive pretraining over the pool.
    Pretrain {
        /// Continue from a pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune a pretrained checkpoint on the labeled split.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a fine-tuned model on the test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Pretrain and fine-tune once per value of one setting.
    Sweep {
        /// Replaces `sweep.axis` from the file.
        #[arg(long)]
        axis: Option<SweepAxis>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Sweep { .. } => "sweep",
        }
    }
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            norm_mode: self.norm_mode,
            n_prototypes: self.prototypes,
            lambda: self.lambda,
            freeze_prototypes: self.freeze_prototypes,
        }
    }

    /// File values, then environment and flags, then validation.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(&self.overrides());
        if let Command::Sweep { axis: Some(a) } = self.command {
            cfg.sweep.axis = a;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses the process arguments, runs the command and returns the exit code:
/// 0 on success, 2 for configuration errors, 1 otherwise.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config(_)) {
                2
            } else {
                1
            }
        }
    }
}

/// Runs `cli.command` and returns its run directory.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let cfg = cli.resolve()?;
    let extra = match &cli.command {
        Command::Finetune { checkpoint: p } | Command::Eval { model: p } => file_digest(p)?,
        Command::Pretrain { resume: Some(p) } => file_digest(p)?,
        _ => String::new(),
    };
    let mut run = RunDir::create(&cli.out, cli.command.name(), &cfg, &extra)?;
    let result = match &cli.command {
        Command::Generate => cmd_generate(&cfg, &mut run),
        Command::Pretrain { resume } => cmd_pretrain(&cfg, resume.as_deref(), &mut run),
        Command::Finetune { checkpoint } => cmd_finetune(&cfg, checkpoint, &mut run),
        Command::Eval { model } => cmd_eval(&cfg, model, &mut run),
        Command::Sweep { .. } => cmd_sweep(&cfg, &mut run),
    };
    run.finish(result.as_ref().err())?;
    result.map(|_| run.path)
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct Status<'a> {
    command: &'a str,
    state: &'a str,
    seed: u64,
    config_digest: &'a str,
    error: Option<String>,
    outputs: &'a [String],
    runtime_s: f64,
}

/// `{out}/{command}-{digest12}-s{seed}` holding `config.toml`, `status.json`
/// and the command's outputs.
pub struct RunDir {
    pub path: PathBuf,
    command: &'static str,
    seed: u64,
    digest: String,
    outputs: Vec<String>,
    started: Instant,
}

impl RunDir {
    pub fn create(out: &Path, command: &'static str, cfg: &RunConfig, extra: &str) -> Result<Self> {
        let text = cfg.to_toml();
        let digest = hex(&Sha256::digest(format!("{text}\n{extra}").as_bytes()));
        let path = out.join(format!("{command}-{}-s{}", &digest[..12], cfg.seed));
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        let conf = path.join("config.toml");
        fs::write(&conf, text).map_err(|e| Error::io(&conf, e))?;
        let run = RunDir {
            path,
            command,
            seed: cfg.seed,
            digest,
            outputs: Vec::new(),
            started: Instant::now(),
        };
        run.write_status("running", None)?;
        Ok(run)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Records `name` as an output written so far.
    pub fn produced(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    fn write_status(&self, state: &str, error: Option<String>) -> Result<()> {
        let status = Status {
            command: self.command,
            state,
            seed: self.seed,
            config_digest: &self.digest,
            error,
            outputs: &self.outputs,
            runtime_s: self.started.elapsed().as_secs_f64(),
        };
        write_json(&self.file("status.json"), &status)
    }

    fn finish(&self, error: Option<&Error>) -> Result<()> {
        match error {
            None => self.write_status("complete", None),
            Some(e) => self.write_status("failed", Some(e.to_string())),
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("json value");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_generate(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let (mut written, source) = if cfg.data.pool.is_empty() {
        let sets = make_synthetic_clusters(&cfg.data.synthetic, cfg.seed)?;
        let source = sets[0].clone();
        (sets.into_iter().map(|ds| (ds, None)).collect::<Vec<_>>(), source)
    } else {
        (Vec::new(), load_ucr_tsv_raw(&cfg.data.pool[0])?)
    };
    let base = written.len().max(1);
    for (i, &sigma) in cfg.generate.sigmas.iter().enumerate() {
        let mut r = rng::stream(cfg.seed, &format!("generate.{i}"));
        written.push((make_shifted_variant(&source, sigma, base + i, &mut r)?, Some(sigma)));
    }
    let mut manifest = Vec::new();
    for (ds, sigma) in &written {
        let name = format!("{}.tsv", ds.name);
        write_ucr(ds, run.file(&name))?;
        run.produced(&name);
        manifest.push(json!({
            "name": ds.name,
            "file": name,
            "dataset_id": ds.dataset_id,
            "sigma": sigma,
            "n_samples": ds.len(),
            "source": sigma.map(|_| &source.name),
        }));
    }
    write_json(&run.file("manifest.json"), &manifest)?;
    run.produced("manifest.json");
    Ok(())
}

/// Appends trace rows to a CSV file, flushing each one so a failed run
/// keeps every finished step.
struct TraceWriter(BufWriter<File>);

impl TraceWriter {
    /// Starts `path`, keeping rows of an earlier run below `keep_before`.
    fn open(path: &Path, keep_before: Option<u64>) -> Result<Self> {
        let earlier = match keep_before {
            Some(limit) => fs::read_to_string(path)
                .unwrap_or_default()
                .lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < limit))
                .map(str::to_string)
                .collect(),
            None => Vec::new(),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = TraceWriter(BufWriter::new(file));
        w.line(path, StepLog::CSV_HEADER)?;
        for l in earlier {
            w.line(path, &l)?;
        }
        Ok(w)
    }

    fn line(&mut self, path: &Path, line: &str) -> Result<()> {
        writeln!(self.0, "{line}")
            .and_then(|_| self.0.flush())
            .map_err(|e| Error::io(path, e))
    }
}

fn cmd_pretrain(cfg: &RunConfig, resume: Option<&Path>, run: &mut RunDir) -> Result<()> {
    let exp = cfg.resolve_data()?;
    let text = cfg.to_toml();
    let mut p = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.encoder.config() != &cfg.encoder {
                return Err(Error::Config(format!(
                    "encoder: {} was written with a different encoder configuration",
                    path.display()
                )));
            }
            Pretrainer::resume(ckpt, &exp.pool, cfg.pretrain.clone(), cfg.seed)?
        }
        None => Pretrainer::new(Encoder::new(cfg.encoder.clone(), cfg.seed)?, &exp.pool, cfg.pretrain.clone(), cfg.seed)?,
    };
    let trace_path = run.file("trace.csv");
    let mut trace = TraceWriter::open(&trace_path, resume.map(|_| p.state.step))?;
    run.produced("trace.csv");
    let started = Instant::now();
    let mut last: Option<StepLog> = None;
    loop {
        let epoch = p.state.epoch;
        match p.step() {
            Ok(Some(row)) => {
                trace.line(&trace_path, &row.csv_row())?;
                last = Some(row);
            }
            Ok(None) => break,
            Err(e) => {
                if matches!(e, Error::Divergence { .. }) {
                    p.checkpoint(&text).save(run.file("last-good.ckpt"))?;
                    run.produced("last-good.ckpt");
                }
                return Err(e);
            }
        }
        if p.state.epoch != epoch {
            save_epoch(&p, &text, run)?;
        }
    }
    let summary = json!({
        "steps": p.state.step,
        "epochs": p.state.epoch,
        "batches_per_epoch": p.batches_per_epoch(),
        "best_val_loss": p.state.best_val,
        "best_step": p.state.best_step,
        "final": last.map(|r| json!({
            "step": r.step,
            "loss_nt": r.loss_nt,
            "loss_orth": r.loss_orth,
            "loss_total": r.loss_total,
        })),
        "parameters": p.encoder.num_parameters(),
        "pool": exp.pool.iter().map(|d| json!({"name": d.name, "dataset_id": d.dataset_id, "n_samples": d.len()})).collect::<Vec<_>>(),
        "runtime_s": started.elapsed().as_secs_f64(),
    });
    write_json(&run.file("pretrain.json"), &summary)?;
    run.produced("pretrain.json");
    Ok(())
}

fn save_epoch(p: &Pretrainer, text: &str, run: &mut RunDir) -> Result<()> {
    let last = p.checkpoint(text);
    last.save(run.file("last.ckpt"))?;
    run.produced("last.ckpt");
    if let Some(best) = &p.best {
        let ckpt = Checkpoint {
            encoder: best.clone(),
            ..last
        };
        ckpt.save(run.file("best.ckpt"))?;
        run.produced("best.ckpt");
    }
    Ok(())
}

fn gating_histogram(model: &Encoder, hist: &[Vec<u64>]) -> serde_json::Value {
    let n_sites = hist.len();
    let per_block = if model.blocks.is_empty() { 1 } else { n_sites / model.blocks.len() };
    hist.iter()
        .enumerate()
        .map(|(i, h)| {
            json!({
                "layer": i / per_block.max(1),
                "site": format!("norm{}", i % per_block.max(1) + 1),
                "counts": h,
            })
        })
        .collect()
}

fn write_epochs(path: &Path, trace: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch,loss,val_accuracy,val_macro_f1\n");
    for r in trace {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.loss, r.val_accuracy, r.val_macro_f1));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn metrics_json(m: &Metrics, model: &Encoder, hist: &[Vec<u64>]) -> serde_json::Value {
    json!({
        "accuracy": m.accuracy,
        "macro_f1": m.macro_f1,
        "per_class_f1": m.per_class_f1,
        "confusion": m.confusion,
        "gating_histogram": gating_histogram(model, hist),
    })
}

fn cmd_finetune(cfg: &RunConfig, checkpoint: &Path, run: &mut RunDir) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.encoder.n_classes().is_some() {
        return Err(Error::Input(format!("{} already holds a classifier", checkpoint.display())));
    }
    if ckpt.encoder.config() != &cfg.encoder {
        return Err(Error::Config(format!(
            "encoder: {} was written with a different encoder configuration",
            checkpoint.display()
        )));
    }
    let exp = cfg.resolve_data()?;
    let out = finetune(&ckpt.encoder, &exp.train, &exp.test, &cfg.finetune, cfg.seed)?;
    write_epochs(&run.file("finetune_trace.csv"), &out.trace)?;
    run.produced("finetune_trace.csv");
    let model = Checkpoint {
        encoder: out.model.clone(),
        optimizer: AdamW::new(cfg.finetune.optim.clone()),
        state: TrainState::new(RngState::capture(&rng::stream(cfg.seed, "finetune")), true),
        run_config: cfg.to_toml(),
    };
    model.save(run.file("model.ckpt"))?;
    run.produced("model.ckpt");
    let (_, hist) = predict(&out.model, &exp.test, cfg.finetune.batch_size)?;
    let metrics = json!({
        "best_epoch": out.best_epoch,
        "val": out.val,
        "test": metrics_json(&out.test, &out.model, &hist),
        "n_train": exp.train.len(),
        "n_test": exp.test.len(),
        "parameters": out.model.num_parameters(),
    });
    write_json(&run.file("metrics.json"), &metrics)?;
    run.produced("metrics.json");
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, model: &Path, run: &mut RunDir) -> Result<()> {
    let ckpt = Checkpoint::load(model)?;
    let enc = ckpt.encoder;
    if enc.n_classes().is_none() {
        return Err(Error::Input(format!("{} has no classifier; run finetune first", model.display())));
    }
    let exp = cfg.resolve_data()?;
    let bs = cfg.finetune.batch_size;
    let metrics = evaluate(&enc, &exp.test, bs)?;
    let (_, hist) = predict(&enc, &exp.test, bs)?;
    let mut value = metrics_json(&metrics, &enc, &hist);
    value["n_samples"] = json!(exp.test.len());
    write_json(&run.file("metrics.json"), &value)?;
    run.produced("metrics.json");
    Ok(())
}

/// Result of one sweep setting.
pub struct Leg {
    pub metrics: Metrics,
    pub parameters: usize,
}

/// Pretrains and fine-tunes under `cfg`, checking the built parameter count
/// against the closed form.
pub fn run_leg(cfg: &RunConfig) -> Result<Leg> {
    cfg.validate()?;
    let exp = cfg.resolve_data()?;
    let mut p = Pretrainer::new(Encoder::new(cfg.encoder.clone(), cfg.seed)?, &exp.pool, cfg.pretrain.clone(), cfg.seed)?;
    p.run()?;
    let encoder = p.best.take().unwrap_or(p.encoder);
    let out = finetune(&encoder, &exp.train, &exp.test, &cfg.finetune, cfg.seed)?;
    let parameters = out.model.num_parameters();
    let k = out.model.n_classes().expect("fine-tuned model has a classifier");
    let closed = count_parameters(&cfg.encoder, HeadKind::Classifier(k));
    if parameters != closed {
        return Err(Error::Contract(format!(
            "built model has {parameters} parameters, closed form gives {closed}"
        )));
    }
    Ok(Leg {
        metrics: out.test,
        parameters,
    })
}

fn leg_config(cfg: &RunConfig, axis: SweepAxis, value: f64) -> RunConfig {
    let mut leg = cfg.clone();
    match axis {
        SweepAxis::NPrototypes => leg.encoder.n_prototypes = value as usize,
        SweepAxis::Sigma => leg.data.noise_sigmas = vec![value],
        SweepAxis::Lambda => leg.pretrain.loss.lambda_orth = value,
    }
    leg
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cmd_sweep(cfg: &RunConfig, run: &mut RunDir) -> Result<()> {
    let path = run.file("sweep.csv");
    let mut csv = TraceWriter(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?));
    csv.line(&path, "axis,value,status,accuracy,macro_f1,parameters,runtime_s,error")?;
    run.produced("sweep.csv");
    let axis = cfg.sweep.axis;
    for &value in &cfg.sweep.values {
        let leg = leg_config(cfg, axis, value);
        let started = Instant::now();
        let result = std::panic::catch_unwind(|| run_leg(&leg))
            .unwrap_or_else(|_| Err(Error::Contract("sweep leg panicked".into())));
        let secs = started.elapsed().as_secs_f64();
        let line = match result {
            Ok(l) => format!(
                "{axis},{value},ok,{},{},{},{secs:.3},",
                l.metrics.accuracy, l.metrics.macro_f1, l.parameters
            ),
            Err(e) => {
                eprintln!("sweep {axis}={value} failed: {e}");
                format!("{axis},{value},failed,,,,{secs:.3},{}", csv_field(&e.to_string()))
            }
        };
        csv.line(&path, &line)?;
    }
    Ok(())
}
