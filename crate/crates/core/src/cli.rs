//! The `gait` command-line front end: `synth`, `pretrain`, `finetune`, `eval`.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;

use crate::backbone::{Ablation, Backbone};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::dataset::{index_dataset, DatasetIndex, GaitSequence, Layout};
use crate::data::synth::{generate_synthetic_dataset, materialize};
use crate::error::{GaitError, Result};
use crate::eval::{build_protocol_sets, evaluate, render_report, EvalProtocol, ReportLayout};
use crate::finetune::Finetuner;
use crate::ssl::Pretrainer;

pub const RESOLVED_CONFIG: &str = "resolved.cfg";
pub const LOCK_FILE: &str = ".gait.lock";
pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const FINETUNE_CHECKPOINT: &str = "finetune.ckpt";
pub const FAILED_CHECKPOINT: &str = "failed.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
pub const FINETUNE_LOG: &str = "finetune_log.csv";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Debug, Parser)]
#[command(name = "gait", version, about = "Self-supervised gait recognition pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic silhouette dataset in the CASIA-B layout.
    Synth(CommonArgs),
    /// Self-supervised pre-training of the backbone.
    Pretrain(CommonArgs),
    /// Triplet-loss fine-tuning, optionally from a pre-trained checkpoint.
    Finetune(CommonArgs),
    /// Cross-view rank-1 evaluation of a checkpoint.
    Eval(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pre-training checkpoint to fine-tune from.
    #[arg(long)]
    from_pretrained: Option<PathBuf>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = ["full", "no_hpm", "no_mtb"])]
    ablation: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    exclude_identical_view: Option<bool>,
    /// Accepted and recorded; computation always runs on the CPU.
    #[arg(long)]
    device: Option<String>,
}

impl CommonArgs {
    /// File (or `base`) first, then flags on top.
    fn resolve(&self, base: Option<RunConfig>) -> Result<RunConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(b)) => b,
            (None, None) => RunConfig::parse("")?,
        };
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        if let Some(root) = &self.data_root {
            cfg.data.root = Some(root.clone());
        }
        if let Some(a) = &self.ablation {
            cfg.set_ablation(a.parse::<Ablation>().map_err(GaitError::Config)?);
        }
        if let Some(x) = self.exclude_identical_view {
            cfg.exclude_identical_view = x;
        }
        if let Some(d) = &self.device {
            cfg.device = d.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| GaitError::Config("--out is required".into()))
    }
}

/// Held while a command writes into its output directory.
struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| GaitError::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| GaitError::io(&path, e))?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(OutputLock { path })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let path = dir.join(RESOLVED_CONFIG);
    fs::write(&path, cfg.to_text()).map_err(|e| GaitError::io(&path, e))
}

fn data_root(cfg: &RunConfig) -> Result<&Path> {
    let root = cfg
        .data
        .root
        .as_deref()
        .ok_or_else(|| GaitError::Config("no dataset root (--data-root or data.root)".into()))?;
    if !root.is_dir() {
        return Err(GaitError::Config(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    Ok(root)
}

fn open_index(cfg: &RunConfig) -> Result<DatasetIndex> {
    let (index, warnings) = index_dataset(data_root(cfg)?, cfg.data.layout)?;
    for w in &warnings {
        warn!("{w}");
    }
    let s = index.summary();
    info!(
        "indexed {} identities, {} conditions, {} views, {} sequences",
        s.identities, s.conditions, s.views, s.sequences
    );
    Ok(index)
}

fn load_all(index: &DatasetIndex) -> Result<Vec<GaitSequence>> {
    index.sequences.par_iter().map(|d| d.load()).collect()
}

fn training_sequences(cfg: &RunConfig, fraction: f64) -> Result<Vec<GaitSequence>> {
    let index = open_index(cfg)?;
    let (train, _) = cfg.data.split(&index)?;
    let subset = index.restrict(&train).fraction(fraction, cfg.data.fraction_mode);
    load_all(&subset)
}

struct CsvLog {
    out: BufWriter<File>,
    start: Instant,
}

impl CsvLog {
    fn create(path: &Path, header: &str) -> Result<Self> {
        let f = File::create(path).map_err(|e| GaitError::io(path, e))?;
        let mut out = BufWriter::new(f);
        writeln!(out, "{header}").map_err(|e| GaitError::io(path, e))?;
        Ok(CsvLog {
            out,
            start: Instant::now(),
        })
    }

    fn row(&mut self, fields: &str) {
        let t = self.start.elapsed().as_secs_f64();
        let _ = writeln!(self.out, "{fields},{t:.3}");
    }
}

/// Saves a checkpoint next to a numeric failure before passing it on.
fn dump_on_numeric_failure(err: GaitError, dir: &Path, ck: impl FnOnce() -> Checkpoint) -> GaitError {
    if err.exit_code() == 4 {
        let path = dir.join(FAILED_CHECKPOINT);
        match ck().save(&path) {
            Ok(()) => eprintln!("numeric failure; state dumped to {}", path.display()),
            Err(e) => eprintln!("numeric failure; could not dump state: {e}"),
        }
    }
    err
}

fn cmd_synth(args: &CommonArgs) -> Result<()> {
    let cfg = args.resolve(None)?;
    let out = args.out_dir()?;
    let index = generate_synthetic_dataset(&cfg.synth)?;
    materialize(&index, &cfg.synth, out)?;
    println!(
        "wrote {} sequences of {} identities to {}",
        index.len(),
        cfg.synth.identities,
        out.display()
    );
    Ok(())
}

fn cmd_pretrain(args: &CommonArgs) -> Result<()> {
    let cfg = args.resolve(None)?;
    let out = args.out_dir()?;
    let sequences = training_sequences(&cfg, cfg.data.pretrain_fraction)?;
    let _lock = OutputLock::acquire(out)?;
    write_resolved(out, &cfg)?;
    let mut trainer = Pretrainer::new(cfg.model.clone(), cfg.pretrain.clone())?;
    let mut log = CsvLog::create(&out.join(PRETRAIN_LOG), "step,loss,y_tar_std_min,wallclock")?;
    for step in 0..cfg.pretrain.iterations {
        let stats = trainer
            .step(&sequences)
            .map_err(|e| dump_on_numeric_failure(e, out, || Checkpoint::from_pretrain(&trainer.net, &cfg, step as u64)))?;
        if step % cfg.log_every == 0 || step + 1 == cfg.pretrain.iterations {
            log.row(&format!("{step},{},{}", stats.loss, stats.target_std_min));
        }
        let done = step as u64 + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every as u64 == 0 {
            Checkpoint::from_pretrain(&trainer.net, &cfg, done).save(&out.join(format!("pretrain_{done}.ckpt")))?;
        }
    }
    let path = out.join(PRETRAIN_CHECKPOINT);
    Checkpoint::from_pretrain(&trainer.net, &cfg, cfg.pretrain.iterations as u64).save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_finetune(args: &CommonArgs) -> Result<()> {
    let cfg = args.resolve(None)?;
    let out = args.out_dir()?;
    let mut tuner = match &args.from_pretrained {
        Some(path) => {
            if !path.is_file() {
                return Err(GaitError::Config(format!("checkpoint {} not found", path.display())));
            }
            let ck = Checkpoint::load(path)?;
            let (backbone, params) = ck.backbone(&cfg.model.backbone)?;
            Finetuner::new(backbone, &params, cfg.finetune.clone())?
        }
        None => Finetuner::from_scratch(cfg.model.backbone.clone(), cfg.finetune.clone())?,
    };
    let sequences = training_sequences(&cfg, cfg.data.finetune_fraction)?;
    let _lock = OutputLock::acquire(out)?;
    write_resolved(out, &cfg)?;
    let mut log = CsvLog::create(&out.join(FINETUNE_LOG), "step,loss,active_triplets,wallclock")?;
    for step in 0..cfg.finetune.iterations {
        let o = tuner
            .train_step(&sequences)
            .map_err(|e| dump_on_numeric_failure(e, out, || Checkpoint::from_finetune(&tuner, &cfg, step as u64)))?;
        if step % cfg.log_every == 0 || step + 1 == cfg.finetune.iterations {
            log.row(&format!("{step},{},{}", o.loss, o.active));
        }
        let done = step as u64 + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every as u64 == 0 {
            Checkpoint::from_finetune(&tuner, &cfg, done).save(&out.join(format!("finetune_{done}.ckpt")))?;
        }
    }
    let path = out.join(FINETUNE_CHECKPOINT);
    Checkpoint::from_finetune(&tuner, &cfg, cfg.finetune.iterations as u64).save(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_eval(args: &CommonArgs) -> Result<()> {
    let ck_path = args
        .checkpoint
        .as_deref()
        .ok_or_else(|| GaitError::Config("--checkpoint is required".into()))?;
    if !ck_path.is_file() {
        return Err(GaitError::Config(format!("checkpoint {} not found", ck_path.display())));
    }
    let ck = Checkpoint::load(ck_path)?;
    let cfg = args.resolve(Some(ck.run_config()?))?;
    let out = args.out_dir()?;
    let params = ck.backbone_params(&cfg.model.backbone)?;
    let backbone = Backbone::new(cfg.model.backbone.clone())?;
    let index = open_index(&cfg)?;
    let (_, test) = cfg.data.split(&index)?;
    let test_index = index.restrict(&test);
    let (protocol, layout) = match cfg.data.layout {
        Layout::CasiaB => (EvalProtocol::CasiaB, ReportLayout::ViewColumns),
        Layout::OuMvlp => (EvalProtocol::OuMvlp, ReportLayout::ViewRows),
    };
    let sets = build_protocol_sets(&test_index, &backbone, &params, protocol)?;
    if !sets.warnings.is_empty() {
        warn!("{} (identity, condition) pairs missing from the probe sets", sets.warnings.len());
    }
    let matrices = evaluate(&sets, cfg.exclude_identical_view)?;
    let report = render_report(&matrices, layout)?;
    let _lock = OutputLock::acquire(out)?;
    write_resolved(out, &cfg)?;
    for (name, body) in [(REPORT_TEXT, &report.text), (REPORT_CSV, &report.csv)] {
        let path = out.join(name);
        fs::write(&path, body).map_err(|e| GaitError::io(&path, e))?;
    }
    for w in &report.warnings {
        warn!("{w}");
    }
    print!("{}", report.text);
    for m in &matrices {
        match m.mean() {
            Some(v) => println!("{} mean rank-1: {:.4}", m.condition, v),
            None => println!("{} mean rank-1: n/a (no cells)", m.condition),
        }
    }
    Ok(())
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
