//! Command-line surface of the `hgkd` tool. Argument parsing lives here so
//! the commands can be driven from tests without spawning a process.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::DistillConfig;
use crate::data::{Dataset, SynthConfig};
use crate::diagnostics::{erosion_profile, shift_experiment, ShiftReport, DEFAULT_BINS};
use crate::error::{io_err, Error, Result};
use crate::manifest::Manifest;
use crate::masking::generate_mask;
use crate::probe::{linear_probe, ProbeReport};
use crate::student::{ConvKind, Mode, StudentConfig, StudentModel};
use crate::teacher::{export_embeddings, ToyTeacher};
use crate::trainer::{build_teacher, load_student, Trainer};

pub const RUN_MANIFEST: &str = "run.manifest";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final";
pub const PROBE_REPORT: &str = "probe.csv";

#[derive(Debug, Parser)]
#[command(name = "hgkd", version, about = "Masked generative distillation from a transformer teacher into a sparse-CNN UNet student")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic texture dataset.
    GenData(GenDataArgs),
    /// Run distillation from a TOML config.
    Distill(DistillArgs),
    /// Probe a checkpoint's frozen backbone next to baseline backbones.
    Probe(ProbeArgs),
    /// Distribution-shift and mask-erosion diagnostics.
    Diagnose {
        #[command(subcommand)]
        kind: DiagnoseKind,
    },
    /// Precompute unmasked teacher tokens for every dataset image.
    ExportTeacher(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 2500)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    pub config: PathBuf,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    /// Extra backbone checkpoint (for example a no-distill pretrain) probed
    /// as a further arm.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Report path (default: `<checkpoint>/probe.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum DiagnoseKind {
    /// Activation distribution shift, masked vs unmasked.
    Shift(ShiftArgs),
    /// Visible fraction after stacked all-ones convolutions.
    Erosion(ErosionArgs),
}

#[derive(Debug, Args)]
pub struct ShiftArgs {
    #[arg(long, default_value_t = 0.6)]
    pub ratio: f64,
    #[arg(long, default_value_t = 200)]
    pub images: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use this checkpoint's student instead of a fresh one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Batch statistics instead of running statistics in normalization.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub batch_stats: bool,
    #[arg(long, default_value = "shift.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ErosionArgs {
    #[arg(long, default_value_t = 8)]
    pub depth: usize,
    /// Side of the indicator image.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Side of the mask grid, upsampled to `size`.
    #[arg(long, default_value_t = 8)]
    pub grid: usize,
    #[arg(long, default_value_t = 0.5)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "erosion.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    /// Dataset directory (default: `data.path` from the config).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

/// Parse `args` and run; returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a).map(|_| ()),
        Command::Distill(a) => cmd_distill(&a).map(|_| ()),
        Command::Probe(a) => cmd_probe(&a).map(|_| ()),
        Command::Diagnose { kind: DiagnoseKind::Shift(a) } => cmd_shift(&a).map(|_| ()),
        Command::Diagnose { kind: DiagnoseKind::Erosion(a) } => cmd_erosion(&a).map(|_| ()),
        Command::ExportTeacher(a) => cmd_export_teacher(&a).map(|_| ()),
    }
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<Dataset> {
    let ds = Dataset::synthetic(&SynthConfig {
        n: a.n,
        classes: a.classes,
        image_size: a.image_size,
        val_fraction: a.val_fraction,
        seed: a.seed,
    })?;
    ds.save(&a.out_dir, a.force)?;
    println!(
        "wrote {} images ({} train, {} val) of {}x{} to {}",
        ds.len(),
        ds.train_count,
        ds.len() - ds.train_count,
        a.image_size,
        a.image_size,
        a.out_dir.display()
    );
    Ok(ds)
}

fn build_id() -> String {
    match option_env!("HGKD_BUILD_ID") {
        Some(id) => format!("{}+{}", env!("CARGO_PKG_VERSION"), id),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// Describes a run; written once before the first step and never
/// rewritten.
pub fn write_run_manifest(cfg: &DistillConfig, config_path: &Path, ds: &Dataset) -> Result<PathBuf> {
    let out = &cfg.run.out_dir;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let path = out.join(RUN_MANIFEST);
    if path.exists() {
        return Err(Error::Data(format!("{} already exists; use a fresh run.out_dir or --resume", path.display())));
    }
    fs::write(out.join("config.toml"), cfg.to_toml()).map_err(|e| io_err(out, e))?;
    let mut m = Manifest::new();
    m.set("kind", "run")
        .set("build", build_id())
        .set("config_source", config_path.display())
        .set("config_hash", format!("{:016x}", cfg.hash()))
        .set("config_snapshot", out.join("config.toml").display())
        .set("dataset_path", cfg.data.path.display())
        .set("dataset_checksum", format!("{:016x}", ds.checksum()))
        .set("metrics", out.join(METRICS_FILE).display())
        .set("final_checkpoint", out.join(FINAL_CHECKPOINT).display());
    m.write(&path)?;
    Ok(path)
}

/// Drop metric rows at or after `step` so a resumed run does not repeat
/// them.
fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let kept: Vec<&str> = text
        .lines()
        .enumerate()
        .filter(|(i, l)| *i == 0 || l.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < step))
        .map(|(_, l)| l)
        .collect();
    fs::write(path, kept.join("\n") + "\n").map_err(|e| io_err(path, e))
}

pub fn cmd_distill(a: &DistillArgs) -> Result<Trainer> {
    let cfg = DistillConfig::load(&a.config)?;
    let ds = Dataset::load(&cfg.data.path)?;
    if ds.image_size() != cfg.student.image_size {
        return Err(Error::Data(format!(
            "dataset {} has {}px images but student.image_size is {}",
            cfg.data.path.display(),
            ds.image_size(),
            cfg.student.image_size
        )));
    }
    let out = cfg.run.out_dir.clone();
    let metrics = out.join(METRICS_FILE);
    let teacher = build_teacher(&cfg)?;
    let mut trainer = match &a.resume {
        Some(dir) => {
            let t = Trainer::resume(cfg, teacher, &ds, dir)?;
            truncate_metrics(&metrics, t.step)?;
            println!("resumed at step {} from {}", t.step, dir.display());
            t
        }
        None => {
            write_run_manifest(&cfg, &a.config, &ds)?;
            if metrics.exists() {
                fs::remove_file(&metrics).map_err(|e| io_err(&metrics, e))?;
            }
            Trainer::new(cfg, teacher, &ds)?
        }
    };
    let total = trainer.total_steps();
    trainer.run(&ds, total, Some(&metrics))?;
    let fin = out.join(FINAL_CHECKPOINT);
    trainer.save_checkpoint(&fin)?;
    if let Some(last) = trainer.metrics.last() {
        println!("step {} total {:.6} (sim {:.6}, feat {:.6})", last.step, last.total, last.l_sim, last.l_feat);
    }
    println!("checkpoint written to {}", fin.display());
    Ok(trainer)
}

pub fn cmd_probe(a: &ProbeArgs) -> Result<Vec<(String, ProbeReport)>> {
    let (cfg, student) = load_student(&a.checkpoint)?;
    let ds = Dataset::load(&a.dataset)?;
    if ds.image_size() != cfg.student.image_size {
        return Err(Error::Data(format!(
            "checkpoint expects {}px images, dataset {} has {}px",
            cfg.student.image_size,
            a.dataset.display(),
            ds.image_size()
        )));
    }
    let mut arms = vec![("distilled".to_string(), student.to_dense_model())];
    arms.push(("random_init".to_string(), StudentModel::new(cfg.student.clone())?.to_dense_model()));
    if let Some(b) = &a.baseline {
        let (bcfg, bs) = load_student(b)?;
        if bcfg.student.image_size != cfg.student.image_size {
            return Err(Error::Data(format!("baseline {} uses a different image size", b.display())));
        }
        arms.push(("baseline".to_string(), bs.to_dense_model()));
    }
    let mut text = String::from("arm,train_accuracy,val_accuracy\n");
    let mut reports = Vec::new();
    println!("{:<12} {:>10} {:>10}", "arm", "train", "val");
    for (name, model) in &arms {
        let r = linear_probe(model, &ds, &cfg.probe)?;
        println!("{:<12} {:>10.4} {:>10.4}", name, r.train_accuracy, r.val_accuracy);
        let _ = writeln!(text, "{},{},{}", name, r.train_accuracy, r.val_accuracy);
        reports.push((name.clone(), r));
    }
    let out = a.out.clone().unwrap_or_else(|| a.checkpoint.join(PROBE_REPORT));
    fs::write(&out, text).map_err(|e| io_err(&out, e))?;
    Ok(reports)
}

fn shift_csv(r: &ShiftReport) -> String {
    let mut s = String::from("arm,bin,lo,hi,masked,unmasked\n");
    for (arm, (m, u)) in [("sparse", &r.sparse_hist), ("dense", &r.dense_hist)] {
        for i in 0..m.probs.len() {
            let _ = writeln!(s, "{},{},{},{},{},{}", arm, i, m.edges[i], m.edges[i + 1], m.probs[i], u.probs[i]);
        }
    }
    s
}

pub fn cmd_shift(a: &ShiftArgs) -> Result<ShiftReport> {
    if a.images == 0 {
        return Err(Error::InvalidArgument("--images must be positive".into()));
    }
    let model = match &a.checkpoint {
        Some(dir) => load_student(dir)?.1,
        None => StudentModel::new(StudentConfig { image_size: a.image_size, seed: a.seed, ..Default::default() })?,
    };
    let ds = Dataset::synthetic(&SynthConfig {
        n: a.images,
        image_size: model.cfg.image_size,
        val_fraction: 0.0,
        seed: a.seed,
        ..Default::default()
    })?;
    let mode = if a.batch_stats { Mode::Train } else { Mode::Eval };
    let r = shift_experiment(&model, &ds.images, a.ratio, a.seed, DEFAULT_BINS, mode)?;
    fs::write(&a.out, shift_csv(&r)).map_err(|e| io_err(&a.out, e))?;
    println!("sparse_shift {:.6}", r.sparse);
    println!("dense_shift {:.6}", r.dense);
    println!(
        "verdict: {} (sparse < 0.1 and dense > 2x sparse on {} images at ratio {})",
        if r.reproduces() { "REPRODUCED" } else { "NOT REPRODUCED" },
        r.images,
        r.ratio
    );
    Ok(r)
}

pub fn cmd_erosion(a: &ErosionArgs) -> Result<Vec<(f64, f64)>> {
    if a.grid == 0 || a.size % a.grid != 0 {
        return Err(Error::InvalidArgument(format!("--grid {} must divide --size {}", a.grid, a.size)));
    }
    let mask = generate_mask(a.grid, a.grid, a.ratio, a.seed)?.map.upsample(a.size, a.size)?;
    let dense = erosion_profile(ConvKind::Dense, &mask, a.depth)?;
    let sparse = erosion_profile(ConvKind::Sparse, &mask, a.depth)?;
    let mut s = String::from("layer,dense,sparse\n");
    for (i, (d, sp)) in dense.iter().zip(&sparse).enumerate() {
        let _ = writeln!(s, "{},{},{}", i + 1, d, sp);
    }
    fs::write(&a.out, &s).map_err(|e| io_err(&a.out, e))?;
    print!("{}", s);
    Ok(dense.into_iter().zip(sparse).collect())
}

pub fn cmd_export_teacher(a: &ExportArgs) -> Result<usize> {
    let cfg = DistillConfig::load(&a.config)?;
    let dir = a.dataset.clone().unwrap_or_else(|| cfg.data.path.clone());
    let ds = Dataset::load(&dir)?;
    let teacher = ToyTeacher::new(cfg.teacher_config())?;
    let t = export_embeddings(&teacher, &ds.images, ds.checksum(), &a.out)?;
    println!("wrote {:?} teacher tokens to {}", t.shape(), a.out.display());
    Ok(ds.len())
}
