//! Command-line driver for the full workflow.
//!
//! Every command that writes a run directory also writes the resolved
//! configuration and a manifest whose `complete` flag is only set once the
//! command has finished.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::chem::{AtomTable, Molecule};
use crate::error::{Error, Result};
use crate::forcefield::generate_dataset;
use crate::hash::molecule_graph_hash;
use crate::metrics::{evaluate, rejection_sample_with, EvalReport, RejectionOutcome};
use crate::pipeline::{pretrain, resume_finetune, run_finetune, sample_one, write_loss_csv, Checkpoint, RunConfig};
use crate::reward::{molecule_rmsd, ForceEngine, RewardKind};
use crate::rng::SeedSpec;
use crate::schedule::NoiseSchedule;
use crate::xyz::{parse_xyz, write_xyz};

#[derive(Debug, Parser)]
#[command(name = "rlpf", version, about = "Diffusion sampling of small molecules fine-tuned against force-field rewards")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate relaxed synthetic molecules as XYZ files plus a manifest.
    GenData(GenDataArgs),
    /// Train the denoiser on a generated dataset.
    Pretrain(PretrainArgs),
    /// Fine-tune a pretrained checkpoint with policy gradients.
    Finetune(FinetuneArgs),
    /// Draw molecules from a checkpoint.
    Sample(SampleArgs),
    /// Stability, validity, uniqueness and novelty of a sample directory.
    Eval(EvalArgs),
    /// Samples and time needed to collect force-stable molecules.
    Reject(RejectArgs),
    /// Fine-tune once per clipping threshold.
    AblateEps(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 512)]
    pub count: usize,
    #[arg(long, default_value_t = 3)]
    pub atoms_min: usize,
    #[arg(long, default_value_t = 7)]
    pub atoms_max: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Flags that override fields of the JSON config.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub trajectories: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub minibatch: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub pretrain_lr: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Command for the external force engine.
    #[arg(long)]
    pub engine: Option<String>,
    /// Disable early stopping on the reward thresholds.
    #[arg(long)]
    pub no_early_stop: bool,
    /// Override any config field: `--set optimizer.lr=3e-4`. Values are JSON,
    /// bare words are taken as strings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.seed {
            cfg.master_seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.trajectories {
            cfg.trajectories = v;
        }
        if let Some(v) = self.lr {
            cfg.optimizer.lr = v;
        }
        if let Some(v) = self.workers {
            cfg.reward_workers = v;
        }
        if let Some(v) = self.minibatch {
            cfg.minibatch = v;
        }
        if let Some(v) = self.max_iters {
            cfg.pretrain.max_iters = v;
        }
        if let Some(v) = self.pretrain_lr {
            cfg.pretrain.lr = v;
        }
        if let Some(v) = self.layers {
            cfg.pretrain.layers = v;
        }
        if let Some(v) = self.hidden {
            cfg.pretrain.hidden = v;
        }
        if let Some(v) = &self.engine {
            cfg.external_command = Some(v.clone());
        }
        if self.no_early_stop {
            cfg.valency_threshold = None;
            cfg.force_threshold = None;
        }
        if !self.overrides.is_empty() {
            cfg = apply_overrides(&cfg, &self.overrides)?;
        }
        Ok(cfg)
    }
}

/// Set dotted-path fields on the JSON form of `cfg` and parse it back.
pub fn apply_overrides(cfg: &RunConfig, overrides: &[String]) -> Result<RunConfig> {
    let mut doc = serde_json::to_value(cfg)?;
    for item in overrides {
        let (key, raw) = item.split_once('=').ok_or_else(|| Error::Config(format!("override {item:?} is not KEY=VALUE")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut node = &mut doc;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *node = value;
    }
    serde_json::from_value(doc).map_err(|e| Error::Config(format!("override: {e}")))
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Pretrained checkpoint.
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long, value_enum)]
    pub reward: Option<RewardKind>,
    /// PPO clipping threshold [default: 0.2, or the config's value].
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run with the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub from: PathBuf,
    #[arg(short = 'n', long, default_value_t = 64)]
    pub n: usize,
    /// Sampling steps; defaults to the checkpoint's.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of XYZ files.
    #[arg(long)]
    pub samples: PathBuf,
    /// Training digests: a `hashes.txt` file, a dataset directory, or a checkpoint.
    #[arg(long)]
    pub train_hashes: Option<PathBuf>,
    /// Write the report as CSV here as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RejectArgs {
    #[arg(long)]
    pub from: PathBuf,
    /// Force RMSD acceptance threshold in eV/Å.
    #[arg(long, default_value_t = 0.2)]
    pub threshold: f64,
    #[arg(long, short = 'n', default_value_t = 200)]
    pub target: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long)]
    pub engine: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long, value_enum)]
    pub reward: Option<RewardKind>,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.2,100")]
    pub values: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    complete: bool,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    details: serde_json::Value,
}

fn write_manifest(dir: &Path, command: &str, complete: bool, details: serde_json::Value) -> Result<()> {
    let m = Manifest { command, complete, details };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(())
}

fn read_xyz_dir(dir: &Path, table: &AtomTable) -> Result<Vec<(String, Molecule)>> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "xyz"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p)?;
            let (m, _) = parse_xyz(&text, table).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            Ok((p.file_name().unwrap().to_string_lossy().into_owned(), m))
        })
        .collect()
}

fn read_hashes(path: &Path, table: &AtomTable) -> Result<std::collections::HashSet<u64>> {
    if path.is_dir() {
        let hashes = path.join("hashes.txt");
        if hashes.exists() {
            return read_hashes(&hashes, table);
        }
        return Ok(read_xyz_dir(path, table)?.iter().map(|(_, m)| molecule_graph_hash(m, table)).collect());
    }
    let bytes = fs::read(path)?;
    if bytes.starts_with(crate::pipeline::CHECKPOINT_MAGIC) {
        return Ok(Checkpoint::from_bytes(&bytes)?.training_hash_set());
    }
    String::from_utf8_lossy(&bytes)
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| u64::from_str_radix(l.trim(), 16).map_err(|_| Error::Config(format!("bad digest line {l:?}"))))
        .collect()
}

fn gen_data(a: &GenDataArgs, table: &AtomTable) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    write_manifest(&a.out, "gen-data", false, serde_json::Value::Null)?;
    let mols = generate_dataset(a.count, (a.atoms_min, a.atoms_max), table, SeedSpec::new(a.seed, 0))?;
    let mut files = Vec::with_capacity(mols.len());
    let mut hashes = String::new();
    for (i, m) in mols.iter().enumerate() {
        let name = format!("mol_{i:05}.xyz");
        let h = molecule_graph_hash(m, table);
        fs::write(a.out.join(&name), write_xyz(m, table, &format!("index={i} seed={}", a.seed)))?;
        files.push(json!({ "file": name, "formula": m.formula(table), "n_atoms": m.n_atoms(), "hash": format!("{h:016x}") }));
        hashes.push_str(&format!("{h:016x}\n"));
    }
    fs::write(a.out.join("hashes.txt"), hashes)?;
    let details = json!({
        "count": a.count,
        "atoms_min": a.atoms_min,
        "atoms_max": a.atoms_max,
        "seed": a.seed,
        "files": files,
    });
    write_manifest(&a.out, "gen-data", true, details)?;
    println!("wrote {} molecules to {}", mols.len(), a.out.display());
    Ok(())
}

fn pretrain_cmd(a: &PretrainArgs, table: &AtomTable) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    cfg.dataset = Some(a.data.clone());
    cfg.validate()?;
    fs::create_dir_all(&a.out)?;
    write_resolved(&a.out, &cfg)?;
    write_manifest(&a.out, "pretrain", false, serde_json::Value::Null)?;
    let data: Vec<Molecule> = read_xyz_dir(&a.data, table)?.into_iter().map(|(_, m)| m).collect();
    let start = Instant::now();
    let out = pretrain(&cfg, &data, table, |r| {
        eprintln!("iter {:>6}  train {:.5}  heldout {:.5}  {:.0}s", r.iter, r.train_loss, r.heldout_loss, start.elapsed().as_secs_f64())
    })?;
    write_loss_csv(&a.out.join("loss.csv"), &out.losses)?;
    out.checkpoint.save(&a.out.join("pretrained.ckpt"))?;
    write_manifest(
        &a.out,
        "pretrain",
        true,
        json!({ "seed": cfg.master_seed, "molecules": data.len(), "best_heldout": out.best_heldout, "checkpoint": "pretrained.ckpt" }),
    )?;
    println!("best held-out loss {:.5}; checkpoint {}", out.best_heldout, a.out.join("pretrained.ckpt").display());
    Ok(())
}

fn finetune_into(cfg: &mut RunConfig, from: &Path, resume: Option<&Path>, out: &Path, table: &AtomTable) -> Result<()> {
    cfg.checkpoint_dir = Some(out.to_path_buf());
    let pretrained = Checkpoint::load(from)?;
    cfg.validate()?;
    fs::create_dir_all(out)?;
    write_resolved(out, cfg)?;
    write_manifest(out, "finetune", false, serde_json::Value::Null)?;
    let arts = match resume {
        Some(p) => resume_finetune(cfg, &pretrained, &Checkpoint::load(p)?, table)?,
        None => run_finetune(cfg, &pretrained, table)?,
    };
    for e in &arts.epochs {
        let m = &e.metrics;
        eprintln!(
            "epoch {:>3}  reward {:+.4}  mol-stab {:.3}  kl {:.4}  clip {:.3}",
            m.epoch, m.mean_reward, m.molecule_stability, m.kl_to_pretrained, m.clip_fraction
        );
    }
    arts.final_checkpoint.save(&out.join("final.ckpt"))?;
    write_manifest(
        out,
        "finetune",
        true,
        json!({
            "seed": cfg.master_seed,
            "epochs": arts.final_checkpoint.epoch,
            "converged": arts.converged,
            "metrics": "metrics.csv",
            "rewards": "rewards.csv",
            "checkpoint": "final.ckpt",
        }),
    )?;
    Ok(())
}

fn finetune_cmd(a: &FinetuneArgs, table: &AtomTable) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    if let Some(e) = a.epsilon {
        cfg.epsilon = e;
    }
    if let Some(r) = a.reward {
        cfg.reward = r;
    }
    finetune_into(&mut cfg, &a.from, a.resume.as_deref(), &a.out, table)?;
    println!("metrics in {}", a.out.join("metrics.csv").display());
    Ok(())
}

fn sample_cmd(a: &SampleArgs, table: &AtomTable) -> Result<()> {
    let ckpt = Checkpoint::load(&a.from)?;
    let schedule = NoiseSchedule::new(a.steps.unwrap_or(ckpt.steps), ckpt.schedule_kind)?;
    fs::create_dir_all(&a.out)?;
    write_manifest(&a.out, "sample", false, serde_json::Value::Null)?;
    let seed = SeedSpec::new(a.seed, 0);
    use rayon::prelude::*;
    let mols: Vec<Molecule> = (0..a.n).into_par_iter().map(|i| sample_one(&ckpt, &schedule, seed, i)).collect::<Result<_>>()?;
    for (i, m) in mols.iter().enumerate() {
        fs::write(a.out.join(format!("sample_{i:05}.xyz")), write_xyz(m, table, &format!("sample={i} seed={}", a.seed)))?;
    }
    write_manifest(&a.out, "sample", true, json!({ "n": a.n, "steps": schedule.steps(), "seed": a.seed }))?;
    println!("wrote {} samples to {}", a.n, a.out.display());
    Ok(())
}

fn eval_cmd(a: &EvalArgs, table: &AtomTable) -> Result<()> {
    let mols: Vec<Molecule> = read_xyz_dir(&a.samples, table)?.into_iter().map(|(_, m)| m).collect();
    let hashes = match &a.train_hashes {
        Some(p) => read_hashes(p, table)?,
        None => Default::default(),
    };
    let report = evaluate(&mols, table, &hashes)?;
    println!("{report}");
    if let Some(p) = &a.out {
        fs::write(p, format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()))?;
    }
    Ok(())
}

fn reject_cmd(a: &RejectArgs, table: &AtomTable) -> Result<()> {
    let ckpt = Checkpoint::load(&a.from)?;
    let schedule = ckpt.schedule()?;
    let engine = match &a.engine {
        Some(c) => ForceEngine::External(c.clone()),
        None => ForceEngine::Surrogate,
    };
    let seed = SeedSpec::new(a.seed, 0);
    let out = rejection_sample_with(
        |i| sample_one(&ckpt, &schedule, seed, i),
        |m| molecule_rmsd(m, table, &engine).is_ok_and(|r| r < a.threshold),
        a.target,
        a.batch,
    )?;
    let text = format!("{}\n{}\n", RejectionOutcome::CSV_HEADER, out.csv_row());
    print!("{text}");
    if let Some(p) = &a.out {
        fs::write(p, text)?;
    }
    Ok(())
}

fn ablate_cmd(a: &AblateArgs, table: &AtomTable) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    for &eps in &a.values {
        let mut cfg = a.config.resolve()?;
        cfg.epsilon = eps;
        if let Some(r) = a.reward {
            cfg.reward = r;
        }
        let dir = a.out.join(format!("eps_{eps}"));
        eprintln!("epsilon {eps} -> {}", dir.display());
        finetune_into(&mut cfg, &a.from, None, &dir, table)?;
    }
    println!("ablation runs in {}", a.out.display());
    Ok(())
}

/// Run a parsed command.
pub fn run(cli: &Cli) -> Result<()> {
    let table = AtomTable::organic();
    match &cli.command {
        Command::GenData(a) => gen_data(a, &table),
        Command::Pretrain(a) => pretrain_cmd(a, &table),
        Command::Finetune(a) => finetune_cmd(a, &table),
        Command::Sample(a) => sample_cmd(a, &table),
        Command::Eval(a) => eval_cmd(a, &table),
        Command::Reject(a) => reject_cmd(a, &table),
        Command::AblateEps(a) => ablate_cmd(a, &table),
    }
}

/// One-line JSON description of an error for standard error.
pub fn error_line(e: &Error) -> String {
    json!({ "error": e.to_string(), "kind": format!("{e:?}").split(['(', ' ', '{']).next().unwrap_or("Error") }).to_string()
}

/// Parse arguments, run, and map the outcome to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}
