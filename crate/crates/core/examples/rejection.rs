// Rejection sampling: how many draws it takes to collect force-stable molecules.

use rlpf::metrics::{rejection_sample_with, RejectionOutcome};
use rlpf::pipeline::{pretrain, sample_one, Checkpoint, RunConfig};
use rlpf::reward::{molecule_rmsd, ForceEngine};
use rlpf::{AtomTable, Result, SeedSpec};

/// A briefly pretrained model on 64 synthetic molecules, T = 20.
fn quick_model(table: &AtomTable) -> Result<(RunConfig, Checkpoint)> {
    let data = rlpf::forcefield::generate_dataset(64, (3, 7), table, SeedSpec::new(7, 0))?;
    let mut cfg = RunConfig::default();
    cfg.steps = 20;
    cfg.pretrain.hidden = 16;
    cfg.pretrain.batch = 16;
    cfg.pretrain.lr = 1e-3;
    cfg.pretrain.max_iters = 200;
    cfg.pretrain.eval_every = 50;
    let ckpt = pretrain(&cfg, &data, table, |_| {})?.checkpoint;
    Ok((cfg, ckpt))
}

pub fn run_example() -> Result<RejectionOutcome> {
    let table = AtomTable::organic();
    let (_, ckpt) = quick_model(&table)?;
    let schedule = ckpt.schedule()?;
    // A loose threshold so the briefly trained model gets there quickly.
    let threshold = 2.0;
    let out = rejection_sample_with(
        |i| sample_one(&ckpt, &schedule, SeedSpec::new(3, 0), i),
        |m| molecule_rmsd(m, &table, &ForceEngine::Surrogate).is_ok_and(|r| r < threshold),
        8,
        8,
    )?;
    println!("{}", RejectionOutcome::CSV_HEADER);
    println!("{}", out.csv_row());
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
