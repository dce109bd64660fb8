// Policy-gradient fine-tuning against the force reward, with per-epoch metrics.

use rlpf::pipeline::{pretrain, run_finetune, Checkpoint, RunArtifacts, RunConfig};
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

pub fn run_example() -> Result<RunArtifacts> {
    let table = AtomTable::organic();
    let (mut cfg, pre) = quick_model(&table)?;

    cfg.trajectories = 16;
    cfg.max_epochs = 3;
    cfg.minibatch = 64;
    cfg.optimizer.lr = 3e-4;
    cfg.force_threshold = None;
    cfg.master_seed = 1;
    let run = run_finetune(&cfg, &pre, &table)?;
    println!("epoch  reward    rmsd    mol-stab  kl        clip");
    for e in &run.epochs {
        let m = &e.metrics;
        println!(
            "{:<6} {:+.4}  {:.4}  {:.3}     {:.2e}  {:.3}",
            m.epoch, m.mean_reward, m.mean_rmsd, m.molecule_stability, m.kl_to_pretrained, m.clip_fraction
        );
    }
    Ok(run)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
