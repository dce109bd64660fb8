// Pretraining the denoiser on a small synthetic dataset.

use rlpf::forcefield::generate_dataset;
use rlpf::pipeline::{pretrain, PretrainOutcome, RunConfig};
use rlpf::{AtomTable, Result, SeedSpec};

pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.steps = 20;
    cfg.pretrain.hidden = 16;
    cfg.pretrain.batch = 16;
    cfg.pretrain.lr = 1e-3;
    cfg.pretrain.max_iters = 200;
    cfg.pretrain.eval_every = 50;
    cfg
}

pub fn run_example() -> Result<PretrainOutcome> {
    let table = AtomTable::organic();
    let data = generate_dataset(64, (3, 7), &table, SeedSpec::new(7, 0))?;
    let out = pretrain(&tiny_config(), &data, &table, |row| {
        println!("iter {:>4}  train {:.4}  held-out {:.4}", row.iter, row.train_loss, row.heldout_loss)
    })?;
    println!("best held-out loss {:.4}, {} training graphs recorded", out.best_heldout, out.checkpoint.training_hashes.len());
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
