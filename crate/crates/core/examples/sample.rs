// Sampling molecules from a checkpoint and writing them as XYZ.
//
// Pass a checkpoint path to sample from it; otherwise a briefly pretrained
// model is used.

use rlpf::metrics::evaluate;
use rlpf::pipeline::{pretrain, sample_molecules, Checkpoint, RunConfig};
use rlpf::xyz::write_xyz;
use rlpf::{AtomTable, Molecule, Result, SeedSpec};

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

pub fn run_example_with(ckpt: &Checkpoint, n: usize) -> Result<Vec<Molecule>> {
    let table = AtomTable::organic();
    let mols = sample_molecules(ckpt, n, SeedSpec::new(11, 0))?;
    for m in mols.iter().take(2) {
        print!("{}", write_xyz(m, &table, &m.formula(&table)));
    }
    println!("{}", evaluate(&mols, &table, &ckpt.training_hash_set())?);
    Ok(mols)
}

pub fn run_example() -> Result<Vec<Molecule>> {
    let (_, ckpt) = quick_model(&AtomTable::organic())?;
    run_example_with(&ckpt, 16)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    match std::env::args().nth(1) {
        Some(p) => run_example_with(&Checkpoint::load(std::path::Path::new(&p))?, 64).map(|_| ()),
        None => run_example().map(|_| ()),
    }
}
