// Synthetic equilibrium molecules from the surrogate force field.

use rlpf::forcefield::{energy_forces, generate_dataset_with_topology, DatasetOptions};
use rlpf::metrics::evaluate;
use rlpf::reward::force_rmsd;
use rlpf::xyz::write_xyz;
use rlpf::{AtomTable, Result, SeedSpec};

pub fn run_example() -> Result<(usize, f64)> {
    let table = AtomTable::organic();
    let entries = generate_dataset_with_topology(32, (3, 7), &table, SeedSpec::new(7, 0), DatasetOptions::default())?;
    let mut worst: f64 = 0.0;
    for e in &entries {
        let f = energy_forces(&e.molecule, &e.topology, &table)?;
        worst = worst.max(force_rmsd(&f, e.molecule.n_atoms())?);
    }
    for e in entries.iter().take(3) {
        print!("{}", write_xyz(&e.molecule, &table, &e.molecule.formula(&table)));
    }
    let mols: Vec<_> = entries.iter().map(|e| e.molecule.clone()).collect();
    let report = evaluate(&mols, &table, &Default::default())?;
    println!("{} molecules, worst force RMSD {worst:.2e} eV/Å", entries.len());
    println!("{report}");
    Ok((entries.len(), report.molecule_stability))
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run_example().map(|_| ())
}
