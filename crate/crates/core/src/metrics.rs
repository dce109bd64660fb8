//! Bond inference, stability/validity/uniqueness/novelty, and the
//! rejection-sampling efficiency harness.

use std::collections::HashSet;
use std::fmt;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chem::{AtomTable, Molecule};
use crate::error::{Error, Result};
use crate::geometry::{norm, sub};
use crate::hash::molecule_graph_hash;

/// Unit-order bond graph over the rows of a molecule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BondGraph {
    neighbors: Vec<Vec<usize>>,
}

impl BondGraph {
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn valence(&self, i: usize) -> u32 {
        self.neighbors[i].len() as u32
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].contains(&j)
    }

    /// Sorted `(i, j)` pairs with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &j in nb {
                if i < j {
                    v.push((i, j));
                }
            }
        }
        v
    }

    /// True if the given rows form a single connected component.
    pub fn connected(&self, rows: &[usize]) -> bool {
        let Some(&start) = rows.first() else {
            return false;
        };
        let mut seen = vec![false; self.neighbors.len()];
        let mut stack = vec![start];
        seen[start] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    stack.push(j);
                }
            }
        }
        count == rows.len()
    }
}

/// Bond `(i, j)` iff `|d_ij - r0(type_i, type_j)| ≤ bond_tolerance`.
pub fn infer_bonds(mol: &Molecule, table: &AtomTable) -> BondGraph {
    let n = mol.capacity();
    let mut neighbors = vec![Vec::new(); n];
    let tol = table.bond_tolerance();
    for i in 0..n {
        let Some(ei) = mol.element(i) else { continue };
        for j in i + 1..n {
            let Some(ej) = mol.element(j) else { continue };
            let d = norm(sub(mol.coords()[i], mol.coords()[j]));
            if (d - table.pair(ei, ej).r0).abs() <= tol {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    BondGraph { neighbors }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoleculeCheck {
    pub n_atoms: usize,
    pub stable_atoms: usize,
    pub stable: bool,
    pub valid: bool,
}

/// Per-molecule stability and validity.
pub fn check_molecule(mol: &Molecule, table: &AtomTable) -> MoleculeCheck {
    let g = infer_bonds(mol, table);
    let rows: Vec<usize> = (0..mol.capacity()).filter(|&i| mol.mask()[i]).collect();
    let mut stable_atoms = 0;
    let mut over = false;
    for &i in &rows {
        let target = table.target_valence(mol.element(i).unwrap());
        let v = g.valence(i);
        if v == target {
            stable_atoms += 1;
        }
        if v > target {
            over = true;
        }
    }
    let n = rows.len();
    MoleculeCheck {
        n_atoms: n,
        stable_atoms,
        stable: n > 0 && stable_atoms == n,
        valid: n >= 2 && !over && g.connected(&rows),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub atom_stability: f64,
    pub molecule_stability: f64,
    pub validity: f64,
    /// Fraction of valid molecules with distinct graph hashes.
    pub uniqueness: f64,
    /// Fraction of distinct valid molecules absent from the training hashes.
    pub novelty: f64,
    pub n_samples: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "n_samples,atom_stability,molecule_stability,validity,uniqueness,novelty";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.n_samples, self.atom_stability, self.molecule_stability, self.validity, self.uniqueness, self.novelty
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples             {}", self.n_samples)?;
        writeln!(f, "atom stability      {:.4}", self.atom_stability)?;
        writeln!(f, "molecule stability  {:.4}", self.molecule_stability)?;
        writeln!(f, "validity            {:.4}", self.validity)?;
        writeln!(f, "uniqueness          {:.4}", self.uniqueness)?;
        write!(f, "novelty             {:.4}", self.novelty)
    }
}

pub fn evaluate(mols: &[Molecule], table: &AtomTable, training_hashes: &HashSet<u64>) -> Result<EvalReport> {
    if mols.is_empty() {
        return Err(Error::EmptyMolecule);
    }
    let per: Vec<(MoleculeCheck, u64)> = mols
        .par_iter()
        .map(|m| (check_molecule(m, table), molecule_graph_hash(m, table)))
        .collect();
    let atoms: usize = per.iter().map(|(c, _)| c.n_atoms).sum();
    let stable_atoms: usize = per.iter().map(|(c, _)| c.stable_atoms).sum();
    let stable = per.iter().filter(|(c, _)| c.stable).count();
    let valid_hashes: Vec<u64> = per.iter().filter(|(c, _)| c.valid).map(|(_, h)| *h).collect();
    let unique: HashSet<u64> = valid_hashes.iter().copied().collect();
    let novel = unique.iter().filter(|h| !training_hashes.contains(h)).count();
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(EvalReport {
        atom_stability: frac(stable_atoms, atoms),
        molecule_stability: frac(stable, mols.len()),
        validity: frac(valid_hashes.len(), mols.len()),
        uniqueness: frac(unique.len(), valid_hashes.len()),
        novelty: frac(novel, unique.len()),
        n_samples: mols.len(),
    })
}

pub fn training_hashes(mols: &[Molecule], table: &AtomTable) -> HashSet<u64> {
    mols.iter().map(|m| molecule_graph_hash(m, table)).collect()
}

/// Outcome of a rejection-sampling run.
#[derive(Debug, Clone)]
pub struct RejectionOutcome {
    /// Samples drawn up to and including the one that completed the target.
    pub total_sampled: usize,
    pub wall_time: Duration,
    pub stable: Vec<Molecule>,
}

impl RejectionOutcome {
    pub const CSV_HEADER: &'static str = "time_s,molecules_sampled";

    pub fn csv_row(&self) -> String {
        format!("{:.3},{}", self.wall_time.as_secs_f64(), self.total_sampled)
    }
}

/// Draw samples in batches of `batch` (index order) until `target` of them
/// pass `accept`. Gives up after `100 × target` samples.
pub fn rejection_sample_with<S, A>(sample: S, accept: A, target: usize, batch: usize) -> Result<RejectionOutcome>
where
    S: Fn(usize) -> Result<Molecule> + Sync,
    A: Fn(&Molecule) -> bool + Sync,
{
    let start = Instant::now();
    let cap = 100 * target.max(1);
    let batch = batch.max(1);
    let mut stable = Vec::with_capacity(target);
    let mut next = 0usize;
    while stable.len() < target {
        if next >= cap {
            return Err(Error::SamplingBudgetExceeded(cap));
        }
        let end = (next + batch).min(cap);
        let results: Vec<Option<Molecule>> = (next..end)
            .into_par_iter()
            .map(|i| sample(i).ok().filter(|m| accept(m)))
            .collect();
        for (offset, r) in results.into_iter().enumerate() {
            if let Some(m) = r {
                stable.push(m);
                if stable.len() == target {
                    return Ok(RejectionOutcome { total_sampled: next + offset + 1, wall_time: start.elapsed(), stable });
                }
            }
        }
        next = end;
    }
    Ok(RejectionOutcome { total_sampled: next, wall_time: start.elapsed(), stable })
}
