//! Canonical digest of a molecule's bond graph.
//!
//! Weisfeiler–Lehman refinement over the inferred bond graph, seeded with
//! element indices, followed by a sorted multiset fold. The digest depends
//! only on the labelled graph, so it is invariant to atom order and rigid
//! motion, and uses fixed integer mixing so it is stable across platforms.

use crate::chem::{AtomTable, Molecule};
use crate::metrics::infer_bonds;
use crate::rng::mix64;

pub fn molecule_graph_hash(mol: &Molecule, table: &AtomTable) -> u64 {
    let g = infer_bonds(mol, table);
    let rows: Vec<usize> = (0..mol.capacity()).filter(|&i| mol.mask()[i]).collect();
    let mut labels = vec![0u64; mol.capacity()];
    for &i in &rows {
        labels[i] = mix64(0xE1E7 ^ mol.element(i).unwrap() as u64);
    }
    for _ in 0..rows.len() {
        let mut next = labels.clone();
        for &i in &rows {
            let mut nb: Vec<u64> = g.neighbors(i).iter().map(|&j| labels[j]).collect();
            nb.sort_unstable();
            let mut h = mix64(labels[i] ^ 0x4E42);
            for l in nb {
                h = mix64(h ^ l);
            }
            next[i] = h;
        }
        labels = next;
    }
    let mut finals: Vec<u64> = rows.iter().map(|&i| labels[i]).collect();
    finals.sort_unstable();
    let mut h = mix64(rows.len() as u64 ^ ((g.edges().len() as u64) << 32));
    for l in finals {
        h = mix64(h ^ l);
    }
    h
}
