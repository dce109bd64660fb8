//! Surrogate force field: harmonic bonds plus exponential repulsion between
//! every non-bonded pair,
//!
//! ```text
//! E = Σ_bonds ½ k (d - r0)² + Σ_nonbonded A exp(-d / rho)
//! ```
//!
//! with analytic forces, a backtracking gradient-descent minimizer, the
//! synthetic equilibrium dataset, and a bridge to external force engines.

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chem::{AtomTable, Molecule};
use crate::error::{Error, Result};
use crate::geometry::{add, dot, norm, scale, sub, Vec3};
use crate::metrics::infer_bonds;
use crate::rng::{standard_normal, SeedSpec};
use crate::xyz::write_xyz;

/// Pairs closer than this are treated as coincident.
pub const MIN_DISTANCE: f64 = 1e-8;
pub const TIMEOUT_ENV: &str = "RLPF_FF_TIMEOUT_SECS";
pub const DEFAULT_TIMEOUT_SECS: u64 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForceSource {
    Surrogate,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForceResult {
    /// Per row, eV/Å; zero on padding rows.
    pub forces: Vec<Vec3>,
    /// eV; external engines do not report one.
    pub energy: Option<f64>,
    pub converged: bool,
    pub source: ForceSource,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BondEdge {
    pub i: usize,
    pub j: usize,
    pub r0: f64,
    pub k: f64,
}

/// Harmonic bonds between row indices; every other real pair is non-bonded.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BondTopology {
    pub edges: Vec<BondEdge>,
}

impl BondTopology {
    /// Bonds for the given row pairs, with parameters from the table.
    pub fn from_pairs(mol: &Molecule, table: &AtomTable, pairs: &[(usize, usize)]) -> Self {
        let edges = pairs
            .iter()
            .map(|&(i, j)| {
                let (a, b) = (i.min(j), i.max(j));
                let p = table.pair(mol.element(a).unwrap(), mol.element(b).unwrap());
                BondEdge { i: a, j: b, r0: p.r0, k: p.k }
            })
            .collect();
        Self { edges }
    }

    /// Bonds inferred from interatomic distances.
    pub fn inferred(mol: &Molecule, table: &AtomTable) -> Self {
        let g = infer_bonds(mol, table);
        Self::from_pairs(mol, table, &g.edges())
    }

    /// Sorted `(min, max)` row pairs.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<_> = self.edges.iter().map(|e| (e.i.min(e.j), e.i.max(e.j))).collect();
        v.sort_unstable();
        v
    }
}

/// Energy (eV) and analytic forces (eV/Å).
pub fn energy_forces(mol: &Molecule, topo: &BondTopology, table: &AtomTable) -> Result<ForceResult> {
    let (energy, forces) = energy_and_forces(mol.coords(), mol.mask(), topo, table)?;
    Ok(ForceResult { forces, energy: Some(energy), converged: true, source: ForceSource::Surrogate })
}

fn energy_and_forces(coords: &[Vec3], mask: &[bool], topo: &BondTopology, table: &AtomTable) -> Result<(f64, Vec<Vec3>)> {
    let n = coords.len();
    let real: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    let mut bonded = vec![false; n * n];
    for e in &topo.edges {
        if e.i == e.j {
            return Err(Error::InvalidMolecule(format!("self bond on atom {}", e.i)));
        }
        bonded[e.i * n + e.j] = true;
        bonded[e.j * n + e.i] = true;
    }
    let rep = table.repulsion();
    let mut energy = 0.0;
    let mut forces = vec![[0.0; 3]; n];
    for (ai, &i) in real.iter().enumerate() {
        for &j in &real[ai + 1..] {
            let d_vec = sub(coords[i], coords[j]);
            let d = norm(d_vec);
            if !(d > MIN_DISTANCE) {
                return Err(Error::SingularGeometry(i, j));
            }
            if bonded[i * n + j] {
                continue;
            }
            let e = rep.a * (-d / rep.rho).exp();
            energy += e;
            // dE/dd = -e / rho; force on i is -dE/dd · d_vec/d
            let f = scale(d_vec, e / rep.rho / d);
            forces[i] = add(forces[i], f);
            forces[j] = sub(forces[j], f);
        }
    }
    for b in &topo.edges {
        let d_vec = sub(coords[b.i], coords[b.j]);
        let d = norm(d_vec);
        let dd = d - b.r0;
        energy += 0.5 * b.k * dd * dd;
        let f = scale(d_vec, -b.k * dd / d);
        forces[b.i] = add(forces[b.i], f);
        forces[b.j] = sub(forces[b.j], f);
    }
    if !energy.is_finite() {
        return Err(Error::SingularGeometry(0, 0));
    }
    Ok((energy, forces))
}

/// `sqrt(Σ |f_i|² / 3n)` over the real rows.
pub fn rms_force(forces: &[Vec3], mask: &[bool]) -> f64 {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return 0.0;
    }
    let s: f64 = forces.iter().zip(mask).filter(|(_, &m)| m).map(|(f, _)| dot(*f, *f)).sum();
    (s / (3 * n) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimized {
    pub molecule: Molecule,
    pub converged: bool,
    pub iterations: usize,
    pub rms_force: f64,
    pub energy: f64,
}

/// Steepest descent with Armijo backtracking until the force RMSD is ≤ `tol`.
pub fn minimize(mol: &Molecule, topo: &BondTopology, table: &AtomTable, max_iter: usize, tol: f64) -> Result<Minimized> {
    let mask = mol.mask().to_vec();
    let mut x = mol.coords().to_vec();
    let (mut e, mut f) = energy_and_forces(&x, &mask, topo, table)?;
    let mut step = 0.02;
    let mut iterations = 0;
    loop {
        let rms = rms_force(&f, &mask);
        if rms <= tol {
            return Ok(Minimized { molecule: mol.with_coords(x), converged: true, iterations, rms_force: rms, energy: e });
        }
        if iterations >= max_iter {
            return Ok(Minimized { molecule: mol.with_coords(x), converged: false, iterations, rms_force: rms, energy: e });
        }
        iterations += 1;
        let g2: f64 = f.iter().map(|v| dot(*v, *v)).sum();
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<Vec3> = x.iter().zip(&f).map(|(p, g)| add(*p, scale(*g, step))).collect();
            match energy_and_forces(&trial, &mask, topo, table) {
                Ok((e_new, f_new)) if e_new <= e - 1e-4 * step * g2 => {
                    x = trial;
                    e = e_new;
                    f = f_new;
                    step = (step * 1.25).min(0.2);
                    accepted = true;
                    break;
                }
                Ok((e_new, _)) if e_new.is_nan() => {
                    return Err(Error::MinimizationFailed("energy became NaN".into()));
                }
                _ => step *= 0.5,
            }
        }
        if !accepted {
            // Line search stalled at machine precision: report the current point.
            let rms = rms_force(&f, &mask);
            return Ok(Minimized { molecule: mol.with_coords(x), converged: rms <= tol, iterations, rms_force: rms, energy: e });
        }
    }
}

/// A generated equilibrium molecule with its generating topology.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub molecule: Molecule,
    pub topology: BondTopology,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub max_attempts: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self { max_iter: 20_000, tol: 1e-3, max_attempts: 200 }
    }
}

/// Saturated acyclic molecules relaxed to the surrogate minimum.
pub fn generate_dataset(count: usize, atom_range: (usize, usize), table: &AtomTable, seed: SeedSpec) -> Result<Vec<Molecule>> {
    Ok(generate_dataset_with_topology(count, atom_range, table, seed, DatasetOptions::default())?
        .into_iter()
        .map(|e| e.molecule)
        .collect())
}

pub fn generate_dataset_with_topology(
    count: usize,
    atom_range: (usize, usize),
    table: &AtomTable,
    seed: SeedSpec,
    opts: DatasetOptions,
) -> Result<Vec<DatasetEntry>> {
    let (lo, hi) = atom_range;
    if lo < 2 || hi > 9 || lo > hi {
        return Err(Error::Config(format!("atom range must lie within [2, 9], got ({lo}, {hi})")));
    }
    let mut out = Vec::with_capacity(count);
    for idx in 0..count {
        let mut produced = None;
        for attempt in 0..opts.max_attempts {
            let s = seed.derive(&[idx as u64, attempt as u64]);
            if let Some(entry) = try_generate(atom_range, table, s, opts)? {
                produced = Some(entry);
                break;
            }
        }
        match produced {
            Some(e) => out.push(e),
            None => {
                return Err(Error::MinimizationFailed(format!(
                    "no converged molecule for index {idx} after {} attempts",
                    opts.max_attempts
                )))
            }
        }
    }
    Ok(out)
}

/// Random saturated tree: heavy-atom skeleton, then hydrogens to fill valences.
fn random_tree<R: Rng>(rng: &mut R, atom_range: (usize, usize), table: &AtomTable) -> Option<(Vec<usize>, Vec<(usize, usize)>)> {
    let h = table.index_of("H")?;
    let heavy_kinds: Vec<usize> = (0..table.n_elements()).filter(|&e| table.target_valence(e) >= 2).collect();
    let (lo, hi) = atom_range;
    // H2 is the only hydrogen-only saturated tree.
    if lo <= 2 && rng.gen_bool(0.04) {
        return Some((vec![h, h], vec![(0, 1)]));
    }
    let n_heavy = rng.gen_range(1..=hi.saturating_sub(1).clamp(1, 4));
    let elements: Vec<usize> = (0..n_heavy).map(|_| *heavy_kinds.choose(rng).unwrap()).collect();
    let valence_sum: usize = elements.iter().map(|&e| table.target_valence(e) as usize).sum();
    let n_h = valence_sum.checked_sub(2 * (n_heavy - 1))?;
    let total = n_heavy + n_h;
    if total < lo || total > hi {
        return None;
    }
    let mut degree = vec![0usize; n_heavy];
    let mut bonds = Vec::with_capacity(total - 1);
    for i in 1..n_heavy {
        let open: Vec<usize> = (0..i).filter(|&j| degree[j] < table.target_valence(elements[j]) as usize).collect();
        let &j = open.choose(rng)?;
        degree[i] += 1;
        degree[j] += 1;
        bonds.push((j, i));
    }
    let mut all = elements.clone();
    for i in 0..n_heavy {
        let free = (table.target_valence(elements[i]) as usize).checked_sub(degree[i])?;
        for _ in 0..free {
            all.push(h);
            bonds.push((i, all.len() - 1));
        }
    }
    Some((all, bonds))
}

fn random_unit<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = [standard_normal(rng), standard_normal(rng), standard_normal(rng)];
        let n = norm(v);
        if n > 1e-6 {
            return scale(v, 1.0 / n);
        }
    }
}

fn try_generate(atom_range: (usize, usize), table: &AtomTable, seed: SeedSpec, opts: DatasetOptions) -> Result<Option<DatasetEntry>> {
    let mut rng = seed.rng();
    let Some((elements, bonds)) = random_tree(&mut rng, atom_range, table) else {
        return Ok(None);
    };
    let n = elements.len();
    let mut coords: Vec<Option<Vec3>> = vec![None; n];
    coords[0] = Some([0.0; 3]);
    // Bonds list parents before children, so one pass places everything.
    for &(p, c) in &bonds {
        let base = coords[p].expect("parent placed first");
        let r0 = table.pair(elements[p], elements[c]).r0 * (1.0 + rng.gen_range(-0.1..0.1));
        let mut best = None;
        let mut best_clear = f64::NEG_INFINITY;
        for _ in 0..24 {
            let cand = add(base, scale(random_unit(&mut rng), r0));
            let clear = coords
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != p)
                .filter_map(|(_, q)| q.map(|q| norm(sub(q, cand))))
                .fold(f64::INFINITY, f64::min);
            if clear > best_clear {
                best_clear = clear;
                best = Some(cand);
            }
        }
        coords[c] = best;
    }
    let coords: Vec<Vec3> = coords.into_iter().map(|c| c.unwrap()).collect();
    let mol = Molecule::from_elements(coords, &elements, table.n_elements())?.centered()?;
    let topo = BondTopology::from_pairs(&mol, table, &bonds);
    let relaxed = match minimize(&mol, &topo, table, opts.max_iter, opts.tol) {
        Ok(r) => r,
        Err(Error::SingularGeometry(..)) | Err(Error::MinimizationFailed(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    if !relaxed.converged {
        return Ok(None);
    }
    let molecule = relaxed.molecule.centered()?;
    if BondTopology::inferred(&molecule, table).pairs() != topo.pairs() {
        return Ok(None);
    }
    Ok(Some(DatasetEntry { molecule, topology: topo }))
}

fn timeout_from_env() -> Duration {
    let secs = std::env::var(TIMEOUT_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<u64>().ok())
        .unwrap_or(DEFAULT_TIMEOUT_SECS);
    Duration::from_secs(secs)
}

fn engine_failure(reason: impl Into<String>) -> Error {
    Error::EngineFailure { reason: reason.into(), penalty: true }
}

/// Forces from a child process: XYZ on stdin, `n` lines `fx fy fz` (eV/Å) on stdout.
///
/// The command is run through `sh -c`. The timeout is [`DEFAULT_TIMEOUT_SECS`]
/// unless overridden by the `RLPF_FF_TIMEOUT_SECS` environment variable.
pub fn external_forces(mol: &Molecule, table: &AtomTable, command: &str) -> Result<ForceResult> {
    external_forces_with_timeout(mol, table, command, timeout_from_env())
}

pub fn external_forces_with_timeout(mol: &Molecule, table: &AtomTable, command: &str, timeout: Duration) -> Result<ForceResult> {
    let input = write_xyz(mol, table, "rlpf force request");
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| engine_failure(format!("spawn: {e}")))?;

    let mut stdin = child.stdin.take().expect("piped stdin");
    let writer = std::thread::spawn(move || {
        // A child that exits without reading closes the pipe; that is its business.
        let _ = stdin.write_all(input.as_bytes());
    });
    let mut stdout = child.stdout.take().expect("piped stdout");
    let reader = std::thread::spawn(move || {
        let mut s = String::new();
        stdout.read_to_string(&mut s).map(|_| s)
    });

    let start = Instant::now();
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if start.elapsed() >= timeout {
            let _ = child.kill();
            let _ = child.wait();
            return Err(Error::EngineTimeout { secs: timeout.as_secs(), penalty: true });
        }
        std::thread::sleep(Duration::from_millis(2));
    };
    let _ = writer.join();
    let text = reader
        .join()
        .map_err(|_| engine_failure("reader thread panicked"))?
        .map_err(|e| engine_failure(format!("read: {e}")))?;
    if !status.success() {
        return Err(engine_failure(format!("engine exited with {status}")));
    }

    let n = mol.n_atoms();
    let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != n {
        return Err(engine_failure(format!("expected {n} force lines, got {}", rows.len())));
    }
    let mut forces = vec![[0.0; 3]; mol.capacity()];
    let real: Vec<usize> = (0..mol.capacity()).filter(|&i| mol.mask()[i]).collect();
    for (line, &i) in rows.iter().zip(&real) {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| engine_failure(format!("malformed force line {line:?}")))?;
        if vals.len() != 3 || vals.iter().any(|v| !v.is_finite()) {
            return Err(engine_failure(format!("malformed force line {line:?}")));
        }
        forces[i] = [vals[0], vals[1], vals[2]];
    }
    Ok(ForceResult { forces, energy: None, converged: true, source: ForceSource::External })
}
