//! Reward functions evaluated on decoded molecules.
//!
//! Force rewards are negated force RMSDs so that larger is better. Any
//! failure to obtain forces (coincident atoms, fewer than two atoms, an
//! external engine error or timeout) yields the fixed penalty instead.

use serde::{Deserialize, Serialize};

use crate::chem::{AtomTable, Molecule};
use crate::error::{Error, Result};
use crate::forcefield::{energy_forces, external_forces, BondTopology, ForceResult};
use crate::geometry::{center_of_mass, dot, sub};
use crate::metrics::{check_molecule, infer_bonds};

pub const PENALTY: f64 = -5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Force,
    Valency,
    Composite,
    External,
}

impl RewardKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardKind::Force => "force",
            RewardKind::Valency => "valency",
            RewardKind::Composite => "composite",
            RewardKind::External => "external",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub value: f64,
    pub kind: RewardKind,
    pub penalty: bool,
    /// Force RMSD in eV/Å, when one was computed.
    pub raw_rmsd: Option<f64>,
}

impl RewardRecord {
    pub fn penalty(kind: RewardKind) -> Self {
        Self { value: PENALTY, kind, penalty: true, raw_rmsd: None }
    }
}

/// `sqrt(Σ_i |f_i|² / 3n)`.
pub fn force_rmsd(result: &ForceResult, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::EmptyMolecule);
    }
    let s: f64 = result.forces.iter().map(|f| dot(*f, *f)).sum();
    Ok((s / (3 * n) as f64).sqrt())
}

/// Where forces come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ForceEngine {
    /// Surrogate field on the distance-inferred bond graph.
    Surrogate,
    /// Child process speaking the XYZ-in / forces-out protocol.
    External(String),
}

impl ForceEngine {
    pub fn forces(&self, mol: &Molecule, table: &AtomTable) -> Result<ForceResult> {
        match self {
            ForceEngine::Surrogate => energy_forces(mol, &BondTopology::inferred(mol, table), table),
            ForceEngine::External(cmd) => external_forces(mol, table, cmd),
        }
    }
}

/// Force RMSD of a molecule, or the error that makes it a penalty.
pub fn molecule_rmsd(mol: &Molecule, table: &AtomTable, engine: &ForceEngine) -> Result<f64> {
    if mol.n_atoms() < 2 {
        return Err(Error::EmptyMolecule);
    }
    let r = engine.forces(mol, table)?;
    force_rmsd(&r, mol.n_atoms())
}

pub fn force_reward(mol: &Molecule, table: &AtomTable, engine: &ForceEngine) -> RewardRecord {
    let kind = match engine {
        ForceEngine::Surrogate => RewardKind::Force,
        ForceEngine::External(_) => RewardKind::External,
    };
    match molecule_rmsd(mol, table, engine) {
        Ok(rmsd) => RewardRecord { value: -rmsd, kind, penalty: false, raw_rmsd: Some(rmsd) },
        Err(_) => RewardRecord::penalty(kind),
    }
}

/// 1 if every atom's inferred valence equals its target, else 0.
pub fn valency_reward(mol: &Molecule, table: &AtomTable) -> RewardRecord {
    let stable = check_molecule(mol, table).stable;
    RewardRecord { value: if stable { 1.0 } else { 0.0 }, kind: RewardKind::Valency, penalty: false, raw_rmsd: None }
}

/// Property function used by the composite reward.
pub type PropertyFn = fn(&Molecule) -> Result<f64>;

#[derive(Debug, Clone, Copy)]
pub struct CompositeConfig {
    pub lambda: f64,
    pub eta: f64,
    pub target: f64,
    pub predictor: PropertyFn,
}

impl CompositeConfig {
    pub fn new(lambda: f64, eta: f64, target: f64, predictor: PropertyFn) -> Result<Self> {
        let cfg = Self { lambda, eta, target, predictor };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.eta < 0.0 || !(self.lambda + self.eta > 0.0) {
            return Err(Error::Config(format!("composite weights must be >= 0 with a positive sum, got λ={} η={}", self.lambda, self.eta)));
        }
        Ok(())
    }
}

impl Default for CompositeConfig {
    fn default() -> Self {
        Self { lambda: 1.0, eta: 0.5, target: 1.0, predictor: toy_property }
    }
}

/// `-λ·rmsd - η·|ω(mol) - c|`.
pub fn composite_reward(mol: &Molecule, table: &AtomTable, engine: &ForceEngine, cfg: &CompositeConfig) -> RewardRecord {
    let kind = RewardKind::Composite;
    let rmsd = match molecule_rmsd(mol, table, engine) {
        Ok(r) => r,
        Err(_) => return RewardRecord::penalty(kind),
    };
    let prop = match (cfg.predictor)(mol) {
        Ok(p) => p,
        Err(_) => return RewardRecord::penalty(kind),
    };
    let value = -cfg.lambda * rmsd - cfg.eta * (prop - cfg.target).abs();
    RewardRecord { value, kind, penalty: false, raw_rmsd: Some(rmsd) }
}

/// Radius of gyration (Å) of the real atoms.
pub fn toy_property(mol: &Molecule) -> Result<f64> {
    let n = mol.n_atoms();
    if n < 2 {
        return Err(Error::DegenerateProperty);
    }
    let com = center_of_mass(mol.coords(), mol.mask());
    let s: f64 = mol
        .coords()
        .iter()
        .zip(mol.mask())
        .filter(|(_, &m)| m)
        .map(|(c, _)| {
            let d = sub(*c, com);
            dot(d, d)
        })
        .sum();
    Ok((s / n as f64).sqrt())
}

/// True when the real atoms do not form one connected bond graph.
pub fn is_fragmented(mol: &Molecule, table: &AtomTable) -> bool {
    let rows: Vec<usize> = (0..mol.capacity()).filter(|&i| mol.mask()[i]).collect();
    !infer_bonds(mol, table).connected(&rows)
}

/// A fully specified reward: kind plus everything it needs.
#[derive(Debug, Clone)]
pub struct RewardFunction {
    pub kind: RewardKind,
    pub table: AtomTable,
    pub composite: CompositeConfig,
    pub external_command: Option<String>,
    /// Give the penalty to surrogate-scored molecules whose inferred bond
    /// graph falls apart into several fragments.
    pub penalize_fragments: bool,
}

impl RewardFunction {
    pub fn new(kind: RewardKind, table: AtomTable) -> Self {
        Self { kind, table, composite: CompositeConfig::default(), external_command: None, penalize_fragments: true }
    }

    pub fn evaluate(&self, mol: &Molecule) -> RewardRecord {
        let surrogate = matches!(self.kind, RewardKind::Force | RewardKind::Composite);
        if surrogate && self.penalize_fragments && is_fragmented(mol, &self.table) {
            return RewardRecord::penalty(self.kind);
        }
        match self.kind {
            RewardKind::Force => force_reward(mol, &self.table, &ForceEngine::Surrogate),
            RewardKind::Valency => valency_reward(mol, &self.table),
            RewardKind::Composite => composite_reward(mol, &self.table, &ForceEngine::Surrogate, &self.composite),
            RewardKind::External => match &self.external_command {
                Some(cmd) => force_reward(mol, &self.table, &ForceEngine::External(cmd.clone())),
                None => RewardRecord::penalty(RewardKind::External),
            },
        }
    }
}
