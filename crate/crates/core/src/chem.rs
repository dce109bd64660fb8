//! Atom table and the padded molecule representation shared by every module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_zero_com, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairParams {
    /// Equilibrium bond length, Å.
    pub r0: f64,
    /// Harmonic spring constant, eV/Å².
    pub k: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Repulsion {
    /// Prefactor, eV.
    pub a: f64,
    /// Decay length, Å.
    pub rho: f64,
}

/// Element list, valences and surrogate force-field parameters.
///
/// Pair parameters are stored as a dense symmetric matrix indexed by
/// element position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomTable {
    elements: Vec<String>,
    target_valence: Vec<u32>,
    pairs: Vec<PairParams>,
    repulsion: Repulsion,
    bond_tolerance: f64,
}

impl Default for AtomTable {
    fn default() -> Self {
        Self::organic()
    }
}

impl AtomTable {
    /// H, C, N, O with single-bond covalent lengths.
    pub fn organic() -> Self {
        let k = 20.0;
        let elements = ["H", "C", "N", "O"];
        let r0 = |a: &str, b: &str| -> f64 {
            let mut key = [a, b];
            key.sort_unstable();
            match (key[0], key[1]) {
                ("H", "H") => 0.74,
                ("C", "H") => 1.09,
                ("H", "N") => 1.01,
                ("H", "O") => 0.96,
                ("C", "C") => 1.54,
                ("C", "N") => 1.47,
                ("C", "O") => 1.43,
                ("N", "N") => 1.45,
                ("N", "O") => 1.40,
                ("O", "O") => 1.48,
                _ => unreachable!(),
            }
        };
        let mut pairs = Vec::with_capacity(16);
        for a in elements {
            for b in elements {
                pairs.push(PairParams { r0: r0(a, b), k });
            }
        }
        Self {
            elements: elements.iter().map(|s| s.to_string()).collect(),
            target_valence: vec![1, 4, 3, 2],
            pairs,
            repulsion: Repulsion { a: 5.0, rho: 0.4 },
            bond_tolerance: 0.2,
        }
    }

    pub fn new(
        elements: Vec<String>,
        target_valence: Vec<u32>,
        pairs: Vec<PairParams>,
        repulsion: Repulsion,
        bond_tolerance: f64,
    ) -> Result<Self> {
        let table = Self { elements, target_valence, pairs, repulsion, bond_tolerance };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.elements.len();
        let bad = |m: &str| Err(Error::Config(format!("atom table: {m}")));
        if f == 0 || self.target_valence.len() != f || self.pairs.len() != f * f {
            return bad("dimension mismatch");
        }
        if self.target_valence.iter().any(|&v| v < 1) {
            return bad("valence must be >= 1");
        }
        if let Some(c) = self.index_of("C") {
            if self.target_valence[c] != 4 {
                return bad("carbon valence must be 4");
            }
        }
        for a in 0..f {
            for b in 0..f {
                let p = self.pairs[a * f + b];
                if p != self.pairs[b * f + a] {
                    return bad("pair parameters not symmetric");
                }
                if !(p.r0 > 0.0 && p.k > 0.0) {
                    return bad("r0 and k must be positive");
                }
            }
        }
        if !(self.repulsion.a > 0.0 && self.repulsion.rho > 0.0 && self.bond_tolerance > 0.0) {
            return bad("repulsion and tolerance must be positive");
        }
        Ok(())
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn symbol(&self, element: usize) -> &str {
        &self.elements[element]
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.elements.iter().position(|s| s.eq_ignore_ascii_case(symbol))
    }

    pub fn target_valence(&self, element: usize) -> u32 {
        self.target_valence[element]
    }

    pub fn pair(&self, a: usize, b: usize) -> PairParams {
        self.pairs[a * self.elements.len() + b]
    }

    pub fn set_pair(&mut self, a: usize, b: usize, p: PairParams) {
        let f = self.elements.len();
        self.pairs[a * f + b] = p;
        self.pairs[b * f + a] = p;
    }

    pub fn repulsion(&self) -> Repulsion {
        self.repulsion
    }

    pub fn bond_tolerance(&self) -> f64 {
        self.bond_tolerance
    }
}

/// Padded molecule: `capacity` rows, of which the masked-in ones are real atoms.
///
/// `types` is row-major `capacity × n_features` one-hot.
#[derive(Debug, Clone, PartialEq)]
pub struct Molecule {
    coords: Vec<Vec3>,
    types: Vec<f64>,
    mask: Vec<bool>,
    n_features: usize,
}

impl Molecule {
    /// Unpadded molecule from element indices; coordinates are stored as given.
    pub fn from_elements(coords: Vec<Vec3>, elements: &[usize], n_features: usize) -> Result<Self> {
        if coords.len() != elements.len() {
            return Err(Error::InvalidMolecule("coords/elements length mismatch".into()));
        }
        let mut types = vec![0.0; coords.len() * n_features];
        for (i, &e) in elements.iter().enumerate() {
            if e >= n_features {
                return Err(Error::InvalidMolecule(format!("element index {e} out of range")));
            }
            types[i * n_features + e] = 1.0;
        }
        let mask = vec![true; coords.len()];
        Ok(Self { coords, types, mask, n_features })
    }

    /// Raw constructor; checks the mask/one-hot invariants.
    pub fn from_parts(coords: Vec<Vec3>, types: Vec<f64>, mask: Vec<bool>, n_features: usize) -> Result<Self> {
        let m = Self { coords, types, mask, n_features };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.coords.len();
        if self.mask.len() != n || self.types.len() != n * self.n_features {
            return Err(Error::InvalidMolecule("shape mismatch".into()));
        }
        for i in 0..n {
            let row = &self.types[i * self.n_features..(i + 1) * self.n_features];
            if self.mask[i] {
                let ones = row.iter().filter(|&&v| v == 1.0).count();
                let zeros = row.iter().filter(|&&v| v == 0.0).count();
                if ones != 1 || zeros != self.n_features - 1 {
                    return Err(Error::InvalidMolecule(format!("row {i} is not one-hot")));
                }
            } else if row.iter().any(|&v| v != 0.0) || self.coords[i] != [0.0; 3] {
                return Err(Error::InvalidMolecule(format!("padding row {i} is not zero")));
            }
        }
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.coords.len()
    }

    pub fn n_atoms(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn coords(&self) -> &[Vec3] {
        &self.coords
    }

    pub fn types(&self) -> &[f64] {
        &self.types
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Element index of row `i`, `None` for padding.
    pub fn element(&self, i: usize) -> Option<usize> {
        if !self.mask[i] {
            return None;
        }
        self.types[i * self.n_features..(i + 1) * self.n_features]
            .iter()
            .position(|&v| v == 1.0)
    }

    /// Element indices of the real atoms, in row order.
    pub fn elements(&self) -> Vec<usize> {
        (0..self.capacity()).filter_map(|i| self.element(i)).collect()
    }

    /// Coordinates of the real atoms, in row order.
    pub fn real_coords(&self) -> Vec<Vec3> {
        (0..self.capacity()).filter(|&i| self.mask[i]).map(|i| self.coords[i]).collect()
    }

    pub fn with_coords(&self, coords: Vec<Vec3>) -> Self {
        assert_eq!(coords.len(), self.capacity());
        let mut m = self.clone();
        m.coords = coords;
        for i in 0..m.capacity() {
            if !m.mask[i] {
                m.coords[i] = [0.0; 3];
            }
        }
        m
    }

    /// Copy with the real atoms translated to zero center of mass.
    pub fn centered(&self) -> Result<Self> {
        let coords = project_zero_com(&self.coords, &self.mask)?;
        Ok(Self { coords, ..self.clone() })
    }

    /// Copy padded with zero rows up to `capacity`.
    pub fn padded(&self, capacity: usize) -> Self {
        let mut m = self.compact();
        while m.coords.len() < capacity {
            m.coords.push([0.0; 3]);
            m.types.extend(std::iter::repeat(0.0).take(self.n_features));
            m.mask.push(false);
        }
        m
    }

    /// Copy without padding rows.
    pub fn compact(&self) -> Self {
        let keep: Vec<usize> = (0..self.capacity()).filter(|&i| self.mask[i]).collect();
        let f = self.n_features;
        Self {
            coords: keep.iter().map(|&i| self.coords[i]).collect(),
            types: keep.iter().flat_map(|&i| self.types[i * f..(i + 1) * f].iter().copied()).collect(),
            mask: vec![true; keep.len()],
            n_features: f,
        }
    }

    /// Rows reordered so that new row `k` is old row `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let f = self.n_features;
        Self {
            coords: perm.iter().map(|&i| self.coords[i]).collect(),
            types: perm.iter().flat_map(|&i| self.types[i * f..(i + 1) * f].iter().copied()).collect(),
            mask: perm.iter().map(|&i| self.mask[i]).collect(),
            n_features: f,
        }
    }

    /// Chemical formula in Hill-like element order of the table.
    pub fn formula(&self, table: &AtomTable) -> String {
        let mut counts = vec![0usize; self.n_features];
        for e in self.elements() {
            counts[e] += 1;
        }
        let mut s = String::new();
        for (e, &c) in counts.iter().enumerate() {
            match c {
                0 => {}
                1 => s.push_str(table.symbol(e)),
                _ => s.push_str(&format!("{}{}", table.symbol(e), c)),
            }
        }
        s
    }
}
