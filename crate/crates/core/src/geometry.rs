//! Small fixed-size vector helpers, rigid motions and the zero-CoM projection.

use rand::Rng;

use crate::chem::Molecule;
use crate::error::{Error, Result};
use crate::rng::standard_normal;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn det(a: &Mat3) -> f64 {
    dot(a[0], cross(a[1], a[2]))
}

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Subtract the mean of the masked-in rows from each masked-in row.
pub fn project_zero_com(coords: &[Vec3], mask: &[bool]) -> Result<Vec<Vec3>> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::EmptyMolecule);
    }
    let com = center_of_mass(coords, mask);
    Ok(coords
        .iter()
        .zip(mask)
        .map(|(&c, &m)| if m { sub(c, com) } else { c })
        .collect())
}

/// Unweighted mean of masked-in rows (zero if none).
pub fn center_of_mass(coords: &[Vec3], mask: &[bool]) -> Vec3 {
    let mut s = [0.0; 3];
    let mut n = 0usize;
    for (c, &m) in coords.iter().zip(mask) {
        if m {
            s = add(s, *c);
            n += 1;
        }
    }
    if n == 0 {
        return s;
    }
    scale(s, 1.0 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidMotion {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidMotion {
    pub const ORTHOGONALITY_TOL: f64 = 1e-12;

    pub fn identity() -> Self {
        Self { rotation: IDENTITY, translation: [0.0; 3] }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let g = Self { rotation, translation };
        g.check()?;
        Ok(g)
    }

    pub fn rotation(rotation: Mat3) -> Result<Self> {
        Self::new(rotation, [0.0; 3])
    }

    pub fn check(&self) -> Result<()> {
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((rtr[i][j] - e).abs());
            }
        }
        if worst > Self::ORTHOGONALITY_TOL || !worst.is_finite() {
            return Err(Error::InvalidMotion(worst));
        }
        Ok(())
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation, v), self.translation)
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &RigidMotion) -> RigidMotion {
        RigidMotion {
            rotation: mat_mul(&self.rotation, &first.rotation),
            translation: self.apply(first.translation),
        }
    }

    /// Uniformly random orthogonal matrix, a reflection with probability ½.
    pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
        // Unit quaternion from four normals gives a Haar-uniform rotation.
        let mut q = [0.0; 4];
        loop {
            for v in q.iter_mut() {
                *v = standard_normal(rng);
            }
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-6 {
                q.iter_mut().for_each(|v| *v /= n);
                break;
            }
        }
        let [w, x, y, z] = q;
        let mut r = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ];
        if rng.gen_bool(0.5) {
            for row in r.iter_mut() {
                row[0] = -row[0];
            }
        }
        reorthonormalize(&r)
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, translation_scale: f64) -> Self {
        let rotation = Self::random_orthogonal(rng);
        let translation = [
            translation_scale * standard_normal(rng),
            translation_scale * standard_normal(rng),
            translation_scale * standard_normal(rng),
        ];
        Self { rotation, translation }
    }
}

/// Gram-Schmidt on the rows, keeping the sign of the determinant.
fn reorthonormalize(r: &Mat3) -> Mat3 {
    let d = det(r);
    let a = scale(r[0], 1.0 / norm(r[0]));
    let b0 = sub(r[1], scale(a, dot(a, r[1])));
    let b = scale(b0, 1.0 / norm(b0));
    let mut c = cross(a, b);
    if d < 0.0 {
        c = scale(c, -1.0);
    }
    [a, b, c]
}

/// Rotate/reflect and translate the real atoms of `mol`.
pub fn apply_rigid_motion(mol: &Molecule, g: &RigidMotion) -> Result<Molecule> {
    g.check()?;
    let coords = mol
        .coords()
        .iter()
        .zip(mol.mask())
        .map(|(&c, &m)| if m { g.apply(c) } else { c })
        .collect();
    Ok(mol.with_coords(coords))
}

/// Rotation about the z axis by `angle` radians.
pub fn rotation_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedSpec;
    use std::f64::consts::PI;

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (0..3).all(|k| (a[k] - b[k]).abs() <= tol)
    }

    #[test]
    fn projection_examples() {
        let c = project_zero_com(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]], &[true, true]).unwrap();
        assert_eq!(c, vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        let c = project_zero_com(&[[2.0, 0.0, 0.0], [0.0, 0.0, 0.0]], &[true, true]).unwrap();
        assert_eq!(c, vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        let c = project_zero_com(&[[5.0, 5.0, 5.0]], &[true]).unwrap();
        assert_eq!(c, vec![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn projection_needs_an_atom() {
        assert!(matches!(project_zero_com(&[[0.0; 3]], &[false]), Err(Error::EmptyMolecule)));
    }

    #[test]
    fn projection_leaves_padding() {
        let c = project_zero_com(&[[1.0, 2.0, 3.0], [0.0; 3]], &[true, false]).unwrap();
        assert_eq!(c, vec![[0.0; 3], [0.0; 3]]);
    }

    #[test]
    fn half_turn_about_z() {
        let mol = Molecule::from_elements(vec![[1.0, 0.0, 0.0]], &[1], 4).unwrap();
        let g = RigidMotion::rotation(rotation_z(PI)).unwrap();
        let out = apply_rigid_motion(&mol, &g).unwrap();
        assert!(close(out.coords()[0], [-1.0, 0.0, 0.0], 1e-15));
        let same = apply_rigid_motion(&mol, &RigidMotion::identity()).unwrap();
        assert_eq!(same, mol);
    }

    #[test]
    fn non_orthogonal_rejected() {
        let mol = Molecule::from_elements(vec![[1.0, 0.0, 0.0]], &[1], 4).unwrap();
        let g = RigidMotion { rotation: [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3] };
        assert!(matches!(apply_rigid_motion(&mol, &g), Err(Error::InvalidMotion(_))));
    }

    #[test]
    fn random_orthogonal_is_orthogonal_and_hits_reflections() {
        let mut rng = SeedSpec::new(3, 0).rng();
        let mut reflections = 0;
        for _ in 0..200 {
            let r = RigidMotion::random_orthogonal(&mut rng);
            RigidMotion::rotation(r).unwrap();
            if det(&r) < 0.0 {
                reflections += 1;
            }
        }
        assert!(reflections > 50 && reflections < 150);
    }

    #[test]
    fn composition_matches_sequential_application() {
        let mut rng = SeedSpec::new(11, 0).rng();
        for _ in 0..10 {
            let n = rng.gen_range(2..8);
            let coords: Vec<Vec3> = (0..n)
                .map(|_| [standard_normal(&mut rng), standard_normal(&mut rng), standard_normal(&mut rng)])
                .collect();
            let elems: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let mol = Molecule::from_elements(coords, &elems, 4).unwrap();
            let g1 = RigidMotion::random(&mut rng, 2.0);
            let g2 = RigidMotion::random(&mut rng, 2.0);
            let seq = apply_rigid_motion(&apply_rigid_motion(&mol, &g1).unwrap(), &g2).unwrap();
            let once = apply_rigid_motion(&mol, &g2.compose(&g1)).unwrap();
            for (a, b) in seq.coords().iter().zip(once.coords()) {
                assert!(close(*a, *b, 1e-12));
            }
        }
    }
}
