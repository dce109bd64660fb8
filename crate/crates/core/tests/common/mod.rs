#![allow(dead_code)]

use rand::Rng;
use rlpf::chem::{AtomTable, Molecule};
use rlpf::denoiser::{init_params, PolicyParams};
use rlpf::diffusion::{forward_noise, reverse_step, Trajectory};
use rlpf::schedule::NoiseSchedule;
use rlpf::geometry::{Mat3, Vec3};
use rlpf::rng::SeedSpec;

pub fn table() -> AtomTable {
    AtomTable::organic()
}

/// Random centered molecule with `n` atoms spread over a few Ångström.
pub fn random_molecule(seed: SeedSpec, n: usize, features: usize) -> Molecule {
    let mut rng = seed.rng();
    let coords: Vec<Vec3> = (0..n).map(|_| [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)]).collect();
    let elements: Vec<usize> = (0..n).map(|_| rng.gen_range(0..features)).collect();
    Molecule::from_elements(coords, &elements, features).unwrap().centered().unwrap()
}

/// Latent rows `[x, h]` with Gaussian features and centered coordinates.
pub fn random_latent(seed: SeedSpec, n: usize, features: usize) -> Vec<f64> {
    let mut rng = seed.rng();
    let w = 3 + features;
    let mut z: Vec<f64> = (0..n * w).map(|_| rng.gen_range(-1.5..1.5)).collect();
    for k in 0..3 {
        let mean = (0..n).map(|i| z[i * w + k]).sum::<f64>() / n as f64;
        for i in 0..n {
            z[i * w + k] -= mean;
        }
    }
    z
}

/// Initialized parameters with every entry jittered, so no head is zero.
pub fn jittered_params(layers: usize, hidden: usize, features: usize, seed: SeedSpec, scale: f64) -> PolicyParams {
    let mut p = init_params(layers, hidden, features, seed);
    let mut rng = seed.derive(&[99]).rng();
    for v in p.flat_view_mut() {
        *v += scale * rng.gen_range(-1.0..1.0);
    }
    p
}

/// Central finite differences of `f` over every parameter.
pub fn fd_gradient(params: &PolicyParams, h: f64, f: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
    let mut p = params.clone();
    (0..params.len())
        .map(|i| {
            let orig = p.flat_view()[i];
            p.flat_view_mut()[i] = orig + h;
            let up = f(&p);
            p.flat_view_mut()[i] = orig - h;
            let down = f(&p);
            p.flat_view_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct GradientAgreement {
    /// Fraction of coordinates with relative error below the threshold.
    pub rel_ok_fraction: f64,
    /// Largest absolute error among the remaining coordinates.
    pub worst_abs_rest: f64,
    pub worst_rel: f64,
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64], rel_tol: f64) -> GradientAgreement {
    let mut ok = 0;
    let mut worst_abs_rest: f64 = 0.0;
    let mut worst_rel: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs());
        let rel = if scale == 0.0 { 0.0 } else { (a - n).abs() / scale };
        worst_rel = worst_rel.max(rel);
        if rel < rel_tol {
            ok += 1;
        } else {
            worst_abs_rest = worst_abs_rest.max((a - n).abs());
        }
    }
    GradientAgreement { rel_ok_fraction: ok as f64 / analytic.len() as f64, worst_abs_rest, worst_rel }
}

pub fn rotate_latent(z: &[f64], r: &Mat3, features: usize) -> Vec<f64> {
    let w = 3 + features;
    let mut out = z.to_vec();
    for i in 0..z.len() / w {
        let v = [z[i * w], z[i * w + 1], z[i * w + 2]];
        for a in 0..3 {
            out[i * w + a] = r[a][0] * v[0] + r[a][1] * v[1] + r[a][2] * v[2];
        }
    }
    out
}

pub fn rotate(r: &Mat3, v: Vec3) -> Vec3 {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

/// Surrogate energy written out directly from its definition: harmonic
/// bonds on `bonds`, exponential repulsion on every other real pair.
pub fn oracle_energy(coords: &[Vec3], elements: &[usize], bonds: &[(usize, usize)], t: &AtomTable) -> f64 {
    let n = coords.len();
    let d = |i: usize, j: usize| {
        let v = [coords[i][0] - coords[j][0], coords[i][1] - coords[j][1], coords[i][2] - coords[j][2]];
        (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
    };
    let mut e = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let bonded = bonds.iter().any(|&(a, b)| (a, b) == (i, j) || (b, a) == (i, j));
            if bonded {
                let p = t.pair(elements[i], elements[j]);
                e += 0.5 * p.k * (d(i, j) - p.r0).powi(2);
            } else {
                let r = t.repulsion();
                e += r.a * (-d(i, j) / r.rho).exp();
            }
        }
    }
    e
}

/// Median of a small sample.
pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One-step trajectories starting from forward-noised copies of a molecule,
/// so latents have the scale the sampler sees with a trained model.
pub fn noised_transitions(old: &PolicyParams, s: &NoiseSchedule, ts: &[usize], seed: SeedSpec) -> Vec<Trajectory> {
    let mol = random_molecule(seed, 5, 4);
    ts.iter()
        .enumerate()
        .map(|(k, &t)| {
            let state = forward_noise(&mol, t, s, seed.derive(&[k as u64, 0]));
            let step = reverse_step(old, &state, s, seed.derive(&[k as u64, 1])).unwrap();
            Trajectory { states: vec![state, step.next], means: vec![step.mean], sigmas: vec![step.sigma], molecule: mol.clone(), seed }
        })
        .collect()
}
