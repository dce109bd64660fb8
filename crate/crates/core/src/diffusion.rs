//! Forward noising, noise-prediction loss, reverse sampling and decoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::chem::Molecule;
use crate::denoiser::{self, DenoiserOutput, ForwardCache, PolicyParams};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::rng::{standard_normal, SeedSpec};
use crate::schedule::NoiseSchedule;

/// Latent `z_t`: row-major `N × (3 + F)`, coordinate block first.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Vec<f64>,
    pub t: usize,
    pub mask: Vec<bool>,
    pub features: usize,
}

impl LatentState {
    pub fn width(&self) -> usize {
        3 + self.features
    }

    pub fn capacity(&self) -> usize {
        self.mask.len()
    }

    pub fn coord(&self, i: usize) -> Vec3 {
        let w = self.width();
        [self.z[i * w], self.z[i * w + 1], self.z[i * w + 2]]
    }

    pub fn n_atoms(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Copy padded with zero rows up to `capacity`.
    pub fn padded(&self, capacity: usize) -> Self {
        let mut s = self.clone();
        let w = self.width();
        while s.mask.len() < capacity {
            s.mask.push(false);
            s.z.extend(std::iter::repeat(0.0).take(w));
        }
        s
    }
}

/// Draw standard-normal noise on real rows with the coordinate block
/// projected onto the zero-CoM subspace. Padding rows stay zero.
pub fn sample_noise<R: Rng + ?Sized>(rng: &mut R, mask: &[bool], features: usize) -> Vec<f64> {
    let w = 3 + features;
    let mut eps = vec![0.0; mask.len() * w];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            for v in &mut eps[i * w..(i + 1) * w] {
                *v = standard_normal(rng);
            }
        }
    }
    center_coordinates(&mut eps, mask, w);
    eps
}

/// Subtract the masked-in mean from the coordinate block, in place.
pub fn center_coordinates(z: &mut [f64], mask: &[bool], width: usize) {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return;
    }
    let mut com = [0.0; 3];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            for k in 0..3 {
                com[k] += z[i * width + k];
            }
        }
    }
    for (i, &m) in mask.iter().enumerate() {
        if m {
            for k in 0..3 {
                z[i * width + k] -= com[k] / n as f64;
            }
        }
    }
}

/// `[x, h]` of a molecule as a latent row block.
pub fn molecule_to_latent(mol: &Molecule) -> Vec<f64> {
    let f = mol.n_features();
    let w = 3 + f;
    let mut z = vec![0.0; mol.capacity() * w];
    for i in 0..mol.capacity() {
        if mol.mask()[i] {
            z[i * w..i * w + 3].copy_from_slice(&mol.coords()[i]);
            z[i * w + 3..(i + 1) * w].copy_from_slice(&mol.types()[i * f..(i + 1) * f]);
        }
    }
    z
}

/// `z_t = alpha_t [x, h] + sigma_t eps`, also returning `eps`.
pub fn forward_noise_with_eps(mol: &Molecule, t: usize, s: &NoiseSchedule, seed: SeedSpec) -> (LatentState, Vec<f64>) {
    let mut rng = seed.rng();
    let eps = sample_noise(&mut rng, mol.mask(), mol.n_features());
    let x = molecule_to_latent(mol);
    let (a, sg) = (s.alpha(t), s.sigma(t));
    let z = x.iter().zip(&eps).map(|(x, e)| a * x + sg * e).collect();
    (LatentState { z, t, mask: mol.mask().to_vec(), features: mol.n_features() }, eps)
}

pub fn forward_noise(mol: &Molecule, t: usize, s: &NoiseSchedule, seed: SeedSpec) -> LatentState {
    forward_noise_with_eps(mol, t, s, seed).0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossWeighting {
    /// `w(t) = 1`.
    #[default]
    Uniform,
    /// `w(t) = ½(SNR(t-1)/SNR(t) - 1)`.
    Snr,
}

/// Mean squared residual over masked-in atom-feature entries, and its
/// gradient with respect to the prediction.
pub fn noise_prediction_loss(eps: &[f64], pred: &DenoiserOutput, mask: &[bool], features: usize) -> (f64, DenoiserOutput) {
    let w = 3 + features;
    let n = mask.iter().filter(|&&m| m).count();
    let count = (n * w) as f64;
    let mut loss = 0.0;
    let mut up = DenoiserOutput::zeros(mask.len(), features);
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        for k in 0..3 {
            let r = eps[i * w + k] - pred.eps_x[i][k];
            loss += r * r;
            up.eps_x[i][k] = -2.0 * r / count;
        }
        for k in 0..features {
            let r = eps[i * w + 3 + k] - pred.eps_h[i * features + k];
            loss += r * r;
            up.eps_h[i * features + k] = -2.0 * r / count;
        }
    }
    (loss / count, up)
}

/// Noise-prediction loss at a uniformly drawn step, with its parameter gradient.
pub fn pretrain_loss(
    params: &PolicyParams,
    mol: &Molecule,
    s: &NoiseSchedule,
    seed: SeedSpec,
    weighting: LossWeighting,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; params.len()];
    let loss = pretrain_loss_into(params, mol, s, seed, weighting, &mut grad)?;
    Ok((loss, grad))
}

/// Like [`pretrain_loss`] but accumulates the gradient into `grad`.
pub fn pretrain_loss_into(
    params: &PolicyParams,
    mol: &Molecule,
    s: &NoiseSchedule,
    seed: SeedSpec,
    weighting: LossWeighting,
    grad: &mut [f64],
) -> Result<f64> {
    let t = seed.derive(&[0x7]).rng().gen_range(1..=s.steps());
    let (state, eps) = forward_noise_with_eps(mol, t, s, seed.derive(&[0x8]));
    let (pred, cache) = denoiser::forward(params, &state.z, t as f64 / s.steps() as f64, &state.mask)?;
    let (loss, mut up) = noise_prediction_loss(&eps, &pred, &state.mask, state.features);
    let w = match weighting {
        LossWeighting::Uniform => 1.0,
        LossWeighting::Snr => s.loss_weight(t),
    };
    if w != 1.0 {
        up.eps_x.iter_mut().flatten().for_each(|v| *v *= w);
        up.eps_h.iter_mut().for_each(|v| *v *= w);
    }
    denoiser::backward_into(params, &cache, &up, grad)?;
    Ok(w * loss)
}

/// Forward-only [`pretrain_loss`].
pub fn pretrain_loss_value(params: &PolicyParams, mol: &Molecule, s: &NoiseSchedule, seed: SeedSpec, weighting: LossWeighting) -> Result<f64> {
    let t = seed.derive(&[0x7]).rng().gen_range(1..=s.steps());
    let (state, eps) = forward_noise_with_eps(mol, t, s, seed.derive(&[0x8]));
    let (pred, _) = denoiser::forward(params, &state.z, t as f64 / s.steps() as f64, &state.mask)?;
    let (loss, _) = noise_prediction_loss(&eps, &pred, &state.mask, state.features);
    let w = match weighting {
        LossWeighting::Uniform => 1.0,
        LossWeighting::Snr => s.loss_weight(t),
    };
    Ok(w * loss)
}

/// Coefficient on the predicted noise in the reverse mean,
/// `sigma_{t|s}² / (alpha_{t|s} sigma_t)`.
pub fn noise_coefficient(s: &NoiseSchedule, t: usize) -> Result<f64> {
    let tr = s.transition(t, t - 1)?;
    Ok(tr.sigma2_t_given_r() / (tr.alpha_t_given_r * s.sigma(t)))
}

/// Reverse-kernel mean `z_t/alpha_{t|s} - c·eps_hat` with the forward cache
/// needed to differentiate it.
pub fn reverse_mean(params: &PolicyParams, state: &LatentState, s: &NoiseSchedule) -> Result<(Vec<f64>, DenoiserOutput, ForwardCache)> {
    let t = state.t;
    if t == 0 {
        return Err(Error::InvalidStepPair { t, r: 0 });
    }
    let tr = s.transition(t, t - 1)?;
    let coef = noise_coefficient(s, t)?;
    let (pred, cache) = denoiser::forward(params, &state.z, t as f64 / s.steps() as f64, &state.mask)?;
    let w = state.width();
    let f = state.features;
    let mut mean = vec![0.0; state.z.len()];
    for (i, &m) in state.mask.iter().enumerate() {
        if !m {
            continue;
        }
        for k in 0..3 {
            mean[i * w + k] = state.z[i * w + k] / tr.alpha_t_given_r - coef * pred.eps_x[i][k];
        }
        for k in 0..f {
            mean[i * w + 3 + k] = state.z[i * w + 3 + k] / tr.alpha_t_given_r - coef * pred.eps_h[i * f + k];
        }
    }
    Ok((mean, pred, cache))
}

/// `mean + sigma·eps` on real rows.
pub fn step_from_mean(mean: &[f64], sigma: f64, eps: &[f64]) -> Vec<f64> {
    mean.iter().zip(eps).map(|(m, e)| m + sigma * e).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReverseStep {
    pub next: LatentState,
    pub mean: Vec<f64>,
    pub sigma: f64,
}

/// One ancestral step `z_t → z_{t-1}`.
pub fn reverse_step(params: &PolicyParams, state: &LatentState, s: &NoiseSchedule, seed: SeedSpec) -> Result<ReverseStep> {
    let (mean, _, _) = reverse_mean(params, state, s)?;
    let sigma = s.transition(state.t, state.t - 1)?.sigma_t_to_r;
    let eps = sample_noise(&mut seed.rng(), &state.mask, state.features);
    let mut z = step_from_mean(&mean, sigma, &eps);
    center_coordinates(&mut z, &state.mask, state.width());
    let next = LatentState { z, t: state.t - 1, mask: state.mask.clone(), features: state.features };
    Ok(ReverseStep { next, mean, sigma })
}

/// Recorded reverse chain `z_T … z_0` and the decoded molecule.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `states[k]` is `z_{T-k}`.
    pub states: Vec<LatentState>,
    /// `means[k]` is the mean of the transition `states[k] → states[k+1]`.
    pub means: Vec<Vec<f64>>,
    pub sigmas: Vec<f64>,
    pub molecule: Molecule,
    pub seed: SeedSpec,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.means.len()
    }

    /// Seed of the noise drawn in transition `k`.
    pub fn step_seed(seed: SeedSpec, k: usize) -> SeedSpec {
        seed.derive(&[0x5354_4550, k as u64])
    }
}

pub fn prior_sample(n_atoms: usize, features: usize, seed: SeedSpec) -> LatentState {
    let mask = vec![true; n_atoms];
    let z = sample_noise(&mut seed.derive(&[0x5052_494f]).rng(), &mask, features);
    LatentState { z, t: 0, mask, features }
}

pub fn sample_trajectory(params: &PolicyParams, n_atoms: usize, s: &NoiseSchedule, seed: SeedSpec) -> Result<Trajectory> {
    if n_atoms == 0 {
        return Err(Error::EmptyMolecule);
    }
    let f = params.arch().features;
    let mut state = prior_sample(n_atoms, f, seed);
    state.t = s.steps();
    let mut states = Vec::with_capacity(s.steps() + 1);
    let mut means = Vec::with_capacity(s.steps());
    let mut sigmas = Vec::with_capacity(s.steps());
    states.push(state.clone());
    for k in 0..s.steps() {
        let step = reverse_step(params, &state, s, Trajectory::step_seed(seed, k))?;
        means.push(step.mean);
        sigmas.push(step.sigma);
        state = step.next;
        states.push(state.clone());
    }
    let molecule = decode_molecule(&state)?;
    Ok(Trajectory { states, means, sigmas, molecule, seed })
}

/// Coordinates from the coordinate block, types by argmax (lowest index on ties).
pub fn decode_molecule(z0: &LatentState) -> Result<Molecule> {
    if z0.t != 0 {
        return Err(Error::InvalidStepPair { t: z0.t, r: 0 });
    }
    let f = z0.features;
    let w = z0.width();
    let mut coords = Vec::with_capacity(z0.capacity());
    let mut types = vec![0.0; z0.capacity() * f];
    for (i, &m) in z0.mask.iter().enumerate() {
        if !m {
            coords.push([0.0; 3]);
            continue;
        }
        coords.push(z0.coord(i));
        let row = &z0.z[i * w + 3..(i + 1) * w];
        let mut best = 0;
        for k in 1..f {
            if row[k] > row[best] {
                best = k;
            }
        }
        types[i * f + best] = 1.0;
    }
    Molecule::from_parts(coords, types, z0.mask.clone(), f)
}

/// Empirical distribution of atom counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomCountHistogram {
    /// `counts[n]` molecules with `n` atoms.
    pub counts: Vec<u64>,
}

impl AtomCountHistogram {
    pub fn from_molecules<'a>(mols: impl IntoIterator<Item = &'a Molecule>) -> Self {
        let mut counts = Vec::new();
        for m in mols {
            let n = m.n_atoms();
            if counts.len() <= n {
                counts.resize(n + 1, 0);
            }
            counts[n] += 1;
        }
        Self { counts }
    }

    pub fn max_atoms(&self) -> usize {
        self.counts.iter().rposition(|&c| c > 0).unwrap_or(0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total: u64 = self.counts.iter().sum();
        assert!(total > 0, "empty atom-count histogram");
        let mut u = rng.gen_range(0..total);
        for (n, &c) in self.counts.iter().enumerate() {
            if u < c {
                return n;
            }
            u -= c;
        }
        unreachable!()
    }
}
