//! Policy-gradient machinery for the reverse diffusion chain.
//!
//! Each recorded transition `z_t → z_{t-1}` of a trajectory is one action.
//! Its log-probability under the isotropic Gaussian reverse kernel is
//! evaluated with a per-atom mask and per-atom feature normalization, the
//! normalization constant dropped (it depends only on the schedule and
//! cancels in the ratio).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{backward_into, DenoiserOutput, PolicyParams};
use crate::diffusion::{noise_coefficient, reverse_mean, Trajectory};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Floor on the reward standard deviation used for standardization.
pub const STD_FLOOR: f64 = 1e-8;
/// Advantages are clipped to `±ADVANTAGE_CLIP`.
pub const ADVANTAGE_CLIP: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLogProb {
    pub value: f64,
    pub t: usize,
    pub trajectory_id: usize,
}

/// `-½ Σ_i M_i d⁻¹ Σ_j ((z_ij - mu_ij) / sigma)²` for rows of width `d`.
pub fn masked_logp_value(z_s: &[f64], mu: &[f64], sigma: f64, mask: &[bool], d: usize) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidSigma(sigma));
    }
    if z_s.len() != mu.len() || z_s.len() != mask.len() * d {
        return Err(Error::InvalidMolecule("log-prob shape mismatch".into()));
    }
    let inv = 1.0 / sigma;
    let mut total = 0.0;
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let mut row = 0.0;
        for j in i * d..(i + 1) * d {
            let r = (z_s[j] - mu[j]) * inv;
            row += r * r;
        }
        total += row / d as f64;
    }
    Ok(-0.5 * total)
}

pub fn masked_logp(z_s: &[f64], mu: &[f64], sigma: f64, mask: &[bool], d: usize, t: usize, trajectory_id: usize) -> Result<StepLogProb> {
    Ok(StepLogProb { value: masked_logp_value(z_s, mu, sigma, mask, d)?, t, trajectory_id })
}

/// `∂ logp / ∂ mu` for [`masked_logp_value`].
pub fn masked_logp_grad_mean(z_s: &[f64], mu: &[f64], sigma: f64, mask: &[bool], d: usize) -> Vec<f64> {
    let scale = 1.0 / (sigma * sigma * d as f64);
    let mut g = vec![0.0; mu.len()];
    for (i, &m) in mask.iter().enumerate() {
        if m {
            for j in i * d..(i + 1) * d {
                g[j] = (z_s[j] - mu[j]) * scale;
            }
        }
    }
    g
}

/// `p_new / p_old` for the same recorded transition.
pub fn importance_ratio(new: &StepLogProb, old: &StepLogProb) -> Result<f64> {
    if new.t != old.t || new.trajectory_id != old.trajectory_id {
        return Err(Error::MisalignedRatio);
    }
    Ok((new.value - old.value).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageStats {
    pub mean: f64,
    pub std: f64,
    pub clip_range: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AdvantageMode {
    /// Statistics of the current round's rewards.
    #[default]
    Batch,
    /// Exponential moving statistics across rounds.
    Ema,
}

/// Exponential moving mean and variance of rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningRewardStats {
    pub decay: f64,
    pub mean: f64,
    pub var: f64,
    pub initialized: bool,
}

impl RunningRewardStats {
    pub fn new(decay: f64) -> Self {
        Self { decay, mean: 0.0, var: 0.0, initialized: false }
    }

    pub fn update(&mut self, rewards: &[f64]) {
        let (m, s) = population_stats(rewards);
        if !self.initialized {
            self.mean = m;
            self.var = s * s;
            self.initialized = true;
        } else {
            self.mean = self.decay * self.mean + (1.0 - self.decay) * m;
            self.var = self.decay * self.var + (1.0 - self.decay) * s * s;
        }
    }
}

fn population_stats(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn apply_stats(rewards: &[f64], mean: f64, std: f64) -> (Vec<f64>, AdvantageStats) {
    let std = std.max(STD_FLOOR);
    let adv = rewards
        .iter()
        .map(|r| ((r - mean) / std).clamp(-ADVANTAGE_CLIP, ADVANTAGE_CLIP))
        .collect();
    (adv, AdvantageStats { mean, std, clip_range: ADVANTAGE_CLIP })
}

/// `clip((r - mean) / max(std, 1e-8), -1, 1)` with population batch statistics.
pub fn standardize_advantages(rewards: &[f64]) -> Result<(Vec<f64>, AdvantageStats)> {
    if rewards.len() < 2 {
        return Err(Error::InsufficientBatch(rewards.len()));
    }
    let (mean, std) = population_stats(rewards);
    Ok(apply_stats(rewards, mean, std))
}

/// Standardize with running statistics after folding in this batch.
pub fn standardize_with_running(rewards: &[f64], running: &mut RunningRewardStats) -> Result<(Vec<f64>, AdvantageStats)> {
    if rewards.len() < 2 {
        return Err(Error::InsufficientBatch(rewards.len()));
    }
    running.update(rewards);
    Ok(apply_stats(rewards, running.mean, running.var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub epsilon: f64,
    pub inner_epochs: usize,
    /// Transitions per optimizer step.
    pub minibatch: usize,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { epsilon: 0.2, inner_epochs: 1, minibatch: 800 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoOutput {
    /// `Σ min(I·A, clip(I, 1-ε, 1+ε)·A)`.
    pub objective: f64,
    /// `∂ objective / ∂ logp_new` per term.
    pub grad_logp: Vec<f64>,
    /// Terms whose gradient the clip removed.
    pub clipped: usize,
}

/// Clipped surrogate over per-transition ratios with broadcast advantages.
pub fn ppo_objective(ratios: &[f64], advantages: &[f64], cfg: &ClipConfig) -> PpoOutput {
    assert_eq!(ratios.len(), advantages.len());
    let (lo, hi) = (1.0 - cfg.epsilon, 1.0 + cfg.epsilon);
    let mut objective = 0.0;
    let mut clipped = 0;
    let grad_logp = ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| {
            let unclipped = r * a;
            let clipped_term = r.clamp(lo, hi) * a;
            objective += unclipped.min(clipped_term);
            // d(I·A)/d logp = I·A; the clipped branch is constant in logp.
            let active = if a >= 0.0 { r <= hi } else { r >= lo };
            if active {
                unclipped
            } else {
                clipped += 1;
                0.0
            }
        })
        .collect();
    PpoOutput { objective, grad_logp, clipped }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self { step: 0, m: vec![0.0; dim], v: vec![0.0; dim] }
    }
}

/// One decoupled-weight-decay Adam step *descending* `grad`.
pub fn adamw_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &AdamWConfig) -> Result<()> {
    assert_eq!(params.len(), grad.len());
    assert_eq!(state.m.len(), params.len(), "optimizer state dimension mismatch");
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::AbortUpdate);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        params[i] *= 1.0 - cfg.lr * cfg.weight_decay;
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// One recorded transition: trajectory `k`, step index `j` (state `j` → `j+1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionRef {
    pub trajectory: usize,
    pub step: usize,
}

/// Recorded log-probability of a transition under the sampling parameters.
pub fn recorded_logp(traj: &Trajectory, step: usize, trajectory_id: usize) -> Result<StepLogProb> {
    let state = &traj.states[step];
    let next = &traj.states[step + 1];
    masked_logp(&next.z, &traj.means[step], traj.sigmas[step], &state.mask, state.width(), state.t, trajectory_id)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateGradient {
    /// Mean surrogate objective over the transitions.
    pub objective: f64,
    /// Gradient of the mean objective with respect to the parameters.
    pub grad: Vec<f64>,
    pub mean_ratio: f64,
    pub clipped: usize,
    pub count: usize,
}

/// Per-transition log-probability under `params` and the gradient of
/// `weight · logp` accumulated into `grad`.
fn logp_and_accumulate(
    params: &PolicyParams,
    traj: &Trajectory,
    step: usize,
    trajectory_id: usize,
    schedule: &NoiseSchedule,
    weight: impl FnOnce(f64) -> f64,
    grad: &mut [f64],
) -> Result<f64> {
    let state = &traj.states[step];
    let next = &traj.states[step + 1];
    let sigma = traj.sigmas[step];
    let d = state.width();
    let (mu, _, cache) = reverse_mean(params, state, schedule)?;
    let logp = masked_logp(&next.z, &mu, sigma, &state.mask, d, state.t, trajectory_id)?;
    let w = weight(logp.value);
    if w != 0.0 {
        let g_mu = masked_logp_grad_mean(&next.z, &mu, sigma, &state.mask, d);
        let coef = noise_coefficient(schedule, state.t)?;
        let f = state.features;
        let mut up = DenoiserOutput::zeros(state.capacity(), f);
        for i in 0..state.capacity() {
            if !state.mask[i] {
                continue;
            }
            for k in 0..3 {
                up.eps_x[i][k] = -coef * w * g_mu[i * d + k];
            }
            for k in 0..f {
                up.eps_h[i * f + k] = -coef * w * g_mu[i * d + 3 + k];
            }
        }
        backward_into(params, &cache, &up, grad)?;
    }
    Ok(logp.value)
}

const CHUNK: usize = 16;

/// Clipped-surrogate objective and parameter gradient over `batch`.
///
/// `old_logp[k][j]` is the recorded log-probability of transition `j` of
/// trajectory `k`. Work is split into fixed chunks summed in index order, so
/// the result does not depend on the thread count.
pub fn surrogate_gradient(
    params: &PolicyParams,
    trajectories: &[Trajectory],
    old_logp: &[Vec<f64>],
    advantages: &[f64],
    batch: &[TransitionRef],
    schedule: &NoiseSchedule,
    cfg: &ClipConfig,
) -> Result<SurrogateGradient> {
    let p = params.len();
    let partials: Vec<Result<(Vec<f64>, f64, f64, usize)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; p];
            let mut obj = 0.0;
            let mut ratio_sum = 0.0;
            let mut clipped = 0;
            for tr in chunk {
                let a = advantages[tr.trajectory];
                let old = old_logp[tr.trajectory][tr.step];
                let mut term = None;
                logp_and_accumulate(params, &trajectories[tr.trajectory], tr.step, tr.trajectory, schedule, |new| {
                    let ratio = (new - old).exp();
                    let out = ppo_objective(&[ratio], &[a], cfg);
                    term = Some((ratio, out.objective, out.clipped));
                    out.grad_logp[0]
                }, &mut grad)?;
                let (ratio, o, c) = term.unwrap();
                obj += o;
                ratio_sum += ratio;
                clipped += c;
            }
            Ok((grad, obj, ratio_sum, clipped))
        })
        .collect();
    let mut grad = vec![0.0; p];
    let mut objective = 0.0;
    let mut ratio_sum = 0.0;
    let mut clipped = 0;
    for part in partials {
        let (g, o, r, c) = part?;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        objective += o;
        ratio_sum += r;
        clipped += c;
    }
    let n = batch.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(SurrogateGradient { objective: objective / n, grad, mean_ratio: ratio_sum / n, clipped, count: batch.len() })
}

/// Gradient of `mean(A_k · logp_new)` (the unclipped score-function surrogate).
pub fn reinforce_gradient(
    params: &PolicyParams,
    trajectories: &[Trajectory],
    advantages: &[f64],
    batch: &[TransitionRef],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.len()];
    for tr in batch {
        let a = advantages[tr.trajectory];
        logp_and_accumulate(params, &trajectories[tr.trajectory], tr.step, tr.trajectory, schedule, |_| a, &mut grad)?;
    }
    let n = batch.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(grad)
}

/// Log-probability of a recorded transition under `params`.
pub fn transition_logp(params: &PolicyParams, traj: &Trajectory, step: usize, trajectory_id: usize, schedule: &NoiseSchedule) -> Result<StepLogProb> {
    let state = &traj.states[step];
    let (mu, _, _) = reverse_mean(params, state, schedule)?;
    masked_logp(&traj.states[step + 1].z, &mu, traj.sigmas[step], &state.mask, state.width(), state.t, trajectory_id)
}
