//! Variance-preserving noise schedules.
//!
//! `alpha[t]² + sigma[t]² = 1` for every integer step `0..=T`. Both kinds
//! clip the per-step retention `alpha[t]²/alpha[t-1]²` from below at 1e-3
//! (so no reverse step divides by a vanishing `alpha_{t|s}`), then blend in
//! a precision floor `s = 1e-5`: `alpha² ← (1 - 2s)·alpha² + s`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PRECISION: f64 = 1e-5;
pub const SIGMA_FLOOR: f64 = 1e-6;
const MIN_STEP_RETENTION: f64 = 1e-3;
const COSINE_OFFSET: f64 = 0.008;
/// Largest allowed `alpha_T`.
pub const ALPHA_T_MAX: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Polynomial,
    Cosine,
}

impl ScheduleKind {
    pub fn code(self) -> u8 {
        match self {
            ScheduleKind::Polynomial => 0,
            ScheduleKind::Cosine => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ScheduleKind::Polynomial),
            1 => Some(ScheduleKind::Cosine),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    steps: usize,
    alpha2: Vec<f64>,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

/// Coefficients of one reverse transition `t → r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    /// `alpha_{t|r} = alpha_t / alpha_r`
    pub alpha_t_given_r: f64,
    /// `sigma_{t|r}`, with `sigma_{t|r}² = sigma_t² - alpha_{t|r}² sigma_r²`
    pub sigma_t_given_r: f64,
    /// Reverse-kernel standard deviation `sigma_{t|r} sigma_r / sigma_t`.
    pub sigma_t_to_r: f64,
}

impl Transition {
    pub fn sigma2_t_given_r(&self) -> f64 {
        self.sigma_t_given_r * self.sigma_t_given_r
    }
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    NoiseSchedule::new(steps, kind)
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidSchedule(format!("need T >= 2, got {steps}")));
        }
        let tt = steps as f64;
        let raw: Vec<f64> = (0..=steps)
            .map(|t| {
                let x = t as f64 / tt;
                match kind {
                    ScheduleKind::Polynomial => (1.0 - x * x).powi(2),
                    ScheduleKind::Cosine => {
                        let f = |u: f64| ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                        (f(x) / f(0.0)).min(1.0)
                    }
                }
            })
            .collect();

        let mut clipped = Vec::with_capacity(steps + 1);
        clipped.push(1.0);
        for t in 1..=steps {
            let ratio = (raw[t] / raw[t - 1]).clamp(MIN_STEP_RETENTION, 1.0);
            clipped.push(clipped[t - 1] * ratio);
        }
        // Keep alpha_T below ALPHA_T_MAX for short schedules.
        let cap = (0.9 * ALPHA_T_MAX * ALPHA_T_MAX - PRECISION) / (1.0 - 2.0 * PRECISION);
        if clipped[steps] > cap {
            clipped[steps] = cap.min(clipped[steps - 1] * 0.5);
        }

        let alpha2: Vec<f64> = clipped.iter().map(|a| (1.0 - 2.0 * PRECISION) * a + PRECISION).collect();
        let alpha = alpha2.iter().map(|a| a.sqrt()).collect();
        let sigma = alpha2.iter().map(|a| (1.0 - a).sqrt().max(SIGMA_FLOOR)).collect();
        Ok(Self { kind, steps, alpha2, alpha, sigma })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    pub fn snr(&self, t: usize) -> f64 {
        self.alpha2[t] / (1.0 - self.alpha2[t])
    }

    /// Weight `½(SNR(t-1)/SNR(t) - 1)` of the SNR-weighted noise-prediction loss.
    pub fn loss_weight(&self, t: usize) -> f64 {
        0.5 * (self.snr(t - 1) / self.snr(t) - 1.0)
    }

    pub fn transition(&self, t: usize, r: usize) -> Result<Transition> {
        if r >= t || t > self.steps {
            return Err(Error::InvalidStepPair { t, r });
        }
        let a_t = self.alpha2[t];
        let a_r = self.alpha2[r];
        let alpha_t_given_r = self.alpha[t] / self.alpha[r];
        // sigma_t² - (a_t/a_r)(1 - a_r) simplifies to (a_r - a_t)/a_r.
        let sigma2 = ((a_r - a_t) / a_r).max(0.0);
        let sigma_t_given_r = sigma2.sqrt();
        let sigma_t_to_r = sigma_t_given_r * self.sigma[r] / self.sigma[t];
        Ok(Transition { alpha_t_given_r, sigma_t_given_r, sigma_t_to_r })
    }
}

pub fn transition_params(s: &NoiseSchedule, t: usize, r: usize) -> Result<Transition> {
    s.transition(t, r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_short_schedule() {
        assert!(matches!(make_schedule(1, ScheduleKind::Polynomial), Err(Error::InvalidSchedule(_))));
    }

    #[test]
    fn polynomial_endpoints() {
        let s = make_schedule(1000, ScheduleKind::Polynomial).unwrap();
        // alpha_0² = 1 - s  ⇒  alpha_0 = 1 - s/2 + O(s²)
        assert!((s.alpha(0) - (1.0 - 1e-5)).abs() < 1e-5);
        assert!(s.alpha(0) >= 1.0 - 1e-4);
        assert!(s.alpha(1000) <= 1e-2);
    }

    #[test]
    fn two_step_schedule_shape() {
        for kind in [ScheduleKind::Polynomial, ScheduleKind::Cosine] {
            let s = make_schedule(2, kind).unwrap();
            assert_eq!(s.alphas().len(), 3);
            assert!(s.alpha(0) > s.alpha(1) && s.alpha(1) > s.alpha(2));
            assert!(s.alpha(2) <= ALPHA_T_MAX);
        }
    }

    #[test]
    fn step_pair_order_enforced() {
        let s = make_schedule(10, ScheduleKind::Polynomial).unwrap();
        assert!(matches!(s.transition(3, 3), Err(Error::InvalidStepPair { .. })));
        assert!(matches!(s.transition(3, 5), Err(Error::InvalidStepPair { .. })));
        assert!(s.transition(11, 0).is_err());
    }

    #[test]
    fn reverse_sigma_bounded_by_sigma_r() {
        let s = make_schedule(100, ScheduleKind::Polynomial).unwrap();
        for t in 1..=100 {
            let tr = s.transition(t, t - 1).unwrap();
            assert!(tr.sigma2_t_given_r() >= 0.0);
            assert!(tr.sigma_t_to_r <= s.sigma(t - 1));
        }
    }

    #[test]
    fn last_step_retention_is_clipped() {
        let s = make_schedule(100, ScheduleKind::Polynomial).unwrap();
        let tr = s.transition(100, 99).unwrap();
        assert!(tr.alpha_t_given_r * tr.alpha_t_given_r >= 0.9e-3);
    }
}
