//! Noise schedules and the closed-form quantities of the forward process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            other => Err(Error::Contract(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Largest permitted per-step beta.
const MAX_BETA: f64 = 0.999;
/// Cap on beta at t = 1, which keeps ᾱ₁ above 0.99 for short schedules.
const FIRST_BETA_CAP: f64 = 0.005;
const COSINE_OFFSET: f64 = 0.008;

/// ᾱ_t for t = 1..=T together with the per-step and posterior quantities.
///
/// All arrays are indexed by `t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
    betas: Vec<f64>,
    /// Variance of q(z_{t-1} | z_t, z_0); zero at t = 1.
    posterior_variance: Vec<f64>,
    /// Log posterior variance with the t = 1 entry replaced by t = 2.
    posterior_log_variance_clipped: Vec<f64>,
    /// Coefficient of z_0 in the posterior mean.
    posterior_mean_coef0: Vec<f64>,
    /// Coefficient of z_t in the posterior mean.
    posterior_mean_coeft: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Contract(format!(
                "a noise schedule needs at least 2 steps, got {steps}"
            )));
        }
        let mut betas = match kind {
            ScheduleKind::Cosine => cosine_betas(steps),
            ScheduleKind::Linear => linear_betas(steps),
        };
        betas[0] = betas[0].min(FIRST_BETA_CAP);
        Ok(Self::from_betas(kind, betas))
    }

    /// Build from explicit betas (all in (0, 1)).
    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Self {
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let n = betas.len();
        let mut posterior_variance = vec![0.0; n];
        let mut coef0 = vec![0.0; n];
        let mut coeft = vec![0.0; n];
        for i in 0..n {
            let ab_prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            let one_minus = 1.0 - alpha_bar[i];
            posterior_variance[i] = betas[i] * (1.0 - ab_prev) / one_minus;
            coef0[i] = betas[i] * ab_prev.sqrt() / one_minus;
            coeft[i] = (1.0 - betas[i]).sqrt() * (1.0 - ab_prev) / one_minus;
        }
        let mut clipped: Vec<f64> = posterior_variance.iter().map(|v| v.ln()).collect();
        clipped[0] = posterior_variance[1].ln();
        Self {
            kind,
            alpha_bar,
            betas,
            posterior_variance,
            posterior_log_variance_clipped: clipped,
            posterior_mean_coef0: coef0,
            posterior_mean_coeft: coeft,
        }
    }

    /// Schedule over a subsequence of timesteps, as used by strided sampling.
    ///
    /// `timesteps` must be strictly increasing and within 1..=T. The result
    /// has one step per entry; its ᾱ values are this schedule's ᾱ at those
    /// timesteps.
    pub fn respaced(&self, timesteps: &[usize]) -> Result<Self> {
        if timesteps.len() < 2
            || timesteps.windows(2).any(|w| w[0] >= w[1])
            || timesteps[0] < 1
            || *timesteps.last().unwrap() > self.len()
        {
            return Err(Error::Contract(format!(
                "invalid respacing {timesteps:?} for T = {}",
                self.len()
            )));
        }
        let mut prev = 1.0;
        let betas = timesteps
            .iter()
            .map(|&t| {
                let ab = self.alpha_bar(t);
                let b = 1.0 - ab / prev;
                prev = ab;
                b
            })
            .collect();
        Ok(Self::from_betas(self.kind, betas))
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps T.
    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variance[t - 1]
    }

    pub fn posterior_log_variance_clipped(&self, t: usize) -> f64 {
        self.posterior_log_variance_clipped[t - 1]
    }

    /// (coefficient of z_0, coefficient of z_t) in the posterior mean.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        (self.posterior_mean_coef0[t - 1], self.posterior_mean_coeft[t - 1])
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::Contract(format!(
                "timestep {t} outside 1..={}",
                self.len()
            )));
        }
        Ok(())
    }
}

fn cosine_betas(steps: usize) -> Vec<f64> {
    let f = |t: f64| {
        let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    (1..=steps)
        .map(|t| {
            let b = 1.0 - f(t as f64) / f(t as f64 - 1.0);
            b.clamp(1e-8, MAX_BETA)
        })
        .collect()
}

/// Linear betas in the usual 1e-4..0.02 range, rescaled so that the total
/// noise is comparable for any T.
fn linear_betas(steps: usize) -> Vec<f64> {
    let scale = 1000.0 / steps as f64;
    let lo = (scale * 1e-4).min(FIRST_BETA_CAP);
    let hi = (scale * 0.02).min(MAX_BETA);
    (0..steps)
        .map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_invariants(s: &NoiseSchedule) {
        let ab = s.alpha_bars();
        assert!(ab.windows(2).all(|w| w[1] < w[0]), "not strictly decreasing");
        assert!(ab[0] > 0.99, "alpha_bar_1 = {}", ab[0]);
        assert!(*ab.last().unwrap() < 0.05);
        assert!(ab.iter().all(|&a| a > 0.0 && a <= 1.0));
        for t in 2..=s.len() {
            assert!(s.posterior_variance(t) > 0.0, "posterior variance at {t}");
        }
    }

    #[test]
    fn cosine_100() {
        let s = NoiseSchedule::new(100, ScheduleKind::Cosine).unwrap();
        check_invariants(&s);
    }

    #[test]
    fn linear_10_betas_in_unit_interval() {
        let s = NoiseSchedule::new(10, ScheduleKind::Linear).unwrap();
        assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
    }

    #[test]
    fn single_step_is_rejected() {
        assert!(NoiseSchedule::new(1, ScheduleKind::Cosine).is_err());
        assert!(NoiseSchedule::new(0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn invariants_hold_for_all_lengths() {
        for t in 2..=1000 {
            for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
                check_invariants(&NoiseSchedule::new(t, kind).unwrap());
            }
        }
    }

    #[test]
    fn posterior_mean_reproduces_z0_when_zt_is_noise_free() {
        // With z_t = sqrt(ab_t) z0 the posterior mean is sqrt(ab_{t-1}) z0.
        let s = NoiseSchedule::new(50, ScheduleKind::Cosine).unwrap();
        for t in 2..=50 {
            let (c0, ct) = s.posterior_mean_coefs(t);
            let mean = c0 + ct * s.alpha_bar(t).sqrt();
            assert!((mean - s.alpha_bar(t - 1).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn respacing_keeps_alpha_bar_at_selected_steps() {
        let s = NoiseSchedule::new(100, ScheduleKind::Cosine).unwrap();
        let steps = [1, 10, 40, 100];
        let r = s.respaced(&steps).unwrap();
        for (i, &t) in steps.iter().enumerate() {
            assert!((r.alpha_bar(i + 1) - s.alpha_bar(t)).abs() < 1e-15);
        }
        assert!(s.respaced(&[3, 3]).is_err());
    }
}
