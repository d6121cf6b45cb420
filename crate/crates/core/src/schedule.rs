//! Variance schedules for the forward noising chain.
//!
//! Steps are 0-indexed: step `t` maps latent `t-1` to latent `t`, and latent
//! `-1` is clean data, so `alpha_bar[-1]` is taken as 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    /// `1 - alpha_bar`, accumulated directly so that `one_minus_alpha_bar[0] == beta[0]`.
    one_minus_alpha_bar: Vec<f64>,
    /// Fine-schedule index fed to the denoiser's time embedding for each step.
    model_t: Vec<usize>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas; `model_t` defaults to `0..n`.
    pub fn from_betas(beta: Vec<f64>, model_t: Option<Vec<usize>>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(b.is_finite() && **b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let n = beta.len();
        let model_t = model_t.unwrap_or_else(|| (0..n).collect());
        if model_t.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: model_t.len(),
            });
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(n);
        let mut one_minus = Vec::with_capacity(n);
        let (mut ab, mut om) = (1.0f64, 0.0f64);
        for (&a, &b) in alpha.iter().zip(&beta) {
            // 1 - ab*a = (1 - ab) + ab*b
            om += ab * b;
            ab *= a;
            alpha_bar.push(ab);
            one_minus.push(om);
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) || alpha_bar[0] >= 1.0 {
            return Err(Error::InvalidArgument("alpha_bar must be strictly decreasing and below 1".into()));
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            one_minus_alpha_bar: one_minus,
            model_t,
        })
    }

    /// Keeps `n_coarse` evenly spaced steps of `fine` (always including its
    /// first and last step), with betas chosen so that each kept step has the
    /// same `alpha_bar` as in the fine schedule.
    pub fn respaced(fine: &NoiseSchedule, n_coarse: usize) -> Result<Self> {
        let n = fine.n_steps();
        if n_coarse == 0 || n_coarse > n {
            return Err(Error::InvalidArgument(format!("cannot respace {n} steps into {n_coarse}")));
        }
        let idx: Vec<usize> = if n_coarse == 1 {
            vec![n - 1]
        } else {
            (0..n_coarse)
                .map(|k| ((k * (n - 1)) as f64 / (n_coarse - 1) as f64).round() as usize)
                .collect()
        };
        let mut prev = 1.0;
        let beta = idx
            .iter()
            .map(|&i| {
                let ab = fine.alpha_bar[i];
                let b = 1.0 - ab / prev;
                prev = ab;
                b
            })
            .collect();
        Self::from_betas(beta, Some(idx))
    }

    pub fn n_steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn one_minus_alpha_bar(&self) -> &[f64] {
        &self.one_minus_alpha_bar
    }

    pub fn model_t(&self, t: usize) -> usize {
        self.model_t[t]
    }

    pub fn model_timesteps(&self) -> &[usize] {
        &self.model_t
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t < self.n_steps() {
            Ok(())
        } else {
            Err(Error::StepOutOfRange {
                t,
                n_steps: self.n_steps(),
            })
        }
    }

    /// `alpha_bar[t-1]`, with `alpha_bar[-1] = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn one_minus_alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.one_minus_alpha_bar[t - 1]
        }
    }

    /// Forward-process posterior variance `(1 - ab[t-1]) / (1 - ab[t]) * beta[t]`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.one_minus_alpha_bar_prev(t) / self.one_minus_alpha_bar[t] * self.beta[t]
    }

    /// Variance of the reverse transition at step `t`. The posterior variance
    /// vanishes at step 0, so step 0 borrows step 1's value (or `beta[0]` on
    /// a single-step schedule).
    pub fn reverse_variance(&self, t: usize) -> f64 {
        match t {
            0 if self.n_steps() > 1 => self.posterior_variance(1),
            0 => self.beta[0],
            _ => self.posterior_variance(t),
        }
    }

    /// Coefficients `(c0, ct)` of the posterior mean `c0 * x0 + ct * x_t`.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let om = self.one_minus_alpha_bar[t];
        let c0 = self.alpha_bar_prev(t).sqrt() * self.beta[t] / om;
        let ct = self.alpha[t].sqrt() * self.one_minus_alpha_bar_prev(t) / om;
        (c0, ct)
    }

    /// Coefficients `(a, k)` of the epsilon-to-mean map `mu = a * (x_t - k * eps)`.
    pub fn eps_mean_coefficients(&self, t: usize) -> (f64, f64) {
        (1.0 / self.alpha[t].sqrt(), self.beta[t] / self.one_minus_alpha_bar[t].sqrt())
    }
}

/// Linear beta ramp from `beta_start` to `beta_end` inclusive.
pub fn make_linear_schedule(n_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
    }
    if !(beta_start.is_finite() && beta_end.is_finite()) {
        return Err(Error::InvalidArgument("beta endpoints must be finite".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta = if n_steps == 1 {
        vec![beta_start]
    } else {
        let span = beta_end - beta_start;
        (0..n_steps)
            .map(|i| {
                if i == n_steps - 1 {
                    beta_end
                } else {
                    beta_start + span * i as f64 / (n_steps - 1) as f64
                }
            })
            .collect()
    };
    NoiseSchedule::from_betas(beta, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_uses_beta_start() {
        let s = make_linear_schedule(1, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(), &[1e-4]);
        assert_eq!(s.reverse_variance(0), 1e-4);
    }

    #[test]
    fn two_step_products() {
        let s = make_linear_schedule(2, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta(), &[1e-4, 0.02]);
        assert!((s.alpha_bar()[0] - 0.9999).abs() < 1e-15);
        assert!((s.alpha_bar()[1] - 0.9999 * 0.98).abs() < 1e-15);
        assert!((s.alpha_bar()[1] - 0.979902).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_endpoints() {
        assert!(make_linear_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.0, 0.02).is_err());
        assert!(make_linear_schedule(10, 0.03, 0.02).is_err());
        assert!(make_linear_schedule(10, 1e-4, 1.0).is_err());
        assert!(make_linear_schedule(10, f64::NAN, 0.02).is_err());
        assert!(make_linear_schedule(10, 1e-4, f64::INFINITY).is_err());
    }

    #[test]
    fn first_step_complement_is_exact() {
        let s = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.one_minus_alpha_bar()[0], s.beta()[0]);
        assert_eq!(s.posterior_coefficients(0), (1.0, 0.0));
    }

    #[test]
    fn respacing_preserves_alpha_bar() {
        let fine = make_linear_schedule(1000, 1e-4, 0.02).unwrap();
        let coarse = NoiseSchedule::respaced(&fine, 10).unwrap();
        assert_eq!(coarse.n_steps(), 10);
        assert_eq!(coarse.model_t(0), 0);
        assert_eq!(coarse.model_t(9), 999);
        for t in 0..10 {
            let i = coarse.model_t(t);
            let rel = (coarse.alpha_bar()[t] - fine.alpha_bar()[i]).abs() / fine.alpha_bar()[i];
            assert!(rel < 1e-12, "step {t}: rel err {rel}");
        }
        assert!(NoiseSchedule::respaced(&fine, 0).is_err());
        assert!(NoiseSchedule::respaced(&fine, 1001).is_err());
    }
}
