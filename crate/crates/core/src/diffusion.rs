//! Forward noising, Gaussian reverse transitions, the noise-prediction loss,
//! the variational bound, and trajectory sampling.

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mdp::DenoisingTrajectory;
use crate::model::DenoiserParams;
use crate::rng::{self, Rng};
use crate::schedule::NoiseSchedule;
use crate::waveform::{Condition, Waveform};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn standard_normal(len: usize, rng: &mut impl rand::Rng) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Log-density of `N(mean, var I)` at `x`, summed over coordinates.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], var: f64) -> f64 {
    let sq: f64 = x.iter().zip(mean).map(|(a, m)| (a - m) * (a - m)).sum();
    -0.5 * sq / var - 0.5 * x.len() as f64 * (LN_2PI + var.ln())
}

/// `sqrt(ab[t]) x0 + sqrt(1 - ab[t]) eps`.
pub fn noised(x0: &Waveform, t: usize, sched: &NoiseSchedule, eps: &Waveform) -> Result<Waveform> {
    sched.check_step(t)?;
    eps.check_len(x0.len())?;
    let a = sched.alpha_bar()[t].sqrt();
    let s = sched.one_minus_alpha_bar()[t].sqrt();
    Waveform::new(x0.samples().iter().zip(eps.samples()).map(|(x, e)| a * x + s * e).collect())
}

/// Draws `x_t ~ q(x_t | x0)` and returns it with the noise that produced it.
pub fn forward_marginal_sample(x0: &Waveform, t: usize, sched: &NoiseSchedule, rng: &mut impl rand::Rng) -> Result<(Waveform, Waveform)> {
    sched.check_step(t)?;
    let eps = Waveform::new(standard_normal(x0.len(), rng))?;
    Ok((noised(x0, t, sched, &eps)?, eps))
}

/// One application of `q(x_t | x_{t-1})`.
pub fn forward_step(x_prev: &Waveform, t: usize, sched: &NoiseSchedule, rng: &mut impl rand::Rng) -> Result<Waveform> {
    sched.check_step(t)?;
    let a = sched.alpha()[t].sqrt();
    let s = sched.beta()[t].sqrt();
    Waveform::new(
        x_prev
            .samples()
            .iter()
            .map(|x| {
                a * x
                    + s * {
                        let z: f64 = StandardNormal.sample(rng);
                        z
                    }
            })
            .collect(),
    )
}

/// Mean of `q(x_{t-1} | x_t, x0)`.
pub fn posterior_mean(x0: &Waveform, x_t: &Waveform, t: usize, sched: &NoiseSchedule) -> Result<Waveform> {
    sched.check_step(t)?;
    x_t.check_len(x0.len())?;
    let (c0, ct) = sched.posterior_coefficients(t);
    Waveform::new(x0.samples().iter().zip(x_t.samples()).map(|(a, b)| c0 * a + ct * b).collect())
}

/// Records the reverse-transition mean `mu_theta(x_t, c, t)`.
pub fn mean_on_tape(params: &DenoiserParams, tape: &mut Tape<'_>, x_t: Var, c: &Condition, t: usize, sched: &NoiseSchedule) -> Result<Var> {
    let eps = params.eps_on_tape(tape, x_t, c, sched.model_t(t))?;
    let (a, k) = sched.eps_mean_coefficients(t);
    let ke = tape.scale(eps, k);
    let d = tape.sub(x_t, ke);
    Ok(tape.scale(d, a))
}

/// Records `log N(action; mu, sigma_t^2 I)` given an already recorded mean.
pub fn log_density_on_tape(tape: &mut Tape<'_>, action: &Waveform, mean: Var, var: f64) -> Var {
    let a = tape.constant(action.samples().to_vec());
    let diff = tape.sub(a, mean);
    let sq = tape.sq_norm(diff);
    let q = tape.scale(sq, -0.5 / var);
    tape.add_const(q, -0.5 * action.len() as f64 * (LN_2PI + var.ln()))
}

/// Records `log p_theta(action | x_t, c)` at step `t`.
pub fn logprob_on_tape(
    params: &DenoiserParams,
    tape: &mut Tape<'_>,
    x_t: &Waveform,
    action: &Waveform,
    c: &Condition,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Var> {
    sched.check_step(t)?;
    action.check_len(x_t.len())?;
    let x = tape.constant(x_t.samples().to_vec());
    let mu = mean_on_tape(params, tape, x, c, t, sched)?;
    Ok(log_density_on_tape(tape, action, mu, sched.reverse_variance(t)))
}

/// Reverse step with explicit injected noise (`None` means no noise).
pub fn reverse_step_with_noise(
    params: &DenoiserParams,
    x_t: &Waveform,
    c: &Condition,
    t: usize,
    sched: &NoiseSchedule,
    noise: Option<&[f64]>,
) -> Result<(Waveform, f64)> {
    sched.check_step(t)?;
    let mut tape = params.tape();
    let x = tape.constant(x_t.samples().to_vec());
    let mu = mean_on_tape(params, &mut tape, x, c, t, sched).map_err(|e| match e {
        Error::NonFiniteActivation { .. } => Error::NonFiniteStep { t },
        other => other,
    })?;
    let var = sched.reverse_variance(t);
    let sd = var.sqrt();
    let mean = tape.value(mu);
    let samples: Vec<f64> = match noise {
        Some(z) if t > 0 => {
            if z.len() != mean.len() {
                return Err(Error::DimensionMismatch {
                    expected: mean.len(),
                    got: z.len(),
                });
            }
            mean.iter().zip(z).map(|(m, e)| m + sd * e).collect()
        }
        _ => mean.to_vec(),
    };
    if !samples.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteStep { t });
    }
    let x_prev = Waveform::new(samples)?;
    let lp = log_density_on_tape(&mut tape, &x_prev, mu, var);
    Ok((x_prev, tape.scalar(lp)))
}

/// Samples `x_{t-1} ~ N(mu_theta, sigma_t^2 I)`; step 0 returns the mean.
pub fn reverse_step(
    params: &DenoiserParams,
    x_t: &Waveform,
    c: &Condition,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut impl rand::Rng,
) -> Result<(Waveform, f64)> {
    let z = if t > 0 { Some(standard_normal(x_t.len(), rng)) } else { None };
    reverse_step_with_noise(params, x_t, c, t, sched, z.as_deref())
}

/// Records the noise-prediction loss `||eps - eps_theta(x_t, c, t)||` (squared
/// when `squared` is set), with `x_t` built from `x0` and `eps`.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_loss_on_tape(
    params: &DenoiserParams,
    tape: &mut Tape<'_>,
    x0: &Waveform,
    c: &Condition,
    t: usize,
    eps: &Waveform,
    sched: &NoiseSchedule,
    squared: bool,
) -> Result<Var> {
    let x_t = noised(x0, t, sched, eps)?;
    let x = tape.constant(x_t.into_samples());
    let pred = params.eps_on_tape(tape, x, c, sched.model_t(t))?;
    let target = tape.constant(eps.samples().to_vec());
    let diff = tape.sub(target, pred);
    Ok(if squared { tape.sq_norm(diff) } else { tape.norm(diff) })
}

pub fn ddpm_loss(
    params: &DenoiserParams,
    x0: &Waveform,
    c: &Condition,
    t: usize,
    eps: &Waveform,
    sched: &NoiseSchedule,
    squared: bool,
) -> Result<f64> {
    let mut tape = params.tape();
    let l = ddpm_loss_on_tape(params, &mut tape, x0, c, t, eps, sched, squared)?;
    Ok(tape.scalar(l))
}

/// KL between diagonal Gaussians with isotropic variances.
pub fn gaussian_kl(mean_q: &[f64], var_q: f64, mean_p: &[f64], var_p: f64) -> f64 {
    let d = mean_q.len() as f64;
    let sq: f64 = mean_q.iter().zip(mean_p).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * (d * (var_q / var_p - 1.0 - (var_q / var_p).ln()) + sq / var_p)
}

/// Per-term breakdown of one Monte Carlo draw of the negative variational bound.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundTerms {
    pub prior: f64,
    pub transitions: Vec<f64>,
    pub reconstruction: f64,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.prior + self.transitions.iter().sum::<f64>() + self.reconstruction
    }
}

pub fn elbo_terms(
    params: &DenoiserParams,
    x0: &Waveform,
    c: &Condition,
    sched: &NoiseSchedule,
    rng: &mut impl rand::Rng,
) -> Result<BoundTerms> {
    let n = sched.n_steps();
    let last = n - 1;
    let ab = sched.alpha_bar()[last];
    let prior_mean: Vec<f64> = x0.samples().iter().map(|x| ab.sqrt() * x).collect();
    let prior = gaussian_kl(&prior_mean, sched.one_minus_alpha_bar()[last], &vec![0.0; x0.len()], 1.0);
    let mut transitions = Vec::with_capacity(n.saturating_sub(1));
    for t in 1..n {
        let (x_t, _) = forward_marginal_sample(x0, t, sched, rng)?;
        let target = posterior_mean(x0, &x_t, t, sched)?;
        let mut tape = params.tape();
        let x = tape.constant(x_t.into_samples());
        let mu = mean_on_tape(params, &mut tape, x, c, t, sched)?;
        let kl = gaussian_kl(
            target.samples(),
            sched.posterior_variance(t),
            tape.value(mu),
            sched.reverse_variance(t),
        );
        transitions.push(kl);
    }
    let (x_first, _) = forward_marginal_sample(x0, 0, sched, rng)?;
    let mut tape = params.tape();
    let x = tape.constant(x_first.into_samples());
    let mu = mean_on_tape(params, &mut tape, x, c, 0, sched)?;
    let reconstruction = -gaussian_log_density(x0.samples(), tape.value(mu), sched.reverse_variance(0));
    let terms = BoundTerms {
        prior,
        transitions,
        reconstruction,
    };
    if !terms.total().is_finite() {
        return Err(Error::NonFinite {
            what: "variational bound term".into(),
        });
    }
    Ok(terms)
}

/// One-sample Monte Carlo estimate of the negative variational bound
/// (an upper bound on `-log p_theta(x0 | c)`).
pub fn elbo_bound(params: &DenoiserParams, x0: &Waveform, c: &Condition, sched: &NoiseSchedule, rng: &mut impl rand::Rng) -> Result<f64> {
    Ok(elbo_terms(params, x0, c, sched, rng)?.total())
}

/// Runs the full reverse chain from `x_T ~ N(0, I)`. Deterministic in `seed`.
pub fn sample_trajectory(params: &DenoiserParams, c: &Condition, sched: &NoiseSchedule, seed: u64) -> Result<DenoisingTrajectory> {
    let mut r: Rng = rng::seeded(seed);
    let len = params.shape.data_len;
    let n = sched.n_steps();
    let mut states = Vec::with_capacity(n + 1);
    let mut log_probs = Vec::with_capacity(n);
    states.push(Waveform::new(standard_normal(len, &mut r))?);
    for t in (0..n).rev() {
        let (x_prev, lp) = reverse_step(params, states.last().expect("non-empty"), c, t, sched, &mut r)?;
        states.push(x_prev);
        log_probs.push(lp);
    }
    Ok(DenoisingTrajectory {
        condition: c.clone(),
        states,
        log_probs,
        terminal_reward: None,
        seed,
        policy_version: params.version,
    })
}

/// Draws a uniform fine-schedule step.
pub fn sample_step(sched: &NoiseSchedule, rng: &mut impl rand::Rng) -> usize {
    rng.random_range(0..sched.n_steps())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelShape};
    use crate::schedule::make_linear_schedule;

    fn shape(len: usize) -> ModelShape {
        ModelShape {
            data_len: len,
            hidden: vec![8],
            time_dim: 4,
            cond_dim: 4,
            vocab_size: 4,
        }
    }

    #[test]
    fn zero_noise_scales_x0() {
        let s = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        let x0 = Waveform::new(vec![0.5, -0.25, 1.0]).unwrap();
        let xt = noised(&x0, 6, &s, &Waveform::zeros(3)).unwrap();
        for (a, b) in xt.samples().iter().zip(x0.samples()) {
            assert_eq!(*a, s.alpha_bar()[6].sqrt() * b);
        }
        assert!(noised(&x0, 10, &s, &Waveform::zeros(3)).is_err());
    }

    #[test]
    fn near_identity_at_first_step() {
        let s = make_linear_schedule(10, 1e-8, 0.02).unwrap();
        let x0 = Waveform::new(vec![0.3; 16]).unwrap();
        let mut r = rng::seeded(1);
        let (xt, eps) = forward_marginal_sample(&x0, 0, &s, &mut r).unwrap();
        let bound = s.one_minus_alpha_bar()[0].sqrt();
        let shrink = 1.0 - s.alpha_bar()[0].sqrt();
        for ((a, b), e) in xt.samples().iter().zip(x0.samples()).zip(eps.samples()) {
            assert!((a - b).abs() <= bound * e.abs() + shrink * b.abs() + 1e-15);
        }
    }

    #[test]
    fn posterior_mean_boundaries() {
        let s = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        let x0 = Waveform::new(vec![0.1, -0.7, 0.33]).unwrap();
        let xt = Waveform::new(vec![1.2, 0.4, -2.0]).unwrap();
        assert_eq!(posterior_mean(&x0, &xt, 0, &s).unwrap(), x0);
        let z = Waveform::zeros(3);
        assert!(posterior_mean(&z, &z, 5, &s).unwrap().samples().iter().all(|v| *v == 0.0));
        assert!(posterior_mean(&x0, &Waveform::zeros(2), 5, &s).is_err());
        assert!(posterior_mean(&x0, &xt, 10, &s).is_err());
    }

    #[test]
    fn zero_noise_step_returns_mean_and_peak_density() {
        let s = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        let p = init_params(3, shape(5)).unwrap();
        let c = Condition::new(0, vec![1], 4).unwrap();
        let x = Waveform::new(vec![0.2, -0.1, 0.4, 0.0, 1.0]).unwrap();
        let (xp, lp) = reverse_step_with_noise(&p, &x, &c, 4, &s, Some(&[0.0; 5])).unwrap();
        let var = s.reverse_variance(4);
        assert!((lp - (-2.5 * (2.0 * std::f64::consts::PI * var).ln())).abs() < 1e-9);
        let (xm, _) = reverse_step_with_noise(&p, &x, &c, 4, &s, None).unwrap();
        assert_eq!(xp, xm);
    }

    #[test]
    fn unit_variance_peak() {
        let v = gaussian_log_density(&[0.3], &[0.3], 1.0);
        assert!((v - (-0.918_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn ddpm_loss_identities() {
        let s = make_linear_schedule(10, 1e-4, 0.02).unwrap();
        let p = crate::model::DenoiserParams::zeros(shape(4)).unwrap();
        let c = Condition::new(0, vec![2], 4).unwrap();
        let x0 = Waveform::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        // zero model predicts zero noise: loss against zero noise vanishes
        assert_eq!(ddpm_loss(&p, &x0, &c, 3, &Waveform::zeros(4), &s, false).unwrap(), 0.0);
        let eps = Waveform::new(vec![3.0, 0.0, 4.0, 0.0]).unwrap();
        assert_eq!(ddpm_loss(&p, &x0, &c, 3, &eps, &s, false).unwrap(), 5.0);
        assert_eq!(ddpm_loss(&p, &x0, &c, 3, &eps, &s, true).unwrap(), 25.0);
        assert!(ddpm_loss(&p, &x0, &c, 3, &Waveform::zeros(3), &s, false).is_err());
    }

    #[test]
    fn single_step_bound_has_only_prior_and_reconstruction() {
        let s = make_linear_schedule(1, 1e-2, 1e-2).unwrap();
        let p = crate::model::DenoiserParams::zeros(shape(3)).unwrap();
        let c = Condition::new(0, vec![0], 4).unwrap();
        let x0 = Waveform::zeros(3);
        let mut r = rng::seeded(0);
        let terms = elbo_terms(&p, &x0, &c, &s, &mut r).unwrap();
        assert!(terms.transitions.is_empty());
        assert!(terms.prior.is_finite() && terms.reconstruction.is_finite());
    }

    #[test]
    fn trajectories_are_seed_deterministic() {
        let s = make_linear_schedule(6, 1e-3, 0.3).unwrap();
        let p = init_params(5, shape(6)).unwrap();
        let c = Condition::new(0, vec![1, 3], 4).unwrap();
        let a = sample_trajectory(&p, &c, &s, 42).unwrap();
        let b = sample_trajectory(&p, &c, &s, 42).unwrap();
        let d = sample_trajectory(&p, &c, &s, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.states, d.states);
        assert_eq!(a.log_probs.len(), 6);
        assert_eq!(a.states.len(), 7);
    }
}
