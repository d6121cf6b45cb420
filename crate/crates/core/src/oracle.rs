//! Closed-form one-step instance for checking score-function estimators.
//!
//! State `x_1 ~ N(0, 1)`, action `x_0 ~ N(theta * x_1, sigma^2)`, reward
//! `r(x_0) = -x_0^2`. Then `J(theta) = -(theta^2 + sigma^2)` and
//! `dJ/dtheta = -2 theta`.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::objectives::{Algo, Baseline, ShapedReward};
use crate::rng::{self, stream};

pub const MIN_ROLLOUTS: usize = 1000;
/// Rollouts per batch; batches are the independent units behind the standard error.
pub const ORACLE_BATCH: usize = 16;
pub const Z_LIMIT: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleReward {
    NegSquare,
    Constant(f64),
}

impl OracleReward {
    pub fn eval(self, x0: f64) -> f64 {
        match self {
            OracleReward::NegSquare => -x0 * x0,
            OracleReward::Constant(c) => c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneStepInstance {
    pub theta: f64,
    pub sigma: f64,
    pub reward: OracleReward,
}

impl OneStepInstance {
    pub fn new(theta: f64, sigma: f64) -> Result<Self> {
        Self::with_reward(theta, sigma, OracleReward::NegSquare)
    }

    pub fn with_reward(theta: f64, sigma: f64, reward: OracleReward) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite() && theta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need finite theta and sigma > 0, got theta={theta} sigma={sigma}"
            )));
        }
        Ok(Self { theta, sigma, reward })
    }

    /// `log N(x0; theta * x1, sigma^2)` differentiated in theta.
    pub fn score(&self, x1: f64, x0: f64) -> f64 {
        (x0 - self.theta * x1) * x1 / (self.sigma * self.sigma)
    }

    /// One rollout `(x1, x0)` from its own stream.
    pub fn sample(&self, seed: u64, index: u64) -> (f64, f64) {
        let mut r = rng::rng_for(seed, &[stream::ORACLE, index]);
        let x1: f64 = StandardNormal.sample(&mut r);
        let z: f64 = StandardNormal.sample(&mut r);
        (x1, self.theta * x1 + self.sigma * z)
    }
}

pub fn analytic_value(inst: &OneStepInstance) -> f64 {
    match inst.reward {
        OracleReward::NegSquare => -(inst.theta * inst.theta + inst.sigma * inst.sigma),
        OracleReward::Constant(c) => c,
    }
}

pub fn analytic_grad(inst: &OneStepInstance) -> f64 {
    match inst.reward {
        OracleReward::NegSquare => -2.0 * inst.theta,
        OracleReward::Constant(_) => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    pub estimator: Algo,
    pub theta: f64,
    pub sigma: f64,
    pub n_rollouts: usize,
    pub baseline: Baseline,
    pub estimate: f64,
    pub std_error: f64,
    pub target: f64,
    pub z: f64,
    pub passed: bool,
}

impl fmt::Display for BiasReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let baseline = match self.baseline {
            Baseline::None => "none",
            Baseline::BatchMean => "batch_mean",
        };
        writeln!(f, "bias-test")?;
        writeln!(f, "  estimator   {}", self.estimator)?;
        writeln!(f, "  theta       {:.6}", self.theta)?;
        writeln!(f, "  sigma       {:.6}", self.sigma)?;
        writeln!(f, "  rollouts    {}", self.n_rollouts)?;
        writeln!(f, "  baseline    {baseline}")?;
        writeln!(f, "  estimate    {:+.6}", self.estimate)?;
        writeln!(f, "  std_error   {:.6}", self.std_error)?;
        writeln!(f, "  target      {:+.6}", self.target)?;
        writeln!(f, "  z           {:+.3}", self.z)?;
        write!(f, "  result      {}", if self.passed { "PASS" } else { "FAIL" })
    }
}

impl BiasReport {
    pub fn append_to_log(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{self}\n")?;
        Ok(())
    }
}

/// Per-rollout gradient estimates of one batch. With a batch-mean baseline
/// each rollout is centred on the mean of the others, which keeps it unbiased.
fn batch_estimates(algo: Algo, inst: &OneStepInstance, seed: u64, indices: std::ops::Range<u64>, baseline: Baseline) -> Vec<f64> {
    let rolls: Vec<(f64, f64)> = indices.map(|i| inst.sample(seed, i)).collect();
    let coefs: Vec<f64> = rolls
        .iter()
        .map(|&(x1, x0)| {
            let residual = (x0 - inst.theta * x1) / inst.sigma;
            ShapedReward::new(algo, inst.reward.eval(x0), 0.0, residual * residual, 1.0, 0.0).shaped
        })
        .collect();
    let total: f64 = coefs.iter().sum();
    let n = coefs.len();
    rolls
        .iter()
        .zip(&coefs)
        .map(|(&(x1, x0), &c)| {
            let b = match baseline {
                Baseline::BatchMean if n > 1 => (total - c) / (n - 1) as f64,
                _ => 0.0,
            };
            (c - b) * inst.score(x1, x0)
        })
        .collect()
}

/// Monte Carlo estimate of `dJ/dtheta` with the estimator's beta = 0 reduction.
pub fn estimator_bias_test(algo: Algo, inst: &OneStepInstance, n_rollouts: usize, seed: u64, baseline: Baseline) -> Result<BiasReport> {
    if n_rollouts < MIN_ROLLOUTS {
        return Err(Error::InvalidArgument(format!(
            "n_rollouts must be at least {MIN_ROLLOUTS}, got {n_rollouts}"
        )));
    }
    if matches!(algo, Algo::Rwr | Algo::Onlydl) {
        return Err(Error::InvalidArgument(format!(
            "{algo} has no score-function reduction at beta = 0"
        )));
    }
    let n_batches = n_rollouts.div_ceil(ORACLE_BATCH);
    let batch_means: Vec<f64> = (0..n_batches)
        .into_par_iter()
        .map(|k| {
            let lo = (k * ORACLE_BATCH) as u64;
            let hi = ((k + 1) * ORACLE_BATCH).min(n_rollouts) as u64;
            let g = batch_estimates(algo, inst, seed, lo..hi, baseline);
            (g.iter().sum::<f64>(), g.len())
        })
        .map(|(s, n)| s / n as f64)
        .collect();
    let m = batch_means.len() as f64;
    let estimate = batch_means.iter().sum::<f64>() / m;
    let var = batch_means.iter().map(|g| (g - estimate).powi(2)).sum::<f64>() / (m - 1.0);
    let std_error = (var / m).sqrt();
    let target = analytic_grad(inst);
    let z = if std_error > 0.0 {
        (estimate - target) / std_error
    } else if estimate == target {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(BiasReport {
        estimator: algo,
        theta: inst.theta,
        sigma: inst.sigma,
        n_rollouts,
        baseline,
        estimate,
        std_error,
        target,
        z,
        passed: z.abs() <= Z_LIMIT,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let i = OneStepInstance::new(0.0, 1.5).unwrap();
        assert_eq!((analytic_value(&i), analytic_grad(&i)), (-2.25, 0.0));
        let i = OneStepInstance::new(1.0, 1.0).unwrap();
        assert_eq!((analytic_value(&i), analytic_grad(&i)), (-2.0, -2.0));
        let h = 1e-6;
        let j = |t: f64| analytic_value(&OneStepInstance::new(t, 0.7).unwrap());
        let fd = (j(0.3 + h) - j(0.3 - h)) / (2.0 * h);
        assert!((fd - analytic_grad(&OneStepInstance::new(0.3, 0.7).unwrap())).abs() < 1e-8);
        assert!(OneStepInstance::new(1.0, 0.0).is_err());
    }

    #[test]
    fn reductions_agree_and_small_runs_rejected() {
        let i = OneStepInstance::new(1.0, 1.0).unwrap();
        let a = estimator_bias_test(Algo::Ddpo, &i, 2000, 5, Baseline::None).unwrap();
        let b = estimator_bias_test(Algo::Dlpo, &i, 2000, 5, Baseline::None).unwrap();
        assert_eq!(a.estimate.to_bits(), b.estimate.to_bits());
        assert!(estimator_bias_test(Algo::Ddpo, &i, 999, 5, Baseline::None).is_err());
        assert!(estimator_bias_test(Algo::Rwr, &i, 2000, 5, Baseline::None).is_err());
    }

    #[test]
    fn centred_constant_reward_is_exactly_zero() {
        let i = OneStepInstance::with_reward(1.0, 1.0, OracleReward::Constant(3.0)).unwrap();
        let r = estimator_bias_test(Algo::Ddpo, &i, 1000, 1, Baseline::BatchMean).unwrap();
        assert_eq!(r.estimate, 0.0);
        assert!(r.passed);
    }
}
