//! Fine-tuning gradient estimators.
//!
//! Every estimator is a surrogate loss built per trajectory on its own tape and
//! summed in batch order. Quantities that the estimator treats as constants
//! (rewards, detached penalties, the baseline, the loss-guidance draws) are
//! fixed up front by [`prepare`], so a surrogate is a deterministic function of
//! the parameters and can be checked against finite differences.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::diffusion::{ddpm_loss_on_tape, noised, sample_step};
use crate::error::{Error, Result};
use crate::mdp::{chain_logprob_on_tape, DenoisingTrajectory};
use crate::model::DenoiserParams;
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::waveform::{Condition, Waveform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Rwr,
    Ddpo,
    Dpok,
    Klinr,
    Dlpo,
    Onlydl,
}

impl Algo {
    pub const ALL: [Algo; 6] = [Algo::Rwr, Algo::Ddpo, Algo::Dpok, Algo::Klinr, Algo::Dlpo, Algo::Onlydl];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Rwr => "rwr",
            Algo::Ddpo => "ddpo",
            Algo::Dpok => "dpok",
            Algo::Klinr => "klinr",
            Algo::Dlpo => "dlpo",
            Algo::Onlydl => "onlydl",
        }
    }

    pub fn needs_reference(self) -> bool {
        matches!(self, Algo::Dpok | Algo::Klinr)
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL.into_iter().find(|a| a.name().eq_ignore_ascii_case(s)).ok_or_else(|| {
            let names: Vec<_> = Algo::ALL.iter().map(|a| a.name()).collect();
            Error::InvalidArgument(format!("unknown algorithm {s:?}; valid: {}", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    None,
    BatchMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub algo: Algo,
    /// Reward weight.
    pub alpha: f64,
    /// Penalty weight.
    pub beta: f64,
    /// Fine-schedule draws per trajectory for the diffusion-loss and KL terms.
    pub loss_guidance_steps: usize,
    /// Treat the diffusion-loss penalty (DLPO, OnlyDL) as a constant coefficient.
    pub detach_penalty: bool,
    pub baseline: Baseline,
    /// Squared instead of plain Euclidean noise-prediction loss.
    pub squared_loss: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Dlpo,
            alpha: 1.0,
            beta: 0.03,
            loss_guidance_steps: 10,
            detach_penalty: true,
            baseline: Baseline::BatchMean,
            squared_loss: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) || !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::InvalidArgument("alpha and beta must be finite and non-negative".into()));
        }
        if self.loss_guidance_steps == 0 {
            return Err(Error::InvalidArgument("loss_guidance_steps must be >= 1".into()));
        }
        Ok(())
    }

    fn uses_penalty(&self) -> bool {
        match self.algo {
            Algo::Rwr | Algo::Ddpo => false,
            Algo::Dpok | Algo::Klinr | Algo::Dlpo => self.beta != 0.0,
            Algo::Onlydl => true,
        }
    }

    fn uses_draws(&self) -> bool {
        self.algo == Algo::Rwr || self.uses_penalty()
    }
}

/// Raw reward and penalties folded into one REINFORCE coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapedReward {
    pub raw: f64,
    pub kl_penalty: f64,
    pub dl_penalty: f64,
    pub alpha: f64,
    pub beta: f64,
    pub shaped: f64,
}

impl ShapedReward {
    /// `alpha * raw - beta * penalty`, where only the penalty channel used by
    /// `algo` inside the coefficient counts.
    pub fn new(algo: Algo, raw: f64, kl_penalty: f64, dl_penalty: f64, alpha: f64, beta: f64) -> Self {
        let mut s = Self {
            raw,
            kl_penalty,
            dl_penalty,
            alpha,
            beta,
            shaped: 0.0,
        };
        s.shaped = s.recompute(algo);
        s
    }

    pub fn recompute(&self, algo: Algo) -> f64 {
        match algo {
            Algo::Rwr | Algo::Ddpo | Algo::Dpok => self.alpha * self.raw,
            Algo::Klinr if self.beta != 0.0 => self.alpha * self.raw - self.beta * self.kl_penalty,
            Algo::Dlpo if self.beta != 0.0 => self.alpha * self.raw - self.beta * self.dl_penalty,
            Algo::Klinr | Algo::Dlpo => self.alpha * self.raw,
            Algo::Onlydl => -self.dl_penalty,
        }
    }
}

/// A fine-schedule step and the noise used to re-noise the generated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceDraw {
    pub t: usize,
    pub eps: Waveform,
}

/// Loss-guidance draws for one trajectory, from its own stream.
pub fn guidance_draws(traj: &DenoisingTrajectory, fine: &NoiseSchedule, n: usize) -> Vec<GuidanceDraw> {
    let mut r = rng::rng_for(traj.seed, &[rng::stream::GUIDANCE]);
    let len = traj.terminal().len();
    (0..n)
        .map(|_| {
            let t = sample_step(fine, &mut r);
            let eps: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut r)).collect();
            GuidanceDraw {
                t,
                eps: Waveform::new(eps).expect("gaussian draws are finite"),
            }
        })
        .collect()
}

/// Schedules and the frozen reference shared by all estimators.
#[derive(Clone, Copy)]
pub struct ObjectiveContext<'a> {
    pub coarse: &'a NoiseSchedule,
    pub fine: &'a NoiseSchedule,
    pub reference: Option<&'a DenoiserParams>,
}

/// Records `||eps_theta(x_t,c,t) - eps_ref(x_t,c,t)||`; only the policy is on the tape.
pub fn kl_upper_bound_on_tape(
    policy: &DenoiserParams,
    tape: &mut Tape<'_>,
    reference: &DenoiserParams,
    x_t: &Waveform,
    c: &Condition,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Var> {
    sched.check_step(t)?;
    x_t.check_len(policy.shape.data_len)?;
    let eps_ref = crate::model::predict_eps(reference, x_t, c, t, sched)?;
    let x = tape.constant(x_t.samples().to_vec());
    let eps = policy.eps_on_tape(tape, x, c, sched.model_t(t))?;
    let r = tape.constant(eps_ref.into_samples());
    let d = tape.sub(eps, r);
    Ok(tape.norm(d))
}

pub fn kl_upper_bound(
    policy: &DenoiserParams,
    reference: &DenoiserParams,
    x_t: &Waveform,
    c: &Condition,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<f64> {
    let mut tape = policy.tape();
    let v = kl_upper_bound_on_tape(policy, &mut tape, reference, x_t, c, t, sched)?;
    Ok(tape.scalar(v))
}

/// Per-trajectory constants of a surrogate.
#[derive(Debug, Clone)]
pub struct PreparedItem {
    pub draws: Vec<GuidanceDraw>,
    pub shaped: ShapedReward,
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub items: Vec<PreparedItem>,
    /// Subtracted from every detached coefficient.
    pub baseline: f64,
}

fn mean_penalty(
    params: &DenoiserParams,
    tape: &mut Tape<'_>,
    traj: &DenoisingTrajectory,
    draws: &[GuidanceDraw],
    cfg: &ObjectiveConfig,
    ctx: &ObjectiveContext<'_>,
) -> Result<Var> {
    let x0 = traj.terminal();
    let terms = draws
        .iter()
        .map(|d| match cfg.algo {
            Algo::Dpok | Algo::Klinr => {
                let reference = ctx.reference.ok_or(Error::MissingReference {
                    algo: cfg.algo.name().into(),
                })?;
                let x_t = noised(x0, d.t, ctx.fine, &d.eps)?;
                kl_upper_bound_on_tape(params, tape, reference, &x_t, &traj.condition, d.t, ctx.fine)
            }
            _ => ddpm_loss_on_tape(params, tape, x0, &traj.condition, d.t, &d.eps, ctx.fine, cfg.squared_loss),
        })
        .collect::<Result<Vec<_>>>()?;
    let s = tape.sum_scalars(&terms).ok_or_else(|| Error::NoGraph("no terms recorded".into()))?;
    Ok(tape.scale(s, 1.0 / draws.len() as f64))
}

fn check_batch(params: &DenoiserParams, batch: &[DenoisingTrajectory], cfg: &ObjectiveConfig, ctx: &ObjectiveContext<'_>) -> Result<()> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if cfg.algo.needs_reference() && ctx.reference.is_none() {
        return Err(Error::MissingReference {
            algo: cfg.algo.name().into(),
        });
    }
    for (index, traj) in batch.iter().enumerate() {
        traj.reward(index)?;
        if traj.policy_version != params.version {
            return Err(Error::StaleTrajectory {
                index,
                traj_version: traj.policy_version,
                policy_version: params.version,
            });
        }
    }
    Ok(())
}

/// Fixes draws, detached penalties and the baseline at the current parameters.
pub fn prepare(
    params: &DenoiserParams,
    batch: &[DenoisingTrajectory],
    cfg: &ObjectiveConfig,
    ctx: &ObjectiveContext<'_>,
) -> Result<Prepared> {
    check_batch(params, batch, cfg, ctx)?;
    let items = batch
        .par_iter()
        .enumerate()
        .map(|(index, traj)| {
            let raw = traj.reward(index)?;
            let draws = if cfg.uses_draws() {
                guidance_draws(traj, ctx.fine, cfg.loss_guidance_steps)
            } else {
                Vec::new()
            };
            let penalty = if cfg.uses_penalty() {
                let mut tape = params.tape();
                let v = mean_penalty(params, &mut tape, traj, &draws, cfg, ctx)?;
                tape.scalar(v)
            } else {
                0.0
            };
            let (kl, dl) = match cfg.algo {
                Algo::Dpok | Algo::Klinr => (penalty, 0.0),
                _ => (0.0, penalty),
            };
            Ok(PreparedItem {
                draws,
                shaped: ShapedReward::new(cfg.algo, raw, kl, dl, cfg.alpha, cfg.beta),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let baseline = match cfg.baseline {
        Baseline::None => 0.0,
        Baseline::BatchMean => items.iter().map(|i| i.shaped.shaped).sum::<f64>() / items.len() as f64,
    };
    Ok(Prepared { items, baseline })
}

/// Records the surrogate of trajectory `index`, already divided by the batch size.
pub fn surrogate_on_tape(
    params: &DenoiserParams,
    tape: &mut Tape<'_>,
    batch: &[DenoisingTrajectory],
    prepared: &Prepared,
    index: usize,
    cfg: &ObjectiveConfig,
    ctx: &ObjectiveContext<'_>,
) -> Result<Var> {
    let traj = &batch[index];
    let item = &prepared.items[index];
    let inv_b = 1.0 / batch.len() as f64;
    let coef = item.shaped.shaped - prepared.baseline;
    let penalty_on_tape = cfg.uses_penalty();
    Ok(match cfg.algo {
        Algo::Rwr => {
            let l = mean_penalty(params, tape, traj, &item.draws, cfg, ctx)?;
            tape.scale(l, coef * inv_b)
        }
        Algo::Dlpo | Algo::Onlydl if penalty_on_tape && !cfg.detach_penalty => {
            let (alpha, beta) = match cfg.algo {
                Algo::Onlydl => (0.0, 1.0),
                _ => (cfg.alpha, cfg.beta),
            };
            let s = chain_logprob_on_tape(params, tape, traj, ctx.coarse)?;
            let d = mean_penalty(params, tape, traj, &item.draws, cfg, ctx)?;
            // live coefficient alpha*r - b - beta*d(theta)
            let scaled = tape.scale(d, -beta);
            let live = tape.add_const(scaled, alpha * item.shaped.raw - prepared.baseline);
            let prod = tape.mul_scalar(live, s);
            tape.scale(prod, -inv_b)
        }
        Algo::Ddpo | Algo::Klinr | Algo::Dlpo | Algo::Onlydl => {
            let s = chain_logprob_on_tape(params, tape, traj, ctx.coarse)?;
            tape.scale(s, -coef * inv_b)
        }
        Algo::Dpok => {
            let s = chain_logprob_on_tape(params, tape, traj, ctx.coarse)?;
            let pg = tape.scale(s, -coef * inv_b);
            if penalty_on_tape {
                let kl = mean_penalty(params, tape, traj, &item.draws, cfg, ctx)?;
                let kl = tape.scale(kl, cfg.beta * inv_b);
                tape.add(pg, kl)
            } else {
                pg
            }
        }
    })
}

/// Records the whole batch surrogate on one tape.
pub fn batch_surrogate_on_tape(
    params: &DenoiserParams,
    tape: &mut Tape<'_>,
    batch: &[DenoisingTrajectory],
    prepared: &Prepared,
    cfg: &ObjectiveConfig,
    ctx: &ObjectiveContext<'_>,
) -> Result<Var> {
    let terms = (0..batch.len())
        .map(|i| surrogate_on_tape(params, tape, batch, prepared, i, cfg, ctx))
        .collect::<Result<Vec<_>>>()?;
    tape.sum_scalars(&terms).ok_or_else(|| Error::NoGraph("no terms recorded".into()))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub reward_mean: f64,
    pub penalty_mean: f64,
    pub shaped_mean: f64,
    pub surrogate: f64,
    /// Global norm before any clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub grads: Gradients,
    pub diagnostics: Diagnostics,
    pub shaped: Vec<ShapedReward>,
}

fn batch_gradient(
    params: &DenoiserParams,
    batch: &[DenoisingTrajectory],
    cfg: &ObjectiveConfig,
    ctx: &ObjectiveContext<'_>,
) -> Result<BatchGradient> {
    let prepared = prepare(params, batch, cfg, ctx)?;
    let parts = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let mut tape = params.tape();
            let v = surrogate_on_tape(params, &mut tape, batch, &prepared, i, cfg, ctx)?;
            let value = tape.scalar(v);
            Ok((value, tape.backward(v)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let grads = Gradients::sum(&params.tensors, parts.iter().map(|p| &p.1));
    let n = batch.len() as f64;
    let shaped: Vec<ShapedReward> = prepared.items.iter().map(|i| i.shaped).collect();
    let diagnostics = Diagnostics {
        reward_mean: shaped.iter().map(|s| s.raw).sum::<f64>() / n,
        penalty_mean: shaped.iter().map(|s| s.kl_penalty + s.dl_penalty).sum::<f64>() / n,
        shaped_mean: shaped.iter().map(|s| s.shaped).sum::<f64>() / n,
        surrogate: parts.iter().map(|p| p.0).sum(),
        grad_norm: grads.global_norm(),
    };
    Ok(BatchGradient {
        grads,
        diagnostics,
        shaped,
    })
}

fn expect_algo(cfg: &ObjectiveConfig, algo: Algo) -> Result<()> {
    if cfg.algo == algo {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "config selects {} but {} was requested",
            cfg.algo, algo
        )))
    }
}

/// Reward-weighted denoising loss on re-noised generated samples.
pub fn grad_rwr(
    params: &DenoiserParams,
    batch: &[DenoisingTrajectory],
    cfg: &ObjectiveConfig,
    ctx: &ObjectiveContext<'_>,
) -> Result<BatchGradient> {
    expect_algo(cfg, Algo::Rwr)?;
    batch_gradient(params, batch, cfg, ctx)
}

/// REINFORCE over the full denoising chain.
pub fn grad_ddpo(
    params: &DenoiserParams,
    batch: &[DenoisingTrajectory],
    cfg: &ObjectiveConfig,
    ctx: &ObjectiveContext<'_>,
) -> Result<BatchGradient> {
    expect_algo(cfg, Algo::Ddpo)?;
    batch_gradient(params, batch, cfg, ctx)
}

/// REINFORCE plus a separate descent term on the KL upper bound.
pub fn grad_dpok(
    params: &DenoiserParams,
    batch: &[DenoisingTrajectory],
    cfg: &ObjectiveConfig,
    ctx: &ObjectiveContext<'_>,
) -> Result<BatchGradient> {
    expect_algo(cfg, Algo::Dpok)?;
    batch_gradient(params, batch, cfg, ctx)
}

/// REINFORCE with the KL bound subtracted inside a detached coefficient.
pub fn grad_klinr(
    params: &DenoiserParams,
    batch: &[DenoisingTrajectory],
    cfg: &ObjectiveConfig,
    ctx: &ObjectiveContext<'_>,
) -> Result<BatchGradient> {
    expect_algo(cfg, Algo::Klinr)?;
    batch_gradient(params, batch, cfg, ctx)
}

/// REINFORCE with the diffusion loss subtracted inside the coefficient.
pub fn grad_dlpo(
    params: &DenoiserParams,
    batch: &[DenoisingTrajectory],
    cfg: &ObjectiveConfig,
    ctx: &ObjectiveContext<'_>,
) -> Result<BatchGradient> {
    expect_algo(cfg, Algo::Dlpo)?;
    batch_gradient(params, batch, cfg, ctx)
}

/// Chain log-probability weighted by the diffusion loss; no external reward.
pub fn grad_onlydl(
    params: &DenoiserParams,
    batch: &[DenoisingTrajectory],
    cfg: &ObjectiveConfig,
    ctx: &ObjectiveContext<'_>,
) -> Result<BatchGradient> {
    expect_algo(cfg, Algo::Onlydl)?;
    batch_gradient(params, batch, cfg, ctx)
}

/// Dispatches on `cfg.algo`.
pub fn compute_gradient(
    params: &DenoiserParams,
    batch: &[DenoisingTrajectory],
    cfg: &ObjectiveConfig,
    ctx: &ObjectiveContext<'_>,
) -> Result<BatchGradient> {
    batch_gradient(params, batch, cfg, ctx)
}
