//! Invariant suites run by `dlpo verify` and the acceptance tests.
//!
//! Each suite returns one line per check. `inject_fault` deliberately breaks
//! the first check of a suite so callers can confirm failures are reported.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::checkpoint::encode;
use crate::config::RunConfig;
use crate::diffusion::{ddpm_loss_on_tape, forward_step, logprob_on_tape, posterior_mean, reverse_step_with_noise, standard_normal};
use crate::error::{Error, Result};
use crate::mdp::{rollout, score_terminal, DenoisingTrajectory};
use crate::model::{fd_coordinates, finite_diff_compare, init_params, loss_grad, DenoiserParams, FdSettings, GradReport, ModelShape};
use crate::objectives::{
    batch_surrogate_on_tape, compute_gradient, kl_upper_bound_on_tape, prepare, Algo, Baseline, ObjectiveConfig, ObjectiveContext,
};
use crate::oracle::{analytic_grad, estimator_bias_test, OneStepInstance, OracleReward, Z_LIMIT};
use crate::rng::{self, stream};
use crate::schedule::{make_linear_schedule, NoiseSchedule};
use crate::trainer::{finetune, Lab, MetricsRow};
use crate::waveform::{Condition, Waveform};

pub const GRAD_TOL: f64 = 1e-4;
pub const ALPHA_BAR_TOL: f64 = 1e-12;
pub const QUADRATURE_TOL: f64 = 1e-6;
pub const BIAS_ROLLOUTS: usize = 100_000;
pub const MARGINAL_SAMPLES: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Bias,
    Reduction,
    Schedule,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Grad, Suite::Bias, Suite::Reduction, Suite::Schedule];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Grad => "grad",
            Suite::Bias => "bias",
            Suite::Reduction => "reduction",
            Suite::Schedule => "schedule",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown suite {s:?}; valid: grad, bias, reduction, schedule")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub suite: Suite,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{mark} {}/{} {}", self.suite, self.name, self.detail)
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub inject_fault: bool,
    pub bias_rollouts: usize,
    /// Bias reports are appended here when set.
    pub log_path: Option<PathBuf>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            inject_fault: false,
            bias_rollouts: BIAS_ROLLOUTS,
            log_path: None,
        }
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<Vec<CheckLine>> {
    match suite {
        Suite::Grad => grad_suite(opts),
        Suite::Bias => bias_suite(opts),
        Suite::Reduction => reduction_suite(opts),
        Suite::Schedule => schedule_suite(opts),
    }
}

struct Fixture {
    policy: DenoiserParams,
    reference: DenoiserParams,
    fine: NoiseSchedule,
    coarse: NoiseSchedule,
}

impl Fixture {
    fn new(seed: u64) -> Result<Self> {
        let shape = ModelShape {
            data_len: 8,
            hidden: vec![8, 8],
            time_dim: 4,
            cond_dim: 4,
            vocab_size: 3,
        };
        let fine = make_linear_schedule(100, 1e-4, 0.02)?;
        let coarse = NoiseSchedule::respaced(&fine, 4)?;
        Ok(Self {
            policy: init_params(rng::derive_seed(seed, &[1]), shape.clone())?,
            reference: init_params(rng::derive_seed(seed, &[2]), shape)?,
            fine,
            coarse,
        })
    }

    fn ctx(&self) -> ObjectiveContext<'_> {
        ObjectiveContext {
            coarse: &self.coarse,
            fine: &self.fine,
            reference: Some(&self.reference),
        }
    }

    fn batch(&self, seed: u64) -> Result<Vec<DenoisingTrajectory>> {
        [2.0, 3.5, 4.25]
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let c = Condition::new(i, vec![i % 3, (i + 1) % 3], 3)?;
                let t = rollout(&self.policy, &c, &self.coarse, rng::derive_seed(seed, &[stream::ROLLOUT, i as u64]))?;
                score_terminal(t, |_, _| r)
            })
            .collect()
    }
}

fn grad_line(name: String, report: &GradReport) -> CheckLine {
    CheckLine {
        suite: Suite::Grad,
        name,
        passed: report.passed,
        detail: format!(
            "max_rel_err={:.3e} worst_coordinate={} checked={} tol={:.0e}",
            report.max_rel_err, report.worst_coordinate, report.checked, report.tolerance
        ),
    }
}

fn checked(params: &DenoiserParams, loss: &impl crate::model::LossFn, settings: FdSettings, fault: bool) -> Result<GradReport> {
    let (_, mut g) = loss_grad(params, loss)?;
    if fault {
        let flat: Vec<f64> = g.flat().collect();
        if let Some(&i) = fd_coordinates(params.n_params(), settings).iter().find(|&&i| flat[i].abs() > 1e-3) {
            let (b, o) = params.locate(i);
            g.blocks[b][o] *= 2.0;
        }
    }
    finite_diff_compare(params, &g, loss, GRAD_TOL, settings)
}

fn grad_suite(opts: &VerifyOptions) -> Result<Vec<CheckLine>> {
    let f = Fixture::new(opts.seed)?;
    let settings = FdSettings {
        seed: opts.seed,
        ..FdSettings::default()
    };
    let mut r = rng::rng_for(opts.seed, &[stream::GUIDANCE]);
    let x0 = Waveform::new(standard_normal(8, &mut r).iter().map(|v| 0.5 * v).collect())?;
    let eps = Waveform::new(standard_normal(8, &mut r))?;
    let x_t = Waveform::new(standard_normal(8, &mut r))?;
    let action = Waveform::new(standard_normal(8, &mut r))?;
    let c = Condition::new(0, vec![0, 2], 3)?;
    let mut fault = opts.inject_fault;
    let mut take_fault = || std::mem::replace(&mut fault, false);
    let mut out = Vec::new();

    for squared in [false, true] {
        let loss =
            |p: &DenoiserParams, tape: &mut crate::autodiff::Tape<'_>| ddpm_loss_on_tape(p, tape, &x0, &c, 40, &eps, &f.fine, squared);
        let name = if squared { "ddpm_loss_squared" } else { "ddpm_loss" };
        out.push(grad_line(name.into(), &checked(&f.policy, &loss, settings, take_fault())?));
    }
    let loss = |p: &DenoiserParams, tape: &mut crate::autodiff::Tape<'_>| {
        let x = f.coarse.reverse_variance(2).sqrt();
        let a = Waveform::new(action.samples().iter().map(|v| v * x).collect())?;
        logprob_on_tape(p, tape, &x_t, &a, &c, 2, &f.coarse)
    };
    out.push(grad_line(
        "logprob_action".into(),
        &checked(&f.policy, &loss, settings, take_fault())?,
    ));
    let loss =
        |p: &DenoiserParams, tape: &mut crate::autodiff::Tape<'_>| kl_upper_bound_on_tape(p, tape, &f.reference, &x_t, &c, 40, &f.fine);
    out.push(grad_line(
        "kl_upper_bound".into(),
        &checked(&f.policy, &loss, settings, take_fault())?,
    ));

    let batch = f.batch(opts.seed)?;
    let ctx = f.ctx();
    let variants: Vec<(String, ObjectiveConfig)> = Algo::ALL
        .iter()
        .flat_map(|&algo| {
            let base = ObjectiveConfig {
                algo,
                alpha: 1.0,
                beta: 0.5,
                loss_guidance_steps: 3,
                baseline: Baseline::BatchMean,
                ..ObjectiveConfig::default()
            };
            let mut v = vec![(
                format!("surrogate_{algo}"),
                ObjectiveConfig {
                    detach_penalty: true,
                    ..base.clone()
                },
            )];
            if matches!(algo, Algo::Dlpo | Algo::Onlydl) {
                v.push((
                    format!("surrogate_{algo}_live_penalty"),
                    ObjectiveConfig {
                        detach_penalty: false,
                        ..base
                    },
                ));
            }
            v
        })
        .collect();
    for (name, cfg) in variants {
        let prepared = prepare(&f.policy, &batch, &cfg, &ctx)?;
        let loss =
            |p: &DenoiserParams, tape: &mut crate::autodiff::Tape<'_>| batch_surrogate_on_tape(p, tape, &batch, &prepared, &cfg, &ctx);
        out.push(grad_line(name, &checked(&f.policy, &loss, settings, take_fault())?));
    }
    Ok(out)
}

fn bias_suite(opts: &VerifyOptions) -> Result<Vec<CheckLine>> {
    let n = opts.bias_rollouts;
    let inst = OneStepInstance::new(1.0, 1.0)?;
    let mut out = Vec::new();
    let mut record = |name: String, report: &crate::oracle::BiasReport, passed: bool, detail: String| -> Result<()> {
        if let Some(p) = &opts.log_path {
            report.append_to_log(p)?;
        }
        out.push(CheckLine {
            suite: Suite::Bias,
            name,
            passed,
            detail,
        });
        Ok(())
    };
    let mut reports = Vec::new();
    for (i, algo) in [Algo::Ddpo, Algo::Dpok, Algo::Klinr, Algo::Dlpo].into_iter().enumerate() {
        for baseline in [Baseline::None, Baseline::BatchMean] {
            let mut r = estimator_bias_test(algo, &inst, n, opts.seed, baseline)?;
            if opts.inject_fault && i == 0 && baseline == Baseline::None {
                r.target = analytic_grad(&OneStepInstance::new(1.5, 1.0)?);
                r.z = (r.estimate - r.target) / r.std_error;
                r.passed = r.z.abs() <= Z_LIMIT;
            }
            let detail = format!(
                "estimate={:+.5} se={:.5} target={:+.3} z={:+.2}",
                r.estimate, r.std_error, r.target, r.z
            );
            let name = match baseline {
                Baseline::None => format!("{algo}_beta0"),
                Baseline::BatchMean => format!("{algo}_beta0_batch_mean"),
            };
            record(name, &r, r.passed, detail)?;
            reports.push(r);
        }
    }
    let ddpo = &reports[0];
    let dlpo = &reports[6];
    record(
        "dlpo_beta0_equals_ddpo".into(),
        dlpo,
        dlpo.estimate.to_bits() == ddpo.estimate.to_bits(),
        format!("ddpo={:+.6} dlpo={:+.6}", ddpo.estimate, dlpo.estimate),
    )?;
    let centred = &reports[1];
    record(
        "baseline_reduces_variance".into(),
        centred,
        centred.std_error <= ddpo.std_error,
        format!("se_centred={:.5} se_raw={:.5}", centred.std_error, ddpo.std_error),
    )?;
    let constant = OneStepInstance::with_reward(1.0, 1.0, OracleReward::Constant(3.0))?;
    let r = estimator_bias_test(Algo::Ddpo, &constant, n, opts.seed, Baseline::BatchMean)?;
    let detail = format!("estimate={:+.5} se={:.5}", r.estimate, r.std_error);
    record("constant_reward_centred".into(), &r, r.passed, detail)?;
    Ok(out)
}

fn gradients_equal(a: &crate::autodiff::Gradients, b: &crate::autodiff::Gradients) -> bool {
    a.flat().zip(b.flat()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Metrics CSV with the algorithm column dropped, since that column names the run.
fn metrics_bytes(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(MetricsRow {
            algo: Algo::Ddpo,
            ..r.clone()
        })?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn reduction_suite(opts: &VerifyOptions) -> Result<Vec<CheckLine>> {
    let beta = if opts.inject_fault { 1e-3 } else { 0.0 };
    let f = Fixture::new(opts.seed)?;
    let batch = f.batch(opts.seed)?;
    let ctx = f.ctx();
    let mut out = Vec::new();
    let variants: Vec<(Algo, bool)> = vec![(Algo::Dpok, true), (Algo::Klinr, true), (Algo::Dlpo, true), (Algo::Dlpo, false)];
    for baseline in [Baseline::None, Baseline::BatchMean] {
        let base_cfg = ObjectiveConfig {
            algo: Algo::Ddpo,
            loss_guidance_steps: 3,
            baseline,
            ..ObjectiveConfig::default()
        };
        let reference = compute_gradient(&f.policy, &batch, &base_cfg, &ctx)?;
        for &(algo, detach_penalty) in &variants {
            let cfg = ObjectiveConfig {
                algo,
                beta,
                detach_penalty,
                ..base_cfg.clone()
            };
            let g = compute_gradient(&f.policy, &batch, &cfg, &ctx)?;
            let same = gradients_equal(&g.grads, &reference.grads) && g.diagnostics == reference.diagnostics;
            let mode = if detach_penalty { "" } else { "_live_penalty" };
            let b = if baseline == Baseline::BatchMean { "_batch_mean" } else { "" };
            out.push(CheckLine {
                suite: Suite::Reduction,
                name: format!("{algo}{mode}{b}_gradient_equals_ddpo"),
                passed: same,
                detail: format!(
                    "grad_norm={:.6e} ddpo={:.6e}",
                    g.diagnostics.grad_norm, reference.diagnostics.grad_norm
                ),
            });
        }
    }

    let mut run = RunConfig {
        seed: opts.seed,
        hidden_layers: 1,
        hidden_width: 16,
        episodes: 3,
        batch_size: 4,
        loss_guidance_steps: 2,
        pretrain_steps: 300,
        ..RunConfig::default()
    };
    run.validate()?;
    let (fine, coarse) = run.schedules()?;
    let scorer = run.scorer()?;
    let lab = Lab {
        scorer: &scorer,
        fine: &fine,
        coarse: &coarse,
    };
    let (p_pre, _) = run.pretrain_model(&scorer, &fine)?;
    run.algo = Algo::Ddpo;
    let ddpo = finetune(&p_pre, &lab, &run.train_config())?;
    let ddpo_metrics = metrics_bytes(&ddpo.metrics)?;
    let meta = run.checkpoint_meta(run.episodes, ddpo.final_params.version);
    let ddpo_ckpt = encode(&ddpo.final_params, &meta)?;
    for algo in [Algo::Dpok, Algo::Klinr, Algo::Dlpo] {
        run.algo = algo;
        run.beta = beta;
        let a = finetune(&p_pre, &lab, &run.train_config())?;
        let same_metrics = metrics_bytes(&a.metrics)? == ddpo_metrics;
        let same_ckpt = encode(&a.final_params, &meta)? == ddpo_ckpt;
        out.push(CheckLine {
            suite: Suite::Reduction,
            name: format!("{algo}_end_to_end_equals_ddpo"),
            passed: same_metrics && same_ckpt,
            detail: format!(
                "metrics_identical={same_metrics} checkpoint_identical={same_ckpt} episodes={}",
                run.episodes
            ),
        });
    }
    Ok(out)
}

/// `prod(1 - beta)` through a compensated sum of logarithms.
pub fn alpha_bar_oracle(beta: &[f64]) -> Vec<f64> {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    beta.iter()
        .map(|b| {
            let y = (-b).ln_1p() - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
            sum.exp()
        })
        .collect()
}

/// Composite Simpson rule with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(a) + f(b) + inner) * h / 3.0
}

fn schedule_suite(opts: &VerifyOptions) -> Result<Vec<CheckLine>> {
    let mut out = Vec::new();
    let line = |name: &str, passed: bool, detail: String| CheckLine {
        suite: Suite::Schedule,
        name: name.into(),
        passed,
        detail,
    };

    let fine = make_linear_schedule(1000, 1e-4, 0.02)?;
    let mut oracle = alpha_bar_oracle(fine.beta());
    if opts.inject_fault {
        oracle[500] *= 1.0 + 1e-9;
    }
    let err = fine.alpha_bar().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    out.push(line(
        "alpha_bar_matches_product",
        err <= ALPHA_BAR_TOL,
        format!("max_abs_err={err:.3e} alpha_bar[999]={:.6e}", fine.alpha_bar()[999]),
    ));
    let rec = (1..fine.n_steps())
        .map(|t| (fine.alpha_bar()[t] - fine.alpha_bar()[t - 1] * fine.alpha()[t]).abs())
        .fold((fine.alpha_bar()[0] - fine.alpha()[0]).abs(), f64::max);
    out.push(line("alpha_bar_recurrence", rec <= ALPHA_BAR_TOL, format!("max_abs_err={rec:.3e}")));

    let t = 199;
    let x0_value = 0.7;
    let mut x = Waveform::new(vec![x0_value; MARGINAL_SAMPLES])?;
    let mut r = rng::rng_for(opts.seed, &[stream::ORACLE]);
    for s in 0..=t {
        x = forward_step(&x, s, &fine, &mut r)?;
    }
    let n = MARGINAL_SAMPLES as f64;
    let mean = x.samples().iter().sum::<f64>() / n;
    let var = x.samples().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let want_mean = fine.alpha_bar()[t].sqrt() * x0_value;
    let want_var = fine.one_minus_alpha_bar()[t];
    let z_mean = (mean - want_mean) / (want_var / n).sqrt();
    let z_var = (var - want_var) / (want_var * (2.0 / (n - 1.0)).sqrt());
    out.push(line(
        "marginal_mean",
        z_mean.abs() <= 3.0,
        format!("mc={mean:.5} closed_form={want_mean:.5} z={z_mean:+.2}"),
    ));
    out.push(line(
        "marginal_variance",
        z_var.abs() <= 3.0,
        format!("mc={var:.5} closed_form={want_var:.5} z={z_var:+.2}"),
    ));

    let coarse = NoiseSchedule::respaced(&fine, 10)?;
    let mut r = rng::rng_for(opts.seed, &[stream::GUIDANCE]);
    let a = Waveform::new(standard_normal(32, &mut r))?;
    let b = Waveform::new(standard_normal(32, &mut r))?;
    let exact = [&fine, &coarse]
        .iter()
        .all(|s| posterior_mean(&a, &b, 0, s).map(|m| m == a).unwrap_or(false));
    out.push(line(
        "posterior_mean_first_step",
        exact,
        "posterior_mean(x0, x_t, 0) == x0 bitwise".into(),
    ));

    let shape = ModelShape {
        data_len: 1,
        hidden: vec![8],
        time_dim: 4,
        cond_dim: 2,
        vocab_size: 2,
    };
    let p = init_params(rng::derive_seed(opts.seed, &[stream::INIT]), shape)?;
    let c = Condition::new(0, vec![1], 2)?;
    let x_t = Waveform::new(vec![0.4])?;
    let mut worst = 0.0f64;
    for step in [0, 1, 2, 5, 9] {
        let (mean, _) = reverse_step_with_noise(&p, &x_t, &c, step, &coarse, None)?;
        let mu = mean.samples()[0];
        let sd = coarse.reverse_variance(step).sqrt();
        let density = |v: f64| -> f64 {
            let a = Waveform::new(vec![v]).expect("finite");
            let mut tape = p.tape();
            logprob_on_tape(&p, &mut tape, &x_t, &a, &c, step, &coarse)
                .map(|lp| tape.scalar(lp).exp())
                .unwrap_or(f64::NAN)
        };
        let integral = simpson(density, mu - 12.0 * sd, mu + 12.0 * sd, 2000);
        worst = worst.max((integral - 1.0).abs());
    }
    out.push(line(
        "reverse_density_integrates_to_one",
        worst <= QUADRATURE_TOL,
        format!("max_abs_err={worst:.3e} steps=[0,1,2,5,9]"),
    ));
    Ok(out)
}
