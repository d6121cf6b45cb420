//! The noise-prediction network and its training machinery.
//!
//! The network is a tanh MLP over `[x_t, time features, condition embedding]`
//! plus a learned scalar skip gain (a linear function of the time features)
//! multiplying `x_t`. Without the skip a 128-wide bottleneck cannot carry a
//! 256-sample noise vector through to the output.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::diffusion::ddpm_loss_on_tape;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::schedule::NoiseSchedule;
use crate::waveform::{Condition, Waveform};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub data_len: usize,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub vocab_size: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            data_len: 256,
            hidden: vec![128, 128, 128],
            time_dim: 16,
            cond_dim: 16,
            vocab_size: 8,
        }
    }
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.data_len, self.time_dim, self.cond_dim, self.vocab_size];
        if dims.contains(&0) || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid model widths {self:?}")));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument("time_dim must be even".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.data_len + self.time_dim + self.cond_dim
    }

    /// `(rows, cols)` of each parameter block in declared order: condition
    /// table, (weight, bias) per hidden layer, output (weight, bias), skip
    /// gain (weight, bias).
    pub fn block_shapes(&self) -> Vec<(usize, usize)> {
        let mut out = vec![(self.vocab_size, self.cond_dim)];
        let mut fan_in = self.input_dim();
        for &h in &self.hidden {
            out.push((h, fan_in));
            out.push((h, 1));
            fan_in = h;
        }
        out.push((self.data_len, fan_in));
        out.push((self.data_len, 1));
        out.push((1, self.time_dim));
        out.push((1, 1));
        out
    }

    pub fn n_params(&self) -> usize {
        self.block_shapes().iter().map(|(r, c)| r * c).sum()
    }

    fn output_block(&self) -> usize {
        1 + 2 * self.hidden.len()
    }

    fn skip_block(&self) -> usize {
        self.output_block() + 2
    }
}

/// Sinusoidal features of a fine-schedule step index.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = 10_000f64.powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub shape: ModelShape,
    pub tensors: Vec<Tensor>,
    pub grads: Gradients,
    /// Incremented on every optimizer update; trajectories record it.
    pub version: u64,
}

impl DenoiserParams {
    pub fn zeros(shape: ModelShape) -> Result<Self> {
        shape.validate()?;
        let tensors: Vec<Tensor> = shape.block_shapes().into_iter().map(|(r, c)| Tensor::zeros(r, c)).collect();
        let grads = Gradients::zeros_like(&tensors);
        Ok(Self {
            shape,
            tensors,
            grads,
            version: 0,
        })
    }

    pub fn tape(&self) -> Tape<'_> {
        Tape::new(&self.tensors)
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data.iter().copied())
    }

    /// `(block, offset)` of a flat parameter index.
    pub fn locate(&self, mut i: usize) -> (usize, usize) {
        for (b, t) in self.tensors.iter().enumerate() {
            if i < t.len() {
                return (b, i);
            }
            i -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn get_flat(&self, i: usize) -> f64 {
        let (b, o) = self.locate(i);
        self.tensors[b].data[o]
    }

    pub fn set_flat(&mut self, i: usize, v: f64) {
        let (b, o) = self.locate(i);
        self.tensors[b].data[o] = v;
    }

    pub fn zero_grad(&mut self) {
        self.grads = Gradients::zeros_like(&self.tensors);
    }

    pub fn accumulate(&mut self, g: &Gradients) {
        self.grads.add_assign(g);
    }

    pub fn is_finite(&self) -> bool {
        self.flat().all(f64::is_finite)
    }

    /// Records `eps_theta(x, c, model_t)` on `tape`.
    pub fn eps_on_tape(&self, tape: &mut Tape<'_>, x: Var, c: &Condition, model_t: usize) -> Result<Var> {
        let s = &self.shape;
        c.validate(s.vocab_size)?;
        if tape.value(x).len() != s.data_len {
            return Err(Error::DimensionMismatch {
                expected: s.data_len,
                got: tape.value(x).len(),
            });
        }
        let temb = tape.constant(time_embedding(model_t, s.time_dim));
        let cemb = tape.embed_sum(0, &c.multiset_key());
        let mut h = tape.concat(&[x, temb, cemb]);
        for layer in 0..s.hidden.len() {
            let pre = tape.linear(1 + 2 * layer, 2 + 2 * layer, h);
            h = tape.tanh(pre);
            if !tape.value(h).iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer });
            }
        }
        let ob = s.output_block();
        let out = tape.linear(ob, ob + 1, h);
        let sb = s.skip_block();
        let gain = tape.linear(sb, sb + 1, temb);
        let skip = tape.mul_scalar(gain, x);
        let eps = tape.add(out, skip);
        if !tape.value(eps).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: s.hidden.len() });
        }
        Ok(eps)
    }

    /// First hidden layer pre-activation for a given input (diagnostics).
    pub fn first_layer_preactivation(&self, input: &[f64]) -> Vec<f64> {
        let mut tape = self.tape();
        let x = tape.constant(input.to_vec());
        let y = tape.linear(1, 2, x);
        tape.value(y).to_vec()
    }
}

/// Deterministic fan-in uniform initialization: every block `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
/// condition table `U(-1, 1)`.
pub fn init_params(seed: u64, shape: ModelShape) -> Result<DenoiserParams> {
    let mut p = DenoiserParams::zeros(shape)?;
    let mut rng = rng::rng_for(seed, &[rng::stream::INIT]);
    let n_blocks = p.tensors.len();
    for b in 0..n_blocks {
        let fan_in = if b == 0 {
            1
        } else if b % 2 == 1 {
            p.tensors[b].cols
        } else {
            p.tensors[b - 1].cols
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        for v in p.tensors[b].data.iter_mut() {
            *v = dist.sample(&mut rng);
        }
    }
    Ok(p)
}

/// `eps_theta(x_t, c, t)` for step `t` of `sched`. Pure in its inputs.
pub fn predict_eps(params: &DenoiserParams, x_t: &Waveform, c: &Condition, t: usize, sched: &NoiseSchedule) -> Result<Waveform> {
    sched.check_step(t)?;
    let mut tape = params.tape();
    let x = tape.constant(x_t.samples().to_vec());
    let e = params.eps_on_tape(&mut tape, x, c, sched.model_t(t))?;
    Waveform::new(tape.value(e).to_vec())
}

/// SGD with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: None,
        }
    }

    /// Applies `params.grads` and zeroes them.
    pub fn step(&mut self, params: &mut DenoiserParams) {
        let v = self.velocity.get_or_insert_with(|| Gradients::zeros_like(&params.tensors));
        for ((t, g), vb) in params.tensors.iter_mut().zip(&params.grads.blocks).zip(v.blocks.iter_mut()) {
            for ((p, gi), vi) in t.data.iter_mut().zip(g).zip(vb.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *p -= self.lr * *vi;
            }
        }
        params.version += 1;
        params.zero_grad();
    }
}

/// Rescales `g` to global norm `max_norm` when larger; returns the norm before clipping.
pub fn clip_global_norm(g: &mut Gradients, max_norm: f64) -> f64 {
    let n = g.global_norm();
    if n > max_norm && n > 0.0 {
        g.scale(max_norm / n);
    }
    n
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Flat parameter index of the worst coordinate.
    pub worst_coordinate: usize,
    pub tolerance: f64,
    pub passed: bool,
    pub checked: usize,
}

/// Gradient-check settings: central-difference step, number of sampled
/// coordinates, and the absolute floor of the relative-error denominator.
#[derive(Debug, Clone, Copy)]
pub struct FdSettings {
    pub step: f64,
    pub n_coords: usize,
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for FdSettings {
    fn default() -> Self {
        Self {
            step: 1e-5,
            n_coords: 64,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

/// Scalar loss builder used by the gradient checks.
pub trait LossFn: Fn(&DenoiserParams, &mut Tape<'_>) -> Result<Var> + Sync {}
impl<F: Fn(&DenoiserParams, &mut Tape<'_>) -> Result<Var> + Sync> LossFn for F {}

pub fn loss_value(params: &DenoiserParams, loss: &impl LossFn) -> Result<f64> {
    let mut tape = params.tape();
    let v = loss(params, &mut tape)?;
    Ok(tape.scalar(v))
}

pub fn loss_grad(params: &DenoiserParams, loss: &impl LossFn) -> Result<(f64, Gradients)> {
    let mut tape = params.tape();
    let v = loss(params, &mut tape)?;
    let value = tape.scalar(v);
    Ok((value, tape.backward(v)?))
}

/// Flat parameter indices visited by a gradient check.
pub fn fd_coordinates(n_params: usize, settings: FdSettings) -> Vec<usize> {
    let mut rng = rng::seeded(settings.seed);
    let all: Vec<usize> = (0..n_params).collect();
    all.choose_multiple(&mut rng, settings.n_coords.min(n_params)).copied().collect()
}

/// Compares `analytic` with central differences of `loss` on a random subset
/// of coordinates.
pub fn finite_diff_compare(
    params: &DenoiserParams,
    analytic: &Gradients,
    loss: &impl LossFn,
    tolerance: f64,
    settings: FdSettings,
) -> Result<GradReport> {
    if !(tolerance > 0.0 && tolerance.is_finite()) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let coords = fd_coordinates(params.n_params(), settings);
    let flat: Vec<f64> = analytic.flat().collect();
    let errs = coords
        .par_iter()
        .map(|&i| {
            let mut p = params.clone();
            let x = p.get_flat(i);
            p.set_flat(i, x + settings.step);
            let fp = loss_value(&p, loss)?;
            p.set_flat(i, x - settings.step);
            let fm = loss_value(&p, loss)?;
            let num = (fp - fm) / (2.0 * settings.step);
            let a = flat[i];
            let denom = a.abs().max(num.abs()).max(settings.abs_floor);
            Ok(((a - num).abs() / denom, i))
        })
        .collect::<Result<Vec<_>>>()?;
    let (max_rel_err, worst_coordinate) = errs.into_iter().fold((0.0, coords.first().copied().unwrap_or(0)), |acc, e| {
        if e.0 > acc.0 || e.0.is_nan() {
            e
        } else {
            acc
        }
    });
    Ok(GradReport {
        max_rel_err,
        worst_coordinate,
        tolerance,
        passed: max_rel_err <= tolerance,
        checked: coords.len(),
    })
}

/// Reverse-mode gradient of `loss` against central differences.
pub fn finite_diff_check(params: &DenoiserParams, loss: &impl LossFn, tolerance: f64, settings: FdSettings) -> Result<GradReport> {
    if !(tolerance > 0.0 && tolerance.is_finite()) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let (_, g) = loss_grad(params, loss)?;
    finite_diff_compare(params, &g, loss, tolerance, settings)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    pub squared_loss: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch: 32,
            lr: 1e-3,
            momentum: 0.9,
            clip_norm: 1.0,
            squared_loss: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainRow {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub rows: Vec<PretrainRow>,
    /// Mean loss over the last tenth of the run.
    pub final_loss: f64,
}

pub const DIVERGENCE_LOSS: f64 = 1e3;

/// Minimizes the noise-prediction loss with `t ~ U{0..n}` on `fine`.
pub fn pretrain(
    params: &mut DenoiserParams,
    corpus: &[(Condition, Waveform)],
    fine: &NoiseSchedule,
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<PretrainReport> {
    if cfg.steps > 0 && corpus.is_empty() {
        return Err(Error::EmptySplit("pretraining corpus".into()));
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut rows = Vec::with_capacity(cfg.steps);
    let len = params.shape.data_len;
    for step in 0..cfg.steps {
        let draws: Vec<(usize, usize, Vec<f64>)> = (0..cfg.batch.max(1))
            .map(|_| {
                let i = rng.random_range(0..corpus.len());
                let t = rng.random_range(0..fine.n_steps());
                let eps = (0..len).map(|_| StandardNormal.sample(rng)).collect();
                (i, t, eps)
            })
            .collect();
        let p: &DenoiserParams = params;
        let results = draws
            .par_iter()
            .map(|(i, t, eps)| {
                let (c, x0) = &corpus[*i];
                let eps = Waveform::new(eps.clone())?;
                let mut tape = p.tape();
                let l = ddpm_loss_on_tape(p, &mut tape, x0, c, *t, &eps, fine, cfg.squared_loss)?;
                let v = tape.scalar(l);
                Ok((v, tape.backward(l)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let k = 1.0 / results.len() as f64;
        let loss = results.iter().map(|r| r.0).sum::<f64>() * k;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Diverged { step, loss });
        }
        let mut g = Gradients::sum(&params.tensors, results.iter().map(|r| &r.1));
        g.scale(k);
        clip_global_norm(&mut g, cfg.clip_norm);
        params.accumulate(&g);
        opt.step(params);
        rows.push(PretrainRow { step, loss });
    }
    let tail = (rows.len() / 10).max(1).min(rows.len());
    let final_loss = if rows.is_empty() {
        f64::NAN
    } else {
        rows[rows.len() - tail..].iter().map(|r| r.loss).sum::<f64>() / tail as f64
    };
    log::info!("pretraining finished: {} steps, final loss {final_loss:.4}", cfg.steps);
    // Pretraining produces the frozen reference; fine-tuning counts versions from zero.
    params.version = 0;
    Ok(PretrainReport { rows, final_loss })
}
