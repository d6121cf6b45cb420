//! Denoising as a finite-horizon MDP.
//!
//! MDP step `k` (0-based, forward in time) is diffusion step `T-1-k`: the
//! state is `(c, x_{T-1-k})` and the action is the next latent. Trajectories
//! store states in sampling order `x_T ... x_0`, so `states[k] -> states[k+1]`
//! is the transition with `log_probs[k]`. The only reward is at the last
//! transition.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::diffusion::{logprob_on_tape, sample_trajectory};
use crate::error::{Error, Result};
use crate::model::DenoiserParams;
use crate::schedule::NoiseSchedule;
use crate::waveform::{Condition, Waveform};

pub const REWARD_MIN: f64 = 1.0;
pub const REWARD_MAX: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoisingTrajectory {
    pub condition: Condition,
    /// `x_T ... x_0`, length `T + 1`.
    pub states: Vec<Waveform>,
    /// `log_probs[k] = log pi(states[k+1] | states[k])`, length `T`.
    pub log_probs: Vec<f64>,
    pub terminal_reward: Option<f64>,
    pub seed: u64,
    /// Parameter version of the policy that generated the trajectory.
    pub policy_version: u64,
}

impl DenoisingTrajectory {
    pub fn horizon(&self) -> usize {
        self.log_probs.len()
    }

    pub fn terminal(&self) -> &Waveform {
        self.states.last().expect("trajectory has states")
    }

    /// Diffusion step of MDP step `k`.
    pub fn diffusion_step(&self, k: usize) -> usize {
        self.horizon() - 1 - k
    }

    /// Reward of MDP step `k`: zero except at the final transition.
    pub fn reward_at(&self, k: usize) -> f64 {
        if k + 1 == self.horizon() {
            self.terminal_reward.unwrap_or(0.0)
        } else {
            0.0
        }
    }

    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    pub fn reward(&self, index: usize) -> Result<f64> {
        self.terminal_reward.ok_or(Error::Unscored { index })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdpState {
    pub condition: Condition,
    pub x: Waveform,
    /// MDP step index.
    pub k: usize,
}

/// Dirac transition: the next latent is the action, the condition is carried.
pub fn transition(s: &MdpState, action: Waveform) -> MdpState {
    MdpState {
        condition: s.condition.clone(),
        x: action,
        k: s.k + 1,
    }
}

pub fn rollout(policy: &DenoiserParams, c: &Condition, coarse: &NoiseSchedule, seed: u64) -> Result<DenoisingTrajectory> {
    sample_trajectory(policy, c, coarse, seed)
}

/// Sets the terminal reward to `reward(x_0, c)` clamped to `[1, 5]`.
pub fn score_terminal(mut traj: DenoisingTrajectory, reward: impl Fn(&Waveform, &Condition) -> f64) -> Result<DenoisingTrajectory> {
    if traj.terminal_reward.is_some() {
        return Err(Error::AlreadyScored);
    }
    let r = reward(traj.terminal(), &traj.condition);
    if !r.is_finite() {
        return Err(Error::NonFinite {
            what: "terminal reward".into(),
        });
    }
    traj.terminal_reward = Some(r.clamp(REWARD_MIN, REWARD_MAX));
    Ok(traj)
}

/// `log pi_theta(a | (c, x, t))` at diffusion step `t`.
pub fn logprob_action(policy: &DenoiserParams, c: &Condition, x: &Waveform, t: usize, a: &Waveform, sched: &NoiseSchedule) -> Result<f64> {
    let mut tape = policy.tape();
    let v = logprob_on_tape(policy, &mut tape, x, a, c, t, sched)?;
    Ok(tape.scalar(v))
}

/// Records `sum_k log pi_theta(states[k+1] | states[k])` for a stored trajectory.
pub fn chain_logprob_on_tape(
    policy: &DenoiserParams,
    tape: &mut Tape<'_>,
    traj: &DenoisingTrajectory,
    sched: &NoiseSchedule,
) -> Result<Var> {
    if traj.horizon() != sched.n_steps() {
        return Err(Error::DimensionMismatch {
            expected: sched.n_steps(),
            got: traj.horizon(),
        });
    }
    let terms = (0..traj.horizon())
        .map(|k| {
            logprob_on_tape(
                policy,
                tape,
                &traj.states[k],
                &traj.states[k + 1],
                &traj.condition,
                traj.diffusion_step(k),
                sched,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(tape.sum_scalars(&terms).expect("non-empty horizon"))
}

pub fn recompute_log_probs(policy: &DenoiserParams, traj: &DenoisingTrajectory, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    (0..traj.horizon())
        .map(|k| {
            logprob_action(
                policy,
                &traj.condition,
                &traj.states[k],
                traj.diffusion_step(k),
                &traj.states[k + 1],
                sched,
            )
        })
        .collect()
}

#[derive(Serialize)]
struct TrajectoryRecord<'a> {
    condition_id: usize,
    seed: u64,
    reward: Option<f64>,
    log_probs: &'a [f64],
}

/// Diagnostic dump: one JSON object per line.
pub fn write_jsonl<'a>(mut w: impl Write, trajs: impl IntoIterator<Item = &'a DenoisingTrajectory>) -> Result<()> {
    for t in trajs {
        let rec = TrajectoryRecord {
            condition_id: t.condition.id,
            seed: t.seed,
            reward: t.terminal_reward,
            log_probs: &t.log_probs,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelShape};
    use crate::schedule::{make_linear_schedule, NoiseSchedule};

    fn setup() -> (DenoiserParams, NoiseSchedule, Condition) {
        let shape = ModelShape {
            data_len: 6,
            hidden: vec![8, 8],
            time_dim: 4,
            cond_dim: 4,
            vocab_size: 4,
        };
        let fine = make_linear_schedule(100, 1e-4, 0.05).unwrap();
        (
            init_params(9, shape).unwrap(),
            NoiseSchedule::respaced(&fine, 10).unwrap(),
            Condition::new(3, vec![0, 2], 4).unwrap(),
        )
    }

    #[test]
    fn lengths_and_reward_sparsity() {
        let (p, s, c) = setup();
        let t = score_terminal(rollout(&p, &c, &s, 1).unwrap(), |_, _| 3.0).unwrap();
        assert_eq!(t.log_probs.len(), 10);
        assert_eq!(t.states.len(), 11);
        assert_eq!(t.terminal_reward, Some(3.0));
        let rewards: Vec<f64> = (0..10).map(|k| t.reward_at(k)).collect();
        assert_eq!(rewards.iter().filter(|r| **r != 0.0).count(), 1);
        assert_eq!(rewards[9], 3.0);
    }

    #[test]
    fn clamp_and_double_scoring() {
        let (p, s, c) = setup();
        let t = score_terminal(rollout(&p, &c, &s, 1).unwrap(), |_, _| 7.2).unwrap();
        assert_eq!(t.terminal_reward, Some(5.0));
        assert!(matches!(score_terminal(t, |_, _| 1.0), Err(Error::AlreadyScored)));
        let t = score_terminal(rollout(&p, &c, &s, 1).unwrap(), |_, _| -3.0).unwrap();
        assert_eq!(t.terminal_reward, Some(1.0));
    }

    #[test]
    fn stored_log_probs_recompute_exactly() {
        let (p, s, c) = setup();
        let t = rollout(&p, &c, &s, 5).unwrap();
        assert_eq!(recompute_log_probs(&p, &t, &s).unwrap(), t.log_probs);
        let mut tape = p.tape();
        let v = chain_logprob_on_tape(&p, &mut tape, &t, &s).unwrap();
        assert!((tape.scalar(v) - t.total_log_prob()).abs() < 1e-10);
    }

    #[test]
    fn quadratic_offset() {
        let (p, s, c) = setup();
        let x = Waveform::new(vec![0.1, 0.2, -0.3, 0.0, 0.5, -1.0]).unwrap();
        let (mean, lp0) = crate::diffusion::reverse_step_with_noise(&p, &x, &c, 4, &s, None).unwrap();
        let delta = [0.01, -0.02, 0.0, 0.03, 0.0, 0.01];
        let moved = Waveform::new(mean.samples().iter().zip(delta).map(|(a, d)| a + d).collect()).unwrap();
        let lp1 = logprob_action(&p, &c, &x, 4, &moved, &s).unwrap();
        let sq: f64 = delta.iter().map(|d| d * d).sum();
        assert!((lp1 - lp0 + sq / (2.0 * s.reverse_variance(4))).abs() < 1e-9);
        assert!(logprob_action(&p, &c, &x, 4, &Waveform::zeros(5), &s).is_err());
    }

    #[test]
    fn actions_replay_states() {
        let (p, s, c) = setup();
        let t = rollout(&p, &c, &s, 2).unwrap();
        let mut st = MdpState {
            condition: c.clone(),
            x: t.states[0].clone(),
            k: 0,
        };
        for a in &t.states[1..] {
            st = transition(&st, a.clone());
        }
        assert_eq!(&st.x, t.terminal());
        assert_eq!(st.k, 10);
    }

    #[test]
    fn jsonl_dump_has_one_line_per_trajectory() {
        let (p, s, c) = setup();
        let a = rollout(&p, &c, &s, 1).unwrap();
        let b = rollout(&p, &c, &s, 2).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, [&a, &b]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let v: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(v["condition_id"], 3);
        assert_eq!(v["log_probs"].as_array().unwrap().len(), 10);
    }
}
