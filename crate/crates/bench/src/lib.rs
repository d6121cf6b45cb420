//! Fixtures shared by the benchmarks.

use dlpo_core::mdp::{rollout, score_terminal};
use dlpo_core::{init_params, Condition, DenoiserParams, DenoisingTrajectory, NoiseSchedule, RunConfig, Scorer};

pub struct Fixture {
    pub cfg: RunConfig,
    pub params: DenoiserParams,
    pub scorer: Scorer,
    pub fine: NoiseSchedule,
    pub coarse: NoiseSchedule,
    pub conditions: Vec<Condition>,
}

impl Fixture {
    /// Default-sized model with untrained weights.
    pub fn new(seed: u64) -> Self {
        let cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        let (fine, coarse) = cfg.schedules().expect("default schedules");
        let scorer = cfg.scorer().expect("default corpus");
        let params = init_params(seed, cfg.model_shape()).expect("default shape");
        let conditions = scorer.corpus().conditions_in(dlpo_core::SplitName::Train);
        Self {
            cfg,
            params,
            scorer,
            fine,
            coarse,
            conditions,
        }
    }

    pub fn batch(&self, n: usize) -> Vec<DenoisingTrajectory> {
        (0..n)
            .map(|i| {
                let c = &self.conditions[i % self.conditions.len()];
                let traj = rollout(&self.params, c, &self.coarse, self.cfg.seed + i as u64).expect("rollout");
                score_terminal(traj, |x, c| self.scorer.proxy_mos(x, c).map(|m| m.value()).unwrap_or(1.0)).expect("score")
            })
            .collect()
    }
}
