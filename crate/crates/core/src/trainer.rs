//! Online fine-tuning loop, top-k checkpointing and held-out evaluation.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::mdp::{rollout, score_terminal, DenoisingTrajectory};
use crate::model::{clip_global_norm, DenoiserParams, Sgd};
use crate::objectives::{compute_gradient, Algo, ObjectiveConfig, ObjectiveContext};
use crate::reward::Scorer;
use crate::rng::{self, stream};
use crate::schedule::NoiseSchedule;
use crate::waveform::Condition;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub batch_size: usize,
    pub episodes: usize,
    pub seed: u64,
    pub checkpoint_top_k: usize,
    /// Validation evaluation period in episodes; 0 disables it.
    pub eval_every: usize,
    pub eval_samples_per_condition: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    /// Record per-episode wall time; off keeps metrics byte-reproducible.
    pub log_wall_time: bool,
    pub divergence_floor: f64,
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveConfig::default(),
            batch_size: 16,
            episodes: 200,
            seed: 0,
            checkpoint_top_k: 3,
            eval_every: 0,
            eval_samples_per_condition: 1,
            learning_rate: 2e-3,
            momentum: 0.9,
            clip_norm: 1.0,
            log_wall_time: false,
            divergence_floor: 1.05,
            divergence_patience: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.batch_size == 0 || self.checkpoint_top_k == 0 || self.eval_samples_per_condition == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, checkpoint_top_k and eval_samples_per_condition must be positive".into(),
            ));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
            ("clip_norm", self.clip_norm),
            ("divergence_floor", self.divergence_floor),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Schedules and scorers shared by training and evaluation.
#[derive(Clone, Copy)]
pub struct Lab<'a> {
    pub scorer: &'a Scorer,
    pub fine: &'a NoiseSchedule,
    pub coarse: &'a NoiseSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode: usize,
    pub algo: Algo,
    pub mean_reward: f64,
    pub mean_eval: f64,
    pub mean_ter: f64,
    pub shaped_mean: f64,
    pub penalty_mean: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub episode: usize,
    pub proxy_mean: f64,
    pub eval_mean: f64,
    pub ter_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarningRow {
    pub episode: usize,
    pub message: String,
}

/// A retained checkpoint: the parameters that generated episode `episode`'s
/// batch, ranked by that batch's mean training reward.
#[derive(Debug, Clone)]
pub struct RankedCheckpoint {
    pub episode: usize,
    pub score: Option<f64>,
    pub params: DenoiserParams,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub metrics: Vec<MetricsRow>,
    pub eval: Vec<EvalRow>,
    pub warnings: Vec<WarningRow>,
    /// Best first.
    pub checkpoints: Vec<RankedCheckpoint>,
    pub final_params: DenoiserParams,
    pub config_snapshot: TrainConfig,
}

impl RunArtifacts {
    pub fn best(&self) -> &RankedCheckpoint {
        &self.checkpoints[0]
    }

    pub fn mean_reward_last(&self, n: usize) -> f64 {
        tail_mean(self.metrics.iter().map(|r| r.mean_reward), n)
    }

    pub fn mean_eval_last(&self, n: usize) -> f64 {
        tail_mean(self.metrics.iter().map(|r| r.mean_eval), n)
    }

    /// Writes `metrics.csv`, `eval.csv`, `warnings.csv`, `config.json`,
    /// `final.ckpt` and `topk/rank{i}_ep{episode}.ckpt` under `dir`.
    pub fn write(&self, dir: &Path, meta: &CheckpointMeta) -> Result<()> {
        std::fs::create_dir_all(dir.join("topk"))?;
        write_metrics_csv(&dir.join("metrics.csv"), &self.metrics)?;
        write_rows(&dir.join("eval.csv"), &self.eval)?;
        write_rows(&dir.join("warnings.csv"), &self.warnings)?;
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config_snapshot)?)?;
        let final_meta = CheckpointMeta {
            episode: self.metrics.len(),
            policy_version: self.final_params.version,
            ..meta.clone()
        };
        save_checkpoint(&self.final_params, &final_meta, &dir.join("final.ckpt"))?;
        for old in std::fs::read_dir(dir.join("topk"))? {
            std::fs::remove_file(old?.path())?;
        }
        for (i, c) in self.checkpoints.iter().enumerate() {
            let m = CheckpointMeta {
                episode: c.episode,
                policy_version: c.params.version,
                ..meta.clone()
            };
            save_checkpoint(&c.params, &m, &dir.join("topk").join(format!("rank{}_ep{}.ckpt", i + 1, c.episode)))?;
        }
        Ok(())
    }
}

fn tail_mean(values: impl DoubleEndedIterator<Item = f64> + ExactSizeIterator, n: usize) -> f64 {
    let k = n.min(values.len());
    if k == 0 {
        return f64::NAN;
    }
    values.rev().take(k).sum::<f64>() / k as f64
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_rows(path, rows)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Samples, scores and updates for `cfg.episodes` episodes starting from `p_pre`,
/// which also serves as the frozen reference.
pub fn finetune(p_pre: &DenoiserParams, lab: &Lab<'_>, cfg: &TrainConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let train = lab.scorer.corpus().indices(crate::reward::SplitName::Train);
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let mut policy = p_pre.clone();
    policy.version = 0;
    policy.zero_grad();
    let reference = p_pre;
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let ctx = ObjectiveContext {
        coarse: lab.coarse,
        fine: lab.fine,
        reference: Some(reference),
    };
    let mut metrics = Vec::with_capacity(cfg.episodes);
    let mut eval = Vec::new();
    let mut warnings = Vec::new();
    let mut top: Vec<RankedCheckpoint> = Vec::new();
    let mut low_streak = 0usize;

    for episode in 0..cfg.episodes {
        let started = Instant::now();
        if cfg.eval_every > 0 && episode % cfg.eval_every == 0 {
            let conds = lab.scorer.corpus().conditions_in(crate::reward::SplitName::Val);
            let rep = evaluate_checkpoint(&policy, lab, &conds, cfg.eval_samples_per_condition, cfg.seed)?;
            eval.push(EvalRow {
                episode,
                proxy_mean: rep.proxy.mean,
                eval_mean: rep.eval.mean,
                ter_mean: rep.ter.mean,
            });
        }
        let batch = collect_batch(&policy, lab, cfg, episode, train)?;
        let n = batch.len() as f64;
        let mut mean_eval = 0.0;
        let mut mean_ter = 0.0;
        for t in &batch {
            mean_eval += lab.scorer.eval_mos(t.terminal(), &t.condition)?.value();
            mean_ter += lab.scorer.token_error_rate(t.terminal(), &t.condition)?;
        }
        mean_eval /= n;
        mean_ter /= n;

        let mut bg = compute_gradient(&policy, &batch, &cfg.objective, &ctx)?;
        if !bg.grads.is_finite() {
            return Err(Error::NonFiniteGradient {
                episode,
                detail: format!("{:?}", bg.diagnostics),
            });
        }
        let d = bg.diagnostics.clone();
        let ranked = RankedCheckpoint {
            episode,
            score: Some(d.reward_mean),
            params: policy.clone(),
        };
        clip_global_norm(&mut bg.grads, cfg.clip_norm);
        policy.accumulate(&bg.grads);
        opt.step(&mut policy);
        if !policy.is_finite() {
            return Err(Error::NonFiniteGradient {
                episode,
                detail: "parameters became non-finite after the update".into(),
            });
        }
        insert_ranked(&mut top, ranked, cfg.checkpoint_top_k);

        if d.reward_mean < cfg.divergence_floor {
            low_streak += 1;
            if low_streak == cfg.divergence_patience {
                let message = format!(
                    "mean reward below {} for {} consecutive episodes",
                    cfg.divergence_floor, cfg.divergence_patience
                );
                log::warn!("episode {episode}: {message}");
                warnings.push(WarningRow { episode, message });
            }
        } else {
            low_streak = 0;
        }
        let wall_ms = if cfg.log_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        log::debug!(
            "episode {episode} {}: reward {:.4} eval {:.4} penalty {:.4} grad {:.3e}",
            cfg.objective.algo,
            d.reward_mean,
            mean_eval,
            d.penalty_mean,
            d.grad_norm
        );
        metrics.push(MetricsRow {
            episode,
            algo: cfg.objective.algo,
            mean_reward: d.reward_mean,
            mean_eval,
            mean_ter,
            shaped_mean: d.shaped_mean,
            penalty_mean: d.penalty_mean,
            grad_norm: d.grad_norm,
            wall_ms,
        });
    }
    if top.is_empty() {
        top.push(RankedCheckpoint {
            episode: 0,
            score: None,
            params: policy.clone(),
        });
    }
    Ok(RunArtifacts {
        metrics,
        eval,
        warnings,
        checkpoints: top,
        final_params: policy,
        config_snapshot: cfg.clone(),
    })
}

fn collect_batch(
    policy: &DenoiserParams,
    lab: &Lab<'_>,
    cfg: &TrainConfig,
    episode: usize,
    train: &[usize],
) -> Result<Vec<DenoisingTrajectory>> {
    let mut pick = rng::rng_for(cfg.seed, &[stream::CONDITIONS, episode as u64]);
    let conds: Vec<Condition> = (0..cfg.batch_size)
        .map(|_| lab.scorer.corpus().conditions[train[pick.random_range(0..train.len())]].clone())
        .collect();
    conds
        .par_iter()
        .enumerate()
        .map(|(b, c)| {
            let seed = rng::derive_seed(cfg.seed, &[stream::ROLLOUT, episode as u64, b as u64]);
            let traj = rollout(policy, c, lab.coarse, seed)?;
            let r = lab.scorer.proxy_mos(traj.terminal(), c)?.value();
            score_terminal(traj, |_, _| r)
        })
        .collect()
}

fn insert_ranked(top: &mut Vec<RankedCheckpoint>, item: RankedCheckpoint, k: usize) {
    let pos = top.iter().position(|c| c.score < item.score).unwrap_or(top.len());
    if pos < k {
        top.insert(pos, item);
        top.truncate(k);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub n: usize,
    pub proxy: Summary,
    pub eval: Summary,
    pub ter: Summary,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<14} n={:<5} proxy_mos {:.4} ± {:.4}  eval_mos {:.4} ± {:.4}  ter {:.4} ± {:.4}",
            self.label, self.n, self.proxy.mean, self.proxy.std, self.eval.mean, self.eval.std, self.ter.mean, self.ter.std
        )
    }
}

fn report(label: &str, scores: &[(f64, f64, f64)]) -> EvalReport {
    let col = |k: usize| -> Vec<f64> {
        scores
            .iter()
            .map(|s| match k {
                0 => s.0,
                1 => s.1,
                _ => s.2,
            })
            .collect()
    };
    EvalReport {
        label: label.into(),
        n: scores.len(),
        proxy: Summary::of(&col(0)),
        eval: Summary::of(&col(1)),
        ter: Summary::of(&col(2)),
    }
}

/// Samples `n_per_condition` outputs per condition with per-sample seeds derived
/// from `seed`, and scores them with all three scorers.
pub fn evaluate_checkpoint(
    params: &DenoiserParams,
    lab: &Lab<'_>,
    conditions: &[Condition],
    n_per_condition: usize,
    seed: u64,
) -> Result<EvalReport> {
    if conditions.is_empty() || n_per_condition == 0 {
        return Err(Error::EmptySplit("evaluation conditions".into()));
    }
    let jobs: Vec<(&Condition, usize)> = conditions.iter().flat_map(|c| (0..n_per_condition).map(move |j| (c, j))).collect();
    let scores = jobs
        .par_iter()
        .map(|(c, j)| {
            let s = rng::derive_seed(seed, &[stream::EVAL, c.id as u64, *j as u64]);
            let traj = rollout(params, c, lab.coarse, s)?;
            let x = traj.terminal();
            Ok((
                lab.scorer.proxy_mos(x, c)?.value(),
                lab.scorer.eval_mos(x, c)?.value(),
                lab.scorer.token_error_rate(x, c)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report("model", &scores))
}

/// Scores the clean templates themselves.
pub fn ground_truth_report(scorer: &Scorer, conditions: &[Condition]) -> Result<EvalReport> {
    if conditions.is_empty() {
        return Err(Error::EmptySplit("evaluation conditions".into()));
    }
    let scores = conditions
        .iter()
        .map(|c| {
            let x = scorer.corpus().template(c)?;
            Ok((
                scorer.proxy_mos(&x, c)?.value(),
                scorer.eval_mos(&x, c)?.value(),
                scorer.token_error_rate(&x, c)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report("ground_truth", &scores))
}

/// Writes report lines as a small CSV table.
pub fn write_reports(mut w: impl Write, reports: &[EvalReport]) -> Result<()> {
    writeln!(w, "label,n,proxy_mean,proxy_std,eval_mean,eval_std,ter_mean,ter_std")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.label, r.n, r.proxy.mean, r.proxy.std, r.eval.mean, r.eval.std, r.ter.mean, r.ter.std
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranked(episode: usize, score: f64) -> RankedCheckpoint {
        RankedCheckpoint {
            episode,
            score: Some(score),
            params: DenoiserParams::zeros(crate::model::ModelShape {
                data_len: 2,
                hidden: vec![2],
                time_dim: 2,
                cond_dim: 2,
                vocab_size: 2,
            })
            .unwrap(),
        }
    }

    #[test]
    fn top_k_keeps_best_sorted_and_earliest_on_ties() {
        let mut top = Vec::new();
        for (e, s) in [3.0, 1.0, 4.0, 4.0, 2.0, 5.0].into_iter().enumerate() {
            insert_ranked(&mut top, ranked(e, s), 3);
        }
        let got: Vec<(usize, f64)> = top.iter().map(|c| (c.episode, c.score.unwrap())).collect();
        assert_eq!(got, vec![(5, 5.0), (2, 4.0), (3, 4.0)]);
    }

    #[test]
    fn summary_and_tail_mean() {
        let s = Summary::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(tail_mean([1.0, 2.0, 3.0, 5.0].into_iter(), 2), 4.0);
        assert!(tail_mean(std::iter::empty::<f64>(), 2).is_nan());
    }
}
