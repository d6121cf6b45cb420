//! Flat run configuration covering corpus, model, schedules, scorers,
//! pretraining and fine-tuning.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointMeta;
use crate::error::{Error, Result};
use crate::model::{init_params, pretrain, DenoiserParams, ModelShape, PretrainConfig, PretrainReport};
use crate::objectives::{Algo, Baseline, ObjectiveConfig};
use crate::reward::{ConditionCorpus, CorpusConfig, Scorer, ScorerConfig, SplitName};
use crate::rng::{self, stream};
use crate::schedule::{make_linear_schedule, NoiseSchedule};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub vocab_size: usize,
    pub data_len: usize,
    pub sample_rate: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub corpus_seed: u64,

    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub time_dim: usize,
    pub cond_dim: usize,

    pub fine_steps: usize,
    pub coarse_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub squared_loss: bool,

    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub pretrain_clip_norm: f64,
    pub momentum: f64,

    pub algo: Algo,
    pub alpha: f64,
    pub beta: f64,
    pub loss_guidance_steps: usize,
    pub detach_penalty: bool,
    pub baseline: Baseline,
    pub batch_size: usize,
    pub episodes: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub checkpoint_top_k: usize,
    pub eval_every: usize,
    pub eval_samples_per_condition: usize,
    pub log_wall_time: bool,
    pub divergence_floor: f64,
    pub divergence_patience: usize,

    pub proxy_weight: f64,
    pub eval_time_weight: f64,
    pub eval_hf_weight: f64,
    pub spectral_floor: f64,
    pub spectral_norm: f64,
    pub hf_cutoff_bin: usize,
    pub ter_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let scorer = ScorerConfig::default();
        let shape = ModelShape::default();
        let pre = PretrainConfig::default();
        let train = TrainConfig::default();
        let obj = ObjectiveConfig::default();
        Self {
            seed: 0,
            vocab_size: corpus.vocab_size,
            data_len: corpus.data_len,
            sample_rate: corpus.sample_rate,
            n_train: corpus.n_train,
            n_val: corpus.n_val,
            n_test: corpus.n_test,
            corpus_seed: corpus.seed,
            hidden_layers: shape.hidden.len(),
            hidden_width: shape.hidden[0],
            time_dim: shape.time_dim,
            cond_dim: shape.cond_dim,
            fine_steps: 1000,
            coarse_steps: 10,
            beta_start: 1e-4,
            beta_end: 0.02,
            squared_loss: pre.squared_loss,
            pretrain_steps: pre.steps,
            pretrain_batch: pre.batch,
            pretrain_lr: pre.lr,
            pretrain_clip_norm: pre.clip_norm,
            momentum: pre.momentum,
            algo: obj.algo,
            alpha: obj.alpha,
            beta: obj.beta,
            loss_guidance_steps: obj.loss_guidance_steps,
            detach_penalty: obj.detach_penalty,
            baseline: obj.baseline,
            batch_size: train.batch_size,
            episodes: train.episodes,
            learning_rate: train.learning_rate,
            clip_norm: train.clip_norm,
            checkpoint_top_k: train.checkpoint_top_k,
            eval_every: train.eval_every,
            eval_samples_per_condition: train.eval_samples_per_condition,
            log_wall_time: train.log_wall_time,
            divergence_floor: train.divergence_floor,
            divergence_patience: train.divergence_patience,
            proxy_weight: scorer.proxy_weight,
            eval_time_weight: scorer.eval_time_weight,
            eval_hf_weight: scorer.eval_hf_weight,
            spectral_floor: scorer.spectral_floor,
            spectral_norm: scorer.spectral_norm,
            hf_cutoff_bin: scorer.hf_cutoff_bin,
            ter_threshold: scorer.ter_threshold,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn keys() -> Vec<String> {
        match toml::Value::try_from(Self::default()) {
            Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }

    /// Current value of `key` in TOML notation.
    pub fn get(&self, key: &str) -> Option<String> {
        match toml::Value::try_from(self) {
            Ok(toml::Value::Table(t)) => t.get(key).map(|v| v.to_string()),
            _ => None,
        }
    }

    /// Replaces one key from its textual value. Values parse as TOML first and
    /// fall back to a bare string, so `algo=ddpo` and `beta=0` both work.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut table = match toml::Value::try_from(&*self) {
            Ok(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config("config is not a table".into())),
        };
        if !table.contains_key(key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let value = match (&table[key], value) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        table.insert(key.to_string(), value);
        let updated: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_shape().validate()?;
        self.train_config().validate()?;
        if self.coarse_steps == 0 || self.coarse_steps > self.fine_steps {
            return Err(Error::Config("coarse_steps must be in 1..=fine_steps".into()));
        }
        if self.pretrain_batch == 0 {
            return Err(Error::Config("pretrain_batch must be positive".into()));
        }
        Ok(())
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            vocab_size: self.vocab_size,
            data_len: self.data_len,
            sample_rate: self.sample_rate,
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
            seed: self.corpus_seed,
        }
    }

    pub fn scorer_config(&self) -> ScorerConfig {
        ScorerConfig {
            proxy_weight: self.proxy_weight,
            eval_time_weight: self.eval_time_weight,
            eval_hf_weight: self.eval_hf_weight,
            spectral_floor: self.spectral_floor,
            spectral_norm: self.spectral_norm,
            hf_cutoff_bin: self.hf_cutoff_bin,
            ter_threshold: self.ter_threshold,
        }
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape {
            data_len: self.data_len,
            hidden: vec![self.hidden_width; self.hidden_layers],
            time_dim: self.time_dim,
            cond_dim: self.cond_dim,
            vocab_size: self.vocab_size,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch: self.pretrain_batch,
            lr: self.pretrain_lr,
            momentum: self.momentum,
            clip_norm: self.pretrain_clip_norm,
            squared_loss: self.squared_loss,
        }
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            algo: self.algo,
            alpha: self.alpha,
            beta: self.beta,
            loss_guidance_steps: self.loss_guidance_steps,
            detach_penalty: self.detach_penalty,
            baseline: self.baseline,
            squared_loss: self.squared_loss,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            objective: self.objective_config(),
            batch_size: self.batch_size,
            episodes: self.episodes,
            seed: self.seed,
            checkpoint_top_k: self.checkpoint_top_k,
            eval_every: self.eval_every,
            eval_samples_per_condition: self.eval_samples_per_condition,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            clip_norm: self.clip_norm,
            log_wall_time: self.log_wall_time,
            divergence_floor: self.divergence_floor,
            divergence_patience: self.divergence_patience,
        }
    }

    /// `(fine, coarse)`; the coarse schedule is respaced from the fine one.
    pub fn schedules(&self) -> Result<(NoiseSchedule, NoiseSchedule)> {
        let fine = make_linear_schedule(self.fine_steps, self.beta_start, self.beta_end)?;
        let coarse = NoiseSchedule::respaced(&fine, self.coarse_steps)?;
        Ok((fine, coarse))
    }

    pub fn scorer(&self) -> Result<Scorer> {
        let corpus = ConditionCorpus::build(&self.corpus_config())?;
        Ok(Scorer::new(Arc::new(corpus), self.scorer_config()))
    }

    /// Initializes from the seed and pretrains on the training split.
    pub fn pretrain_model(&self, scorer: &Scorer, fine: &NoiseSchedule) -> Result<(DenoiserParams, PretrainReport)> {
        let mut p = init_params(rng::derive_seed(self.seed, &[stream::INIT]), self.model_shape())?;
        let items = scorer.corpus().items(SplitName::Train)?;
        let mut r = rng::rng_for(self.seed, &[stream::PRETRAIN]);
        let report = pretrain(&mut p, &items, fine, &self.pretrain_config(), &mut r)?;
        Ok((p, report))
    }

    pub fn checkpoint_meta(&self, episode: usize, policy_version: u64) -> CheckpointMeta {
        CheckpointMeta {
            shape: self.model_shape(),
            fine_steps: self.fine_steps,
            coarse_steps: self.coarse_steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            seed: self.seed,
            episode,
            policy_version,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let c = RunConfig::default();
        let text = c.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml_string(), text);
    }

    #[test]
    fn unknown_keys_rejected_and_partial_files_default() {
        assert!(RunConfig::from_toml_str("no_such_key = 1").is_err());
        let c = RunConfig::from_toml_str("episodes = 7\nalgo = \"ddpo\"").unwrap();
        assert_eq!(c.episodes, 7);
        assert_eq!(c.algo, Algo::Ddpo);
        assert_eq!(c.batch_size, RunConfig::default().batch_size);
    }

    #[test]
    fn set_parses_typed_values() {
        let mut c = RunConfig::default();
        c.set("algo", "klinr").unwrap();
        c.set("beta", "0").unwrap();
        c.set("baseline", "batch_mean").unwrap();
        c.set("episodes", "3").unwrap();
        assert_eq!((c.algo, c.beta, c.baseline, c.episodes), (Algo::Klinr, 0.0, Baseline::BatchMean, 3));
        assert!(c.set("bogus", "1").is_err());
        assert!(c.set("algo", "ppo").is_err());
        assert!(c.set("batch_size", "0").is_err());
        assert_eq!(c.get("algo").as_deref(), Some("\"klinr\""));
        assert_eq!(c.get("episodes").as_deref(), Some("3"));
        assert!(c.get("bogus").is_none());
    }
}
