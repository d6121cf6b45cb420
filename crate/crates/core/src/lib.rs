//! Toy-scale denoising diffusion model for short conditioned waveforms, cast as
//! a finite-horizon MDP and fine-tuned with policy-gradient objectives.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod mdp;
pub mod model;
pub mod objectives;
pub mod oracle;
pub mod reward;
pub mod rng;
pub mod schedule;
pub mod trainer;
pub mod verify;
pub mod waveform;

pub use checkpoint::{load_checkpoint, load_checkpoint_checked, save_checkpoint, CheckpointMeta};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use mdp::DenoisingTrajectory;
pub use model::{init_params, pretrain, DenoiserParams, GradReport, ModelShape, PretrainConfig};
pub use objectives::{compute_gradient, Algo, Baseline, ObjectiveConfig};
pub use oracle::{analytic_grad, analytic_value, estimator_bias_test, BiasReport, OneStepInstance};
pub use reward::{ConditionCorpus, MosScore, Scorer, SplitName};
pub use schedule::{make_linear_schedule, NoiseSchedule};
pub use trainer::{evaluate_checkpoint, finetune, EvalReport, Lab, MetricsRow, RunArtifacts, TrainConfig};
pub use verify::{run_suite, CheckLine, Suite, VerifyOptions};
pub use waveform::{Condition, Waveform};
