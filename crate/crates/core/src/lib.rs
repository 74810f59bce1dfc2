//! Gradient-free refinement of pretrained policies with triangular-distribution
//! evolution strategies.
//!
//! The crate is organised bottom-up:
//!
//! - [`policy`]: flat-parameter MLP policies, Gaussian action head, rollouts.
//! - [`envs`]: three goal-conditioned toy control tasks.
//! - [`perturb`]: triangular and Gaussian parameter noise, antithetic pairs.
//! - [`estimator`]: centered ranks and ES gradient estimators.
//! - [`engine`]: the ES generation loop.
//! - [`ppo`]: a compact PPO trainer for the anchor policy.
//! - [`pipeline`]: two-stage schedules and multi-seed sweeps.
//! - [`stats`]: IQM, stratified bootstrap, probability of improvement,
//!   performance profiles.
//! - [`report`]: tables, CSV and SVG output.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod engine;
pub mod envs;
pub mod error;
pub mod estimator;
pub mod perturb;
pub mod pipeline;
pub mod policy;
pub mod ppo;
pub mod report;
pub mod rng;
pub mod runlog;
pub mod stats;

pub use engine::{evaluate_center, gaussian_es_run, tdes_run, EsConfig, EsOutcome, EsState, GenerationRecord};
pub use envs::{make_env, Env, EnvFactory, MdpSpec, TaskId};
pub use error::{Error, Result};
pub use estimator::{centered_ranks, tdes_gradient, CenteredRanks, GradientEstimate, ReturnTable};
pub use perturb::{antithetic_candidates, make_batch, NoiseDistribution, NoiseKind, PerturbationBatch};
pub use pipeline::{resume, sweep, ExperimentPlan, Method, RunRecord, SweepOptions};
pub use policy::{GaussianHead, MlpArchitecture, ParameterVector, Trajectory};
pub use ppo::{train_anchor, PpoConfig};
pub use stats::{iqm, prob_improvement, AggregateReport, ScoreMatrix};
