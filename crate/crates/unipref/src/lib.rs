//! Unified preference learning over exact tabular softmax policies.
//!
//! This crate trains small context-order-k softmax policies on synthetic
//! verifiable-instruction tasks with every objective of the unified
//! adversarial preference-learning family, all with exact analytic
//! gradients:
//!
//! - supervised imitation (`sft`) and its adversarially regularized form
//!   (`a-sft`),
//! - group-relative policy optimization with a clipped surrogate and KL
//!   penalty (`grpo`), plus its adversarial form (`a-grpo`),
//! - the single-stage unified objective over mixed demonstration/rollout
//!   batches, exposing its four-signal gradient decomposition,
//! - reward-model-free preference losses (`dpo`, `kto`),
//! - reward-mixing ablations (adding raw or transformed discriminator
//!   scores to the verifiable reward versus a separate adversarial term).
//!
//! Everything is deterministic given a seed: all randomness derives from
//! `(seed, purpose-label)` streams, so training trajectories are
//! bit-reproducible, checkpoints resume exactly, and paired ablation runs
//! differ only where the ablated quantity acts.
//!
//! ## Library layout
//!
//! | module | role |
//! |--------|------|
//! | [`vocab`] | token space and sequences |
//! | [`data`] | dataset records and line-delimited JSON I/O |
//! | [`config`] | training configuration and the flat config-file format |
//! | [`rng`] | seeded, label-separated random streams |
//! | [`policy`] | softmax policies: sampling, likelihoods, exact gradients, KL, checkpoints |
//! | [`verify`] | constraint checkers and the binary verifiable reward |
//! | [`disc`] | discriminators, the score-to-coefficient transform, adversarial gradients |
//! | [`loss`] | every objective as (scalar, gradient, components) |
//! | [`trainer`] | stages, pipelines, mixed batches, checkpointing, diagnostics |
//! | [`tasks`] | synthetic task generation, teacher construction, gt filtering |
//! | [`metrics`] | pass rates, length histograms, logp-gap statistics |
//! | [`cli`] | the `unipref` binary's subcommands |
//!
//! ## Runnable examples
//!
//! One example per capability, under `examples/`:
//!
//! - **`generate_data`** - build a task, its teacher, and filtered datasets
//! - **`train_unified`** - single-stage mixed-batch training with the
//!   four-signal gradient report
//! - **`staged_pipeline`** - a-sft then a-grpo with checkpoints
//! - **`preference_losses`** - dpo and kto on derived pairs/labels
//! - **`discriminator_coef`** - the score-to-coefficient transform and both
//!   built-in discriminators
//! - **`gradient_check`** - finite differences against analytic gradients
//! - **`dirac_grid`** - imitation as the limiting case of reward
//!   maximization, brute-forced on a policy grid
//! - **`evaluate_policy`** - pass rate, length histograms, logp-gap stats
//! - **`ablation_sweep`** - the adversarial-coefficient grid and the four
//!   reward-handling arms
//! - **`direction_match`** - the multi-seed paradigm comparison
//!
//! ```bash
//! cargo run -p unipref --example train_unified
//! cargo run --release -p unipref --example direction_match -- 2000 10
//! ```
//!
//! The `unipref` binary wraps the same library surface behind
//! `generate-data`, `train`, `evaluate`, `ablate`, and `report` subcommands.

pub mod cli;
pub mod config;
pub mod data;
pub mod disc;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod policy;
pub mod rng;
pub mod tasks;
pub mod trainer;
pub mod verify;
pub mod vocab;

pub use error::{Error, Result};
