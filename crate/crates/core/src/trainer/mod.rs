//! Per-task training: cross-entropy on both visual paths plus the
//! vocabulary regression term, a two-stage schedule, energy-based negative
//! classes in the second stage, and momentum vocabulary updates.

mod adam;
mod energy;
pub mod naive;
mod negatives;
mod step;
mod task;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::Adam;
pub use energy::energy_score;
pub use negatives::{argmax, nearest_rank_percentile, select_negative_classes, NegativeSet, PreviousTask, SampleLogits};
pub use step::{run_step, BatchItem, Gradients, LossParts, NegativePolicy, StepInputs, StepOutput};
pub use task::{previous_tasks, stage_boundary, train_task, IterationRecord, TaskSummary};

use crate::encoder::{AdapterTarget, EncoderError};
use crate::vocabulary::VocabError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("energy score over an empty class set")]
    EmptyTask,
    #[error("training diverged at task {task}, iteration {iteration}: non-finite loss")]
    Divergence { task: usize, iteration: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

/// Which current-task classes receive a momentum update each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateScope {
    AllTaskClasses,
    BatchClasses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub default_epochs: usize,
    /// Overrides of `default_epochs`, keyed by task index.
    pub epochs_per_task: BTreeMap<usize, usize>,
    pub rank: usize,
    pub prompt_length: usize,
    pub adapter_targets: Vec<AdapterTarget>,
    pub adapter_scale: f64,
    pub use_vocabulary_update: bool,
    pub use_task_prompts: bool,
    pub use_negative_selection: bool,
    pub negative_diff_sign: f64,
    pub update_scope: UpdateScope,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            gamma: 0.7,
            tau: 0.01,
            learning_rate: 0.001,
            batch_size: 128,
            default_epochs: 20,
            epochs_per_task: BTreeMap::new(),
            rank: 5,
            prompt_length: 1,
            adapter_targets: vec![AdapterTarget::Query, AdapterTarget::Value],
            adapter_scale: 1.0,
            use_vocabulary_update: true,
            use_task_prompts: true,
            use_negative_selection: true,
            negative_diff_sign: 1.0,
            update_scope: UpdateScope::AllTaskClasses,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn epochs_for(&self, task: usize) -> usize {
        self.epochs_per_task.get(&task).copied().unwrap_or(self.default_epochs)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be > 0");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must be in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.rank == 0 || self.prompt_length == 0 {
            return bad("rank and prompt_length must be >= 1");
        }
        if self.negative_diff_sign != 1.0 && self.negative_diff_sign != -1.0 {
            return bad("negative_diff_sign must be +1 or -1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if self.adapter_targets.is_empty() {
            return bad("adapter_targets must not be empty");
        }
        Ok(())
    }
}

#[cfg(feature = "parallel")]
pub(crate) fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reported_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.alpha, c.gamma, c.tau, c.learning_rate), (0.1, 0.7, 0.01, 0.001));
        assert_eq!((c.batch_size, c.rank, c.prompt_length), (128, 5, 1));
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_values() {
        for c in [
            TrainConfig {
                tau: 0.0,
                ..Default::default()
            },
            TrainConfig {
                gamma: 0.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
            TrainConfig {
                negative_diff_sign: 0.5,
                ..Default::default()
            },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
