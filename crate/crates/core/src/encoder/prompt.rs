use serde::{Deserialize, Serialize};

use crate::tensor::Mat;
use crate::util::rng_for;

/// Learnable input tokens for one task (`prompt_length × D`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPrompt {
    pub task_index: usize,
    pub vectors: Mat,
    pub frozen: bool,
}

impl TaskPrompt {
    pub fn len(&self) -> usize {
        self.vectors.rows
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows == 0
    }
}

/// Zero-mean Gaussian prompt with std 0.02, seeded by `(seed, t)`.
pub fn init_task_prompt(t: usize, prompt_length: usize, embed_dim: usize, seed: u64) -> TaskPrompt {
    let mut rng = rng_for(&[seed, 0x9a0e7, t as u64]);
    TaskPrompt {
        task_index: t,
        vectors: Mat::gaussian(prompt_length, embed_dim, 0.02, &mut rng),
        frozen: false,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskPromptBank {
    pub prompts: Vec<TaskPrompt>,
}

impl TaskPromptBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Appends the next task's prompt and freezes every earlier one.
    pub fn push(&mut self, mut prompt: TaskPrompt) {
        assert_eq!(prompt.task_index, self.prompts.len() + 1, "prompt indices must be consecutive");
        for p in &mut self.prompts {
            p.frozen = true;
        }
        prompt.frozen = false;
        self.prompts.push(prompt);
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.prompts {
            p.frozen = true;
        }
    }

    pub fn truncated(&self, len: usize) -> Self {
        Self {
            prompts: self.prompts[..len.min(self.prompts.len())].to_vec(),
        }
    }

    pub fn token_count(&self) -> usize {
        self.prompts.iter().map(TaskPrompt::len).sum()
    }

    pub fn active(&self) -> Option<&TaskPrompt> {
        self.prompts.last().filter(|p| !p.frozen)
    }

    pub fn active_mut(&mut self) -> Option<&mut TaskPrompt> {
        self.prompts.last_mut().filter(|p| !p.frozen)
    }

    pub fn validate(&self) -> bool {
        let consecutive = self.prompts.iter().enumerate().all(|(i, p)| p.task_index == i + 1);
        let trainable = self.prompts.iter().filter(|p| !p.frozen).count();
        let last_only = self.prompts.iter().rev().skip(1).all(|p| p.frozen);
        consecutive && trainable <= 1 && last_only && self.prompts.iter().all(|p| p.vectors.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_freezes_previous() {
        let mut bank = TaskPromptBank::new();
        bank.push(init_task_prompt(1, 1, 8, 0));
        bank.push(init_task_prompt(2, 1, 8, 0));
        assert!(bank.prompts[0].frozen);
        assert!(!bank.prompts[1].frozen);
        assert!(bank.validate());
        assert_eq!(bank.active().unwrap().task_index, 2);
    }

    #[test]
    fn init_is_seeded_and_small() {
        let a = init_task_prompt(3, 1, 64, 9);
        assert_eq!(a, init_task_prompt(3, 1, 64, 9));
        assert_ne!(a.vectors, init_task_prompt(4, 1, 64, 9).vectors);
        let std = (a.vectors.data.iter().map(|v| v * v).sum::<f64>() / 64.0).sqrt();
        assert!(std > 0.005 && std < 0.05, "std {std}");
    }

    #[test]
    #[should_panic]
    fn non_consecutive_push_panics() {
        let mut bank = TaskPromptBank::new();
        bank.push(init_task_prompt(2, 1, 8, 0));
    }
}
