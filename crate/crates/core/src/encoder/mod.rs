//! Frozen toy dual encoder with masked task prompts on the image tower and
//! per-task low-rank adapters on the text tower.

pub mod adapter;
mod backbone;
pub mod checkpoint;
mod image;
pub mod mask;
pub mod prompt;
mod text;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adapter::{init_adapter, parse_targets, AdapterNodes, AdapterTarget, LowRankAdapter, LowRankPair};
pub use backbone::BlockWeights;
pub use image::ImageNodes;
pub use mask::{build_attention_mask, AttentionMask};
pub use prompt::{init_task_prompt, TaskPrompt, TaskPromptBank};
pub use text::{tokenize, TEXT_VOCAB_SIZE};

use crate::stream::ImageShape;
use crate::tensor::{norm, Mat};
use crate::util::rng_for;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("degenerate (zero-norm) vector in cosine score")]
    DegenerateVector,
    #[error("cannot tokenize class name {name:?}: {reason}")]
    Tokenize { name: String, reason: String },
    #[error("invalid backbone config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub max_text_tokens: usize,
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            num_layers: 2,
            num_heads: 4,
            patch_size: 4,
            max_text_tokens: 16,
            mlp_ratio: 4,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.embed_dim == 0 || self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(EncoderError::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 || self.patch_size == 0 || self.max_text_tokens < 3 || self.mlp_ratio == 0 {
            return Err(EncoderError::Config(
                "num_layers, patch_size, mlp_ratio must be >= 1 and max_text_tokens >= 3".into(),
            ));
        }
        Ok(())
    }
}

/// Per-image encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualOutput {
    /// `p_L^i` for every prompt in the bank, in task order.
    pub prompt_outputs: Vec<Vec<f64>>,
    pub cls_output: Vec<f64>,
}

impl VisualOutput {
    /// Fused embedding for task `task` (1-based).
    pub fn fused(&self, task: usize) -> Vec<f64> {
        fuse_visual(&self.prompt_outputs[task - 1], &self.cls_output)
    }
}

/// Frozen weights of both towers.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub config: BackboneConfig,
    pub image_shape: ImageShape,
    patch_proj: Mat,
    cls_token: Mat,
    image_pos: Mat,
    image_blocks: Vec<BlockWeights>,
    image_head: Mat,
    token_emb: Mat,
    text_pos: Mat,
    text_blocks: Vec<BlockWeights>,
    text_head: Mat,
}

impl DualEncoder {
    pub fn new(config: BackboneConfig, image_shape: ImageShape) -> Result<Self, EncoderError> {
        config.validate()?;
        let p = config.patch_size;
        if !image_shape.height.is_multiple_of(p) || !image_shape.width.is_multiple_of(p) {
            return Err(EncoderError::Config(format!(
                "image {}x{} not divisible by patch_size {p}",
                image_shape.height, image_shape.width
            )));
        }
        let d = config.embed_dim;
        let s = 1.0 / (d as f64).sqrt();
        let patch_dim = p * p * image_shape.channels;
        let patches = (image_shape.height / p) * (image_shape.width / p);
        let mut rng = rng_for(&[config.seed, 0xba5e]);
        let patch_proj = Mat::gaussian(patch_dim, d, 1.0 / (patch_dim as f64).sqrt(), &mut rng);
        let cls_token = Mat::gaussian(1, d, s, &mut rng);
        let image_pos = Mat::gaussian(patches + 1, d, s, &mut rng);
        let image_blocks = (0..config.num_layers)
            .map(|_| BlockWeights::random(d, config.mlp_ratio, &mut rng))
            .collect();
        let image_head = Mat::gaussian(d, d, s, &mut rng);
        let mut rng = rng_for(&[config.seed, 0x7e47]);
        let token_emb = Mat::gaussian(TEXT_VOCAB_SIZE, d, s, &mut rng);
        let text_pos = Mat::gaussian(config.max_text_tokens, d, s, &mut rng);
        let text_blocks = (0..config.num_layers)
            .map(|_| BlockWeights::random(d, config.mlp_ratio, &mut rng))
            .collect();
        let text_head = Mat::gaussian(d, d, s, &mut rng);
        Ok(Self {
            config,
            image_shape,
            patch_proj,
            cls_token,
            image_pos,
            image_blocks,
            image_head,
            token_emb,
            text_pos,
            text_blocks,
            text_head,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn num_patches(&self) -> usize {
        let p = self.config.patch_size;
        (self.image_shape.height / p) * (self.image_shape.width / p)
    }

    /// Scalar count of all frozen weights.
    pub fn frozen_parameter_count(&self) -> usize {
        let mats = [
            &self.patch_proj,
            &self.cls_token,
            &self.image_pos,
            &self.image_head,
            &self.token_emb,
            &self.text_pos,
            &self.text_head,
        ];
        mats.iter().map(|m| m.data.len()).sum::<usize>()
            + self
                .image_blocks
                .iter()
                .chain(&self.text_blocks)
                .map(BlockWeights::parameter_count)
                .sum::<usize>()
    }
}

/// `v_t = (p_L^t + x_L^cls) / 2`.
pub fn fuse_visual(prompt_out: &[f64], cls: &[f64]) -> Vec<f64> {
    assert_eq!(prompt_out.len(), cls.len(), "fuse_visual dimension mismatch");
    prompt_out.iter().zip(cls).map(|(a, b)| (a + b) / 2.0).collect()
}

/// `w_y = (g_t(y) + V(y)) / 2`.
pub fn refine_embedding(adapted: &[f64], vocab: &[f64]) -> Vec<f64> {
    assert_eq!(adapted.len(), vocab.len(), "refine_embedding dimension mismatch");
    adapted.iter().zip(vocab).map(|(a, b)| (a + b) / 2.0).collect()
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64, EncoderError> {
    if a.len() != b.len() {
        return Err(EncoderError::Dimension {
            context: "cosine_score",
            expected: a.len(),
            found: b.len(),
        });
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(EncoderError::DegenerateVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Trainable scalars of the active prompt plus the current adapter.
pub fn count_learnable_parameters(bank: &TaskPromptBank, adapter: Option<&LowRankAdapter>) -> usize {
    bank.active().map(|p| p.vectors.data.len()).unwrap_or(0) + adapter.map(LowRankAdapter::parameter_count).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fuse_examples() {
        assert_eq!(fuse_visual(&[2.0, 0.0], &[0.0, 2.0]), vec![1.0, 1.0]);
        assert_eq!(fuse_visual(&[0.3, 0.3], &[0.3, 0.3]), vec![0.3, 0.3]);
        assert_eq!(fuse_visual(&[1.0, 0.0], &[-1.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn refine_examples() {
        assert_eq!(refine_embedding(&[2.0, 0.0], &[0.0, 2.0]), vec![1.0, 1.0]);
        let g = [0.25, -1.5, 3.0];
        assert_eq!(refine_embedding(&g, &g), g.to_vec());
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_score(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine_score(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 1.0);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]), Err(EncoderError::DegenerateVector));
    }

    #[test]
    fn config_validation() {
        let bad = BackboneConfig {
            embed_dim: 30,
            num_heads: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(DualEncoder::new(BackboneConfig::default(), ImageShape::new(15, 16, 3)).is_err());
    }

    #[test]
    fn frozen_init_is_seeded() {
        let shape = ImageShape::new(16, 16, 3);
        let a = DualEncoder::new(BackboneConfig::default(), shape).unwrap();
        let b = DualEncoder::new(BackboneConfig::default(), shape).unwrap();
        assert_eq!(a, b);
        let c = DualEncoder::new(
            BackboneConfig {
                seed: 1,
                ..Default::default()
            },
            shape,
        )
        .unwrap();
        assert_ne!(a, c);
        assert_eq!(a.num_patches(), 16);
    }
}
