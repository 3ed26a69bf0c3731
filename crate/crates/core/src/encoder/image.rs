use crate::autodiff::{Graph, NodeId};
use crate::encoder::backbone::{block_forward, LN_EPS};
use crate::encoder::{build_attention_mask, AttentionMask, DualEncoder, EncoderError, TaskPromptBank, VisualOutput};
use crate::stream::ImageSample;
use crate::tensor::Mat;

const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

/// Output nodes of one image pass: one `1×D` node per prompt and the class token.
#[derive(Debug, Clone)]
pub struct ImageNodes {
    pub prompt_outputs: Vec<NodeId>,
    pub cls: NodeId,
}

impl DualEncoder {
    /// `N × (p·p·C)` patch matrix, patches in raster order.
    pub fn patchify(&self, image: &ImageSample) -> Result<Mat, EncoderError> {
        let shape = self.image_shape;
        if image.pixels.len() != shape.len() {
            return Err(EncoderError::Dimension {
                context: "image pixels",
                expected: shape.len(),
                found: image.pixels.len(),
            });
        }
        let p = self.config.patch_size;
        let (ph, pw) = (shape.height / p, shape.width / p);
        let patch_dim = p * p * shape.channels;
        let mut out = Mat::zeros(ph * pw, patch_dim);
        for py in 0..ph {
            for px in 0..pw {
                let row = out.row_mut(py * pw + px);
                let mut k = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        for c in 0..shape.channels {
                            row[k] = (f64::from(image.pixel(shape, py * p + dy, px * p + dx, c)) - PIXEL_MEAN) / PIXEL_STD;
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Records the image tower on `g`. `prompts` are `len_i × D` nodes in
    /// task order; `mask` must cover all prompt tokens plus `N + 1`.
    pub fn image_graph(
        &self,
        g: &mut Graph,
        image: &ImageSample,
        prompts: &[NodeId],
        mask: &AttentionMask,
    ) -> Result<ImageNodes, EncoderError> {
        let d = self.embed_dim();
        let patches = self.patchify(image)?;
        let n = patches.rows;
        let lens: Vec<usize> = prompts.iter().map(|p| g.value(*p).rows).collect();
        for p in prompts {
            if g.value(*p).cols != d {
                return Err(EncoderError::Dimension {
                    context: "prompt width",
                    expected: d,
                    found: g.value(*p).cols,
                });
            }
        }
        let prompt_tokens: usize = lens.iter().sum();
        if mask.size != prompt_tokens + n + 1 {
            return Err(EncoderError::Dimension {
                context: "attention mask",
                expected: prompt_tokens + n + 1,
                found: mask.size,
            });
        }

        let image_tokens = patches.matmul(&self.patch_proj);
        let mut seq = Mat::zeros(n + 1, d);
        for c in 0..d {
            seq.set(0, c, self.cls_token.get(0, c) + self.image_pos.get(0, c));
        }
        for r in 0..n {
            for c in 0..d {
                seq.set(r + 1, c, image_tokens.get(r, c) + self.image_pos.get(r + 1, c));
            }
        }
        let image_node = g.constant(seq);
        let mut parts: Vec<NodeId> = prompts.to_vec();
        parts.push(image_node);
        let mut x = if prompts.is_empty() { image_node } else { g.concat_rows(&parts) };

        let shared = mask.shared();
        for block in &self.image_blocks {
            x = block_forward(g, x, block, self.config.num_heads, &shared, None);
        }

        let head = g.constant(self.image_head.clone());
        let readout = |g: &mut Graph, start: usize, len: usize| {
            let rows = g.slice_rows(x, start, len);
            let rows = g.layer_norm(rows, LN_EPS);
            let proj = g.matmul(rows, head);
            if len == 1 {
                proj
            } else {
                let avg = g.constant(Mat::from_vec(1, len, vec![1.0 / len as f64; len]));
                g.matmul(avg, proj)
            }
        };
        let mut prompt_outputs = Vec::with_capacity(prompts.len());
        let mut offset = 0;
        for len in lens {
            prompt_outputs.push(readout(g, offset, len));
            offset += len;
        }
        let cls = readout(g, prompt_tokens, 1);
        Ok(ImageNodes { prompt_outputs, cls })
    }

    /// Frozen forward with every prompt in `bank` under the task-prompt mask.
    pub fn encode_image(&self, image: &ImageSample, bank: &TaskPromptBank) -> Result<VisualOutput, EncoderError> {
        let mask = build_attention_mask(bank.token_count(), self.num_patches());
        self.encode_image_with_mask(image, bank, &mask)
    }

    pub fn encode_image_with_mask(
        &self,
        image: &ImageSample,
        bank: &TaskPromptBank,
        mask: &AttentionMask,
    ) -> Result<VisualOutput, EncoderError> {
        let mut g = Graph::new();
        let prompts: Vec<NodeId> = bank.prompts.iter().map(|p| g.constant(p.vectors.clone())).collect();
        let nodes = self.image_graph(&mut g, image, &prompts, mask)?;
        Ok(VisualOutput {
            prompt_outputs: nodes.prompt_outputs.iter().map(|n| g.value(*n).data.clone()).collect(),
            cls_output: g.value(nodes.cls).data.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_task_prompt, BackboneConfig};
    use crate::stream::{generate_stream, ImageShape, StreamConfig};

    fn setup() -> (DualEncoder, ImageSample) {
        let shape = ImageShape::new(8, 8, 3);
        let stream = generate_stream(&StreamConfig {
            num_tasks: 1,
            image_shape: shape,
            samples_per_class_train: 1,
            samples_per_class_test: 1,
            ..Default::default()
        })
        .unwrap();
        let enc = DualEncoder::new(
            BackboneConfig {
                embed_dim: 16,
                ..Default::default()
            },
            shape,
        )
        .unwrap();
        (enc, stream.tasks[0].train_samples[0].clone())
    }

    #[test]
    fn cls_is_bitwise_prompt_invariant() {
        let (enc, img) = setup();
        let base = enc.encode_image(&img, &TaskPromptBank::new()).unwrap();
        let mut bank = TaskPromptBank::new();
        for t in 1..=3 {
            let mut p = init_task_prompt(t, 1, 16, 5);
            p.vectors = p.vectors.scaled(100.0);
            bank.push(p);
            let out = enc.encode_image(&img, &bank).unwrap();
            assert_eq!(out.cls_output, base.cls_output);
            assert_eq!(out.prompt_outputs.len(), t);
        }
    }

    #[test]
    fn wrong_pixel_count_is_dimension_error() {
        let (enc, mut img) = setup();
        img.pixels.pop();
        assert!(matches!(
            enc.encode_image(&img, &TaskPromptBank::new()),
            Err(EncoderError::Dimension { .. })
        ));
    }

    #[test]
    fn unmasked_prompt_changes_cls() {
        let (enc, img) = setup();
        let mut bank = TaskPromptBank::new();
        bank.push(init_task_prompt(1, 1, 16, 5));
        let base = enc.encode_image(&img, &TaskPromptBank::new()).unwrap();
        let open = AttentionMask::all_true(enc.num_patches() + 2);
        let out = enc.encode_image_with_mask(&img, &bank, &open).unwrap();
        assert_ne!(out.cls_output, base.cls_output);
    }
}
