//! Sequential finetuning baseline: one shared prompt with no attention mask
//! and one shared adapter, trained task after task with local cross-entropy
//! only. No vocabulary, no negatives, nothing frozen between tasks.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::encoder::{cosine_score, init_adapter, init_task_prompt, AttentionMask, DualEncoder, LowRankAdapter, TaskPrompt};
use crate::stream::{ImageSample, TaskSpec};
use crate::tensor::Mat;
use crate::trainer::{argmax, par_map, Adam, IterationRecord, TaskSummary, TrainConfig, TrainError};
use crate::util::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveState {
    pub prompt: TaskPrompt,
    pub adapter: LowRankAdapter,
    pub trained_tasks: usize,
}

impl NaiveState {
    pub fn new(encoder: &DualEncoder, config: &TrainConfig) -> Self {
        Self {
            prompt: init_task_prompt(1, config.prompt_length, encoder.embed_dim(), config.seed),
            adapter: init_adapter(
                1,
                config.rank,
                &config.adapter_targets,
                config.adapter_scale,
                &encoder.config,
                config.seed,
            ),
            trained_tasks: 0,
        }
    }

    fn mask(&self, encoder: &DualEncoder) -> AttentionMask {
        AttentionMask::all_true(self.prompt.len() + encoder.num_patches() + 1)
    }

    fn image_tape(&self, encoder: &DualEncoder, image: &ImageSample, train: bool) -> Result<(Graph, NodeId, NodeId), TrainError> {
        let mut g = Graph::new();
        let p = if train {
            g.param(self.prompt.vectors.clone())
        } else {
            g.constant(self.prompt.vectors.clone())
        };
        let nodes = encoder.image_graph(&mut g, image, &[p], &self.mask(encoder))?;
        Ok((g, p, nodes.cls))
    }

    /// Class-token output under the shared, unmasked prompt.
    pub fn visual(&self, encoder: &DualEncoder, image: &ImageSample) -> Result<Vec<f64>, TrainError> {
        let (g, _, cls) = self.image_tape(encoder, image, false)?;
        Ok(g.value(cls).data.clone())
    }

    pub fn class_embeddings(&self, encoder: &DualEncoder, names: &[String]) -> Result<Vec<Vec<f64>>, TrainError> {
        names
            .iter()
            .map(|n| encoder.adapted_text_embedding(n, &self.adapter).map_err(TrainError::from))
            .collect()
    }

    /// Cosine score per candidate; `text` comes from [`Self::class_embeddings`].
    pub fn scores(&self, encoder: &DualEncoder, image: &ImageSample, text: &[Vec<f64>]) -> Result<Vec<f64>, TrainError> {
        let v = self.visual(encoder, image)?;
        text.iter().map(|t| cosine_score(&v, t).map_err(TrainError::from)).collect()
    }
}

fn batch_loss(
    encoder: &DualEncoder,
    state: &NaiveState,
    classes: &[String],
    batch: &[(&ImageSample, usize)],
    tau: f64,
) -> Result<(f64, Mat, Vec<Mat>, usize), TrainError> {
    let mut tg = Graph::new();
    let nodes = state.adapter.trainable_nodes(&mut tg);
    let rows: Vec<NodeId> = classes
        .iter()
        .map(|c| encoder.text_graph(&mut tg, c, Some(&nodes)))
        .collect::<Result<_, _>>()?;
    let text = tg.concat_rows(&rows);
    let text_value = tg.value(text).clone();

    let results = par_map(batch.to_vec(), |(image, label)| -> Result<_, TrainError> {
        let (mut g, p, cls) = state.image_tape(encoder, image, true)?;
        let w = g.param(text_value.clone());
        let wn = g.normalize_rows(w);
        let wt = g.transpose(wn);
        let xn = g.normalize_rows(cls);
        let s = g.matmul(xn, wt);
        let hit = argmax(&g.value(s).data) == Some(label);
        let s = g.scale(s, 1.0 / tau);
        let ce = g.cross_entropy(s, label);
        g.backward(ce);
        let dp = g
            .grad(p)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(state.prompt.len(), text_value.cols));
        let dw = g.grad(w).cloned().unwrap_or_else(|| Mat::zeros(text_value.rows, text_value.cols));
        Ok((g.value(ce).data[0], dp, dw, hit))
    });

    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut dp = Mat::zeros(state.prompt.len(), text_value.cols);
    let mut dw = Mat::zeros(text_value.rows, text_value.cols);
    let mut correct = 0;
    for r in results {
        let (l, p, w, hit) = r?;
        loss += l;
        dp.add_assign(&p);
        dw.add_assign(&w);
        correct += usize::from(hit);
    }
    tg.backward_with(&[(text, dw.scaled(1.0 / n))]);
    let adapter = nodes
        .ids()
        .iter()
        .zip(state.adapter.matrices())
        .map(|(id, m)| tg.grad(*id).cloned().unwrap_or_else(|| Mat::zeros(m.rows, m.cols)))
        .collect();
    Ok((loss / n, dp.scaled(1.0 / n), adapter, correct))
}

/// Continues training the shared parameters on `task`.
pub fn train_naive_task(
    encoder: &DualEncoder,
    state: &mut NaiveState,
    task: &TaskSpec,
    config: &TrainConfig,
    log: &mut dyn FnMut(&IterationRecord),
) -> Result<TaskSummary, TrainError> {
    config.validate()?;
    let t = task.task_index;
    if t != state.trained_tasks + 1 {
        return Err(TrainError::Contract(format!(
            "task {t} cannot follow {} trained tasks",
            state.trained_tasks
        )));
    }
    if task.train_samples.is_empty() || task.class_set.is_empty() {
        return Err(TrainError::EmptyTask);
    }
    let labels: Vec<usize> = task
        .train_samples
        .iter()
        .map(|s| {
            task.class_position(&s.label)
                .ok_or_else(|| TrainError::Contract(format!("sample {} label {:?} not in task {t}", s.id, s.label)))
        })
        .collect::<Result<_, _>>()?;
    let mut opt = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut iteration = 0;
    let mut final_loss = f64::NAN;
    for epoch in 0..config.epochs_for(t) {
        let mut rng = rng_for(&[config.seed, 0x7a5c, t as u64, epoch as u64]);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&ImageSample, usize)> = chunk.iter().map(|&i| (&task.train_samples[i], labels[i])).collect();
            let (loss, dp, da, correct) = batch_loss(encoder, state, &task.class_set, &batch, config.tau)?;
            if !loss.is_finite() {
                return Err(TrainError::Divergence { task: t, iteration });
            }
            let mut params: Vec<&mut Mat> = vec![&mut state.prompt.vectors];
            params.extend(state.adapter.matrices_mut());
            let mut grads = vec![dp];
            grads.extend(da);
            opt.step(&mut params, &grads);
            if !state.adapter.is_finite() || !state.prompt.vectors.is_finite() {
                return Err(TrainError::Divergence { task: t, iteration });
            }
            log(&IterationRecord {
                task: t,
                epoch,
                iteration,
                stage: 1,
                loss_ce: loss,
                loss_reg: 0.0,
                loss_total: loss,
                negatives: 0,
                batch_accuracy: correct as f64 / batch.len() as f64,
            });
            final_loss = loss;
            iteration += 1;
        }
    }
    state.trained_tasks = t;
    Ok(TaskSummary {
        task: t,
        iterations: iteration,
        final_loss,
        learnable_parameters: state.prompt.vectors.data.len() + state.adapter.parameter_count(),
        new_vocabulary_entries: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::BackboneConfig;
    use crate::stream::{generate_stream, ImageShape, StreamConfig};

    #[test]
    fn shared_parameters_keep_changing() {
        let shape = ImageShape::new(8, 8, 3);
        let stream = generate_stream(&StreamConfig {
            num_tasks: 2,
            classes_per_task: 2,
            image_shape: shape,
            samples_per_class_train: 2,
            samples_per_class_test: 1,
            ..Default::default()
        })
        .unwrap();
        let enc = DualEncoder::new(
            BackboneConfig {
                embed_dim: 8,
                num_heads: 2,
                ..Default::default()
            },
            shape,
        )
        .unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            default_epochs: 2,
            learning_rate: 0.01,
            ..Default::default()
        };
        let mut state = NaiveState::new(&enc, &cfg);
        train_naive_task(&enc, &mut state, stream.task(1), &cfg, &mut |_| {}).unwrap();
        let after1 = state.clone();
        train_naive_task(&enc, &mut state, stream.task(2), &cfg, &mut |_| {}).unwrap();
        assert_ne!(after1.prompt.vectors, state.prompt.vectors);
        assert_ne!(after1.adapter, state.adapter);
        let text = state.class_embeddings(&enc, &stream.task(1).class_set).unwrap();
        let scores = state.scores(&enc, &stream.task(1).test_samples[0], &text).unwrap();
        assert_eq!(scores.len(), 2);
    }
}
