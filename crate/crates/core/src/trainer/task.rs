use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{count_learnable_parameters, init_adapter, init_task_prompt, refine_embedding, DualEncoder};
use crate::inference::ModelState;
use crate::stream::{TaskSpec, TaskStream};
use crate::trainer::{run_step, Adam, BatchItem, NegativePolicy, PreviousTask, StepInputs, TrainConfig, TrainError, UpdateScope};
use crate::util::rng_for;
use crate::vocabulary::ClassVocabulary;

/// First iteration (0-based) of the second stage.
pub fn stage_boundary(total_iterations: usize) -> usize {
    total_iterations.div_ceil(2)
}

/// Earlier tasks with their classes minus those of task `t`; tasks left
/// with no classes are dropped.
pub fn previous_tasks(stream: &TaskStream, t: usize) -> Vec<PreviousTask> {
    let current = &stream.task(t).class_set;
    (1..t)
        .filter_map(|j| {
            let classes: Vec<String> = stream.task(j).class_set.iter().filter(|c| !current.contains(c)).cloned().collect();
            (!classes.is_empty()).then_some(PreviousTask { task_index: j, classes })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub task: usize,
    pub epoch: usize,
    pub iteration: usize,
    pub stage: u8,
    pub loss_ce: f64,
    pub loss_reg: f64,
    pub loss_total: f64,
    pub negatives: usize,
    pub batch_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: usize,
    pub iterations: usize,
    pub final_loss: f64,
    pub learnable_parameters: usize,
    pub new_vocabulary_entries: usize,
}

/// Trains task `task.task_index`, which must directly follow the tasks
/// already in `state`. On success the new prompt is frozen and the adapter
/// is appended to the state.
pub fn train_task(
    encoder: &DualEncoder,
    state: &mut ModelState,
    vocab: &mut ClassVocabulary,
    task: &TaskSpec,
    previous: &[PreviousTask],
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
    if state.use_task_prompts != config.use_task_prompts {
        return Err(TrainError::Contract("prompt usage differs between state and config".into()));
    }
    let labels: Vec<usize> = task
        .train_samples
        .iter()
        .map(|s| {
            task.class_position(&s.label)
                .ok_or_else(|| TrainError::Contract(format!("sample {} label {:?} not in task {t}", s.id, s.label)))
        })
        .collect::<Result<_, _>>()?;

    let added = vocab.ensure_entries(&task.class_set, t, |n| encoder.frozen_text_embedding(n))?;
    let dim = encoder.embed_dim();
    if config.use_task_prompts {
        state.prompts.push(init_task_prompt(t, config.prompt_length, dim, config.seed));
    }
    let mut adapter = init_adapter(
        t,
        config.rank,
        &config.adapter_targets,
        config.adapter_scale,
        &encoder.config,
        config.seed,
    );
    let learnable_parameters = count_learnable_parameters(&state.prompts, Some(&adapter));
    let mut opt = Adam::new(config.learning_rate);

    let m = task.train_samples.len();
    let per_epoch = m.div_ceil(config.batch_size);
    let epochs = config.epochs_for(t);
    let boundary = stage_boundary(per_epoch * epochs);
    let mut iteration = 0;
    let mut final_loss = f64::NAN;
    let mut order: Vec<usize> = (0..m).collect();

    for epoch in 0..epochs {
        let mut rng = rng_for(&[config.seed, 0x7a5c, t as u64, epoch as u64]);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let stage: u8 = if iteration < boundary { 1 } else { 2 };
            let batch: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| BatchItem {
                    image: &task.train_samples[i],
                    label: labels[i],
                })
                .collect();
            let policy = if stage == 2 && config.use_negative_selection && !previous.is_empty() {
                NegativePolicy::Select {
                    previous,
                    gamma: config.gamma,
                    diff_sign: config.negative_diff_sign,
                }
            } else {
                NegativePolicy::None
            };
            let inputs = StepInputs {
                encoder,
                bank: &state.prompts,
                adapter: &adapter,
                vocab,
                classes: &task.class_set,
                tau: config.tau,
                use_task_prompts: config.use_task_prompts,
            };
            let out = run_step(&inputs, &batch, policy, true)?;
            let total = out.loss.total();
            if !total.is_finite() {
                return Err(TrainError::Divergence { task: t, iteration });
            }
            let grads = out.grads.expect("gradients requested");

            let mut params: Vec<&mut crate::tensor::Mat> = Vec::new();
            let mut grad_list = Vec::new();
            if let (Some(p), Some(gp)) = (state.prompts.active_mut(), grads.prompt) {
                params.push(&mut p.vectors);
                grad_list.push(gp);
            }
            params.extend(adapter.matrices_mut());
            grad_list.extend(grads.adapter);
            opt.step(&mut params, &grad_list);
            if !adapter.is_finite() || state.prompts.active().is_some_and(|p| !p.vectors.is_finite()) {
                return Err(TrainError::Divergence { task: t, iteration });
            }

            if config.use_vocabulary_update {
                let names: Vec<&String> = match config.update_scope {
                    UpdateScope::AllTaskClasses => task.class_set.iter().collect(),
                    UpdateScope::BatchClasses => {
                        let mut seen: Vec<usize> = batch.iter().map(|b| b.label).collect();
                        seen.sort_unstable();
                        seen.dedup();
                        seen.into_iter().map(|i| &task.class_set[i]).collect()
                    }
                };
                for name in names {
                    let g = encoder.adapted_text_embedding(name, &adapter)?;
                    let v = vocab
                        .lookup(name)
                        .ok_or_else(|| TrainError::Contract(format!("class {name:?} missing from vocabulary")))?;
                    let w = refine_embedding(&g, v);
                    vocab.momentum_update(name, &w)?;
                }
            }

            log(&IterationRecord {
                task: t,
                epoch,
                iteration,
                stage,
                loss_ce: out.loss.ce,
                loss_reg: out.loss.reg,
                loss_total: total,
                negatives: out.negatives.total(),
                batch_accuracy: out.correct as f64 / batch.len() as f64,
            });
            final_loss = total;
            iteration += 1;
        }
    }

    state.prompts.freeze_all();
    state.adapters.push(adapter);
    state.trained_tasks = t;
    Ok(TaskSummary {
        task: t,
        iterations: iteration,
        final_loss,
        learnable_parameters,
        new_vocabulary_entries: added,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::BackboneConfig;
    use crate::stream::{generate_stream, ImageShape, StreamConfig};

    #[test]
    fn boundary_rounds_up() {
        assert_eq!(stage_boundary(1), 1);
        assert_eq!(stage_boundary(10), 5);
        assert_eq!(stage_boundary(11), 6);
    }

    fn setup() -> (DualEncoder, TaskStream) {
        let shape = ImageShape::new(8, 8, 3);
        let stream = generate_stream(&StreamConfig {
            num_tasks: 2,
            classes_per_task: 3,
            overlap_fraction: 0.34,
            image_shape: shape,
            samples_per_class_train: 3,
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
        (enc, stream)
    }

    fn config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            default_epochs: 2,
            learning_rate: 0.01,
            ..Default::default()
        }
    }

    #[test]
    fn earlier_state_is_untouched_by_later_task() {
        let (enc, stream) = setup();
        let cfg = config();
        let mut state = ModelState::new(true);
        let mut vocab = ClassVocabulary::new(8, cfg.alpha);
        let mut records = Vec::new();
        train_task(&enc, &mut state, &mut vocab, stream.task(1), &[], &cfg, &mut |r| {
            records.push(r.clone())
        })
        .unwrap();
        let prompt1 = state.prompts.prompts[0].clone();
        let adapter1 = state.adapters[0].clone();
        let vocab1 = vocab.clone();
        let prev = previous_tasks(&stream, 2);
        assert_eq!(prev.len(), 1);
        assert_eq!(prev[0].classes.len(), 2);
        train_task(&enc, &mut state, &mut vocab, stream.task(2), &prev, &cfg, &mut |r| {
            records.push(r.clone())
        })
        .unwrap();
        assert_eq!(state.prompts.prompts[0], prompt1);
        assert_eq!(state.adapters[0], adapter1);
        assert!(state.prompts.prompts.iter().all(|p| p.frozen));
        for e in vocab1.entries() {
            if !stream.task(2).class_set.contains(&e.class_name) {
                assert_eq!(vocab.lookup(&e.class_name).unwrap(), e.embedding.as_slice());
            }
        }
        // 9 samples, batch 4 -> 3 iterations/epoch, 6 total, stage 2 from iteration 3
        let t1: Vec<_> = records.iter().filter(|r| r.task == 1).collect();
        assert_eq!(t1.len(), 6);
        assert_eq!(t1.iter().map(|r| r.stage).collect::<Vec<_>>(), vec![1, 1, 1, 2, 2, 2]);
        assert!(t1.iter().all(|r| r.negatives == 0));
    }

    #[test]
    fn training_is_deterministic() {
        let (enc, stream) = setup();
        let cfg = config();
        let run = || {
            let mut state = ModelState::new(true);
            let mut vocab = ClassVocabulary::new(8, cfg.alpha);
            train_task(&enc, &mut state, &mut vocab, stream.task(1), &[], &cfg, &mut |_| {}).unwrap();
            (state, vocab)
        };
        let (a, va) = run();
        let (b, vb) = run();
        assert_eq!(a.prompts, b.prompts);
        assert_eq!(a.adapters, b.adapters);
        assert_eq!(va, vb);
    }

    #[test]
    fn out_of_order_task_is_rejected() {
        let (enc, stream) = setup();
        let mut state = ModelState::new(true);
        let mut vocab = ClassVocabulary::new(8, 0.1);
        let err = train_task(&enc, &mut state, &mut vocab, stream.task(2), &[], &config(), &mut |_| {});
        assert!(matches!(err, Err(TrainError::Contract(_))));
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let (enc, stream) = setup();
        let cfg = TrainConfig {
            learning_rate: f64::MAX,
            ..config()
        };
        let mut state = ModelState::new(true);
        let mut vocab = ClassVocabulary::new(8, 0.1);
        match train_task(&enc, &mut state, &mut vocab, stream.task(1), &[], &cfg, &mut |_| {}) {
            Err(TrainError::Divergence { task: 1, .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
