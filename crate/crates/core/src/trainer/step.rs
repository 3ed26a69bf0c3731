//! One optimization step's loss and gradients.
//!
//! The text side runs once per step on its own tape and produces the refined
//! class matrix `W` plus the regression term. Each sample then runs its own
//! image tape with `W` as a leaf; the mean `dW` is fed back into the text tape.

use crate::autodiff::{Graph, NodeId};
use crate::encoder::{build_attention_mask, cosine_score, DualEncoder, LowRankAdapter, TaskPromptBank};
use crate::stream::ImageSample;
use crate::tensor::Mat;
use crate::trainer::{par_map, select_negative_classes, NegativeSet, PreviousTask, SampleLogits, TrainError};
use crate::vocabulary::ClassVocabulary;

pub struct StepInputs<'a> {
    pub encoder: &'a DualEncoder,
    /// The active (last) prompt is trainable; earlier prompts are constants.
    pub bank: &'a TaskPromptBank,
    pub adapter: &'a LowRankAdapter,
    pub vocab: &'a ClassVocabulary,
    /// Current task classes, in label order.
    pub classes: &'a [String],
    pub tau: f64,
    pub use_task_prompts: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub image: &'a ImageSample,
    pub label: usize,
}

pub enum NegativePolicy<'a> {
    None,
    Fixed(NegativeSet),
    Select {
        previous: &'a [PreviousTask],
        gamma: f64,
        diff_sign: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub reg: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.ce + self.reg
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// `None` when task prompts are disabled.
    pub prompt: Option<Mat>,
    /// Same order as [`LowRankAdapter::matrices`].
    pub adapter: Vec<Mat>,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: LossParts,
    pub grads: Option<Gradients>,
    pub negatives: NegativeSet,
    /// Samples whose fused-path prediction over the current classes is correct.
    pub correct: usize,
}

struct TextTape {
    g: Graph,
    adapter_ids: Vec<NodeId>,
    w: NodeId,
    reg: NodeId,
}

fn text_tape(inp: &StepInputs) -> Result<TextTape, TrainError> {
    let mut g = Graph::new();
    let nodes = inp.adapter.trainable_nodes(&mut g);
    let mut rows = Vec::with_capacity(inp.classes.len());
    let mut reg: Option<NodeId> = None;
    for name in inp.classes {
        let v = inp
            .vocab
            .lookup(name)
            .ok_or_else(|| TrainError::Contract(format!("class {name:?} has no vocabulary entry")))?;
        let gy = inp.encoder.text_graph(&mut g, name, Some(&nodes))?;
        let vy = g.constant(Mat::row_vector(v.to_vec()));
        let sum = g.add(gy, vy);
        let wy = g.scale(sum, 0.5);
        let diff = g.sub(wy, vy);
        let sq = g.sum_squares(diff);
        reg = Some(match reg {
            Some(r) => g.add(r, sq),
            None => sq,
        });
        rows.push(wy);
    }
    let reg = reg.ok_or(TrainError::EmptyTask)?;
    let reg = g.scale(reg, 1.0 / inp.classes.len() as f64);
    let w = g.concat_rows(&rows);
    Ok(TextTape {
        adapter_ids: nodes.ids(),
        g,
        w,
        reg,
    })
}

struct ImageTape {
    g: Graph,
    prompt: Option<NodeId>,
    visual: NodeId,
    cls: NodeId,
}

fn image_tape(inp: &StepInputs, image: &ImageSample, train_prompt: bool) -> Result<ImageTape, TrainError> {
    let mut g = Graph::new();
    let last = inp.bank.len().checked_sub(1);
    let mut prompt = None;
    let prompt_nodes: Vec<NodeId> = inp
        .bank
        .prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if train_prompt && Some(i) == last {
                let id = g.param(p.vectors.clone());
                prompt = Some(id);
                id
            } else {
                g.constant(p.vectors.clone())
            }
        })
        .collect();
    let mask = build_attention_mask(inp.bank.token_count(), inp.encoder.num_patches());
    let nodes = inp.encoder.image_graph(&mut g, image, &prompt_nodes, &mask)?;
    let visual = match (inp.use_task_prompts, nodes.prompt_outputs.last()) {
        (true, Some(&p)) => {
            let s = g.add(p, nodes.cls);
            g.scale(s, 0.5)
        }
        (true, None) => return Err(TrainError::Contract("task prompts enabled but the bank is empty".into())),
        (false, _) => nodes.cls,
    };
    Ok(ImageTape {
        g,
        prompt,
        visual,
        cls: nodes.cls,
    })
}

fn cosines(a: &[f64], rows: &[&[f64]]) -> Result<Vec<f64>, TrainError> {
    rows.iter().map(|r| cosine_score(a, r).map_err(TrainError::from)).collect()
}

/// Loss (and optionally gradients) of one batch. Negatives from `policy`
/// extend the class axis of both cross-entropy terms with their vocabulary
/// embeddings, held constant.
pub fn run_step(inp: &StepInputs, batch: &[BatchItem], policy: NegativePolicy, want_grads: bool) -> Result<StepOutput, TrainError> {
    if batch.is_empty() || inp.classes.is_empty() {
        return Err(TrainError::EmptyTask);
    }
    for item in batch {
        if item.label >= inp.classes.len() {
            return Err(TrainError::Contract(format!("label {} outside the current task", item.label)));
        }
    }
    let mut text = text_tape(inp)?;
    let w_value = text.g.value(text.w).clone();
    let reg_value = text.g.value(text.reg).data[0];
    let train_prompt = want_grads && inp.use_task_prompts;

    let tapes: Vec<ImageTape> = par_map(batch.to_vec(), |item| image_tape(inp, item.image, train_prompt))
        .into_iter()
        .collect::<Result<_, _>>()?;

    let w_rows: Vec<&[f64]> = (0..w_value.rows).map(|r| w_value.row(r)).collect();
    let mut correct = 0;
    let mut logits = Vec::with_capacity(batch.len());
    for (tape, item) in tapes.iter().zip(batch) {
        let v = &tape.g.value(tape.visual).data;
        let current = cosines(v, &w_rows)?;
        if super::argmax(&current) == Some(item.label) {
            correct += 1;
        }
        logits.push((current, item.label));
    }

    let negatives = match policy {
        NegativePolicy::None => NegativeSet::empty(batch.len()),
        NegativePolicy::Fixed(n) => {
            if n.per_sample.len() != batch.len() {
                return Err(TrainError::Contract("negative set does not match batch size".into()));
            }
            n
        }
        NegativePolicy::Select {
            previous,
            gamma,
            diff_sign,
        } => {
            let vocab_rows = |classes: &[String]| -> Result<Vec<&[f64]>, TrainError> {
                classes
                    .iter()
                    .map(|c| {
                        inp.vocab
                            .lookup(c)
                            .ok_or_else(|| TrainError::Contract(format!("class {c:?} has no vocabulary entry")))
                    })
                    .collect()
            };
            let prev_rows: Vec<Vec<&[f64]>> = previous.iter().map(|p| vocab_rows(&p.classes)).collect::<Result<_, _>>()?;
            let mut sample_logits = Vec::with_capacity(batch.len());
            for (tape, (current, label)) in tapes.iter().zip(logits) {
                let v = &tape.g.value(tape.visual).data;
                let previous = prev_rows.iter().map(|rows| cosines(v, rows)).collect::<Result<_, _>>()?;
                sample_logits.push(SampleLogits { current, label, previous });
            }
            select_negative_classes(&sample_logits, previous, gamma, inp.tau, diff_sign, 2)?
        }
    };

    let mut neg_mats = Vec::with_capacity(batch.len());
    for names in &negatives.per_sample {
        if names.is_empty() {
            neg_mats.push(None);
            continue;
        }
        let mut m = Mat::zeros(names.len(), w_value.cols);
        for (r, name) in names.iter().enumerate() {
            let v = inp
                .vocab
                .lookup(name)
                .ok_or_else(|| TrainError::Contract(format!("negative {name:?} has no vocabulary entry")))?;
            m.row_mut(r).copy_from_slice(v);
        }
        neg_mats.push(Some(m));
    }

    let tau = inp.tau;
    let jobs: Vec<_> = tapes.into_iter().zip(batch.iter().map(|b| b.label)).zip(neg_mats).collect();
    let results = par_map(jobs, |((mut tape, label), negs)| {
        let g = &mut tape.g;
        let w = g.param(w_value.clone());
        let classes = match negs {
            Some(m) => {
                let n = g.constant(m);
                g.concat_rows(&[w, n])
            }
            None => w,
        };
        let cn = g.normalize_rows(classes);
        let ct = g.transpose(cn);
        let mut total = None;
        for x in [tape.visual, tape.cls] {
            let xn = g.normalize_rows(x);
            let s = g.matmul(xn, ct);
            let s = g.scale(s, 1.0 / tau);
            let ce = g.cross_entropy(s, label);
            total = Some(match total {
                Some(t) => g.add(t, ce),
                None => ce,
            });
        }
        let total = total.expect("two terms");
        let loss = g.value(total).data[0];
        if !want_grads {
            return (loss, None);
        }
        g.backward(total);
        let dw = g.grad(w).cloned().unwrap_or_else(|| Mat::zeros(w_value.rows, w_value.cols));
        let dp = tape.prompt.map(|p| {
            let v = g.value(p);
            g.grad(p).cloned().unwrap_or_else(|| Mat::zeros(v.rows, v.cols))
        });
        (loss, Some((dw, dp)))
    });

    let n = batch.len() as f64;
    let ce = results.iter().map(|(l, _)| *l).sum::<f64>() / n;
    let loss = LossParts { ce, reg: reg_value };
    if !want_grads {
        return Ok(StepOutput {
            loss,
            grads: None,
            negatives,
            correct,
        });
    }

    let mut dw = Mat::zeros(w_value.rows, w_value.cols);
    let mut dp: Option<Mat> = None;
    for (_, g) in &results {
        let (gw, gp) = g.as_ref().expect("gradients requested");
        dw.add_assign(gw);
        if let Some(gp) = gp {
            match dp.as_mut() {
                Some(acc) => acc.add_assign(gp),
                None => dp = Some(gp.clone()),
            }
        }
    }
    let dw = dw.scaled(1.0 / n);
    let dp = dp.map(|m| m.scaled(1.0 / n));

    text.g.backward_with(&[(text.w, dw), (text.reg, Mat::scalar(1.0))]);
    let adapter = text
        .adapter_ids
        .iter()
        .zip(inp.adapter.matrices())
        .map(|(id, m)| text.g.grad(*id).cloned().unwrap_or_else(|| Mat::zeros(m.rows, m.cols)))
        .collect();
    Ok(StepOutput {
        loss,
        grads: Some(Gradients { prompt: dp, adapter }),
        negatives,
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_adapter, init_task_prompt, AdapterTarget, BackboneConfig};
    use crate::stream::{generate_stream, ImageShape, StreamConfig, TaskStream};

    struct Fixture {
        enc: DualEncoder,
        stream: TaskStream,
        bank: TaskPromptBank,
        adapter: LowRankAdapter,
        vocab: ClassVocabulary,
    }

    fn fixture() -> Fixture {
        let shape = ImageShape::new(8, 8, 3);
        let stream = generate_stream(&StreamConfig {
            num_tasks: 2,
            classes_per_task: 3,
            image_shape: shape,
            samples_per_class_train: 2,
            samples_per_class_test: 1,
            ..Default::default()
        })
        .unwrap();
        let cfg = BackboneConfig {
            embed_dim: 8,
            num_heads: 2,
            ..Default::default()
        };
        let enc = DualEncoder::new(cfg.clone(), shape).unwrap();
        let mut bank = TaskPromptBank::new();
        bank.push(init_task_prompt(1, 1, 8, 3));
        let mut adapter = init_adapter(1, 2, &[AdapterTarget::Query, AdapterTarget::Value], 1.0, &cfg, 3);
        for m in adapter.matrices_mut() {
            for (i, v) in m.data.iter_mut().enumerate() {
                *v += 0.01 * ((i % 7) as f64 - 3.0);
            }
        }
        let mut vocab = ClassVocabulary::new(8, 0.1);
        for t in &stream.tasks {
            vocab
                .ensure_entries(&t.class_set, t.task_index, |n| enc.frozen_text_embedding(n))
                .unwrap();
        }
        Fixture {
            enc,
            stream,
            bank,
            adapter,
            vocab,
        }
    }

    fn inputs(f: &Fixture) -> StepInputs<'_> {
        StepInputs {
            encoder: &f.enc,
            bank: &f.bank,
            adapter: &f.adapter,
            vocab: &f.vocab,
            classes: &f.stream.tasks[0].class_set,
            tau: 0.5,
            use_task_prompts: true,
        }
    }

    fn batch(stream: &TaskStream) -> Vec<BatchItem<'_>> {
        let t = &stream.tasks[0];
        t.train_samples
            .iter()
            .take(3)
            .map(|s| BatchItem {
                image: s,
                label: t.class_position(&s.label).unwrap(),
            })
            .collect()
    }

    #[test]
    fn value_path_matches_gradient_path() {
        let f = fixture();
        let b = batch(&f.stream);
        let a = run_step(&inputs(&f), &b, NegativePolicy::None, false).unwrap();
        let g = run_step(&inputs(&f), &b, NegativePolicy::None, true).unwrap();
        assert_eq!(a.loss, g.loss);
        let grads = g.grads.unwrap();
        assert!(grads.prompt.is_some());
        assert_eq!(grads.adapter.len(), f.adapter.matrices().count());
    }

    #[test]
    fn prompt_gradient_matches_finite_difference() {
        let mut f = fixture();
        let stream = f.stream.clone();
        let b = batch(&stream);
        let negs = NegativeSet {
            per_sample: vec![vec![f.stream.tasks[1].class_set[0].clone()], vec![], vec![]],
        };
        let out = run_step(&inputs(&f), &b, NegativePolicy::Fixed(negs.clone()), true).unwrap();
        let analytic = out.grads.unwrap().prompt.unwrap();
        let h = 1e-6;
        for k in 0..analytic.data.len() {
            let base = f.bank.prompts[0].vectors.data[k];
            f.bank.prompts[0].vectors.data[k] = base + h;
            let up = run_step(&inputs(&f), &b, NegativePolicy::Fixed(negs.clone()), false)
                .unwrap()
                .loss
                .total();
            f.bank.prompts[0].vectors.data[k] = base - h;
            let dn = run_step(&inputs(&f), &b, NegativePolicy::Fixed(negs.clone()), false)
                .unwrap()
                .loss
                .total();
            f.bank.prompts[0].vectors.data[k] = base;
            let fd = (up - dn) / (2.0 * h);
            let a = analytic.data[k];
            assert!((a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1e-3), "k={k} a={a} fd={fd}");
        }
    }

    #[test]
    fn adapter_gradient_matches_finite_difference() {
        let mut f = fixture();
        let stream = f.stream.clone();
        let b = batch(&stream);
        let out = run_step(&inputs(&f), &b, NegativePolicy::None, true).unwrap();
        let analytic = out.grads.unwrap().adapter;
        let h = 1e-6;
        for (mi, g) in analytic.iter().enumerate().take(4) {
            for k in (0..g.data.len()).step_by(5) {
                let perturb = |f: &mut Fixture, delta: f64| {
                    f.adapter.matrices_mut().nth(mi).unwrap().data[k] += delta;
                };
                perturb(&mut f, h);
                let up = run_step(&inputs(&f), &b, NegativePolicy::None, false).unwrap().loss.total();
                perturb(&mut f, -2.0 * h);
                let dn = run_step(&inputs(&f), &b, NegativePolicy::None, false).unwrap().loss.total();
                perturb(&mut f, h);
                let fd = (up - dn) / (2.0 * h);
                let a = g.data[k];
                assert!(
                    (a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1e-3),
                    "m={mi} k={k} a={a} fd={fd}"
                );
            }
        }
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let f = fixture();
        let mut b = batch(&f.stream);
        b[0].label = 9;
        assert!(matches!(
            run_step(&inputs(&f), &b, NegativePolicy::None, false),
            Err(TrainError::Contract(_))
        ));
    }
}
