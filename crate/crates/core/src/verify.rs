//! Quick invariant suite behind `odcl verify`.

use rand::Rng;

use crate::encoder::{build_attention_mask, init_adapter, init_task_prompt, AdapterTarget, BackboneConfig, DualEncoder, TaskPromptBank};
use crate::inference::Mode;
use crate::metrics::{compute_report, AccuracyMatrix};
use crate::stream::{generate_stream, ImageShape, StreamConfig};
use crate::tensor::Mat;
use crate::trainer::{run_step, BatchItem, NegativePolicy, NegativeSet, StepInputs};
use crate::util::rng_for;
use crate::vocabulary::ClassVocabulary;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![
        mask_structure(),
        cls_invariance(seed),
        prefix_stability(seed),
        gradient_agreement(seed),
        momentum_fixed_point(),
        metric_oracle(seed),
    ]
}

fn mask_structure() -> CheckResult {
    let mut bad = 0;
    for t in 0..=4 {
        for n in [1, 4, 16] {
            let m = build_attention_mask(t, n);
            for q in 0..m.size {
                for k in 0..m.size {
                    let expected = if q < t { k <= q || k >= t } else { k >= t };
                    bad += usize::from(m.get(q, k) != expected);
                }
            }
            bad += usize::from(m.false_count() != t * t.saturating_sub(1) / 2 + (n + 1) * t);
        }
    }
    check("attention mask structure", bad == 0, format!("{bad} mismatches"))
}

fn small_encoder(seed: u64) -> (DualEncoder, ImageShape) {
    let shape = ImageShape::new(8, 8, 3);
    let cfg = BackboneConfig {
        embed_dim: 16,
        num_heads: 2,
        seed,
        ..Default::default()
    };
    (DualEncoder::new(cfg, shape).expect("valid config"), shape)
}

fn random_bank(t: usize, dim: usize, seed: u64) -> TaskPromptBank {
    let mut bank = TaskPromptBank::new();
    for i in 1..=t {
        let mut p = init_task_prompt(i, 1, dim, seed);
        p.vectors = p.vectors.scaled(50.0);
        bank.push(p);
    }
    bank
}

fn cls_invariance(seed: u64) -> CheckResult {
    let (enc, shape) = small_encoder(seed);
    let stream = generate_stream(&StreamConfig {
        num_tasks: 1,
        classes_per_task: 5,
        samples_per_class_train: 2,
        samples_per_class_test: 1,
        image_shape: shape,
        seed,
        ..Default::default()
    })
    .expect("valid stream");
    let mut worst: f64 = 0.0;
    for (k, img) in stream.tasks[0].train_samples.iter().enumerate() {
        let base = enc.encode_image(img, &TaskPromptBank::new()).expect("encode");
        let bank = random_bank(1 + k % 4, 16, seed + k as u64);
        let out = enc.encode_image(img, &bank).expect("encode");
        for (a, b) in base.cls_output.iter().zip(&out.cls_output) {
            worst = worst.max((a - b).abs());
        }
    }
    check("class token ignores prompts", worst < 1e-12, format!("max deviation {worst:e}"))
}

fn prefix_stability(seed: u64) -> CheckResult {
    let (enc, shape) = small_encoder(seed);
    let stream = generate_stream(&StreamConfig {
        num_tasks: 1,
        classes_per_task: 1,
        samples_per_class_train: 3,
        samples_per_class_test: 1,
        image_shape: shape,
        seed,
        ..Default::default()
    })
    .expect("valid stream");
    let bank = random_bank(4, 16, seed);
    let mut worst: f64 = 0.0;
    for img in &stream.tasks[0].train_samples {
        let full = enc.encode_image(img, &bank).expect("encode");
        for t in 1..=4 {
            let part = enc.encode_image(img, &bank.truncated(t)).expect("encode");
            for i in 0..t {
                for (a, b) in part.prompt_outputs[i].iter().zip(&full.prompt_outputs[i]) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    check(
        "earlier prompt outputs are prefix stable",
        worst < 1e-12,
        format!("max deviation {worst:e}"),
    )
}

/// Largest relative disagreement between analytic and central-difference
/// gradients of the total loss, over the active prompt and every adapter
/// matrix, on a D=8, two-layer backbone.
pub fn gradient_max_relative_error(seed: u64, step: f64) -> f64 {
    let shape = ImageShape::new(8, 8, 3);
    let cfg = BackboneConfig {
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        seed,
        ..Default::default()
    };
    let enc = DualEncoder::new(cfg.clone(), shape).expect("valid config");
    let stream = generate_stream(&StreamConfig {
        num_tasks: 2,
        classes_per_task: 3,
        samples_per_class_train: 1,
        samples_per_class_test: 1,
        image_shape: shape,
        seed,
        ..Default::default()
    })
    .expect("valid stream");
    let mut rng = rng_for(&[seed, 0x6c]);
    let mut bank = TaskPromptBank::new();
    bank.push(init_task_prompt(1, 1, 8, seed));
    bank.prompts[0].frozen = true;
    bank.push(init_task_prompt(2, 1, 8, seed + 1));
    let mut adapter = init_adapter(2, 2, &[AdapterTarget::Query, AdapterTarget::Value], 1.0, &cfg, seed);
    for m in adapter.matrices_mut() {
        *m = Mat::gaussian(m.rows, m.cols, 0.1, &mut rng);
    }
    let mut vocab = ClassVocabulary::new(8, 0.1);
    for t in &stream.tasks {
        vocab
            .ensure_entries(&t.class_set, t.task_index, |n| enc.frozen_text_embedding(n))
            .expect("vocab");
    }
    let task = &stream.tasks[1];
    let batch: Vec<BatchItem> = task
        .train_samples
        .iter()
        .map(|s| BatchItem {
            image: s,
            label: task.class_position(&s.label).expect("label"),
        })
        .collect();
    let negatives = NegativeSet {
        per_sample: (0..batch.len())
            .map(|i| {
                if i % 2 == 0 {
                    stream.tasks[0].class_set.clone()
                } else {
                    Vec::new()
                }
            })
            .collect(),
    };
    let loss = |bank: &TaskPromptBank, adapter: &crate::encoder::LowRankAdapter, grads: bool| {
        let inputs = StepInputs {
            encoder: &enc,
            bank,
            adapter,
            vocab: &vocab,
            classes: &task.class_set,
            tau: 0.01,
            use_task_prompts: true,
        };
        run_step(&inputs, &batch, NegativePolicy::Fixed(negatives.clone()), grads).expect("step")
    };
    let out = loss(&bank, &adapter, true);
    let grads = out.grads.expect("grads");
    let rel = |a: f64, fd: f64| (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    let prompt_grad = grads.prompt.expect("prompt grad");
    for k in 0..prompt_grad.data.len() {
        let mut b = bank.clone();
        b.prompts[1].vectors.data[k] += step;
        let up = loss(&b, &adapter, false).loss.total();
        b.prompts[1].vectors.data[k] -= 2.0 * step;
        let dn = loss(&b, &adapter, false).loss.total();
        worst = worst.max(rel(prompt_grad.data[k], (up - dn) / (2.0 * step)));
    }
    for (mi, g) in grads.adapter.iter().enumerate() {
        let k = rng.random_range(0..g.data.len());
        let mut a = adapter.clone();
        a.matrices_mut().nth(mi).expect("matrix").data[k] += step;
        let up = loss(&bank, &a, false).loss.total();
        a.matrices_mut().nth(mi).expect("matrix").data[k] -= 2.0 * step;
        let dn = loss(&bank, &a, false).loss.total();
        worst = worst.max(rel(g.data[k], (up - dn) / (2.0 * step)));
    }
    worst
}

fn gradient_agreement(seed: u64) -> CheckResult {
    let worst = gradient_max_relative_error(seed, 1e-5);
    check(
        "analytic gradients match finite differences",
        worst < 1e-4,
        format!("max relative error {worst:e}"),
    )
}

fn momentum_fixed_point() -> CheckResult {
    let mut vocab = ClassVocabulary::new(3, 0.1);
    vocab
        .ensure_entries(&["c".to_string()], 1, |_| Ok(vec![1.0, -2.0, 0.5]))
        .expect("vocab");
    let w = [0.2, 0.4, -0.1];
    let dist = |v: &[f64]| v.iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let d0 = dist(vocab.lookup("c").expect("entry"));
    for _ in 0..50 {
        vocab.momentum_update("c", &w).expect("update");
    }
    let ratio = dist(vocab.lookup("c").expect("entry")) / d0;
    let expected = 0.9f64.powi(50);
    let err = (ratio - expected).abs() / expected;
    check(
        "momentum update contracts by (1-alpha)^k",
        err < 1e-6,
        format!("relative error {err:e}"),
    )
}

#[allow(clippy::needless_range_loop)]
fn metric_oracle(seed: u64) -> CheckResult {
    let mut rng = rng_for(&[seed, 0x3e7]);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(1..=6);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
        let r = compute_report(&AccuracyMatrix::from_rows(Mode::Cil, &rows).expect("matrix")).expect("report");
        let mut avg = 0.0;
        let mut fg = 0.0;
        let mut tr = 0.0;
        for t in 0..n {
            let mut s = 0.0;
            for i in 0..n {
                s += rows[t][i];
            }
            avg += s / n as f64;
            let mut s = 0.0;
            for i in t..n {
                s += rows[t][i];
            }
            fg += s / (n - t) as f64;
            if t > 0 {
                let mut s = 0.0;
                for i in 0..t {
                    s += rows[t][i];
                }
                tr += s / t as f64;
            }
        }
        let last = (0..n).map(|t| rows[t][n - 1]).sum::<f64>() / n as f64;
        worst = worst
            .max((r.avg - avg / n as f64).abs())
            .max((r.forgetting - fg / n as f64).abs())
            .max((r.last - last).abs());
        if n > 1 {
            worst = worst.max((r.transfer.expect("transfer") - tr / (n - 1) as f64).abs());
        }
    }
    check(
        "metrics match brute-force evaluation",
        worst < 1e-12,
        format!("max deviation {worst:e}"),
    )
}
