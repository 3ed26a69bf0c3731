// One PASS/FAIL line per acceptance criterion. Runs as a plain binary so the
// lines are always printed; exits non-zero if any criterion fails.

use std::time::Instant;

use rand::Rng;

use odcl::encoder::{build_attention_mask, init_task_prompt, BackboneConfig, DualEncoder, TaskPromptBank};
use odcl::harness::{run_experiment, ExperimentConfig, Method, RunRecord};
use odcl::inference::Mode;
use odcl::metrics::{compute_report, AccuracyMatrix};
use odcl::stream::{ImageSample, ImageShape};
use odcl::util::rng_for;
use odcl::verify::gradient_max_relative_error;
use odcl::vocabulary::ClassVocabulary;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn c1_mask() -> Verdict {
    let start = Instant::now();
    let mut bad = 0usize;
    for t in 0..=4 {
        for n in [1, 4, 16] {
            let m = build_attention_mask(t, n);
            assert_eq!(m.size, t + 1 + n);
            for q in 0..m.size {
                for k in 0..m.size {
                    // prompt rows: earlier prompts, itself, cls and patches; image rows: cls and patches only
                    let expected = if q < t { k <= q || k >= t } else { k >= t };
                    bad += usize::from(m.get(q, k) != expected);
                }
            }
            bad += usize::from(m.false_count() != t * t.saturating_sub(1) / 2 + (n + 1) * t);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(bad == 0 && secs < 1.0, format!("{bad} mismatching cells, {secs:.3}s"))
}

fn encoder(seed: u64) -> (DualEncoder, ImageShape) {
    let shape = ImageShape::new(8, 8, 3);
    let cfg = BackboneConfig {
        embed_dim: 16,
        num_heads: 2,
        seed,
        ..Default::default()
    };
    (DualEncoder::new(cfg, shape).unwrap(), shape)
}

fn random_image(shape: ImageShape, rng: &mut impl Rng, id: u64) -> ImageSample {
    ImageSample {
        id,
        pixels: (0..shape.len()).map(|_| rng.random::<f32>()).collect(),
        label: "x".into(),
    }
}

fn random_bank(t: usize, dim: usize, rng: &mut impl Rng) -> TaskPromptBank {
    let mut bank = TaskPromptBank::new();
    for i in 1..=t {
        let mut p = init_task_prompt(i, 1, dim, rng.random());
        p.vectors = p.vectors.scaled(rng.random_range(1.0..100.0));
        bank.push(p);
    }
    bank
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn c2_cls_invariance() -> Verdict {
    let (enc, shape) = encoder(11);
    let mut rng = rng_for(&[2, 2]);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let img = random_image(shape, &mut rng, k);
        let t = rng.random_range(1..=4);
        let bank = random_bank(t, 16, &mut rng);
        let bare = enc.encode_image(&img, &TaskPromptBank::new()).unwrap();
        let full = enc.encode_image(&img, &bank).unwrap();
        worst = worst.max(linf(&bare.cls_output, &full.cls_output));
    }
    verdict(worst < 1e-12, format!("max |cls delta| {worst:e} over 100 images (tol 1e-12)"))
}

fn c3_prefix_stability() -> Verdict {
    let (enc, shape) = encoder(13);
    let mut rng = rng_for(&[3, 3]);
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let img = random_image(shape, &mut rng, k);
        let bank = random_bank(4, 16, &mut rng);
        for t in 1..=4 {
            let at_t = enc.encode_image(&img, &bank.truncated(t)).unwrap();
            for i in 1..=t {
                let at_i = enc.encode_image(&img, &bank.truncated(i)).unwrap();
                worst = worst.max(linf(&at_i.prompt_outputs[i - 1], &at_t.prompt_outputs[i - 1]));
            }
        }
    }
    verdict(worst < 1e-12, format!("max |p_i delta| {worst:e} (tol 1e-12)"))
}

fn c4_gradients() -> Verdict {
    let worst = (0..20).map(|s| gradient_max_relative_error(s, 1e-5)).fold(0.0, f64::max);
    verdict(worst < 1e-4, format!("max relative error {worst:e} over 20 seeds (tol 1e-4)"))
}

fn c5_momentum() -> Verdict {
    let mut vocab = ClassVocabulary::new(4, 0.1);
    vocab
        .ensure_entries(&["k".to_string()], 1, |_| Ok(vec![3.0, -1.0, 0.25, 2.0]))
        .unwrap();
    let w = [-0.5, 0.75, 1.5, 0.0];
    let dist = |v: &[f64]| v.iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let d0 = dist(vocab.lookup("k").unwrap());
    for _ in 0..50 {
        vocab.momentum_update("k", &w).unwrap();
    }
    let ratio = dist(vocab.lookup("k").unwrap()) / d0;
    let expected = 0.9f64.powi(50);
    let err = (ratio - expected).abs() / expected;
    verdict(
        err < 1e-6,
        format!("ratio {ratio:.9e} vs {expected:.9e}, relative error {err:e} (tol 1e-6)"),
    )
}

struct Oracle {
    avg: f64,
    last: f64,
    transfer: Option<f64>,
    forgetting: f64,
}

fn oracle(a: &[Vec<f64>]) -> Oracle {
    let n = a.len();
    let nf = n as f64;
    let avg = a.iter().map(|row| row.iter().sum::<f64>() / nf).sum::<f64>() / nf;
    let last = a.iter().map(|row| row[n - 1]).sum::<f64>() / nf;
    let forgetting = (0..n).map(|t| a[t][t..].iter().sum::<f64>() / (n - t) as f64).sum::<f64>() / nf;
    let transfer = (n > 1).then(|| (1..n).map(|t| a[t][..t].iter().sum::<f64>() / t as f64).sum::<f64>() / (n - 1) as f64);
    Oracle {
        avg,
        last,
        transfer,
        forgetting,
    }
}

fn c6_metrics() -> Verdict {
    let mut rng = rng_for(&[6, 6]);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=6);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
        let r = compute_report(&AccuracyMatrix::from_rows(Mode::Cil, &rows).unwrap()).unwrap();
        let o = oracle(&rows);
        worst = worst
            .max((r.avg - o.avg).abs())
            .max((r.last - o.last).abs())
            .max((r.forgetting - o.forgetting).abs());
        match (r.transfer, o.transfer) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            _ => worst = f64::INFINITY,
        }
    }
    let ex = [vec![0.8, 0.7, 0.6], vec![0.5, 0.9, 0.8], vec![0.4, 0.45, 0.95]];
    let r = compute_report(&AccuracyMatrix::from_rows(Mode::Cil, &ex).unwrap()).unwrap();
    let example_ok = (r.avg - 0.67778).abs() < 5e-6
        && (r.transfer.unwrap_or(f64::NAN) - 0.4625).abs() < 1e-12
        && (r.forgetting - 0.83333).abs() < 5e-6
        && (r.last - 0.78333).abs() < 5e-6;
    verdict(
        worst < 1e-12 && example_ok,
        format!(
            "max oracle deviation {worst:e} over 100 matrices; example Avg {:.5} Transfer {:.5} Forgetting {:.5}",
            r.avg,
            r.transfer.unwrap_or(f64::NAN),
            r.forgetting
        ),
    )
}

const DESK_CONFIG: &str = "
stream.num_tasks = 3
stream.classes_per_task = 4
stream.overlap_fraction = 0
stream.domain_shift_strength = 1
stream.samples_per_class_train = 16
stream.samples_per_class_test = 16
train.epochs = 20
train.batch_size = 32
train.learning_rate = 0.01
experiment.deterministic = true
experiment.write_predictions = false
";

fn desk_run(extra: &str, seed: Option<u64>) -> RunRecord {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::parse_str(&format!("{DESK_CONFIG}{extra}")).unwrap();
    if let Some(s) = seed {
        cfg.apply_seed(s);
    }
    cfg.output = dir.path().to_path_buf();
    run_experiment(&cfg).unwrap()
}

fn matrix(run: &RunRecord, m: Method, mode: Mode) -> &AccuracyMatrix {
    &run.result(m).unwrap().matrices[&mode]
}

fn c7_frozen(run: &RunRecord) -> Verdict {
    let mut ok = true;
    let mut detail = Vec::new();
    for mode in [Mode::Til, Mode::Cil] {
        let m = matrix(run, Method::FrozenBaseline, mode);
        let r = run.result(Method::FrozenBaseline).unwrap().report(mode).unwrap();
        let constant = (1..=m.tasks).all(|t| (1..=m.tasks).all(|i| m.get(t, i) == m.get(t, 1)));
        let same = (r.avg - r.last).abs() < 1e-12 && (r.last - r.forgetting).abs() < 1e-12;
        ok &= constant && same;
        detail.push(format!(
            "{mode} Avg {:.4} Last {:.4} Forgetting {:.4} constant across steps {constant}",
            r.avg, r.last, r.forgetting
        ));
    }
    verdict(ok, detail.join("; "))
}

fn c8_isolation(run: &RunRecord) -> Verdict {
    let res = run.result(Method::Coleclip).unwrap();
    let m = &res.matrices[&Mode::Til];
    let row: Vec<f64> = (1..=m.tasks).map(|i| m.get(1, i).unwrap()).collect();
    let identical = row.iter().all(|a| *a == row[0]);
    let secs = res.train_seconds + res.eval_seconds;
    verdict(
        identical && secs < 300.0,
        format!("task 1 TIL accuracy by step {row:?}, {secs:.1}s"),
    )
}

fn c9_effectiveness(run: &RunRecord) -> Verdict {
    let co = run.result(Method::Coleclip).unwrap();
    let fr = run.result(Method::FrozenBaseline).unwrap();
    let (ct, ft) = (co.report(Mode::Til).unwrap(), fr.report(Mode::Til).unwrap());
    let gain = (ct.last - ft.last) * 100.0;
    let drift = (ct.transfer.unwrap() - ft.transfer.unwrap()) * 100.0;
    let (cc, fc) = (co.report(Mode::Cil).unwrap(), fr.report(Mode::Cil).unwrap());
    verdict(
        gain >= 10.0 && drift.abs() <= 2.0,
        format!(
            "TIL Last {:.2} vs frozen {:.2} (+{gain:.2}, need 10), Transfer delta {drift:+.2} (need within 2); CIL Last {:.2} vs {:.2} for reference",
            ct.last * 100.0,
            ft.last * 100.0,
            cc.last * 100.0,
            fc.last * 100.0
        ),
    )
}

fn c10_ablation(runs: &mut Vec<RunRecord>) -> Verdict {
    let variants = [
        ("all", "true", "true", "true"),
        ("vocabulary only", "true", "false", "false"),
        ("prompts only", "false", "true", "false"),
        ("negatives only", "false", "false", "true"),
    ];
    let seeds = [1u64, 2, 3];
    let mut means = Vec::new();
    for (name, v, p, n) in variants {
        let extra = format!(
            "experiment.methods = coleclip\ntrain.vocabulary_update = {v}\ntrain.task_prompts = {p}\ntrain.negative_selection = {n}\n"
        );
        let mut til = 0.0;
        let mut cil = 0.0;
        for s in seeds {
            let run = desk_run(&extra, Some(s));
            let res = run.result(Method::Coleclip).unwrap();
            til += res.report(Mode::Til).unwrap().last * 100.0 / seeds.len() as f64;
            cil += res.report(Mode::Cil).unwrap().last * 100.0 / seeds.len() as f64;
            runs.push(run);
        }
        means.push((name, til, cil));
    }
    let (_, full_til, full_cil) = means[0];
    let ok = means[1..].iter().all(|(_, t, c)| full_til + 0.5 >= *t && full_cil + 0.5 >= *c);
    let detail = means
        .iter()
        .map(|(name, t, c)| format!("{name} TIL {t:.2} CIL {c:.2}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(ok, format!("mean Last over seeds 1-3: {detail}"))
}

fn c11_til_dominates(runs: &[RunRecord]) -> Verdict {
    let mut cells = 0usize;
    let mut violations = 0usize;
    for run in runs {
        for res in &run.results {
            let (Some(til), Some(cil)) = (res.matrices.get(&Mode::Til), res.matrices.get(&Mode::Cil)) else {
                continue;
            };
            for t in 1..=til.tasks {
                for i in 1..=til.tasks {
                    cells += 1;
                    violations += usize::from(til.get(t, i).unwrap() < cil.get(t, i).unwrap());
                }
            }
        }
    }
    verdict(
        violations == 0 && cells > 0,
        format!("{violations} violations in {cells} cells across {} runs", runs.len()),
    )
}

fn report(n: usize, name: &str, v: &Verdict, failed: &mut usize) {
    println!("criterion {n:>2} [{}] {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
    *failed += usize::from(!v.passed);
}

fn main() {
    let mut failed = 0;
    report(1, "mask structure", &c1_mask(), &mut failed);
    report(2, "class token invariance", &c2_cls_invariance(), &mut failed);
    report(3, "prefix stability", &c3_prefix_stability(), &mut failed);
    report(4, "gradient check", &c4_gradients(), &mut failed);
    report(5, "momentum fixed point", &c5_momentum(), &mut failed);
    report(6, "metric oracle", &c6_metrics(), &mut failed);

    let main_run = desk_run("experiment.methods = coleclip,frozen_baseline\n", None);
    report(7, "frozen baseline degeneracy", &c7_frozen(&main_run), &mut failed);
    report(8, "zero-overlap isolation", &c8_isolation(&main_run), &mut failed);
    report(9, "learning effectiveness", &c9_effectiveness(&main_run), &mut failed);

    let mut runs = vec![main_run];
    report(10, "ablation ordering", &c10_ablation(&mut runs), &mut failed);
    report(11, "TIL at least CIL", &c11_til_dominates(&runs), &mut failed);

    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
