use std::fs;
use std::path::Path;

use odcl::harness::{
    emit_report, rebuild_from_predictions, resume, run_experiment, run_with, ExperimentConfig, HarnessError, Method, RunOptions,
};

const SMALL: &str = "
stream.num_tasks = 3
stream.classes_per_task = 2
stream.overlap_fraction = 0.5
stream.samples_per_class_train = 4
stream.samples_per_class_test = 3
stream.image_shape = 8x8x3
backbone.embed_dim = 16
backbone.num_heads = 2
train.epochs = 2
train.batch_size = 4
train.learning_rate = 0.01
experiment.methods = coleclip,naive_finetune,frozen_baseline
experiment.deterministic = true
experiment.seed = 5
";

fn config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse_str(SMALL).unwrap();
    cfg.output = out.to_path_buf();
    cfg
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let full_dir = tempfile::tempdir().unwrap();
    let full = run_experiment(&config(full_dir.path())).unwrap();

    for stop in [(Method::Coleclip, 1), (Method::NaiveFinetune, 2)] {
        let dir = tempfile::tempdir().unwrap();
        let partial = run_with(
            &config(dir.path()),
            &mut RunOptions {
                stop_after: Some(stop),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(partial.is_none());
        let ckpt = dir.path().join(stop.0.name()).join("checkpoints").join(format!("step_{}", stop.1));
        let resumed = resume(&ckpt, &mut RunOptions::default()).unwrap().unwrap();

        for (a, b) in resumed.results.iter().zip(&full.results) {
            assert_eq!(a.method, b.method);
            assert_eq!(a.matrices, b.matrices);
            assert_eq!(a.task_summaries, b.task_summaries);
            for f in ["train_log.jsonl", "predictions.jsonl"] {
                let p = |root: &Path| root.join(a.method.name()).join(f);
                if p(full_dir.path()).exists() {
                    assert_eq!(read(&p(dir.path())), read(&p(full_dir.path())), "{} {f}", a.method.name());
                }
            }
        }
    }
}

#[test]
fn reports_rebuild_from_prediction_logs() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_experiment(&config(dir.path())).unwrap();
    let mut rebuilt = run.clone();
    let n = rebuild_from_predictions(&mut rebuilt, dir.path()).unwrap();
    assert_eq!(n, 3);
    for (a, b) in rebuilt.results.iter().zip(&run.results) {
        assert_eq!(a.matrices, b.matrices);
        assert_eq!(a.reports, b.reports);
    }
    let files = emit_report(&run, dir.path(), true).unwrap();
    assert!(files.iter().any(|f| f.extension().is_some_and(|e| e == "svg")));
    let summary = read(&dir.path().join("report.md"));
    assert!(summary.contains("coleclip") && summary.contains("Last"));
}

#[test]
fn bad_config_maps_to_config_exit_code() {
    let e: HarnessError = ExperimentConfig::parse_str("train.batch_size = 0").unwrap_err().into();
    assert_eq!(e.exit_code(), 2);
    let e: HarnessError = ExperimentConfig::parse_str("experiment.order = 2,2,1").unwrap_err().into();
    assert_eq!(e.exit_code(), 2);
}
