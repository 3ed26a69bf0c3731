//! Experiment orchestration: train each method task by task, evaluate every
//! dataset in every mode after each step, checkpoint, and write reports.
//!
//! Output layout under `config.output`:
//!
//! ```text
//! config.txt  run_record.json  report.md  plots/
//! <method>/matrix_<mode>.csv  <method>/report_<mode>.md
//! <method>/train_log.jsonl  <method>/predictions.jsonl
//! <method>/checkpoints/step_<i>/{progress.json, model.ckpt, vocabulary.txt}
//! ```

pub mod config;
mod plot;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{check_permutation, ConfigError, ExperimentConfig, Method, StreamSource};
pub use plot::line_plot_svg;

use crate::encoder::checkpoint::{Checkpoint, CheckpointError};
use crate::encoder::{DualEncoder, EncoderError, TaskPromptBank};
use crate::inference::{
    candidate_classes, evaluate_dataset, evaluate_naive_dataset, FrozenTextCache, InferenceError, Mode, ModelState, PredictionRecord,
};
use crate::metrics::{compute_report, matrices_from_predictions, AccuracyMatrix, MetricError, MetricReport};
use crate::stream::{generate_stream, load_manifest, StreamError, TaskStream};
use crate::trainer::naive::{train_naive_task, NaiveState};
use crate::trainer::{previous_tasks, train_task, IterationRecord, TaskSummary, TrainError};
use crate::util::mix_seed;
use crate::vocabulary::{ClassVocabulary, VocabError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stream: {0}")]
    Stream(#[from] StreamError),
    #[error("encoder: {0}")]
    Encoder(#[from] EncoderError),
    #[error("{method}: training diverged at task {task}, iteration {iteration}")]
    Divergence { method: Method, task: usize, iteration: usize },
    #[error("{method}, task {task}: {source}")]
    Train {
        method: Method,
        task: usize,
        #[source]
        source: TrainError,
    },
    #[error("{method}, step {step}, dataset {dataset}: {source}")]
    Inference {
        method: Method,
        step: usize,
        dataset: usize,
        #[source]
        source: InferenceError,
    },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

impl HarnessError {
    /// 2 for bad configuration or input, 3 for divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_)
            | HarnessError::Stream(StreamError::Config(_) | StreamError::TaskConfig { .. } | StreamError::Parse { .. }) => 2,
            HarnessError::Encoder(EncoderError::Config(_)) => 2,
            HarnessError::Divergence { .. } => 3,
            _ => 1,
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub matrices: BTreeMap<Mode, AccuracyMatrix>,
    pub reports: BTreeMap<Mode, MetricReport>,
    pub task_summaries: Vec<TaskSummary>,
    pub frozen_parameters: usize,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

impl MethodResult {
    pub fn report(&self, mode: Mode) -> Option<&MetricReport> {
        self.reports.get(&mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    /// Effective config, with any run nonce already folded into the seeds.
    pub config: ExperimentConfig,
    pub dataset_names: Vec<String>,
    pub results: Vec<MethodResult>,
}

impl RunRecord {
    pub fn result(&self, method: Method) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == method)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io(path))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

/// Knobs that do not affect results.
#[derive(Default)]
pub struct RunOptions<'a> {
    pub progress: Option<&'a mut dyn FnMut(&str)>,
    /// Stop cleanly after this method finishes this step (checkpoint written).
    pub stop_after: Option<(Method, usize)>,
}

impl RunOptions<'_> {
    fn say(&mut self, msg: &str) {
        if let Some(p) = self.progress.as_mut() {
            p(msg);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Progress {
    config: ExperimentConfig,
    method: Method,
    step: usize,
    matrices: BTreeMap<Mode, AccuracyMatrix>,
    task_summaries: Vec<TaskSummary>,
    train_seconds: f64,
    eval_seconds: f64,
    completed: Vec<MethodResult>,
}

enum MethodState {
    Coleclip(ModelState, ClassVocabulary),
    Frozen(ModelState, ClassVocabulary),
    Naive(NaiveState),
}

struct Context {
    config: ExperimentConfig,
    stream: TaskStream,
    encoder: DualEncoder,
    cache: FrozenTextCache,
}

pub fn load_stream(config: &ExperimentConfig) -> Result<TaskStream, HarnessError> {
    let stream = match &config.stream {
        StreamSource::Generated(s) => generate_stream(s)?,
        StreamSource::Manifest(p) => load_manifest(p)?,
    };
    let stream = match &config.order {
        Some(order) => {
            check_permutation(order, stream.total_tasks()).map_err(|msg| ConfigError {
                line: 0,
                key: "experiment.order".into(),
                msg,
            })?;
            stream.reordered(order)?
        }
        None => stream,
    };
    stream.validate()?;
    Ok(stream)
}

impl Context {
    fn new(config: ExperimentConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let stream = load_stream(&config)?;
        let encoder = DualEncoder::new(config.backbone.clone(), stream.image_shape)?;
        let cache = FrozenTextCache::build(&encoder, &stream.class_union()).map_err(|source| HarnessError::Inference {
            method: Method::FrozenBaseline,
            step: 0,
            dataset: 0,
            source,
        })?;
        Ok(Self {
            config,
            stream,
            encoder,
            cache,
        })
    }

    fn method_dir(&self, m: Method) -> PathBuf {
        self.config.output.join(m.name())
    }

    fn dataset_names(&self) -> Vec<String> {
        self.stream.tasks.iter().map(|t| t.domain_id.clone()).collect()
    }
}

/// Runs every configured method and writes all artifacts.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunRecord, HarnessError> {
    run_with(config, &mut RunOptions::default()).map(|r| r.expect("no stop requested"))
}

/// Like [`run_experiment`]; returns `None` when stopped by `stop_after`.
pub fn run_with(config: &ExperimentConfig, options: &mut RunOptions) -> Result<Option<RunRecord>, HarnessError> {
    let mut config = config.clone();
    if !config.deterministic {
        let nonce = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        config.train.seed = mix_seed(&[config.train.seed, nonce]);
    }
    let ctx = Context::new(config)?;
    fs::create_dir_all(&ctx.config.output).map_err(io(&ctx.config.output))?;
    let cfg_path = ctx.config.output.join("config.txt");
    fs::write(&cfg_path, ctx.config.to_text()).map_err(io(&cfg_path))?;
    for m in &ctx.config.methods {
        let dir = ctx.method_dir(*m);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io(&dir))?;
        }
    }
    continue_run(&ctx, Vec::new(), None, options)
}

/// Continues a run from a step checkpoint directory (or its
/// `progress.json`). Given the stored config the continuation is
/// bit-identical to an uninterrupted run.
pub fn resume(path: &Path, options: &mut RunOptions) -> Result<Option<RunRecord>, HarnessError> {
    let file = if path.is_dir() {
        path.join("progress.json")
    } else {
        path.to_path_buf()
    };
    let dir = file.parent().unwrap_or(Path::new(".")).to_path_buf();
    let text = fs::read_to_string(&file).map_err(io(&file))?;
    let progress: Progress = serde_json::from_str(&text).map_err(|e| HarnessError::Format {
        path: file.display().to_string(),
        msg: e.to_string(),
    })?;
    let ctx = Context::new(progress.config.clone())?;
    let state = match progress.method {
        Method::Coleclip => {
            let ckpt = Checkpoint::load(&dir.join("model.ckpt"))?;
            let vocab = ClassVocabulary::load(&dir.join("vocabulary.txt"))?;
            let meta = |k: &str| -> Result<String, HarnessError> {
                ckpt.meta.get(k).cloned().ok_or_else(|| HarnessError::Format {
                    path: dir.display().to_string(),
                    msg: format!("checkpoint lacks meta `{k}`"),
                })
            };
            let state = ModelState {
                prompts: ckpt.prompts.clone(),
                adapters: ckpt.adapters.clone(),
                use_task_prompts: meta("use_task_prompts")? == "true",
                trained_tasks: meta("trained_tasks")?.parse().unwrap_or(progress.step),
            };
            MethodState::Coleclip(state, vocab)
        }
        Method::FrozenBaseline => MethodState::Frozen(
            ModelState::new(false),
            ClassVocabulary::new(ctx.encoder.embed_dim(), ctx.config.train.alpha),
        ),
        Method::NaiveFinetune => {
            let ckpt = Checkpoint::load(&dir.join("model.ckpt"))?;
            let (Some(prompt), Some(adapter)) = (ckpt.prompts.prompts.first(), ckpt.adapters.first()) else {
                return Err(HarnessError::Format {
                    path: dir.display().to_string(),
                    msg: "naive checkpoint needs one prompt and one adapter".into(),
                });
            };
            MethodState::Naive(NaiveState {
                prompt: prompt.clone(),
                adapter: adapter.clone(),
                trained_tasks: progress.step,
            })
        }
    };
    let mdir = ctx.method_dir(progress.method);
    truncate_jsonl(&mdir.join("train_log.jsonl"), |v| {
        v["task"].as_u64().is_some_and(|t| t as usize <= progress.step)
    })?;
    truncate_jsonl(&mdir.join("predictions.jsonl"), |v| {
        v["step"].as_u64().is_some_and(|s| s as usize <= progress.step)
    })?;
    let completed = progress.completed.clone();
    continue_run(&ctx, completed, Some((progress, state)), options)
}

fn truncate_jsonl(path: &Path, keep: impl Fn(&serde_json::Value) -> bool) -> Result<(), HarnessError> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).map_err(io(path))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io(path))?;
        if serde_json::from_str::<serde_json::Value>(&line).is_ok_and(|v| keep(&v)) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(io(path))
}

fn continue_run(
    ctx: &Context,
    mut completed: Vec<MethodResult>,
    mut resume_point: Option<(Progress, MethodState)>,
    options: &mut RunOptions,
) -> Result<Option<RunRecord>, HarnessError> {
    for &method in &ctx.config.methods {
        if completed.iter().any(|r| r.method == method) {
            continue;
        }
        let start = match resume_point.take() {
            Some((p, s)) if p.method == method => Some((p, s)),
            Some(other) => {
                resume_point = Some(other);
                None
            }
            None => None,
        };
        match run_method(ctx, method, &completed, start, options)? {
            Some(r) => completed.push(r),
            None => return Ok(None),
        }
    }
    let record = RunRecord {
        config_hash: ctx.config.hash(),
        config: ctx.config.clone(),
        dataset_names: ctx.dataset_names(),
        results: completed,
    };
    let path = ctx.config.output.join("run_record.json");
    write_json(&path, &record)?;
    emit_report(&record, &ctx.config.output, ctx.config.plots)?;
    Ok(Some(record))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    fs::write(path, text).map_err(io(path))
}

struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    fn open(path: PathBuf) -> Result<Self, HarnessError> {
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io(&path))?;
        Ok(Self {
            out: BufWriter::new(file),
            path,
        })
    }

    fn write<T: Serialize>(&mut self, v: &T) -> Result<(), HarnessError> {
        let line = serde_json::to_string(v).map_err(|e| HarnessError::Format {
            path: self.path.display().to_string(),
            msg: e.to_string(),
        })?;
        writeln!(self.out, "{line}").map_err(io(&self.path))
    }

    fn flush(&mut self) -> Result<(), HarnessError> {
        self.out.flush().map_err(io(&self.path))
    }
}

fn fresh_matrices(ctx: &Context) -> BTreeMap<Mode, AccuracyMatrix> {
    let n = ctx.stream.total_tasks();
    ctx.config
        .modes
        .iter()
        .map(|&m| (m, AccuracyMatrix::new(n, m, ctx.dataset_names())))
        .collect()
}

fn run_method(
    ctx: &Context,
    method: Method,
    completed: &[MethodResult],
    start: Option<(Progress, MethodState)>,
    options: &mut RunOptions,
) -> Result<Option<MethodResult>, HarnessError> {
    let cfg = &ctx.config;
    let dir = ctx.method_dir(method);
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let n = ctx.stream.total_tasks();
    let dim = ctx.encoder.embed_dim();

    let (first_step, mut state, mut matrices, mut summaries, mut train_seconds, mut eval_seconds) = match start {
        Some((p, s)) => (p.step + 1, s, p.matrices, p.task_summaries, p.train_seconds, p.eval_seconds),
        None => {
            let s = match method {
                Method::Coleclip => MethodState::Coleclip(
                    ModelState::new(cfg.train.use_task_prompts),
                    ClassVocabulary::new(dim, cfg.train.alpha),
                ),
                Method::FrozenBaseline => MethodState::Frozen(ModelState::new(false), ClassVocabulary::new(dim, cfg.train.alpha)),
                Method::NaiveFinetune => MethodState::Naive(NaiveState::new(&ctx.encoder, &cfg.train)),
            };
            (1, s, fresh_matrices(ctx), Vec::new(), 0.0, 0.0)
        }
    };

    let mut train_log = JsonLines::open(dir.join("train_log.jsonl"))?;
    let mut pred_log = JsonLines::open(dir.join("predictions.jsonl"))?;

    for step in first_step..=n {
        options.say(&format!("{method}: step {step}/{n}"));
        let task = ctx.stream.task(step);
        let clock = Instant::now();
        let mut log_err = None;
        let mut logger = |r: &IterationRecord| {
            if log_err.is_none() {
                log_err = train_log.write(r).err();
            }
        };
        let trained = match &mut state {
            MethodState::Coleclip(model, vocab) => {
                let prev = previous_tasks(&ctx.stream, step);
                Some(train_task(&ctx.encoder, model, vocab, task, &prev, &cfg.train, &mut logger))
            }
            MethodState::Naive(naive) => Some(train_naive_task(&ctx.encoder, naive, task, &cfg.train, &mut logger)),
            MethodState::Frozen(..) => None,
        };
        if let Some(e) = log_err {
            return Err(e);
        }
        match trained {
            Some(Ok(summary)) => summaries.push(summary),
            Some(Err(TrainError::Divergence { task, iteration })) => return Err(HarnessError::Divergence { method, task, iteration }),
            Some(Err(source)) => {
                return Err(HarnessError::Train {
                    method,
                    task: step,
                    source,
                })
            }
            None => {}
        }
        train_log.flush()?;
        train_seconds += clock.elapsed().as_secs_f64();

        let clock = Instant::now();
        for t in 1..=n {
            for &mode in &cfg.modes {
                let wrap = |source| HarnessError::Inference {
                    method,
                    step,
                    dataset: t,
                    source,
                };
                let candidates = candidate_classes(&ctx.stream, mode, t).map_err(wrap)?;
                let dataset = ctx.stream.task(t);
                let eval = match &state {
                    MethodState::Coleclip(model, vocab) | MethodState::Frozen(model, vocab) => {
                        evaluate_dataset(&ctx.encoder, dataset, &candidates, mode, step, model, vocab, &ctx.cache)
                    }
                    MethodState::Naive(naive) => evaluate_naive_dataset(&ctx.encoder, dataset, &candidates, mode, step, naive),
                }
                .map_err(wrap)?;
                matrices.get_mut(&mode).expect("mode matrix").record(t, step, eval.accuracy)?;
                if cfg.write_predictions {
                    for r in &eval.records {
                        pred_log.write(r)?;
                    }
                }
            }
        }
        pred_log.flush()?;
        eval_seconds += clock.elapsed().as_secs_f64();

        let progress = Progress {
            config: cfg.clone(),
            method,
            step,
            matrices: matrices.clone(),
            task_summaries: summaries.clone(),
            train_seconds,
            eval_seconds,
            completed: completed.to_vec(),
        };
        write_checkpoint(ctx, &dir.join("checkpoints").join(format!("step_{step}")), &progress, &state)?;
        if options.stop_after == Some((method, step)) && step < n {
            return Ok(None);
        }
    }

    let reports = matrices
        .iter()
        .map(|(m, mat)| Ok((*m, compute_report(mat)?)))
        .collect::<Result<BTreeMap<_, _>, MetricError>>()?;
    Ok(Some(MethodResult {
        method,
        matrices,
        reports,
        task_summaries: summaries,
        frozen_parameters: ctx.encoder.frozen_parameter_count(),
        train_seconds,
        eval_seconds,
    }))
}

fn write_checkpoint(ctx: &Context, dir: &Path, progress: &Progress, state: &MethodState) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let fmt = ctx.config.checkpoint_format;
    let mut meta = BTreeMap::new();
    meta.insert("method".to_string(), progress.method.to_string());
    meta.insert("step".to_string(), progress.step.to_string());
    let ckpt = match state {
        MethodState::Coleclip(model, vocab) => {
            vocab.save(&dir.join("vocabulary.txt"), fmt)?;
            meta.insert("use_task_prompts".into(), model.use_task_prompts.to_string());
            meta.insert("trained_tasks".into(), model.trained_tasks.to_string());
            Some(Checkpoint {
                backbone: ctx.config.backbone.clone(),
                image_shape: ctx.stream.image_shape,
                prompts: model.prompts.clone(),
                adapters: model.adapters.clone(),
                meta,
            })
        }
        MethodState::Naive(naive) => Some(Checkpoint {
            backbone: ctx.config.backbone.clone(),
            image_shape: ctx.stream.image_shape,
            prompts: TaskPromptBank {
                prompts: vec![naive.prompt.clone()],
            },
            adapters: vec![naive.adapter.clone()],
            meta,
        }),
        MethodState::Frozen(..) => None,
    };
    if let Some(c) = ckpt {
        c.save(&dir.join("model.ckpt"), fmt)?;
    }
    write_json(&dir.join("progress.json"), progress)
}

/// Writes CSV matrices, markdown tables and (optionally) SVG plots.
pub fn emit_report(run: &RunRecord, out: &Path, plots: bool) -> Result<Vec<PathBuf>, HarnessError> {
    let mut written = Vec::new();
    let mut summary = format!("# Run {}\n\n", run.config_hash);
    summary.push_str("| Method | Mode | Last | Forgetting | Avg | Transfer |\n|---|---|---|---|---|---|\n");
    for r in &run.results {
        let dir = out.join(r.method.name());
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        for (mode, m) in &r.matrices {
            let p = dir.join(format!("matrix_{mode}.csv"));
            fs::write(&p, m.to_csv()).map_err(io(&p))?;
            written.push(p);
            let rep = &r.reports[mode];
            let p = dir.join(format!("report_{mode}.md"));
            fs::write(&p, rep.to_markdown(r.method.name())).map_err(io(&p))?;
            written.push(p);
            let pct = |v: f64| format!("{:.2}", v * 100.0);
            summary.push_str(&format!(
                "| {} | {mode} | {} | {} | {} | {} |\n",
                r.method,
                pct(rep.last),
                pct(rep.forgetting),
                pct(rep.avg),
                rep.transfer.map(pct).unwrap_or_else(|| "-".into())
            ));
            if plots {
                let pdir = out.join("plots");
                fs::create_dir_all(&pdir).map_err(io(&pdir))?;
                let rows = m.rows()?;
                let series: Vec<(String, Vec<f64>)> = m.dataset_names.iter().cloned().zip(rows).collect();
                let p = pdir.join(format!("{}_{mode}.svg", r.method));
                fs::write(&p, line_plot_svg(&format!("{} {mode}: accuracy per dataset", r.method), &series)).map_err(io(&p))?;
                written.push(p);
            }
        }
        let params: Vec<String> = r.task_summaries.iter().map(|s| s.learnable_parameters.to_string()).collect();
        summary.push_str(&format!(
            "\n{}: frozen parameters {}, learnable per task [{}], train {:.1}s, eval {:.1}s\n\n",
            r.method,
            r.frozen_parameters,
            params.join(", "),
            r.train_seconds,
            r.eval_seconds
        ));
    }
    let p = out.join("report.md");
    fs::write(&p, summary).map_err(io(&p))?;
    written.push(p);
    Ok(written)
}

/// Rebuilds a run's matrices and reports from its prediction logs, when present.
pub fn rebuild_from_predictions(run: &mut RunRecord, out: &Path) -> Result<usize, HarnessError> {
    let mut rebuilt = 0;
    for r in &mut run.results {
        let path = out.join(r.method.name()).join("predictions.jsonl");
        if !path.exists() {
            continue;
        }
        let file = File::open(&path).map_err(io(&path))?;
        let mut records = Vec::new();
        for (k, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PredictionRecord = serde_json::from_str(&line).map_err(|e| HarnessError::Format {
                path: format!("{}:{}", path.display(), k + 1),
                msg: e.to_string(),
            })?;
            records.push(rec);
        }
        let mats = matrices_from_predictions(&records, &run.dataset_names)?;
        for (mode, m) in mats {
            r.reports.insert(mode, compute_report(&m)?);
            r.matrices.insert(mode, m);
        }
        rebuilt += 1;
    }
    Ok(rebuilt)
}
