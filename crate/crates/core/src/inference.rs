//! Prediction routing. Every candidate class gets one logit: classes in the
//! vocabulary are scored against each of their source tasks' fused visual
//! embeddings and the maximum kept; unknown classes fall back to the frozen
//! text embedding against the class token. TIL restricts the CIL table to
//! one task's classes.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{cosine_score, fuse_visual, DualEncoder, EncoderError, LowRankAdapter, TaskPromptBank, VisualOutput};
use crate::stream::{ImageSample, TaskSpec, TaskStream};
use crate::trainer::naive::NaiveState;
use crate::trainer::{par_map, TrainError};
use crate::vocabulary::ClassVocabulary;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("routing error: {0}")]
    Routing(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "TIL")]
    Til,
    #[serde(rename = "CIL")]
    Cil,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Til => "TIL",
            Mode::Cil => "CIL",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TIL" => Ok(Mode::Til),
            "CIL" => Ok(Mode::Cil),
            other => Err(format!("unknown mode {other:?} (expected TIL or CIL)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "path", rename_all = "snake_case")]
pub enum Provenance {
    Vocabulary {
        task: usize,
    },
    Frozen,
    /// Scored by the sequential-finetune baseline's shared adapter.
    Finetuned,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Vocabulary { task } => write!(f, "vocabulary(task {task})"),
            Provenance::Frozen => f.write_str("frozen"),
            Provenance::Finetuned => f.write_str("finetuned"),
        }
    }
}

/// Inference-relevant learned state: the prompt bank and the number of
/// trained tasks. Adapters are kept only so checkpoints are complete.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub prompts: TaskPromptBank,
    pub adapters: Vec<LowRankAdapter>,
    pub use_task_prompts: bool,
    pub trained_tasks: usize,
}

impl ModelState {
    pub fn new(use_task_prompts: bool) -> Self {
        Self {
            use_task_prompts,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassLogit {
    pub class_name: String,
    pub logit: f64,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassLogitTable {
    pub entries: Vec<ClassLogit>,
}

impl ClassLogitTable {
    /// First maximum in candidate order.
    pub fn argmax(&self) -> Option<&ClassLogit> {
        let mut best: Option<&ClassLogit> = None;
        for e in &self.entries {
            if best.is_none_or(|b| e.logit > b.logit) {
                best = Some(e);
            }
        }
        best
    }

    pub fn get(&self, name: &str) -> Option<&ClassLogit> {
        self.entries.iter().find(|e| e.class_name == name)
    }

    /// Entries restricted to `names`, keeping this table's order.
    pub fn restricted(&self, names: &[String]) -> ClassLogitTable {
        let keep: HashSet<&str> = names.iter().map(String::as_str).collect();
        ClassLogitTable {
            entries: self
                .entries
                .iter()
                .filter(|e| keep.contains(e.class_name.as_str()))
                .cloned()
                .collect(),
        }
    }

    pub fn top(&self, k: usize) -> Vec<ClassLogit> {
        let mut idx: Vec<usize> = (0..self.entries.len()).collect();
        idx.sort_by(|&a, &b| self.entries[b].logit.total_cmp(&self.entries[a].logit).then(a.cmp(&b)));
        idx.into_iter().take(k).map(|i| self.entries[i].clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct PredictionRequest<'a> {
    pub image: &'a ImageSample,
    pub mode: Mode,
    pub task_id: Option<usize>,
    pub candidate_classes: &'a [String],
}

impl PredictionRequest<'_> {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.mode == Mode::Til && !self.task_id.is_some_and(|t| t >= 1) {
            return Err(InferenceError::Routing("TIL prediction needs a task id >= 1".into()));
        }
        if self.candidate_classes.is_empty() {
            return Err(InferenceError::Input("empty candidate list".into()));
        }
        let mut seen = HashSet::new();
        for c in self.candidate_classes {
            if c.is_empty() {
                return Err(InferenceError::Input("empty class name".into()));
            }
            if !seen.insert(c.as_str()) {
                return Err(InferenceError::Input(format!("duplicate candidate {c:?}")));
            }
        }
        Ok(())
    }
}

/// TIL: the classes of dataset `t`. CIL: the union of classes of datasets
/// `1..=t` in stream order, first occurrence order.
pub fn candidate_classes(stream: &TaskStream, mode: Mode, t: usize) -> Result<Vec<String>, InferenceError> {
    if t == 0 || t > stream.total_tasks() {
        return Err(InferenceError::Routing(format!(
            "task id {t} outside the stream (1..={})",
            stream.total_tasks()
        )));
    }
    Ok(match mode {
        Mode::Til => stream.task(t).class_set.clone(),
        Mode::Cil => stream.classes_up_to(t),
    })
}

/// Frozen text embeddings, computed once per class name.
#[derive(Debug, Clone, Default)]
pub struct FrozenTextCache {
    map: HashMap<String, Vec<f64>>,
}

impl FrozenTextCache {
    pub fn build(encoder: &DualEncoder, names: &[String]) -> Result<Self, InferenceError> {
        let mut map = HashMap::new();
        for n in names {
            if !map.contains_key(n) {
                map.insert(n.clone(), encoder.frozen_text_embedding(n)?);
            }
        }
        Ok(Self { map })
    }

    fn get(&self, encoder: &DualEncoder, name: &str) -> Result<std::borrow::Cow<'_, [f64]>, InferenceError> {
        Ok(match self.map.get(name) {
            Some(v) => std::borrow::Cow::Borrowed(v.as_slice()),
            None => std::borrow::Cow::Owned(encoder.frozen_text_embedding(name)?),
        })
    }
}

/// Final logit of one class. `trained_tasks` bounds which source tasks
/// have a prompt output available.
pub fn class_logit(
    encoder: &DualEncoder,
    visual: &VisualOutput,
    name: &str,
    vocab: &ClassVocabulary,
    trained_tasks: usize,
    use_task_prompts: bool,
    cache: &FrozenTextCache,
) -> Result<ClassLogit, InferenceError> {
    if name.is_empty() {
        return Err(InferenceError::Input("empty class name".into()));
    }
    let (logit, provenance) = match vocab.entry(name) {
        Some(entry) => {
            let usable: Vec<usize> = entry
                .source_tasks
                .iter()
                .copied()
                .filter(|&j| j <= trained_tasks && j <= visual.prompt_outputs.len())
                .collect();
            if use_task_prompts && !usable.is_empty() {
                let mut best: Option<(f64, usize)> = None;
                for j in usable {
                    let v = fuse_visual(&visual.prompt_outputs[j - 1], &visual.cls_output);
                    let s = cosine_score(&v, &entry.embedding)?;
                    if best.is_none_or(|(b, _)| s > b) {
                        best = Some((s, j));
                    }
                }
                let (s, j) = best.expect("non-empty");
                (s, Provenance::Vocabulary { task: j })
            } else {
                let task = entry.source_tasks.iter().next().copied().unwrap_or(entry.first_task);
                (cosine_score(&visual.cls_output, &entry.embedding)?, Provenance::Vocabulary { task })
            }
        }
        None => {
            let f = cache.get(encoder, name)?;
            (cosine_score(&visual.cls_output, &f)?, Provenance::Frozen)
        }
    };
    Ok(ClassLogit {
        class_name: name.to_string(),
        logit,
        provenance,
    })
}

/// Image forward with the prompts of all trained tasks.
pub fn visual_output(encoder: &DualEncoder, state: &ModelState, image: &ImageSample) -> Result<VisualOutput, InferenceError> {
    let bank = if state.use_task_prompts {
        state.prompts.truncated(state.trained_tasks)
    } else {
        TaskPromptBank::new()
    };
    Ok(encoder.encode_image(image, &bank)?)
}

pub fn predict(
    encoder: &DualEncoder,
    request: &PredictionRequest,
    state: &ModelState,
    vocab: &ClassVocabulary,
    cache: &FrozenTextCache,
) -> Result<(String, ClassLogitTable), InferenceError> {
    request.validate()?;
    let visual = visual_output(encoder, state, request.image)?;
    let entries = request
        .candidate_classes
        .iter()
        .map(|c| class_logit(encoder, &visual, c, vocab, state.trained_tasks, state.use_task_prompts, cache))
        .collect::<Result<Vec<_>, _>>()?;
    let table = ClassLogitTable { entries };
    let best = table.argmax().expect("non-empty candidates").class_name.clone();
    Ok((best, table))
}

/// One line of the prediction log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub step: usize,
    pub dataset: usize,
    pub domain_id: String,
    pub mode: Mode,
    pub sample_id: u64,
    pub true_label: String,
    pub predicted: String,
    pub top3: Vec<ClassLogit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEvaluation {
    pub accuracy: f64,
    pub records: Vec<PredictionRecord>,
}

/// Accuracy on `task`'s test set at training step `step`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_dataset(
    encoder: &DualEncoder,
    task: &TaskSpec,
    candidates: &[String],
    mode: Mode,
    step: usize,
    state: &ModelState,
    vocab: &ClassVocabulary,
    cache: &FrozenTextCache,
) -> Result<DatasetEvaluation, InferenceError> {
    evaluate_with(task, candidates, mode, step, |image| {
        let req = PredictionRequest {
            image,
            mode,
            task_id: Some(task.task_index),
            candidate_classes: candidates,
        };
        predict(encoder, &req, state, vocab, cache).map(|(_, table)| table)
    })
}

/// Same protocol for the sequential-finetune baseline.
pub fn evaluate_naive_dataset(
    encoder: &DualEncoder,
    task: &TaskSpec,
    candidates: &[String],
    mode: Mode,
    step: usize,
    state: &NaiveState,
) -> Result<DatasetEvaluation, InferenceError> {
    let text = state.class_embeddings(encoder, candidates)?;
    evaluate_with(task, candidates, mode, step, |image| {
        let scores = state.scores(encoder, image, &text)?;
        Ok(ClassLogitTable {
            entries: candidates
                .iter()
                .zip(scores)
                .map(|(c, logit)| ClassLogit {
                    class_name: c.clone(),
                    logit,
                    provenance: Provenance::Finetuned,
                })
                .collect(),
        })
    })
}

fn evaluate_with<F>(task: &TaskSpec, candidates: &[String], mode: Mode, step: usize, score: F) -> Result<DatasetEvaluation, InferenceError>
where
    F: Fn(&ImageSample) -> Result<ClassLogitTable, InferenceError> + Sync + Send,
{
    if task.test_samples.is_empty() {
        return Err(InferenceError::Input(format!("dataset {} has no test samples", task.task_index)));
    }
    if candidates.is_empty() {
        return Err(InferenceError::Input("empty candidate list".into()));
    }
    let records = par_map(task.test_samples.iter().collect(), |s: &ImageSample| -> Result<_, InferenceError> {
        let table = score(s)?;
        let predicted = table.argmax().expect("non-empty").class_name.clone();
        Ok(PredictionRecord {
            step,
            dataset: task.task_index,
            domain_id: task.domain_id.clone(),
            mode,
            sample_id: s.id,
            true_label: s.label.clone(),
            predicted,
            top3: table.top(3),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let correct = records.iter().filter(|r| r.predicted == r.true_label).count();
    Ok(DatasetEvaluation {
        accuracy: correct as f64 / records.len() as f64,
        records,
    })
}
