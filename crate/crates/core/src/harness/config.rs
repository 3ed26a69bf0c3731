//! Flat `section.key = value` experiment config.
//!
//! Blank lines and `#` comments are ignored. `experiment.seed` seeds every
//! section that does not set its own seed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::FloatFormat;
use crate::encoder::{parse_targets, BackboneConfig};
use crate::inference::Mode;
use crate::stream::{ImageShape, StreamConfig};
use crate::trainer::{TrainConfig, UpdateScope};

/// `line` is 0 for errors found after parsing (cross-key validation).
#[derive(Debug, Error, PartialEq)]
pub struct ConfigError {
    pub line: usize,
    pub key: String,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("config")?;
        if self.line > 0 {
            write!(f, " line {}", self.line)?;
        }
        if !self.key.is_empty() {
            write!(f, " key `{}`", self.key)?;
        }
        write!(f, ": {}", self.msg)
    }
}

impl ConfigError {
    pub fn general(msg: impl Into<String>) -> Self {
        Self {
            line: 0,
            key: String::new(),
            msg: msg.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Coleclip,
    FrozenBaseline,
    NaiveFinetune,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Coleclip => "coleclip",
            Method::FrozenBaseline => "frozen_baseline",
            Method::NaiveFinetune => "naive_finetune",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "coleclip" => Ok(Method::Coleclip),
            "frozen_baseline" => Ok(Method::FrozenBaseline),
            "naive_finetune" => Ok(Method::NaiveFinetune),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StreamSource {
    Generated(StreamConfig),
    Manifest(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub stream: StreamSource,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub modes: Vec<Mode>,
    /// 1-based permutation of the stream's tasks; `None` keeps stream order.
    pub order: Option<Vec<usize>>,
    pub output: PathBuf,
    pub seed: u64,
    pub deterministic: bool,
    pub plots: bool,
    pub checkpoint_format: FloatFormat,
    pub write_predictions: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            stream: StreamSource::Generated(StreamConfig::default()),
            backbone: BackboneConfig::default(),
            train: TrainConfig::default(),
            methods: vec![Method::Coleclip, Method::FrozenBaseline],
            modes: vec![Mode::Til, Mode::Cil],
            order: None,
            output: PathBuf::from("runs/default"),
            seed: 0,
            deterministic: false,
            plots: false,
            checkpoint_format: FloatFormat::Decimal(17),
            write_predictions: true,
        }
    }
}

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        other => Err(format!("expected a boolean, found `{other}`")),
    }
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(parse::<T>).collect()
}

fn parse_shape(v: &str) -> Result<ImageShape, String> {
    let dims: Vec<usize> = v.split('x').map(parse::<usize>).collect::<Result<_, _>>()?;
    match dims[..] {
        [h, w, c] => Ok(ImageShape::new(h, w, c)),
        _ => Err(format!("expected HxWxC, found `{v}`")),
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut pairs: Vec<(usize, String, String)> = Vec::new();
        let mut seen = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError {
                line: n + 1,
                key: line.to_string(),
                msg: "expected key = value".into(),
            })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if let Some(prev) = seen.insert(k.clone(), n + 1) {
                return Err(ConfigError {
                    line: n + 1,
                    key: k,
                    msg: format!("duplicate key (first set on line {prev})"),
                });
            }
            pairs.push((n + 1, k, v));
        }
        if let Some(line) = seen.get("stream.manifest") {
            if let Some((k, _)) = seen
                .iter()
                .find(|(k, _)| k.starts_with("stream.") && k.as_str() != "stream.manifest")
            {
                return Err(ConfigError {
                    line: *line,
                    key: "stream.manifest".into(),
                    msg: format!("cannot be combined with {k}"),
                });
            }
        }
        let mut cfg = Self::default();
        // experiment.seed is applied before everything else
        pairs.sort_by_key(|(_, k, _)| k != "experiment.seed");
        for (line, k, v) in &pairs {
            cfg.set(k, v).map_err(|msg| ConfigError {
                line: *line,
                key: k.clone(),
                msg,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::general(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Sets every section seed.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.backbone.seed = seed;
        self.train.seed = seed;
        if let StreamSource::Generated(s) = &mut self.stream {
            s.seed = seed;
        }
    }

    fn stream_mut(&mut self) -> Result<&mut StreamConfig, String> {
        match &mut self.stream {
            StreamSource::Generated(s) => Ok(s),
            StreamSource::Manifest(_) => Err("stream parameters cannot be combined with stream.manifest".into()),
        }
    }

    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let (section, name) = key.split_once('.').ok_or_else(|| "keys need a section prefix".to_string())?;
        match (section, name) {
            ("stream", "manifest") => self.stream = StreamSource::Manifest(PathBuf::from(v)),
            ("stream", "num_tasks") => self.stream_mut()?.num_tasks = parse(v)?,
            ("stream", "classes_per_task") => self.stream_mut()?.classes_per_task = parse(v)?,
            ("stream", "overlap_fraction") => self.stream_mut()?.overlap_fraction = parse(v)?,
            ("stream", "samples_per_class_train") => self.stream_mut()?.samples_per_class_train = parse(v)?,
            ("stream", "samples_per_class_test") => self.stream_mut()?.samples_per_class_test = parse(v)?,
            ("stream", "image_shape") => self.stream_mut()?.image_shape = parse_shape(v)?,
            ("stream", "domain_shift_strength") => self.stream_mut()?.domain_shift_strength = parse(v)?,
            ("stream", "seed") => self.stream_mut()?.seed = parse(v)?,
            ("backbone", "embed_dim") => self.backbone.embed_dim = parse(v)?,
            ("backbone", "num_layers") => self.backbone.num_layers = parse(v)?,
            ("backbone", "num_heads") => self.backbone.num_heads = parse(v)?,
            ("backbone", "patch_size") => self.backbone.patch_size = parse(v)?,
            ("backbone", "max_text_tokens") => self.backbone.max_text_tokens = parse(v)?,
            ("backbone", "mlp_ratio") => self.backbone.mlp_ratio = parse(v)?,
            ("backbone", "seed") => self.backbone.seed = parse(v)?,
            ("train", "alpha") => self.train.alpha = parse(v)?,
            ("train", "gamma") => self.train.gamma = parse(v)?,
            ("train", "tau") => self.train.tau = parse(v)?,
            ("train", "learning_rate") => self.train.learning_rate = parse(v)?,
            ("train", "batch_size") => self.train.batch_size = parse(v)?,
            ("train", "epochs") => self.train.default_epochs = parse(v)?,
            ("train", "epochs_per_task") => {
                let list: Vec<usize> = parse_list(v)?;
                self.train.epochs_per_task = list.into_iter().enumerate().map(|(i, e)| (i + 1, e)).collect();
            }
            ("train", "rank") => self.train.rank = parse(v)?,
            ("train", "prompt_length") => self.train.prompt_length = parse(v)?,
            ("train", "adapter_targets") => self.train.adapter_targets = parse_targets(v)?,
            ("train", "adapter_scale") => self.train.adapter_scale = parse(v)?,
            ("train", "vocabulary_update") => self.train.use_vocabulary_update = parse_bool(v)?,
            ("train", "task_prompts") => self.train.use_task_prompts = parse_bool(v)?,
            ("train", "negative_selection") => self.train.use_negative_selection = parse_bool(v)?,
            ("train", "negative_diff_sign") => self.train.negative_diff_sign = parse(v)?,
            ("train", "update_scope") => {
                self.train.update_scope = match v {
                    "all" => UpdateScope::AllTaskClasses,
                    "batch" => UpdateScope::BatchClasses,
                    other => return Err(format!("expected `all` or `batch`, found `{other}`")),
                }
            }
            ("train", "seed") => self.train.seed = parse(v)?,
            ("experiment", "methods") => self.methods = parse_list(v)?,
            ("experiment", "modes") => self.modes = parse_list(v)?,
            ("experiment", "order") => self.order = Some(parse_list(v)?),
            ("experiment", "output") => self.output = PathBuf::from(v),
            ("experiment", "seed") => self.apply_seed(parse(v)?),
            ("experiment", "deterministic") => self.deterministic = parse_bool(v)?,
            ("experiment", "plots") => self.plots = parse_bool(v)?,
            ("experiment", "checkpoint_format") => self.checkpoint_format = parse(v)?,
            ("experiment", "write_predictions") => self.write_predictions = parse_bool(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |key: &str, msg: String| ConfigError {
            line: 0,
            key: key.to_string(),
            msg,
        };
        if self.methods.is_empty() {
            return Err(err("experiment.methods", "at least one method required".into()));
        }
        if self.modes.is_empty() {
            return Err(err("experiment.modes", "at least one mode required".into()));
        }
        let mut m = self.methods.clone();
        m.sort();
        m.dedup();
        if m.len() != self.methods.len() {
            return Err(err("experiment.methods", "duplicate method".into()));
        }
        let mut modes = self.modes.clone();
        modes.sort();
        modes.dedup();
        if modes.len() != self.modes.len() {
            return Err(err("experiment.modes", "duplicate mode".into()));
        }
        if let StreamSource::Generated(s) = &self.stream {
            s.validate().map_err(|e| err("stream", e.to_string()))?;
            if let Some(order) = &self.order {
                check_permutation(order, s.num_tasks).map_err(|e| err("experiment.order", e))?;
            }
        }
        self.backbone.validate().map_err(|e| err("backbone", e.to_string()))?;
        self.train.validate().map_err(|e| err("train", e.to_string()))?;
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut lines = Vec::new();
        let mut kv = |k: &str, v: String| lines.push(format!("{k} = {v}"));
        match &self.stream {
            StreamSource::Manifest(p) => kv("stream.manifest", p.display().to_string()),
            StreamSource::Generated(s) => {
                kv("stream.num_tasks", s.num_tasks.to_string());
                kv("stream.classes_per_task", s.classes_per_task.to_string());
                kv("stream.overlap_fraction", s.overlap_fraction.to_string());
                kv("stream.samples_per_class_train", s.samples_per_class_train.to_string());
                kv("stream.samples_per_class_test", s.samples_per_class_test.to_string());
                let sh = s.image_shape;
                kv("stream.image_shape", format!("{}x{}x{}", sh.height, sh.width, sh.channels));
                kv("stream.domain_shift_strength", s.domain_shift_strength.to_string());
                kv("stream.seed", s.seed.to_string());
            }
        }
        let b = &self.backbone;
        kv("backbone.embed_dim", b.embed_dim.to_string());
        kv("backbone.num_layers", b.num_layers.to_string());
        kv("backbone.num_heads", b.num_heads.to_string());
        kv("backbone.patch_size", b.patch_size.to_string());
        kv("backbone.max_text_tokens", b.max_text_tokens.to_string());
        kv("backbone.mlp_ratio", b.mlp_ratio.to_string());
        kv("backbone.seed", b.seed.to_string());
        let t = &self.train;
        kv("train.alpha", t.alpha.to_string());
        kv("train.gamma", t.gamma.to_string());
        kv("train.tau", t.tau.to_string());
        kv("train.learning_rate", t.learning_rate.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.epochs", t.default_epochs.to_string());
        if !t.epochs_per_task.is_empty() {
            let max = t.epochs_per_task.keys().max().copied().unwrap_or(0);
            let list: Vec<usize> = (1..=max).map(|i| t.epochs_for(i)).collect();
            kv("train.epochs_per_task", join(&list));
        }
        kv("train.rank", t.rank.to_string());
        kv("train.prompt_length", t.prompt_length.to_string());
        kv("train.adapter_targets", join(&t.adapter_targets));
        kv("train.adapter_scale", t.adapter_scale.to_string());
        kv("train.vocabulary_update", t.use_vocabulary_update.to_string());
        kv("train.task_prompts", t.use_task_prompts.to_string());
        kv("train.negative_selection", t.use_negative_selection.to_string());
        kv("train.negative_diff_sign", t.negative_diff_sign.to_string());
        kv(
            "train.update_scope",
            match t.update_scope {
                UpdateScope::AllTaskClasses => "all",
                UpdateScope::BatchClasses => "batch",
            }
            .into(),
        );
        kv("train.seed", t.seed.to_string());
        kv("experiment.methods", join(&self.methods));
        kv("experiment.modes", join(&self.modes));
        if let Some(o) = &self.order {
            kv("experiment.order", join(o));
        }
        kv("experiment.output", self.output.display().to_string());
        kv("experiment.seed", self.seed.to_string());
        kv("experiment.deterministic", self.deterministic.to_string());
        kv("experiment.plots", self.plots.to_string());
        kv("experiment.checkpoint_format", self.checkpoint_format.to_string());
        kv("experiment.write_predictions", self.write_predictions.to_string());
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// FNV-1a of the canonical text, as 16 hex digits.
    pub fn hash(&self) -> String {
        format!("{:016x}", crate::util::fnv1a(self.to_text().as_bytes()))
    }
}

pub fn check_permutation(order: &[usize], n: usize) -> Result<(), String> {
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (1..=n).collect::<Vec<_>>() {
        return Err(format!("{order:?} is not a permutation of 1..={n}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let cfg = ExperimentConfig::parse_str(
            "# demo\nstream.num_tasks = 4\nstream.image_shape=8x8x3\n\ntrain.epochs=2 # short\nexperiment.methods=coleclip,naive_finetune\nexperiment.modes=CIL\nexperiment.order=2,1,4,3\n",
        )
        .unwrap();
        let StreamSource::Generated(s) = &cfg.stream else { panic!() };
        assert_eq!(s.num_tasks, 4);
        assert_eq!(s.image_shape, ImageShape::new(8, 8, 3));
        assert_eq!(cfg.train.default_epochs, 2);
        assert_eq!(cfg.methods, vec![Method::Coleclip, Method::NaiveFinetune]);
        assert_eq!(cfg.modes, vec![Mode::Cil]);
        assert_eq!(cfg.order, Some(vec![2, 1, 4, 3]));
    }

    #[test]
    fn global_seed_yields_to_section_seed() {
        let cfg = ExperimentConfig::parse_str("train.seed=5\nexperiment.seed=9\n").unwrap();
        assert_eq!((cfg.seed, cfg.backbone.seed, cfg.train.seed), (9, 9, 5));
    }

    #[test]
    fn errors_carry_line_and_key() {
        let e = ExperimentConfig::parse_str("stream.num_tasks=3\ntrain.tau=abc\n").unwrap_err();
        assert_eq!((e.line, e.key.as_str()), (2, "train.tau"));
        let e = ExperimentConfig::parse_str("bogus.key=1").unwrap_err();
        assert_eq!(e.msg, "unknown key");
        let e = ExperimentConfig::parse_str("train.tau=1\ntrain.tau=2").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(ExperimentConfig::parse_str("experiment.order=1,1,2").is_err());
        assert!(ExperimentConfig::parse_str("experiment.methods=").is_err());
        assert!(ExperimentConfig::parse_str("stream.num_tasks=3\nstream.manifest=x").is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = ExperimentConfig::parse_str(
            "stream.overlap_fraction=0.5\ntrain.epochs_per_task=3,4\ntrain.update_scope=batch\nexperiment.order=3,1,2\ntrain.learning_rate=0.0125\n",
        )
        .unwrap();
        cfg.train.adapter_targets = parse_targets("q,k,v").unwrap();
        let back = ExperimentConfig::parse_str(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        cfg.train.alpha = 0.2;
        assert_ne!(back.hash(), cfg.hash());
    }

    #[test]
    fn manifest_source() {
        let cfg = ExperimentConfig::parse_str("stream.manifest=data/m.txt\nexperiment.seed=3").unwrap();
        assert_eq!(cfg.stream, StreamSource::Manifest(PathBuf::from("data/m.txt")));
        assert_eq!(ExperimentConfig::parse_str(&cfg.to_text()).unwrap(), cfg);
    }
}
