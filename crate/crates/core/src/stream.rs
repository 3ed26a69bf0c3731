//! Synthetic open-domain task streams.
//!
//! Every class is a deterministic parametric pattern (grating + blob) derived
//! from a hash of its name, so a class reused in a later task renders the same
//! concept. Every task lives in its own domain: a fixed per-domain color
//! affine map, noise level and optional horizontal flip, all scaled by
//! `domain_shift_strength`.
//!
//! On disk a stream is a text manifest plus, per task and split, a flat
//! little-endian `f32` sample file and a text index file.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{fnv1a, rng_for};

pub const MANIFEST_VERSION: u32 = 1;
const INDEX_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("stream config error at task {task}: {msg}")]
    TaskConfig { task: usize, msg: String },
    #[error("stream config error: {0}")]
    Config(String),
    #[error("{file}:{line}: field `{field}`: {msg}")]
    Parse {
        file: String,
        line: usize,
        field: String,
        msg: String,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StreamError + '_ {
    move |source| StreamError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One image, stored height-major then width then channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub id: u64,
    pub pixels: Vec<f32>,
    pub label: String,
}

impl ImageSample {
    pub fn pixel(&self, shape: ImageShape, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * shape.width + x) * shape.channels + c]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_index: usize,
    pub domain_id: String,
    pub class_set: Vec<String>,
    pub train_samples: Vec<ImageSample>,
    pub test_samples: Vec<ImageSample>,
}

impl TaskSpec {
    pub fn class_position(&self, name: &str) -> Option<usize> {
        self.class_set.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub image_shape: ImageShape,
    pub tasks: Vec<TaskSpec>,
}

impl TaskStream {
    pub fn total_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Union of class sets, in first-appearance order.
    pub fn class_union(&self) -> Vec<String> {
        self.classes_up_to(self.tasks.len())
    }

    /// Union of the class sets of tasks `1..=t`, first-appearance order.
    pub fn classes_up_to(&self, t: usize) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for task in self.tasks.iter().take(t) {
            for c in &task.class_set {
                if seen.insert(c.clone()) {
                    out.push(c.clone());
                }
            }
        }
        out
    }

    pub fn task(&self, t: usize) -> &TaskSpec {
        &self.tasks[t - 1]
    }

    /// Reorders tasks by a permutation of `1..=T` and renumbers them so the
    /// new training order is `1..=T` again.
    pub fn reordered(&self, order: &[usize]) -> Result<TaskStream, StreamError> {
        let t = self.tasks.len();
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (1..=t).collect::<Vec<_>>() {
            return Err(StreamError::Config(format!("task order {order:?} is not a permutation of 1..={t}")));
        }
        let tasks = order
            .iter()
            .enumerate()
            .map(|(i, &src)| {
                let mut task = self.tasks[src - 1].clone();
                task.task_index = i + 1;
                task
            })
            .collect();
        Ok(TaskStream {
            image_shape: self.image_shape,
            tasks,
        })
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        let mut ids = HashSet::new();
        for (i, task) in self.tasks.iter().enumerate() {
            let t = i + 1;
            let bad = |msg: String| StreamError::TaskConfig { task: t, msg };
            if task.task_index != t {
                return Err(bad(format!("task_index {} out of sequence", task.task_index)));
            }
            if task.class_set.is_empty() {
                return Err(bad("empty class set".into()));
            }
            let unique: BTreeSet<_> = task.class_set.iter().collect();
            if unique.len() != task.class_set.len() {
                return Err(bad("duplicate class names".into()));
            }
            for s in task.train_samples.iter().chain(&task.test_samples) {
                if !unique.contains(&s.label) {
                    return Err(bad(format!("sample {} has unknown label {}", s.id, s.label)));
                }
                if s.pixels.len() != self.image_shape.len() {
                    return Err(bad(format!("sample {} has wrong pixel count", s.id)));
                }
                if !s.pixels.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)) {
                    return Err(bad(format!("sample {} has pixels outside [0,1]", s.id)));
                }
                if !ids.insert(s.id) {
                    return Err(bad(format!("sample id {} is not unique", s.id)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub overlap_fraction: f64,
    pub samples_per_class_train: usize,
    pub samples_per_class_test: usize,
    pub image_shape: ImageShape,
    pub domain_shift_strength: f64,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            num_tasks: 3,
            classes_per_task: 4,
            overlap_fraction: 0.0,
            samples_per_class_train: 32,
            samples_per_class_test: 32,
            image_shape: ImageShape::new(16, 16, 3),
            domain_shift_strength: 1.0,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn overlap_count(&self) -> usize {
        overlap_count(self.overlap_fraction, self.classes_per_task)
    }

    pub fn validate(&self) -> Result<(), StreamError> {
        if self.num_tasks == 0 {
            return Err(StreamError::Config("num_tasks must be at least 1".into()));
        }
        if self.classes_per_task == 0 {
            return Err(StreamError::Config("classes_per_task must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return Err(StreamError::Config(format!(
                "overlap_fraction {} outside [0,1]",
                self.overlap_fraction
            )));
        }
        if self.samples_per_class_train == 0 || self.samples_per_class_test == 0 {
            return Err(StreamError::Config("samples per class must be at least 1".into()));
        }
        if self.image_shape.is_empty() {
            return Err(StreamError::Config("image_shape has a zero dimension".into()));
        }
        if !(self.domain_shift_strength >= 0.0 && self.domain_shift_strength.is_finite()) {
            return Err(StreamError::Config("domain_shift_strength must be finite and >= 0".into()));
        }
        Ok(())
    }
}

fn overlap_count(fraction: f64, classes: usize) -> usize {
    // tolerance keeps 0.5 * 4 from flooring to 1 on representation error
    (fraction * classes as f64 + 1e-9).floor() as usize
}

/// Chooses the class set of every task. `sizes[t]` is the size of task
/// `t + 1`; each task after the first reuses `⌊fraction·size⌋` names drawn
/// from the union of earlier tasks.
pub fn plan_class_sets(sizes: &[usize], fraction: f64, seed: u64) -> Result<Vec<Vec<String>>, StreamError> {
    let mut names = NameSource::new(seed);
    let mut pool: Vec<String> = Vec::new();
    let mut plan = Vec::with_capacity(sizes.len());
    for (i, &size) in sizes.iter().enumerate() {
        let t = i + 1;
        let reuse = if t == 1 { 0 } else { overlap_count(fraction, size) };
        if reuse > pool.len() {
            return Err(StreamError::TaskConfig {
                task: t,
                msg: format!("needs {reuse} overlapping classes but only {} earlier classes exist", pool.len()),
            });
        }
        let mut rng = rng_for(&[seed, 0x0c1a55, t as u64]);
        let mut chosen: Vec<String> = pool.choose_multiple(&mut rng, reuse).cloned().collect();
        // keep pool order for readability
        chosen.sort_by_key(|n| pool.iter().position(|p| p == n));
        while chosen.len() < size {
            chosen.push(names.fresh());
        }
        for c in &chosen {
            if !pool.contains(c) {
                pool.push(c.clone());
            }
        }
        plan.push(chosen);
    }
    Ok(plan)
}

struct NameSource {
    rng: rand_chacha::ChaCha8Rng,
    used: HashSet<String>,
}

impl NameSource {
    const ONSETS: [&'static str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    const VOWELS: [&'static str; 5] = ["a", "e", "i", "o", "u"];

    fn new(seed: u64) -> Self {
        Self {
            rng: rng_for(&[seed, 0x4a3e]),
            used: HashSet::new(),
        }
    }

    fn fresh(&mut self) -> String {
        loop {
            let syllables = self.rng.random_range(2..=3);
            let mut name = String::new();
            for _ in 0..syllables {
                name.push_str(Self::ONSETS[self.rng.random_range(0..Self::ONSETS.len())]);
                name.push_str(Self::VOWELS[self.rng.random_range(0..Self::VOWELS.len())]);
            }
            if self.used.insert(name.clone()) {
                return name;
            }
        }
    }
}

/// Rendering parameters of one class, fixed by its name.
#[derive(Debug, Clone, Copy)]
struct ClassPattern {
    freq: f64,
    angle: f64,
    phase: f64,
    color: [f64; 3],
    blob: (f64, f64, f64),
}

impl ClassPattern {
    fn from_name(name: &str) -> Self {
        let mut rng = rng_for(&[fnv1a(name.as_bytes())]);
        Self {
            freq: rng.random_range(0.5..3.0),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            color: [rng.random_range(0.1..1.0), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)],
            blob: (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.1..0.3)),
        }
    }

    fn value(&self, u: f64, v: f64, jitter: f64) -> f64 {
        let proj = u * self.angle.cos() + v * self.angle.sin();
        let grating = (std::f64::consts::TAU * self.freq * proj + self.phase + jitter).sin();
        let (bx, by, br) = self.blob;
        let d2 = (u - bx).powi(2) + (v - by).powi(2);
        let blob = (-d2 / (2.0 * br * br)).exp();
        0.5 + 0.3 * grating + 0.4 * blob - 0.2
    }
}

/// Fixed appearance shift of one domain.
#[derive(Debug, Clone)]
struct DomainTransform {
    gain: Vec<f64>,
    offset: Vec<f64>,
    noise_std: f64,
    flip: bool,
}

impl DomainTransform {
    fn new(seed: u64, domain: usize, channels: usize, strength: f64) -> Self {
        let mut rng = rng_for(&[seed, 0xd0a1, domain as u64]);
        let gain = (0..channels).map(|_| 1.0 + strength * rng.random_range(-0.3..0.3)).collect();
        let offset = (0..channels).map(|_| strength * rng.random_range(-0.2..0.2)).collect();
        let flip = strength > 0.0 && rng.random_bool(0.5);
        Self {
            gain,
            offset,
            noise_std: 0.03 + 0.04 * strength,
            flip,
        }
    }
}

fn render(pattern: &ClassPattern, domain: &DomainTransform, shape: ImageShape, rng: &mut impl Rng) -> Vec<f32> {
    let noise = Normal::new(0.0, domain.noise_std).expect("finite noise std");
    let jitter = rng.random_range(-0.6..0.6);
    let mut pixels = Vec::with_capacity(shape.len());
    for y in 0..shape.height {
        for x in 0..shape.width {
            let xs = if domain.flip { shape.width - 1 - x } else { x };
            let u = (xs as f64 + 0.5) / shape.width as f64;
            let v = (y as f64 + 0.5) / shape.height as f64;
            let base = pattern.value(u, v, jitter);
            for c in 0..shape.channels {
                let tint = pattern.color[c % 3];
                let raw = 0.2 + 0.6 * tint * base + 0.2 * (1.0 - tint);
                let shifted = domain.gain[c] * raw + domain.offset[c] + noise.sample(rng);
                pixels.push(shifted.clamp(0.0, 1.0) as f32);
            }
        }
    }
    pixels
}

/// Deterministic synthetic stream for `config`.
pub fn generate_stream(config: &StreamConfig) -> Result<TaskStream, StreamError> {
    config.validate()?;
    let sizes = vec![config.classes_per_task; config.num_tasks];
    let plan = plan_class_sets(&sizes, config.overlap_fraction, config.seed)?;
    let shape = config.image_shape;
    let mut next_id: u64 = 0;
    let mut tasks = Vec::with_capacity(config.num_tasks);
    for (i, class_set) in plan.into_iter().enumerate() {
        let t = i + 1;
        let domain = DomainTransform::new(config.seed, t, shape.channels, config.domain_shift_strength);
        let mut make_split = |split: u64, per_class: usize| {
            let mut out = Vec::with_capacity(per_class * class_set.len());
            for (ci, name) in class_set.iter().enumerate() {
                let pattern = ClassPattern::from_name(name);
                for k in 0..per_class {
                    let mut rng = rng_for(&[config.seed, t as u64, split, ci as u64, k as u64]);
                    out.push(ImageSample {
                        id: next_id,
                        pixels: render(&pattern, &domain, shape, &mut rng),
                        label: name.clone(),
                    });
                    next_id += 1;
                }
            }
            out
        };
        let train_samples = make_split(0, config.samples_per_class_train);
        let test_samples = make_split(1, config.samples_per_class_test);
        tasks.push(TaskSpec {
            task_index: t,
            domain_id: format!("domain-{t}"),
            class_set,
            train_samples,
            test_samples,
        });
    }
    Ok(TaskStream { image_shape: shape, tasks })
}

fn sample_file_names(manifest: &Path, t: usize, split: &str) -> (String, String) {
    let stem = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "stream".into());
    (format!("{stem}.task{t}.{split}.bin"), format!("{stem}.task{t}.{split}.idx"))
}

fn write_samples(dir: &Path, bin: &str, idx: &str, samples: &[ImageSample], values: usize) -> Result<(), StreamError> {
    let bin_path = dir.join(bin);
    let mut bytes = Vec::with_capacity(samples.len() * values * 4);
    let mut index = format!("odcl-index {INDEX_VERSION}\ncount {}\nvalues_per_sample {values}\n", samples.len());
    for (k, s) in samples.iter().enumerate() {
        for p in &s.pixels {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        index.push_str(&format!("{} {} {}\n", s.id, s.label, k * values * 4));
    }
    fs::write(&bin_path, bytes).map_err(io_err(&bin_path))?;
    let idx_path = dir.join(idx);
    fs::write(&idx_path, index).map_err(io_err(&idx_path))
}

/// Writes the manifest at `path` and sample files beside it.
pub fn write_manifest(stream: &TaskStream, path: &Path) -> Result<(), StreamError> {
    stream.validate()?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let shape = stream.image_shape;
    let mut text = String::new();
    text.push_str(&format!("odcl-manifest {MANIFEST_VERSION}\n"));
    text.push_str(&format!("image_shape {} {} {}\n", shape.height, shape.width, shape.channels));
    text.push_str(&format!("tasks {}\n", stream.tasks.len()));
    for task in &stream.tasks {
        for name in &task.class_set {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(StreamError::TaskConfig {
                    task: task.task_index,
                    msg: format!("class name {name:?} cannot be written (empty or whitespace)"),
                });
            }
        }
        if task.domain_id.is_empty() || task.domain_id.chars().any(char::is_whitespace) {
            return Err(StreamError::TaskConfig {
                task: task.task_index,
                msg: "domain_id must be non-empty without whitespace".into(),
            });
        }
        let (train_bin, train_idx) = sample_file_names(path, task.task_index, "train");
        let (test_bin, test_idx) = sample_file_names(path, task.task_index, "test");
        write_samples(&dir, &train_bin, &train_idx, &task.train_samples, shape.len())?;
        write_samples(&dir, &test_bin, &test_idx, &task.test_samples, shape.len())?;
        text.push_str(&format!("task {}\n", task.task_index));
        text.push_str(&format!("domain_id {}\n", task.domain_id));
        text.push_str(&format!("classes {}\n", task.class_set.join(" ")));
        text.push_str(&format!("train {train_bin} {train_idx}\n"));
        text.push_str(&format!("test {test_bin} {test_idx}\n"));
        text.push_str("end_task\n");
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

struct LineReader<'a> {
    file: String,
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> LineReader<'a> {
    fn new(file: &Path, text: &'a str) -> Self {
        Self {
            file: file.display().to_string(),
            lines: text.lines().enumerate(),
            last: 0,
        }
    }

    fn err(&self, field: &str, msg: impl Into<String>) -> StreamError {
        StreamError::Parse {
            file: self.file.clone(),
            line: self.last,
            field: field.into(),
            msg: msg.into(),
        }
    }

    /// Next non-blank line split at the first space, checked against `key`.
    fn expect(&mut self, key: &str) -> Result<&'a str, StreamError> {
        loop {
            let Some((n, line)) = self.lines.next() else {
                self.last += 1;
                return Err(self.err(key, "unexpected end of file"));
            };
            self.last = n + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, rest) = line.split_once(' ').unwrap_or((line, ""));
            if k != key {
                return Err(self.err(key, format!("expected `{key}`, found `{k}`")));
            }
            return Ok(rest.trim());
        }
    }

    fn number<T: std::str::FromStr>(&self, field: &str, s: &str) -> Result<T, StreamError> {
        s.parse().map_err(|_| self.err(field, format!("`{s}` is not a valid number")))
    }
}

fn read_samples(dir: &Path, bin: &str, idx: &str, shape: ImageShape) -> Result<Vec<ImageSample>, StreamError> {
    let idx_path = dir.join(idx);
    let text = fs::read_to_string(&idx_path).map_err(io_err(&idx_path))?;
    let mut r = LineReader::new(&idx_path, &text);
    let version: u32 = {
        let v = r.expect("odcl-index")?;
        r.number("odcl-index", v)?
    };
    if version != INDEX_VERSION {
        return Err(r.err("odcl-index", format!("unsupported index version {version}")));
    }
    let count: usize = {
        let v = r.expect("count")?;
        r.number("count", v)?
    };
    let values: usize = {
        let v = r.expect("values_per_sample")?;
        r.number("values_per_sample", v)?
    };
    if values != shape.len() {
        return Err(r.err(
            "values_per_sample",
            format!("{values} does not match image_shape ({})", shape.len()),
        ));
    }
    let bin_path = dir.join(bin);
    let bytes = fs::read(&bin_path).map_err(io_err(&bin_path))?;
    if bytes.len() != count * values * 4 {
        return Err(r.err(
            "count",
            format!("binary file has {} bytes, expected {}", bytes.len(), count * values * 4),
        ));
    }
    let mut out = Vec::with_capacity(count);
    for (n, line) in text.lines().skip_while(|l| !l.starts_with("values_per_sample")).skip(1).enumerate() {
        let line_no = n + 4;
        let parse_err = |field: &str, msg: String| StreamError::Parse {
            file: idx_path.display().to_string(),
            line: line_no,
            field: field.into(),
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(parse_err(
                "record",
                format!("expected `id label offset`, found {} fields", parts.len()),
            ));
        }
        let id: u64 = parts[0]
            .parse()
            .map_err(|_| parse_err("id", format!("`{}` is not an integer", parts[0])))?;
        let offset: usize = parts[2]
            .parse()
            .map_err(|_| parse_err("offset", format!("`{}` is not an integer", parts[2])))?;
        if offset + values * 4 > bytes.len() {
            return Err(parse_err("offset", format!("{offset} beyond end of sample file")));
        }
        let pixels = bytes[offset..offset + values * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(ImageSample {
            id,
            pixels,
            label: parts[1].to_string(),
        });
    }
    if out.len() != count {
        return Err(r.err("count", format!("header says {count} samples, found {}", out.len())));
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<TaskStream, StreamError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let mut r = LineReader::new(path, &text);
    let v = r.expect("odcl-manifest")?;
    let version: u32 = r.number("odcl-manifest", v)?;
    if version != MANIFEST_VERSION {
        return Err(r.err("odcl-manifest", format!("unsupported manifest version {version}")));
    }
    let dims = r.expect("image_shape")?;
    let dims: Vec<usize> = dims
        .split_whitespace()
        .map(|d| r.number("image_shape", d))
        .collect::<Result<_, _>>()?;
    if dims.len() != 3 {
        return Err(r.err("image_shape", "expected three integers H W C"));
    }
    let shape = ImageShape::new(dims[0], dims[1], dims[2]);
    let v = r.expect("tasks")?;
    let total: usize = r.number("tasks", v)?;
    let mut tasks = Vec::with_capacity(total);
    for expected in 1..=total {
        let v = r.expect("task")?;
        let task_index: usize = r.number("task", v)?;
        if task_index != expected {
            return Err(r.err("task", format!("expected task {expected}, found {task_index}")));
        }
        let domain_id = r.expect("domain_id")?.to_string();
        if domain_id.is_empty() {
            return Err(r.err("domain_id", "empty domain id"));
        }
        let class_set: Vec<String> = r.expect("classes")?.split_whitespace().map(String::from).collect();
        if class_set.is_empty() {
            return Err(r.err("classes", "empty class list"));
        }
        let files = |r: &mut LineReader<'_>, key: &str| -> Result<(String, String), StreamError> {
            let rest = r.expect(key)?;
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 2 {
                return Err(r.err(key, "expected `<samples.bin> <samples.idx>`"));
            }
            Ok((parts[0].to_string(), parts[1].to_string()))
        };
        let (train_bin, train_idx) = files(&mut r, "train")?;
        let (test_bin, test_idx) = files(&mut r, "test")?;
        r.expect("end_task")?;
        tasks.push(TaskSpec {
            task_index,
            domain_id,
            class_set,
            train_samples: read_samples(&dir, &train_bin, &train_idx, shape)?,
            test_samples: read_samples(&dir, &test_bin, &test_idx, shape)?,
        });
    }
    let stream = TaskStream { image_shape: shape, tasks };
    stream.validate()?;
    Ok(stream)
}

/// Mean pixel value per channel over a sample set.
pub fn channel_means(samples: &[ImageSample], shape: ImageShape) -> Vec<f64> {
    let mut sums = vec![0.0; shape.channels];
    for s in samples {
        for (k, p) in s.pixels.iter().enumerate() {
            sums[k % shape.channels] += f64::from(*p);
        }
    }
    let n = (samples.len() * shape.height * shape.width).max(1) as f64;
    sums.iter().map(|s| s / n).collect()
}
