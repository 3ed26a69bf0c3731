//! Cross-domain class vocabulary: one momentum-updated embedding per class
//! name, shared by every task that mentions the name.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{kv_fields, kv_get, CodecError, FloatFormat, RecordReader, RecordWriter};
use crate::encoder::EncoderError;

pub const VOCAB_VERSION: u32 = 1;
const MAGIC: &str = "odcl-vocabulary";

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("class {0:?} is not in the vocabulary")]
    MissingEntry(String),
    #[error("embedding for {name:?} has dimension {found}, vocabulary uses {expected}")]
    Dimension { name: String, expected: usize, found: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("vocabulary parse error: {0}")]
    Codec(#[from] CodecError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub class_name: String,
    pub embedding: Vec<f64>,
    pub first_task: usize,
    pub source_tasks: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    pub dim: usize,
    pub alpha: f64,
    entries: BTreeMap<String, VocabEntry>,
}

impl ClassVocabulary {
    pub fn new(dim: usize, alpha: f64) -> Self {
        assert!((0.0..=1.0).contains(&alpha), "momentum coefficient must be in [0,1]");
        Self {
            dim,
            alpha,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &VocabEntry> {
        self.entries.values()
    }

    pub fn entry(&self, name: &str) -> Option<&VocabEntry> {
        self.entries.get(name)
    }

    pub fn lookup(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(|e| e.embedding.as_slice())
    }

    /// Inserts unseen names with their frozen text embedding; names already
    /// present only gain `task_index` as a source task. Returns the number
    /// of new entries.
    pub fn ensure_entries<F>(&mut self, names: &[String], task_index: usize, mut frozen_text: F) -> Result<usize, VocabError>
    where
        F: FnMut(&str) -> Result<Vec<f64>, EncoderError>,
    {
        let mut added = 0;
        for name in names {
            if let Some(e) = self.entries.get_mut(name) {
                e.source_tasks.insert(task_index);
                continue;
            }
            let embedding = frozen_text(name)?;
            if embedding.len() != self.dim {
                return Err(VocabError::Dimension {
                    name: name.clone(),
                    expected: self.dim,
                    found: embedding.len(),
                });
            }
            self.entries.insert(
                name.clone(),
                VocabEntry {
                    class_name: name.clone(),
                    embedding,
                    first_task: task_index,
                    source_tasks: BTreeSet::from([task_index]),
                },
            );
            added += 1;
        }
        Ok(added)
    }

    /// `V ← α·w + (1−α)·V`, in place.
    pub fn momentum_update(&mut self, name: &str, refined: &[f64]) -> Result<&[f64], VocabError> {
        let alpha = self.alpha;
        let dim = self.dim;
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| VocabError::MissingEntry(name.to_string()))?;
        if refined.len() != dim {
            return Err(VocabError::Dimension {
                name: name.to_string(),
                expected: dim,
                found: refined.len(),
            });
        }
        for (v, w) in entry.embedding.iter_mut().zip(refined) {
            *v = w * alpha + *v * (1.0 - alpha);
        }
        Ok(&entry.embedding)
    }

    pub fn to_bytes(&self, format: FloatFormat) -> Vec<u8> {
        let mut w = RecordWriter::new(format);
        w.line(format!("{MAGIC} {VOCAB_VERSION}"));
        w.line(format!("float_format {format}"));
        w.line(format!(
            "header dim={} alpha={} entries={}",
            self.dim,
            crate::util::fmt_sig(self.alpha, 17),
            self.entries.len()
        ));
        for e in self.entries.values() {
            let sources: Vec<String> = e.source_tasks.iter().map(usize::to_string).collect();
            w.line(format!(
                "entry name={} first_task={} source_tasks={}",
                e.class_name,
                e.first_task,
                sources.join(",")
            ));
            w.floats(&e.embedding);
        }
        w.line("end");
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = RecordReader::new(bytes, "float_format")?;
        let version = r.expect(MAGIC)?;
        if version != VOCAB_VERSION.to_string() {
            return Err(r.err(MAGIC, format!("unsupported vocabulary version {version}")));
        }
        r.expect("float_format")?;
        let hdr = r.expect("header")?;
        let f = kv_fields(&hdr);
        let dim: usize = kv_get(&f, "dim")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| r.err("dim", "missing or invalid"))?;
        let alpha: f64 = kv_get(&f, "alpha")
            .and_then(|v| v.parse().ok())
            .filter(|a| (0.0..=1.0).contains(a))
            .ok_or_else(|| r.err("alpha", "missing or outside [0,1]"))?;
        let count: usize = kv_get(&f, "entries")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| r.err("entries", "missing or invalid"))?;
        let mut vocab = ClassVocabulary::new(dim, alpha);
        for _ in 0..count {
            let hdr = r.expect("entry")?;
            let f = kv_fields(&hdr);
            let name = kv_get(&f, "name").ok_or_else(|| r.err("name", "missing"))?.to_string();
            let first_task: usize = kv_get(&f, "first_task")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| r.err("first_task", "missing or invalid"))?;
            let source_tasks: BTreeSet<usize> = kv_get(&f, "source_tasks")
                .ok_or_else(|| r.err("source_tasks", "missing"))?
                .split(',')
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|_| r.err("source_tasks", format!("`{s}` is not an integer")))
                })
                .collect::<Result<_, _>>()?;
            if !source_tasks.contains(&first_task) {
                return Err(r.err("source_tasks", "must contain first_task"));
            }
            let embedding = r.floats(dim, "embedding")?;
            if vocab.entries.contains_key(&name) {
                return Err(r.err("name", format!("duplicate entry {name}")));
            }
            vocab.entries.insert(
                name.clone(),
                VocabEntry {
                    class_name: name,
                    embedding,
                    first_task,
                    source_tasks,
                },
            );
        }
        r.expect("end")?;
        Ok(vocab)
    }

    pub fn save(&self, path: &Path, format: FloatFormat) -> Result<(), VocabError> {
        fs::write(path, self.to_bytes(format)).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let bytes = fs::read(path).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_text(name: &str) -> Result<Vec<f64>, EncoderError> {
        let h = crate::util::fnv1a(name.as_bytes());
        Ok(vec![(h % 97) as f64 / 10.0, 1.0])
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn insert_contract() {
        let mut v = ClassVocabulary::new(2, 0.1);
        assert_eq!(v.ensure_entries(&names(&["a", "b"]), 1, fake_text).unwrap(), 2);
        assert_eq!(v.lookup("a").unwrap(), fake_text("a").unwrap().as_slice());
        v.momentum_update("a", &[5.0, 5.0]).unwrap();
        let before = v.lookup("a").unwrap().to_vec();
        assert_eq!(v.ensure_entries(&names(&["a", "c"]), 2, fake_text).unwrap(), 1);
        assert_eq!(v.lookup("a").unwrap(), before.as_slice());
        assert_eq!(v.entry("a").unwrap().source_tasks, BTreeSet::from([1, 2]));
        assert_eq!(v.entry("c").unwrap().first_task, 2);
        assert_eq!(v.ensure_entries(&[], 3, fake_text).unwrap(), 0);
    }

    #[test]
    fn momentum_examples() {
        let mut v = ClassVocabulary::new(2, 0.1);
        v.ensure_entries(&names(&["a"]), 1, |_| Ok(vec![1.0, 0.0])).unwrap();
        let out = v.momentum_update("a", &[0.0, 1.0]).unwrap().to_vec();
        assert!((out[0] - 0.9).abs() < 1e-15 && (out[1] - 0.1).abs() < 1e-15);
        let fixed = v.momentum_update("a", &out.clone()).unwrap().to_vec();
        assert_eq!(fixed, out);

        let mut full = ClassVocabulary::new(2, 1.0);
        full.ensure_entries(&names(&["a"]), 1, |_| Ok(vec![3.0, -1.0])).unwrap();
        assert_eq!(full.momentum_update("a", &[0.5, 0.25]).unwrap(), &[0.5, 0.25]);
    }

    #[test]
    fn unknown_name_errors() {
        let mut v = ClassVocabulary::new(2, 0.1);
        assert!(matches!(v.momentum_update("zz", &[0.0, 0.0]), Err(VocabError::MissingEntry(_))));
        assert!(v.lookup("zz").is_none());
    }

    #[test]
    fn persistence_roundtrip_exact() {
        let mut v = ClassVocabulary::new(2, 0.1);
        v.ensure_entries(&names(&["a", "b"]), 1, fake_text).unwrap();
        v.ensure_entries(&names(&["b"]), 3, fake_text).unwrap();
        v.momentum_update("b", &[0.123456789012345, -7.0]).unwrap();
        let back = ClassVocabulary::from_bytes(&v.to_bytes(FloatFormat::Decimal(17))).unwrap();
        assert_eq!(back, v);
        let nine = ClassVocabulary::from_bytes(&v.to_bytes(FloatFormat::Decimal(9))).unwrap();
        assert_eq!(nine.entry("b").unwrap().source_tasks, BTreeSet::from([1, 3]));
        assert!((nine.lookup("b").unwrap()[0] - v.lookup("b").unwrap()[0]).abs() < 1e-9);
    }
}
