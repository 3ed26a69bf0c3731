//! Versioned experiment checkpoint: backbone config, every task prompt and
//! every low-rank adapter, plus free-form metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::codec::{kv_fields, kv_get, CodecError, FloatFormat, RecordReader, RecordWriter};
use crate::encoder::{parse_targets, BackboneConfig, LowRankAdapter, LowRankPair, TaskPrompt, TaskPromptBank};
use crate::stream::ImageShape;
use crate::tensor::Mat;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "odcl-checkpoint";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint parse error: {0}")]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub backbone: BackboneConfig,
    pub image_shape: ImageShape,
    pub prompts: TaskPromptBank,
    pub adapters: Vec<LowRankAdapter>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_bytes(&self, format: FloatFormat) -> Vec<u8> {
        let b = &self.backbone;
        let mut w = RecordWriter::new(format);
        w.line(format!("{MAGIC} {CHECKPOINT_VERSION}"));
        w.line(format!("float_format {format}"));
        w.line(format!(
            "backbone embed_dim={} num_layers={} num_heads={} patch_size={} max_text_tokens={} mlp_ratio={} seed={}",
            b.embed_dim, b.num_layers, b.num_heads, b.patch_size, b.max_text_tokens, b.mlp_ratio, b.seed
        ));
        let s = self.image_shape;
        w.line(format!("image_shape {} {} {}", s.height, s.width, s.channels));
        for (k, v) in &self.meta {
            w.line(format!("meta {k} {v}"));
        }
        w.line(format!("prompts {}", self.prompts.len()));
        for p in &self.prompts.prompts {
            w.line(format!(
                "prompt task={} rows={} cols={} frozen={}",
                p.task_index, p.vectors.rows, p.vectors.cols, p.frozen
            ));
            w.floats(&p.vectors.data);
        }
        w.line(format!("adapters {}", self.adapters.len()));
        for a in &self.adapters {
            let targets: Vec<&str> = a.targets().iter().map(|t| t.tag()).collect();
            w.line(format!(
                "adapter task={} rank={} scale={} layers={} targets={}",
                a.task_index,
                a.rank,
                crate::util::fmt_sig(a.scale, 17),
                a.layers.len(),
                targets.join(",")
            ));
            for (l, pairs) in a.layers.iter().enumerate() {
                for p in pairs {
                    w.line(format!(
                        "lowrank layer={l} target={} down={}x{} up={}x{}",
                        p.target, p.down.rows, p.down.cols, p.up.rows, p.up.cols
                    ));
                    w.floats(&p.down.data);
                    w.floats(&p.up.data);
                }
            }
        }
        w.line("end");
        w.finish()
    }

    pub fn save(&self, path: &Path, format: FloatFormat) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes(format)).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(Self::from_bytes(&bytes)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = RecordReader::new(bytes, "float_format")?;
        let version = r.expect(MAGIC)?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(r.err(MAGIC, format!("unsupported checkpoint version {version}")));
        }
        r.expect("float_format")?;
        let bb = r.expect("backbone")?;
        let f = kv_fields(&bb);
        let num = |r: &RecordReader, key: &str| -> Result<u64, CodecError> {
            kv_get(&f, key)
                .ok_or_else(|| r.err(key, "missing"))?
                .parse()
                .map_err(|_| r.err(key, "not an integer"))
        };
        let backbone = BackboneConfig {
            embed_dim: num(&r, "embed_dim")? as usize,
            num_layers: num(&r, "num_layers")? as usize,
            num_heads: num(&r, "num_heads")? as usize,
            patch_size: num(&r, "patch_size")? as usize,
            max_text_tokens: num(&r, "max_text_tokens")? as usize,
            mlp_ratio: num(&r, "mlp_ratio")? as usize,
            seed: num(&r, "seed")?,
        };
        let shape = r.expect("image_shape")?;
        let dims: Vec<usize> = shape
            .split_whitespace()
            .map(|d| d.parse().map_err(|_| r.err("image_shape", "not an integer")))
            .collect::<Result<_, _>>()?;
        if dims.len() != 3 {
            return Err(r.err("image_shape", "expected H W C"));
        }
        let image_shape = ImageShape::new(dims[0], dims[1], dims[2]);

        let mut meta = BTreeMap::new();
        let mut line = r.next_line().ok_or_else(|| r.err("prompts", "unexpected end of file"))?;
        while let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            meta.insert(k.to_string(), v.to_string());
            line = r.next_line().ok_or_else(|| r.err("prompts", "unexpected end of file"))?;
        }
        let count: usize = line
            .strip_prefix("prompts ")
            .ok_or_else(|| r.err("prompts", format!("expected `prompts`, found `{line}`")))?
            .trim()
            .parse()
            .map_err(|_| r.err("prompts", "not an integer"))?;
        let mut prompts = TaskPromptBank::new();
        for _ in 0..count {
            let hdr = r.expect("prompt")?;
            let f = kv_fields(&hdr);
            let get = |key: &str| kv_get(&f, key).ok_or_else(|| r.err(key, "missing"));
            let task_index: usize = get("task")?.parse().map_err(|_| r.err("task", "not an integer"))?;
            let rows: usize = get("rows")?.parse().map_err(|_| r.err("rows", "not an integer"))?;
            let cols: usize = get("cols")?.parse().map_err(|_| r.err("cols", "not an integer"))?;
            let frozen: bool = get("frozen")?.parse().map_err(|_| r.err("frozen", "not a bool"))?;
            if task_index != prompts.len() + 1 {
                return Err(r.err("task", "prompt indices must be consecutive from 1"));
            }
            let data = r.floats(rows * cols, "prompt")?;
            prompts.prompts.push(TaskPrompt {
                task_index,
                vectors: Mat::from_vec(rows, cols, data),
                frozen,
            });
        }
        let count: usize = r.expect("adapters")?.parse().map_err(|_| r.err("adapters", "not an integer"))?;
        let mut adapters = Vec::with_capacity(count);
        for _ in 0..count {
            let hdr = r.expect("adapter")?;
            let f = kv_fields(&hdr);
            let get = |key: &str| kv_get(&f, key).ok_or_else(|| r.err(key, "missing"));
            let task_index: usize = get("task")?.parse().map_err(|_| r.err("task", "not an integer"))?;
            let rank: usize = get("rank")?.parse().map_err(|_| r.err("rank", "not an integer"))?;
            let scale: f64 = get("scale")?.parse().map_err(|_| r.err("scale", "not a number"))?;
            let layers: usize = get("layers")?.parse().map_err(|_| r.err("layers", "not an integer"))?;
            let targets = parse_targets(get("targets")?).map_err(|m| r.err("targets", m))?;
            let mut all = Vec::with_capacity(layers);
            for _ in 0..layers {
                let mut pairs = Vec::with_capacity(targets.len());
                for &target in &targets {
                    let hdr = r.expect("lowrank")?;
                    let f = kv_fields(&hdr);
                    if kv_get(&f, "target") != Some(target.tag()) {
                        return Err(r.err("target", format!("expected target {target}")));
                    }
                    let dim = backbone.embed_dim;
                    let down = Mat::from_vec(dim, rank, r.floats(dim * rank, "down")?);
                    let up = Mat::from_vec(rank, dim, r.floats(rank * dim, "up")?);
                    pairs.push(LowRankPair { target, down, up });
                }
                all.push(pairs);
            }
            adapters.push(LowRankAdapter {
                task_index,
                rank,
                scale,
                layers: all,
            });
        }
        r.expect("end")?;
        Ok(Self {
            backbone,
            image_shape,
            prompts,
            adapters,
            meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_adapter, init_task_prompt, AdapterTarget};

    fn sample() -> Checkpoint {
        let backbone = BackboneConfig {
            embed_dim: 8,
            ..Default::default()
        };
        let mut prompts = TaskPromptBank::new();
        prompts.push(init_task_prompt(1, 1, 8, 1));
        prompts.push(init_task_prompt(2, 1, 8, 1));
        let mut a = init_adapter(1, 2, &[AdapterTarget::Query, AdapterTarget::Value], 1.0, &backbone, 1);
        a.layers[0][0].up.data[3] = 0.125;
        let mut meta = BTreeMap::new();
        meta.insert("method".into(), "coleclip".into());
        Checkpoint {
            backbone,
            image_shape: ImageShape::new(16, 16, 3),
            prompts,
            adapters: vec![a],
            meta,
        }
    }

    #[test]
    fn exact_roundtrip_with_17_digits() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes(FloatFormat::Decimal(17))).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn binary32_roundtrip_within_f32() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes(FloatFormat::Binary32)).unwrap();
        assert_eq!(back.meta, c.meta);
        let d = back.prompts.prompts[1].vectors.max_abs_diff(&c.prompts.prompts[1].vectors);
        assert!(d < 1e-8);
        assert_eq!(back.adapters[0].layers[0][0].up.data[3], 0.125);
    }

    #[test]
    fn truncated_file_is_error() {
        let bytes = sample().to_bytes(FloatFormat::Decimal(9));
        let cut = &bytes[..bytes.len() / 2];
        assert!(Checkpoint::from_bytes(cut).is_err());
    }
}
