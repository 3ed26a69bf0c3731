//! Per-task low-rank deltas on the text tower's attention projections.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::encoder::BackboneConfig;
use crate::tensor::Mat;
use crate::util::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AdapterTarget {
    Query,
    Key,
    Value,
    Output,
}

impl AdapterTarget {
    pub fn tag(self) -> &'static str {
        match self {
            AdapterTarget::Query => "q",
            AdapterTarget::Key => "k",
            AdapterTarget::Value => "v",
            AdapterTarget::Output => "o",
        }
    }
}

impl fmt::Display for AdapterTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for AdapterTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "q" => Ok(AdapterTarget::Query),
            "k" => Ok(AdapterTarget::Key),
            "v" => Ok(AdapterTarget::Value),
            "o" => Ok(AdapterTarget::Output),
            other => Err(format!("unknown adapter target `{other}` (expected q, k, v or o)")),
        }
    }
}

/// Parses a comma list such as `q,v`.
pub fn parse_targets(s: &str) -> Result<Vec<AdapterTarget>, String> {
    let mut out: Vec<AdapterTarget> = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(str::parse)
        .collect::<Result<_, _>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err("adapter target list is empty".into());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankPair {
    pub target: AdapterTarget,
    /// D × r
    pub down: Mat,
    /// r × D
    pub up: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankAdapter {
    pub task_index: usize,
    pub rank: usize,
    pub scale: f64,
    /// Outer index is the text-encoder layer.
    pub layers: Vec<Vec<LowRankPair>>,
}

impl LowRankAdapter {
    pub fn parameter_count(&self) -> usize {
        self.matrices().map(|m| m.data.len()).sum()
    }

    /// All matrices in a fixed order (layer, target, down then up).
    pub fn matrices(&self) -> impl Iterator<Item = &Mat> {
        self.layers.iter().flatten().flat_map(|p| [&p.down, &p.up])
    }

    pub fn matrices_mut(&mut self) -> impl Iterator<Item = &mut Mat> {
        self.layers.iter_mut().flatten().flat_map(|p| [&mut p.down, &mut p.up])
    }

    pub fn targets(&self) -> Vec<AdapterTarget> {
        self.layers
            .first()
            .map(|l| l.iter().map(|p| p.target).collect())
            .unwrap_or_default()
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().all(Mat::is_finite)
    }

    fn to_nodes(&self, g: &mut Graph, trainable: bool) -> AdapterNodes {
        let layers = self
            .layers
            .iter()
            .map(|pairs| LayerAdapterNodes {
                scale: self.scale,
                entries: pairs
                    .iter()
                    .map(|p| {
                        let (d, u) = if trainable {
                            (g.param(p.down.clone()), g.param(p.up.clone()))
                        } else {
                            (g.constant(p.down.clone()), g.constant(p.up.clone()))
                        };
                        (p.target, d, u)
                    })
                    .collect(),
            })
            .collect();
        AdapterNodes { layers }
    }

    pub fn trainable_nodes(&self, g: &mut Graph) -> AdapterNodes {
        self.to_nodes(g, true)
    }

    pub fn constant_nodes(&self, g: &mut Graph) -> AdapterNodes {
        self.to_nodes(g, false)
    }
}

#[derive(Debug, Clone)]
pub struct LayerAdapterNodes {
    pub scale: f64,
    pub entries: Vec<(AdapterTarget, NodeId, NodeId)>,
}

impl LayerAdapterNodes {
    pub(crate) fn get(&self, target: AdapterTarget) -> Option<(NodeId, NodeId, f64)> {
        self.entries
            .iter()
            .find(|(t, _, _)| *t == target)
            .map(|(_, d, u)| (*d, *u, self.scale))
    }
}

#[derive(Debug, Clone)]
pub struct AdapterNodes {
    pub layers: Vec<LayerAdapterNodes>,
}

impl AdapterNodes {
    /// Node ids in the same order as [`LowRankAdapter::matrices`].
    pub fn ids(&self) -> Vec<NodeId> {
        self.layers
            .iter()
            .flat_map(|l| l.entries.iter().flat_map(|(_, d, u)| [*d, *u]))
            .collect()
    }
}

/// Fresh adapter for task `t`: Gaussian `down` (std 0.02), zero `up`.
pub fn init_adapter(t: usize, rank: usize, targets: &[AdapterTarget], scale: f64, config: &BackboneConfig, seed: u64) -> LowRankAdapter {
    let dim = config.embed_dim;
    let mut rng = rng_for(&[seed, 0xada97e, t as u64]);
    let layers = (0..config.num_layers)
        .map(|_| {
            targets
                .iter()
                .map(|&target| LowRankPair {
                    target,
                    down: Mat::gaussian(dim, rank, 0.02, &mut rng),
                    up: Mat::zeros(rank, dim),
                })
                .collect()
        })
        .collect();
    LowRankAdapter {
        task_index: t,
        rank,
        scale,
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_shapes_and_zero_up() {
        let cfg = BackboneConfig::default();
        let a = init_adapter(2, 5, &[AdapterTarget::Query, AdapterTarget::Value], 1.0, &cfg, 3);
        assert_eq!(a.layers.len(), cfg.num_layers);
        assert_eq!(a.parameter_count(), cfg.num_layers * 2 * 2 * 5 * cfg.embed_dim);
        for p in a.layers.iter().flatten() {
            assert_eq!(p.down.shape(), (cfg.embed_dim, 5));
            assert!(p.up.data.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn target_parsing() {
        assert_eq!(parse_targets("v,q").unwrap(), vec![AdapterTarget::Query, AdapterTarget::Value]);
        assert!(parse_targets("x").is_err());
        assert!(parse_targets("").is_err());
    }
}
