//! Frozen pre-LN transformer blocks shared by both towers.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::encoder::adapter::{AdapterTarget, LayerAdapterNodes};
use crate::tensor::Mat;

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub w_up: Mat,
    pub w_down: Mat,
}

impl BlockWeights {
    pub(crate) fn random<R: Rng + ?Sized>(dim: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        let hidden = dim * mlp_ratio;
        Self {
            wq: Mat::gaussian(dim, dim, s, rng),
            wk: Mat::gaussian(dim, dim, s, rng),
            wv: Mat::gaussian(dim, dim, s, rng),
            wo: Mat::gaussian(dim, dim, s, rng),
            w_up: Mat::gaussian(dim, hidden, s, rng),
            w_down: Mat::gaussian(hidden, dim, 1.0 / (hidden as f64).sqrt(), rng),
        }
    }

    pub(crate) fn parameter_count(&self) -> usize {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w_up, &self.w_down]
            .iter()
            .map(|m| m.data.len())
            .sum()
    }

    fn weight(&self, target: AdapterTarget) -> &Mat {
        match target {
            AdapterTarget::Query => &self.wq,
            AdapterTarget::Key => &self.wk,
            AdapterTarget::Value => &self.wv,
            AdapterTarget::Output => &self.wo,
        }
    }
}

/// `h·W`, plus `(h·down)·up·scale` when an adapter targets this projection.
fn project(g: &mut Graph, h: NodeId, block: &BlockWeights, target: AdapterTarget, adapter: Option<&LayerAdapterNodes>) -> NodeId {
    let w = g.constant(block.weight(target).clone());
    let base = g.matmul(h, w);
    match adapter.and_then(|a| a.get(target)) {
        Some((down, up, scale)) => {
            let low = g.matmul(h, down);
            let delta = g.matmul(low, up);
            let delta = if scale == 1.0 { delta } else { g.scale(delta, scale) };
            g.add(base, delta)
        }
        None => base,
    }
}

/// One pre-LN block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
pub(crate) fn block_forward(
    g: &mut Graph,
    x: NodeId,
    block: &BlockWeights,
    heads: usize,
    mask: &Arc<[bool]>,
    adapter: Option<&LayerAdapterNodes>,
) -> NodeId {
    let dim = g.value(x).cols;
    let head_dim = dim / heads;
    let h = g.layer_norm(x, LN_EPS);
    let q = project(g, h, block, AdapterTarget::Query, adapter);
    let k = project(g, h, block, AdapterTarget::Key, adapter);
    let v = project(g, h, block, AdapterTarget::Value, adapter);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = g.slice_cols(q, hd * head_dim, head_dim);
        let kh = g.slice_cols(k, hd * head_dim, head_dim);
        let vh = g.slice_cols(v, hd * head_dim, head_dim);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scores = g.scale(scores, scale);
        let attn = g.masked_softmax(scores, mask);
        outs.push(g.matmul(attn, vh));
    }
    let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    let attn_out = project(g, merged, block, AdapterTarget::Output, adapter);
    let x = g.add(x, attn_out);
    let h2 = g.layer_norm(x, LN_EPS);
    let w_up = g.constant(block.w_up.clone());
    let hidden = g.matmul(h2, w_up);
    let hidden = g.gelu(hidden);
    let w_down = g.constant(block.w_down.clone());
    let mlp = g.matmul(hidden, w_down);
    g.add(x, mlp)
}
