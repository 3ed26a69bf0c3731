//! Character-level text tower.
//!
//! A class name becomes `[template, chars.., end]`. The template token plays
//! the part of a fixed prompt sentence around the class name; the embedding
//! is read out at the end token.

use crate::autodiff::{Graph, NodeId};
use crate::encoder::backbone::{block_forward, LN_EPS};
use crate::encoder::{AdapterNodes, AttentionMask, DualEncoder, EncoderError, LowRankAdapter};
use crate::tensor::Mat;

const TEMPLATE_TOKEN: usize = 0;
const END_TOKEN: usize = 1;
const FIRST_PRINTABLE: u8 = b' ';
const LAST_PRINTABLE: u8 = b'~';

/// Template + end + printable ASCII.
pub const TEXT_VOCAB_SIZE: usize = 2 + (LAST_PRINTABLE - FIRST_PRINTABLE + 1) as usize;

pub fn tokenize(name: &str, max_tokens: usize) -> Result<Vec<usize>, EncoderError> {
    let err = |reason: String| EncoderError::Tokenize {
        name: name.to_string(),
        reason,
    };
    if name.is_empty() {
        return Err(err("empty name".into()));
    }
    let mut tokens = Vec::with_capacity(name.len() + 2);
    tokens.push(TEMPLATE_TOKEN);
    for b in name.bytes() {
        if !(FIRST_PRINTABLE..=LAST_PRINTABLE).contains(&b) {
            return Err(err(format!("byte {b:#04x} is not printable ASCII")));
        }
        tokens.push(2 + (b - FIRST_PRINTABLE) as usize);
    }
    tokens.push(END_TOKEN);
    if tokens.len() > max_tokens {
        return Err(err(format!("{} tokens exceed max_text_tokens {max_tokens}", tokens.len())));
    }
    Ok(tokens)
}

impl DualEncoder {
    /// Records the text tower for `name`; returns the `1×D` embedding node.
    pub fn text_graph(&self, g: &mut Graph, name: &str, adapter: Option<&AdapterNodes>) -> Result<NodeId, EncoderError> {
        let tokens = tokenize(name, self.config.max_text_tokens)?;
        let d = self.embed_dim();
        let mut seq = Mat::zeros(tokens.len(), d);
        for (r, tok) in tokens.iter().enumerate() {
            for c in 0..d {
                seq.set(r, c, self.token_emb.get(*tok, c) + self.text_pos.get(r, c));
            }
        }
        if let Some(a) = adapter {
            if a.layers.len() != self.text_blocks.len() {
                return Err(EncoderError::Dimension {
                    context: "adapter layers",
                    expected: self.text_blocks.len(),
                    found: a.layers.len(),
                });
            }
        }
        let mask = AttentionMask::causal(tokens.len()).shared();
        let mut x = g.constant(seq);
        for (l, block) in self.text_blocks.iter().enumerate() {
            let layer = adapter.map(|a| &a.layers[l]);
            x = block_forward(g, x, block, self.config.num_heads, &mask, layer);
        }
        let last = g.slice_rows(x, tokens.len() - 1, 1);
        let last = g.layer_norm(last, LN_EPS);
        let head = g.constant(self.text_head.clone());
        Ok(g.matmul(last, head))
    }

    /// `f_t(y)`: the frozen text embedding, no adapter involved.
    pub fn frozen_text_embedding(&self, name: &str) -> Result<Vec<f64>, EncoderError> {
        let mut g = Graph::new();
        let out = self.text_graph(&mut g, name, None)?;
        Ok(g.value(out).data.clone())
    }

    /// `g_t(y)`: the text embedding with the adapter's low-rank deltas.
    pub fn adapted_text_embedding(&self, name: &str, adapter: &LowRankAdapter) -> Result<Vec<f64>, EncoderError> {
        let mut g = Graph::new();
        let nodes = adapter.constant_nodes(&mut g);
        let out = self.text_graph(&mut g, name, Some(&nodes))?;
        Ok(g.value(out).data.clone())
    }
}
