use std::sync::Arc;

/// Query/key admissibility for the prompted image sequence.
///
/// Rows are queries, columns are keys, token layout is
/// `[prompt_1 .. prompt_t | cls | patch_1 .. patch_N]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub size: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn get(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }

    pub fn false_count(&self) -> usize {
        self.allowed.iter().filter(|a| !**a).count()
    }

    pub fn all_true(size: usize) -> Self {
        Self {
            size,
            allowed: vec![true; size * size],
        }
    }

    /// Lower-triangular (inclusive) mask used by the text encoder.
    pub fn causal(size: usize) -> Self {
        let allowed = (0..size * size).map(|k| k % size <= k / size).collect();
        Self { size, allowed }
    }

    pub(crate) fn shared(&self) -> Arc<[bool]> {
        self.allowed.clone().into()
    }
}

/// Mask for `prompts` task prompts ahead of a class token and `patches`
/// patch tokens.
///
/// Prompt `i` sees prompts `1..=i` and every image token; image tokens see
/// each other and never any prompt.
pub fn build_attention_mask(prompts: usize, patches: usize) -> AttentionMask {
    let size = prompts + patches + 1;
    let mut allowed = vec![false; size * size];
    for q in 0..size {
        for k in 0..size {
            allowed[q * size + k] = if q < prompts { k >= prompts || k <= q } else { k >= prompts };
        }
    }
    AttentionMask { size, allowed }
}
