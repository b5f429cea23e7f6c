//! Transformer blocks over concatenated `[template; search]` tokens.
//!
//! A standard block is pre-norm joint self-attention plus FFN. A semantic-aware
//! block replaces joint attention with: correlation map, relevance graph,
//! graph-refined correlation, template-token elimination, and hybrid attention
//! (template self-attention, search self-attention, and cross-attention whose
//! logits are the raw plus refined correlation).

mod backbone;
mod block;
mod importance;

pub use backbone::{backbone_forward, BackboneOutput, LayerPlan};
pub use block::{
    attention, block_forward, cross_attention, ffn_residual, hybrid_attention, hybrid_attention_masked, merge_heads,
    project_heads, BlockContext, BlockKind, BlockTrace, BlockVars, DsaVars,
};
pub use importance::{token_importance, token_importance_logits, top_k_keep, Importance};

use alloc::vec::Vec;

use crate::numerics::Var;

/// Tokens flowing through the backbone: alive template rows first, then
/// search rows.
#[derive(Clone, Debug)]
pub struct TokenSet {
    /// `[n_z + n_x, d_model]`.
    pub tokens: Var,
    pub n_z: usize,
    pub n_x: usize,
    /// Original template positions of the alive rows, strictly increasing.
    pub alive: Vec<usize>,
    pub n_z_original: usize,
    /// Original index of the last block applied; 0 before the first block.
    pub layer: usize,
    /// Training only: soft keep weights over the alive template rows.
    pub key_mask: Option<Var>,
}

impl TokenSet {
    pub fn new(tokens: Var, n_z: usize, n_x: usize) -> Self {
        Self {
            tokens,
            n_z,
            n_x,
            alive: (0..n_z).collect(),
            n_z_original: n_z,
            layer: 0,
            key_mask: None,
        }
    }

    pub fn len(&self) -> usize {
        self.n_z + self.n_x
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
