use alloc::format;
use alloc::vec::Vec;

use super::block::{block_forward, BlockContext, BlockKind, BlockTrace, BlockVars};
use super::TokenSet;
use crate::error::{Error, Result};
use crate::numerics::{GradTape, Tensor};

/// One block of the stack as the backbone sees it.
#[derive(Clone, Debug)]
pub struct LayerPlan<'a> {
    /// Original (1-based) position in the unpruned stack.
    pub index: usize,
    pub kind: BlockKind,
    /// Template-token budget after this block.
    pub keep: Option<usize>,
    pub vars: &'a BlockVars,
}

#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub tokens: TokenSet,
    /// Hidden states before the first block and after every block, each
    /// `[n_z_original + n_x, d]`. Rows of dropped template tokens keep their
    /// value from the block that dropped them.
    pub hidden: Option<Vec<Tensor>>,
    pub traces: Vec<BlockTrace>,
}

fn scatter_rows(prev: &Tensor, set: &TokenSet, current: &Tensor) -> Tensor {
    let d = prev.shape()[1];
    let mut out = prev.clone();
    let dst = out.data_mut();
    let src = current.data();
    for (r, &orig) in set.alive.iter().enumerate() {
        dst[orig * d..(orig + 1) * d].copy_from_slice(&src[r * d..(r + 1) * d]);
    }
    let (s0, d0) = (set.n_z * d, set.n_z_original * d);
    dst[d0..].copy_from_slice(&src[s0..]);
    out
}

/// Runs the stack in order, threading the token set through every block.
pub fn backbone_forward(
    tape: &mut GradTape,
    tokens: TokenSet,
    layers: &[LayerPlan<'_>],
    ctx: &mut BlockContext<'_>,
    record_hidden: bool,
) -> Result<BackboneOutput> {
    if tokens.n_z != tokens.n_z_original {
        return Err(Error::invalid(format!(
            "backbone input already reduced: {} of {} template tokens",
            tokens.n_z, tokens.n_z_original
        )));
    }
    let mut hidden = record_hidden.then(|| alloc::vec![tape.value(tokens.tokens).clone()]);
    let mut traces = Vec::with_capacity(layers.len());
    let mut set = tokens;
    let mut last = 0;
    for plan in layers {
        if plan.index <= last {
            return Err(Error::invalid(format!("layer {} follows layer {last}", plan.index)));
        }
        last = plan.index;
        let (mut next, trace) = block_forward(tape, &set, plan.vars, plan.kind, plan.keep, ctx)?;
        next.layer = plan.index;
        if let Some(h) = hidden.as_mut() {
            let row = scatter_rows(h.last().expect("seeded"), &next, tape.value(next.tokens));
            h.push(row);
        }
        traces.push(trace);
        set = next;
    }
    Ok(BackboneOutput {
        tokens: set,
        hidden,
        traces,
    })
}
