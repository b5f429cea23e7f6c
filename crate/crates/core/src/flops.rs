//! Analytic forward FLOP counts (multiply and add counted separately).

use alloc::vec::Vec;

use crate::attention::BlockKind;
use crate::head::branch_widths;
use crate::model::{LayerSpec, Model, ModelConfig};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub embed: u64,
    /// `(original layer index, flops)`.
    pub layers: Vec<(usize, u64)>,
    pub head: u64,
    pub total: u64,
}

fn mm(m: usize, k: usize, n: usize) -> u64 {
    2 * (m * k * n) as u64
}

/// Self-attention of `n` queries over `m` keys across all heads.
fn attention(l: usize, n: usize, m: usize, dk: usize) -> u64 {
    l as u64 * (mm(n, dk, m) + mm(n, m, dk) + 5 * (n * m) as u64)
}

fn tiny_mlp(rows: usize, l: usize) -> u64 {
    mm(rows, l, 2 * l) + mm(rows, 2 * l, 2) + 10 * (rows * 2 * l) as u64
}

fn dense_tail(cfg: &ModelConfig, n: usize) -> u64 {
    let d = cfg.d_model;
    let h = cfg.mlp_ratio * d;
    // output projection, two norms, FFN with GELU, residuals
    mm(n, d, d) + 2 * 8 * (n * d) as u64 + mm(n, d, h) + mm(n, h, d) + 10 * (n * h) as u64 + 2 * (n * d) as u64
}

/// FLOPs of one block given the alive template count on entry; returns the
/// count and the alive template count on exit.
pub fn block_flops(cfg: &ModelConfig, layer: &LayerSpec, n_z: usize) -> (u64, usize) {
    let (d, l, dk, n_x) = (cfg.d_model, cfg.heads, cfg.d_k(), cfg.n_x());
    let n = n_z + n_x;
    let pre = 8 * (n * d) as u64 + mm(n, d, 3 * d);
    match layer.kind {
        BlockKind::Standard => (pre + attention(l, n, n, dk) + dense_tail(cfg, n), n_z),
        BlockKind::Dsa => {
            let keep = cfg.retained_after(layer.index).unwrap_or(n_z).min(n_z);
            let corr = l as u64 * mm(n_x, dk, n_z);
            let relevance = (l * n_x * n_z) as u64 + (l * n_z * n_z) as u64 + tiny_mlp(n_z * n_z, l) + 4 * (n_z * n_z) as u64;
            let semantic = 3 * (n_z * n_z) as u64 + l as u64 * mm(n_x, n_z, n_z) + mm(l, l, n_x * n_z);
            let importance = (l * n_x * n_z) as u64 + tiny_mlp(n_z, l);
            let hybrid = attention(l, keep, keep, dk)
                + attention(l, n_x, n_x, dk)
                + l as u64 * ((n_x * keep) as u64 + 5 * (n_x * keep) as u64 + mm(n_x, keep, dk))
                + (n_x * d) as u64;
            let total = pre + corr + relevance + semantic + importance + hybrid + dense_tail(cfg, keep + n_x);
            (total, keep)
        }
    }
}

pub fn forward_flops(cfg: &ModelConfig, layers: &[LayerSpec]) -> FlopReport {
    let (d, pd) = (cfg.d_model, cfg.patch_dim());
    let embed = mm(cfg.n_z() + cfg.n_x(), pd, d) + 2 * ((cfg.n_z() + cfg.n_x()) * d) as u64;
    let mut n_z = cfg.n_z();
    let mut per_layer = Vec::with_capacity(layers.len());
    for l in layers {
        let (f, next) = block_flops(cfg, l, n_z);
        per_layer.push((l.index, f));
        n_z = next;
    }
    let n_x = cfg.n_x();
    let mut head = 8 * (n_x * d) as u64;
    for out in [1, 2, 2] {
        let mut c_in = d;
        for c_out in branch_widths(d, out) {
            head += mm(n_x, 9 * c_in, c_out) + 2 * (n_x * c_out) as u64;
            c_in = c_out;
        }
    }
    let total = embed + per_layer.iter().map(|p| p.1).sum::<u64>() + head;
    FlopReport {
        embed,
        layers: per_layer,
        head,
        total,
    }
}

pub fn model_flops(model: &Model) -> FlopReport {
    forward_flops(model.config(), model.layers())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_layers(cfg: &ModelConfig) -> Vec<LayerSpec> {
        (1..=cfg.depth)
            .map(|index| LayerSpec {
                index,
                kind: cfg.kind_of(index),
            })
            .collect()
    }

    #[test]
    fn removing_a_layer_reduces_flops() {
        let cfg = ModelConfig::default();
        let full = all_layers(&cfg);
        let base = forward_flops(&cfg, &full).total;
        for skip in 1..=cfg.depth {
            let fewer: Vec<LayerSpec> = full.iter().copied().filter(|l| l.index != skip).collect();
            assert!(forward_flops(&cfg, &fewer).total < base, "layer {skip}");
        }
    }

    #[test]
    fn matmul_count() {
        assert_eq!(mm(2, 3, 4), 48);
    }
}
