//! Finite-difference checks of every differentiable stage on small random
//! instances (`N_x = 16`, `N_z = 8`, three heads).

use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{block_forward, ffn_residual, hybrid_attention, BlockContext, BlockKind, BlockVars, DsaVars, TokenSet};
use crate::correlation::correlation_logits;
use crate::error::Result;
use crate::head::{gaussian_target, giou_loss_var, head_forward, l1_loss_var, BBox, HeadVars, FOCAL_ALPHA, FOCAL_BETA};
use crate::numerics::{finite_difference_gradient, GradTape, RngStream, Tensor, Var};
use crate::relevance::{
    gumbel_noise, node_similarity_var, pool_nodes_var, relevance_logits_var, sample_keep, MlpVars, RelevanceKind, SampleMode,
};
use crate::semantic::{normalize_adjacency_var, semantic_correlation_var, DegreeMode};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, for inputs with no gradient.
pub const FLOOR: f64 = 1e-6;

/// Heads of the checked instances.
pub const L: usize = 3;
const DK: usize = 4;
/// Token width.
pub const D: usize = L * DK;
pub const NX: usize = 16;
pub const NZ: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    /// Number of checked scalar coordinates.
    pub coordinates: usize,
    pub max_rel_error: f64,
}

fn normal(shape: &[usize], std: f64, rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| std * rng.normal()).collect()).expect("positive extents")
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.range(lo, hi)).collect()).expect("positive extents")
}

/// `max |a - n|` over the input, relative to the largest gradient magnitude
/// of that input.
pub fn scaled_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    if analytic.shape() != numeric.shape() {
        return f64::INFINITY;
    }
    let scale = analytic.max_abs().max(numeric.max_abs()).max(FLOOR);
    analytic.max_abs_diff(numeric) / scale
}

/// Compares the tape gradient of `sum(build(inputs) * r)` for a fixed random
/// `r` against central differences, for every input coordinate.
pub fn check<F>(name: &'static str, inputs: &[Tensor], seed: u64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let weights = normal(tape.shape(out), 1.0, &mut RngStream::new(seed ^ 0x5eed));
    let scalarize = |tape: &mut GradTape, out: Var| -> Result<Var> {
        let w = tape.constant(weights.clone());
        let p = tape.mul(out, w)?;
        tape.sum(p)
    };
    let loss = scalarize(&mut tape, out)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numeric = finite_difference_gradient(
            |probe| {
                let mut t = GradTape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, v)| t.constant(if j == i { probe.clone() } else { v.clone() }))
                    .collect();
                let out = build(&mut t, &vs)?;
                let l = scalarize(&mut t, out)?;
                t.value(l).item()
            },
            x,
            STEP,
        )?;
        worst = worst.max(scaled_error(&analytic, &numeric));
        coordinates += x.len();
    }
    Ok(GradCheck {
        name,
        coordinates,
        max_rel_error: worst,
    })
}

/// Block parameters in binding order: two norms, qkv, proj, fc1, fc2, then
/// the edge MLP, token MLP and head mixer for semantic-aware blocks.
pub fn block_params(dsa: bool, rng: &mut RngStream) -> Vec<Tensor> {
    let h = 2 * D;
    let mut v = vec![
        uniform(&[D], 0.8, 1.2, rng),
        normal(&[D], 0.1, rng),
        normal(&[D, 3 * D], 0.3, rng),
        normal(&[3 * D], 0.1, rng),
        normal(&[D, D], 0.3, rng),
        normal(&[D], 0.1, rng),
        uniform(&[D], 0.8, 1.2, rng),
        normal(&[D], 0.1, rng),
        normal(&[D, h], 0.3, rng),
        normal(&[h], 0.1, rng),
        normal(&[h, D], 0.3, rng),
        normal(&[D], 0.1, rng),
    ];
    if dsa {
        v[2] = normal(&[D, 3 * D], 0.6, rng);
        for _ in 0..2 {
            v.push(normal(&[L, 2 * L], 1.0, rng));
            v.push(normal(&[2 * L], 0.1, rng));
            v.push(normal(&[2 * L, 2], 1.0, rng));
            v.push(normal(&[2], 0.1, rng));
        }
        let mut w = Tensor::eye(L);
        for x in w.data_mut() {
            *x += 0.2 * rng.normal();
        }
        v.push(w);
    }
    v
}

/// Binds [`block_params`] tape nodes to block fields.
pub fn bind_block(v: &[Var]) -> BlockVars {
    let mlp = |s: &[Var]| MlpVars {
        w1: s[0],
        b1: s[1],
        w2: s[2],
        b2: s[3],
    };
    BlockVars {
        norm1: (v[0], v[1]),
        qkv: (v[2], v[3]),
        proj: (v[4], v[5]),
        norm2: (v[6], v[7]),
        fc1: (v[8], v[9]),
        fc2: (v[10], v[11]),
        dsa: (v.len() > 12).then(|| DsaVars {
            edge_mlp: mlp(&v[12..16]),
            token_mlp: mlp(&v[16..20]),
            mixer: v[20],
        }),
    }
}

fn context<'r>(mode: SampleMode, rng: Option<&'r mut RngStream>) -> BlockContext<'r> {
    BlockContext {
        heads: L,
        eps: 1e-6,
        tau: 0.7,
        mode,
        relevance: RelevanceKind::Dynamic,
        degree: DegreeMode::SelfLoop,
        template_grid: (2, 2),
        rng,
    }
}

/// Runs every check with inputs drawn from `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = RngStream::new(seed);
    let mut out = Vec::new();

    let q = normal(&[L, NX, DK], 1.0, &mut rng);
    let k = normal(&[L, NZ, DK], 1.0, &mut rng);
    out.push(check("correlation_map", &[q, k], seed, |t, v| {
        correlation_logits(t, v[0], v[1])
    })?);

    let e = uniform(&[NZ, NZ], 0.1, 0.9, &mut rng);
    let c = normal(&[L, NX, NZ], 1.0, &mut rng);
    let w = normal(&[L, L], 0.5, &mut rng);
    out.push(check("normalized_semantic_correlation", &[e, c.clone(), w], seed, |t, v| {
        let a = normalize_adjacency_var(t, v[0], DegreeMode::SelfLoop)?;
        semantic_correlation_var(t, a, v[1], v[2])
    })?);

    let logits = normal(&[NZ, NZ, 2], 1.0, &mut rng);
    let noise = gumbel_noise(&[NZ, NZ, 2], &mut rng);
    out.push(check("gumbel_soft_relaxation", &[logits], seed, |t, v| {
        Ok(sample_keep(t, v[0], 0.7, SampleMode::Soft, Some(&noise))?.0)
    })?);

    let mlp = [
        normal(&[L, 2 * L], 0.6, &mut rng),
        normal(&[2 * L], 0.1, &mut rng),
        normal(&[2 * L, 2], 0.6, &mut rng),
        normal(&[2], 0.1, &mut rng),
    ];
    let mut inputs = vec![c.clone()];
    inputs.extend(mlp.iter().cloned());
    out.push(check("relevance_generator", &inputs, seed, |t, v| {
        let pooled = pool_nodes_var(t, v[0])?;
        let a = node_similarity_var(t, pooled)?;
        let m = MlpVars {
            w1: v[1],
            b1: v[2],
            w2: v[3],
            b2: v[4],
        };
        let pi = relevance_logits_var(t, a, &m)?;
        Ok(sample_keep(t, pi, 0.7, SampleMode::Soft, Some(&noise))?.0)
    })?);

    let tokens = normal(&[NZ + NX, D], 1.0, &mut rng);
    let c2 = normal(&[L, NX, NZ], 1.0, &mut rng);
    let mut inputs = vec![tokens.clone(), c.clone(), c2];
    inputs.extend(block_params(false, &mut rng));
    out.push(check("hybrid_attention", &inputs, seed, |t, v| {
        let set = TokenSet::new(v[0], NZ, NX);
        let vars = bind_block(&v[3..]);
        Ok(hybrid_attention(t, &set, &vars, v[1], v[2], &context(SampleMode::Deterministic, None))?.tokens)
    })?);

    let mut inputs = vec![tokens.clone()];
    inputs.extend(block_params(false, &mut rng));
    out.push(check("ffn", &inputs, seed, |t, v| {
        ffn_residual(t, v[0], &bind_block(&v[1..]), 1e-6)
    })?);

    let mut inputs = vec![tokens];
    inputs.extend(block_params(true, &mut rng));
    let block_seed = rng.next_u64();
    out.push(check("dsa_block_soft", &inputs, seed, |t, v| {
        let set = TokenSet::new(v[0], NZ, NX);
        let vars = bind_block(&v[1..]);
        let mut noise_rng = RngStream::new(block_seed);
        let mut ctx = context(SampleMode::Soft, Some(&mut noise_rng));
        Ok(block_forward(t, &set, &vars, BlockKind::Dsa, Some(6), &mut ctx)?.0.tokens)
    })?);

    let grid = (4, 4);
    let search = normal(&[grid.0 * grid.1, D], 1.0, &mut rng);
    let mut inputs = vec![search, uniform(&[D], 0.8, 1.2, &mut rng), normal(&[D], 0.1, &mut rng)];
    let widths = crate::head::branch_widths(D, 2);
    for out_w in [1, 2, 2] {
        let mut c_in = D;
        for c_out in crate::head::branch_widths(D, out_w) {
            inputs.push(normal(&[9 * c_in, c_out], 0.3, &mut rng));
            inputs.push(normal(&[c_out], 0.1, &mut rng));
            c_in = c_out;
        }
    }
    let per = 2 * widths.len();
    out.push(check("prediction_head", &inputs, seed, |t, v| {
        let mut branches: [Vec<(Var, Var)>; 3] = Default::default();
        for (b, slot) in branches.iter_mut().enumerate() {
            let s = &v[3 + b * per..3 + (b + 1) * per];
            *slot = s.chunks(2).map(|p| (p[0], p[1])).collect();
        }
        let vars = HeadVars {
            norm: (v[1], v[2]),
            branches,
        };
        let maps = head_forward(t, v[0], &vars, grid, 1e-6)?;
        let s = t.reshape(maps.score_logits, &[grid.0 * grid.1])?;
        let o = t.reshape(maps.offset, &[grid.0 * grid.1 * 2])?;
        let z = t.reshape(maps.size, &[grid.0 * grid.1 * 2])?;
        t.concat(&[s, o, z], 0)
    })?);

    let gt = BBox::new(0.52, 0.47, 0.22, 0.3)?;
    let pred = Tensor::new(&[4], vec![0.43, 0.55, 0.31, 0.18])?;
    out.push(check("l1_loss", core::slice::from_ref(&pred), seed, |t, v| {
        l1_loss_var(t, v[0], &gt)
    })?);
    out.push(check("giou_loss", &[pred], seed, |t, v| giou_loss_var(t, v[0], &gt))?);

    let target = gaussian_target(&gt, grid, 1.0).reshape(&[grid.0 * grid.1])?;
    let logits = normal(&[grid.0 * grid.1], 1.5, &mut rng);
    out.push(check("focal_loss", &[logits], seed, |t, v| {
        t.focal_loss(v[0], &target, FOCAL_ALPHA, FOCAL_BETA)
    })?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for c in (1..=3).flat_map(|s| gradient_suite(s).unwrap()) {
            assert!(c.max_rel_error < 1e-4, "{c:?}");
            assert!(c.coordinates > 0);
        }
    }
}
