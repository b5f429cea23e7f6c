use alloc::format;
use alloc::vec::Vec;

use super::importance::{token_importance, Importance};
use super::TokenSet;
use crate::correlation::correlation_logits;
use crate::error::{Error, Result};
use crate::numerics::{math, GradTape, RngStream, Tensor, Var};
use crate::relevance::{
    gumbel_noise, node_similarity_var, pool_nodes_var, relevance_logits_var, sample_keep, static_grid_relevance, MlpVars,
    RelevanceKind, SampleMode,
};
use crate::semantic::{normalize_adjacency_var, semantic_correlation_var, DegreeMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    /// Joint self-attention over all tokens.
    Standard,
    /// Semantic-aware hybrid attention with template-token elimination.
    Dsa,
}

/// Block parameters bound to tape nodes. Weights are `[in, out]`.
#[derive(Clone, Debug)]
pub struct BlockVars {
    pub norm1: (Var, Var),
    pub qkv: (Var, Var),
    pub proj: (Var, Var),
    pub norm2: (Var, Var),
    pub fc1: (Var, Var),
    pub fc2: (Var, Var),
    pub dsa: Option<DsaVars>,
}

#[derive(Clone, Debug)]
pub struct DsaVars {
    pub edge_mlp: MlpVars,
    pub token_mlp: MlpVars,
    /// `[l, l]` head mixer.
    pub mixer: Var,
}

/// Settings shared by every block of one forward pass.
pub struct BlockContext<'r> {
    pub heads: usize,
    pub eps: f64,
    pub tau: f64,
    /// `Deterministic` at inference; a sampling mode in training.
    pub mode: SampleMode,
    pub relevance: RelevanceKind,
    pub degree: DegreeMode,
    /// `(h_z, w_z)` patch grid of one template.
    pub template_grid: (usize, usize),
    /// Gumbel noise source; `None` means zero noise.
    pub rng: Option<&'r mut RngStream>,
}

impl BlockContext<'_> {
    pub fn inference(heads: usize, template_grid: (usize, usize)) -> Self {
        BlockContext {
            heads,
            eps: 1e-6,
            tau: 1.0,
            mode: SampleMode::Deterministic,
            relevance: RelevanceKind::Dynamic,
            degree: DegreeMode::SelfLoop,
            template_grid,
            rng: None,
        }
    }

    fn noise(&mut self, shape: &[usize]) -> Option<Tensor> {
        if self.mode == SampleMode::Deterministic {
            return None;
        }
        self.rng.as_deref_mut().map(|r| gumbel_noise(shape, r))
    }
}

/// Intermediate tensors of one semantic-aware block.
#[derive(Clone, Debug, Default)]
pub struct BlockTrace {
    /// `[l, N_x, N_z]` before elimination.
    pub correlation: Option<Var>,
    /// `[l, N_x, N_z]` graph-refined map before elimination.
    pub refined: Option<Var>,
    /// `[N_z, N_z]` relevance edges.
    pub edges: Option<Var>,
    /// Original template positions alive after the block.
    pub kept: Vec<usize>,
}

fn linear(tape: &mut GradTape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_broadcast(y, b)
}

/// `[N, d] -> (q, k, v)`, each `[l, N, d / l]`.
pub fn project_heads(tape: &mut GradTape, h: Var, qkv: (Var, Var), heads: usize) -> Result<(Var, Var, Var)> {
    let s = tape.shape(h).to_vec();
    if s.len() != 2 || heads == 0 || !s[1].is_multiple_of(heads) {
        return Err(Error::shape("project_heads", format!("{s:?} with {heads} heads")));
    }
    let (n, d) = (s[0], s[1]);
    let dk = d / heads;
    let y = linear(tape, h, qkv)?;
    let y = tape.reshape(y, &[n, 3, heads, dk])?;
    let y = tape.permute(y, &[1, 2, 0, 3])?;
    let mut out = [y; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let part = tape.select(y, 0, &[i])?;
        *o = tape.reshape(part, &[heads, n, dk])?;
    }
    Ok((out[0], out[1], out[2]))
}

/// `[l, N, d_k] -> [N, l * d_k]`.
pub fn merge_heads(tape: &mut GradTape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("merge_heads", format!("{s:?}")));
    }
    let y = tape.permute(x, &[1, 0, 2])?;
    tape.reshape(y, &[s[1], s[0] * s[2]])
}

/// Scaled dot-product attention per head; `key_mask` weights the keys.
pub fn attention(tape: &mut GradTape, q: Var, k: Var, v: Var, key_mask: Option<Var>) -> Result<Var> {
    let dk = *tape
        .shape(q)
        .last()
        .ok_or_else(|| Error::shape("attention", "scalar query"))?;
    let s = tape.matmul_bt(q, k)?;
    let s = tape.scale(s, 1.0 / math::sqrt(dk as f64))?;
    let p = match key_mask {
        Some(m) => tape.masked_softmax(s, m)?,
        None => tape.softmax(s)?,
    };
    tape.matmul(p, v)
}

/// `x + W2 gelu(W1 LN(x))`.
pub fn ffn_residual(tape: &mut GradTape, x: Var, vars: &BlockVars, eps: f64) -> Result<Var> {
    let h = tape.layer_norm(x, vars.norm2.0, vars.norm2.1, eps)?;
    let h = linear(tape, h, vars.fc1)?;
    let h = tape.gelu(h)?;
    let h = linear(tape, h, vars.fc2)?;
    tape.add(x, h)
}

/// Search-to-template attention `softmax(c_prime + c) v_z`, per head.
pub fn cross_attention(tape: &mut GradTape, c: Var, c_prime: Var, vz: Var, mask: Option<Var>) -> Result<Var> {
    let logits = tape.add(c_prime, c)?;
    let p = match mask {
        Some(m) => tape.masked_softmax(logits, m)?,
        None => tape.softmax(logits)?,
    };
    tape.matmul(p, vz)
}

/// Hybrid attention on projected heads; returns merged heads `[N, d]`
/// before the output projection.
fn hybrid_core(
    tape: &mut GradTape,
    (q, k, v): (Var, Var, Var),
    n_z: usize,
    c: Var,
    c_prime: Var,
    mask: Option<Var>,
) -> Result<Var> {
    let n = tape.shape(q)[1];
    let n_x = n - n_z;
    let want = [tape.shape(q)[0], n_x, n_z];
    if tape.shape(c) != want || tape.shape(c_prime) != want {
        return Err(Error::shape(
            "hybrid_attention",
            format!("maps {:?} / {:?}, expected {want:?}", tape.shape(c), tape.shape(c_prime)),
        ));
    }
    let (qz, kz, vz) = (
        tape.slice(q, 1, 0, n_z)?,
        tape.slice(k, 1, 0, n_z)?,
        tape.slice(v, 1, 0, n_z)?,
    );
    let (qx, kx, vx) = (
        tape.slice(q, 1, n_z, n_x)?,
        tape.slice(k, 1, n_z, n_x)?,
        tape.slice(v, 1, n_z, n_x)?,
    );
    let template = attention(tape, qz, kz, vz, mask)?;
    let search_self = attention(tape, qx, kx, vx, None)?;
    let cross = cross_attention(tape, c, c_prime, vz, mask)?;
    let search = tape.add(search_self, cross)?;
    let all = tape.concat(&[template, search], 1)?;
    merge_heads(tape, all)
}

/// Hybrid attention sub-layer with its residual: template rows attend to
/// templates only; search rows attend to themselves plus the templates
/// through `softmax(c_prime + c)`. Uses `tokens.key_mask` when present.
pub fn hybrid_attention(
    tape: &mut GradTape,
    tokens: &TokenSet,
    vars: &BlockVars,
    c: Var,
    c_prime: Var,
    ctx: &BlockContext<'_>,
) -> Result<TokenSet> {
    let h = tape.layer_norm(tokens.tokens, vars.norm1.0, vars.norm1.1, ctx.eps)?;
    let qkv = project_heads(tape, h, vars.qkv, ctx.heads)?;
    let merged = hybrid_core(tape, qkv, tokens.n_z, c, c_prime, tokens.key_mask)?;
    let out = linear(tape, merged, vars.proj)?;
    let mut next = tokens.clone();
    next.tokens = tape.add(tokens.tokens, out)?;
    Ok(next)
}

/// Same as [`hybrid_attention`] but with an explicit key mask over the
/// template rows, overriding `tokens.key_mask`.
pub fn hybrid_attention_masked(
    tape: &mut GradTape,
    tokens: &TokenSet,
    vars: &BlockVars,
    c: Var,
    c_prime: Var,
    mask: Var,
    ctx: &BlockContext<'_>,
) -> Result<TokenSet> {
    let mut masked = tokens.clone();
    masked.key_mask = Some(mask);
    hybrid_attention(tape, &masked, vars, c, c_prime, ctx)
}

fn standard_block(tape: &mut GradTape, set: &TokenSet, vars: &BlockVars, ctx: &BlockContext<'_>) -> Result<TokenSet> {
    let h = tape.layer_norm(set.tokens, vars.norm1.0, vars.norm1.1, ctx.eps)?;
    let (q, k, v) = project_heads(tape, h, vars.qkv, ctx.heads)?;
    let mask = match set.key_mask {
        Some(m) => {
            let ones = tape.constant(Tensor::ones(&[set.n_x]));
            Some(tape.concat(&[m, ones], 0)?)
        }
        None => None,
    };
    let att = attention(tape, q, k, v, mask)?;
    let merged = merge_heads(tape, att)?;
    let out = linear(tape, merged, vars.proj)?;
    let x = tape.add(set.tokens, out)?;
    let mut next = set.clone();
    next.tokens = ffn_residual(tape, x, vars, ctx.eps)?;
    Ok(next)
}

fn dsa_block(
    tape: &mut GradTape,
    set: &TokenSet,
    vars: &BlockVars,
    dsa: &DsaVars,
    keep: Option<usize>,
    ctx: &mut BlockContext<'_>,
) -> Result<(TokenSet, BlockTrace)> {
    let (n_z, n_x) = (set.n_z, set.n_x);
    let h = tape.layer_norm(set.tokens, vars.norm1.0, vars.norm1.1, ctx.eps)?;
    let (q, k, v) = project_heads(tape, h, vars.qkv, ctx.heads)?;
    let qx = tape.slice(q, 1, n_z, n_x)?;
    let kz = tape.slice(k, 1, 0, n_z)?;
    let c = correlation_logits(tape, qx, kz)?;

    let mut edges = match ctx.relevance {
        RelevanceKind::Dynamic => {
            let pooled = pool_nodes_var(tape, c)?;
            let sim = node_similarity_var(tape, pooled)?;
            let pi = relevance_logits_var(tape, sim, &dsa.edge_mlp)?;
            let noise = ctx.noise(tape.shape(pi));
            sample_keep(tape, pi, ctx.tau, ctx.mode, noise.as_ref())?.0
        }
        RelevanceKind::StaticGrid => {
            let (hz, wz) = ctx.template_grid;
            tape.constant(static_grid_relevance(hz, wz, &set.alive))
        }
    };
    if let Some(m) = set.key_mask {
        // Masked tokens lose their edges, as if physically removed.
        let col = tape.reshape(m, &[n_z, 1])?;
        let row = tape.reshape(m, &[1, n_z])?;
        let outer = tape.matmul(col, row)?;
        edges = tape.mul(edges, outer)?;
    }
    let adj = normalize_adjacency_var(tape, edges, ctx.degree)?;
    let c_prime = semantic_correlation_var(tape, adj, c, dsa.mixer)?;
    let mut trace = BlockTrace {
        correlation: Some(c),
        refined: Some(c_prime),
        edges: Some(edges),
        kept: set.alive.clone(),
    };

    let k_keep = keep.unwrap_or(n_z).min(n_z);
    let live: Option<Vec<bool>> = set.key_mask.map(|m| tape.value(m).data().iter().map(|&w| w > 0.5).collect());
    let noise = ctx.noise(&[n_z, 2]);
    let importance = if k_keep == n_z && ctx.mode != SampleMode::Deterministic {
        None
    } else {
        Some(token_importance(
            tape,
            c_prime,
            &dsa.token_mlp,
            k_keep,
            ctx.tau,
            ctx.mode,
            noise.as_ref(),
            live.as_deref(),
        )?)
    };

    let mut next = set.clone();
    let (mut qkv, mut c, mut c_prime, mut x) = ((q, k, v), c, c_prime, set.tokens);
    match importance {
        Some(Importance::Keep(local)) if local.len() < n_z => {
            let rows: Vec<usize> = local.iter().copied().chain(n_z..n_z + n_x).collect();
            x = tape.select(x, 0, &rows)?;
            qkv = (
                tape.select(q, 1, &rows)?,
                tape.select(k, 1, &rows)?,
                tape.select(v, 1, &rows)?,
            );
            c = tape.select(c, 2, &local)?;
            c_prime = tape.select(c_prime, 2, &local)?;
            next.alive = local.iter().map(|&i| set.alive[i]).collect();
            next.n_z = local.len();
        }
        Some(Importance::Mask(m)) => {
            next.key_mask = Some(match set.key_mask {
                Some(prev) => tape.mul(prev, m)?,
                None => m,
            });
        }
        _ => {}
    }
    trace.kept = next.alive.clone();
    let merged = hybrid_core(tape, qkv, next.n_z, c, c_prime, next.key_mask)?;
    let out = linear(tape, merged, vars.proj)?;
    let x = tape.add(x, out)?;
    next.tokens = ffn_residual(tape, x, vars, ctx.eps)?;
    Ok((next, trace))
}

/// Applies one block. `keep` is the template-token budget after a
/// semantic-aware block (`None` keeps all); standard blocks ignore it.
pub fn block_forward(
    tape: &mut GradTape,
    set: &TokenSet,
    vars: &BlockVars,
    kind: BlockKind,
    keep: Option<usize>,
    ctx: &mut BlockContext<'_>,
) -> Result<(TokenSet, BlockTrace)> {
    let s = tape.shape(set.tokens);
    if s.len() != 2 || s[0] != set.len() || set.alive.len() != set.n_z {
        return Err(Error::shape(
            "block_forward",
            format!("tokens {s:?} for {} template + {} search rows", set.n_z, set.n_x),
        ));
    }
    if set.n_z == 0 || set.n_x == 0 {
        return Err(Error::invalid("template and search token sets must be non-empty"));
    }
    match kind {
        BlockKind::Standard => Ok((
            standard_block(tape, set, vars, ctx)?,
            BlockTrace {
                kept: set.alive.clone(),
                ..BlockTrace::default()
            },
        )),
        BlockKind::Dsa => {
            let dsa = vars
                .dsa
                .as_ref()
                .ok_or_else(|| Error::Model("semantic block without relevance parameters".into()))?;
            dsa_block(tape, set, vars, dsa, keep, ctx)
        }
    }
}
