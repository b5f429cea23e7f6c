use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{GradTape, Tensor, Var};
use crate::relevance::{mlp_forward, MlpVars, SampleMode};

/// Which template tokens survive an elimination step.
#[derive(Clone, Debug)]
pub enum Importance {
    /// Inference: local indices (into the alive rows) kept, ascending.
    Keep(Vec<usize>),
    /// Training: straight-through keep weights over the alive rows, `[n_z]`.
    Mask(Var),
}

/// Per-template-token keep/drop log-probabilities from the refined map
/// `[l, N_x, N_z]`: mean over search rows, then the MLP. Returns `[N_z, 2]`.
pub fn token_importance_logits(tape: &mut GradTape, refined: Var, mlp: &MlpVars) -> Result<Var> {
    let pooled = tape.mean_axis(refined, 1)?;
    let per_token = tape.transpose(pooled)?;
    let out = mlp_forward(tape, per_token, mlp)?;
    tape.log_softmax(out)
}

/// Indices of the `k` largest scores, ties to the lower index, returned ascending.
pub fn top_k_keep(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = order.into_iter().take(k).collect();
    keep.sort_unstable();
    keep
}

/// Decides which alive template tokens to keep.
///
/// Deterministic mode keeps the `k_keep` tokens with the largest keep
/// log-probability. Sampling modes perturb the logits with `noise`, relax them
/// with temperature `tau`, and return a keep mask: soft mode returns the
/// relaxed keep probability, straight-through mode a hard top-`k_keep`
/// indicator (restricted to `live` rows when given) carrying the relaxed
/// gradient.
#[allow(clippy::too_many_arguments)]
pub fn token_importance(
    tape: &mut GradTape,
    refined: Var,
    mlp: &MlpVars,
    k_keep: usize,
    tau: f64,
    mode: SampleMode,
    noise: Option<&Tensor>,
    live: Option<&[bool]>,
) -> Result<Importance> {
    let n_z = *tape
        .shape(refined)
        .last()
        .ok_or_else(|| Error::shape("token_importance", "scalar map"))?;
    if k_keep == 0 {
        return Err(Error::invalid("k_keep must be positive"));
    }
    if k_keep > n_z {
        return Err(Error::invalid(format!("k_keep {k_keep} exceeds {n_z} alive tokens")));
    }
    if let Some(l) = live {
        if l.len() != n_z {
            return Err(Error::shape(
                "token_importance",
                format!("{} live flags for {n_z} tokens", l.len()),
            ));
        }
    }
    if mode == SampleMode::Deterministic && k_keep == n_z {
        return Ok(Importance::Keep((0..n_z).collect()));
    }
    let logits = token_importance_logits(tape, refined, mlp)?;
    if mode == SampleMode::Deterministic {
        let keep: Vec<f64> = tape.value(logits).data().chunks(2).map(|p| p[0]).collect();
        return Ok(Importance::Keep(top_k_keep(&keep, k_keep)));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let perturbed = match noise {
        Some(g) => {
            if g.shape() != tape.shape(logits) {
                return Err(Error::shape(
                    "token_importance",
                    format!("noise {:?} for {n_z} tokens", g.shape()),
                ));
            }
            let gv = tape.constant(g.clone());
            tape.add(logits, gv)?
        }
        None => logits,
    };
    let scaled = tape.scale(perturbed, 1.0 / tau)?;
    let y = tape.softmax(scaled)?;
    let keep = tape.select(y, 1, &[0])?;
    let keep = tape.reshape(keep, &[n_z])?;
    if mode == SampleMode::Soft {
        return Ok(Importance::Mask(keep));
    }
    let scores: Vec<f64> = tape
        .value(keep)
        .data()
        .iter()
        .enumerate()
        .map(|(i, &p)| match live {
            Some(l) if !l[i] => f64::NEG_INFINITY,
            _ => p,
        })
        .collect();
    let mut hard = alloc::vec![0.0; n_z];
    for i in top_k_keep(&scores, k_keep) {
        hard[i] = 1.0;
    }
    let st = tape.straight_through(keep, Tensor::new(&[n_z], hard)?)?;
    Ok(Importance::Mask(st))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_keep(&[0.1, 0.2, 0.3, 0.4], 2), vec![2, 3]);
        assert_eq!(top_k_keep(&[0.5; 4], 2), vec![0, 1]);
        assert_eq!(top_k_keep(&[3.0, -1.0, 3.0, 2.0], 3), vec![0, 2, 3]);
    }

    #[test]
    fn keep_all_ignores_logits() {
        let mut tape = GradTape::new();
        let c = tape.constant(Tensor::zeros(&[2, 3, 4]));
        let mlp = crate::relevance::TinyMlp::zeros(2, 4).bind_constant(&mut tape);
        match token_importance(&mut tape, c, &mlp, 4, 1.0, SampleMode::Deterministic, None, None).unwrap() {
            Importance::Keep(k) => assert_eq!(k, vec![0, 1, 2, 3]),
            Importance::Mask(_) => panic!("expected indices"),
        }
        assert!(token_importance(&mut tape, c, &mlp, 0, 1.0, SampleMode::Deterministic, None, None).is_err());
        assert!(token_importance(&mut tape, c, &mlp, 5, 1.0, SampleMode::Deterministic, None, None).is_err());
    }

    #[test]
    fn increasing_logits_keep_the_top() {
        // An MLP that reads head 0 straight into the keep logit.
        let mut tape = GradTape::new();
        let mlp = crate::relevance::TinyMlp::new(
            Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap(),
            Tensor::new(&[2], vec![5.0, 0.0]).unwrap(),
            Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
            Tensor::zeros(&[2]),
        )
        .unwrap()
        .bind_constant(&mut tape);
        let c = tape.constant(Tensor::new(&[1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        match token_importance(&mut tape, c, &mlp, 2, 1.0, SampleMode::Deterministic, None, None).unwrap() {
            Importance::Keep(k) => assert_eq!(k, vec![2, 3]),
            Importance::Mask(_) => panic!("expected indices"),
        }
    }

    #[test]
    fn straight_through_mask_respects_budget_and_liveness() {
        let mut tape = GradTape::new();
        let mlp = crate::relevance::TinyMlp::new(
            Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap(),
            Tensor::new(&[2], vec![5.0, 0.0]).unwrap(),
            Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
            Tensor::zeros(&[2]),
        )
        .unwrap()
        .bind_constant(&mut tape);
        let c = tape.constant(Tensor::new(&[1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let live = [true, true, true, false];
        let m = token_importance(&mut tape, c, &mlp, 2, 1.0, SampleMode::HardStraightThrough, None, Some(&live)).unwrap();
        match m {
            Importance::Mask(v) => assert_eq!(tape.value(v).data(), &[0.0, 1.0, 1.0, 0.0]),
            Importance::Keep(_) => panic!("expected a mask"),
        }
    }
}
