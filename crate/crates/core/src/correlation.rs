//! Multi-head correlation between search queries and template keys.

use alloc::format;

use crate::error::{Error, Result};
use crate::numerics::{math, GradTape, Tensor, Var};

/// Scaled query/key dot products, one `N_x x N_z` slab per head.
///
/// Stored head-major (`[l, N_x, N_z]`) so each head is a contiguous matrix;
/// [`CorrelationMap::to_token_major`] gives the `[N_x, N_z, l]` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMap {
    values: Tensor,
    d_k: Option<usize>,
}

impl CorrelationMap {
    pub fn from_head_major(values: Tensor, d_k: Option<usize>) -> Result<Self> {
        if values.ndim() != 3 {
            return Err(Error::shape(
                "correlation_map",
                format!("expected [l, N_x, N_z], got {:?}", values.shape()),
            ));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite("correlation_map"));
        }
        Ok(Self { values, d_k })
    }

    pub fn from_token_major(values: &Tensor, d_k: Option<usize>) -> Result<Self> {
        if values.ndim() != 3 {
            return Err(Error::shape(
                "correlation_map",
                format!("expected [N_x, N_z, l], got {:?}", values.shape()),
            ));
        }
        Self::from_head_major(values.permute(&[2, 0, 1])?, d_k)
    }

    pub fn heads(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_x(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn n_z(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn d_k(&self) -> Option<usize> {
        self.d_k
    }

    /// Entry for search token `i`, template token `j`, head `h`.
    pub fn get(&self, i: usize, j: usize, h: usize) -> f64 {
        self.values.at(&[h, i, j])
    }

    pub fn head_major(&self) -> &Tensor {
        &self.values
    }

    pub fn to_token_major(&self) -> Tensor {
        self.values.permute(&[1, 2, 0]).expect("rank checked at construction")
    }

    /// Restores the `[h_x, w_x, h_z, w_z, l]` grid form.
    pub fn unflatten(&self, h_x: usize, w_x: usize, h_z: usize, w_z: usize) -> Result<Tensor> {
        if h_x * w_x != self.n_x() || h_z * w_z != self.n_z() {
            return Err(Error::shape(
                "unflatten",
                format!("grid {h_x}x{w_x} / {h_z}x{w_z} for {}x{}", self.n_x(), self.n_z()),
            ));
        }
        self.to_token_major().reshape(&[h_x, w_x, h_z, w_z, self.heads()])
    }
}

/// `C[i, j, h] = <q_x[i, :, h], k_z[j, :, h]> / sqrt(d_k)`.
///
/// Inputs use the `[N, d_k, l]` layout.
pub fn correlation_map(q_x: &Tensor, k_z: &Tensor) -> Result<CorrelationMap> {
    if q_x.ndim() != 3 || k_z.ndim() != 3 || q_x.shape()[1..] != k_z.shape()[1..] {
        return Err(Error::shape(
            "correlation_map",
            format!("query {:?} vs key {:?}", q_x.shape(), k_z.shape()),
        ));
    }
    let d_k = q_x.shape()[1];
    let mut tape = GradTape::new();
    let q = tape.constant(q_x.permute(&[2, 0, 1])?);
    let k = tape.constant(k_z.permute(&[2, 0, 1])?);
    let c = correlation_logits(&mut tape, q, k)?;
    CorrelationMap::from_head_major(tape.value(c).clone(), Some(d_k))
}

/// Row-major flattening of the `[h_x, w_x, h_z, w_z, l]` grid form:
/// search cell `(i_x, j_x)` becomes row `i_x * w_x + j_x`.
pub fn flatten_grid(c: &Tensor) -> Result<CorrelationMap> {
    let s = c.shape();
    if s.len() != 5 {
        return Err(Error::shape("flatten_grid", format!("expected 5 axes, got {s:?}")));
    }
    let flat = c.reshape(&[s[0] * s[1], s[2] * s[3], s[4]])?;
    CorrelationMap::from_token_major(&flat, None)
}

/// Tape form on head-major projections: `q [l, N_x, d_k]`, `k [l, N_z, d_k]`
/// give `[l, N_x, N_z]`.
pub fn correlation_logits(tape: &mut GradTape, q: Var, k: Var) -> Result<Var> {
    let (qs, ks) = (tape.shape(q), tape.shape(k));
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::shape("correlation_map", format!("query {qs:?} vs key {ks:?}")));
    }
    let d_k = qs[2];
    let raw = tape.matmul_bt(q, k)?;
    tape.scale(raw, 1.0 / math::sqrt(d_k as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use alloc::vec;
    use alloc::vec::Vec;

    fn random(shape: &[usize], rng: &mut RngStream) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn single_entry_scaled_by_root_dk() {
        let q = Tensor::new(&[1, 4, 1], vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let k = Tensor::new(&[1, 4, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(correlation_map(&q, &k).unwrap().get(0, 0, 0), 1.0);
    }

    #[test]
    fn orthonormal_rows_give_scaled_identity() {
        let d = 4;
        let mut q = Tensor::zeros(&[d, d, 2]);
        for i in 0..d {
            for h in 0..2 {
                q.set(&[i, i, h], 1.0);
            }
        }
        let c = correlation_map(&q, &q).unwrap();
        for h in 0..2 {
            for i in 0..d {
                for j in 0..d {
                    let want = if i == j { 0.5 } else { 0.0 };
                    assert_eq!(c.get(i, j, h), want);
                }
            }
        }
    }

    #[test]
    fn matches_brute_force_dot_products() {
        let mut rng = RngStream::new(21);
        let (nx, nz, dk, l) = (6, 4, 5, 2);
        let q = random(&[nx, dk, l], &mut rng);
        let k = random(&[nz, dk, l], &mut rng);
        let c = correlation_map(&q, &k).unwrap();
        for i in 0..nx {
            for j in 0..nz {
                for h in 0..l {
                    let dot: f64 = (0..dk).map(|p| q.at(&[i, p, h]) * k.at(&[j, p, h])).sum();
                    assert!((c.get(i, j, h) - dot / (dk as f64).sqrt()).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rejects_feature_mismatch() {
        let q = Tensor::zeros(&[3, 4, 2]);
        let k = Tensor::zeros(&[3, 5, 2]);
        assert!(matches!(correlation_map(&q, &k), Err(Error::Shape { .. })));
        let k = Tensor::zeros(&[3, 4, 3]);
        assert!(correlation_map(&q, &k).is_err());
    }

    #[test]
    fn flatten_small_grid() {
        let g = Tensor::new(&[2, 2, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = flatten_grid(&g).unwrap();
        assert_eq!((c.n_x(), c.n_z(), c.heads()), (4, 1, 1));
        let col: Vec<f64> = (0..4).map(|i| c.get(i, 0, 0)).collect();
        assert_eq!(col, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn flatten_index_arithmetic() {
        // Search cell (i_x = 1, j_x = 0) with w_x = 2 lands on flat row 2.
        let mut g = Tensor::zeros(&[2, 2, 1, 1, 1]);
        g.set(&[1, 0, 0, 0, 0], 7.0);
        let c = flatten_grid(&g).unwrap();
        assert_eq!(c.get(2, 0, 0), 7.0);
    }

    #[test]
    fn flatten_round_trip_is_bitwise() {
        let mut rng = RngStream::new(4);
        let g = random(&[3, 3, 2, 2, 2], &mut rng);
        let back = flatten_grid(&g).unwrap().unflatten(3, 3, 2, 2).unwrap();
        assert_eq!(back, g);
    }
}
