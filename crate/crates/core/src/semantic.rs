//! Semantic-aware refinement: the correlation map is diffused over the
//! symmetrically normalized relevance graph, then heads are mixed.

use alloc::format;

use crate::correlation::CorrelationMap;
use crate::error::{Error, Result};
use crate::numerics::{GradTape, RngStream, Tensor, Var};
use crate::relevance::RelevanceGraph;

/// Where the degree matrix comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DegreeMode {
    /// Degrees of `E + I`; always invertible.
    #[default]
    SelfLoop,
    /// Degrees of raw `E`; isolated nodes are rejected.
    Literal,
}

/// `D^-1/2 (E + I) D^-1/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    pub matrix: Tensor,
    pub edges: Tensor,
}

impl NormalizedAdjacency {
    pub fn identity(n: usize) -> Self {
        Self {
            matrix: Tensor::eye(n),
            edges: Tensor::zeros(&[n, n]),
        }
    }

    pub fn size(&self) -> usize {
        self.matrix.shape()[0]
    }
}

/// `l x l` head-mixing matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMixer {
    pub w: Tensor,
}

impl HeadMixer {
    pub fn new(w: Tensor) -> Result<Self> {
        if w.ndim() != 2 || w.shape()[0] != w.shape()[1] {
            return Err(Error::shape("head_mixer", format!("{:?} is not square", w.shape())));
        }
        if !w.is_finite() {
            return Err(Error::NonFinite("head_mixer"));
        }
        Ok(Self { w })
    }

    pub fn identity(l: usize) -> Self {
        Self { w: Tensor::eye(l) }
    }

    /// Identity plus Gaussian noise of standard deviation `std`.
    pub fn near_identity(l: usize, std: f64, rng: &mut RngStream) -> Self {
        let mut w = Tensor::eye(l);
        for v in w.data_mut() {
            *v += std * rng.normal();
        }
        Self { w }
    }

    pub fn heads(&self) -> usize {
        self.w.shape()[0]
    }
}

/// Normalizes a relevance graph's edge matrix.
pub fn normalize_adjacency(e: &RelevanceGraph) -> Result<NormalizedAdjacency> {
    normalize_edges(&e.edges, DegreeMode::SelfLoop)
}

pub fn normalize_edges(edges: &Tensor, mode: DegreeMode) -> Result<NormalizedAdjacency> {
    let mut tape = GradTape::new();
    let e = tape.constant(edges.clone());
    let a = normalize_adjacency_var(&mut tape, e, mode)?;
    Ok(NormalizedAdjacency {
        matrix: tape.value(a).clone(),
        edges: edges.clone(),
    })
}

pub fn normalize_adjacency_var(tape: &mut GradTape, e: Var, mode: DegreeMode) -> Result<Var> {
    tape.sym_norm_adjacency(e, mode == DegreeMode::SelfLoop)
}

/// `C'[i, :, h'] = sum_h (C[i, :, h] A^T) W[h, h']`.
pub fn semantic_correlation(adj: &NormalizedAdjacency, c: &CorrelationMap, w: &HeadMixer) -> Result<CorrelationMap> {
    let mut tape = GradTape::new();
    let a = tape.constant(adj.matrix.clone());
    let cv = tape.constant(c.head_major().clone());
    let wv = tape.constant(w.w.clone());
    let out = semantic_correlation_var(&mut tape, a, cv, wv)?;
    CorrelationMap::from_head_major(tape.value(out).clone(), c.d_k())
}

/// Tape form over head-major maps: `adj [N_z, N_z]`, `c [l, N_x, N_z]`, `w [l, l]`.
pub fn semantic_correlation_var(tape: &mut GradTape, adj: Var, c: Var, w: Var) -> Result<Var> {
    let cs = tape.shape(c).to_vec();
    let as_ = tape.shape(adj).to_vec();
    let ws = tape.shape(w).to_vec();
    if cs.len() != 3 || as_ != [cs[2], cs[2]] || ws != [cs[0], cs[0]] {
        return Err(Error::shape(
            "semantic_correlation",
            format!("adjacency {as_:?}, map {cs:?}, mixer {ws:?}"),
        ));
    }
    let (l, nx, nz) = (cs[0], cs[1], cs[2]);
    let diffused = tape.matmul_bt(c, adj)?;
    let flat = tape.reshape(diffused, &[l, nx * nz])?;
    let wt = tape.transpose(w)?;
    let mixed = tape.matmul(wt, flat)?;
    tape.reshape(mixed, &[l, nx, nz])
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn random(shape: &[usize], rng: &mut RngStream) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn empty_graph_gives_identity() {
        let a = normalize_edges(&Tensor::zeros(&[2, 2]), DegreeMode::SelfLoop).unwrap();
        assert_eq!(a.matrix, Tensor::eye(2));
    }

    #[test]
    fn two_node_edge() {
        let e = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let a = normalize_edges(&e, DegreeMode::SelfLoop).unwrap();
        for &v in a.matrix.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn complete_graph_is_uniform() {
        for n in 1..8 {
            let mut e = Tensor::ones(&[n, n]);
            for i in 0..n {
                e.set(&[i, i], 0.0);
            }
            let a = normalize_edges(&e, DegreeMode::SelfLoop).unwrap();
            for &v in a.matrix.data() {
                assert!((v - 1.0 / n as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn literal_degrees_reject_isolated_nodes() {
        let e = Tensor::new(&[2, 2], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(normalize_edges(&e, DegreeMode::Literal), Err(Error::Degenerate(_))));
        let e = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let a = normalize_edges(&e, DegreeMode::Literal).unwrap();
        // Degree 1 each: A = E + I.
        assert_eq!(a.matrix.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn identity_pass_through() {
        let mut rng = RngStream::new(12);
        let c = CorrelationMap::from_head_major(random(&[3, 5, 4], &mut rng), Some(8)).unwrap();
        let out = semantic_correlation(&NormalizedAdjacency::identity(4), &c, &HeadMixer::identity(3)).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn complete_graph_replicates_column_mean() {
        let mut rng = RngStream::new(13);
        let n = 4;
        let mut e = Tensor::ones(&[n, n]);
        for i in 0..n {
            e.set(&[i, i], 0.0);
        }
        let adj = normalize_edges(&e, DegreeMode::SelfLoop).unwrap();
        let c = CorrelationMap::from_head_major(random(&[2, 3, n], &mut rng), None).unwrap();
        let out = semantic_correlation(&adj, &c, &HeadMixer::identity(2)).unwrap();
        for h in 0..2 {
            for i in 0..3 {
                let mean: f64 = (0..n).map(|j| c.get(i, j, h)).sum::<f64>() / n as f64;
                for j in 0..n {
                    assert!((out.get(i, j, h) - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matches_explicit_products() {
        let mut rng = RngStream::new(14);
        let (l, nx, nz) = (3, 4, 5);
        let adj = NormalizedAdjacency {
            matrix: random(&[nz, nz], &mut rng),
            edges: Tensor::zeros(&[nz, nz]),
        };
        let c = CorrelationMap::from_head_major(random(&[l, nx, nz], &mut rng), None).unwrap();
        let w = HeadMixer::new(random(&[l, l], &mut rng)).unwrap();
        let out = semantic_correlation(&adj, &c, &w).unwrap();
        for hp in 0..l {
            for i in 0..nx {
                for j in 0..nz {
                    let mut want = 0.0;
                    for h in 0..l {
                        let diffused: f64 = (0..nz).map(|k| c.get(i, k, h) * adj.matrix.at(&[j, k])).sum();
                        want += diffused * w.w.at(&[h, hp]);
                    }
                    assert!((out.get(i, j, hp) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rejects_size_mismatch() {
        let c = CorrelationMap::from_head_major(Tensor::zeros(&[2, 3, 4]), None).unwrap();
        assert!(semantic_correlation(&NormalizedAdjacency::identity(3), &c, &HeadMixer::identity(2)).is_err());
        assert!(semantic_correlation(&NormalizedAdjacency::identity(4), &c, &HeadMixer::identity(3)).is_err());
    }
}
