//! Dynamic semantic relevance: pooled correlation nodes, pairwise node
//! similarity, keep/drop logits from a tiny MLP, and Gumbel-softmax sampling
//! of the binary relevance graph over template tokens.

use alloc::format;
use alloc::vec::Vec;

use crate::correlation::CorrelationMap;
use crate::error::{Error, Result};
use crate::numerics::{GradTape, RngStream, Tensor, Var};

/// How a 2-way keep/drop distribution becomes an indicator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Relaxed probabilities `softmax((pi + g) / tau)`.
    Soft,
    /// One-hot forward value, soft gradient (straight-through).
    HardStraightThrough,
    /// `keep` iff `pi_keep >= pi_drop`; no noise. Used at inference.
    Deterministic,
}

/// Where a semantic block gets its relevance graph from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RelevanceKind {
    /// Sampled from the correlation map each forward pass.
    #[default]
    Dynamic,
    /// Fixed 3x3 grid neighbourhoods inside each template.
    StaticGrid,
}

/// Two affine layers with a GELU between; output width 2.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// A [`TinyMlp`] bound to tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl TinyMlp {
    pub fn new(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Result<Self> {
        let ok = w1.ndim() == 2
            && w2.ndim() == 2
            && b1.len() == w1.shape()[1]
            && w2.shape()[0] == w1.shape()[1]
            && w2.shape()[1] == 2
            && b2.len() == 2;
        if !ok {
            return Err(Error::shape(
                "tiny_mlp",
                format!("{:?}/{:?} -> {:?}/{:?}", w1.shape(), b1.shape(), w2.shape(), b2.shape()),
            ));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    /// All-zero weights and biases.
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[input, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, 2]),
            b2: Tensor::zeros(&[2]),
        }
    }

    /// Gaussian weights with standard deviation `std`, zero biases.
    pub fn random(input: usize, hidden: usize, std: f64, rng: &mut RngStream) -> Self {
        let mut gauss = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| std * rng.normal()).collect()).expect("positive extents")
        };
        Self {
            w1: gauss(&[input, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: gauss(&[hidden, 2]),
            b2: Tensor::zeros(&[2]),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn bind_constant(&self, tape: &mut GradTape) -> MlpVars {
        MlpVars {
            w1: tape.constant(self.w1.clone()),
            b1: tape.constant(self.b1.clone()),
            w2: tape.constant(self.w2.clone()),
            b2: tape.constant(self.b2.clone()),
        }
    }
}

/// `[rows, in] -> [rows, 2]`.
pub fn mlp_forward(tape: &mut GradTape, x: Var, mlp: &MlpVars) -> Result<Var> {
    let h = tape.matmul(x, mlp.w1)?;
    let h = tape.add_broadcast(h, mlp.b1)?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(h, mlp.w2)?;
    tape.add_broadcast(o, mlp.b2)
}

/// Binary (or relaxed) relevance over template-token pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceGraph {
    /// `[N_z, N_z]`; entries in `{0, 1}` unless `mode` is `Soft`.
    pub edges: Tensor,
    /// `[N_z, N_z, 2]` keep/drop log-probabilities.
    pub logits: Tensor,
    /// `[N_z, N_z, 2]` relaxed sample; absent in deterministic mode.
    pub relaxed: Option<Tensor>,
    pub tau: f64,
    pub mode: SampleMode,
}

/// Mean of each template column over the search axis: `[N_z, 1, l]`.
pub fn pool_nodes(c: &CorrelationMap) -> Tensor {
    let mut tape = GradTape::new();
    let cv = tape.constant(c.head_major().clone());
    let v = pool_nodes_var(&mut tape, cv).expect("map has rank 3");
    let (l, nz) = (c.heads(), c.n_z());
    tape.value(v)
        .permute(&[1, 0])
        .and_then(|t| t.reshape(&[nz, 1, l]))
        .expect("pooled shape is [l, N_z]")
}

/// Tape form: `[l, N_x, N_z] -> [l, N_z]`.
pub fn pool_nodes_var(tape: &mut GradTape, c: Var) -> Result<Var> {
    tape.mean_axis(c, 1)
}

/// Per-head outer product of the pooled node vector: `[N_z, N_z, l]`.
pub fn node_similarity(v: &Tensor) -> Result<Tensor> {
    let s = v.shape();
    if s.len() != 3 || s[1] != 1 {
        return Err(Error::shape("node_similarity", format!("expected [N_z, 1, l], got {s:?}")));
    }
    let (nz, l) = (s[0], s[2]);
    let mut tape = GradTape::new();
    let hv = tape.constant(v.reshape(&[nz, l])?.permute(&[1, 0])?);
    let a = node_similarity_var(&mut tape, hv)?;
    tape.value(a).permute(&[1, 2, 0])
}

/// Tape form: `[l, N_z] -> [l, N_z, N_z]`.
pub fn node_similarity_var(tape: &mut GradTape, v: Var) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 2 {
        return Err(Error::shape("node_similarity", format!("expected [l, N_z], got {s:?}")));
    }
    let col = tape.reshape(v, &[s[0], s[1], 1])?;
    tape.matmul_bt(col, col)
}

/// Keep/drop log-probabilities per node pair: `[N_z, N_z, l] -> [N_z, N_z, 2]`.
/// Index 0 is keep, index 1 is drop.
pub fn relevance_logits(a: &Tensor, mlp: &TinyMlp) -> Result<Tensor> {
    let s = a.shape();
    if s.len() != 3 || s[0] != s[1] || s[2] != mlp.input_width() {
        return Err(Error::shape(
            "relevance_logits",
            format!("{s:?} for mlp input width {}", mlp.input_width()),
        ));
    }
    let mut tape = GradTape::new();
    let av = tape.constant(a.permute(&[2, 0, 1])?);
    let vars = mlp.bind_constant(&mut tape);
    let pi = relevance_logits_var(&mut tape, av, &vars)?;
    Ok(tape.value(pi).clone())
}

/// Tape form: `[l, N_z, N_z] -> [N_z, N_z, 2]`.
pub fn relevance_logits_var(tape: &mut GradTape, a: Var, mlp: &MlpVars) -> Result<Var> {
    let s = tape.shape(a).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("relevance_logits", format!("expected [l, N_z, N_z], got {s:?}")));
    }
    let (l, nz) = (s[0], s[1]);
    let pairs = tape.permute(a, &[1, 2, 0])?;
    let pairs = tape.reshape(pairs, &[nz * s[2], l])?;
    let out = mlp_forward(tape, pairs, mlp)?;
    let pi = tape.log_softmax(out)?;
    tape.reshape(pi, &[nz, s[2], 2])
}

/// Standard Gumbel noise with the given shape.
pub fn gumbel_noise(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gumbel()).collect()).expect("positive extents")
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Samples keep indicators from `[.., 2]` log-probabilities. Returns the
/// indicator (shape without the last axis) and, outside deterministic mode,
/// the relaxed 2-way sample.
///
/// `noise` must match `logits` when given; `None` means zero noise.
pub fn sample_keep(
    tape: &mut GradTape,
    logits: Var,
    tau: f64,
    mode: SampleMode,
    noise: Option<&Tensor>,
) -> Result<(Var, Option<Var>)> {
    check_tau(tau)?;
    let shape = tape.shape(logits).to_vec();
    if shape.last() != Some(&2) {
        return Err(Error::shape("gumbel_softmax", format!("last axis must be 2, got {shape:?}")));
    }
    let lead: Vec<usize> = if shape.len() == 1 {
        alloc::vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    };
    let pi = tape.value(logits).data();
    if mode == SampleMode::Deterministic {
        let hard: Vec<f64> = pi.chunks(2).map(|p| if p[0] >= p[1] { 1.0 } else { 0.0 }).collect();
        return Ok((tape.constant(Tensor::new(&lead, hard)?), None));
    }
    let perturbed = match noise {
        Some(g) => {
            if g.shape() != shape.as_slice() {
                return Err(Error::shape("gumbel_softmax", format!("noise {:?} for {shape:?}", g.shape())));
            }
            let gv = tape.constant(g.clone());
            tape.add(logits, gv)?
        }
        None => logits,
    };
    let scaled = tape.scale(perturbed, 1.0 / tau)?;
    let y = tape.softmax(scaled)?;
    let keep = tape.select(y, shape.len() - 1, &[0])?;
    let keep = tape.reshape(keep, &lead)?;
    match mode {
        SampleMode::Soft => Ok((keep, Some(y))),
        SampleMode::HardStraightThrough => {
            let hard: Vec<f64> = tape
                .value(y)
                .data()
                .chunks(2)
                .map(|p| if p[0] >= p[1] { 1.0 } else { 0.0 })
                .collect();
            let st = tape.straight_through(keep, Tensor::new(&lead, hard)?)?;
            Ok((st, Some(y)))
        }
        SampleMode::Deterministic => unreachable!(),
    }
}

/// Gumbel-softmax relevance graph from `[N_z, N_z, 2]` log-probabilities.
pub fn gumbel_relevance(pi: &Tensor, tau: f64, mode: SampleMode, rng: &mut RngStream) -> Result<RelevanceGraph> {
    let noise = match mode {
        SampleMode::Deterministic => None,
        _ => Some(gumbel_noise(pi.shape(), rng)),
    };
    gumbel_relevance_with_noise(pi, tau, mode, noise.as_ref())
}

/// [`gumbel_relevance`] with caller-supplied noise (`None` = zero noise).
pub fn gumbel_relevance_with_noise(pi: &Tensor, tau: f64, mode: SampleMode, noise: Option<&Tensor>) -> Result<RelevanceGraph> {
    let s = pi.shape();
    if s.len() != 3 || s[0] != s[1] || s[2] != 2 {
        return Err(Error::shape("gumbel_relevance", format!("expected [N_z, N_z, 2], got {s:?}")));
    }
    let mut tape = GradTape::new();
    let p = tape.constant(pi.clone());
    let (edges, relaxed) = sample_keep(&mut tape, p, tau, mode, noise)?;
    Ok(RelevanceGraph {
        edges: tape.value(edges).clone(),
        logits: pi.clone(),
        relaxed: relaxed.map(|r| tape.value(r).clone()),
        tau,
        mode,
    })
}

/// Fixed 3x3-neighbourhood relevance: tokens `i != j` are related when they
/// belong to the same `h_z x w_z` template and their grid cells touch.
/// `alive` lists the original token positions still present.
pub fn static_grid_relevance(h_z: usize, w_z: usize, alive: &[usize]) -> Tensor {
    let per = h_z * w_z;
    let n = alive.len();
    let mut e = Tensor::zeros(&[n, n]);
    for (a, &i) in alive.iter().enumerate() {
        for (b, &j) in alive.iter().enumerate() {
            if a == b || i / per != j / per {
                continue;
            }
            let (yi, xi) = ((i % per) / w_z, (i % per) % w_z);
            let (yj, xj) = ((j % per) / w_z, (j % per) % w_z);
            if yi.abs_diff(yj) <= 1 && xi.abs_diff(xj) <= 1 {
                e.set(&[a, b], 1.0);
            }
        }
    }
    e
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
    fn pooling_constant_map() {
        let c = CorrelationMap::from_head_major(Tensor::full(&[2, 5, 3], 0.7), None).unwrap();
        let v = pool_nodes(&c);
        assert_eq!(v.shape(), &[3, 1, 2]);
        assert!(v.data().iter().all(|&x| (x - 0.7).abs() < 1e-15));
    }

    #[test]
    fn pooling_two_rows() {
        let c = CorrelationMap::from_token_major(&Tensor::new(&[2, 1, 1], vec![1.0, 3.0]).unwrap(), None).unwrap();
        assert_eq!(pool_nodes(&c).data(), &[2.0]);
    }

    #[test]
    fn pooling_matches_column_means() {
        let mut rng = RngStream::new(1);
        let t = random(&[7, 4, 3], &mut rng);
        let c = CorrelationMap::from_token_major(&t, None).unwrap();
        let v = pool_nodes(&c);
        for j in 0..4 {
            for h in 0..3 {
                let mean: f64 = (0..7).map(|i| t.at(&[i, j, h])).sum::<f64>() / 7.0;
                assert!((v.at(&[j, 0, h]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_outer_product() {
        let v = Tensor::new(&[2, 1, 1], vec![1.0, 2.0]).unwrap();
        let a = node_similarity(&v).unwrap();
        assert_eq!(a.data(), &[1.0, 2.0, 2.0, 4.0]);
        let mut rng = RngStream::new(2);
        let a = node_similarity(&random(&[5, 1, 3], &mut rng)).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                for h in 0..3 {
                    assert_eq!(a.at(&[i, j, h]), a.at(&[j, i, h]));
                }
            }
        }
        let z = node_similarity(&Tensor::zeros(&[3, 1, 2])).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn logits_normalized_and_zero_mlp_is_uniform() {
        let mut rng = RngStream::new(3);
        let a = random(&[4, 4, 3], &mut rng);
        let mlp = TinyMlp::random(3, 6, 0.5, &mut rng);
        let pi = relevance_logits(&a, &mlp).unwrap();
        for p in pi.data().chunks(2) {
            assert!((p[0].exp() + p[1].exp() - 1.0).abs() < 1e-6);
        }
        let pi = relevance_logits(&a, &TinyMlp::zeros(3, 6)).unwrap();
        for &p in pi.data() {
            assert!((p - 0.5f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn logits_match_hand_forward() {
        let mlp = TinyMlp::new(
            Tensor::new(&[1, 2], vec![1.0, -2.0]).unwrap(),
            Tensor::new(&[2], vec![0.5, 0.0]).unwrap(),
            Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::new(&[2], vec![0.0, 0.25]).unwrap(),
        )
        .unwrap();
        let a = Tensor::new(&[1, 1, 1], vec![1.0]).unwrap();
        let pi = relevance_logits(&a, &mlp).unwrap();
        // hidden = gelu([1.5, -2.0]); out = hidden + [0, 0.25]
        let gelu = |x: f64| 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()));
        let (o0, o1) = (gelu(1.5), gelu(-2.0) + 0.25);
        let lse = (o0.exp() + o1.exp()).ln();
        assert!((pi.data()[0] - (o0 - lse)).abs() < 1e-12);
        assert!((pi.data()[1] - (o1 - lse)).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_low_temperature_is_one_hot() {
        let pi = Tensor::new(&[1, 1, 2], vec![0.9f64.ln(), 0.1f64.ln()]).unwrap();
        let g = gumbel_relevance_with_noise(&pi, 1e-3, SampleMode::Soft, None).unwrap();
        let r = g.relaxed.unwrap();
        assert!((r.data()[0] - 1.0).abs() < 1e-12 && r.data()[1].abs() < 1e-12);
    }

    #[test]
    fn hard_mode_rows_are_one_hot_and_seed_stable() {
        let mut rng = RngStream::new(0);
        let pi = relevance_logits(&random(&[5, 5, 3], &mut rng), &TinyMlp::random(3, 6, 1.0, &mut rng)).unwrap();
        let first = gumbel_relevance(&pi, 1.0, SampleMode::HardStraightThrough, &mut RngStream::new(42)).unwrap();
        assert!(first.edges.data().iter().all(|&e| e == 0.0 || e == 1.0));
        let relaxed = first.relaxed.as_ref().unwrap();
        for p in relaxed.data().chunks(2) {
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        }
        for _ in 0..100 {
            let again = gumbel_relevance(&pi, 1.0, SampleMode::HardStraightThrough, &mut RngStream::new(42)).unwrap();
            assert_eq!(again.edges, first.edges);
        }
    }

    #[test]
    fn rejects_nonpositive_temperature() {
        let pi = Tensor::zeros(&[2, 2, 2]);
        let mut rng = RngStream::new(1);
        assert!(matches!(
            gumbel_relevance(&pi, 0.0, SampleMode::Soft, &mut rng),
            Err(Error::InvalidArgument(_))
        ));
        assert!(gumbel_relevance(&pi, -1.0, SampleMode::Deterministic, &mut rng).is_err());
    }

    #[test]
    fn static_grid_neighbourhood() {
        let e = static_grid_relevance(2, 2, &[0, 1, 2, 3, 4]);
        // Token 4 starts a second template: no edges to the first.
        for j in 0..4 {
            assert_eq!(e.at(&[4, j]), 0.0);
            assert_eq!(e.at(&[j, j]), 0.0);
        }
        assert_eq!(e.at(&[0, 3]), 1.0);
    }
}
