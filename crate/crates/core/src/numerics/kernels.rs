//! Pure kernels over [`Tensor`]. The tape reuses the row helpers below.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::math;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Strided view of a row-major matrix for [`gemm`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `? x cols` matrix.
    pub fn rows_t(data: &'a [f64], cols: usize) -> Self {
        Self { data, rs: 1, cs: cols }
    }

    fn fits(&self, r: usize, c: usize) -> bool {
        r == 0 || c == 0 || (r - 1) * self.rs + (c - 1) * self.cs < self.data.len()
    }
}

/// `c = a * b + beta * c` for an `m x k` by `k x n` product; `c` is row-major `m x n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert!(a.fits(m, k) && b.fits(k, n) && c.len() >= m * n, "gemm operand out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    // SAFETY: the bounds check above covers every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Batch layout of a (possibly broadcast) matrix product.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
}

/// Resolves shapes for `a @ b` (or `a @ b^T` when `trans_b`). Leading axes are
/// batch axes; one side may omit them and is then broadcast.
pub(crate) fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatmulDims> {
    let err = || Error::shape("matmul", format!("{a:?} x {b:?}{}", if trans_b { "^T" } else { "" }));
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != bk {
        return Err(err());
    }
    let lead_a = &a[..a.len() - 2];
    let lead_b = &b[..b.len() - 2];
    let lead = match (lead_a.is_empty(), lead_b.is_empty()) {
        (_, true) => lead_a,
        (true, false) => lead_b,
        (false, false) if lead_a == lead_b => lead_a,
        _ => return Err(err()),
    };
    let mut out_shape = lead.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulDims {
        batch: lead.iter().product(),
        a_batched: !lead_a.is_empty(),
        b_batched: !lead_b.is_empty(),
        m,
        k,
        n,
        out_shape,
    })
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], d: &MatmulDims, trans_b: bool) -> Vec<f64> {
    let (m, k, n) = (d.m, d.k, d.n);
    let mut out = vec![0.0; d.batch * m * n];
    let b_view = |off: usize| {
        let s = &b[off..off + k * n];
        if trans_b {
            MatRef::rows_t(s, k)
        } else {
            MatRef::rows(s, n)
        }
    };
    if d.a_batched && !d.b_batched {
        // Fold the batch into the row dimension: one large product.
        gemm(d.batch * m, k, n, MatRef::rows(a, k), b_view(0), 0.0, &mut out);
        return out;
    }
    for bi in 0..d.batch {
        let ao = if d.a_batched { bi * m * k } else { 0 };
        let bo = if d.b_batched { bi * k * n } else { 0 };
        gemm(
            m,
            k,
            n,
            MatRef::rows(&a[ao..ao + m * k], k),
            b_view(bo),
            0.0,
            &mut out[bi * m * n..(bi + 1) * m * n],
        );
    }
    out
}

/// Matrix product over the last two axes, broadcasting leading batch axes.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = matmul_dims(a.shape(), b.shape(), false)?;
    let out = matmul_raw(a.data(), b.data(), &d, false);
    Ok(Tensor::from_parts(d.out_shape, out))
}

/// `x @ w + b` with `w: [in, out]` and `b: [out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut y = matmul(x, w)?;
    let n = b.len();
    if w.shape().last() != Some(&n) {
        return Err(Error::shape(
            "linear",
            format!("bias {:?} for weight {:?}", b.shape(), w.shape()),
        ));
    }
    for row in y.data_mut().chunks_mut(n) {
        for (v, bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Ok(y)
}

pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = math::exp(v - max);
        sum += *o;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|o| *o *= inv);
}

pub(crate) fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = x.iter().map(|&v| math::exp(v - max)).sum();
    let lse = max + math::ln(sum);
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

fn along_axis(x: &Tensor, axis: usize, f: impl Fn(&[f64], &mut [f64])) -> Result<Tensor> {
    if axis >= x.ndim() {
        return Err(Error::shape("softmax", format!("axis {axis} of {:?}", x.shape())));
    }
    let last = x.ndim() - 1;
    if axis == last {
        let n = x.shape()[last];
        let mut out = vec![0.0; x.len()];
        for (src, dst) in x.data().chunks(n).zip(out.chunks_mut(n)) {
            f(src, dst);
        }
        return Ok(Tensor::from_parts(x.shape().to_vec(), out));
    }
    let mut perm: Vec<usize> = (0..x.ndim()).collect();
    perm.swap(axis, last);
    let moved = x.permute(&perm)?;
    along_axis(&moved, last, f)?.permute(&perm)
}

/// Max-shifted softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    along_axis(x, axis, softmax_row)
}

pub fn log_softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    along_axis(x, axis, log_softmax_row)
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + math::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + math::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = math::exp(-0.5 * x * x) / math::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

/// Exact (erf) GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Normalizes each last-axis row; returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm_raw(x: &[f64], n: usize, gamma: &[f64], beta: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / n;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rs = 1.0 / math::sqrt(var + eps);
        rstd[r] = rs;
        for j in 0..n {
            let h = (row[j] - mean) * rs;
            xhat[r * n + j] = h;
            y[r * n + j] = h * gamma[j] + beta[j];
        }
    }
    (y, xhat, rstd)
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let n = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
    if gamma.len() != n || beta.len() != n {
        return Err(Error::shape("layer_norm", format!("affine params for width {n}")));
    }
    let (y, _, _) = layer_norm_raw(x.data(), n, gamma.data(), beta.data(), eps);
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn random(shape: &[usize], rng: &mut RngStream) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(&[i, p]) * b.at(&[p, j]);
                }
                out.set(&[i, j], s);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let i = Tensor::eye(2);
        let b = Tensor::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap(), b);
        let two = Tensor::from_rows(&[&[2.0]]).unwrap();
        let three = Tensor::from_rows(&[&[3.0]]).unwrap();
        assert_eq!(matmul(&two, &three).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngStream::new(11);
        let a = random(&[4, 5], &mut rng);
        let b = random(&[5, 3], &mut rng);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
        for &(m, k, n) in &[(64, 64, 64), (17, 33, 9), (1, 64, 1)] {
            let a = random(&[m, k], &mut rng);
            let b = random(&[k, n], &mut rng);
            assert!(matmul(&a, &b).unwrap().max_abs_diff(&triple_loop(&a, &b)) < 1e-12);
        }
    }

    #[test]
    fn matmul_broadcasts_leading_axis() {
        let mut rng = RngStream::new(2);
        let a = random(&[3, 4, 5], &mut rng);
        let b = random(&[5, 2], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for h in 0..3 {
            let ah = a.select(0, &[h]).unwrap().reshape(&[4, 5]).unwrap();
            let ch = c.select(0, &[h]).unwrap().reshape(&[4, 2]).unwrap();
            assert!(ch.max_abs_diff(&triple_loop(&ah, &b)) < 1e-12);
        }
        let bb = random(&[3, 5, 2], &mut rng);
        let c = matmul(&a, &bb).unwrap();
        assert_eq!(c.shape(), &[3, 4, 2]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
        assert!(matmul(&Tensor::zeros(&[2, 2, 3]), &Tensor::zeros(&[3, 3, 2])).is_err());
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        assert_eq!(softmax(&x, 0).unwrap().data(), &[0.5, 0.5]);
        let x = Tensor::new(&[2], vec![1000.0, 1000.0]).unwrap();
        assert_eq!(softmax(&x, 0).unwrap().data(), &[0.5, 0.5]);
        let x = Tensor::new(&[2], vec![0.0, 3f64.ln()]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_non_last_axis() {
        let mut rng = RngStream::new(5);
        let x = random(&[3, 4, 2], &mut rng);
        let y = softmax(&x, 1).unwrap();
        for a in 0..3 {
            for c in 0..2 {
                let s: f64 = (0..4).map(|b| y.at(&[a, b, c])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let l = log_softmax(&x, 1).unwrap();
        assert!(l.map(math::exp).max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = RngStream::new(8);
        let x = random(&[5, 7], &mut rng);
        let y = layer_norm(&x, &Tensor::ones(&[7]), &Tensor::zeros(&[7]), 0.0).unwrap();
        for r in 0..5 {
            let row: Vec<f64> = (0..7).map(|j| y.at(&[r, j])).collect();
            let mean = row.iter().sum::<f64>() / 7.0;
            let var = row.iter().map(|v| v * v).sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        let h = 1e-6;
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }
}
