use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
///
/// Storage is reference counted, so cloning is cheap; mutation goes through
/// [`Tensor::data_mut`], which copies only when the buffer is shared.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    /// Internal constructor for callers that already validated the shape.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("tensor", "ragged rows"));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::NonScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < d, "index {ix} out of range on axis {i}");
            off = off * d + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data_mut()[off] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest elementwise absolute difference; `INFINITY` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Reorders axes; `perm[i]` names the input axis that becomes output axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_perm(&self.shape, perm)?;
        Ok(permute_data(&self.shape, &self.data, perm))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        let n = self.ndim();
        if n < 2 {
            return Err(Error::shape("transpose", "needs at least two axes"));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        self.permute(&perm)
    }

    /// Takes the entries at `indices` along `axis`.
    pub fn select(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        if axis >= self.ndim() {
            return Err(Error::shape("select", format!("axis {axis} of {:?}", self.shape)));
        }
        if indices.is_empty() || indices.iter().any(|&i| i >= self.shape[axis]) {
            return Err(Error::shape(
                "select",
                format!("indices {indices:?} on axis of extent {}", self.shape[axis]),
            ));
        }
        Ok(select_data(&self.shape, &self.data, axis, indices))
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        for p in parts {
            if p.ndim() != first.ndim()
                || axis >= p.ndim()
                || p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} on axis {axis}", p.shape, first.shape),
                ));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self::from_parts(shape, data))
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub(crate) fn check_perm(shape: &[usize], perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() {
        return Err(Error::shape("permute", format!("{perm:?} for {shape:?}")));
    }
    for &p in perm {
        if p >= shape.len() || seen[p] {
            return Err(Error::shape("permute", format!("{perm:?} for {shape:?}")));
        }
        seen[p] = true;
    }
    Ok(())
}

pub(crate) fn permute_data(shape: &[usize], data: &[f64], perm: &[usize]) -> Tensor {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let nd = out_shape.len();
    if nd == 0 {
        return Tensor::from_parts(out_shape, data.to_vec());
    }
    // Odometer over output indices; innermost axis handled as a strided run.
    let mut idx = vec![0usize; nd];
    let last = nd - 1;
    let run = out_shape[last];
    let run_stride = src_strides[last];
    loop {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for r in 0..run {
            out.push(data[base + r * run_stride]);
        }
        let mut axis = last;
        loop {
            if axis == 0 {
                return Tensor::from_parts(out_shape, out);
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

pub(crate) fn select_data(shape: &[usize], data: &[f64], axis: usize, indices: &[usize]) -> Tensor {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let extent = shape[axis];
    let mut out = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &i in indices {
            let start = (o * extent + i) * inner;
            out.extend_from_slice(&data[start..start + inner]);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = indices.len();
    Tensor::from_parts(out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn permute_matches_index_arithmetic() {
        let t = Tensor::new(&[2, 3, 4], (0..24).map(|x| x as f64).collect()).unwrap();
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.at(&[c, a, b]), t.at(&[a, b, c]));
                }
            }
        }
    }

    #[test]
    fn select_and_concat_are_inverse() {
        let t = Tensor::new(&[3, 4], (0..12).map(|x| x as f64).collect()).unwrap();
        let a = t.select(1, &[0, 1]).unwrap();
        let b = t.select(1, &[2, 3]).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), t);
    }

    #[test]
    fn clone_on_write() {
        let a = Tensor::zeros(&[2]);
        let mut b = a.clone();
        b.data_mut()[0] = 1.0;
        assert_eq!(a.data(), &[0.0, 0.0]);
        assert_eq!(b.data(), &[1.0, 0.0]);
    }
}
