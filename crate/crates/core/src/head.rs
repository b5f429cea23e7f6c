//! Prediction head over the search-token grid, box decoding and the
//! training losses (L1, GIoU, focal).
//!
//! The head runs three branches of four 3x3 token-grid convolutions: a score
//! map, a sub-cell offset map and a normalized size map. All outputs are in
//! normalized search-region coordinates.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{math, GradTape, Tensor, Var};

/// Axis-aligned box, center form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Rejects non-finite values and non-positive extents.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("bbox"));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::Degenerate(format!("box extent {w} x {h}")));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1)
    }

    /// Top-left form `(x, y, w, h)`, as used in sequence annotation files.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x + 0.5 * w, y + 0.5 * h, w, h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.cx - 0.5 * self.w, self.cy - 0.5 * self.h, self.w, self.h]
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let (inter, union, _) = overlap(self, other);
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        math::sqrt((self.cx - other.cx) * (self.cx - other.cx) + (self.cy - other.cy) * (self.cy - other.cy))
    }
}

/// `(intersection, union, enclosing area)`.
fn overlap(a: &BBox, b: &BBox) -> (f64, f64, f64) {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let enclosing = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    (inter, union, enclosing)
}

fn check_box(name: &'static str, b: &BBox) -> Result<()> {
    if !b.to_array().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(name));
    }
    if b.w <= 0.0 || b.h <= 0.0 {
        return Err(Error::Degenerate(format!("{name}: zero-area box {} x {}", b.w, b.h)));
    }
    Ok(())
}

/// Generalized IoU in `[-1, 1]`.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    check_box("giou", a)?;
    check_box("giou", b)?;
    let (inter, union, enclosing) = overlap(a, b);
    Ok(inter / union - (enclosing - union) / enclosing)
}

pub fn giou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    Ok(1.0 - giou(pred, gt)?)
}

/// Mean absolute error over `(cx, cy, w, h)`.
pub fn l1_loss(pred: &BBox, gt: &BBox) -> f64 {
    pred.to_array()
        .iter()
        .zip(gt.to_array())
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / 4.0
}

/// Per-cell maps of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    /// `[h_x, w_x]` in `[0, 1]`.
    pub score: Tensor,
    /// `[2, h_x, w_x]`: sub-cell x and y offsets.
    pub offset: Tensor,
    /// `[2, h_x, w_x]`: normalized width and height.
    pub size: Tensor,
}

impl HeadOutput {
    pub fn new(score: Tensor, offset: Tensor, size: Tensor) -> Result<Self> {
        let s = score.shape();
        if s.len() != 2 || offset.shape() != [2, s[0], s[1]] || size.shape() != [2, s[0], s[1]] {
            return Err(Error::shape(
                "head_output",
                format!("score {:?}, offset {:?}, size {:?}", s, offset.shape(), size.shape()),
            ));
        }
        Ok(Self { score, offset, size })
    }

    /// `(h_x, w_x)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.score.shape()[0], self.score.shape()[1])
    }

    /// `(x_d, y_d, score)` of the maximum, ties to the lowest row-major index.
    pub fn peak(&self) -> (usize, usize, f64) {
        let (_, w) = self.grid();
        let mut best = 0;
        let d = self.score.data();
        for (i, &v) in d.iter().enumerate() {
            if v > d[best] {
                best = i;
            }
        }
        (best % w, best / w, d[best])
    }
}

/// Box at the score peak: center from cell index plus offset, size read
/// directly.
pub fn decode_box(out: &HeadOutput) -> BBox {
    let (h, w) = out.grid();
    let (xd, yd, _) = out.peak();
    BBox {
        cx: (xd as f64 + out.offset.at(&[0, yd, xd])) / w as f64,
        cy: (yd as f64 + out.offset.at(&[1, yd, xd])) / h as f64,
        w: out.size.at(&[0, yd, xd]),
        h: out.size.at(&[1, yd, xd]),
    }
}

/// Grid cell `(x, y)` containing a normalized point, clamped to the grid.
pub fn cell_of(cx: f64, cy: f64, grid: (usize, usize)) -> (usize, usize) {
    let (h, w) = grid;
    let clamp = |v: f64, n: usize| (math::floor(v * n as f64).max(0.0) as usize).min(n - 1);
    (clamp(cx, w), clamp(cy, h))
}

/// Gaussian bump of width `sigma` cells peaking at exactly 1 on the cell
/// containing the box center; `[h, w]`.
pub fn gaussian_target(gt: &BBox, grid: (usize, usize), sigma: f64) -> Tensor {
    let (h, w) = grid;
    let (gx, gy) = cell_of(gt.cx, gt.cy, grid);
    let mut t = Tensor::zeros(&[h, w]);
    let d = t.data_mut();
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - gx as f64;
            let dy = y as f64 - gy as f64;
            d[y * w + x] = math::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        }
    }
    t
}

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;

/// Penalty-reduced focal loss of score logits against a heatmap target.
pub fn focal_loss(score_logits: &Tensor, target: &Tensor) -> Result<f64> {
    let mut tape = GradTape::new();
    let x = tape.constant(score_logits.clone());
    let l = tape.focal_loss(x, target, FOCAL_ALPHA, FOCAL_BETA)?;
    tape.value(l).item()
}

fn pick(tape: &mut GradTape, x: Var, i: usize) -> Result<Var> {
    tape.select(x, 0, &[i])
}

/// `1 - GIoU` of a predicted `[4]` box `(cx, cy, w, h)` against a constant box.
pub fn giou_loss_var(tape: &mut GradTape, pred: Var, gt: &BBox) -> Result<Var> {
    check_box("giou", gt)?;
    if tape.shape(pred) != [4] {
        return Err(Error::shape("giou_loss", format!("prediction {:?}", tape.shape(pred))));
    }
    let p = tape.value(pred).data();
    if p[2] <= 0.0 || p[3] <= 0.0 {
        return Err(Error::Degenerate(format!("giou: zero-area prediction {} x {}", p[2], p[3])));
    }
    let (cx, cy, w, h) = (
        pick(tape, pred, 0)?,
        pick(tape, pred, 1)?,
        pick(tape, pred, 2)?,
        pick(tape, pred, 3)?,
    );
    let hw = tape.scale(w, 0.5)?;
    let hh = tape.scale(h, 0.5)?;
    let ax1 = tape.sub(cx, hw)?;
    let ax2 = tape.add(cx, hw)?;
    let ay1 = tape.sub(cy, hh)?;
    let ay2 = tape.add(cy, hh)?;
    let [gx1, gy1, gx2, gy2] = gt.corners();
    let mut c = |v: f64| tape.constant(Tensor::scalar(v));
    let (bx1, by1, bx2, by2, b_area) = (c(gx1), c(gy1), c(gx2), c(gy2), c(gt.area()));

    let ix2 = tape.minimum(ax2, bx2)?;
    let ix1 = tape.maximum(ax1, bx1)?;
    let iw = tape.sub(ix2, ix1)?;
    let iw = tape.relu(iw)?;
    let iy2 = tape.minimum(ay2, by2)?;
    let iy1 = tape.maximum(ay1, by1)?;
    let ih = tape.sub(iy2, iy1)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;
    let a_area = tape.mul(w, h)?;
    let sum = tape.add(a_area, b_area)?;
    let union = tape.sub(sum, inter)?;
    let iou = tape.div(inter, union)?;

    let ex2 = tape.maximum(ax2, bx2)?;
    let ex1 = tape.minimum(ax1, bx1)?;
    let ew = tape.sub(ex2, ex1)?;
    let ey2 = tape.maximum(ay2, by2)?;
    let ey1 = tape.minimum(ay1, by1)?;
    let eh = tape.sub(ey2, ey1)?;
    let enclosing = tape.mul(ew, eh)?;
    let gap = tape.sub(enclosing, union)?;
    let penalty = tape.div(gap, enclosing)?;
    let g = tape.sub(iou, penalty)?;
    let neg = tape.scale(g, -1.0)?;
    let loss = tape.add_scalar(neg, 1.0)?;
    tape.reshape(loss, &[1])
}

/// Mean absolute error of a `[4]` prediction against a constant box.
pub fn l1_loss_var(tape: &mut GradTape, pred: Var, gt: &BBox) -> Result<Var> {
    let g = tape.constant(Tensor::new(&[4], gt.to_array().to_vec())?);
    let d = tape.sub(pred, g)?;
    let d = tape.abs(d)?;
    let s = tape.sum(d)?;
    tape.scale(s, 0.25)
}

/// Conv-branch parameters bound to the tape.
#[derive(Clone, Debug)]
pub struct HeadVars {
    pub norm: (Var, Var),
    /// Score, offset and size branches; each a list of `(weight [9 c_in, c_out], bias)`.
    pub branches: [Vec<(Var, Var)>; 3],
}

/// Per-cell head outputs on the tape, token order (row-major cells).
#[derive(Clone, Copy, Debug)]
pub struct HeadMaps {
    /// `[N_x]` pre-sigmoid scores.
    pub score_logits: Var,
    /// `[N_x, 2]` in `(0, 1)`.
    pub offset: Var,
    /// `[N_x, 2]` in `(0, 1)`.
    pub size: Var,
}

pub const HEAD_LAYERS: usize = 4;

/// Output widths of one branch: halving from `d_model`, then `out`.
pub fn branch_widths(d_model: usize, out: usize) -> Vec<usize> {
    let mut w: Vec<usize> = (1..HEAD_LAYERS).map(|i| (d_model >> i).max(1)).collect();
    w.push(out);
    w
}

fn conv_branch(tape: &mut GradTape, x: Var, layers: &[(Var, Var)], grid: (usize, usize)) -> Result<Var> {
    let mut y = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let cols = tape.im2col3x3(y, grid.0, grid.1)?;
        y = tape.matmul(cols, w)?;
        y = tape.add_broadcast(y, b)?;
        if i + 1 < layers.len() {
            y = tape.relu(y)?;
        }
    }
    Ok(y)
}

/// Runs the three branches on search tokens `[N_x, d]`.
pub fn head_forward(tape: &mut GradTape, search: Var, vars: &HeadVars, grid: (usize, usize), eps: f64) -> Result<HeadMaps> {
    let n = grid.0 * grid.1;
    if tape.shape(search).first() != Some(&n) {
        return Err(Error::shape(
            "head",
            format!("{:?} search tokens for grid {}x{}", tape.shape(search), grid.0, grid.1),
        ));
    }
    let x = tape.layer_norm(search, vars.norm.0, vars.norm.1, eps)?;
    let score = conv_branch(tape, x, &vars.branches[0], grid)?;
    let score_logits = tape.reshape(score, &[n])?;
    let offset = conv_branch(tape, x, &vars.branches[1], grid)?;
    let offset = tape.sigmoid(offset)?;
    let size = conv_branch(tape, x, &vars.branches[2], grid)?;
    let size = tape.sigmoid(size)?;
    Ok(HeadMaps {
        score_logits,
        offset,
        size,
    })
}

/// Reads the tape maps into a [`HeadOutput`].
pub fn head_output(tape: &GradTape, maps: &HeadMaps, grid: (usize, usize)) -> Result<HeadOutput> {
    let (h, w) = grid;
    let score = tape.value(maps.score_logits).map(math::sigmoid).reshape(&[h, w])?;
    let offset = tape.value(maps.offset).transpose()?.reshape(&[2, h, w])?;
    let size = tape.value(maps.size).transpose()?.reshape(&[2, h, w])?;
    HeadOutput::new(score, offset, size)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
    pub focal: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 5.0,
            giou: 2.0,
            focal: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub l1: Var,
    pub giou: Var,
    pub focal: Var,
}

/// The box predicted at the ground-truth cell, `[4]` on the tape.
pub fn box_at_cell(tape: &mut GradTape, maps: &HeadMaps, grid: (usize, usize), cell: (usize, usize)) -> Result<Var> {
    let (h, w) = grid;
    let idx = cell.1 * w + cell.0;
    let o = tape.select(maps.offset, 0, &[idx])?;
    let o = tape.reshape(o, &[2])?;
    let inv = tape.constant(Tensor::new(&[2], alloc::vec![1.0 / w as f64, 1.0 / h as f64])?);
    let o = tape.mul(o, inv)?;
    let base = tape.constant(Tensor::new(
        &[2],
        alloc::vec![cell.0 as f64 / w as f64, cell.1 as f64 / h as f64],
    )?);
    let center = tape.add(o, base)?;
    let s = tape.select(maps.size, 0, &[idx])?;
    let s = tape.reshape(s, &[2])?;
    tape.concat(&[center, s], 0)
}

/// Weighted L1 + GIoU (both at the ground-truth cell) + focal loss.
pub fn tracking_loss(
    tape: &mut GradTape,
    maps: &HeadMaps,
    grid: (usize, usize),
    gt: &BBox,
    weights: &LossWeights,
) -> Result<LossTerms> {
    check_box("tracking_loss", gt)?;
    let cell = cell_of(gt.cx, gt.cy, grid);
    let pred = box_at_cell(tape, maps, grid, cell)?;
    let l1 = l1_loss_var(tape, pred, gt)?;
    let giou = giou_loss_var(tape, pred, gt)?;
    let target = gaussian_target(gt, grid, 1.0).reshape(&[grid.0 * grid.1])?;
    let focal = tape.focal_loss(maps.score_logits, &target, FOCAL_ALPHA, FOCAL_BETA)?;
    let a = tape.scale(l1, weights.l1)?;
    let b = tape.scale(giou, weights.giou)?;
    let c = tape.scale(focal, weights.focal)?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(LossTerms { total, l1, giou, focal })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, relative_error, RngStream};
    use alloc::vec;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn decode_single_peak() {
        let mut score = Tensor::zeros(&[16, 16]);
        score.set(&[5, 3], 1.0);
        let mut offset = Tensor::zeros(&[2, 16, 16]);
        offset.set(&[0, 5, 3], 0.5);
        offset.set(&[1, 5, 3], 0.25);
        let mut size = Tensor::zeros(&[2, 16, 16]);
        size.set(&[0, 5, 3], 0.25);
        size.set(&[1, 5, 3], 0.5);
        let out = decode_box(&HeadOutput::new(score, offset, size).unwrap());
        assert_eq!(out.cx, 3.5 / 16.0);
        assert_eq!(out.cy, 5.25 / 16.0);
        assert_eq!((out.w, out.h), (0.25, 0.5));
    }

    #[test]
    fn uniform_score_peaks_at_origin() {
        let out = HeadOutput::new(
            Tensor::full(&[4, 4], 0.3),
            Tensor::zeros(&[2, 4, 4]),
            Tensor::ones(&[2, 4, 4]),
        )
        .unwrap();
        assert_eq!(out.peak(), (0, 0, 0.3));
    }

    #[test]
    fn peak_matches_exhaustive_scan() {
        let mut rng = RngStream::new(5);
        for _ in 0..50 {
            let data: Vec<f64> = (0..35).map(|_| (rng.uniform() * 4.0).floor()).collect();
            let out = HeadOutput::new(
                Tensor::new(&[5, 7], data.clone()).unwrap(),
                Tensor::zeros(&[2, 5, 7]),
                Tensor::ones(&[2, 5, 7]),
            )
            .unwrap();
            let mut best = (0, 0);
            for y in 0..5 {
                for x in 0..7 {
                    if data[y * 7 + x] > data[best.1 * 7 + best.0] {
                        best = (x, y);
                    }
                }
            }
            let (x, y, _) = out.peak();
            assert_eq!((x, y), best);
        }
    }

    #[test]
    fn giou_examples() {
        let a = b(0.3, 0.4, 0.2, 0.1);
        assert_eq!(giou(&a, &a).unwrap(), 1.0);
        assert_eq!(giou_loss(&a, &a).unwrap(), 0.0);
        let u = BBox::from_corners(0.0, 0.0, 1.0, 1.0).unwrap();
        let v = BBox::from_corners(1.0, 1.0, 2.0, 2.0).unwrap();
        assert!((giou(&u, &v).unwrap() + 0.5).abs() < 1e-15);
        let far = b(1e9, 1e9, 1.0, 1.0);
        assert!(giou(&u, &far).unwrap() < -1.0 + 1e-8);
        let flat = BBox {
            cx: 0.0,
            cy: 0.0,
            w: 0.0,
            h: 1.0,
        };
        assert!(matches!(giou(&u, &flat), Err(Error::Degenerate(_))));
    }

    #[test]
    fn giou_symmetric_and_below_iou() {
        let mut rng = RngStream::new(8);
        for _ in 0..200 {
            let mut r = || b(rng.uniform(), rng.uniform(), 0.05 + rng.uniform(), 0.05 + rng.uniform());
            let (p, q) = (r(), r());
            let g = giou(&p, &q).unwrap();
            assert!((g - giou(&q, &p).unwrap()).abs() < 1e-15);
            assert!(g <= p.iou(&q) + 1e-15);
            assert!((-1.0..=1.0).contains(&g));
        }
    }

    #[test]
    fn giou_var_matches_direct() {
        let mut rng = RngStream::new(9);
        for _ in 0..20 {
            let p = b(rng.uniform(), rng.uniform(), 0.1 + rng.uniform(), 0.1 + rng.uniform());
            let g = b(rng.uniform(), rng.uniform(), 0.1 + rng.uniform(), 0.1 + rng.uniform());
            let mut tape = GradTape::new();
            let pv = tape.variable(Tensor::new(&[4], p.to_array().to_vec()).unwrap());
            let l = giou_loss_var(&mut tape, pv, &g).unwrap();
            assert!((tape.value(l).data()[0] - giou_loss(&p, &g).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn box_losses_match_finite_differences() {
        let mut rng = RngStream::new(10);
        for _ in 0..10 {
            let p = [rng.uniform(), rng.uniform(), 0.1 + rng.uniform(), 0.1 + rng.uniform()];
            let g = b(rng.uniform(), rng.uniform(), 0.1 + rng.uniform(), 0.1 + rng.uniform());
            let x = Tensor::new(&[4], p.to_vec()).unwrap();
            for which in 0..2 {
                let f = |t: &Tensor| -> Result<f64> {
                    let mut tape = GradTape::new();
                    let v = tape.variable(t.clone());
                    let l = if which == 0 {
                        giou_loss_var(&mut tape, v, &g)?
                    } else {
                        l1_loss_var(&mut tape, v, &g)?
                    };
                    tape.value(l).item()
                };
                let mut tape = GradTape::new();
                let v = tape.variable(x.clone());
                let l = if which == 0 {
                    giou_loss_var(&mut tape, v, &g).unwrap()
                } else {
                    l1_loss_var(&mut tape, v, &g).unwrap()
                };
                let grads = tape.backward(l).unwrap();
                let mut ff = f;
                let num = finite_difference_gradient(&mut ff, &x, 1e-5).unwrap();
                let e = relative_error(grads.get(v).unwrap(), &num, 1e-6);
                assert!(e < 1e-4, "{which} {:?} {:?} {e}", grads.get(v).unwrap().data(), num.data());
            }
        }
    }

    #[test]
    fn gaussian_target_peaks_at_cell() {
        let t = gaussian_target(&b(0.55, 0.3, 0.1, 0.1), (8, 8), 1.0);
        assert_eq!(t.at(&[2, 4]), 1.0);
        assert_eq!(t.data().iter().filter(|&&v| v >= 1.0).count(), 1);
        assert!((t.at(&[2, 5]) - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn focal_prefers_matching_scores() {
        let target = gaussian_target(&b(0.5, 0.5, 0.1, 0.1), (4, 4), 1.0);
        let good = target.map(|y| if y >= 1.0 { 4.0 } else { -4.0 });
        let bad = target.map(|y| if y >= 1.0 { -4.0 } else { 4.0 });
        assert!(focal_loss(&good, &target).unwrap() < focal_loss(&bad, &target).unwrap());
    }

    #[test]
    fn branch_widths_halve() {
        assert_eq!(branch_widths(192, 2), vec![96, 48, 24, 2]);
    }

    #[test]
    fn decode_translation_equivariance() {
        let mk = |px: usize, py: usize| {
            let mut s = Tensor::zeros(&[6, 6]);
            s.set(&[py, px], 1.0);
            decode_box(&HeadOutput::new(s, Tensor::full(&[2, 6, 6], 0.3), Tensor::full(&[2, 6, 6], 0.2)).unwrap())
        };
        let (a, c) = (mk(1, 2), mk(3, 5));
        assert!((c.cx - a.cx - 2.0 / 6.0).abs() < 1e-15);
        assert!((c.cy - a.cy - 3.0 / 6.0).abs() < 1e-15);
    }
}
