//! Online single-object tracking: a fixed template plus a FIFO of online
//! patches, per-frame search crops around the previous box, and box decoding
//! back into frame pixels.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::head::{decode_box, BBox};
use crate::image::{patchify, CropWindow, Image};
use crate::model::{Model, ModelInput};
use crate::numerics::{math, RngStream, Tensor};

/// Frames between patch updates at frame `t`: 5 up to frame 100, doubling
/// every further 100 frames, and 160 after frame 500.
pub fn update_interval(t: usize) -> usize {
    if t <= 100 {
        5
    } else if t > 500 {
        160
    } else {
        5 << ((t - 1) / 100)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    /// Template and patch crop side relative to `sqrt(w * h)`.
    pub template_factor: f64,
    /// Search crop side relative to `sqrt(w * h)`.
    pub search_factor: f64,
    /// Push a patch only when the peak score exceeds this.
    pub quality_gate: Option<f64>,
    /// Smallest box side in pixels after clamping.
    pub min_side: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            template_factor: 2.0,
            search_factor: 4.0,
            quality_gate: None,
            min_side: 4.0,
        }
    }
}

/// Fixed template (never replaced) plus up to `n - 1` online patches.
#[derive(Clone, Debug)]
pub struct TemplateBank {
    fixed: Tensor,
    patches: VecDeque<Tensor>,
    n: usize,
    pub last_update: usize,
    pub pushes: usize,
}

impl TemplateBank {
    pub fn new(fixed: Tensor, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("template bank needs at least one slot"));
        }
        Ok(Self {
            fixed,
            patches: VecDeque::with_capacity(n),
            n,
            last_update: 0,
            pushes: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.n
    }

    /// Fixed template plus stored patches.
    pub fn len(&self) -> usize {
        1 + self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn patch_count(&self) -> usize {
        self.patches.len()
    }

    pub fn fixed(&self) -> &Tensor {
        &self.fixed
    }

    pub fn push(&mut self, patch: Tensor, t: usize) {
        if self.n == 1 {
            return;
        }
        if self.patches.len() == self.n - 1 {
            self.patches.pop_back();
        }
        self.patches.push_front(patch);
        self.last_update = t;
        self.pushes += 1;
    }

    /// `n` slot contents: fixed template, newest patches first, and copies
    /// of the fixed template in empty slots.
    pub fn slots(&self) -> Vec<Tensor> {
        let mut v = Vec::with_capacity(self.n);
        v.push(self.fixed.clone());
        v.extend(self.patches.iter().cloned());
        while v.len() < self.n {
            v.push(self.fixed.clone());
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct TrackerState {
    /// Current box in frame pixels.
    pub bbox: BBox,
    pub t: usize,
    /// Search crop side in frame pixels used on the last step.
    pub search_side: f64,
    pub rng: RngStream,
    pub bank: TemplateBank,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub bbox: BBox,
    pub score: f64,
    /// The raw prediction left the frame and was clamped.
    pub clamped: bool,
    pub pushed: bool,
}

pub struct Tracker<'m> {
    model: &'m Model,
    config: TrackerConfig,
    state: Option<TrackerState>,
}

fn check_inside(frame: &Image, b: &BBox) -> Result<()> {
    let [x1, y1, x2, y2] = b.corners();
    if x2 <= 0.0 || y2 <= 0.0 || x1 >= frame.width() as f64 || y1 >= frame.height() as f64 {
        return Err(Error::invalid(format!("box {b:?} lies outside the frame")));
    }
    Ok(())
}

impl<'m> Tracker<'m> {
    pub fn new(model: &'m Model, config: TrackerConfig) -> Self {
        Self {
            model,
            config,
            state: None,
        }
    }

    pub fn state(&self) -> Option<&TrackerState> {
        self.state.as_ref()
    }

    fn template_patches(&self, frame: &Image, b: &BBox) -> Result<Tensor> {
        let cfg = self.model.config();
        let win = CropWindow::around(b, self.config.template_factor, cfg.template_size)?;
        patchify(&win.crop(frame), cfg.patch)
    }

    /// Starts a sequence; any previous state is discarded.
    pub fn init(&mut self, frame: &Image, b: BBox, seed: u64) -> Result<&TrackerState> {
        let b = BBox::new(b.cx, b.cy, b.w, b.h)?;
        check_inside(frame, &b)?;
        let fixed = self.template_patches(frame, &b)?;
        let bank = TemplateBank::new(fixed, self.model.config().templates)?;
        self.state = Some(TrackerState {
            bbox: b,
            t: 0,
            search_side: self.config.search_factor * math::sqrt(b.w * b.h),
            rng: RngStream::new(seed),
            bank,
        });
        Ok(self.state.as_ref().expect("just set"))
    }

    fn clamp(&self, frame: &Image, b: BBox) -> (BBox, bool) {
        let (fw, fh) = (frame.width() as f64, frame.height() as f64);
        let [x1, y1, x2, y2] = b.corners();
        let outside = x2 <= 0.0 || y2 <= 0.0 || x1 >= fw || y1 >= fh;
        let min = self.config.min_side;
        let w = b.w.clamp(min.min(fw), fw);
        let h = b.h.clamp(min.min(fh), fh);
        let cx = b.cx.clamp(0.0, fw);
        let cy = b.cy.clamp(0.0, fh);
        (BBox { cx, cy, w, h }, outside)
    }

    /// Tracks one frame.
    pub fn step(&mut self, frame: &Image) -> Result<StepResult> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::invalid("tracker stepped before init"))?;
        let cfg = self.model.config();
        let prev = state.bbox;
        let win = CropWindow::around(&prev, self.config.search_factor, cfg.search_size)?;
        let search = patchify(&win.crop(frame), cfg.patch)?;
        let input = ModelInput {
            templates: state.bank.slots(),
            search,
        };
        let out = self.model.infer(&input)?;
        let (_, _, score) = out.peak();
        let local = decode_box(&out);
        let raw = win.to_frame(&local);
        if !raw.to_array().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("decoded box"));
        }
        let (bbox, clamped) = self.clamp(frame, raw);
        let t = state.t + 1;
        let due = t % update_interval(t) == 0;
        let gate_ok = self.config.quality_gate.is_none_or(|g| score > g);
        let patch = if due && gate_ok {
            Some(self.template_patches(frame, &bbox)?)
        } else {
            None
        };
        let state = self.state.as_mut().expect("checked above");
        state.t = t;
        state.bbox = bbox;
        state.search_side = win.side;
        let pushed = patch.is_some();
        if let Some(p) = patch {
            state.bank.push(p, t);
        }
        Ok(StepResult {
            bbox,
            score,
            clamped,
            pushed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_bands() {
        assert_eq!(update_interval(1), 5);
        assert_eq!(update_interval(50), 5);
        assert_eq!(update_interval(100), 5);
        assert_eq!(update_interval(101), 10);
        assert_eq!(update_interval(150), 10);
        assert_eq!(update_interval(300), 20);
        assert_eq!(update_interval(301), 40);
        assert_eq!(update_interval(450), 80);
        assert_eq!(update_interval(500), 80);
        assert_eq!(update_interval(501), 160);
        assert_eq!(update_interval(600), 160);
        assert_eq!(update_interval(100_000), 160);
    }

    #[test]
    fn bank_is_bounded_fifo() {
        let mk = |v: f64| Tensor::full(&[1, 1], v);
        let mut bank = TemplateBank::new(mk(0.0), 3).unwrap();
        assert_eq!(bank.len(), 1);
        assert_eq!(bank.slots(), [mk(0.0), mk(0.0), mk(0.0)]);
        for t in 1..=1000 {
            bank.push(mk(t as f64), t);
            assert!(bank.patch_count() <= 2);
        }
        assert_eq!(bank.slots(), [mk(0.0), mk(1000.0), mk(999.0)]);
        assert_eq!(bank.pushes, 1000);
    }
}
