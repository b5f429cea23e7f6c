//! Desk-scale training by plain gradient descent on sampled
//! (template, search, box) triples.

use alloc::format;
use alloc::vec::Vec;

use super::synth::SequenceRecord;
use crate::error::{Error, Result};
use crate::head::{tracking_loss, BBox, LossWeights};
use crate::image::{patchify, CropWindow};
use crate::model::{Binder, ForwardOptions, Model, ModelConfig, ModelInput, ParamGroup};
use crate::numerics::{math, GradTape, RngStream, Tensor};
use crate::relevance::SampleMode;
use crate::tracker::TrackerConfig;

/// One training example: patch matrices plus the target box in normalized
/// search-crop coordinates.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub input: ModelInput,
    pub gt: BBox,
}

/// Crop perturbation used when sampling search regions.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleJitter {
    /// Center shift, uniform within this fraction of `sqrt(w * h)`.
    pub center: f64,
    /// Log-scale standard deviation of the crop size.
    pub scale: f64,
}

impl Default for SampleJitter {
    fn default() -> Self {
        Self { center: 0.5, scale: 0.1 }
    }
}

/// Draws a triple: the fixed template from frame `i`, online patches from
/// frames in `(i, j)`, and a search crop of frame `j` around a perturbed
/// box from frame `j - 1`.
pub fn sample_triple(
    seq: &SequenceRecord,
    cfg: &ModelConfig,
    crops: &TrackerConfig,
    jitter: &SampleJitter,
    rng: &mut RngStream,
) -> Result<TrainSample> {
    let n = seq.len();
    if n < 2 || seq.boxes.len() != n {
        return Err(Error::invalid(format!(
            "sequence with {n} frames and {} boxes",
            seq.boxes.len()
        )));
    }
    let j = 1 + rng.below(n - 1);
    let i = rng.below(j);
    let template = |f: usize| -> Result<Tensor> {
        let win = CropWindow::around(&seq.boxes[f], crops.template_factor, cfg.template_size)?;
        patchify(&win.crop(&seq.frames[f]), cfg.patch)
    };
    let fixed = template(i)?;
    let mut templates = Vec::with_capacity(cfg.templates);
    templates.push(fixed.clone());
    for _ in 1..cfg.templates {
        // Empty slots hold the fixed template, as in a fresh bank.
        if j - i > 1 && rng.uniform() < 0.7 {
            templates.push(template(i + 1 + rng.below(j - i - 1))?);
        } else {
            templates.push(fixed.clone());
        }
    }
    let prev = seq.boxes[j - 1];
    let s = math::sqrt(prev.w * prev.h);
    let ds = math::exp(jitter.scale * rng.normal());
    let anchor = BBox::new(
        prev.cx + jitter.center * s * rng.range(-1.0, 1.0),
        prev.cy + jitter.center * s * rng.range(-1.0, 1.0),
        prev.w * ds,
        prev.h * ds,
    )?;
    let win = CropWindow::around(&anchor, crops.search_factor, cfg.search_size)?;
    let search = patchify(&win.crop(&seq.frames[j]), cfg.patch)?;
    let gt = win.to_crop(&seq.boxes[j]);
    Ok(TrainSample {
        input: ModelInput { templates, search },
        gt,
    })
}

/// Model inputs drawn from a set of sequences, e.g. for profiling.
pub fn sample_inputs(seqs: &[SequenceRecord], cfg: &ModelConfig, count: usize, seed: u64) -> Result<Vec<ModelInput>> {
    if seqs.is_empty() {
        return Err(Error::invalid("no sequences to sample from"));
    }
    let mut rng = RngStream::new(seed);
    let crops = TrackerConfig::default();
    let jitter = SampleJitter::default();
    (0..count)
        .map(|_| {
            let seq = &seqs[rng.below(seqs.len())];
            Ok(sample_triple(seq, cfg, &crops, &jitter, &mut rng)?.input)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Samples averaged per update.
    pub batch: usize,
    /// Global gradient-norm clip.
    pub clip: Option<f64>,
    pub seed: u64,
    /// Block positions trained alongside the head.
    pub blocks: Vec<usize>,
    pub weights: LossWeights,
    pub jitter: SampleJitter,
    pub crops: TrackerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.01,
            batch: 1,
            clip: Some(5.0),
            seed: 0,
            blocks: alloc::vec![4, 7, 10],
            weights: LossWeights::default(),
            jitter: SampleJitter::default(),
            crops: TrackerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    /// Gradient norm per step before clipping.
    pub grad_norms: Vec<f64>,
}

impl TrainReport {
    /// Mean of the losses over `[start, start + window)`.
    pub fn window_mean(&self, start: usize, window: usize) -> Option<f64> {
        let s = self.losses.get(start..start + window)?;
        Some(s.iter().sum::<f64>() / window as f64)
    }
}

/// Loss and trainable-parameter gradients of one sample.
pub fn sample_loss(
    model: &Model,
    sample: &TrainSample,
    blocks: &[usize],
    weights: &LossWeights,
    noise: &mut RngStream,
) -> Result<(f64, Vec<(usize, Tensor)>)> {
    let mut tape = GradTape::new();
    let mut binder = Binder::new(model.params(), |g| match g {
        ParamGroup::Head => true,
        ParamGroup::Block(i) => blocks.contains(&i),
        ParamGroup::Embedding => false,
    });
    let mut opts = ForwardOptions {
        mode: SampleMode::HardStraightThrough,
        rng: Some(noise),
        record_hidden: false,
    };
    let out = model.forward(&mut tape, &mut binder, &sample.input, &mut opts)?;
    let terms = tracking_loss(&mut tape, &out.maps, model.config().search_grid(), &sample.gt, weights)?;
    let loss = tape.value(terms.total).item()?;
    let grads = tape.backward(terms.total)?;
    Ok((loss, binder.gradients(&grads)))
}

/// Trains the head and the configured blocks in place.
pub fn toy_train(model: &mut Model, seqs: &[SequenceRecord], cfg: &TrainConfig) -> Result<TrainReport> {
    toy_train_with(model, seqs, cfg, |_, _| {})
}

/// As [`toy_train`], calling `progress(step, loss)` after every update.
pub fn toy_train_with(
    model: &mut Model,
    seqs: &[SequenceRecord],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if seqs.is_empty() {
        return Err(Error::invalid("no training sequences"));
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
        return Err(Error::invalid(format!("batch {} and learning rate {}", cfg.batch, cfg.lr)));
    }
    let root = RngStream::new(cfg.seed);
    let mut data_rng = root.fork(1);
    let mut noise_rng = root.fork(2);
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let mut total = 0.0;
        let mut acc: Vec<(usize, Tensor)> = Vec::new();
        for _ in 0..cfg.batch {
            let seq = &seqs[data_rng.below(seqs.len())];
            let sample = sample_triple(seq, model.config(), &cfg.crops, &cfg.jitter, &mut data_rng)?;
            let (loss, grads) = sample_loss(model, &sample, &cfg.blocks, &cfg.weights, &mut noise_rng).map_err(|e| {
                if e.is_numerical() {
                    Error::Diverged {
                        step,
                        detail: format!("{e}; last loss {:?}", report.losses.last()),
                    }
                } else {
                    e
                }
            })?;
            total += loss;
            if acc.is_empty() {
                acc = grads;
            } else {
                for ((_, a), (_, g)) in acc.iter_mut().zip(&grads) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
                }
            }
        }
        let inv = 1.0 / cfg.batch as f64;
        let norm = math::sqrt(
            acc.iter()
                .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>(),
        ) * inv;
        let loss = total * inv;
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss {loss}, gradient norm {norm}"),
            });
        }
        let scale = cfg.lr * inv * cfg.clip.map_or(1.0, |c| if norm > c { c / norm } else { 1.0 });
        for (id, g) in &acc {
            let p = model.params_mut().value_mut(*id);
            p.data_mut().iter_mut().zip(g.data()).for_each(|(w, d)| *w -= scale * d);
        }
        report.losses.push(loss);
        report.grad_norms.push(norm);
        progress(step, loss);
    }
    Ok(report)
}
