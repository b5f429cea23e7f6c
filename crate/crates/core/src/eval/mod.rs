//! One-pass evaluation, synthetic sequences and the toy training driver.

pub mod metrics;
pub mod synth;
pub mod train;

use alloc::vec::Vec;

pub use metrics::{aggregate, precision_success, AttributeScore, MetricReport};
pub use synth::{generate_sequence, sequence_set, Attribute, SequenceRecord, SequenceSpec};
pub use train::{sample_inputs, sample_triple, toy_train, toy_train_with, TrainConfig, TrainReport, TrainSample};

use crate::error::Result;
use crate::head::BBox;
use crate::model::Model;
use crate::tracker::{Tracker, TrackerConfig};

/// Initializes on the first ground-truth box and tracks to the end; the
/// first entry is the initial box.
pub fn run_sequence(model: &Model, seq: &SequenceRecord, config: &TrackerConfig, seed: u64) -> Result<Vec<BBox>> {
    let mut tracker = Tracker::new(model, config.clone());
    tracker.init(&seq.frames[0], seq.boxes[0], seed)?;
    let mut out = Vec::with_capacity(seq.len());
    out.push(seq.boxes[0]);
    for frame in &seq.frames[1..] {
        out.push(tracker.step(frame)?.bbox);
    }
    Ok(out)
}

/// Tracks every sequence and aggregates the per-sequence reports.
pub fn evaluate(model: &Model, seqs: &[SequenceRecord], config: &TrackerConfig, seed: u64) -> Result<MetricReport> {
    let per = seqs
        .iter()
        .map(|s| {
            let pred = run_sequence(model, s, config, seed)?;
            Ok((precision_success(&pred, &s.boxes)?, s.attributes.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(&per)
}
