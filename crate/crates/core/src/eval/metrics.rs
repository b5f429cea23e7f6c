use alloc::format;
use alloc::vec::Vec;

use super::synth::Attribute;
use crate::error::{Error, Result};
use crate::head::BBox;

/// Center-error thresholds in pixels: 0, 1, ..., 50.
pub fn precision_thresholds() -> Vec<f64> {
    (0..=50).map(|t| t as f64).collect()
}

/// IoU thresholds: 0, 0.05, ..., 1.
pub fn success_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeScore {
    pub attribute: Attribute,
    pub sequences: usize,
    pub precision_at_20: f64,
    pub success_auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// Fraction of frames with center error within each precision threshold.
    pub precision: Vec<f64>,
    pub precision_at_20: f64,
    /// Fraction of frames with IoU at or above each success threshold.
    pub success: Vec<f64>,
    pub success_auc: f64,
    pub sequences: usize,
    pub frames: usize,
    pub attributes: Vec<AttributeScore>,
}

/// One-pass evaluation of a single sequence.
pub fn precision_success(pred: &[BBox], gt: &[BBox]) -> Result<MetricReport> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len() as f64;
    let errors: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.center_distance(g)).collect();
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.iou(g)).collect();
    let precision: Vec<f64> = precision_thresholds()
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / n)
        .collect();
    let success: Vec<f64> = success_thresholds()
        .iter()
        .map(|&t| ious.iter().filter(|&&o| o >= t).count() as f64 / n)
        .collect();
    Ok(MetricReport {
        precision_at_20: precision[20],
        success_auc: success.iter().sum::<f64>() / success.len() as f64,
        precision,
        success,
        sequences: 1,
        frames: pred.len(),
        attributes: Vec::new(),
    })
}

fn mean_curves(reports: &[&MetricReport]) -> (Vec<f64>, Vec<f64>) {
    let k = reports.len() as f64;
    let mut p = alloc::vec![0.0; reports[0].precision.len()];
    let mut s = alloc::vec![0.0; reports[0].success.len()];
    for r in reports {
        p.iter_mut().zip(&r.precision).for_each(|(a, b)| *a += b / k);
        s.iter_mut().zip(&r.success).for_each(|(a, b)| *a += b / k);
    }
    (p, s)
}

/// Averages per-sequence reports with equal weight and breaks the result
/// down by attribute tag.
pub fn aggregate(per_sequence: &[(MetricReport, Vec<Attribute>)]) -> Result<MetricReport> {
    if per_sequence.is_empty() {
        return Err(Error::invalid("no sequences to aggregate"));
    }
    let all: Vec<&MetricReport> = per_sequence.iter().map(|p| &p.0).collect();
    let (precision, success) = mean_curves(&all);
    let mut attributes = Vec::new();
    for attr in Attribute::ALL {
        let subset: Vec<&MetricReport> = per_sequence
            .iter()
            .filter(|(_, tags)| tags.contains(&attr))
            .map(|p| &p.0)
            .collect();
        if subset.is_empty() {
            continue;
        }
        let (p, s) = mean_curves(&subset);
        attributes.push(AttributeScore {
            attribute: attr,
            sequences: subset.len(),
            precision_at_20: p[20],
            success_auc: s.iter().sum::<f64>() / s.len() as f64,
        });
    }
    Ok(MetricReport {
        precision_at_20: precision[20],
        success_auc: success.iter().sum::<f64>() / success.len() as f64,
        precision,
        success,
        sequences: per_sequence.len(),
        frames: all.iter().map(|r| r.frames).sum(),
        attributes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn b(x: f64, y: f64) -> BBox {
        BBox::new(x, y, 20.0, 20.0).unwrap()
    }

    #[test]
    fn exact_predictions() {
        let gt = vec![b(10.0, 10.0), b(50.0, 40.0)];
        let r = precision_success(&gt, &gt).unwrap();
        assert_eq!(r.precision_at_20, 1.0);
        assert_eq!(r.success_auc, 1.0);
    }

    #[test]
    fn shifted_predictions() {
        let gt = vec![b(10.0, 10.0); 5];
        let pred = vec![b(35.0, 10.0); 5];
        assert_eq!(precision_success(&pred, &gt).unwrap().precision_at_20, 0.0);
    }

    #[test]
    fn half_disjoint() {
        let gt = vec![b(10.0, 10.0); 4];
        let pred = vec![b(10.0, 10.0), b(10.0, 10.0), b(500.0, 500.0), b(500.0, 500.0)];
        let r = precision_success(&pred, &gt).unwrap();
        assert!((r.success_auc - 0.5).abs() <= 0.025);
    }

    #[test]
    fn curves_are_monotone() {
        let gt: Vec<BBox> = (0..30).map(|i| b(i as f64, 0.0)).collect();
        let pred: Vec<BBox> = (0..30).map(|i| b(i as f64 * 1.7, i as f64 * 0.3)).collect();
        let r = precision_success(&pred, &gt).unwrap();
        assert!(r.precision.windows(2).all(|w| w[0] <= w[1]));
        assert!(r.success.windows(2).all(|w| w[0] >= w[1]));
        assert!((0.0..=1.0).contains(&r.success_auc));
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(precision_success(&[b(0.0, 0.0)], &[]).is_err());
    }
}
