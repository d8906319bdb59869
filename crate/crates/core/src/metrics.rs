//! Binary segmentation metrics. Per-image scores (mIoU, mDice) are means over
//! images; the starred scores pool confusion counts over the whole split.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::error::ShapeError;
use crate::tensor::Scalar;

pub const THRESHOLD: f64 = 0.5;
/// Smoothing constant of the per-image Dice score.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("metrics need at least one image")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `tp/(tp+fp+fn)`; 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            self.tp as f64 / d as f64
        }
    }

    /// `(2tp+s)/(2tp+fp+fn+s)`.
    pub fn dice_smooth(&self) -> f64 {
        (2.0 * self.tp as f64 + DICE_SMOOTH) / ((2 * self.tp + self.fp + self.fn_) as f64 + DICE_SMOOTH)
    }

    /// `2tp/(2tp+fp+fn)`; 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / d as f64
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// Binarize `pred ≥ threshold` (ties positive) against a binary `target`.
pub fn confusion<T: Scalar>(pred: &[T], target: &[T], threshold: f64) -> Result<ConfusionCounts, ShapeError> {
    if pred.len() != target.len() {
        return Err(ShapeError::Mismatch {
            left: vec![pred.len()],
            right: vec![target.len()],
        });
    }
    let th = T::from_f64(threshold);
    let half = T::from_f64(0.5);
    let mut c = ConfusionCounts::default();
    for (&p, &y) in pred.iter().zip(target) {
        match (p >= th, y > half) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub n_images: usize,
    pub miou: f64,
    /// Mean smooth-form Dice.
    pub mdice: f64,
    pub miou_star: f64,
    pub mdice_star: f64,
    /// Mean of the unsmoothed per-image Dice, for comparison with `mdice`.
    pub mdice_tp: f64,
    pub per_image: Vec<ConfusionCounts>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    split: &'a str,
    n_images: usize,
    #[serde(rename = "mIoU")]
    miou: f64,
    #[serde(rename = "mDice")]
    mdice: f64,
    #[serde(rename = "mIoU_star")]
    miou_star: f64,
    #[serde(rename = "mDice_star")]
    mdice_star: f64,
}

pub fn metrics_report(per_image: &[ConfusionCounts]) -> Result<MetricsReport, MetricsError> {
    if per_image.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = per_image.len() as f64;
    let mean = |f: fn(&ConfusionCounts) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let pooled = per_image.iter().fold(ConfusionCounts::default(), |a, &b| a + b);
    Ok(MetricsReport {
        n_images: per_image.len(),
        miou: mean(ConfusionCounts::iou),
        mdice: mean(ConfusionCounts::dice_smooth),
        miou_star: pooled.iou(),
        mdice_star: pooled.dice(),
        mdice_tp: mean(ConfusionCounts::dice),
        per_image: per_image.to_vec(),
    })
}

impl MetricsReport {
    /// Header plus one row per `(split, report)`.
    pub fn write_csv<W: Write>(rows: &[(&str, &MetricsReport)], out: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(out);
        for (split, r) in rows {
            w.serialize(CsvRow {
                split,
                n_images: r.n_images,
                miou: r.miou,
                mdice: r.mdice,
                miou_star: r.miou_star,
                mdice_star: r.mdice_star,
            })?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_examples() {
        let c = confusion(&[1.0f64, 1.0, 1.0, 1.0], &[1.0, 1.0, 0.0, 0.0], THRESHOLD).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 2, fp: 2, fn_: 0, tn: 0 });
        let tie = confusion(&[0.5f32], &[1.0], THRESHOLD).unwrap();
        assert_eq!(tie.tp, 1);
        let same = confusion(&[0.0f32, 1.0, 0.0], &[0.0, 1.0, 0.0], THRESHOLD).unwrap();
        assert_eq!((same.fp, same.fn_), (0, 0));
        assert!(confusion(&[0.0f32], &[0.0, 1.0], THRESHOLD).is_err());
    }

    #[test]
    fn report_example() {
        let a = ConfusionCounts { tp: 2, fp: 1, fn_: 1, tn: 0 };
        let b = ConfusionCounts { tp: 3, fp: 0, fn_: 1, tn: 0 };
        let r = metrics_report(&[a, b]).unwrap();
        assert!((r.miou - 0.625).abs() < 1e-15);
        assert!((r.miou_star - 0.625).abs() < 1e-15);
        assert!((r.mdice_star - 10.0 / 13.0).abs() < 1e-15);
        assert!((r.mdice - (5.0 / 7.0 + 7.0 / 8.0) / 2.0).abs() < 1e-15);
        assert!(matches!(metrics_report(&[]), Err(MetricsError::Empty)));
    }

    #[test]
    fn perfect_and_disjoint() {
        let perfect = ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 11 };
        let r = metrics_report(&[perfect]).unwrap();
        assert_eq!((r.miou, r.mdice, r.miou_star, r.mdice_star), (1.0, 1.0, 1.0, 1.0));
        let disjoint = ConfusionCounts { tp: 0, fp: 3, fn_: 4, tn: 9 };
        assert_eq!(disjoint.iou(), 0.0);
    }

    #[test]
    fn csv_columns() {
        let r = metrics_report(&[ConfusionCounts { tp: 1, fp: 1, fn_: 0, tn: 2 }]).unwrap();
        let mut buf = Vec::new();
        MetricsReport::write_csv(&[("test", &r)], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some("split,n_images,mIoU,mDice,mIoU_star,mDice_star"));
        assert!(lines.next().unwrap().starts_with("test,1,0.5,"));
    }
}
