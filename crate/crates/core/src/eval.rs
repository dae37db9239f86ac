//! Two-class segmentation metrics with the best-threshold sweep protocol.
//!
//! IOUs accumulate global intersection/union counts across a dataset before
//! dividing (not per-image means), and an empty union scores 1.0 so
//! blank-on-blank images do not poison the result.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::network::CrSeg;
use crate::par::map_ordered;

/// Per-threshold IOU table plus the argmax row (ties go to the smallest
/// threshold).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    /// (iou_fg, iou_bg, miou) per threshold.
    pub per_threshold: Vec<(f64, f64, f64)>,
    pub best_threshold: f64,
    pub best_miou: f64,
}

/// The default sweep: 0.05, 0.10, ..., 0.95.
pub fn default_thresholds() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).collect()
}

/// Intersection over union of one class; 1.0 when both class sets are empty.
pub fn iou(pred_mask: &ArrayView2<u8>, gt_mask: &ArrayView2<u8>, class_id: u8) -> Result<f64> {
    if pred_mask.dim() != gt_mask.dim() {
        return Err(Error::Argument(format!(
            "iou: pred shape {:?} != gt shape {:?}",
            pred_mask.dim(),
            gt_mask.dim()
        )));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred_mask.iter().zip(gt_mask.iter()) {
        let p_in = p == class_id;
        let g_in = g == class_id;
        inter += u64::from(p_in && g_in);
        union += u64::from(p_in || g_in);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Intersection/union counts of both classes at one threshold.
#[derive(Debug, Clone, Copy, Default)]
struct ClassCounts {
    inter_fg: u64,
    union_fg: u64,
    inter_bg: u64,
    union_bg: u64,
}

impl ClassCounts {
    fn accumulate(&mut self, prob: &ArrayView2<f32>, gt: &ArrayView2<u8>, threshold: f64) {
        for (&p, &g) in prob.iter().zip(gt.iter()) {
            let pred_fg = f64::from(p) >= threshold;
            let gt_fg = g != 0;
            self.inter_fg += u64::from(pred_fg && gt_fg);
            self.union_fg += u64::from(pred_fg || gt_fg);
            self.inter_bg += u64::from(!pred_fg && !gt_fg);
            self.union_bg += u64::from(!pred_fg || !gt_fg);
        }
    }

    fn merge(&mut self, other: &ClassCounts) {
        self.inter_fg += other.inter_fg;
        self.union_fg += other.union_fg;
        self.inter_bg += other.inter_bg;
        self.union_bg += other.union_bg;
    }

    fn ious(&self) -> (f64, f64, f64) {
        let div = |i: u64, u: u64| if u == 0 { 1.0 } else { i as f64 / u as f64 };
        let fg = div(self.inter_fg, self.union_fg);
        let bg = div(self.inter_bg, self.union_bg);
        (fg, bg, 0.5 * (fg + bg))
    }
}

fn validate_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::Argument("threshold_sweep: empty thresholds".into()));
    }
    let strictly_increasing = thresholds.windows(2).all(|w| w[0] < w[1]);
    if !strictly_increasing || thresholds.iter().any(|&t| !(0.0 < t && t < 1.0)) {
        return Err(Error::Argument(
            "thresholds must be strictly increasing within (0, 1)".into(),
        ));
    }
    Ok(())
}

fn report_from_counts(thresholds: &[f64], counts: &[ClassCounts]) -> EvalReport {
    let per_threshold: Vec<(f64, f64, f64)> = counts.iter().map(ClassCounts::ious).collect();
    let mut best_idx = 0;
    for (i, row) in per_threshold.iter().enumerate() {
        if row.2 > per_threshold[best_idx].2 {
            best_idx = i;
        }
    }
    EvalReport {
        thresholds: thresholds.to_vec(),
        per_threshold: per_threshold.clone(),
        best_threshold: thresholds[best_idx],
        best_miou: per_threshold[best_idx].2,
    }
}

/// Sweep one probability map against one mask.
pub fn threshold_sweep(
    prob_map: &ArrayView2<f32>,
    gt_mask: &ArrayView2<u8>,
    thresholds: &[f64],
) -> Result<EvalReport> {
    if prob_map.dim() != gt_mask.dim() {
        return Err(Error::Argument(format!(
            "threshold_sweep: prob shape {:?} != gt shape {:?}",
            prob_map.dim(),
            gt_mask.dim()
        )));
    }
    validate_thresholds(thresholds)?;
    let counts: Vec<ClassCounts> = thresholds
        .iter()
        .map(|&t| {
            let mut c = ClassCounts::default();
            c.accumulate(prob_map, gt_mask, t);
            c
        })
        .collect();
    Ok(report_from_counts(thresholds, &counts))
}

/// Sweep a whole dataset of (probability map, mask) pairs, accumulating
/// global counts across images before dividing.
pub fn threshold_sweep_dataset(
    pairs: &[(Array2<f32>, Array2<u8>)],
    thresholds: &[f64],
) -> Result<EvalReport> {
    validate_thresholds(thresholds)?;
    for (prob, gt) in pairs {
        if prob.dim() != gt.dim() {
            return Err(Error::Argument(format!(
                "threshold_sweep_dataset: prob shape {:?} != gt shape {:?}",
                prob.dim(),
                gt.dim()
            )));
        }
    }
    let per_image: Vec<Vec<ClassCounts>> = map_ordered(pairs.iter().collect(), |(prob, gt)| {
        thresholds
            .iter()
            .map(|&t| {
                let mut c = ClassCounts::default();
                c.accumulate(&prob.view(), &gt.view(), t);
                c
            })
            .collect()
    });
    let mut totals = vec![ClassCounts::default(); thresholds.len()];
    for image_counts in &per_image {
        for (total, c) in totals.iter_mut().zip(image_counts) {
            total.merge(c);
        }
    }
    Ok(report_from_counts(thresholds, &totals))
}

/// Run the model over every labeled sample and sweep the predictions.
pub fn evaluate_model(
    model: &CrSeg,
    samples: &[crate::data::ImageSample],
    thresholds: &[f64],
) -> Result<EvalReport> {
    validate_thresholds(thresholds)?;
    let labeled: Vec<&crate::data::ImageSample> =
        samples.iter().filter(|s| s.labeled()).collect();
    if labeled.is_empty() {
        return Err(Error::Argument(
            "evaluate_model: no labeled samples to score".into(),
        ));
    }
    let pairs: Vec<Result<(Array2<f32>, Array2<u8>)>> = map_ordered(labeled, |s| {
        Ok((model.predict(&s.image)?, s.mask.clone().expect("labeled")))
    });
    let pairs: Vec<(Array2<f32>, Array2<u8>)> = pairs.into_iter().collect::<Result<_>>()?;
    threshold_sweep_dataset(&pairs, thresholds)
}

impl EvalReport {
    /// `threshold,iou_fg,iou_bg,miou` rows plus a `best_threshold,best_miou`
    /// one-line summary file.
    pub fn write_csv(&self, report_path: &Path, summary_path: &Path) -> Result<()> {
        let mut csv = String::from("threshold,iou_fg,iou_bg,miou\n");
        for (t, (fg, bg, miou)) in self.thresholds.iter().zip(&self.per_threshold) {
            let _ = writeln!(csv, "{t},{fg},{bg},{miou}");
        }
        fs::write(report_path, csv).map_err(|e| Error::io(report_path, e))?;
        let summary = format!(
            "best_threshold,best_miou\n{},{}\n",
            self.best_threshold, self.best_miou
        );
        fs::write(summary_path, summary).map_err(|e| Error::io(summary_path, e))
    }
}
