//! Detection evaluation: greedy matching of scored rotated boxes against
//! ground truth per scene, pooled precision/recall curves, and average
//! precision at several IoU thresholds.
//!
//! All counting is integer and the reduction order is pinned (scenes in
//! input order, detections by descending score with stable ties), so a given
//! input produces byte-identical reports.

use crate::error::{BevError, Result};
use crate::geometry::{rotated_iou, RotatedBox};
use serde::{Deserialize, Serialize};

/// IoU thresholds reported by default.
pub const DEFAULT_IOU_THRESHOLDS: [f64; 3] = [0.5, 0.65, 0.8];

/// How the area under the precision/recall curve is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMethod {
    /// Sum of recall increments times the right-side precision envelope
    /// (each precision replaced by the maximum at equal or higher recall).
    PrecisionEnvelope,
    /// Trapezoidal integration of the raw curve.
    Trapezoid,
}

/// One detection outcome: its score and whether it matched a ground truth.
pub type ScoredHit = (f64, bool);

/// Greedy per-scene matching at one IoU threshold.
///
/// Predictions are visited in descending score order (stable on ties); each
/// claims the unmatched ground-truth box of the same class with the highest
/// IoU at or above the threshold (ties to the lowest index). Unmatched
/// predictions are false positives; every prediction yields one entry.
pub fn match_scene(
    preds: &[RotatedBox<f64>],
    gts: &[RotatedBox<f64>],
    iou_threshold: f64,
) -> Result<Vec<ScoredHit>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(BevError::InvalidConfig {
            field: "iou_threshold".into(),
            reason: format!("{iou_threshold} not in (0, 1]"),
        });
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    for (i, p) in preds.iter().enumerate() {
        if p.score.is_none() {
            return Err(BevError::MissingScore { index: i });
        }
    }
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .unwrap()
            .total_cmp(&preds[a].score.unwrap())
            .then(a.cmp(&b))
    });

    let mut gt_taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(preds.len());
    for &pi in &order {
        let p = &preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] || gt.class_id != p.class_id {
                continue;
            }
            let iou = rotated_iou(p, gt);
            if iou >= iou_threshold && best.map_or(true, |(_, bv)| iou > bv) {
                best = Some((gi, iou));
            }
        }
        let hit = if let Some((gi, _)) = best {
            gt_taken[gi] = true;
            true
        } else {
            false
        };
        out.push((p.score.unwrap(), hit));
    }
    Ok(out)
}

/// One point of a pooled precision/recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub tp: usize,
    pub fp: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Precision/recall curve over a pooled detection list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub n_gt: usize,
    pub points: Vec<PrPoint>,
}

/// Build the curve from pooled scene outcomes. Entries are re-sorted by
/// descending score (stable, so cross-scene ties keep input order).
pub fn pr_curve(mut scored: Vec<ScoredHit>, n_gt: usize) -> PrCurve {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let points = scored
        .into_iter()
        .map(|(score, hit)| {
            if hit {
                tp += 1;
            } else {
                fp += 1;
            }
            PrPoint {
                score,
                tp,
                fp,
                precision: tp as f64 / (tp + fp) as f64,
                recall: if n_gt > 0 { tp as f64 / n_gt as f64 } else { 0.0 },
            }
        })
        .collect();
    PrCurve { n_gt, points }
}

/// Average precision of a curve. Empty curves and zero-ground-truth pools
/// score zero.
pub fn average_precision(curve: &PrCurve, method: ApMethod) -> f64 {
    if curve.points.is_empty() || curve.n_gt == 0 {
        return 0.0;
    }
    match method {
        ApMethod::PrecisionEnvelope => {
            let n = curve.points.len();
            let mut envelope = vec![0.0; n];
            let mut running = 0.0_f64;
            for i in (0..n).rev() {
                running = running.max(curve.points[i].precision);
                envelope[i] = running;
            }
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (p, env) in curve.points.iter().zip(&envelope) {
                ap += (p.recall - prev_recall) * env;
                prev_recall = p.recall;
            }
            ap
        }
        ApMethod::Trapezoid => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            let mut prev_precision = 1.0;
            for p in &curve.points {
                ap += (p.recall - prev_recall) * 0.5 * (p.precision + prev_precision);
                prev_recall = p.recall;
                prev_precision = p.precision;
            }
            ap
        }
    }
}

/// Result for one IoU threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub iou_threshold: f64,
    pub ap: f64,
    pub curve: PrCurve,
}

/// Full evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: ApMethod,
    pub n_scenes: usize,
    pub n_gt: usize,
    pub n_pred: usize,
    pub thresholds: Vec<ThresholdReport>,
}

impl EvalReport {
    /// AP at the threshold closest to `iou` (they are pinned floats, so this
    /// is exact in practice).
    pub fn ap_at(&self, iou: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .find(|t| (t.iou_threshold - iou).abs() < 1e-9)
            .map(|t| t.ap)
    }
}

/// Evaluate pooled scenes: `scenes` pairs each scene's predictions with its
/// ground truth. Matching is per scene; curves and AP are pooled.
pub fn evaluate(
    scenes: &[(Vec<RotatedBox<f64>>, Vec<RotatedBox<f64>>)],
    thresholds: &[f64],
    method: ApMethod,
) -> Result<EvalReport> {
    let n_gt: usize = scenes.iter().map(|(_, g)| g.len()).sum();
    let n_pred: usize = scenes.iter().map(|(p, _)| p.len()).sum();
    let mut reports = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let mut pooled = Vec::with_capacity(n_pred);
        for (preds, gts) in scenes {
            pooled.extend(match_scene(preds, gts, thr)?);
        }
        let curve = pr_curve(pooled, n_gt);
        let ap = average_precision(&curve, method);
        reports.push(ThresholdReport {
            iou_threshold: thr,
            ap,
            curve,
        });
    }
    Ok(EvalReport {
        method,
        n_scenes: scenes.len(),
        n_gt,
        n_pred,
        thresholds: reports,
    })
}

/// `iou,ap` summary rows.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("iou,ap\n");
    for t in &report.thresholds {
        out.push_str(&format!("{:.2},{:.6}\n", t.iou_threshold, t.ap));
    }
    out
}

/// Full curve rows: `iou,score,tp,fp,precision,recall`.
pub fn pr_csv(report: &EvalReport) -> String {
    let mut out = String::from("iou,score,tp,fp,precision,recall\n");
    for t in &report.thresholds {
        for p in &t.curve.points {
            out.push_str(&format!(
                "{:.2},{:.6},{},{},{:.6},{:.6}\n",
                t.iou_threshold, p.score, p.tp, p.fp, p.precision, p.recall
            ));
        }
    }
    out
}
