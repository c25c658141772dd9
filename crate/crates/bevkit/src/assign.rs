//! Label assignment: candidate-anchor generation plus the five strategies
//! that turn ground truth (and, for the prediction-aware ones, the current
//! model outputs) into the binary positive mask α.
//!
//! All selection arithmetic runs in `f64` regardless of the pipeline scalar,
//! so the chosen anchors are stable across `f32`/`f64` builds.

use crate::error::{BevError, Result};
use crate::geometry::{rotated_iou, RotatedBox};
use crate::scalar::Real;
use crate::supervision::SupervisionPack;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// The five label-assignment strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Every candidate anchor of every object is positive.
    MultiPositive,
    /// Direct-index: the anchor nearest the object center.
    Dips,
    /// Highest predicted heatmap value over the candidate set.
    Gahps,
    /// Highest predicted heatmap + rotated IoU of the decoded box.
    Gahips,
    /// Same selection as Gahips; classification switches to the
    /// assignment-consistent loss downstream.
    Gachips,
}

impl Strategy {
    /// All strategies, in ablation-table order.
    pub const ALL: [Strategy; 5] = [
        Strategy::MultiPositive,
        Strategy::Dips,
        Strategy::Gahps,
        Strategy::Gahips,
        Strategy::Gachips,
    ];

    /// Canonical lowercase name (used by the CLI and metrics files).
    pub fn name(self) -> &'static str {
        match self {
            Strategy::MultiPositive => "multipositive",
            Strategy::Dips => "dips",
            Strategy::Gahps => "gahps",
            Strategy::Gahips => "gahips",
            Strategy::Gachips => "gachips",
        }
    }

    /// Does this strategy need model predictions to assign?
    pub fn needs_predictions(self) -> bool {
        matches!(self, Strategy::Gahps | Strategy::Gahips | Strategy::Gachips)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = BevError;
    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.name() == s.to_lowercase())
            .ok_or_else(|| BevError::InvalidConfig {
                field: "strategy".into(),
                reason: format!(
                    "unknown strategy `{s}`; valid names: {}",
                    Strategy::ALL.map(|v| v.name()).join(", ")
                ),
            })
    }
}

/// Position of an anchor in the multi-scale output: scale index plus cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorIndex {
    pub scale: usize,
    pub row: usize,
    pub col: usize,
}

/// One positive anchor choice with its selection cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChosenAnchor {
    pub object_index: usize,
    pub anchor: AnchorIndex,
    /// Strategy-specific selection value (distance for Dips, heatmap for
    /// Gahps, heatmap+IoU for Gahips/Gachips, component value for
    /// MultiPositive).
    pub cost: f64,
}

/// Binary positive mask per scale plus the per-object choices behind it.
#[derive(Debug, Clone)]
pub struct AssignmentResult {
    pub strategy: Strategy,
    /// One mask per scale, same shape as that scale's heatmap.
    pub alpha: Vec<Array2<bool>>,
    /// Flattened over (object, scale); multi-positive lists every candidate.
    pub per_object: Vec<ChosenAnchor>,
}

impl AssignmentResult {
    /// Total number of positive anchors across scales.
    pub fn n_positive(&self) -> usize {
        self.alpha
            .iter()
            .map(|a| a.iter().filter(|&&b| b).count())
            .sum()
    }
}

/// Argmax of `cost` over a candidate list given in row-major order; ties go
/// to the earliest candidate, i.e. the lowest `(row, col)`. Returns the cell
/// and its cost.
pub fn argmax_over_candidates(
    candidates: &[(usize, usize)],
    mut cost: impl FnMut(usize, usize) -> f64,
) -> Option<((usize, usize), f64)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for &(r, c) in candidates {
        let v = cost(r, c);
        if best.map_or(true, |(_, bv)| v > bv) {
            best = Some(((r, c), v));
        }
    }
    best
}

/// Candidate sets at an arbitrary threshold, derived from the pack's
/// ownership fields (the pack caches the sets for its own `tau`).
fn candidates_at_tau<T: Real>(
    pack: &SupervisionPack<T>,
    scale: usize,
    tau: f64,
) -> Vec<Vec<(usize, usize)>> {
    if tau == pack.tau {
        return pack.scales[scale].candidates.clone();
    }
    let sc = &pack.scales[scale];
    let mut out: Vec<Vec<(usize, usize)>> = vec![Vec::new(); pack.n_objects()];
    let mut best: Vec<Option<((usize, usize), f64)>> = vec![None; pack.n_objects()];
    for ((r, c), &own) in sc.owner.indexed_iter() {
        if let Some(k) = own {
            let v = sc.owned_value[(r, c)];
            if v >= tau {
                out[k].push((r, c));
            }
            if best[k].map_or(true, |(_, bv)| v > bv) {
                best[k] = Some(((r, c), v));
            }
        }
    }
    for (k, cand) in out.iter_mut().enumerate() {
        if cand.is_empty() {
            if let Some((cell, _)) = best[k] {
                cand.push(cell);
            }
        }
    }
    out
}

fn empty_alpha<T: Real>(pack: &SupervisionPack<T>) -> Vec<Array2<bool>> {
    pack.scales
        .iter()
        .map(|sc| Array2::from_elem((sc.spec.h, sc.spec.w), false))
        .collect()
}

fn check_pred_shapes<T: Real>(pack: &SupervisionPack<T>, pred_heat: &[Array2<f64>]) -> Result<()> {
    if pred_heat.len() != pack.scales.len() {
        return Err(BevError::ShapeMismatch {
            expected: format!("{} scales", pack.scales.len()),
            actual: format!("{} heatmaps", pred_heat.len()),
        });
    }
    for (sc, h) in pack.scales.iter().zip(pred_heat) {
        if h.dim() != (sc.spec.h, sc.spec.w) {
            return Err(BevError::ShapeMismatch {
                expected: format!("{}x{}", sc.spec.h, sc.spec.w),
                actual: format!("{:?}", h.dim()),
            });
        }
    }
    Ok(())
}

/// Every candidate anchor of every object becomes positive.
pub fn assign_multipositive<T: Real>(pack: &SupervisionPack<T>, tau: f64) -> AssignmentResult {
    let mut alpha = empty_alpha(pack);
    let mut per_object = Vec::new();
    for (scale, sc) in pack.scales.iter().enumerate() {
        let candidates = candidates_at_tau(pack, scale, tau);
        for (k, cand) in candidates.iter().enumerate() {
            for &(r, c) in cand {
                alpha[scale][(r, c)] = true;
                per_object.push(ChosenAnchor {
                    object_index: k,
                    anchor: AnchorIndex { scale, row: r, col: c },
                    cost: sc.owned_value[(r, c)],
                });
            }
        }
    }
    AssignmentResult {
        strategy: Strategy::MultiPositive,
        alpha,
        per_object,
    }
}

/// Direct-index strategy: each object's positive is the candidate anchor
/// whose center is nearest the ground-truth center. Pure geometry.
pub fn assign_dips<T: Real>(pack: &SupervisionPack<T>) -> AssignmentResult {
    let mut alpha = empty_alpha(pack);
    let mut per_object = Vec::new();
    for (scale, sc) in pack.scales.iter().enumerate() {
        for (k, cand) in sc.candidates.iter().enumerate() {
            let mu = pack.components[k].mu;
            // Negated distance so the shared argmax helper picks the nearest.
            let chosen = argmax_over_candidates(cand, |r, c| {
                let (x, y) = sc.spec.cell_center(r, c);
                -((x - mu.0).powi(2) + (y - mu.1).powi(2))
            });
            if let Some(((r, c), neg_d2)) = chosen {
                alpha[scale][(r, c)] = true;
                per_object.push(ChosenAnchor {
                    object_index: k,
                    anchor: AnchorIndex { scale, row: r, col: c },
                    cost: (-neg_d2).sqrt(),
                });
            }
        }
    }
    AssignmentResult {
        strategy: Strategy::Dips,
        alpha,
        per_object,
    }
}

/// Prediction-aware strategy: argmax of the predicted heatmap over each
/// object's candidate set.
pub fn assign_gahps<T: Real>(
    pack: &SupervisionPack<T>,
    pred_heat: &[Array2<f64>],
) -> Result<AssignmentResult> {
    check_pred_shapes(pack, pred_heat)?;
    let mut alpha = empty_alpha(pack);
    let mut per_object = Vec::new();
    for (scale, sc) in pack.scales.iter().enumerate() {
        for (k, cand) in sc.candidates.iter().enumerate() {
            if let Some(((r, c), cost)) =
                argmax_over_candidates(cand, |r, c| pred_heat[scale][(r, c)])
            {
                alpha[scale][(r, c)] = true;
                per_object.push(ChosenAnchor {
                    object_index: k,
                    anchor: AnchorIndex { scale, row: r, col: c },
                    cost,
                });
            }
        }
    }
    Ok(AssignmentResult {
        strategy: Strategy::Gahps,
        alpha,
        per_object,
    })
}

fn assign_iou_aware<T: Real>(
    pack: &SupervisionPack<T>,
    pred_heat: &[Array2<f64>],
    mut decode: impl FnMut(AnchorIndex) -> Option<RotatedBox<f64>>,
    strategy: Strategy,
) -> Result<AssignmentResult> {
    check_pred_shapes(pack, pred_heat)?;
    let mut alpha = empty_alpha(pack);
    let mut per_object = Vec::new();
    for (scale, sc) in pack.scales.iter().enumerate() {
        for (k, cand) in sc.candidates.iter().enumerate() {
            let gt = &pack.gt_boxes[k];
            let chosen = argmax_over_candidates(cand, |r, c| {
                let anchor = AnchorIndex { scale, row: r, col: c };
                // A degenerate (non-finite) decode contributes zero IoU.
                let iou = decode(anchor)
                    .map(|b| rotated_iou(&b, gt))
                    .filter(|v| v.is_finite())
                    .unwrap_or(0.0);
                pred_heat[scale][(r, c)] + iou
            });
            if let Some(((r, c), cost)) = chosen {
                alpha[scale][(r, c)] = true;
                per_object.push(ChosenAnchor {
                    object_index: k,
                    anchor: AnchorIndex { scale, row: r, col: c },
                    cost,
                });
            }
        }
    }
    Ok(AssignmentResult {
        strategy,
        alpha,
        per_object,
    })
}

/// Prediction- and regression-aware strategy: cost = predicted heatmap +
/// rotated IoU between the box decoded at the anchor and the ground truth.
pub fn assign_gahips<T: Real>(
    pack: &SupervisionPack<T>,
    pred_heat: &[Array2<f64>],
    decode: impl FnMut(AnchorIndex) -> Option<RotatedBox<f64>>,
) -> Result<AssignmentResult> {
    assign_iou_aware(pack, pred_heat, decode, Strategy::Gahips)
}

/// Same anchor selection as [`assign_gahips`]; the strategy tag switches the
/// classification loss to the assignment-consistent form downstream.
pub fn assign_gachips<T: Real>(
    pack: &SupervisionPack<T>,
    pred_heat: &[Array2<f64>],
    decode: impl FnMut(AnchorIndex) -> Option<RotatedBox<f64>>,
) -> Result<AssignmentResult> {
    assign_iou_aware(pack, pred_heat, decode, Strategy::Gachips)
}
