//! Loss stack for the detection head: focal / assignment-consistent focal
//! classification plus smooth-L1 box regression with a binary angle-class
//! term. Every loss returns its closed-form gradient with respect to the
//! raw head channels.
//!
//! Sums are plain (unnormalized) and accumulate in a fixed row-major order
//! in `f64`, so a given input produces bit-identical loss values run to run.

use crate::assign::{AssignmentResult, Strategy};
use crate::error::{BevError, Result};
use crate::scalar::Real;
use crate::supervision::{ScaleSupervision, SupervisionPack};
use ndarray::{Array3, ArrayView3};
use serde::{Deserialize, Serialize};

/// Head channel layout. Channels `0..7` are supervised; anything beyond is
/// per-class score and carried through unsupervised in this single-class
/// build.
pub mod channels {
    /// Heatmap logit (sigmoid → objectness).
    pub const HEAT: usize = 0;
    /// Sub-cell center offsets, in cells.
    pub const DX: usize = 1;
    pub const DY: usize = 2;
    /// Log box dimensions, in meters.
    pub const LOG_LEN: usize = 3;
    pub const LOG_WID: usize = 4;
    /// Half-turn angle-class logit (θ < π vs θ ≥ π).
    pub const ANGLE_CLASS: usize = 5;
    /// Angle within the half turn, as a fraction in [0, 1).
    pub const ANGLE_OFFSET: usize = 6;
    /// Number of supervised channels; head width is `BASE + num_classes`.
    pub const BASE: usize = 7;

    /// (head channel, target channel) pairs under smooth-L1.
    pub const REGRESSION_PAIRS: [(usize, usize); 5] =
        [(DX, 0), (DY, 1), (LOG_LEN, 2), (LOG_WID, 3), (ANGLE_OFFSET, 5)];
    /// Target channel holding the angle class bit.
    pub const TGT_ANGLE_CLASS: usize = 4;
}

/// How non-positive cells are weighted in the focal classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// Weight `(1 - G)^beta`: cells under a heatmap peak are down-weighted.
    PenaltyReduced,
    /// Weight `G` verbatim; kept behind this switch for comparison runs.
    LiteralHeatWeight,
}

/// Which classification loss the positive/negative split uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsLossKind {
    /// Heatmap-weighted focal loss.
    Focal,
    /// Assignment-consistent focal: negatives lose the heatmap weighting so
    /// only the α mask decides what counts as positive.
    ConsistentFocal,
}

impl ClsLossKind {
    /// The classification loss each strategy trains with.
    pub fn for_strategy(s: Strategy) -> Self {
        match s {
            Strategy::Gachips => ClsLossKind::ConsistentFocal,
            _ => ClsLossKind::Focal,
        }
    }
}

/// Shared loss hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    /// Focal exponent on the predicted probability.
    pub gamma: f64,
    /// Penalty exponent on `(1 - G)` for negatives.
    pub beta: f64,
    /// Predicted probabilities are clamped to `[eps, 1 - eps]`.
    pub prob_eps: f64,
    /// Quadratic→linear transition of the smooth-L1.
    pub smooth_l1_transition: f64,
    pub negative_mode: NegativeMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 2.0,
            beta: 4.0,
            prob_eps: 1e-7,
            smooth_l1_transition: 1.0,
            negative_mode: NegativeMode::PenaltyReduced,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let chk = |field: &str, ok: bool, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(BevError::InvalidConfig {
                    field: field.into(),
                    reason: reason.into(),
                })
            }
        };
        chk("gamma", self.gamma >= 0.0 && self.gamma.is_finite(), "must be finite and >= 0")?;
        chk("beta", self.beta >= 0.0 && self.beta.is_finite(), "must be finite and >= 0")?;
        chk(
            "prob_eps",
            self.prob_eps > 0.0 && self.prob_eps < 0.5,
            "must lie in (0, 0.5)",
        )?;
        chk(
            "smooth_l1_transition",
            self.smooth_l1_transition > 0.0 && self.smooth_l1_transition.is_finite(),
            "must be finite and > 0",
        )
    }
}

/// Loss totals for one head (or summed across heads).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub box_reg: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.cls + self.box_reg
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        self.cls += other.cls;
        self.box_reg += other.box_reg;
    }
}

/// Smooth-L1 value and derivative at difference `d` with transition `delta`:
/// quadratic `d^2 / (2 delta)` inside, linear `|d| - delta/2` outside.
pub fn smooth_l1(d: f64, delta: f64) -> (f64, f64) {
    if d.abs() < delta {
        (0.5 * d * d / delta, d / delta)
    } else {
        (d.abs() - 0.5 * delta, d.signum())
    }
}

/// Numerically stable binary cross-entropy on a logit; returns value and
/// derivative with respect to the logit (`sigmoid(z) - t`).
pub fn bce_with_logits(z: f64, t: f64) -> (f64, f64) {
    let v = z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
    (v, sigmoid(z) - t)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Focal terms at one cell. Returns (loss, dL/dlogit). The clamp on `p` is
/// part of the function: where it is active the derivative is exactly zero.
fn focal_cell(z: f64, alpha: bool, g: f64, kind: ClsLossKind, cfg: &LossConfig) -> (f64, f64) {
    let p_raw = sigmoid(z);
    let lo = cfg.prob_eps;
    let hi = 1.0 - cfg.prob_eps;
    let p = p_raw.clamp(lo, hi);
    let chain = if p_raw > lo && p_raw < hi {
        p_raw * (1.0 - p_raw)
    } else {
        0.0
    };
    let gm = cfg.gamma;
    if alpha {
        // Positive anchors regress toward probability one.
        let l = -(1.0 - p).powf(gm) * p.ln();
        let dldp = gm * (1.0 - p).powf(gm - 1.0) * p.ln() - (1.0 - p).powf(gm) / p;
        (l, dldp * chain)
    } else {
        let w = match kind {
            ClsLossKind::ConsistentFocal => 1.0,
            ClsLossKind::Focal => match cfg.negative_mode {
                NegativeMode::PenaltyReduced => (1.0 - g).powf(cfg.beta),
                NegativeMode::LiteralHeatWeight => g,
            },
        };
        let l = -w * p.powf(gm) * (1.0 - p).ln();
        let dldp = -w * gm * p.powf(gm - 1.0) * (1.0 - p).ln() + w * p.powf(gm) / (1.0 - p);
        (l, dldp * chain)
    }
}

/// Classification + box loss for one head, with the gradient with respect to
/// every raw head channel. `head` is `(h, w, channels::BASE + num_classes)`;
/// the per-class channels receive zero gradient here.
pub fn head_loss_grad<T: Real>(
    head: ArrayView3<'_, T>,
    sup: &ScaleSupervision<T>,
    alpha: &ndarray::Array2<bool>,
    kind: ClsLossKind,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Array3<T>)> {
    cfg.validate()?;
    let (h, w, c) = head.dim();
    if (h, w) != (sup.spec.h, sup.spec.w) || c < channels::BASE {
        return Err(BevError::ShapeMismatch {
            expected: format!("({}, {}, >={})", sup.spec.h, sup.spec.w, channels::BASE),
            actual: format!("({h}, {w}, {c})"),
        });
    }
    if alpha.dim() != (h, w) {
        return Err(BevError::ShapeMismatch {
            expected: format!("alpha ({h}, {w})"),
            actual: format!("{:?}", alpha.dim()),
        });
    }

    let mut grad = Array3::<T>::zeros((h, w, c));
    let mut out = LossBreakdown::default();
    let delta = cfg.smooth_l1_transition;
    for r in 0..h {
        for col in 0..w {
            let pos = alpha[(r, col)];
            let g = sup.heatmap.data[(r, col, 0)].as_f64();
            let z = head[(r, col, channels::HEAT)].as_f64();
            let (l, dz) = focal_cell(z, pos, g, kind, cfg);
            out.cls += l;
            grad[(r, col, channels::HEAT)] = T::of_f64(dz);

            if pos {
                for (hc, tc) in channels::REGRESSION_PAIRS {
                    let d = head[(r, col, hc)].as_f64() - sup.targets.data[(r, col, tc)].as_f64();
                    let (l, dd) = smooth_l1(d, delta);
                    out.box_reg += l;
                    grad[(r, col, hc)] = T::of_f64(dd);
                }
                let za = head[(r, col, channels::ANGLE_CLASS)].as_f64();
                let ta = sup.targets.data[(r, col, channels::TGT_ANGLE_CLASS)].as_f64();
                let (l, dz) = bce_with_logits(za, ta);
                out.box_reg += l;
                grad[(r, col, channels::ANGLE_CLASS)] = T::of_f64(dz);
            }
        }
    }
    Ok((out, grad))
}

/// Sum [`head_loss_grad`] over all scales of an assignment. Returns the
/// combined breakdown and one gradient tensor per scale.
pub fn pipeline_loss_grad<T: Real>(
    heads: &[ArrayView3<'_, T>],
    pack: &SupervisionPack<T>,
    assignment: &AssignmentResult,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<Array3<T>>)> {
    if heads.len() != pack.scales.len() || assignment.alpha.len() != pack.scales.len() {
        return Err(BevError::ShapeMismatch {
            expected: format!("{} scales", pack.scales.len()),
            actual: format!("{} heads / {} masks", heads.len(), assignment.alpha.len()),
        });
    }
    let kind = ClsLossKind::for_strategy(assignment.strategy);
    let mut out = LossBreakdown::default();
    let mut grads = Vec::with_capacity(heads.len());
    for ((head, sup), alpha) in heads.iter().zip(&pack.scales).zip(&assignment.alpha) {
        let (part, grad) = head_loss_grad(*head, sup, alpha, kind, cfg)?;
        out.add(&part);
        grads.push(grad);
    }
    Ok((out, grads))
}
