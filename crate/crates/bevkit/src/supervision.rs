//! Ground-truth supervision: per-object Gaussian components, the mixture
//! heatmap, and per-anchor regression targets for the seven output channels
//! `[Δx, Δy, ln length, ln width, angle_class, angle_offset, class_id]`.
//!
//! Component values are computed in `f64` and only cast to the working
//! scalar at the end, so candidate sets and ownership are identical no
//! matter which scalar type the surrounding pipeline uses.

use crate::bevgrid::{BevTensor, GridSpec};
use crate::error::{BevError, Result};
use crate::geometry::RotatedBox;
use crate::scalar::Real;
use ndarray::Array2;
use std::f64::consts::PI;

/// Decoded size channels are clamped to `exp(±LOG_SIZE_CLAMP)` meters.
const LOG_SIZE_CLAMP: f64 = 8.0;

/// How the mixture heatmap is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapMode {
    /// Each component is divided by its own peak so it tops out at 1, and the
    /// anchor nearest the object center is pinned to exactly 1 (default).
    PeakNormalized,
    /// Raw probability density values (1/m²).
    RawDensity,
}

/// One object's Gaussian: mean at the box center, covariance from its corners.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    /// Index of the source box in the ground-truth list.
    pub object_index: usize,
    /// Distribution mean: the box center (meters).
    pub mu: (f64, f64),
    /// 2×2 covariance (meters²), symmetric positive-definite.
    pub sigma: [[f64; 2]; 2],
    /// Density value at `mu`, before any normalization.
    pub peak_density: f64,
    inv_sigma: [[f64; 2]; 2],
}

/// Covariance of the four box corners around the center:
/// `R · diag((l/2)², (w/2)²) · Rᵀ`.
pub fn box_covariance(b: &RotatedBox<f64>) -> [[f64; 2]; 2] {
    let (s, c) = b.theta.sin_cos();
    let a = (b.length / 2.0) * (b.length / 2.0);
    let d = (b.width / 2.0) * (b.width / 2.0);
    [
        [a * c * c + d * s * s, (a - d) * s * c],
        [(a - d) * s * c, a * s * s + d * c * c],
    ]
}

impl GaussianComponent {
    /// Build from a ground-truth box.
    pub fn from_box(object_index: usize, b: &RotatedBox<f64>) -> Self {
        let sigma = box_covariance(b);
        let det = sigma[0][0] * sigma[1][1] - sigma[0][1] * sigma[1][0];
        let inv_sigma = [
            [sigma[1][1] / det, -sigma[0][1] / det],
            [-sigma[1][0] / det, sigma[0][0] / det],
        ];
        GaussianComponent {
            object_index,
            mu: (b.cx, b.cy),
            sigma,
            peak_density: 1.0 / (2.0 * PI * det.sqrt()),
            inv_sigma,
        }
    }

    /// Squared Mahalanobis distance of a world point from the mean.
    pub fn mahalanobis2(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.mu.0;
        let dy = y - self.mu.1;
        dx * (self.inv_sigma[0][0] * dx + self.inv_sigma[0][1] * dy)
            + dy * (self.inv_sigma[1][0] * dx + self.inv_sigma[1][1] * dy)
    }

    /// Peak-normalized value at a world point, in (0, 1].
    pub fn normalized_value(&self, x: f64, y: f64) -> f64 {
        (-0.5 * self.mahalanobis2(x, y)).exp()
    }

    /// Probability density at a world point (1/m²).
    pub fn density(&self, x: f64, y: f64) -> f64 {
        self.peak_density * self.normalized_value(x, y)
    }

    /// Per-cell normalized values on a grid, with the cell nearest the mean
    /// pinned to exactly 1 when the mean lies inside the grid.
    pub fn value_grid(&self, spec: &GridSpec) -> Array2<f64> {
        let mut g = Array2::zeros((spec.h, spec.w));
        for r in 0..spec.h {
            for c in 0..spec.w {
                let (x, y) = spec.cell_center(r, c);
                g[(r, c)] = self.normalized_value(x, y);
            }
        }
        if spec.contains(self.mu.0, self.mu.1) {
            g[spec.nearest_cell(self.mu.0, self.mu.1)] = 1.0;
        }
        g
    }
}

/// Anchors whose component value reaches `tau`, in row-major order; never
/// empty — if no cell reaches `tau`, the component's argmax anchor is used.
pub fn candidate_anchors(
    component: &GaussianComponent,
    spec: &GridSpec,
    tau: f64,
) -> Vec<(usize, usize)> {
    let grid = component.value_grid(spec);
    collect_candidates(&grid, tau)
}

fn collect_candidates(values: &Array2<f64>, tau: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut best = (0usize, 0usize);
    let mut best_v = f64::NEG_INFINITY;
    for ((r, c), &v) in values.indexed_iter() {
        if v >= tau {
            out.push((r, c));
        }
        if v > best_v {
            best_v = v;
            best = (r, c);
        }
    }
    if out.is_empty() {
        out.push(best);
    }
    out
}

/// Ground-truth Gaussian mixture heatmap: per-cell maximum over components.
pub fn gaussian_heatmap(
    boxes: &[RotatedBox<f64>],
    spec: &GridSpec,
    mode: HeatmapMode,
) -> (BevTensor<f64>, Vec<GaussianComponent>) {
    let components: Vec<GaussianComponent> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| GaussianComponent::from_box(i, b))
        .collect();
    let mut heat = BevTensor::zeros(*spec, 1);
    for comp in &components {
        match mode {
            HeatmapMode::PeakNormalized => {
                let grid = comp.value_grid(spec);
                for ((r, c), &v) in grid.indexed_iter() {
                    if v > heat.data[(r, c, 0)] {
                        heat.data[(r, c, 0)] = v;
                    }
                }
            }
            HeatmapMode::RawDensity => {
                for r in 0..spec.h {
                    for c in 0..spec.w {
                        let (x, y) = spec.cell_center(r, c);
                        let v = comp.density(x, y);
                        if v > heat.data[(r, c, 0)] {
                            heat.data[(r, c, 0)] = v;
                        }
                    }
                }
            }
        }
    }
    (heat, components)
}

/// Supervision for one output scale.
#[derive(Debug, Clone)]
pub struct ScaleSupervision<T: Real> {
    /// Spatial stride relative to the base grid.
    pub stride: usize,
    /// Grid geometry at this stride.
    pub spec: GridSpec,
    /// Mixture heatmap `G`, one channel, values in [0, 1].
    pub heatmap: BevTensor<T>,
    /// Seven regression target channels; zero outside candidate regions.
    pub targets: BevTensor<T>,
    /// Owning object per cell (contended cells go to the higher component
    /// value, ties to the lower object index); `None` where no object owns.
    pub owner: Array2<Option<usize>>,
    /// Normalized component value of the owning object (0 where unowned).
    pub owned_value: Array2<f64>,
    /// Per object: candidate anchors (τ-filtered, argmax fallback), owned
    /// cells only, row-major order. May be empty if another object owns
    /// every cell of this one's region.
    pub candidates: Vec<Vec<(usize, usize)>>,
    /// Per object: the anchor nearest its center, if inside this grid.
    pub peak_cell: Vec<Option<(usize, usize)>>,
}

/// Everything the losses and label assignment need for one scene.
#[derive(Debug, Clone)]
pub struct SupervisionPack<T: Real> {
    /// Candidate threshold used to build per-object candidate sets.
    pub tau: f64,
    /// Ground-truth boxes the pack was built from.
    pub gt_boxes: Vec<RotatedBox<f64>>,
    /// One Gaussian per object (world-space, scale-independent).
    pub components: Vec<GaussianComponent>,
    /// Per-stride supervision, same order as the `strides` argument.
    pub scales: Vec<ScaleSupervision<T>>,
}

impl<T: Real> SupervisionPack<T> {
    /// Number of ground-truth objects.
    pub fn n_objects(&self) -> usize {
        self.components.len()
    }
}

/// Encode one box's regression targets for an anchor cell.
/// Channel layout: `[Δx, Δy, ln l, ln w, angle_class, angle_offset, class]`,
/// where Δ is measured in cells of the given grid.
pub fn encode_box(b: &RotatedBox<f64>, spec: &GridSpec, row: usize, col: usize) -> [f64; 7] {
    let (ax, ay) = spec.cell_center(row, col);
    let half_turn = b.theta.rem_euclid(PI);
    let angle_class = if b.theta < PI { 0.0 } else { 1.0 };
    [
        (b.cx - ax) / spec.res,
        (b.cy - ay) / spec.res,
        b.length.ln(),
        b.width.ln(),
        angle_class,
        half_turn / PI,
        f64::from(b.class_id),
    ]
}

/// Decode box channels at an anchor cell back into a world-space box.
/// `ch` holds `[Δx, Δy, ln l, ln w, angle_class, angle_offset]` in target
/// space (the class channel is a 0/1 value, not a logit).
pub fn decode_box_at(
    spec: &GridSpec,
    row: usize,
    col: usize,
    ch: &[f64; 6],
) -> Result<RotatedBox<f64>> {
    if ch.iter().any(|v| !v.is_finite()) {
        return Err(BevError::NonFinite {
            context: format!("decode at ({row},{col})"),
        });
    }
    let (ax, ay) = spec.cell_center(row, col);
    let cx = ax + ch[0] * spec.res;
    let cy = ay + ch[1] * spec.res;
    let length = ch[2].clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP).exp();
    let width = ch[3].clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP).exp();
    let class = if ch[4] >= 0.5 { 1.0 } else { 0.0 };
    let offset = ch[5].clamp(0.0, 1.0 - 1e-12);
    RotatedBox::new(cx, cy, length, width, (class + offset) * PI)
}

/// Build the full supervision pack for a scene at the given strides.
pub fn build_supervision<T: Real>(
    boxes: &[RotatedBox<f64>],
    spec: &GridSpec,
    strides: &[usize],
    tau: f64,
) -> Result<SupervisionPack<T>> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(BevError::InvalidConfig {
            field: "tau".into(),
            reason: format!("must lie in (0,1), got {tau}"),
        });
    }
    let components: Vec<GaussianComponent> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| GaussianComponent::from_box(i, b))
        .collect();

    let mut scales = Vec::with_capacity(strides.len());
    for &stride in strides {
        let sspec = spec.at_stride(stride);
        let grids: Vec<Array2<f64>> = components.iter().map(|c| c.value_grid(&sspec)).collect();

        let mut owner: Array2<Option<usize>> = Array2::from_elem((sspec.h, sspec.w), None);
        let mut owned_value: Array2<f64> = Array2::zeros((sspec.h, sspec.w));
        for r in 0..sspec.h {
            for c in 0..sspec.w {
                let mut best: Option<(usize, f64)> = None;
                for (k, g) in grids.iter().enumerate() {
                    let v = g[(r, c)];
                    if v > 0.0 && best.map_or(true, |(_, bv)| v > bv) {
                        best = Some((k, v));
                    }
                }
                if let Some((k, v)) = best {
                    owner[(r, c)] = Some(k);
                    owned_value[(r, c)] = v;
                }
            }
        }

        // Candidates: owned cells at or above tau; argmax-owned fallback.
        let mut candidates: Vec<Vec<(usize, usize)>> = vec![Vec::new(); components.len()];
        let mut best_owned: Vec<Option<((usize, usize), f64)>> = vec![None; components.len()];
        for ((r, c), &own) in owner.indexed_iter() {
            if let Some(k) = own {
                let v = owned_value[(r, c)];
                if v >= tau {
                    candidates[k].push((r, c));
                }
                if best_owned[k].map_or(true, |(_, bv)| v > bv) {
                    best_owned[k] = Some(((r, c), v));
                }
            }
        }
        for (k, cand) in candidates.iter_mut().enumerate() {
            if cand.is_empty() {
                if let Some((cell, _)) = best_owned[k] {
                    cand.push(cell);
                }
            }
        }

        // Heatmap = owning value; targets written on candidate cells.
        let mut heatmap = BevTensor::zeros(sspec, 1);
        for ((r, c), &v) in owned_value.indexed_iter() {
            heatmap.data[(r, c, 0)] = T::of_f64(v);
        }
        let mut targets = BevTensor::zeros(sspec, 7);
        for (k, cand) in candidates.iter().enumerate() {
            for &(r, c) in cand {
                let enc = encode_box(&boxes[k], &sspec, r, c);
                for (ch, &v) in enc.iter().enumerate() {
                    targets.data[(r, c, ch)] = T::of_f64(v);
                }
            }
        }

        let peak_cell = components
            .iter()
            .map(|comp| {
                if sspec.contains(comp.mu.0, comp.mu.1) {
                    Some(sspec.nearest_cell(comp.mu.0, comp.mu.1))
                } else {
                    None
                }
            })
            .collect();

        scales.push(ScaleSupervision {
            stride,
            spec: sspec,
            heatmap,
            targets,
            owner,
            owned_value,
            candidates,
            peak_cell,
        });
    }

    Ok(SupervisionPack {
        tau,
        gt_boxes: boxes.to_vec(),
        components,
        scales,
    })
}
