//! Deterministic bird's-eye-view rendering to SVG.
//!
//! The output is a pure function of its inputs — no timestamps, no
//! randomness, fixed-precision numbers — so renders can be compared byte
//! for byte. World +x points right and +y points up (SVG y grows downward,
//! so the transform flips the vertical axis).

use crate::bevgrid::{polar_to_cartesian, GridSpec};
use crate::error::{BevError, Result};
use crate::geometry::{corners, RotatedBox};
use crate::synth::Scene;
use std::fmt::Write as _;
use std::path::Path;

/// Stroke color of ground-truth boxes.
pub const COLOR_GT: &str = "#ffa500";
/// Stroke color of predicted boxes.
pub const COLOR_PREDICTION: &str = "#ff0000";
/// Stroke color of heading ticks (center to front edge).
pub const COLOR_HEADING: &str = "#00e050";
/// Fill color of LiDAR return markers.
pub const COLOR_LIDAR: &str = "#d2dae4";
/// Stroke color of the sensor-origin cross.
pub const COLOR_SENSOR: &str = "#ffffff";

/// Two-stop heat colormap from near-black blue to amber.
pub fn heat_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| -> u8 { (a + (b - a) * t).round() as u8 };
    [lerp(10.0, 255.0), lerp(14.0, 196.0), lerp(40.0, 32.0)]
}

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Maps world coordinates onto SVG user units for a given grid.
#[derive(Debug, Clone, Copy)]
pub struct ViewTransform {
    pub grid: GridSpec,
    /// SVG user units per grid cell.
    pub px_per_cell: f64,
}

impl ViewTransform {
    pub fn new(grid: GridSpec, px_per_cell: f64) -> Self {
        ViewTransform {
            grid,
            px_per_cell: px_per_cell.max(1.0),
        }
    }

    /// Drawing-surface size in SVG user units.
    pub fn canvas_size(&self) -> (f64, f64) {
        (
            self.grid.w as f64 * self.px_per_cell,
            self.grid.h as f64 * self.px_per_cell,
        )
    }

    /// World point to SVG coordinates (continuous; the vertical axis flips).
    pub fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.px_per_cell;
        let u = (x - self.grid.origin_x) / self.grid.res * s;
        let v = (y - self.grid.origin_y) / self.grid.res * s;
        (u, self.grid.h as f64 * s - v)
    }
}

/// Options for [`render_scene`].
#[derive(Debug, Clone)]
pub struct RenderOptions {
    pub px_per_cell: f64,
    /// Draw the radar return map as the background.
    pub radar_background: bool,
    pub draw_lidar: bool,
    pub draw_gt: bool,
    /// Predicted boxes drawn in [`COLOR_PREDICTION`].
    pub predictions: Vec<RotatedBox<f64>>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            px_per_cell: 8.0,
            radar_background: true,
            draw_lidar: true,
            draw_gt: true,
            predictions: Vec::new(),
        }
    }
}

/// Emit one rotated box: outline polygon plus a heading tick from the box
/// center to the middle of its front edge.
fn push_box(svg: &mut String, tf: &ViewTransform, b: &RotatedBox<f64>, stroke: &str, sw: f64) {
    let quad = corners(b);
    let mut points = String::new();
    for &(x, y) in quad.vertices() {
        let (u, v) = tf.to_px(x, y);
        let _ = write!(points, "{u:.2},{v:.2} ");
    }
    let points = points.trim_end();
    let _ = writeln!(
        svg,
        r#"<polygon points="{points}" fill="none" stroke="{stroke}" stroke-width="{sw:.2}"/>"#
    );
    let (cx, cy) = tf.to_px(b.cx, b.cy);
    let front = (
        b.cx + 0.5 * b.length * b.theta.cos(),
        b.cy + 0.5 * b.length * b.theta.sin(),
    );
    let (fx, fy) = tf.to_px(front.0, front.1);
    let _ = writeln!(
        svg,
        r#"<line x1="{cx:.2}" y1="{cy:.2}" x2="{fx:.2}" y2="{fy:.2}" stroke="{COLOR_HEADING}" stroke-width="{sw:.2}"/>"#
    );
}

/// Render a scene in bird's-eye view: radar heat background, LiDAR points,
/// ground-truth boxes, predicted boxes, and the sensor origin.
pub fn render_scene(scene: &Scene, grid: &GridSpec, opts: &RenderOptions) -> String {
    let tf = ViewTransform::new(*grid, opts.px_per_cell);
    let (w, h) = tf.canvas_size();
    let s = tf.px_per_cell;
    let sw = (0.2 * s).clamp(1.0, 3.0);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="0" y="0" width="{w:.2}" height="{h:.2}" fill="{}"/>"#,
        hex(heat_color(0.0))
    );

    if opts.radar_background {
        let cart = polar_to_cartesian::<f64>(&scene.radar, grid);
        let peak = cart.data.iter().copied().fold(0.0_f64, f64::max);
        for r in 0..grid.h {
            for c in 0..grid.w {
                let t = if peak > 0.0 {
                    cart.data[(r, c, 0)] / peak
                } else {
                    0.0
                };
                if t <= 1e-3 {
                    continue; // matches the background fill
                }
                // Grid row r is the r-th band from the top after the y flip.
                let x = c as f64 * s;
                let y = r as f64 * s;
                let _ = writeln!(
                    svg,
                    r#"<rect x="{x:.2}" y="{y:.2}" width="{s:.2}" height="{s:.2}" fill="{}"/>"#,
                    hex(heat_color(t))
                );
            }
        }
    }

    if opts.draw_lidar {
        let r_dot = (0.18 * s).max(0.8);
        for p in &scene.lidar_points {
            let (u, v) = tf.to_px(p[0], p[1]);
            let _ = writeln!(
                svg,
                r#"<circle cx="{u:.2}" cy="{v:.2}" r="{r_dot:.2}" fill="{COLOR_LIDAR}"/>"#
            );
        }
    }

    if opts.draw_gt {
        for b in &scene.gt_boxes {
            push_box(&mut svg, &tf, b, COLOR_GT, sw);
        }
    }
    for b in &opts.predictions {
        push_box(&mut svg, &tf, b, COLOR_PREDICTION, sw);
    }

    let (ox, oy) = tf.to_px(0.0, 0.0);
    let arm = s.max(4.0);
    let _ = writeln!(
        svg,
        r#"<line x1="{:.2}" y1="{oy:.2}" x2="{:.2}" y2="{oy:.2}" stroke="{COLOR_SENSOR}" stroke-width="1.00"/>"#,
        ox - arm,
        ox + arm
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{ox:.2}" y1="{:.2}" x2="{ox:.2}" y2="{:.2}" stroke="{COLOR_SENSOR}" stroke-width="1.00"/>"#,
        oy - arm,
        oy + arm
    );
    svg.push_str("</svg>\n");
    svg
}

/// Write a rendered SVG document to disk.
pub fn save_svg(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg).map_err(|e| BevError::io(path.display().to_string(), e))
}
