//! bevkit: a desk-scale bird's-eye-view (BEV) radar/LiDAR detection workbench.
//!
//! Everything numeric is generic over [`scalar::Real`] (`f32` or `f64`);
//! concrete aliases for the common types live at the crate root.

pub mod assign;
pub mod bevgrid;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod loss;
pub mod nnet;
pub mod pipeline;
pub mod geometry;
pub mod scalar;
pub mod supervision;
pub mod synth;
pub mod viz;

pub use error::{BevError, Result};
pub use scalar::Real;

/// Rotated box in `f32`.
pub type RotatedBox32 = geometry::RotatedBox<f32>;
/// Rotated box in `f64`.
pub type RotatedBox64 = geometry::RotatedBox<f64>;
/// BEV grid tensor in `f32`.
pub type BevTensor32 = bevgrid::BevTensor<f32>;
/// BEV grid tensor in `f64`.
pub type BevTensor64 = bevgrid::BevTensor<f64>;
/// Polar radar heatmap in `f32`.
pub type PolarHeatmap32 = bevgrid::PolarHeatmap<f32>;
/// Polar radar heatmap in `f64`.
pub type PolarHeatmap64 = bevgrid::PolarHeatmap<f64>;
