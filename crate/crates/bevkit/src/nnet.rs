//! Minimal convolutional building blocks with hand-written backward passes,
//! plus the Adam optimizer. Convolutions are 3×3-style `same`-padded layers
//! lowered to a single GEMM per layer (im2col), which is where nearly all of
//! the training time goes.
//!
//! There is no autograd: each layer's `forward` returns a cache and
//! `backward` consumes it, returning parameter gradients and the gradient
//! with respect to the layer input. Gradients are checked against central
//! differences in the tests.

use crate::error::{BevError, Result};
use crate::scalar::Real;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// `same` padding for a given input extent, kernel and stride: the output
/// extent is `ceil(in / stride)` and padding is split with the extra cell at
/// the end. Returns `(out, pad_begin, pad_total)`.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize, usize) {
    let out = input.div_ceil(stride);
    let needed = (out - 1) * stride + kernel;
    let pad_total = needed.saturating_sub(input);
    (out, pad_total / 2, pad_total)
}

/// Pointwise nonlinearity applied after the conv and its fixed scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    /// `x if x > 0 else slope * x`.
    LeakyRelu { slope: f64 },
}

impl Activation {
    /// Default leaky rectifier used throughout the backbone.
    pub fn leaky() -> Self {
        Activation::LeakyRelu { slope: 0.1 }
    }

    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu { slope } => {
                if x > T::zero() {
                    x
                } else {
                    x * T::of_f64(slope)
                }
            }
        }
    }

    fn deriv<T: Real>(self, pre: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::LeakyRelu { slope } => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::of_f64(slope)
                }
            }
        }
    }
}

/// One `same`-padded convolution: `out = act(scale * (x ⊛ weight + bias))`.
///
/// `weight` is `(kh, kw, c_in, c_out)`; inputs and outputs are `(h, w, c)`.
/// `scale` is a fixed (non-learned) multiplier standing in for feature
/// normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ConvLayer<T: Real> {
    pub weight: Array4<T>,
    pub bias: Array1<T>,
    pub stride: usize,
    pub scale: f64,
    pub activation: Activation,
}

/// Parameter gradients of one [`ConvLayer`].
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Real> {
    pub d_weight: Array4<T>,
    pub d_bias: Array1<T>,
}

impl<T: Real> ConvGrads<T> {
    pub fn zeros_like(layer: &ConvLayer<T>) -> Self {
        ConvGrads {
            d_weight: Array4::zeros(layer.weight.raw_dim()),
            d_bias: Array1::zeros(layer.bias.raw_dim()),
        }
    }

    pub fn accumulate(&mut self, other: &ConvGrads<T>) {
        self.d_weight += &other.d_weight;
        self.d_bias += &other.d_bias;
    }

    pub fn scale_by(&mut self, f: f64) {
        let f = T::of_f64(f);
        self.d_weight.mapv_inplace(|v| v * f);
        self.d_bias.mapv_inplace(|v| v * f);
    }
}

/// Forward intermediates needed by [`ConvLayer::backward`].
pub struct ConvCache<T: Real> {
    /// im2col matrix, `(out_h * out_w, kh * kw * c_in)`.
    cols: Array2<T>,
    /// Post-scale pre-activation, `(out_h * out_w, c_out)`.
    pre: Array2<T>,
    in_dim: (usize, usize, usize),
    out_dim: (usize, usize),
    pad: (usize, usize), // (row begin, col begin)
}

impl<T: Real> ConvLayer<T> {
    /// Kaiming fan-in initialization: weights ~ N(0, sqrt(2 / (kh*kw*c_in))),
    /// zero bias. Deterministic for a given `rng`.
    pub fn init(
        kernel: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (kernel * kernel * c_in) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("std is finite");
        let data: Vec<T> = (0..kernel * kernel * c_in * c_out)
            .map(|_| T::of_f64(normal.sample(rng)))
            .collect();
        ConvLayer {
            weight: Array4::from_shape_vec((kernel, kernel, c_in, c_out), data)
                .expect("shape matches data"),
            bias: Array1::zeros(c_out),
            stride,
            scale: 1.0,
            activation,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.dim().2
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim().3
    }

    fn weight_matrix(&self) -> Array2<T> {
        let (kh, kw, ci, co) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((kh * kw * ci, co))
            .expect("owned weights are contiguous")
            .to_owned()
    }

    pub fn forward(&self, x: ArrayView3<'_, T>) -> Result<(Array3<T>, ConvCache<T>)> {
        let (h, w, ci) = x.dim();
        let (kh, kw, wci, co) = self.weight.dim();
        if ci != wci {
            return Err(BevError::ShapeMismatch {
                expected: format!("{wci} input channels"),
                actual: format!("{ci}"),
            });
        }
        let (out_h, pad_r, _) = same_padding(h, kh, self.stride);
        let (out_w, pad_c, _) = same_padding(w, kw, self.stride);

        let mut cols = Array2::<T>::zeros((out_h * out_w, kh * kw * ci));
        for oy in 0..out_h {
            for ox in 0..out_w {
                let row = oy * out_w + ox;
                let mut col = 0;
                for dy in 0..kh {
                    let iy = (oy * self.stride + dy) as isize - pad_r as isize;
                    for dx in 0..kw {
                        let ix = (ox * self.stride + dx) as isize - pad_c as isize;
                        if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            for c in 0..ci {
                                cols[(row, col + c)] = x[(iy as usize, ix as usize, c)];
                            }
                        }
                        col += ci;
                    }
                }
            }
        }

        let scale = T::of_f64(self.scale);
        let mut pre = cols.dot(&self.weight_matrix());
        pre += &self.bias;
        pre.mapv_inplace(|v| v * scale);
        let mut out = Array3::<T>::zeros((out_h, out_w, co));
        for oy in 0..out_h {
            for ox in 0..out_w {
                for c in 0..co {
                    out[(oy, ox, c)] = self.activation.apply(pre[(oy * out_w + ox, c)]);
                }
            }
        }
        Ok((
            out,
            ConvCache {
                cols,
                pre,
                in_dim: (h, w, ci),
                out_dim: (out_h, out_w),
                pad: (pad_r, pad_c),
            },
        ))
    }

    /// Gradients with respect to parameters and input.
    pub fn backward(
        &self,
        cache: &ConvCache<T>,
        d_out: ArrayView3<'_, T>,
    ) -> (ConvGrads<T>, Array3<T>) {
        let (kh, kw, ci, co) = self.weight.dim();
        let (out_h, out_w) = cache.out_dim;
        let (h, w, _) = cache.in_dim;
        let scale = T::of_f64(self.scale);

        // Through the activation and the fixed scale.
        let mut d_pre = Array2::<T>::zeros((out_h * out_w, co));
        for oy in 0..out_h {
            for ox in 0..out_w {
                let row = oy * out_w + ox;
                for c in 0..co {
                    d_pre[(row, c)] =
                        d_out[(oy, ox, c)] * self.activation.deriv(cache.pre[(row, c)]) * scale;
                }
            }
        }

        let d_bias = d_pre.sum_axis(Axis(0));
        let d_weight = cache
            .cols
            .t()
            .dot(&d_pre)
            .into_shape_with_order((kh, kw, ci, co))
            .expect("gemm result is contiguous");

        // Scatter columns back onto the (padded) input grid.
        let d_cols = d_pre.dot(&self.weight_matrix().t());
        let (pad_r, pad_c) = cache.pad;
        let mut d_x = Array3::<T>::zeros((h, w, ci));
        for oy in 0..out_h {
            for ox in 0..out_w {
                let row = oy * out_w + ox;
                let mut col = 0;
                for dy in 0..kh {
                    let iy = (oy * self.stride + dy) as isize - pad_r as isize;
                    for dx in 0..kw {
                        let ix = (ox * self.stride + dx) as isize - pad_c as isize;
                        if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            for c in 0..ci {
                                d_x[(iy as usize, ix as usize, c)] += d_cols[(row, col + c)];
                            }
                        }
                        col += ci;
                    }
                }
            }
        }
        (ConvGrads { d_weight, d_bias }, d_x)
    }
}

/// A plain sequence of conv layers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ConvStack<T: Real> {
    pub layers: Vec<ConvLayer<T>>,
}

impl<T: Real> ConvStack<T> {
    pub fn forward(&self, x: ArrayView3<'_, T>) -> Result<(Array3<T>, Vec<ConvCache<T>>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur: Option<Array3<T>> = None;
        for layer in &self.layers {
            let (y, cache) = match &cur {
                Some(a) => layer.forward(a.view())?,
                None => layer.forward(x)?,
            };
            caches.push(cache);
            cur = Some(y);
        }
        Ok((cur.unwrap_or_else(|| x.to_owned()), caches))
    }

    pub fn backward(
        &self,
        caches: &[ConvCache<T>],
        d_out: ArrayView3<'_, T>,
    ) -> (Vec<ConvGrads<T>>, Array3<T>) {
        assert_eq!(caches.len(), self.layers.len());
        let mut grads: Vec<Option<ConvGrads<T>>> = (0..self.layers.len()).map(|_| None).collect();
        let mut d_cur: Option<Array3<T>> = None;
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let (g, d_in) = match &d_cur {
                Some(a) => layer.backward(cache, a.view()),
                None => layer.backward(cache, d_out),
            };
            grads[i] = Some(g);
            d_cur = Some(d_in);
        }
        (
            grads.into_iter().map(|g| g.expect("filled above")).collect(),
            d_cur.unwrap_or_else(|| d_out.to_owned()),
        )
    }

    pub fn zero_grads(&self) -> Vec<ConvGrads<T>> {
        self.layers.iter().map(ConvGrads::zeros_like).collect()
    }
}

/// Adam with bias correction. Moment state is kept in `f64` regardless of
/// the parameter scalar and is keyed by parameter name, so the update is
/// independent of visitation order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed optimization steps.
    pub t: u64,
    state: BTreeMap<String, MomentPair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MomentPair {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// Call once per optimization step, before the `update` calls of that step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Apply one Adam update to `param` under the given name. All parameters
    /// updated between two `begin_step` calls share the same step index.
    pub fn update<T: Real>(
        &mut self,
        name: &str,
        lr: f64,
        mut param: ArrayViewMutD<'_, T>,
        grad: ArrayViewD<'_, T>,
    ) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(BevError::ShapeMismatch {
                expected: format!("grad of shape {:?} for `{name}`", param.shape()),
                actual: format!("{:?}", grad.shape()),
            });
        }
        if self.t == 0 {
            return Err(BevError::InvalidConfig {
                field: "adam".into(),
                reason: "update called before begin_step".into(),
            });
        }
        let n = param.len();
        let entry = self.state.entry(name.to_string()).or_insert_with(|| MomentPair {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        if entry.m.len() != n {
            return Err(BevError::ShapeMismatch {
                expected: format!("{} state entries for `{name}`", entry.m.len()),
                actual: format!("{n} elements"),
            });
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        // Row-major elementwise walk; arithmetic in f64 for both scalars.
        for ((p, &g), (m, v)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(entry.m.iter_mut().zip(entry.v.iter_mut()))
        {
            let g = g.as_f64();
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = T::of_f64(p.as_f64() - lr * m_hat / (v_hat.sqrt() + self.eps));
        }
        Ok(())
    }

    /// Update both parameters of a conv layer under `prefix`.
    pub fn update_conv<T: Real>(
        &mut self,
        prefix: &str,
        lr: f64,
        layer: &mut ConvLayer<T>,
        grads: &ConvGrads<T>,
    ) -> Result<()> {
        self.update(
            &format!("{prefix}.weight"),
            lr,
            layer.weight.view_mut().into_dyn(),
            grads.d_weight.view().into_dyn(),
        )?;
        self.update(
            &format!("{prefix}.bias"),
            lr,
            layer.bias.view_mut().into_dyn(),
            grads.d_bias.view().into_dyn(),
        )
    }

    /// Names with optimizer state, in update-independent sorted order.
    pub fn tracked_names(&self) -> Vec<&str> {
        self.state.keys().map(String::as_str).collect()
    }
}
