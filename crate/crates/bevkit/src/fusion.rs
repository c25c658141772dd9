//! Radar/LiDAR feature fusion via scaled dot-product attention.
//!
//! The primitive is `out = softmax_rows(Q Kᵀ · τ) K + K`: the key matrix
//! doubles as the value and as a residual connection. Two fusion blocks are
//! built on it:
//!
//! * [`DualQueryFusion`] — a learnable query attends over the channel
//!   concatenation of the radar and LiDAR feature maps;
//! * [`DirectFusion`] — the radar map is the query, the LiDAR map the
//!   key/value.
//!
//! Attention can run over the full flattened map or within non-overlapping
//! square tiles ([`AttentionScope`]); tiling bounds the quadratic cost when
//! the blocks are gradient-checked on realistic map sizes.

use crate::error::{BevError, Result};
use crate::scalar::Real;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which cells attend to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScope {
    /// Every cell attends to every cell.
    Full,
    /// Cells attend only within their `tile × tile` block; both map
    /// dimensions must be divisible by `tile`.
    Tiled { tile: usize },
}

/// Row-wise stable softmax, in place.
fn softmax_rows_inplace<T: Real>(s: &mut Array2<T>) {
    for mut row in s.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Saved intermediates for one attention call.
#[derive(Debug, Clone)]
pub struct AttentionCache<T: Real> {
    q: Array2<T>,
    k: Array2<T>,
    /// Row-stochastic attention matrix.
    a: Array2<T>,
    tau: T,
}

impl<T: Real> AttentionCache<T> {
    /// The attention matrix (each row a distribution over key rows).
    pub fn weights(&self) -> &Array2<T> {
        &self.a
    }
}

/// `out = softmax_rows(q kᵀ · tau) k + k`. `q` is `(n, c)`, `k` is `(m, c)`;
/// the output is `(n, c)` and requires `n == m` for the residual term.
pub fn attention_forward<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    tau: f64,
) -> Result<(Array2<T>, AttentionCache<T>)> {
    if q.dim() != k.dim() {
        return Err(BevError::ShapeMismatch {
            expected: format!("query and key of equal shape, query {:?}", q.dim()),
            actual: format!("key {:?}", k.dim()),
        });
    }
    let tau_t = T::of_f64(tau);
    let mut s = q.dot(&k.t());
    s.mapv_inplace(|v| v * tau_t);
    softmax_rows_inplace(&mut s);
    let a = s;
    let out = a.dot(&k) + &k;
    Ok((
        out,
        AttentionCache {
            q: q.to_owned(),
            k: k.to_owned(),
            a,
            tau: tau_t,
        },
    ))
}

/// Gradients of [`attention_forward`] with respect to `q` and `k`, given the
/// gradient of the loss with respect to the output.
pub fn attention_backward<T: Real>(
    cache: &AttentionCache<T>,
    d_out: ArrayView2<'_, T>,
) -> (Array2<T>, Array2<T>) {
    let AttentionCache { q, k, a, tau } = cache;
    // Value path and residual path.
    let d_a = d_out.dot(&k.t());
    let mut d_k = a.t().dot(&d_out) + &d_out;
    // Softmax Jacobian, row by row: ds = a ⊙ (da − ⟨da, a⟩).
    let mut d_s = d_a;
    for (mut ds_row, a_row) in d_s.rows_mut().into_iter().zip(a.rows()) {
        let dot: T = ds_row.iter().zip(a_row.iter()).map(|(&d, &a)| d * a).sum();
        for (ds, &av) in ds_row.iter_mut().zip(a_row.iter()) {
            *ds = av * (*ds - dot);
        }
    }
    let tau = *tau;
    let mut d_q = d_s.dot(k);
    d_q.mapv_inplace(|v| v * tau);
    let mut d_k_score = d_s.t().dot(q);
    d_k_score.mapv_inplace(|v| v * tau);
    d_k += &d_k_score;
    (d_q, d_k)
}

/// Flat row indices of each tile, tiles in row-major order, rows within a
/// tile in row-major order. `Full` yields a single tile covering the map.
fn tile_indices(h: usize, w: usize, scope: AttentionScope) -> Result<Vec<Vec<usize>>> {
    match scope {
        AttentionScope::Full => Ok(vec![(0..h * w).collect()]),
        AttentionScope::Tiled { tile } => {
            if tile == 0 || h % tile != 0 || w % tile != 0 {
                return Err(BevError::InvalidConfig {
                    field: "scope".into(),
                    reason: format!("tile {tile} must divide map dims {h}x{w}"),
                });
            }
            let mut out = Vec::with_capacity((h / tile) * (w / tile));
            for tr in 0..h / tile {
                for tc in 0..w / tile {
                    let mut idx = Vec::with_capacity(tile * tile);
                    for r in 0..tile {
                        for c in 0..tile {
                            idx.push((tr * tile + r) * w + (tc * tile + c));
                        }
                    }
                    out.push(idx);
                }
            }
            Ok(out)
        }
    }
}

/// Attention over a flattened spatial map, split by scope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialAttention {
    /// Score scale; `None` means `1 / sqrt(key_channels)`.
    pub tau: Option<f64>,
    pub scope: AttentionScope,
}

impl Default for SpatialAttention {
    fn default() -> Self {
        SpatialAttention {
            tau: None,
            scope: AttentionScope::Full,
        }
    }
}

/// Per-tile caches plus the gather pattern used to build them.
#[derive(Debug, Clone)]
pub struct SpatialCache<T: Real> {
    tiles: Vec<(Vec<usize>, AttentionCache<T>)>,
    n: usize,
    c: usize,
}

impl SpatialAttention {
    fn resolve_tau(&self, key_channels: usize) -> f64 {
        self.tau.unwrap_or(1.0 / (key_channels as f64).sqrt())
    }

    /// `q_flat`/`k_flat` are `(h*w, c)` row-major flattenings of the map.
    pub fn forward_flat<T: Real>(
        &self,
        q_flat: ArrayView2<'_, T>,
        k_flat: ArrayView2<'_, T>,
        h: usize,
        w: usize,
    ) -> Result<(Array2<T>, SpatialCache<T>)> {
        let (n, c) = q_flat.dim();
        if n != h * w {
            return Err(BevError::ShapeMismatch {
                expected: format!("{} rows for a {h}x{w} map", h * w),
                actual: format!("{n}"),
            });
        }
        let tau = self.resolve_tau(k_flat.dim().1);
        let mut out = Array2::<T>::zeros((n, c));
        let mut tiles = Vec::new();
        for idx in tile_indices(h, w, self.scope)? {
            let q_t = q_flat.select(Axis(0), &idx);
            let k_t = k_flat.select(Axis(0), &idx);
            let (o_t, cache) = attention_forward(q_t.view(), k_t.view(), tau)?;
            for (local, &row) in idx.iter().enumerate() {
                out.row_mut(row).assign(&o_t.row(local));
            }
            tiles.push((idx, cache));
        }
        Ok((out, SpatialCache { tiles, n, c }))
    }

    pub fn backward_flat<T: Real>(
        &self,
        cache: &SpatialCache<T>,
        d_out: ArrayView2<'_, T>,
    ) -> (Array2<T>, Array2<T>) {
        let mut d_q = Array2::<T>::zeros((cache.n, cache.c));
        let mut d_k = Array2::<T>::zeros((cache.n, cache.c));
        for (idx, tile_cache) in &cache.tiles {
            let d_out_t = d_out.select(Axis(0), idx);
            let (dq_t, dk_t) = attention_backward(tile_cache, d_out_t.view());
            for (local, &row) in idx.iter().enumerate() {
                d_q.row_mut(row).assign(&dq_t.row(local));
                d_k.row_mut(row).assign(&dk_t.row(local));
            }
        }
        (d_q, d_k)
    }
}

/// Copy a `(h, w, c)` map into its `(h*w, c)` row-major flattening.
pub fn flatten_map<T: Real>(a: ArrayView3<'_, T>) -> Array2<T> {
    let (h, w, c) = a.dim();
    Array2::from_shape_fn((h * w, c), |(n, ch)| a[(n / w, n % w, ch)])
}

/// Inverse of [`flatten_map`].
pub fn unflatten_map<T: Real>(a: &Array2<T>, h: usize, w: usize) -> Array3<T> {
    let c = a.dim().1;
    Array3::from_shape_fn((h, w, c), |(r, col, ch)| a[(r * w + col, ch)])
}

fn check_same_hw<T: Real>(radar: &ArrayView3<'_, T>, lidar: &ArrayView3<'_, T>) -> Result<()> {
    let (rh, rw, _) = radar.dim();
    let (lh, lw, _) = lidar.dim();
    if (rh, rw) != (lh, lw) {
        return Err(BevError::ShapeMismatch {
            expected: format!("radar and lidar maps of equal extent, radar {rh}x{rw}"),
            actual: format!("lidar {lh}x{lw}"),
        });
    }
    Ok(())
}

/// Fusion with a learnable query attending over the channel concatenation of
/// the two modalities. Output channels = radar channels + lidar channels.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DualQueryFusion<T: Real> {
    /// Learnable, `(h*w, c_radar + c_lidar)`.
    pub query: Array2<T>,
    pub h: usize,
    pub w: usize,
    pub attn: SpatialAttention,
}

/// Forward intermediates of [`DualQueryFusion`].
pub struct DualQueryCache<T: Real> {
    spatial: SpatialCache<T>,
    c_radar: usize,
}

impl<T: Real> DualQueryFusion<T> {
    /// Query entries drawn from U[-0.05, 0.05), reproducible from `seed`.
    pub fn new(h: usize, w: usize, c_total: usize, seed: u64, attn: SpatialAttention) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<T> = (0..h * w * c_total)
            .map(|_| T::of_f64(rng.gen_range(-0.05..0.05)))
            .collect();
        DualQueryFusion {
            query: Array2::from_shape_vec((h * w, c_total), data).expect("shape matches data"),
            h,
            w,
            attn,
        }
    }

    pub fn forward(
        &self,
        radar: ArrayView3<'_, T>,
        lidar: ArrayView3<'_, T>,
    ) -> Result<(Array3<T>, DualQueryCache<T>)> {
        check_same_hw(&radar, &lidar)?;
        let (h, w, c_radar) = radar.dim();
        let c_lidar = lidar.dim().2;
        let c_total = c_radar + c_lidar;
        if (h, w) != (self.h, self.w) || c_total != self.query.dim().1 {
            return Err(BevError::ShapeMismatch {
                expected: format!("{}x{} map, {} total channels", self.h, self.w, self.query.dim().1),
                actual: format!("{h}x{w} map, {c_total} channels"),
            });
        }
        let mut k_flat = Array2::<T>::zeros((h * w, c_total));
        for r in 0..h {
            for col in 0..w {
                let row = r * w + col;
                for ch in 0..c_radar {
                    k_flat[(row, ch)] = radar[(r, col, ch)];
                }
                for ch in 0..c_lidar {
                    k_flat[(row, c_radar + ch)] = lidar[(r, col, ch)];
                }
            }
        }
        let (out_flat, spatial) = self
            .attn
            .forward_flat(self.query.view(), k_flat.view(), h, w)?;
        Ok((
            unflatten_map(&out_flat, h, w),
            DualQueryCache { spatial, c_radar },
        ))
    }

    /// Returns (d_query, d_radar, d_lidar).
    pub fn backward(
        &self,
        cache: &DualQueryCache<T>,
        d_out: ArrayView3<'_, T>,
    ) -> (Array2<T>, Array3<T>, Array3<T>) {
        let (h, w, c_total) = d_out.dim();
        let d_out_flat = flatten_map(d_out);
        let (d_query, d_k) = self.attn.backward_flat(&cache.spatial, d_out_flat.view());
        let cr = cache.c_radar;
        let d_radar = Array3::from_shape_fn((h, w, cr), |(r, c, ch)| d_k[(r * w + c, ch)]);
        let d_lidar = Array3::from_shape_fn((h, w, c_total - cr), |(r, c, ch)| {
            d_k[(r * w + c, cr + ch)]
        });
        (d_query, d_radar, d_lidar)
    }
}

/// Fusion where the radar map is the query and the LiDAR map the key/value.
/// Both maps must share extent and channel count; output matches them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectFusion {
    pub attn: SpatialAttention,
}

/// Forward intermediates of [`DirectFusion`].
pub struct DirectCache<T: Real> {
    spatial: SpatialCache<T>,
    h: usize,
    w: usize,
}

impl DirectFusion {
    pub fn forward<T: Real>(
        &self,
        radar: ArrayView3<'_, T>,
        lidar: ArrayView3<'_, T>,
    ) -> Result<(Array3<T>, DirectCache<T>)> {
        check_same_hw(&radar, &lidar)?;
        if radar.dim().2 != lidar.dim().2 {
            return Err(BevError::ShapeMismatch {
                expected: format!("{} radar channels", radar.dim().2),
                actual: format!("{} lidar channels", lidar.dim().2),
            });
        }
        let (h, w, _) = radar.dim();
        let q = flatten_map(radar);
        let k = flatten_map(lidar);
        let (out_flat, spatial) = self.attn.forward_flat(q.view(), k.view(), h, w)?;
        Ok((
            unflatten_map(&out_flat, h, w),
            DirectCache { spatial, h, w },
        ))
    }

    /// Returns (d_radar, d_lidar).
    pub fn backward<T: Real>(
        &self,
        cache: &DirectCache<T>,
        d_out: ArrayView3<'_, T>,
    ) -> (Array3<T>, Array3<T>) {
        let d_out_flat = flatten_map(d_out);
        let (d_q, d_k) = self.attn.backward_flat(&cache.spatial, d_out_flat.view());
        (
            unflatten_map(&d_q, cache.h, cache.w),
            unflatten_map(&d_k, cache.h, cache.w),
        )
    }
}
