//! End-to-end detection pipeline: the multi-scale conv model with its fusion
//! adapter, the training loop (assignment → loss → hand backprop → Adam),
//! box decoding with NMS, per-epoch validation metrics, and bit-exact
//! checkpointing.
//!
//! Determinism contract: a `TrainConfig` plus a scene list fully determines
//! every parameter and every metrics row. Epoch shuffles derive from
//! `(seed, epoch)` alone, so a run interrupted at an epoch boundary and
//! resumed from its checkpoint reproduces the uninterrupted run bit for bit.

use crate::assign::{
    assign_dips, assign_gachips, assign_gahips, assign_gahps, assign_multipositive, AnchorIndex,
    AssignmentResult, Strategy,
};
use crate::bevgrid::{pillarize, polar_to_cartesian, GridSpec};
use crate::error::{BevError, Result};
use crate::fusion::{
    AttentionScope, DirectCache, DirectFusion, DualQueryCache, DualQueryFusion, SpatialAttention,
};
use crate::geometry::{nms, RotatedBox};
use crate::loss::{channels, pipeline_loss_grad, LossBreakdown, LossConfig};
use crate::nnet::{Activation, Adam, ConvCache, ConvGrads, ConvLayer, ConvStack};
use crate::scalar::Real;
use crate::supervision::{build_supervision, decode_box_at, SupervisionPack};
use crate::synth::{scene_seed, Scene};
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Output strides of the three detection heads.
pub const HEAD_STRIDES: [usize; 3] = [1, 2, 4];
/// Checkpoint schema version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// How radar and LiDAR features are combined before the trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// No radar branch at all.
    LidarOnly,
    /// Channel concatenation, no attention.
    Concat,
    /// Radar queries LiDAR keys/values.
    Direct,
    /// Learnable query over the concatenated modalities.
    DualQuery,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [
        FusionKind::LidarOnly,
        FusionKind::Concat,
        FusionKind::Direct,
        FusionKind::DualQuery,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::LidarOnly => "lidar-only",
            FusionKind::Concat => "concat",
            FusionKind::Direct => "direct",
            FusionKind::DualQuery => "dual-query",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionKind {
    type Err = BevError;
    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|v| v.name() == s.to_lowercase())
            .ok_or_else(|| BevError::InvalidConfig {
                field: "fusion".into(),
                reason: format!(
                    "unknown fusion `{s}`; valid names: {}",
                    FusionKind::ALL.map(|v| v.name()).join(", ")
                ),
            })
    }
}

/// Channel widths of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub stem: usize,
    pub trunk: usize,
    pub down: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            stem: 8,
            trunk: 12,
            down: 16,
        }
    }
}

/// Full training configuration; the defaults are the reference setup.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub fusion: FusionKind,
    pub grid: GridSpec,
    pub dims: ModelDims,
    pub num_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    pub decay_every_epochs: usize,
    pub decay_factor: f64,
    /// Candidate-anchor threshold on the normalized heatmap.
    pub tau: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub decode: DecodeConfig,
    /// Attention layout for the direct and dual-query adapters.
    pub attention_scope: AttentionScope,
    pub eval_method: crate::eval::ApMethod,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::Gachips,
            fusion: FusionKind::Concat,
            grid: GridSpec::desk(),
            dims: ModelDims::default(),
            num_classes: 1,
            epochs: 30,
            batch_size: 4,
            lr_peak: 3e-3,
            warmup_epochs: 2,
            decay_every_epochs: 10,
            decay_factor: 0.1,
            tau: 0.2,
            val_fraction: 0.2,
            seed: 0,
            loss: LossConfig::default(),
            decode: DecodeConfig::default(),
            attention_scope: AttentionScope::Tiled { tile: 8 },
            eval_method: crate::eval::ApMethod::PrecisionEnvelope,
        }
    }
}

impl TrainConfig {
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
        chk("dims", self.dims.stem >= 1 && self.dims.trunk >= 1 && self.dims.down >= 1, "channel widths must be >= 1")?;
        chk("num_classes", self.num_classes >= 1, "must be >= 1")?;
        chk("epochs", self.epochs >= 1, "must be >= 1")?;
        chk("batch_size", self.batch_size >= 1, "must be >= 1")?;
        chk("lr_peak", self.lr_peak > 0.0 && self.lr_peak.is_finite(), "must be finite and > 0")?;
        chk("decay_every_epochs", self.decay_every_epochs >= 1, "must be >= 1")?;
        chk(
            "decay_factor",
            self.decay_factor > 0.0 && self.decay_factor <= 1.0,
            "must lie in (0, 1]",
        )?;
        chk("tau", self.tau > 0.0 && self.tau < 1.0, "must lie in (0, 1)")?;
        chk(
            "val_fraction",
            (0.0..1.0).contains(&self.val_fraction),
            "must lie in [0, 1)",
        )?;
        self.loss.validate()?;
        self.decode.validate()
    }

    /// Learning rate before optimization step `step` (0-based): linear
    /// warmup to the peak across the warmup epochs, then a stepwise decay
    /// every `decay_every_epochs`.
    pub fn lr_at(&self, step: u64, steps_per_epoch: usize) -> f64 {
        let spe = steps_per_epoch.max(1) as u64;
        let warmup_steps = self.warmup_epochs as u64 * spe;
        if step < warmup_steps {
            return self.lr_peak * (step + 1) as f64 / warmup_steps as f64;
        }
        let epoch = (step / spe) as usize;
        let periods = (epoch - self.warmup_epochs) / self.decay_every_epochs;
        self.lr_peak * self.decay_factor.powi(periods as i32)
    }
}

/// Decoding and suppression parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Objectness (sigmoid of the heatmap logit) needed to emit a box.
    pub peak_threshold: f64,
    pub nms_threshold: f64,
    /// Highest-scoring candidates kept per scale before pooling.
    pub pre_nms_top_k: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            peak_threshold: 0.1,
            nms_threshold: 0.2,
            pre_nms_top_k: 256,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_threshold > 0.0 && self.peak_threshold < 1.0) {
            return Err(BevError::InvalidConfig {
                field: "peak_threshold".into(),
                reason: "must lie in (0, 1)".into(),
            });
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold < 1.0) {
            return Err(BevError::InvalidConfig {
                field: "nms_threshold".into(),
                reason: "must lie in (0, 1)".into(),
            });
        }
        if self.pre_nms_top_k == 0 {
            return Err(BevError::InvalidConfig {
                field: "pre_nms_top_k".into(),
                reason: "must be >= 1".into(),
            });
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// The detection network. Three heads at strides 1, 2 and 4, each emitting
/// `7 + num_classes` channels (see [`crate::loss::channels`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DetectionModel<T: Real> {
    pub kind: FusionKind,
    pub lidar_stem: ConvStack<T>,
    pub radar_stem: Option<ConvStack<T>>,
    pub dual_query: Option<DualQueryFusion<T>>,
    pub direct: Option<DirectFusion>,
    pub trunk: ConvStack<T>,
    pub down2: ConvStack<T>,
    pub down4: ConvStack<T>,
    pub heads: Vec<ConvLayer<T>>,
}

/// Forward caches of one scene, consumed by [`DetectionModel::backward`].
pub struct ModelCache<T: Real> {
    lidar: Vec<ConvCache<T>>,
    radar: Option<Vec<ConvCache<T>>>,
    adapter: AdapterCache<T>,
    trunk: Vec<ConvCache<T>>,
    down2: Vec<ConvCache<T>>,
    down4: Vec<ConvCache<T>>,
    heads: Vec<ConvCache<T>>,
}

enum AdapterCache<T: Real> {
    LidarOnly,
    Concat,
    Direct(DirectCache<T>),
    Dual(DualQueryCache<T>),
}

/// Gradients for every parameter of the model, in model layout.
pub struct ModelGrads<T: Real> {
    pub lidar_stem: Vec<ConvGrads<T>>,
    pub radar_stem: Option<Vec<ConvGrads<T>>>,
    pub dual_query: Option<Array2<T>>,
    pub trunk: Vec<ConvGrads<T>>,
    pub down2: Vec<ConvGrads<T>>,
    pub down4: Vec<ConvGrads<T>>,
    pub heads: Vec<ConvGrads<T>>,
}

impl<T: Real> ModelGrads<T> {
    pub fn zeros(model: &DetectionModel<T>) -> Self {
        ModelGrads {
            lidar_stem: model.lidar_stem.zero_grads(),
            radar_stem: model.radar_stem.as_ref().map(ConvStack::zero_grads),
            dual_query: model
                .dual_query
                .as_ref()
                .map(|f| Array2::zeros(f.query.raw_dim())),
            trunk: model.trunk.zero_grads(),
            down2: model.down2.zero_grads(),
            down4: model.down4.zero_grads(),
            heads: model.heads.iter().map(ConvGrads::zeros_like).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &ModelGrads<T>) {
        let acc = |a: &mut Vec<ConvGrads<T>>, b: &Vec<ConvGrads<T>>| {
            for (x, y) in a.iter_mut().zip(b) {
                x.accumulate(y);
            }
        };
        acc(&mut self.lidar_stem, &other.lidar_stem);
        if let (Some(a), Some(b)) = (&mut self.radar_stem, &other.radar_stem) {
            acc(a, b);
        }
        if let (Some(a), Some(b)) = (&mut self.dual_query, &other.dual_query) {
            *a += b;
        }
        acc(&mut self.trunk, &other.trunk);
        acc(&mut self.down2, &other.down2);
        acc(&mut self.down4, &other.down4);
        acc(&mut self.heads, &other.heads);
    }

    pub fn scale_by(&mut self, f: f64) {
        let ft = T::of_f64(f);
        let sc = |v: &mut Vec<ConvGrads<T>>| {
            for g in v.iter_mut() {
                g.scale_by(f);
            }
        };
        sc(&mut self.lidar_stem);
        if let Some(v) = &mut self.radar_stem {
            sc(v);
        }
        if let Some(q) = &mut self.dual_query {
            q.mapv_inplace(|v| v * ft);
        }
        sc(&mut self.trunk);
        sc(&mut self.down2);
        sc(&mut self.down4);
        sc(&mut self.heads);
    }
}

fn make_stack<T: Real>(
    plan: &[(usize, usize, usize)], // (c_in, c_out, stride)
    activation: Activation,
    rng: &mut ChaCha8Rng,
) -> ConvStack<T> {
    ConvStack {
        layers: plan
            .iter()
            .map(|&(ci, co, s)| ConvLayer::init(3, ci, co, s, activation, rng))
            .collect(),
    }
}

impl<T: Real> DetectionModel<T> {
    /// Build and initialize the model from the config. Layer draws happen in
    /// a fixed order (lidar stem, radar stem, fusion query, trunk, down
    /// chains, heads), all from one stream seeded by `cfg.seed`.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dims;
        let act = Activation::leaky();
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed, u64::MAX));
        let lidar_stem = make_stack(
            &[(9, d.stem, 1), (d.stem, d.stem, 1), (d.stem, d.stem, 1)],
            act,
            &mut rng,
        );
        let needs_radar = cfg.fusion != FusionKind::LidarOnly;
        let radar_stem = needs_radar.then(|| {
            make_stack(
                &[(1, d.stem, 1), (d.stem, d.stem, 1), (d.stem, d.stem, 1)],
                act,
                &mut rng,
            )
        });
        let attn = SpatialAttention {
            tau: None,
            scope: cfg.attention_scope,
        };
        let dual_query = (cfg.fusion == FusionKind::DualQuery).then(|| {
            let qseed: u64 = rng.gen();
            DualQueryFusion::new(cfg.grid.h, cfg.grid.w, 2 * d.stem, qseed, attn)
        });
        let direct = (cfg.fusion == FusionKind::Direct).then_some(DirectFusion { attn });
        let fused_ch = match cfg.fusion {
            FusionKind::LidarOnly | FusionKind::Direct => d.stem,
            FusionKind::Concat | FusionKind::DualQuery => 2 * d.stem,
        };
        let trunk = make_stack(
            &[(fused_ch, d.trunk, 1), (d.trunk, d.trunk, 1)],
            act,
            &mut rng,
        );
        let down2 = make_stack(&[(d.trunk, d.down, 2), (d.down, d.down, 1)], act, &mut rng);
        let down4 = make_stack(&[(d.down, d.down, 2), (d.down, d.down, 1)], act, &mut rng);
        let head_ch = channels::BASE + cfg.num_classes;
        let heads: Vec<ConvLayer<T>> = [d.trunk, d.down, d.down]
            .iter()
            .map(|&ci| {
                let mut h = ConvLayer::init(3, ci, head_ch, 1, Activation::Identity, &mut rng);
                // Start the objectness logit low so the heatmap begins quiet,
                // and the size channels near a typical vehicle footprint so
                // freshly decoded boxes are plausible from the first step.
                h.bias[channels::HEAT] = T::of_f64(-2.5);
                h.bias[channels::LOG_LEN] = T::of_f64(1.5);
                h.bias[channels::LOG_WID] = T::of_f64(0.64);
                h
            })
            .collect();
        Ok(DetectionModel {
            kind: cfg.fusion,
            lidar_stem,
            radar_stem,
            dual_query,
            direct,
            trunk,
            down2,
            down4,
            heads,
        })
    }

    /// Run the network. Returns the three head tensors (strides 1, 2, 4)
    /// and the cache for [`Self::backward`].
    pub fn forward(
        &self,
        lidar: &Array3<T>,
        radar: &Array3<T>,
    ) -> Result<(Vec<Array3<T>>, ModelCache<T>)> {
        let (l_out, l_cache) = self.lidar_stem.forward(lidar.view())?;
        let (r_out, r_cache) = match &self.radar_stem {
            Some(stem) => {
                let (out, cache) = stem.forward(radar.view())?;
                (Some(out), Some(cache))
            }
            None => (None, None),
        };
        let (fused, adapter) = match self.kind {
            FusionKind::LidarOnly => (l_out, AdapterCache::LidarOnly),
            FusionKind::Concat => {
                let r = r_out.as_ref().expect("concat requires a radar stem");
                let fused = ndarray::concatenate(Axis(2), &[l_out.view(), r.view()])
                    .expect("equal extents");
                (fused, AdapterCache::Concat)
            }
            FusionKind::Direct => {
                let r = r_out.as_ref().expect("direct fusion requires a radar stem");
                let f = self.direct.as_ref().expect("configured at construction");
                let (fused, cache) = f.forward(r.view(), l_out.view())?;
                (fused, AdapterCache::Direct(cache))
            }
            FusionKind::DualQuery => {
                let r = r_out.as_ref().expect("dual-query requires a radar stem");
                let f = self.dual_query.as_ref().expect("configured at construction");
                let (fused, cache) = f.forward(r.view(), l_out.view())?;
                (fused, AdapterCache::Dual(cache))
            }
        };
        let (t_out, t_cache) = self.trunk.forward(fused.view())?;
        let (d2_out, d2_cache) = self.down2.forward(t_out.view())?;
        let (d4_out, d4_cache) = self.down4.forward(d2_out.view())?;
        let (h1, h1_cache) = self.heads[0].forward(t_out.view())?;
        let (h2, h2_cache) = self.heads[1].forward(d2_out.view())?;
        let (h3, h3_cache) = self.heads[2].forward(d4_out.view())?;
        Ok((
            vec![h1, h2, h3],
            ModelCache {
                lidar: l_cache,
                radar: r_cache,
                adapter,
                trunk: t_cache,
                down2: d2_cache,
                down4: d4_cache,
                heads: vec![h1_cache, h2_cache, h3_cache],
            },
        ))
    }

    /// Backpropagate head gradients to every parameter.
    pub fn backward(&self, cache: &ModelCache<T>, d_heads: &[Array3<T>]) -> ModelGrads<T> {
        assert_eq!(d_heads.len(), 3);
        let (g_h3, d_d4) = self.heads[2].backward(&cache.heads[2], d_heads[2].view());
        let (g_down4, d_d2_a) = self.down4.backward(&cache.down4, d_d4.view());
        let (g_h2, d_d2_b) = self.heads[1].backward(&cache.heads[1], d_heads[1].view());
        let d_d2 = d_d2_a + &d_d2_b;
        let (g_down2, d_t_a) = self.down2.backward(&cache.down2, d_d2.view());
        let (g_h1, d_t_b) = self.heads[0].backward(&cache.heads[0], d_heads[0].view());
        let d_t = d_t_a + &d_t_b;
        let (g_trunk, d_fused) = self.trunk.backward(&cache.trunk, d_t.view());

        let stem_ch = self.lidar_stem.layers.last().map(ConvLayer::c_out).unwrap_or(0);
        let (d_lidar_feat, d_radar_feat, d_query) = match (&cache.adapter, self.kind) {
            (AdapterCache::LidarOnly, _) => (d_fused, None, None),
            (AdapterCache::Concat, _) => {
                let d_l = d_fused.slice(ndarray::s![.., .., ..stem_ch]).to_owned();
                let d_r = d_fused.slice(ndarray::s![.., .., stem_ch..]).to_owned();
                (d_l, Some(d_r), None)
            }
            (AdapterCache::Direct(c), _) => {
                let f = self.direct.as_ref().expect("configured at construction");
                let (d_radar, d_lidar) = f.backward(c, d_fused.view());
                (d_lidar, Some(d_radar), None)
            }
            (AdapterCache::Dual(c), _) => {
                let f = self.dual_query.as_ref().expect("configured at construction");
                let (d_q, d_radar, d_lidar) = f.backward(c, d_fused.view());
                (d_lidar, Some(d_radar), Some(d_q))
            }
        };

        let (g_lidar, _) = self.lidar_stem.backward(&cache.lidar, d_lidar_feat.view());
        let g_radar = match (&self.radar_stem, &cache.radar, d_radar_feat) {
            (Some(stem), Some(rc), Some(d_r)) => Some(stem.backward(rc, d_r.view()).0),
            _ => None,
        };
        ModelGrads {
            lidar_stem: g_lidar,
            radar_stem: g_radar,
            dual_query: d_query,
            trunk: g_trunk,
            down2: g_down2,
            down4: g_down4,
            heads: vec![g_h1, g_h2, g_h3],
        }
    }

    /// One optimizer application. Parameters are visited in a fixed order
    /// under stable names.
    pub fn apply_gradients(
        &mut self,
        opt: &mut Adam,
        lr: f64,
        grads: &ModelGrads<T>,
    ) -> Result<()> {
        let update_stack = |opt: &mut Adam,
                            prefix: &str,
                            stack: &mut ConvStack<T>,
                            grads: &[ConvGrads<T>]|
         -> Result<()> {
            for (i, (layer, g)) in stack.layers.iter_mut().zip(grads).enumerate() {
                opt.update_conv(&format!("{prefix}.{i}"), lr, layer, g)?;
            }
            Ok(())
        };
        update_stack(opt, "lidar_stem", &mut self.lidar_stem, &grads.lidar_stem)?;
        if let (Some(stem), Some(g)) = (&mut self.radar_stem, &grads.radar_stem) {
            update_stack(opt, "radar_stem", stem, g)?;
        }
        if let (Some(f), Some(g)) = (&mut self.dual_query, &grads.dual_query) {
            opt.update(
                "dual_query.query",
                lr,
                f.query.view_mut().into_dyn(),
                g.view().into_dyn(),
            )?;
        }
        update_stack(opt, "trunk", &mut self.trunk, &grads.trunk)?;
        update_stack(opt, "down2", &mut self.down2, &grads.down2)?;
        update_stack(opt, "down4", &mut self.down4, &grads.down4)?;
        for (i, (layer, g)) in self.heads.iter_mut().zip(&grads.heads).enumerate() {
            opt.update_conv(&format!("head.{i}"), lr, layer, g)?;
        }
        Ok(())
    }

    /// Stable names of all parameters, in visitation order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        fn stack<T: Real>(names: &mut Vec<String>, prefix: &str, s: &ConvStack<T>) {
            for i in 0..s.layers.len() {
                names.push(format!("{prefix}.{i}.weight"));
                names.push(format!("{prefix}.{i}.bias"));
            }
        }
        stack(&mut names, "lidar_stem", &self.lidar_stem);
        if let Some(s) = &self.radar_stem {
            stack(&mut names, "radar_stem", s);
        }
        if self.dual_query.is_some() {
            names.push("dual_query.query".into());
        }
        stack(&mut names, "trunk", &self.trunk);
        stack(&mut names, "down2", &self.down2);
        stack(&mut names, "down4", &self.down4);
        for i in 0..self.heads.len() {
            names.push(format!("head.{i}.weight"));
            names.push(format!("head.{i}.bias"));
        }
        names
    }

    /// Total scalar parameter count.
    pub fn n_params(&self) -> usize {
        let stack = |s: &ConvStack<T>| -> usize {
            s.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
        };
        stack(&self.lidar_stem)
            + self.radar_stem.as_ref().map(&stack).unwrap_or(0)
            + self.dual_query.as_ref().map(|f| f.query.len()).unwrap_or(0)
            + stack(&self.trunk)
            + stack(&self.down2)
            + stack(&self.down4)
            + self
                .heads
                .iter()
                .map(|l| l.weight.len() + l.bias.len())
                .sum::<usize>()
    }
}

/// Ready-to-train representation of one scene.
pub struct SceneFeatures<T: Real> {
    pub lidar: Array3<T>,
    pub radar: Array3<T>,
    pub pack: SupervisionPack<T>,
}

/// Featurize one scene: pillarized LiDAR, resampled radar, and supervision.
pub fn featurize_scene<T: Real>(
    scene: &Scene,
    grid: &GridSpec,
    tau: f64,
) -> Result<SceneFeatures<T>> {
    let lidar = pillarize::<T>(&scene.lidar_points, grid).data;
    let radar = polar_to_cartesian::<f64>(&scene.radar, grid).cast::<T>().data;
    let pack = build_supervision::<T>(&scene.gt_boxes, grid, &HEAD_STRIDES, tau)?;
    Ok(SceneFeatures { lidar, radar, pack })
}

/// Featurize many scenes, optionally across threads. The result is
/// identical for every thread count.
pub fn featurize_scenes<T: Real>(
    scenes: &[Scene],
    grid: &GridSpec,
    tau: f64,
    threads: usize,
) -> Result<Vec<SceneFeatures<T>>> {
    let threads = threads.max(1).min(scenes.len().max(1));
    if threads <= 1 {
        return scenes.iter().map(|s| featurize_scene(s, grid, tau)).collect();
    }
    let mut out: Vec<Option<Result<SceneFeatures<T>>>> = (0..scenes.len()).map(|_| None).collect();
    let chunk = scenes.len().div_ceil(threads);
    std::thread::scope(|scope| {
        for (scenes_chunk, out_chunk) in scenes.chunks(chunk).zip(out.chunks_mut(chunk)) {
            scope.spawn(move || {
                for (s, slot) in scenes_chunk.iter().zip(out_chunk.iter_mut()) {
                    *slot = Some(featurize_scene(s, grid, tau));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("all slots filled")).collect()
}

/// Decode one model output into scored boxes: threshold the objectness map,
/// decode each surviving cell, keep the top K per scale, pool the scales and
/// run rotated NMS. Ordering is pinned (score desc, then scale, row, col).
pub fn decode_detections<T: Real>(
    heads: &[Array3<T>],
    specs: &[GridSpec],
    cfg: &DecodeConfig,
) -> Result<Vec<RotatedBox<f64>>> {
    cfg.validate()?;
    if heads.len() != specs.len() {
        return Err(BevError::ShapeMismatch {
            expected: format!("{} head tensors", specs.len()),
            actual: format!("{}", heads.len()),
        });
    }
    // (score, scale, row, col, box) tuples with a total order.
    let mut pooled: Vec<(f64, usize, usize, usize, RotatedBox<f64>)> = Vec::new();
    for (scale, (head, spec)) in heads.iter().zip(specs).enumerate() {
        let (h, w, c) = head.dim();
        if (h, w) != (spec.h, spec.w) || c < channels::BASE {
            return Err(BevError::ShapeMismatch {
                expected: format!("({}, {}, >={})", spec.h, spec.w, channels::BASE),
                actual: format!("{:?}", head.dim()),
            });
        }
        let mut scale_dets = Vec::new();
        for r in 0..h {
            for col in 0..w {
                let score = sigmoid(head[(r, col, channels::HEAT)].as_f64());
                if score < cfg.peak_threshold {
                    continue;
                }
                let ch = [
                    head[(r, col, channels::DX)].as_f64(),
                    head[(r, col, channels::DY)].as_f64(),
                    head[(r, col, channels::LOG_LEN)].as_f64(),
                    head[(r, col, channels::LOG_WID)].as_f64(),
                    sigmoid(head[(r, col, channels::ANGLE_CLASS)].as_f64()),
                    head[(r, col, channels::ANGLE_OFFSET)].as_f64(),
                ];
                let class_id = (channels::BASE..c)
                    .max_by(|&a, &b| {
                        head[(r, col, a)]
                            .as_f64()
                            .total_cmp(&head[(r, col, b)].as_f64())
                            .then(b.cmp(&a))
                    })
                    .map(|ch| (ch - channels::BASE) as u32)
                    .unwrap_or(0);
                let b = decode_box_at(spec, r, col, &ch)?
                    .with_score(score)
                    .expect("sigmoid lies in [0, 1]")
                    .with_class(class_id);
                scale_dets.push((score, scale, r, col, b));
            }
        }
        scale_dets.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.2.cmp(&b.2))
                .then(a.3.cmp(&b.3))
        });
        scale_dets.truncate(cfg.pre_nms_top_k);
        pooled.extend(scale_dets);
    }
    pooled.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let boxes: Vec<RotatedBox<f64>> = pooled.into_iter().map(|t| t.4).collect();
    nms(&boxes, cfg.nms_threshold)
}

/// Run the assignment strategy against the current predictions.
pub fn compute_assignment<T: Real>(
    strategy: Strategy,
    pack: &SupervisionPack<T>,
    heads: &[Array3<T>],
    tau: f64,
) -> Result<AssignmentResult> {
    match strategy {
        Strategy::MultiPositive => Ok(assign_multipositive(pack, tau)),
        Strategy::Dips => Ok(assign_dips(pack)),
        Strategy::Gahps | Strategy::Gahips | Strategy::Gachips => {
            let pred_heat: Vec<Array2<f64>> = heads
                .iter()
                .map(|h| {
                    Array2::from_shape_fn((h.dim().0, h.dim().1), |(r, c)| {
                        sigmoid(h[(r, c, channels::HEAT)].as_f64())
                    })
                })
                .collect();
            if strategy == Strategy::Gahps {
                return assign_gahps(pack, &pred_heat);
            }
            let decode = |a: AnchorIndex| -> Option<RotatedBox<f64>> {
                let h = &heads[a.scale];
                let spec = &pack.scales[a.scale].spec;
                let ch = [
                    h[(a.row, a.col, channels::DX)].as_f64(),
                    h[(a.row, a.col, channels::DY)].as_f64(),
                    h[(a.row, a.col, channels::LOG_LEN)].as_f64(),
                    h[(a.row, a.col, channels::LOG_WID)].as_f64(),
                    sigmoid(h[(a.row, a.col, channels::ANGLE_CLASS)].as_f64()),
                    h[(a.row, a.col, channels::ANGLE_OFFSET)].as_f64(),
                ];
                decode_box_at(spec, a.row, a.col, &ch).ok()
            };
            if strategy == Strategy::Gahips {
                assign_gahips(pack, &pred_heat, decode)
            } else {
                assign_gachips(pack, &pred_heat, decode)
            }
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub strategy: Strategy,
    pub fusion: FusionKind,
    /// Mean per-scene losses over the epoch.
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_box: f64,
    pub ap50: f64,
    pub ap65: f64,
    pub ap80: f64,
    /// FNV-1a hash of the epoch's shuffled scene order.
    pub order_hash: u64,
}

/// Render metrics rows as CSV (stable format, no timestamps).
pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out =
        String::from("epoch,strategy,fusion,loss_total,loss_cls,loss_box,ap50,ap65,ap80,order_hash\n");
    for m in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:016x}\n",
            m.epoch,
            m.strategy,
            m.fusion,
            m.loss_total,
            m.loss_cls,
            m.loss_box,
            m.ap50,
            m.ap65,
            m.ap80,
            m.order_hash
        ));
    }
    out
}

fn fnv1a(values: impl IntoIterator<Item = u64>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325_u64;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1_0000_0001_b3);
        }
    }
    h
}

/// Complete, serializable training state.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TrainState<T: Real> {
    pub version: u32,
    pub config: TrainConfig,
    pub model: DetectionModel<T>,
    pub optimizer: Adam,
    pub epochs_done: usize,
    pub metrics: Vec<EpochMetrics>,
}

impl<T: Real> TrainState<T> {
    /// Fresh state with an initialized model.
    pub fn new(config: TrainConfig) -> Result<Self> {
        let model = DetectionModel::new(&config)?;
        Ok(TrainState {
            version: CHECKPOINT_VERSION,
            config,
            model,
            optimizer: Adam::default(),
            epochs_done: 0,
            metrics: Vec::new(),
        })
    }
}

/// Write a checkpoint as JSON. Floats survive the round trip bit-exactly.
pub fn save_checkpoint<T: Real>(path: &Path, state: &TrainState<T>) -> Result<()> {
    let shown = path.display().to_string();
    let json = serde_json::to_string(state)
        .map_err(|e| BevError::malformed(&shown, format!("serialize failed: {e}")))?;
    std::fs::write(path, json).map_err(|e| BevError::io(shown, e))
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<TrainState<T>> {
    let shown = path.display().to_string();
    let raw = std::fs::read_to_string(path).map_err(|e| BevError::io(&shown, e))?;
    let state: TrainState<T> =
        serde_json::from_str(&raw).map_err(|e| BevError::malformed(&shown, format!("{e}")))?;
    if state.version != CHECKPOINT_VERSION {
        return Err(BevError::malformed(
            shown,
            format!("checkpoint version {} (expected {CHECKPOINT_VERSION})", state.version),
        ));
    }
    Ok(state)
}

/// Deterministic train/validation split: the last `val_fraction` of the
/// scene list (by position) validates, the rest trains.
pub fn split_indices(n: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let split = n - n_val;
    ((0..split).collect(), (split..n).collect())
}

/// Evaluate the model on a set of featurized scenes.
pub fn evaluate_model<T: Real>(
    model: &DetectionModel<T>,
    features: &[SceneFeatures<T>],
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<crate::eval::EvalReport> {
    let specs: Vec<GridSpec> = HEAD_STRIDES.iter().map(|&s| cfg.grid.at_stride(s)).collect();
    let mut scenes = Vec::with_capacity(indices.len());
    for &i in indices {
        let f = &features[i];
        let (heads, _) = model.forward(&f.lidar, &f.radar)?;
        let dets = decode_detections(&heads, &specs, &cfg.decode)?;
        scenes.push((dets, f.pack.gt_boxes.clone()));
    }
    crate::eval::evaluate(
        &scenes,
        &crate::eval::DEFAULT_IOU_THRESHOLDS,
        cfg.eval_method,
    )
}

/// Advance training to `target_epoch` (exclusive upper bound = total epochs
/// completed). Calls `on_epoch` after each epoch's metrics row is final.
pub fn train_until<T: Real>(
    state: &mut TrainState<T>,
    features: &[SceneFeatures<T>],
    target_epoch: usize,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<()> {
    let cfg = state.config.clone();
    cfg.validate()?;
    if features.is_empty() {
        return Err(BevError::EmptyDataset);
    }
    let (train_idx, val_idx) = split_indices(features.len(), cfg.val_fraction);
    if train_idx.is_empty() {
        return Err(BevError::EmptyDataset);
    }
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);

    for epoch in state.epochs_done..target_epoch {
        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let order_hash = fnv1a(order.iter().map(|&i| i as u64));

        let mut epoch_loss = LossBreakdown::default();
        let mut scenes_seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let lr = cfg.lr_at(state.optimizer.t, steps_per_epoch);
            let mut grads: Option<ModelGrads<T>> = None;
            for &i in batch {
                let f = &features[i];
                let (heads, cache) = state.model.forward(&f.lidar, &f.radar)?;
                let assignment =
                    compute_assignment(cfg.strategy, &f.pack, &heads, cfg.tau)?;
                let views: Vec<_> = heads.iter().map(|h| h.view()).collect();
                let (loss, d_heads) =
                    pipeline_loss_grad(&views, &f.pack, &assignment, &cfg.loss)?;
                epoch_loss.add(&loss);
                scenes_seen += 1;
                let g = state.model.backward(&cache, &d_heads);
                match &mut grads {
                    Some(acc) => acc.accumulate(&g),
                    None => grads = Some(g),
                }
            }
            let mut grads = grads.expect("batch is non-empty");
            grads.scale_by(1.0 / batch.len() as f64);
            state.optimizer.begin_step();
            state.model.apply_gradients(&mut state.optimizer, lr, &grads)?;
        }

        let (ap50, ap65, ap80) = if val_idx.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            let report = evaluate_model(&state.model, features, &val_idx, &cfg)?;
            (
                report.ap_at(0.5).unwrap_or(0.0),
                report.ap_at(0.65).unwrap_or(0.0),
                report.ap_at(0.8).unwrap_or(0.0),
            )
        };
        let n = scenes_seen.max(1) as f64;
        let row = EpochMetrics {
            epoch,
            strategy: cfg.strategy,
            fusion: cfg.fusion,
            loss_total: epoch_loss.total() / n,
            loss_cls: epoch_loss.cls / n,
            loss_box: epoch_loss.box_reg / n,
            ap50,
            ap65,
            ap80,
            order_hash,
        };
        state.metrics.push(row.clone());
        state.epochs_done = epoch + 1;
        on_epoch(&row);
    }
    Ok(())
}
