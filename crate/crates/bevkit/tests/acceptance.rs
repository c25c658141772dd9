//! Acceptance gates: ten pass/fail checks covering exact micro-behaviors,
//! oracle equivalence, gradient correctness, invariants, and end-to-end
//! training studies. Each test prints one `ACCEPTANCE nn PASS|FAIL` line;
//! run with `--nocapture --test-threads=1` for live output. Tolerances and
//! budgets are pinned in the code, not configurable.

use bevkit::assign::{
    argmax_over_candidates, assign_dips, assign_gachips, assign_gahips, assign_gahps,
    assign_multipositive, AnchorIndex, Strategy,
};
use bevkit::bevgrid::GridSpec;
use bevkit::eval::pr_curve;
use bevkit::fusion::{
    attention_forward, AttentionScope, DirectFusion, DualQueryFusion, SpatialAttention,
};
use bevkit::geometry::{corners, rotated_iou, RotatedBox};
use bevkit::loss::{
    channels, head_loss_grad, pipeline_loss_grad, ClsLossKind, LossConfig, NegativeMode,
};
use bevkit::nnet::{Activation, ConvLayer};
use bevkit::pipeline::{
    evaluate_model, featurize_scene, featurize_scenes, train_until, DetectionModel, FusionKind,
    ModelDims, SceneFeatures, TrainConfig, TrainState,
};
use bevkit::supervision::{box_covariance, build_supervision, decode_box_at, SupervisionPack};
use bevkit::synth::{generate_dataset, generate_scene, FogMode, SynthConfig, Weather};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

// ---------------------------------------------------------------------------
// Reporting plumbing
// ---------------------------------------------------------------------------

fn report(n: u32, name: &str, started: Instant, r: Result<(), String>) {
    let dt = started.elapsed().as_secs_f64();
    match r {
        Ok(()) => println!("ACCEPTANCE {n:02} PASS {name} [{dt:.1}s]"),
        Err(e) => {
            println!("ACCEPTANCE {n:02} FAIL {name} [{dt:.1}s]: {e}");
            panic!("acceptance gate {n} failed: {e}");
        }
    }
}

fn within_budget(started: Instant, limit_s: f64) -> Result<(), String> {
    let dt = started.elapsed().as_secs_f64();
    if dt <= limit_s {
        Ok(())
    } else {
        Err(format!("runtime {dt:.1}s exceeds the {limit_s:.0}s budget"))
    }
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Tiny deterministic generator for the Monte-Carlo sampler (criterion 3
/// draws ~2·10⁹ numbers, so it must be cheap and dependency-free).
struct SplitMix64(u64);

impl SplitMix64 {
    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }
}

fn boxf(cx: f64, cy: f64, l: f64, w: f64, th: f64) -> RotatedBox<f64> {
    RotatedBox::new(cx, cy, l, w, th).expect("valid box")
}

// ---------------------------------------------------------------------------
// 1. PR-curve exactness on the seven-detection worked example
// ---------------------------------------------------------------------------

#[test]
fn c01_pr_curve_exactness() {
    let t0 = Instant::now();
    let run = || {
        let hits = vec![
            (0.9, true),
            (0.8, true),
            (0.7, false),
            (0.6, true),
            (0.5, true),
            (0.4, true),
            (0.3, false),
        ];
        let expected_p = [
            1.0,
            1.0,
            2.0 / 3.0,
            3.0 / 4.0,
            4.0 / 5.0,
            5.0 / 6.0,
            5.0 / 7.0,
        ];
        let expected_r = [0.2, 0.4, 0.4, 0.6, 0.8, 1.0, 1.0];

        let timer = Instant::now();
        let curve = pr_curve(hits, 5);
        let dt = timer.elapsed().as_secs_f64();

        if curve.points.len() != 7 {
            return Err(format!("expected 7 curve points, got {}", curve.points.len()));
        }
        for (i, pt) in curve.points.iter().enumerate() {
            if (pt.precision - expected_p[i]).abs() > 1e-12 {
                return Err(format!(
                    "precision[{i}] = {} but the exact value is {}",
                    pt.precision, expected_p[i]
                ));
            }
            if (pt.recall - expected_r[i]).abs() > 1e-12 {
                return Err(format!(
                    "recall[{i}] = {} but the exact value is {}",
                    pt.recall, expected_r[i]
                ));
            }
        }
        if dt >= 1e-3 {
            return Err(format!("pr_curve took {dt:.6}s, budget is 1ms"));
        }
        Ok(())
    };
    // One warmup run so the timed call measures the function, not the loader.
    let _ = run();
    report(1, "pr-curve exactness", t0, run());
}

// ---------------------------------------------------------------------------
// 2. Box covariance equals the rotated diagonal closed form
// ---------------------------------------------------------------------------

#[test]
fn c02_box_covariance_closed_form() {
    let t0 = Instant::now();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst = 0.0_f64;
        for _ in 0..1000 {
            let b = boxf(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(0.5..6.0),
                rng.gen_range(0.3..4.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            );
            let got = box_covariance(&b);
            let (c, s) = (b.theta.cos(), b.theta.sin());
            let (a2, b2) = ((b.length / 2.0).powi(2), (b.width / 2.0).powi(2));
            // R diag(a², b²) Rᵀ expanded.
            let want = [
                [a2 * c * c + b2 * s * s, (a2 - b2) * s * c],
                [(a2 - b2) * s * c, a2 * s * s + b2 * c * c],
            ];
            for i in 0..2 {
                for j in 0..2 {
                    worst = worst.max((got[i][j] - want[i][j]).abs());
                }
            }
        }
        if worst > 1e-12 {
            return Err(format!("max covariance deviation {worst:.3e} > 1e-12"));
        }
        within_budget(t0, 1.0)
    };
    report(2, "box covariance closed form", t0, run());
}

// ---------------------------------------------------------------------------
// 3. Rotated IoU against a Monte-Carlo area oracle
// ---------------------------------------------------------------------------

struct FrameBox {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    hl: f64,
    hw: f64,
}

impl FrameBox {
    fn of(b: &RotatedBox<f64>) -> Self {
        FrameBox {
            cx: b.cx,
            cy: b.cy,
            cos: b.theta.cos(),
            sin: b.theta.sin(),
            hl: b.length / 2.0,
            hw: b.width / 2.0,
        }
    }

    #[inline(always)]
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        u.abs() <= self.hl && v.abs() <= self.hw
    }
}

#[test]
fn c03_rotated_iou_vs_monte_carlo() {
    let t0 = Instant::now();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mc = SplitMix64(0x5eed_0003);
        let mut worst = 0.0_f64;
        let mut worst_pair = 0usize;
        for pair in 0..1000 {
            let a = boxf(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(1.0..5.0),
                rng.gen_range(0.8..3.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            );
            let b = boxf(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(1.0..5.0),
                rng.gen_range(0.8..3.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            );
            let exact = rotated_iou(&a, &b);

            // Tight sampling window: bounding rectangle of both corner sets.
            let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for poly in [corners(&a), corners(&b)] {
                for &(x, y) in poly.vertices() {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
            let (fa, fb) = (FrameBox::of(&a), FrameBox::of(&b));
            let (sx, sy) = (x1 - x0, y1 - y0);
            let (mut in_a, mut in_b, mut in_both) = (0u32, 0u32, 0u32);
            for _ in 0..1_000_000 {
                let x = x0 + sx * mc.next_f64();
                let y = y0 + sy * mc.next_f64();
                let ia = fa.contains(x, y);
                let ib = fb.contains(x, y);
                in_a += ia as u32;
                in_b += ib as u32;
                in_both += (ia && ib) as u32;
            }
            let union = in_a + in_b - in_both;
            let estimate = if union == 0 {
                0.0
            } else {
                f64::from(in_both) / f64::from(union)
            };
            let err = (estimate - exact).abs();
            if err > worst {
                worst = err;
                worst_pair = pair;
            }
        }
        if worst >= 1e-2 {
            return Err(format!(
                "max |MC - exact| = {worst:.4} (pair {worst_pair}) >= 1e-2"
            ));
        }

        // Axis-aligned agreement with the interval closed form.
        let mut worst_axis = 0.0_f64;
        for _ in 0..1000 {
            let a = boxf(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.5..5.0),
                rng.gen_range(0.5..4.0),
                0.0,
            );
            let b = boxf(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.5..5.0),
                rng.gen_range(0.5..4.0),
                0.0,
            );
            let ox = (a.cx + a.length / 2.0)
                .min(b.cx + b.length / 2.0)
                .sub_clamped(a.cx - a.length / 2.0, b.cx - b.length / 2.0);
            let oy = (a.cy + a.width / 2.0)
                .min(b.cy + b.width / 2.0)
                .sub_clamped(a.cy - a.width / 2.0, b.cy - b.width / 2.0);
            let inter = ox * oy;
            let union = a.area() + b.area() - inter;
            let closed = if union > 0.0 { inter / union } else { 0.0 };
            worst_axis = worst_axis.max((rotated_iou(&a, &b) - closed).abs());
        }
        if worst_axis > 1e-12 {
            return Err(format!(
                "axis-aligned disagreement {worst_axis:.3e} > 1e-12"
            ));
        }
        within_budget(t0, 60.0)
    };
    report(3, "rotated IoU vs Monte-Carlo oracle", t0, run());
}

/// `min(self, ...) - max(lo1, lo2)`, clamped at zero: interval overlap.
trait SubClamped {
    fn sub_clamped(self, lo1: f64, lo2: f64) -> f64;
}

impl SubClamped for f64 {
    fn sub_clamped(self, lo1: f64, lo2: f64) -> f64 {
        (self - lo1.max(lo2)).max(0.0)
    }
}

// ---------------------------------------------------------------------------
// 4. Gradient suite against central finite differences
// ---------------------------------------------------------------------------

fn central_fd(mut f: impl FnMut(f64) -> f64, eps: f64) -> f64 {
    (f(eps) - f(-eps)) / (2.0 * eps)
}

/// Finite-difference check of the per-head loss for one classification-loss
/// configuration: focal positives/negatives, smooth-L1 regression and the
/// angle-class cross entropy all flow through the same seam.
fn check_head_loss_kind(
    kind: ClsLossKind,
    mode: NegativeMode,
    seed: u64,
) -> Result<(), String> {
    let spec = GridSpec::new(8, 8, 0.5, -2.0, -2.0).map_err(|e| e.to_string())?;
    let gt = vec![boxf(0.2, -0.1, 2.2, 1.0, 0.7)];
    let pack: SupervisionPack<f64> =
        build_supervision(&gt, &spec, &[1], 0.2).map_err(|e| e.to_string())?;
    let sup = &pack.scales[0];
    let cfg = LossConfig {
        negative_mode: mode,
        ..LossConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c_total = channels::BASE + 1;
    for state in 0..100 {
        let head = Array3::from_shape_fn((8, 8, c_total), |_| rng.gen_range(-3.0..3.0));
        let mut alpha = Array2::from_elem((8, 8), false);
        for _ in 0..3 {
            alpha[(rng.gen_range(0..8), rng.gen_range(0..8))] = true;
        }
        let (_, grad) = head_loss_grad(head.view(), sup, &alpha, kind, &cfg)
            .map_err(|e| e.to_string())?;
        for _ in 0..10 {
            let (r, c, ch) = (
                rng.gen_range(0..8),
                rng.gen_range(0..8),
                rng.gen_range(0..channels::BASE),
            );
            let analytic = grad[(r, c, ch)];
            let mut probe = head.clone();
            let fd = central_fd(
                |d| {
                    probe[(r, c, ch)] = head[(r, c, ch)] + d;
                    let (bd, _) =
                        head_loss_grad(probe.view(), sup, &alpha, kind, &cfg).expect("loss");
                    bd.total()
                },
                1e-5,
            );
            // Central differences on the summed loss carry ~1e-9 of absolute
            // roundoff; below that the comparison measures noise.
            if analytic.abs().max(fd.abs()) < 1e-10 || (analytic - fd).abs() < 1e-9 {
                continue;
            }
            let re = rel_err(analytic, fd);
            if re >= 1e-4 {
                return Err(format!(
                    "state {state} {kind:?}/{mode:?} channel {ch} at ({r},{c}): \
                     analytic {analytic:.6e} vs FD {fd:.6e} (rel {re:.2e})"
                ));
            }
        }
    }
    Ok(())
}

fn check_direct_fusion(seed: u64) -> Result<(), String> {
    let attn = SpatialAttention {
        tau: None,
        scope: AttentionScope::Full,
    };
    let fusion = DirectFusion { attn };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for state in 0..100 {
        let radar = Array3::from_shape_fn((4, 4, 3), |_| rng.gen_range(-1.0..1.0));
        let lidar = Array3::from_shape_fn((4, 4, 3), |_| rng.gen_range(-1.0..1.0));
        let wmap = Array3::from_shape_fn((4, 4, 3), |_| rng.gen_range(-1.0..1.0));
        let loss = |r: &Array3<f64>, l: &Array3<f64>| -> f64 {
            let (out, _) = fusion.forward(r.view(), l.view()).expect("forward");
            out.iter().zip(wmap.iter()).map(|(o, w)| o * w).sum()
        };
        let (_, cache) = fusion.forward(radar.view(), lidar.view()).expect("forward");
        let (d_radar, d_lidar) = fusion.backward(&cache, wmap.view());
        for _ in 0..6 {
            let idx = (
                rng.gen_range(0..4),
                rng.gen_range(0..4),
                rng.gen_range(0..3),
            );
            for (tag, analytic) in [("radar", d_radar[idx]), ("lidar", d_lidar[idx])] {
                let fd = central_fd(
                    |d| {
                        let mut r = radar.clone();
                        let mut l = lidar.clone();
                        if tag == "radar" {
                            r[idx] += d;
                        } else {
                            l[idx] += d;
                        }
                        loss(&r, &l)
                    },
                    1e-6,
                );
                if analytic.abs().max(fd.abs()) < 1e-10 {
                    continue;
                }
                let re = rel_err(analytic, fd);
                if re >= 1e-4 {
                    return Err(format!(
                        "direct fusion state {state} {tag}{idx:?}: {analytic:.6e} vs {fd:.6e} \
                         (rel {re:.2e})"
                    ));
                }
            }
        }
    }
    Ok(())
}

fn check_dual_query_fusion(seed: u64) -> Result<(), String> {
    let attn = SpatialAttention {
        tau: None,
        scope: AttentionScope::Full,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for state in 0..100 {
        let fusion = DualQueryFusion::<f64>::new(4, 4, 6, seed.wrapping_add(state), attn);
        let radar = Array3::from_shape_fn((4, 4, 2), |_| rng.gen_range(-1.0..1.0));
        let lidar = Array3::from_shape_fn((4, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let wmap = Array3::from_shape_fn((4, 4, 6), |_| rng.gen_range(-1.0..1.0));
        let loss = |f: &DualQueryFusion<f64>, r: &Array3<f64>, l: &Array3<f64>| -> f64 {
            let (out, _) = f.forward(r.view(), l.view()).expect("forward");
            out.iter().zip(wmap.iter()).map(|(o, w)| o * w).sum()
        };
        let (_, cache) = fusion.forward(radar.view(), lidar.view()).expect("forward");
        let (d_query, d_radar, d_lidar) = fusion.backward(&cache, wmap.view());
        for _ in 0..4 {
            let ridx = (
                rng.gen_range(0..4),
                rng.gen_range(0..4),
                rng.gen_range(0..2),
            );
            let lidx = (
                rng.gen_range(0..4),
                rng.gen_range(0..4),
                rng.gen_range(0..4),
            );
            let qidx = (rng.gen_range(0..16), rng.gen_range(0..6));
            let checks = [
                ("radar", d_radar[ridx]),
                ("lidar", d_lidar[lidx]),
                ("query", d_query[qidx]),
            ];
            for (tag, analytic) in checks {
                let fd = central_fd(
                    |d| {
                        let mut f = fusion.clone();
                        let mut r = radar.clone();
                        let mut l = lidar.clone();
                        match tag {
                            "radar" => r[ridx] += d,
                            "lidar" => l[lidx] += d,
                            _ => f.query[qidx] += d,
                        }
                        loss(&f, &r, &l)
                    },
                    1e-6,
                );
                if analytic.abs().max(fd.abs()) < 1e-10 {
                    continue;
                }
                let re = rel_err(analytic, fd);
                if re >= 1e-4 {
                    return Err(format!(
                        "dual-query state {state} {tag}: {analytic:.6e} vs {fd:.6e} \
                         (rel {re:.2e})"
                    ));
                }
            }
        }
    }
    Ok(())
}

fn check_isolated_conv(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for state in 0..100 {
        let c_in = rng.gen_range(1..4);
        let c_out = rng.gen_range(1..4);
        let stride = if rng.gen_bool(0.5) { 1 } else { 2 };
        let activation = if state % 2 == 0 {
            Activation::leaky()
        } else {
            Activation::Identity
        };
        let layer: ConvLayer<f64> = ConvLayer::init(3, c_in, c_out, stride, activation, &mut rng);
        // Keep pre-activations away from the rectifier kink so central
        // differences see a smooth function.
        let input = loop {
            let x = Array3::from_shape_fn((5, 5, c_in), |_| rng.gen_range(-1.0..1.0));
            let (out, _) = layer.forward(x.view()).expect("forward");
            if out.iter().all(|v| v.abs() > 1e-4) {
                break x;
            }
        };
        let (out, cache) = layer.forward(input.view()).expect("forward");
        let wmap = out.mapv(|_| rng.gen_range(-1.0..1.0));
        let loss = |l: &ConvLayer<f64>, x: &Array3<f64>| -> f64 {
            let (o, _) = l.forward(x.view()).expect("forward");
            o.iter().zip(wmap.iter()).map(|(a, b)| a * b).sum()
        };
        let (grads, d_in) = layer.backward(&cache, wmap.view());
        let wdim = layer.weight.dim();
        for probe in 0..8 {
            let (tag, analytic, fd) = match probe % 3 {
                0 => {
                    let idx = (
                        rng.gen_range(0..wdim.0),
                        rng.gen_range(0..wdim.1),
                        rng.gen_range(0..wdim.2),
                        rng.gen_range(0..wdim.3),
                    );
                    let a = grads.d_weight[idx];
                    let f = central_fd(
                        |d| {
                            let mut l = layer.clone();
                            l.weight[idx] += d;
                            loss(&l, &input)
                        },
                        1e-6,
                    );
                    ("weight", a, f)
                }
                1 => {
                    let idx = rng.gen_range(0..c_out);
                    let a = grads.d_bias[idx];
                    let f = central_fd(
                        |d| {
                            let mut l = layer.clone();
                            l.bias[idx] += d;
                            loss(&l, &input)
                        },
                        1e-6,
                    );
                    ("bias", a, f)
                }
                _ => {
                    let idx = (
                        rng.gen_range(0..5),
                        rng.gen_range(0..5),
                        rng.gen_range(0..c_in),
                    );
                    let a = d_in[idx];
                    let f = central_fd(
                        |d| {
                            let mut x = input.clone();
                            x[idx] += d;
                            loss(&layer, &x)
                        },
                        1e-6,
                    );
                    ("input", a, f)
                }
            };
            if analytic.abs().max(fd.abs()) < 1e-10 {
                continue;
            }
            let re = rel_err(analytic, fd);
            if re >= 1e-4 {
                return Err(format!(
                    "conv state {state} {tag}: {analytic:.6e} vs {fd:.6e} (rel {re:.2e})"
                ));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum ParamSite {
    Weight(StackId, usize, (usize, usize, usize, usize)),
    Bias(StackId, usize, usize),
    Query(usize, usize),
}

#[derive(Clone, Copy)]
enum StackId {
    LidarStem,
    RadarStem,
    Trunk,
    Down2,
    Down4,
    Head(usize),
}

fn layer_of<'m>(model: &'m DetectionModel<f64>, id: StackId, layer: usize) -> &'m ConvLayer<f64> {
    match id {
        StackId::LidarStem => &model.lidar_stem.layers[layer],
        StackId::RadarStem => &model.radar_stem.as_ref().expect("radar stem").layers[layer],
        StackId::Trunk => &model.trunk.layers[layer],
        StackId::Down2 => &model.down2.layers[layer],
        StackId::Down4 => &model.down4.layers[layer],
        StackId::Head(i) => &model.heads[i],
    }
}

fn layer_of_mut<'m>(
    model: &'m mut DetectionModel<f64>,
    id: StackId,
    layer: usize,
) -> &'m mut ConvLayer<f64> {
    match id {
        StackId::LidarStem => &mut model.lidar_stem.layers[layer],
        StackId::RadarStem => &mut model.radar_stem.as_mut().expect("radar stem").layers[layer],
        StackId::Trunk => &mut model.trunk.layers[layer],
        StackId::Down2 => &mut model.down2.layers[layer],
        StackId::Down4 => &mut model.down4.layers[layer],
        StackId::Head(i) => &mut model.heads[i],
    }
}

fn apply_site(model: &mut DetectionModel<f64>, site: ParamSite, delta: f64) {
    match site {
        ParamSite::Weight(id, layer, idx) => layer_of_mut(model, id, layer).weight[idx] += delta,
        ParamSite::Bias(id, layer, idx) => layer_of_mut(model, id, layer).bias[idx] += delta,
        ParamSite::Query(r, c) => {
            model.dual_query.as_mut().expect("dual query").query[(r, c)] += delta;
        }
    }
}

/// One random weight plus one random bias entry from every conv layer in the
/// model, and a query entry when the dual-query adapter is present.
fn sites_for(model: &DetectionModel<f64>, rng: &mut ChaCha8Rng) -> Vec<ParamSite> {
    let mut sites = Vec::new();
    let mut push_stack = |id: StackId, n_layers: usize, rng: &mut ChaCha8Rng| {
        for layer in 0..n_layers {
            let w = layer_of(model, id, layer).weight.dim();
            sites.push(ParamSite::Weight(
                id,
                layer,
                (
                    rng.gen_range(0..w.0),
                    rng.gen_range(0..w.1),
                    rng.gen_range(0..w.2),
                    rng.gen_range(0..w.3),
                ),
            ));
            sites.push(ParamSite::Bias(id, layer, rng.gen_range(0..w.3)));
        }
    };
    push_stack(StackId::LidarStem, model.lidar_stem.layers.len(), rng);
    if let Some(stem) = &model.radar_stem {
        push_stack(StackId::RadarStem, stem.layers.len(), rng);
    }
    push_stack(StackId::Trunk, model.trunk.layers.len(), rng);
    push_stack(StackId::Down2, model.down2.layers.len(), rng);
    push_stack(StackId::Down4, model.down4.layers.len(), rng);
    for i in 0..model.heads.len() {
        push_stack(StackId::Head(i), 1, rng);
    }
    if let Some(dq) = &model.dual_query {
        let d = dq.query.dim();
        sites.push(ParamSite::Query(
            rng.gen_range(0..d.0),
            rng.gen_range(0..d.1),
        ));
    }
    sites
}

fn analytic_of(grads: &bevkit::pipeline::ModelGrads<f64>, site: ParamSite) -> f64 {
    match site {
        ParamSite::Weight(id, layer, idx) => match id {
            StackId::LidarStem => grads.lidar_stem[layer].d_weight[idx],
            StackId::RadarStem => grads.radar_stem.as_ref().expect("radar")[layer].d_weight[idx],
            StackId::Trunk => grads.trunk[layer].d_weight[idx],
            StackId::Down2 => grads.down2[layer].d_weight[idx],
            StackId::Down4 => grads.down4[layer].d_weight[idx],
            StackId::Head(i) => grads.heads[i].d_weight[idx],
        },
        ParamSite::Bias(id, layer, idx) => match id {
            StackId::LidarStem => grads.lidar_stem[layer].d_bias[idx],
            StackId::RadarStem => grads.radar_stem.as_ref().expect("radar")[layer].d_bias[idx],
            StackId::Trunk => grads.trunk[layer].d_bias[idx],
            StackId::Down2 => grads.down2[layer].d_bias[idx],
            StackId::Down4 => grads.down4[layer].d_bias[idx],
            StackId::Head(i) => grads.heads[i].d_bias[idx],
        },
        ParamSite::Query(r, c) => grads.dual_query.as_ref().expect("query")[(r, c)],
    }
}

/// Full-model gradient spot checks: every conv layer (and the fusion query
/// when present) is probed through the complete forward + loss chain.
fn check_full_model(kind: FusionKind, n_states: usize, seed: u64) -> Result<(), String> {
    let grid = GridSpec::new(12, 12, 1.0, -6.0, -6.0).map_err(|e| e.to_string())?;
    let synth = SynthConfig {
        grid,
        cars_min: 1,
        cars_max: 2,
        ..SynthConfig::default()
    };
    let (scene, _) = generate_scene(&synth, 41, "grad-scene").map_err(|e| e.to_string())?;
    let feat: SceneFeatures<f64> =
        featurize_scene(&scene, &grid, 0.2).map_err(|e| e.to_string())?;
    let assignment = assign_dips(&feat.pack);
    let losscfg = LossConfig::default();

    let loss_of = |model: &DetectionModel<f64>| -> f64 {
        let (heads, _) = model.forward(&feat.lidar, &feat.radar).expect("forward");
        let views: Vec<_> = heads.iter().map(Array3::view).collect();
        let (bd, _) =
            pipeline_loss_grad(&views, &feat.pack, &assignment, &losscfg).expect("loss");
        bd.total()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut skipped = 0usize;
    let mut checked = 0usize;
    for state in 0..n_states {
        let cfg = TrainConfig {
            fusion: kind,
            grid,
            dims: ModelDims {
                stem: 3,
                trunk: 4,
                down: 4,
            },
            seed: seed.wrapping_add(state as u64),
            attention_scope: AttentionScope::Full,
            ..TrainConfig::default()
        };
        let model = DetectionModel::<f64>::new(&cfg).map_err(|e| e.to_string())?;
        let (heads, cache) = model
            .forward(&feat.lidar, &feat.radar)
            .map_err(|e| e.to_string())?;
        let views: Vec<_> = heads.iter().map(Array3::view).collect();
        let (_, d_heads) = pipeline_loss_grad(&views, &feat.pack, &assignment, &losscfg)
            .map_err(|e| e.to_string())?;
        let grads = model.backward(&cache, &d_heads);

        for site in sites_for(&model, &mut rng) {
            let analytic = analytic_of(&grads, site);
            let eps = 1e-5;
            let fd_at = |eps: f64| {
                central_fd(
                    |d| {
                        let mut m = model.clone();
                        apply_site(&mut m, site, d);
                        loss_of(&m)
                    },
                    eps,
                )
            };
            let fd1 = fd_at(eps);
            let fd2 = fd_at(eps / 2.0);
            // A rectifier kink between the two probe points makes both
            // finite differences meaningless; skip those rare draws.
            if (fd1 - fd2).abs() > 1e-3 * fd1.abs().max(1.0) {
                skipped += 1;
                continue;
            }
            checked += 1;
            // Richardson extrapolation cancels the leading eps^2 truncation
            // term, which is visible through the deep composition.
            let fd = (4.0 * fd2 - fd1) / 3.0;
            if analytic.abs().max(fd.abs()) < 1e-9 {
                continue;
            }
            let re = rel_err(analytic, fd);
            if re >= 1e-3 {
                return Err(format!(
                    "{kind:?} state {state}: full-model gradient {analytic:.6e} vs FD \
                     {fd:.6e} (fd1 {fd1:.6e} fd2 {fd2:.6e}, rel {re:.2e})"
                ));
            }
        }
    }
    if skipped * 10 > checked {
        return Err(format!(
            "{kind:?}: {skipped} of {} probes were kink-skipped — FD setup is unsound",
            skipped + checked
        ));
    }
    Ok(())
}

#[test]
fn c04_gradient_suite() {
    let t0 = Instant::now();
    let run = || {
        check_head_loss_kind(ClsLossKind::Focal, NegativeMode::PenaltyReduced, 40)?;
        check_head_loss_kind(ClsLossKind::Focal, NegativeMode::LiteralHeatWeight, 41)?;
        check_head_loss_kind(ClsLossKind::ConsistentFocal, NegativeMode::PenaltyReduced, 42)?;
        check_direct_fusion(43)?;
        check_dual_query_fusion(44)?;
        check_isolated_conv(45)?;
        check_full_model(FusionKind::Concat, 40, 46)?;
        check_full_model(FusionKind::Direct, 30, 47)?;
        check_full_model(FusionKind::DualQuery, 30, 48)?;
        within_budget(t0, 300.0)
    };
    report(4, "gradient suite vs finite differences", t0, run());
}

// ---------------------------------------------------------------------------
// 5. Assignment invariants over random supervision/prediction states
// ---------------------------------------------------------------------------

#[test]
fn c05_assignment_invariants() {
    let t0 = Instant::now();
    let run = || {
        let spec = GridSpec::new(16, 16, 0.5, -4.0, -4.0).map_err(|e| e.to_string())?;
        let strides = [1usize, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for state in 0..10_000u32 {
            let n_obj = rng.gen_range(1..=3);
            let gt: Vec<RotatedBox<f64>> = (0..n_obj)
                .map(|_| {
                    boxf(
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(1.5..4.0),
                        rng.gen_range(0.8..2.0),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            let pack: SupervisionPack<f64> =
                build_supervision(&gt, &spec, &strides, 0.2).map_err(|e| e.to_string())?;

            let pred_heat: Vec<Array2<f64>> = pack
                .scales
                .iter()
                .map(|sc| Array2::from_shape_fn((sc.spec.h, sc.spec.w), |_| rng.gen::<f64>()))
                .collect();
            let pred_chans: Vec<Array3<f64>> = pack
                .scales
                .iter()
                .map(|sc| {
                    Array3::from_shape_fn((sc.spec.h, sc.spec.w, 6), |(_, _, ch)| match ch {
                        0 | 1 => rng.gen_range(-1.0..2.0),
                        2 | 3 => rng.gen_range(-0.5..1.5),
                        4 => rng.gen_range(0.0..1.0),
                        _ => rng.gen_range(0.0..1.0),
                    })
                })
                .collect();
            let decode = |a: AnchorIndex| {
                let t = &pred_chans[a.scale];
                let ch = [
                    t[(a.row, a.col, 0)],
                    t[(a.row, a.col, 1)],
                    t[(a.row, a.col, 2)],
                    t[(a.row, a.col, 3)],
                    t[(a.row, a.col, 4)],
                    t[(a.row, a.col, 5)],
                ];
                decode_box_at(&pack.scales[a.scale].spec, a.row, a.col, &ch).ok()
            };
            let iou_cost = |scale: usize, r: usize, c: usize, k: usize| -> f64 {
                let anchor = AnchorIndex { scale, row: r, col: c };
                let iou = decode(anchor)
                    .map(|b| rotated_iou(&b, &pack.gt_boxes[k]))
                    .filter(|v| v.is_finite())
                    .unwrap_or(0.0);
                pred_heat[scale][(r, c)] + iou
            };

            let results = [
                assign_dips(&pack),
                assign_gahps(&pack, &pred_heat).map_err(|e| e.to_string())?,
                assign_gahips(&pack, &pred_heat, decode).map_err(|e| e.to_string())?,
                assign_gachips(&pack, &pred_heat, decode).map_err(|e| e.to_string())?,
            ];
            for res in &results {
                // Exactly one positive per (object, scale) with candidates.
                let mut seen: BTreeMap<(usize, usize), usize> = BTreeMap::new();
                for ch in &res.per_object {
                    *seen.entry((ch.object_index, ch.anchor.scale)).or_default() += 1;
                }
                for (scale, sc) in pack.scales.iter().enumerate() {
                    for (k, cand) in sc.candidates.iter().enumerate() {
                        let got = seen.get(&(k, scale)).copied().unwrap_or(0);
                        let want = usize::from(!cand.is_empty());
                        if got != want {
                            return Err(format!(
                                "state {state} {:?}: object {k} scale {scale} has {got} \
                                 positives, expected {want}",
                                res.strategy
                            ));
                        }
                    }
                }
                if res.n_positive() != res.per_object.len() {
                    return Err(format!(
                        "state {state} {:?}: mask has {} positives but {} choices \
                         (candidate sets must be disjoint)",
                        res.strategy,
                        res.n_positive(),
                        res.per_object.len()
                    ));
                }
                // The chosen anchor maximizes the strategy cost, with the
                // row-major-first tie rule, and the argmax survives strictly
                // monotone transforms of the cost.
                for ch in &res.per_object {
                    let (k, a) = (ch.object_index, ch.anchor);
                    let cand = &pack.scales[a.scale].candidates[k];
                    let cost: Box<dyn FnMut(usize, usize) -> f64 + '_> = match res.strategy {
                        Strategy::Dips => {
                            let mu = pack.components[k].mu;
                            let sp = pack.scales[a.scale].spec;
                            Box::new(move |r, c| {
                                let (x, y) = sp.cell_center(r, c);
                                -((x - mu.0).powi(2) + (y - mu.1).powi(2))
                            })
                        }
                        Strategy::Gahps => {
                            let heat = &pred_heat[a.scale];
                            Box::new(move |r, c| heat[(r, c)])
                        }
                        _ => Box::new(move |r, c| iou_cost(a.scale, r, c, k)),
                    };
                    let mut cost = cost;
                    let best = argmax_over_candidates(cand, &mut cost)
                        .ok_or_else(|| format!("state {state}: empty candidate set used"))?;
                    if best.0 != (a.row, a.col) {
                        return Err(format!(
                            "state {state} {:?}: chose {:?} but argmax is {:?}",
                            res.strategy,
                            (a.row, a.col),
                            best.0
                        ));
                    }
                    for monotone in [
                        (|v: f64| 2.5 * v + 1.0) as fn(f64) -> f64,
                        |v: f64| (v).exp(),
                        |v: f64| v.atan(),
                    ] {
                        let m = argmax_over_candidates(cand, |r, c| monotone(cost(r, c)))
                            .expect("non-empty");
                        if m.0 != best.0 {
                            return Err(format!(
                                "state {state} {:?}: monotone transform moved the argmax \
                                 {:?} -> {:?}",
                                res.strategy, best.0, m.0
                            ));
                        }
                    }
                }
            }

            // Multi-positive marks every candidate of every object.
            let multi = assign_multipositive(&pack, pack.tau);
            let want: usize = pack
                .scales
                .iter()
                .map(|sc| sc.candidates.iter().map(Vec::len).sum::<usize>())
                .sum();
            if multi.per_object.len() != want {
                return Err(format!(
                    "state {state} multipositive: {} choices, want every candidate ({want})",
                    multi.per_object.len()
                ));
            }
        }
        within_budget(t0, 120.0)
    };
    report(5, "assignment invariants", t0, run());
}

// ---------------------------------------------------------------------------
// 6. Single-scene overfit: loss collapse and perfect decode
// ---------------------------------------------------------------------------

#[test]
fn c06_single_scene_overfit() {
    let t0 = Instant::now();
    let run = || {
        let grid = GridSpec::new(32, 32, 0.4, -6.4, -6.4).map_err(|e| e.to_string())?;
        let synth = SynthConfig {
            grid,
            cars_min: 2,
            cars_max: 2,
            ..SynthConfig::default()
        };
        let (scene, _) = generate_scene(&synth, 5, "overfit").map_err(|e| e.to_string())?;
        for strategy in Strategy::ALL {
            let t_strat = Instant::now();
            let cfg = TrainConfig {
                strategy,
                fusion: FusionKind::Concat,
                grid,
                dims: ModelDims {
                    stem: 4,
                    trunk: 6,
                    down: 8,
                },
                epochs: 200,
                batch_size: 1,
                lr_peak: 5e-3,
                warmup_epochs: 5,
                decay_every_epochs: 10_000,
                val_fraction: 0.0,
                seed: 7,
                ..TrainConfig::default()
            };
            let features: Vec<SceneFeatures<f64>> =
                featurize_scenes(&[scene.clone()], &grid, cfg.tau, 1).map_err(|e| e.to_string())?;
            let mut state = TrainState::<f64>::new(cfg).map_err(|e| e.to_string())?;
            train_until(&mut state, &features, 200, |_| {}).map_err(|e| e.to_string())?;
            let initial = state.metrics.first().map(|m| m.loss_total).unwrap_or(0.0);
            let last = state.metrics.last().map(|m| m.loss_total).unwrap_or(f64::MAX);
            if !(last < 0.1 * initial) {
                return Err(format!(
                    "{strategy}: loss only fell {initial:.3} -> {last:.3} after 200 steps"
                ));
            }
            let report = evaluate_model(&state.model, &features, &[0], &state.config)
                .map_err(|e| e.to_string())?;
            let ap50 = report.ap_at(0.5).unwrap_or(0.0);
            println!(
                "  {strategy}: loss {initial:.3} -> {last:.3}, overfit AP@0.5 {ap50:.3} \
                 AP@0.65 {:.3} AP@0.8 {:.3}",
                report.ap_at(0.65).unwrap_or(0.0),
                report.ap_at(0.8).unwrap_or(0.0),
            );
            if (ap50 - 1.0).abs() > 1e-12 {
                return Err(format!("{strategy}: overfit AP@0.5 = {ap50}, expected 1.0"));
            }
            let dt = t_strat.elapsed().as_secs_f64();
            if dt > 300.0 {
                return Err(format!("{strategy}: overfit took {dt:.0}s > 300s"));
            }
        }
        Ok(())
    };
    report(6, "single-scene overfit", t0, run());
}

// ---------------------------------------------------------------------------
// 7 + 9. Reference ablation study (shared between the ordering gate and the
// determinism gate, which re-runs it from scratch).
// ---------------------------------------------------------------------------

struct StudyOutcome {
    /// Per-(strategy, seed) metrics CSV, keyed `strategy-s{seed}`.
    metrics: BTreeMap<String, String>,
    /// Summary CSV, one row per (seed, strategy).
    compare: String,
    /// Final-epoch validation AP per strategy, one entry per seed.
    ap50: BTreeMap<&'static str, Vec<f64>>,
    ap80: BTreeMap<&'static str, Vec<f64>>,
    elapsed_s: f64,
}

const STUDY_SEEDS: [u64; 3] = [1, 2, 3];

fn run_reference_study() -> StudyOutcome {
    let started = Instant::now();
    let synth = SynthConfig::default();
    let grid = synth.grid;
    let (scenes, _) = generate_dataset(&synth, 100, 600, FogMode::Clear).expect("dataset");
    let base = TrainConfig {
        grid,
        epochs: 30,
        val_fraction: 1.0 / 6.0, // 500 train / 100 validation scenes
        ..TrainConfig::default()
    };
    let features: Vec<SceneFeatures<f32>> =
        featurize_scenes(&scenes, &grid, base.tau, 1).expect("features");

    let mut metrics = BTreeMap::new();
    let mut compare = String::from("seed,strategy,loss_total,ap50,ap65,ap80\n");
    let mut ap50: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let mut ap80: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for seed in STUDY_SEEDS {
        for strategy in Strategy::ALL {
            let cfg = TrainConfig {
                strategy,
                seed,
                ..base.clone()
            };
            let mut state = TrainState::<f32>::new(cfg).expect("state");
            train_until(&mut state, &features, 30, |_| {}).expect("training");
            let last = state.metrics.last().expect("30 epochs logged").clone();
            metrics.insert(
                format!("{strategy}-s{seed}"),
                bevkit::pipeline::metrics_csv(&state.metrics),
            );
            compare.push_str(&format!(
                "{seed},{strategy},{:.6},{:.6},{:.6},{:.6}\n",
                last.loss_total, last.ap50, last.ap65, last.ap80
            ));
            ap50.entry(strategy.name()).or_default().push(last.ap50);
            ap80.entry(strategy.name()).or_default().push(last.ap80);
        }
    }
    StudyOutcome {
        metrics,
        compare,
        ap50,
        ap80,
        elapsed_s: started.elapsed().as_secs_f64(),
    }
}

fn study() -> &'static StudyOutcome {
    static STUDY: OnceLock<StudyOutcome> = OnceLock::new();
    STUDY.get_or_init(run_reference_study)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    v[v.len() / 2]
}

#[test]
fn c07_ablation_ordering() {
    let t0 = Instant::now();
    let run = || {
        let s = study();
        let med80 = |name: &str| median(&s.ap80[name]);
        let med50 = |name: &str| median(&s.ap50[name]);
        let (multi, dips, gahps, gahips, gachips) = (
            med80("multipositive"),
            med80("dips"),
            med80("gahps"),
            med80("gahips"),
            med80("gachips"),
        );
        println!(
            "  median AP@0.8  multi {multi:.3}  dips {dips:.3}  gahps {gahps:.3}  \
             gahips {gahips:.3}  gachips {gachips:.3}"
        );
        let singles = ["dips", "gahps", "gahips", "gachips"];
        let spread50 = singles
            .iter()
            .map(|n| med50(n))
            .fold(f64::MIN, f64::max)
            - singles.iter().map(|n| med50(n)).fold(f64::MAX, f64::min);
        println!(
            "  median AP@0.5  multi {:.3}  dips {:.3}  gahps {:.3}  gahips {:.3}  \
             gachips {:.3}  single-positive spread {spread50:.3}",
            med50("multipositive"),
            med50("dips"),
            med50("gahps"),
            med50("gahips"),
            med50("gachips"),
        );
        if !(gachips >= gahips && gahips >= dips && dips >= multi) {
            return Err(format!(
                "AP@0.8 ordering violated: gachips {gachips:.3} >= gahips {gahips:.3} >= \
                 dips {dips:.3} >= multipositive {multi:.3} must hold"
            ));
        }
        if gachips - multi < 0.05 {
            return Err(format!(
                "AP@0.8 gap gachips - multipositive = {:.3} < 0.05",
                gachips - multi
            ));
        }
        if spread50 > 0.03 {
            return Err(format!(
                "AP@0.5 spread across single-positive strategies {spread50:.3} > 0.03"
            ));
        }
        if s.elapsed_s > 7200.0 {
            return Err(format!("study took {:.0}s > 7200s", s.elapsed_s));
        }
        Ok(())
    };
    report(7, "assignment-strategy ablation ordering", t0, run());
}

#[test]
fn c09_study_determinism() {
    let t0 = Instant::now();
    let run = || {
        let first = study();
        let second = run_reference_study();
        if first.compare != second.compare {
            return Err("summary CSVs differ between identical runs".into());
        }
        if first.metrics.len() != second.metrics.len() {
            return Err("metric CSV sets differ between identical runs".into());
        }
        for (key, csv) in &first.metrics {
            match second.metrics.get(key) {
                Some(other) if other == csv => {}
                Some(_) => return Err(format!("metrics CSV `{key}` differs between runs")),
                None => return Err(format!("metrics CSV `{key}` missing from the second run")),
            }
        }
        Ok(())
    };
    report(9, "study determinism", t0, run());
}

// ---------------------------------------------------------------------------
// 8. Fog robustness: weather-augmented training and fusion both matter
// ---------------------------------------------------------------------------

#[test]
fn c08_fog_robustness() {
    let t0 = Instant::now();
    let run = || {
        let synth = SynthConfig {
            fog_probability: 0.85,
            visibility_scale: 0.55,
            ..SynthConfig::default()
        };
        let grid = synth.grid;
        let (train_both, _) =
            generate_dataset(&synth, 500, 120, FogMode::Both).map_err(|e| e.to_string())?;
        let train_clear: Vec<_> = train_both
            .iter()
            .filter(|s| matches!(s.weather, Weather::Clear))
            .cloned()
            .collect();
        let (test_fog, _) =
            generate_dataset(&synth, 900, 60, FogMode::Foggy).map_err(|e| e.to_string())?;

        let base = TrainConfig {
            strategy: Strategy::Dips,
            grid,
            epochs: 20,
            val_fraction: 0.0,
            ..TrainConfig::default()
        };
        let feats_both: Vec<SceneFeatures<f32>> =
            featurize_scenes(&train_both, &grid, base.tau, 1).map_err(|e| e.to_string())?;
        let feats_clear: Vec<SceneFeatures<f32>> =
            featurize_scenes(&train_clear, &grid, base.tau, 1).map_err(|e| e.to_string())?;
        let feats_test: Vec<SceneFeatures<f32>> =
            featurize_scenes(&test_fog, &grid, base.tau, 1).map_err(|e| e.to_string())?;
        let test_idx: Vec<usize> = (0..feats_test.len()).collect();

        let mut fog_trained = Vec::new();
        let mut clear_trained = Vec::new();
        let mut lidar_only = Vec::new();
        for seed in STUDY_SEEDS {
            let arms: [(&str, FusionKind, &Vec<SceneFeatures<f32>>, &mut Vec<f64>); 3] = [
                ("both+concat", FusionKind::Concat, &feats_both, &mut fog_trained),
                ("clear+concat", FusionKind::Concat, &feats_clear, &mut clear_trained),
                ("both+lidar", FusionKind::LidarOnly, &feats_both, &mut lidar_only),
            ];
            for (tag, fusion, feats, out) in arms {
                let cfg = TrainConfig {
                    fusion,
                    seed,
                    ..base.clone()
                };
                let mut state = TrainState::<f32>::new(cfg).map_err(|e| e.to_string())?;
                train_until(&mut state, feats, base.epochs, |_| {})
                    .map_err(|e| e.to_string())?;
                let report = evaluate_model(&state.model, &feats_test, &test_idx, &state.config)
                    .map_err(|e| e.to_string())?;
                let ap = report.ap_at(0.5).unwrap_or(0.0);
                println!("  seed {seed} {tag}: foggy-test AP@0.5 {ap:.3}");
                out.push(ap);
            }
        }
        let (fog_m, clear_m, lidar_m) = (
            median(&fog_trained),
            median(&clear_trained),
            median(&lidar_only),
        );
        println!(
            "  medians: clear+foggy-trained {fog_m:.3}, clear-trained {clear_m:.3}, \
             lidar-only {lidar_m:.3}"
        );
        if fog_m - clear_m < 0.05 {
            return Err(format!(
                "weather augmentation gap {:.3} < 0.05 (fog-trained {fog_m:.3}, \
                 clear-trained {clear_m:.3})",
                fog_m - clear_m
            ));
        }
        if fog_m - lidar_m < 0.05 {
            return Err(format!(
                "fusion gap {:.3} < 0.05 (fusion {fog_m:.3}, lidar-only {lidar_m:.3})",
                fog_m - lidar_m
            ));
        }
        within_budget(t0, 7200.0)
    };
    report(8, "fog robustness", t0, run());
}

// ---------------------------------------------------------------------------
// 10. Attention properties
// ---------------------------------------------------------------------------

#[test]
fn c10_attention_properties() {
    let t0 = Instant::now();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for state in 0..1000u32 {
            let n = rng.gen_range(4..24);
            let c = rng.gen_range(2..8);
            let q = Array2::from_shape_fn((n, c), |_| rng.gen_range(-2.0..2.0));
            let k = Array2::from_shape_fn((n, c), |_| rng.gen_range(-2.0..2.0));
            let tau = 1.0 / (c as f64).sqrt();
            let (out, cache) = attention_forward(q.view(), k.view(), tau)
                .map_err(|e| e.to_string())?;

            // Rows of the attention matrix are probability distributions.
            for (i, row) in cache.weights().rows().into_iter().enumerate() {
                let sum: f64 = row.sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(format!("state {state}: attention row {i} sums to {sum}"));
                }
                if row.iter().any(|&a| a < 0.0) {
                    return Err(format!("state {state}: negative attention weight"));
                }
            }

            // The pre-residual output lies in the convex hull of the key
            // rows, so per channel it is bounded by the key extremes.
            for ch in 0..c {
                let col = k.column(ch);
                let (lo, hi) = (
                    col.iter().copied().fold(f64::MAX, f64::min),
                    col.iter().copied().fold(f64::MIN, f64::max),
                );
                for i in 0..n {
                    let mixed = out[(i, ch)] - k[(i, ch)];
                    if mixed < lo - 1e-9 || mixed > hi + 1e-9 {
                        return Err(format!(
                            "state {state}: output {mixed:.6} escapes hull [{lo:.6}, {hi:.6}]"
                        ));
                    }
                }
            }

            // Joint permutation equivariance: permuting query and key rows
            // together permutes the output rows the same way.
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let qp = Array2::from_shape_fn((n, c), |(i, j)| q[(perm[i], j)]);
            let kp = Array2::from_shape_fn((n, c), |(i, j)| k[(perm[i], j)]);
            let (out_p, _) = attention_forward(qp.view(), kp.view(), tau)
                .map_err(|e| e.to_string())?;
            for i in 0..n {
                for j in 0..c {
                    if (out_p[(i, j)] - out[(perm[i], j)]).abs() > 1e-9 {
                        return Err(format!(
                            "state {state}: permutation equivariance violated at ({i},{j})"
                        ));
                    }
                }
            }
        }
        within_budget(t0, 60.0)
    };
    report(10, "attention properties", t0, run());
}
