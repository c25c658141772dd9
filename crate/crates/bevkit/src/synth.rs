//! Synthetic desk-scale scene generator: rectangular "cars" sensed by a
//! single-line LiDAR (nearest-hit occlusion, range jitter, dropouts,
//! clutter) and an azimuth/range radar intensity map (per-object Gaussian
//! blobs, speckle, noise floor). An optional fog transform attenuates the
//! LiDAR returns; radar is left untouched.
//!
//! Everything is reproducible: a scene is a pure function of its config and
//! a single `u64` seed, and generated values are quantized before
//! serialization so a JSON round trip is bit-exact.

use crate::bevgrid::{GridSpec, LidarPoint, PolarHeatmap};
use crate::error::{BevError, Result};
use crate::geometry::RotatedBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::path::Path;
use std::str::FromStr;

/// Quantization applied to LiDAR point fields before storage.
pub const LIDAR_QUANTUM: f64 = 1e-6;
/// Quantization applied to radar bin intensities before storage.
pub const RADAR_QUANTUM: f64 = 1e-4;
/// Dataset file schema version.
pub const DATASET_VERSION: u32 = 1;

/// Internal constants of the point model.
const CAR_POINT_Z_MAX: f64 = 1.6;
const CAR_POINT_Z_MIN: f64 = 0.1;
const FOG_SEED_SALT: u64 = 0x666f_675f_7631; // distinct stream for the fog pass

fn quantize(v: f64, q: f64) -> f64 {
    (v / q).round() * q
}

/// Mix a dataset seed and a scene index into an independent per-scene seed
/// (splitmix64 finalizer).
pub fn scene_seed(dataset_seed: u64, index: u64) -> u64 {
    let mut z = dataset_seed
        .wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Scene-level weather tag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weather {
    Clear,
    /// LiDAR returns beyond `max_visible` meters were dropped or relocated.
    Foggy { max_visible: f64 },
}

/// Which weather variants a dataset contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FogMode {
    Clear,
    Foggy,
    /// Clear scene followed by its fogged twin (same geometry and returns).
    Both,
}

impl FogMode {
    pub fn name(self) -> &'static str {
        match self {
            FogMode::Clear => "clear",
            FogMode::Foggy => "foggy",
            FogMode::Both => "both",
        }
    }
}

impl FromStr for FogMode {
    type Err = BevError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "clear" => Ok(FogMode::Clear),
            "foggy" => Ok(FogMode::Foggy),
            "both" => Ok(FogMode::Both),
            other => Err(BevError::InvalidConfig {
                field: "fog".into(),
                reason: format!("unknown fog mode `{other}`; valid: clear, foggy, both"),
            }),
        }
    }
}

/// One generated scene. `seed` alone reproduces it under the same config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub gt_boxes: Vec<RotatedBox<f64>>,
    pub lidar_points: Vec<LidarPoint>,
    pub radar: PolarHeatmap<f64>,
    pub weather: Weather,
    pub seed: u64,
}

/// How car placement went: retries are bounded, so crowded configs may
/// place fewer cars than requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacementReport {
    pub requested: usize,
    pub placed: usize,
}

/// Generator configuration. Defaults model the desk-scale grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub grid: GridSpec,
    pub cars_min: usize,
    pub cars_max: usize,
    pub length_mean: f64,
    pub length_std: f64,
    pub width_mean: f64,
    pub width_std: f64,
    /// No box corner may come closer than this to the sensor at the origin.
    pub sensor_clearance: f64,
    /// Extra center-to-center spacing beyond the half-diagonal sum; keeps
    /// placed boxes strictly disjoint.
    pub min_gap: f64,
    /// Position attempts per car before giving up on it.
    pub max_retries: usize,
    pub lidar_rays: usize,
    pub lidar_hit_rate: f64,
    pub lidar_range_sigma: f64,
    /// Mean number of Poisson-distributed ground clutter points.
    pub clutter_mean: f64,
    pub radar_azimuth_bins: usize,
    pub radar_range_res: f64,
    pub radar_amplitude: f64,
    /// Relative amplitude jitter of a blob (±).
    pub radar_amplitude_jitter: f64,
    /// Multiplicative per-bin speckle strength.
    pub radar_speckle: f64,
    /// Upper bound of the uniform per-bin noise floor.
    pub radar_floor: f64,
    /// Foggy scenes: strength of the visibility reduction in [0, 1].
    pub fog_probability: f64,
    /// Foggy scenes: best-case visibility as a fraction of the grid's
    /// maximum corner range.
    pub visibility_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            grid: GridSpec::desk(),
            cars_min: 1,
            cars_max: 8,
            length_mean: 4.5,
            length_std: 0.35,
            width_mean: 1.9,
            width_std: 0.12,
            sensor_clearance: 3.0,
            min_gap: 0.5,
            max_retries: 40,
            lidar_rays: 1091,
            lidar_hit_rate: 0.95,
            lidar_range_sigma: 0.03,
            clutter_mean: 40.0,
            radar_azimuth_bins: 400,
            radar_range_res: 0.4,
            radar_amplitude: 0.85,
            radar_amplitude_jitter: 0.2,
            radar_speckle: 0.15,
            radar_floor: 0.02,
            fog_probability: 0.5,
            visibility_scale: 0.85,
        }
    }
}

impl SynthConfig {
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
        chk("cars", self.cars_min >= 1 && self.cars_min <= self.cars_max, "need 1 <= min <= max")?;
        chk("length", self.length_mean > 0.0 && self.length_std >= 0.0, "length stats invalid")?;
        chk("width", self.width_mean > 0.0 && self.width_std >= 0.0, "width stats invalid")?;
        chk("sensor_clearance", self.sensor_clearance >= 0.0, "must be >= 0")?;
        chk("min_gap", self.min_gap >= 0.0, "must be >= 0")?;
        chk("lidar_rays", self.lidar_rays >= 16, "too few rays")?;
        chk(
            "lidar_hit_rate",
            (0.0..=1.0).contains(&self.lidar_hit_rate),
            "must lie in [0, 1]",
        )?;
        chk("lidar_range_sigma", self.lidar_range_sigma >= 0.0, "must be >= 0")?;
        chk("clutter_mean", self.clutter_mean >= 0.0, "must be >= 0")?;
        chk("radar_azimuth_bins", self.radar_azimuth_bins >= 16, "too few bins")?;
        chk("radar_range_res", self.radar_range_res > 0.0, "must be > 0")?;
        chk(
            "radar_amplitude",
            (0.0..=1.0).contains(&self.radar_amplitude),
            "must lie in [0, 1]",
        )?;
        chk(
            "fog_probability",
            (0.0..=1.0).contains(&self.fog_probability),
            "must lie in [0, 1]",
        )?;
        chk(
            "visibility_scale",
            self.visibility_scale > 0.0 && self.visibility_scale <= 1.0,
            "must lie in (0, 1]",
        )
    }

    /// Number of radar range bins covering the whole grid.
    pub fn radar_range_bins(&self) -> usize {
        (self.grid.max_corner_range() / self.radar_range_res).ceil() as usize + 2
    }
}

/// Half of a box's diagonal: the radius of its bounding circle.
fn half_diag(b: &RotatedBox<f64>) -> f64 {
    0.5 * b.length.hypot(b.width)
}

/// First positive ray parameter where `origin + t * (cos az, sin az)` enters
/// the box, if any (slab test in the box frame).
fn ray_box_range(az: f64, b: &RotatedBox<f64>) -> Option<f64> {
    let (s, c) = b.theta.sin_cos();
    // Ray origin and direction in the box frame.
    let (dx, dy) = (az.cos(), az.sin());
    let ox = -(c * b.cx + s * b.cy);
    let oy = -(-s * b.cx + c * b.cy);
    let dxb = c * dx + s * dy;
    let dyb = -s * dx + c * dy;
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for (o, d, half) in [(ox, dxb, 0.5 * b.length), (oy, dyb, 0.5 * b.width)] {
        if d.abs() < 1e-12 {
            if o.abs() > half {
                return None;
            }
            continue;
        }
        let t0 = (-half - o) / d;
        let t1 = (half - o) / d;
        let (lo, hi) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
        t_enter = t_enter.max(lo);
        t_exit = t_exit.min(hi);
    }
    if t_enter <= t_exit && t_exit > 0.0 && t_enter > 0.0 {
        Some(t_enter)
    } else {
        None
    }
}

fn place_cars(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Vec<RotatedBox<f64>>, PlacementReport) {
    let requested = rng.gen_range(cfg.cars_min..=cfg.cars_max);
    let (min_x, min_y, max_x, max_y) = cfg.grid.extent();
    let len_dist = Normal::new(cfg.length_mean, cfg.length_std).expect("std >= 0");
    let wid_dist = Normal::new(cfg.width_mean, cfg.width_std).expect("std >= 0");
    let mut boxes: Vec<RotatedBox<f64>> = Vec::with_capacity(requested);
    for _ in 0..requested {
        let length = len_dist.sample(rng).clamp(3.0, 6.0);
        let width = wid_dist.sample(rng).clamp(1.4, 2.4);
        let theta = rng.gen_range(0.0..TAU);
        let candidate = RotatedBox::new(0.0, 0.0, length, width, theta).expect("sizes clamped");
        let hd = half_diag(&candidate);
        if min_x + hd >= max_x - hd || min_y + hd >= max_y - hd {
            continue; // car cannot fit the grid at any position
        }
        let mut placed = None;
        for _ in 0..cfg.max_retries {
            let cx = rng.gen_range(min_x + hd..max_x - hd);
            let cy = rng.gen_range(min_y + hd..max_y - hd);
            if cx.hypot(cy) < cfg.sensor_clearance + hd {
                continue; // too close to the sensor
            }
            let ok = boxes.iter().all(|other| {
                let d = (cx - other.cx).hypot(cy - other.cy);
                d >= hd + half_diag(other) + cfg.min_gap
            });
            if ok {
                placed = Some(RotatedBox::new(cx, cy, length, width, theta).expect("validated"));
                break;
            }
        }
        if let Some(b) = placed {
            boxes.push(b);
        }
    }
    let placed = boxes.len();
    (boxes, PlacementReport { requested, placed })
}

fn lidar_scan(
    cfg: &SynthConfig,
    boxes: &[RotatedBox<f64>],
    rng: &mut ChaCha8Rng,
) -> Vec<LidarPoint> {
    let max_range = cfg.grid.max_corner_range();
    let jitter = Normal::new(0.0, cfg.lidar_range_sigma.max(f64::MIN_POSITIVE))
        .expect("sigma >= 0");
    let mut points = Vec::new();
    for ray in 0..cfg.lidar_rays {
        let az = ray as f64 * TAU / cfg.lidar_rays as f64;
        // Nearest hit over all boxes decides occlusion.
        let hit = boxes
            .iter()
            .filter_map(|b| ray_box_range(az, b))
            .min_by(f64::total_cmp);
        let Some(r) = hit else { continue };
        if r > max_range {
            continue;
        }
        if !rng.gen_bool(cfg.lidar_hit_rate) {
            continue;
        }
        let r = (r + jitter.sample(rng)).max(0.05);
        let z = rng.gen_range(CAR_POINT_Z_MIN..CAR_POINT_Z_MAX);
        let intensity = rng.gen_range(0.3..0.9);
        points.push([
            quantize(r * az.cos(), LIDAR_QUANTUM),
            quantize(r * az.sin(), LIDAR_QUANTUM),
            quantize(z, LIDAR_QUANTUM),
            quantize(intensity, LIDAR_QUANTUM),
        ]);
    }
    // Sparse ground clutter, uniform over the grid.
    let n_clutter = if cfg.clutter_mean > 0.0 {
        Poisson::new(cfg.clutter_mean).expect("mean > 0").sample(rng) as usize
    } else {
        0
    };
    let (min_x, min_y, max_x, max_y) = cfg.grid.extent();
    for _ in 0..n_clutter {
        points.push([
            quantize(rng.gen_range(min_x..max_x), LIDAR_QUANTUM),
            quantize(rng.gen_range(min_y..max_y), LIDAR_QUANTUM),
            quantize(rng.gen_range(0.0..0.2), LIDAR_QUANTUM),
            quantize(rng.gen_range(0.05..0.4), LIDAR_QUANTUM),
        ]);
    }
    points
}

fn radar_scan(
    cfg: &SynthConfig,
    boxes: &[RotatedBox<f64>],
    rng: &mut ChaCha8Rng,
) -> PolarHeatmap<f64> {
    let n_az = cfg.radar_azimuth_bins;
    let n_range = cfg.radar_range_bins();
    let az_res = TAU / n_az as f64;
    // Per-object blob parameters.
    struct Blob {
        r0: f64,
        phi0: f64,
        sigma_r: f64,
        sigma_phi: f64,
        amplitude: f64,
    }
    let blobs: Vec<Blob> = boxes
        .iter()
        .map(|b| {
            let r0 = b.cx.hypot(b.cy);
            let phi0 = b.cy.atan2(b.cx).rem_euclid(TAU);
            let half_extent = 0.5 * b.length.max(b.width);
            let jitter = rng.gen_range(-cfg.radar_amplitude_jitter..=cfg.radar_amplitude_jitter);
            Blob {
                r0,
                phi0,
                sigma_r: 0.25 * b.length.hypot(b.width),
                sigma_phi: half_extent.atan2(r0).max(az_res),
                amplitude: cfg.radar_amplitude * (1.0 + jitter),
            }
        })
        .collect();

    let speckle = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = ndarray::Array2::<f64>::zeros((n_az, n_range));
    for b in 0..n_az {
        let phi = b as f64 * az_res;
        for k in 0..n_range {
            let r = (k as f64 + 0.5) * cfg.radar_range_res;
            let mut signal = 0.0;
            for blob in &blobs {
                let dphi = {
                    let raw = (phi - blob.phi0).rem_euclid(TAU);
                    if raw > TAU / 2.0 { raw - TAU } else { raw }
                };
                let e = 0.5
                    * ((r - blob.r0).powi(2) / blob.sigma_r.powi(2)
                        + dphi.powi(2) / blob.sigma_phi.powi(2));
                signal += blob.amplitude * (-e).exp();
            }
            let speckled = signal * (1.0 + cfg.radar_speckle * speckle.sample(rng));
            let floor = rng.gen_range(0.0..cfg.radar_floor.max(f64::MIN_POSITIVE));
            data[(b, k)] = quantize((speckled + floor).clamp(0.0, 1.0), RADAR_QUANTUM);
        }
    }
    PolarHeatmap::from_data(n_az, az_res, n_range, cfg.radar_range_res, data)
        .expect("values are clamped finite")
}

/// Generate one clear-weather scene from its seed.
pub fn generate_scene(
    cfg: &SynthConfig,
    seed: u64,
    id: impl Into<String>,
) -> Result<(Scene, PlacementReport)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gt_boxes, report) = place_cars(cfg, &mut rng);
    let lidar_points = lidar_scan(cfg, &gt_boxes, &mut rng);
    let radar = radar_scan(cfg, &gt_boxes, &mut rng);
    Ok((
        Scene {
            id: id.into(),
            gt_boxes,
            lidar_points,
            radar,
            weather: Weather::Clear,
            seed,
        },
        report,
    ))
}

/// Fog transform: sample a per-scene visibility, then drop or relocate every
/// LiDAR return beyond it (relocated returns model near-range backscatter).
/// Geometry, radar and ground truth are untouched.
pub fn apply_fog(scene: &Scene, cfg: &SynthConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ FOG_SEED_SALT);
    let best = cfg.visibility_scale * cfg.grid.max_corner_range();
    let max_visible = best * (1.0 - cfg.fog_probability * rng.gen_range(0.0..1.0));
    let mut lidar_points = Vec::with_capacity(scene.lidar_points.len());
    for p in &scene.lidar_points {
        let r = p[0].hypot(p[1]);
        if r <= max_visible {
            lidar_points.push(*p);
            continue;
        }
        if rng.gen_bool(0.5) {
            continue; // absorbed
        }
        // Backscatter: same bearing, uniform visible range, weak intensity.
        let scale = max_visible * rng.gen_range(0.0..1.0) / r;
        lidar_points.push([
            quantize(p[0] * scale, LIDAR_QUANTUM),
            quantize(p[1] * scale, LIDAR_QUANTUM),
            p[2],
            quantize(p[3] * 0.5, LIDAR_QUANTUM),
        ]);
    }
    Scene {
        id: format!("{}-fog", scene.id),
        gt_boxes: scene.gt_boxes.clone(),
        lidar_points,
        radar: scene.radar.clone(),
        weather: Weather::Foggy {
            max_visible: quantize(max_visible, LIDAR_QUANTUM),
        },
        seed: scene.seed,
    }
}

/// Generate `count` scenes (twice that many in `Both` mode, clear/foggy
/// interleaved so truncations and splits stay balanced).
pub fn generate_dataset(
    cfg: &SynthConfig,
    dataset_seed: u64,
    count: usize,
    fog: FogMode,
) -> Result<(Vec<Scene>, Vec<PlacementReport>)> {
    let mut scenes = Vec::new();
    let mut reports = Vec::with_capacity(count);
    for i in 0..count {
        let seed = scene_seed(dataset_seed, i as u64);
        let (clear, report) = generate_scene(cfg, seed, format!("scene-{i:06}"))?;
        reports.push(report);
        match fog {
            FogMode::Clear => scenes.push(clear),
            FogMode::Foggy => scenes.push(apply_fog(&clear, cfg)),
            FogMode::Both => {
                let foggy = apply_fog(&clear, cfg);
                scenes.push(clear);
                scenes.push(foggy);
            }
        }
    }
    Ok((scenes, reports))
}

/// Name of the index file inside a dataset directory.
pub const MANIFEST_FILE: &str = "manifest.json";

/// Dataset index: schema version, the grid the scenes target, and the scene
/// files in dataset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub grid: GridSpec,
    pub scenes: Vec<String>,
}

/// Write a dataset directory: one JSON document per scene plus a manifest.
/// Scene ids become file names, so they must be unique within the dataset.
pub fn save_dataset(dir: &Path, scenes: &[Scene], grid: &GridSpec) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| BevError::io(dir.display().to_string(), e))?;
    let mut files = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let name = format!("{}.json", scene.id);
        if files.contains(&name) {
            return Err(BevError::InvalidConfig {
                field: "scenes".into(),
                reason: format!("duplicate scene id `{}`", scene.id),
            });
        }
        let path = dir.join(&name);
        let shown = path.display().to_string();
        let json = serde_json::to_string(scene)
            .map_err(|e| BevError::malformed(&shown, format!("serialize failed: {e}")))?;
        std::fs::write(&path, json).map_err(|e| BevError::io(shown, e))?;
        files.push(name);
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        grid: *grid,
        scenes: files,
    };
    let path = dir.join(MANIFEST_FILE);
    let shown = path.display().to_string();
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| BevError::malformed(&shown, format!("serialize failed: {e}")))?;
    std::fs::write(&path, json).map_err(|e| BevError::io(shown, e))
}

/// Read the manifest of a dataset directory and check its schema version.
pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let shown = path.display().to_string();
    let raw = std::fs::read_to_string(&path).map_err(|e| BevError::io(&shown, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&raw).map_err(|e| BevError::malformed(&shown, format!("{e}")))?;
    if manifest.version != DATASET_VERSION {
        return Err(BevError::malformed(
            shown,
            format!(
                "dataset version {} (expected {DATASET_VERSION})",
                manifest.version
            ),
        ));
    }
    Ok(manifest)
}

/// Read one scene document; errors name the offending file.
pub fn load_scene(path: &Path) -> Result<Scene> {
    let shown = path.display().to_string();
    let raw = std::fs::read_to_string(path).map_err(|e| BevError::io(&shown, e))?;
    serde_json::from_str(&raw).map_err(|e| BevError::malformed(&shown, format!("{e}")))
}

/// Read a dataset directory written by [`save_dataset`]; scene order follows
/// the manifest.
pub fn load_dataset(dir: &Path) -> Result<(Vec<Scene>, GridSpec)> {
    let manifest = load_manifest(dir)?;
    let scenes = manifest
        .scenes
        .iter()
        .map(|name| load_scene(&dir.join(name)))
        .collect::<Result<Vec<Scene>>>()?;
    Ok((scenes, manifest.grid))
}
