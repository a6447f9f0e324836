//! Deterministic synthetic two-view scenes with exact ground truth.
//!
//! Appearance comes from a procedural texture defined on continuous
//! image-1 pixel coordinates, so both views are rendered by evaluating the
//! same function: image 1 directly, image 2 through the inverse mapping.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Homography;
use crate::geometry::{fundamental_from_pose, FundamentalMatrix, Intrinsics, PoseFile, Pt2, RelativePose};
use crate::image::GrayImage;
use crate::sampling::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextureConfig {
    /// At least four.
    pub octaves: usize,
    /// Period of the coarsest octave in pixels.
    pub base_period: f64,
    /// Amplitude ratio between consecutive octaves.
    pub persistence: f64,
    /// Blobs per 1000 pixels.
    pub blob_density: f64,
    /// Fraction of the image covered by a periodic pattern; 0 disables it.
    pub repetitive_fraction: f64,
    /// Period of the repetitive pattern in pixels.
    pub repetitive_period: f64,
    /// Fraction of the image covered by a low-contrast disc.
    pub flat_fraction: f64,
    /// Per-image gain and bias jitter amplitude.
    pub jitter: f64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self {
            octaves: 4,
            base_period: 16.0,
            persistence: 0.6,
            blob_density: 4.0,
            repetitive_fraction: 0.0,
            repetitive_period: 8.0,
            flat_fraction: 0.05,
            jitter: 0.1,
        }
    }
}

/// Camera motion ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseRange {
    pub max_rotation_deg: f64,
    /// Translation magnitude bounds, in units of the plane (or mean scene) depth.
    pub min_translation: f64,
    pub max_translation: f64,
}

impl Default for PoseRange {
    fn default() -> Self {
        Self { max_rotation_deg: 5.0, min_translation: 0.05, max_translation: 0.15 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SceneMode {
    Planar,
    General,
}

/// Procedural intensity field over image-1 pixel coordinates.
#[derive(Debug, Clone)]
pub struct Texture {
    seed: u64,
    cfg: TextureConfig,
    blobs: Vec<Blob>,
    repetitive: Option<[f64; 4]>,
    flat: Option<(f64, f64, f64)>,
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    x: f64,
    y: f64,
    radius: f64,
    amplitude: f64,
}

fn hash_unit(seed: u64, octave: u64, ix: i64, iy: i64) -> f64 {
    let h = derive_seed(derive_seed(seed, octave, ix as u64), 7, iy as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

impl Texture {
    pub fn new(seed: u64, width: usize, height: usize, cfg: &TextureConfig) -> Result<Self> {
        if cfg.octaves < 4 {
            return Err(Error::invalid("texture needs at least four octaves"));
        }
        if !(0.0..=1.0).contains(&cfg.repetitive_fraction) || !(0.0..=1.0).contains(&cfg.flat_fraction) {
            return Err(Error::invalid("texture fractions must lie in [0, 1]"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 11, 0));
        let (w, h) = (width as f64, height as f64);
        // Blobs also cover a margin so the second view sees texture beyond image 1.
        let margin: f64 = 0.25;
        let n_blobs = (cfg.blob_density * w * h * (1.0 + 2.0 * margin).powi(2) / 1000.0).round() as usize;
        let blobs = (0..n_blobs)
            .map(|_| Blob {
                x: rng.gen_range(-margin * w..(1.0 + margin) * w),
                y: rng.gen_range(-margin * h..(1.0 + margin) * h),
                radius: rng.gen_range(1.5..4.0),
                amplitude: if rng.gen_bool(0.5) { 0.45 } else { -0.45 },
            })
            .collect();
        let repetitive = (cfg.repetitive_fraction > 0.0).then(|| {
            // Full-height band whose width is the requested fraction.
            let bw = cfg.repetitive_fraction * w;
            let x0 = rng.gen_range(0.0..=(w - bw));
            [x0, 0.0, x0 + bw, h]
        });
        let flat = (cfg.flat_fraction > 0.0).then(|| {
            let r = (cfg.flat_fraction * w * h / PI).sqrt();
            (rng.gen_range(0.0..w), rng.gen_range(0.0..h), r)
        });
        Ok(Self { seed, cfg: cfg.clone(), blobs, repetitive, flat })
    }

    fn value_noise(&self, x: f64, y: f64) -> f64 {
        let mut total = 0.0;
        let mut norm = 0.0;
        let mut amp = 1.0;
        let mut period = self.cfg.base_period;
        for o in 0..self.cfg.octaves {
            let (fx, fy) = (x / period, y / period);
            let (ix, iy) = (fx.floor(), fy.floor());
            let (tx, ty) = (smoothstep(fx - ix), smoothstep(fy - iy));
            let (ix, iy) = (ix as i64, iy as i64);
            let v = |dx: i64, dy: i64| hash_unit(self.seed, o as u64, ix + dx, iy + dy);
            let top = v(0, 0) * (1.0 - tx) + v(1, 0) * tx;
            let bottom = v(0, 1) * (1.0 - tx) + v(1, 1) * tx;
            total += amp * (top * (1.0 - ty) + bottom * ty);
            norm += amp;
            amp *= self.cfg.persistence;
            period *= 0.5;
        }
        total / norm
    }

    pub fn in_repetitive_region(&self, x: f64, y: f64) -> bool {
        matches!(self.repetitive, Some([x0, y0, x1, y1]) if x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    /// Intensity in [0, 1] at a continuous image-1 location.
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        if self.in_repetitive_region(x, y) {
            let p = self.cfg.repetitive_period;
            let s = (2.0 * PI * x / p).sin() * (2.0 * PI * y / p).sin();
            return 0.5 + 0.4 * s;
        }
        // Contrast-stretch the octave sum, whose spread concentrates near 0.5.
        let mut v = 0.5 + 2.0 * (self.value_noise(x, y) - 0.5);
        for b in &self.blobs {
            let d2 = (x - b.x).powi(2) + (y - b.y).powi(2);
            let r2 = b.radius * b.radius;
            if d2 < 9.0 * r2 {
                v += b.amplitude * (-0.5 * d2 / r2).exp();
            }
        }
        if let Some((cx, cy, r)) = self.flat {
            if (x - cx).powi(2) + (y - cy).powi(2) < r * r {
                v = 0.5 + 0.1 * (v - 0.5);
            }
        }
        v.clamp(0.0, 1.0)
    }

    /// 2x2 supersampled pixel value with sample positions mapped by `f`.
    fn render_pixel(&self, col: usize, row: usize, f: &impl Fn(f64, f64) -> Option<(f64, f64)>) -> f64 {
        let mut acc = 0.0;
        for (dx, dy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
            acc += match f(col as f64 + dx, row as f64 + dy) {
                Some((x, y)) => self.eval(x, y),
                None => 0.5,
            };
        }
        0.25 * acc
    }

    pub fn render(&self, width: usize, height: usize, map: impl Fn(f64, f64) -> Option<(f64, f64)>) -> GrayImage {
        let data = (0..height)
            .flat_map(|r| (0..width).map(move |c| (c, r)))
            .map(|(c, r)| self.render_pixel(c, r, &map) as f32)
            .collect();
        GrayImage { width, height, data }
    }

    /// Per-pixel flag of the periodic region in image 1.
    pub fn repetitive_mask(&self, width: usize, height: usize) -> Vec<bool> {
        (0..height)
            .flat_map(|r| (0..width).map(move |c| (c, r)))
            .map(|(c, r)| self.in_repetitive_region(c as f64 + 0.5, r as f64 + 0.5))
            .collect()
    }
}

/// Seeded texture image over the whole frame, with its repetitive-region mask.
pub fn texture(seed: u64, width: usize, height: usize, cfg: &TextureConfig) -> Result<(GrayImage, Vec<bool>)> {
    let t = Texture::new(seed, width, height, cfg)?;
    Ok((t.render(width, height, |x, y| Some((x, y))), t.repetitive_mask(width, height)))
}

/// Two views with exact geometry. Image 2 correspondences are given by the
/// homography in planar mode and by the per-pixel field in general mode.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub seed: u64,
    pub mode: SceneMode,
    pub image1: GrayImage,
    pub image2: GrayImage,
    pub k1: Intrinsics,
    pub k2: Intrinsics,
    pub pose: RelativePose,
    pub homography: Option<Homography>,
    /// Camera-1 depth at image-1 pixel centers (general mode).
    pub depth: Option<Vec<f64>>,
    /// Image-2 location of each image-1 pixel center; `None` when occluded or out of view.
    pub flow: Option<Vec<Option<Pt2>>>,
    pub repetitive_mask: Vec<bool>,
}

impl SynthScene {
    pub fn fundamental(&self) -> Result<FundamentalMatrix> {
        fundamental_from_pose(&self.k1, &self.k2, &self.pose)
    }

    pub fn width(&self) -> usize {
        self.image1.width
    }

    pub fn height(&self) -> usize {
        self.image1.height
    }

    /// Ground-truth image-2 location of an image-1 point, when known.
    pub fn correspond(&self, x: &Pt2) -> Option<Pt2> {
        if let Some(h) = &self.homography {
            return h.apply(x);
        }
        let flow = self.flow.as_ref()?;
        let (c, r) = (x.x.floor(), x.y.floor());
        if c < 0.0 || r < 0.0 || c as usize >= self.width() || r as usize >= self.height() {
            return None;
        }
        let (c, r) = (c as usize, r as usize);
        if (x.x - (c as f64 + 0.5)).abs() > 1e-12 || (x.y - (r as f64 + 0.5)).abs() > 1e-12 {
            return None;
        }
        flow[r * self.width() + c]
    }

    pub fn repetitive_fraction(&self) -> f64 {
        self.repetitive_mask.iter().filter(|&&m| m).count() as f64 / self.repetitive_mask.len() as f64
    }

    pub fn meta(&self) -> SceneMeta {
        SceneMeta {
            seed: self.seed,
            mode: self.mode,
            width: self.width(),
            height: self.height(),
            repetitive_fraction: self.repetitive_fraction(),
        }
    }

    /// Writes `img1.pgm`, `img2.pgm`, `pose.json`, `H.txt` (planar) and `meta.json`.
    pub fn write_bundle(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.image1.save_pgm(&dir.join("img1.pgm"))?;
        self.image2.save_pgm(&dir.join("img2.pgm"))?;
        PoseFile::new(&self.k1, &self.k2, &self.pose).write(&dir.join("pose.json"))?;
        if let Some(h) = &self.homography {
            h.write_text(&dir.join("H.txt"))?;
        }
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&self.meta())? + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub mode: SceneMode,
    pub width: usize,
    pub height: usize,
    pub repetitive_fraction: f64,
}

/// Default synthetic intrinsics: focal length equal to the image width, centered principal point.
pub fn default_intrinsics(width: usize, height: usize) -> Intrinsics {
    Intrinsics { fx: width as f64, fy: width as f64, cx: width as f64 / 2.0, cy: height as f64 / 2.0 }
}

fn random_pose(rng: &mut ChaCha8Rng, range: &PoseRange, depth: f64) -> Result<RelativePose> {
    let axis = Unit::new_normalize(Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    let angle = rng.gen_range(-1.0..=1.0) * range.max_rotation_deg.to_radians();
    let rotation = Rotation3::from_axis_angle(&axis, angle).into_inner();
    let dir = loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            break v / n;
        }
    };
    let mag = rng.gen_range(range.min_translation..=range.max_translation) * depth;
    RelativePose::new(rotation, dir * mag)
}

fn check_size(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 || !width.is_multiple_of(16) || !height.is_multiple_of(16) {
        return Err(Error::invalid(format!("scene size {width}x{height} must be a positive multiple of 16")));
    }
    Ok(())
}

fn jitter(img: &mut GrayImage, rng: &mut ChaCha8Rng, amount: f64) {
    if amount <= 0.0 {
        return;
    }
    let gain = 1.0 + rng.gen_range(-amount..=amount);
    let bias = rng.gen_range(-amount..=amount) * 0.5;
    for v in &mut img.data {
        *v = ((*v as f64 - 0.5) * gain + 0.5 + bias).clamp(0.0, 1.0) as f32;
    }
}

/// Plane-induced homography `K2 (R + t n^T / d) K1^-1` for the plane `n . X1 = d`.
pub fn plane_homography(k1: &Intrinsics, k2: &Intrinsics, pose: &RelativePose, normal: &Vector3<f64>, d: f64) -> Result<Homography> {
    let m = k2.matrix() * (pose.rotation + pose.translation * normal.transpose() / d) * k1.inverse_matrix();
    Homography::new(m)
}

/// Textured fronto-parallel plane at unit depth seen from two cameras.
/// `pose = None` draws a random pose from `range`.
pub fn make_planar_pair(
    seed: u64,
    width: usize,
    height: usize,
    texture_cfg: &TextureConfig,
    range: &PoseRange,
    pose: Option<RelativePose>,
) -> Result<SynthScene> {
    check_size(width, height)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 21, 0));
    let k = default_intrinsics(width, height);
    let depth = 1.0;
    let pose = match pose {
        Some(p) => p,
        None => random_pose(&mut rng, range, depth)?,
    };
    let h = plane_homography(&k, &k, &pose, &Vector3::z(), depth)?;
    let hinv = h.inverse()?;
    let tex = Texture::new(seed, width, height, texture_cfg)?;
    let mut image1 = tex.render(width, height, |x, y| Some((x, y)));
    let mut image2 = tex.render(width, height, |x, y| hinv.apply(&Pt2::new(x, y)).map(|p| (p.x, p.y)));
    jitter(&mut image1, &mut rng, texture_cfg.jitter);
    jitter(&mut image2, &mut rng, texture_cfg.jitter);
    Ok(SynthScene {
        seed,
        mode: SceneMode::Planar,
        image1,
        image2,
        k1: k,
        k2: k,
        pose,
        homography: Some(h),
        depth: None,
        flow: None,
        repetitive_mask: tex.repetitive_mask(width, height),
    })
}

/// Smooth random depth surface seen from two cameras, with z-buffered
/// rendering of the second view and an occlusion-aware correspondence field.
pub fn make_two_view_scene(
    seed: u64,
    width: usize,
    height: usize,
    depth_range: (f64, f64),
    range: &PoseRange,
    texture_cfg: &TextureConfig,
    pose: Option<RelativePose>,
) -> Result<SynthScene> {
    check_size(width, height)?;
    let (dmin, dmax) = depth_range;
    if !(dmin > 0.0 && dmax >= dmin) {
        return Err(Error::invalid("depth range must be positive and ordered"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 22, 0));
    let k = default_intrinsics(width, height);
    let mean_depth = 0.5 * (dmin + dmax);
    let pose = match pose {
        Some(p) => p,
        None => random_pose(&mut rng, range, mean_depth)?,
    };
    let surface_cfg = TextureConfig { base_period: width as f64, persistence: 0.35, blob_density: 0.0, repetitive_fraction: 0.0, flat_fraction: 0.0, ..TextureConfig::default() };
    let surface = Texture::new(derive_seed(seed, 23, 0), width, height, &surface_cfg)?;
    let depth_at = |x: f64, y: f64| dmin + (dmax - dmin) * surface.value_noise(x, y);
    let tex = Texture::new(seed, width, height, texture_cfg)?;
    let (w, h) = (width, height);

    // Forward-splat a 4x supersampled surface into a z-buffer over image 2.
    let sub = 4usize;
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut source = vec![(0.0f64, 0.0f64); w * h];
    for sr in 0..h * sub {
        for sc in 0..w * sub {
            let x1 = Pt2::new((sc as f64 + 0.5) / sub as f64, (sr as f64 + 0.5) / sub as f64);
            let z = depth_at(x1.x, x1.y);
            let p2 = pose.transform(&k.unproject(&x1, z));
            let Some(x2) = k.project(&p2) else { continue };
            if x2.x < 0.0 || x2.y < 0.0 || x2.x >= w as f64 || x2.y >= h as f64 {
                continue;
            }
            let idx = x2.y as usize * w + x2.x as usize;
            if p2.z < zbuf[idx] {
                zbuf[idx] = p2.z;
                source[idx] = (x1.x, x1.y);
            }
        }
    }
    let image2_data = (0..w * h)
        .map(|i| if zbuf[i].is_finite() { tex.eval(source[i].0, source[i].1) as f32 } else { 0.5 })
        .collect();
    let mut image2 = GrayImage { width: w, height: h, data: image2_data };
    let mut image1 = tex.render(w, h, |x, y| Some((x, y)));

    let mut depth = Vec::with_capacity(w * h);
    let mut flow = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let x1 = Pt2::new(c as f64 + 0.5, r as f64 + 0.5);
            let z = depth_at(x1.x, x1.y);
            depth.push(z);
            let p2 = pose.transform(&k.unproject(&x1, z));
            let vis = k.project(&p2).filter(|x2| {
                if x2.x < 0.0 || x2.y < 0.0 || x2.x >= w as f64 || x2.y >= h as f64 {
                    return false;
                }
                let zb = zbuf[x2.y as usize * w + x2.x as usize];
                // Visible when no surface lies clearly in front; the margin
                // absorbs depth variation across one pixel footprint.
                p2.z <= zb * 1.05
            });
            flow.push(vis);
        }
    }
    jitter(&mut image1, &mut rng, texture_cfg.jitter);
    jitter(&mut image2, &mut rng, texture_cfg.jitter);
    Ok(SynthScene {
        seed,
        mode: SceneMode::General,
        image1,
        image2,
        k1: k,
        k2: k,
        pose,
        homography: None,
        depth: Some(depth),
        flow: Some(flow),
        repetitive_mask: tex.repetitive_mask(w, h),
    })
}

/// A scene per seed `base_seed + i`.
pub fn planar_suite(base_seed: u64, count: usize, width: usize, height: usize, texture_cfg: &TextureConfig, range: &PoseRange) -> Result<Vec<SynthScene>> {
    (0..count)
        .map(|i| make_planar_pair(base_seed + i as u64, width, height, texture_cfg, range, None))
        .collect()
}

/// Evenly spread, deterministic sample of ground-truth correspondences.
pub fn sample_correspondences(scene: &SynthScene, n: usize, seed: u64) -> Vec<(Pt2, Pt2)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (scene.width(), scene.height());
    let mut out = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n && tries < 100 * n.max(1) {
        tries += 1;
        let x1 = match scene.mode {
            SceneMode::Planar => Pt2::new(rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64)),
            SceneMode::General => Pt2::new(rng.gen_range(0..w) as f64 + 0.5, rng.gen_range(0..h) as f64 + 0.5),
        };
        if let Some(x2) = scene.correspond(&x1) {
            out.push((x1, x2));
        }
    }
    out
}
