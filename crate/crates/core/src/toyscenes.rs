//! Procedural driving scenes with pixel-exact labels, and severity-graded
//! image corruptions.
//!
//! A scene is a 64×64 RGB image of a sky, textured terrain, a road
//! narrowing toward the horizon, vehicles on the road and small upright
//! "vulnerable road users" near its edges. Labels are painted with the same
//! geometry as the pixels.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stls;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const GENERATOR_VERSION: &str = "toyscenes-1";
pub const CLASS_NAMES: [&str; 4] = ["background", "road", "vehicle", "vulnerable"];

pub const BACKGROUND: u8 = 0;
pub const ROAD: u8 = 1;
pub const VEHICLE: u8 = 2;
pub const VULNERABLE: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    /// `(3, 64, 64)` in `[0, 1]`
    pub image: Tensor<f32>,
    /// `(64, 64)` class ids
    pub labels: Tensor<u8>,
    pub scene_seed: u64,
}

/// Smooth random field in `[0, 1]`: bilinear interpolation of a coarse grid.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: usize) -> Vec<f32> {
    let g = size / cell + 2;
    let grid: Vec<f32> = (0..g * g).map(|_| rng.random()).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f32 / cell as f32;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..size {
            let fx = x as f32 / cell as f32;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |r: usize, c: usize| grid[r * g + c];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// Object count in `0..=3` with an empty scene rare enough that each class
/// appears in nearly every image.
fn object_count(rng: &mut ChaCha8Rng) -> usize {
    if rng.random::<f32>() < 0.02 {
        0
    } else {
        rng.random_range(1..=3)
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f32; 3], amount: f32) -> [f32; 3] {
    base.map(|c| (c + rng.random_range(-amount..amount)).clamp(0.0, 1.0))
}

struct Canvas {
    rgb: Vec<[f32; 3]>,
    labels: Vec<u8>,
}

impl Canvas {
    fn paint(&mut self, x: usize, y: usize, color: [f32; 3], class: u8) {
        let i = y * IMAGE_SIZE + x;
        self.rgb[i] = color;
        self.labels[i] = class;
    }
}

/// Road edges `(left, right)` at row `y`, or `None` above the horizon.
struct Road {
    horizon: f32,
    top: (f32, f32),
    bottom: (f32, f32),
}

impl Road {
    fn span(&self, y: f32) -> Option<(f32, f32)> {
        if y < self.horizon {
            return None;
        }
        let t = (y - self.horizon) / (IMAGE_SIZE as f32 - 1.0 - self.horizon);
        let lerp = |a: f32, b: f32| a + (b - a) * t;
        Some((lerp(self.top.0, self.bottom.0), lerp(self.top.1, self.bottom.1)))
    }

    /// Perspective scale: 0 at the horizon, 1 at the bottom row.
    fn depth(&self, y: f32) -> f32 {
        ((y - self.horizon) / (IMAGE_SIZE as f32 - 1.0 - self.horizon)).clamp(0.0, 1.0)
    }
}

/// Deterministic scene for `seed`.
pub fn generate_scene(seed: u64) -> SegSample {
    let n = IMAGE_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut canvas = Canvas {
        rgb: vec![[0.0; 3]; n * n],
        labels: vec![BACKGROUND; n * n],
    };

    let horizon = rng.random_range(16.0..26.0f32);
    let sky = jitter(&mut rng, [0.55, 0.7, 0.9], 0.12);
    let terrain = jitter(&mut rng, [0.35, 0.5, 0.25], 0.15);
    let road_tone = rng.random_range(0.28..0.5f32);
    let clouds = value_noise(&mut rng, n, 16);
    let grass = value_noise(&mut rng, n, 4);
    let grain = value_noise(&mut rng, n, 2);

    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let color = if (y as f32) < horizon {
                let c = 0.25 * clouds[i];
                sky.map(|s| s * 0.85 + c)
            } else {
                let t = 0.6 + 0.6 * grass[i];
                terrain.map(|s| s * t)
            };
            canvas.paint(x, y, color.map(|v| v.clamp(0.0, 1.0)), BACKGROUND);
        }
    }

    let vanish = rng.random_range(22.0..42.0f32);
    let top_half = rng.random_range(1.5..4.0f32);
    let bottom_center = vanish + rng.random_range(-8.0..8.0f32);
    let bottom_half = rng.random_range(18.0..28.0f32);
    let road = Road {
        horizon,
        top: (vanish - top_half, vanish + top_half),
        bottom: (bottom_center - bottom_half, bottom_center + bottom_half),
    };
    for y in 0..n {
        let Some((l, r)) = road.span(y as f32) else { continue };
        let center = 0.5 * (l + r);
        for x in 0..n {
            let xf = x as f32;
            if xf < l || xf > r {
                continue;
            }
            let mut tone = road_tone * (0.9 + 0.2 * grain[y * n + x]);
            // Dashed centre line, still road.
            if (xf - center).abs() < 0.5 + 0.5 * road.depth(y as f32) && (y / 4) % 2 == 0 {
                tone = 0.9;
            }
            canvas.paint(x, y, [tone, tone, tone * 1.02], ROAD);
        }
    }

    for _ in 0..object_count(&mut rng) {
        let bottom = rng.random_range(horizon + 6.0..(n as f32 - 1.0));
        let depth = road.depth(bottom);
        let width = 5.0 + 13.0 * depth;
        let height = width * rng.random_range(0.55..0.8f32);
        let (l, r) = road.span(bottom).expect("below horizon");
        let cx = rng.random_range(l.min(r - 1.0)..r.max(l + 1.0));
        let body = jitter(&mut rng, [0.6, 0.3, 0.3], 0.35);
        let glass = [0.1, 0.12, 0.18];
        let x0 = (cx - width / 2.0).max(0.0) as usize;
        let x1 = ((cx + width / 2.0) as usize).min(n - 1);
        let y0 = (bottom - height).max(0.0) as usize;
        let y1 = bottom as usize;
        for y in y0..=y1 {
            let v = (y - y0) as f32 / (y1 - y0).max(1) as f32;
            for x in x0..=x1 {
                let color = if (0.15..0.45).contains(&v) && x > x0 && x < x1 {
                    glass
                } else {
                    body.map(|c| (c * (1.15 - 0.3 * v)).clamp(0.0, 1.0))
                };
                canvas.paint(x, y, color, VEHICLE);
            }
        }
    }

    const PALETTE: [[f32; 3]; 4] = [[0.85, 0.2, 0.15], [0.95, 0.8, 0.2], [0.2, 0.3, 0.85], [0.85, 0.6, 0.45]];
    for _ in 0..object_count(&mut rng) {
        let foot = rng.random_range(horizon + 4.0..(n as f32 - 1.0));
        let depth = road.depth(foot);
        let ry = 2.5 + 5.0 * depth;
        let rx = (ry * 0.4).max(1.2);
        let (l, r) = road.span(foot).expect("below horizon");
        let edge = if rng.random::<bool>() { l } else { r };
        let cx = edge + rng.random_range(-3.0..3.0f32) * (0.5 + depth);
        let cy = foot - ry;
        let base = PALETTE[rng.random_range(0..PALETTE.len())];
        let color = jitter(&mut rng, base, 0.08);
        let (ya, yb) = ((cy - ry).floor().max(0.0) as usize, ((cy + ry).ceil() as usize).min(n - 1));
        let (xa, xb) = ((cx - rx).floor().max(0.0) as usize, ((cx + rx).ceil().max(0.0) as usize).min(n - 1));
        for y in ya..=yb {
            for x in xa..=xb {
                let dx = (x as f32 - cx) / rx;
                let dy = (y as f32 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    let shade = 1.0 - 0.25 * (dy + 1.0) / 2.0;
                    canvas.paint(x, y, color.map(|c| c * shade), VULNERABLE);
                }
            }
        }
    }

    let mut image = vec![0.0f32; 3 * n * n];
    for (i, px) in canvas.rgb.iter().enumerate() {
        for ch in 0..3 {
            image[ch * n * n + i] = px[ch].clamp(0.0, 1.0);
        }
    }
    SegSample {
        image: Tensor::new([3, n, n], image).expect("image shape"),
        labels: Tensor::new([n, n], canvas.labels).expect("label shape"),
        scene_seed: seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    Haze,
    Rain,
    GaussNoise,
    GaussBlur,
    Contrast,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::Haze,
        CorruptionKind::Rain,
        CorruptionKind::GaussNoise,
        CorruptionKind::GaussBlur,
        CorruptionKind::Contrast,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            CorruptionKind::Haze => "haze",
            CorruptionKind::Rain => "rain",
            CorruptionKind::GaussNoise => "gauss-noise",
            CorruptionKind::GaussBlur => "gauss-blur",
            CorruptionKind::Contrast => "contrast",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::UnknownCorruption(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        let spec = Self { kind, severity, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::InvalidSeverity(self.severity));
        }
        Ok(())
    }

    /// Short id such as `haze-3`.
    pub fn tag(&self) -> String {
        format!("{}-{}", self.kind, self.severity)
    }
}

/// Apply a corruption; the result is clipped to `[0, 1]`.
pub fn corrupt(image: &Tensor<f32>, spec: &CorruptionSpec) -> Result<Tensor<f32>> {
    spec.validate()?;
    corrupt_at_strength(image, spec.kind, f64::from(spec.severity), spec.seed)
}

/// [`corrupt`] with a continuous severity; `strength = 0` is the identity.
pub fn corrupt_at_strength(image: &Tensor<f32>, kind: CorruptionKind, strength: f64, seed: u64) -> Result<Tensor<f32>> {
    let (c, h, w) = image.dims3()?;
    let s = strength as f32;
    let mut out = image.clone();
    match kind {
        CorruptionKind::Haze => {
            for ch in 0..c {
                let plane = out.channel_mut(ch);
                for y in 0..h {
                    // Rows nearer the top are farther away and hazier.
                    let height = 1.0 - y as f32 / (h - 1).max(1) as f32;
                    let alpha = if s == 0.0 { 0.0 } else { 0.15 * s + 0.1 * height };
                    for v in &mut plane[y * w..(y + 1) * w] {
                        *v = (1.0 - alpha) * *v + alpha;
                    }
                }
            }
        }
        CorruptionKind::Rain => {
            let mask = rain_mask(h, w, (20.0 * strength).round() as usize, seed);
            for ch in 0..c {
                for (v, &m) in out.channel_mut(ch).iter_mut().zip(&mask) {
                    let a = 0.5 * m;
                    *v = (1.0 - a) * *v + a;
                }
            }
            out = gaussian_blur(&out, 0.1 * strength)?;
        }
        CorruptionKind::GaussNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sd = 0.04 * s;
            for v in out.data_mut() {
                let z: f32 = StandardNormal.sample(&mut rng);
                *v += sd * z;
            }
        }
        CorruptionKind::GaussBlur => out = gaussian_blur(&out, 0.5 * strength)?,
        CorruptionKind::Contrast => {
            let factor = 1.0 - 0.15 * s;
            for v in out.data_mut().iter_mut().filter(|_| s != 0.0) {
                *v = 0.5 + (*v - 0.5) * factor;
            }
        }
    }
    Ok(out.clamp(0.0, 1.0))
}

/// Coverage mask of `count` anti-aliased streaks, each about one pixel wide.
/// Streaks are drawn from a fixed sequence, so a larger count adds streaks
/// without moving existing ones.
fn rain_mask(h: usize, w: usize, count: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![0.0f32; h * w];
    for _ in 0..count {
        let cx = rng.random_range(0.0..w as f32);
        let cy = rng.random_range(0.0..h as f32);
        let angle = rng.random_range(70.0..110.0f32).to_radians();
        let half = rng.random_range(2.0..5.0f32);
        let (dx, dy) = (angle.cos() * half, angle.sin() * half);
        let (ax, ay, bx, by) = (cx - dx, cy - dy, cx + dx, cy + dy);
        let (x0, x1) = (ax.min(bx).floor() - 1.0, ax.max(bx).ceil() + 1.0);
        let (y0, y1) = (ay.min(by).floor() - 1.0, ay.max(by).ceil() + 1.0);
        let len2 = (bx - ax).powi(2) + (by - ay).powi(2);
        for y in (y0.max(0.0) as usize)..=(y1.min(h as f32 - 1.0).max(0.0) as usize) {
            for x in (x0.max(0.0) as usize)..=(x1.min(w as f32 - 1.0).max(0.0) as usize) {
                let (px, py) = (x as f32, y as f32);
                let t = (((px - ax) * (bx - ax) + (py - ay) * (by - ay)) / len2).clamp(0.0, 1.0);
                let d = ((px - ax - t * (bx - ax)).powi(2) + (py - ay - t * (by - ay)).powi(2)).sqrt();
                let cov = (1.0 - d).max(0.0);
                let m = &mut mask[y * w + x];
                *m = m.max(cov);
            }
        }
    }
    mask
}

/// Separable Gaussian blur with clamped borders; `sigma <= 0` copies.
pub fn gaussian_blur(image: &Tensor<f32>, sigma: f64) -> Result<Tensor<f32>> {
    let (c, h, w) = image.dims3()?;
    if sigma <= 0.0 {
        return Ok(image.clone());
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|d| (-(d as f64).powi(2) / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = image.clone();
    let mut tmp = vec![0.0f32; h * w];
    for ch in 0..c {
        let src = image.channel(ch);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * src[y * w + clamp(x as isize + k as isize - radius, w)])
                    .sum();
            }
        }
        let dst = out.channel_mut(ch);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * tmp[clamp(y as isize + k as isize - radius, h) * w + x])
                    .sum();
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1 << 40,
            Split::Test => 2 << 40,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split {other:?}"))),
        }
    }
}

/// Largest accepted dataset seed and sample count (exclusive).
pub const MAX_BASE_SEED: u64 = 1 << 20;
pub const MAX_SAMPLES: usize = 1 << 20;

/// Scene seed of sample `index`. Each split owns a disjoint `2^40` range.
pub fn scene_seed(split: Split, base_seed: u64, index: usize) -> u64 {
    split.offset() + (base_seed << 20) + index as u64
}

fn corruption_seed(spec_seed: u64, index: usize) -> u64 {
    spec_seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(index as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub scene_seed: u64,
    pub image: String,
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator_version: String,
    pub split: Split,
    pub seed: u64,
    pub class_names: Vec<String>,
    pub corruption: Option<CorruptionSpec>,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SegSample>,
}

impl Dataset {
    pub fn generate(split: Split, n: usize, seed: u64) -> Result<Self> {
        if seed >= MAX_BASE_SEED || n > MAX_SAMPLES {
            return Err(Error::InvalidConfig(format!(
                "dataset seed must be < {MAX_BASE_SEED} and size <= {MAX_SAMPLES}"
            )));
        }
        let samples: Vec<SegSample> = (0..n).map(|i| generate_scene(scene_seed(split, seed, i))).collect();
        let entries = samples
            .iter()
            .enumerate()
            .map(|(i, s)| SampleEntry {
                scene_seed: s.scene_seed,
                image: format!("{i:05}.image.stls"),
                labels: format!("{i:05}.labels.stls"),
            })
            .collect();
        Ok(Self {
            manifest: DatasetManifest {
                generator_version: GENERATOR_VERSION.into(),
                split,
                seed,
                class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
                corruption: None,
                samples: entries,
            },
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Human-readable id, e.g. `test-s7-n40` or `test-s7-n40+haze-3`.
    pub fn id(&self) -> String {
        let m = &self.manifest;
        let base = format!("{}-s{}-n{}", m.split.tag(), m.seed, self.len());
        match &m.corruption {
            Some(c) => format!("{base}+{}", c.tag()),
            None => base,
        }
    }

    /// Copy with every image corrupted; labels are shared unchanged.
    pub fn corrupted(&self, spec: &CorruptionSpec) -> Result<Self> {
        spec.validate()?;
        if self.manifest.corruption.is_some() {
            return Err(Error::InvalidConfig("dataset is already corrupted".into()));
        }
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let per_sample = CorruptionSpec { seed: corruption_seed(spec.seed, i), ..*spec };
                Ok(SegSample {
                    image: corrupt(&s.image, &per_sample)?,
                    ..s.clone()
                })
            })
            .collect::<Result<_>>()?;
        let mut manifest = self.manifest.clone();
        manifest.corruption = Some(*spec);
        Ok(Self { manifest, samples })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (entry, sample) in self.manifest.samples.iter().zip(&self.samples) {
            stls::save(&sample.image, dir.join(&entry.image))?;
            stls::save(&sample.labels, dir.join(&entry.labels))?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let fail = |reason: String| Error::Dataset { path: dir.to_path_buf(), reason };
        let text = fs::read_to_string(dir.join("manifest.json")).map_err(|e| fail(format!("manifest.json: {e}")))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| fail(format!("manifest.json: {e}")))?;
        let samples = manifest
            .samples
            .iter()
            .map(|entry| {
                let image: Tensor<f32> = stls::load(dir.join(&entry.image)).map_err(|e| fail(format!("{}: {e}", entry.image)))?;
                let labels: Tensor<u8> = stls::load(dir.join(&entry.labels)).map_err(|e| fail(format!("{}: {e}", entry.labels)))?;
                let (c, h, w) = image.dims3()?;
                if c != 3 || labels.shape() != [h, w] {
                    return Err(fail(format!("{}: image {:?} vs labels {:?}", entry.image, image.shape(), labels.shape())));
                }
                Ok(SegSample { image, labels, scene_seed: entry.scene_seed })
            })
            .collect::<Result<_>>()?;
        Ok(Self { manifest, samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_abs_change(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| f64::from((x - y).abs())).sum::<f64>() / a.numel() as f64
    }

    #[test]
    fn scenes_are_deterministic_and_in_range() {
        let a = generate_scene(11);
        assert_eq!(a, generate_scene(11));
        assert_ne!(a.image, generate_scene(12).image);
        assert!(a.image.min_value() >= 0.0 && a.image.max_value() <= 1.0);
        assert!(a.labels.data().iter().all(|&l| l < 4));
    }

    #[test]
    fn every_class_is_common() {
        let mut present = [0usize; 4];
        for seed in 0..1000 {
            let s = generate_scene(seed);
            let mut seen = [false; 4];
            s.labels.data().iter().for_each(|&l| seen[l as usize] = true);
            for (p, s) in present.iter_mut().zip(seen) {
                *p += usize::from(s);
            }
        }
        for (class, &count) in present.iter().enumerate() {
            assert!(count > 950, "class {class} present in {count}/1000 scenes");
        }
    }

    #[test]
    fn zero_strength_is_identity() {
        let img = generate_scene(3).image;
        for kind in CorruptionKind::ALL {
            assert_eq!(corrupt_at_strength(&img, kind, 0.0, 1).unwrap(), img, "{kind}");
        }
    }

    #[test]
    fn haze_top_row_blend() {
        let img = Tensor::<f32>::zeros([3, 64, 64]);
        let out = corrupt(&img, &CorruptionSpec::new(CorruptionKind::Haze, 5, 0).unwrap()).unwrap();
        assert!((out.data()[0] - 0.85).abs() < 1e-6);
        assert!((out.channel(0)[63 * 64] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(CorruptionSpec::new(CorruptionKind::Rain, 0, 0), Err(Error::InvalidSeverity(0))));
        assert!(matches!(CorruptionSpec::new(CorruptionKind::Rain, 6, 0), Err(Error::InvalidSeverity(6))));
        assert!(matches!("snow".parse::<CorruptionKind>(), Err(Error::UnknownCorruption(_))));
        assert_eq!("gauss-noise".parse::<CorruptionKind>().unwrap(), CorruptionKind::GaussNoise);
    }

    #[test]
    fn corruption_statistics() {
        let mut haze_up = 0;
        let mut contrast_down = 0;
        for seed in 0..100 {
            let img = generate_scene(seed).image;
            let hazy = corrupt(&img, &CorruptionSpec::new(CorruptionKind::Haze, 3, seed).unwrap()).unwrap();
            haze_up += usize::from(hazy.mean() > img.mean());
            let flat = corrupt(&img, &CorruptionSpec::new(CorruptionKind::Contrast, 3, seed).unwrap()).unwrap();
            let var = |t: &Tensor<f32>| {
                let m = t.mean();
                t.data().iter().map(|v| (v - m).powi(2)).sum::<f32>()
            };
            contrast_down += usize::from(var(&flat) < var(&img));
        }
        assert_eq!((haze_up, contrast_down), (100, 100));
    }

    #[test]
    fn change_grows_with_severity() {
        for kind in CorruptionKind::ALL {
            for seed in 0..100 {
                let img = generate_scene(seed).image;
                let changes: Vec<f64> = (1..=5)
                    .map(|s| mean_abs_change(&img, &corrupt(&img, &CorruptionSpec::new(kind, s, seed).unwrap()).unwrap()))
                    .collect();
                assert!(changes.windows(2).all(|w| w[1] >= w[0]), "{kind} seed {seed}: {changes:?}");
            }
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let max = MAX_BASE_SEED - 1;
        let last_train = scene_seed(Split::Train, max, MAX_SAMPLES - 1);
        assert!(last_train < scene_seed(Split::Val, 0, 0));
        let last_val = scene_seed(Split::Val, max, MAX_SAMPLES - 1);
        assert!(last_val < scene_seed(Split::Test, 0, 0));
    }

    #[test]
    fn dataset_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::generate(Split::Val, 3, 5).unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        let spec = CorruptionSpec::new(CorruptionKind::Rain, 2, 9).unwrap();
        let rainy = ds.corrupted(&spec).unwrap();
        assert_eq!(rainy.id(), "val-s5-n3+rain-2");
        for (a, b) in rainy.samples.iter().zip(&ds.samples) {
            assert_eq!(a.labels, b.labels);
            assert_ne!(a.image, b.image);
        }
        assert!(rainy.corrupted(&spec).is_err());
    }
}
