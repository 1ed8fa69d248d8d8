//! Scenes, scanpaths, supervised samples and the synthetic generator.
//!
//! Synthetic scenes are dark equirectangular frames with bright Gaussian
//! blobs. The matching scanpaths either hop between blobs (fixations with
//! saccades to the nearest unvisited blob) or drift with momentum,
//! independently of the image.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::math::{exp, round};
use crate::rng::SplitMix64;
use crate::temporal::{validate_points, GazePoint, WINDOW_LEN};

/// RGB image with 8-bit channels, stored row-major.
#[derive(Clone, PartialEq, Eq)]
pub struct SceneImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl fmt::Debug for SceneImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SceneImage({}x{})", self.width, self.height)
    }
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if height == 0 {
        return Err(Error::ImageDims {
            width,
            height,
            reason: "image is empty",
        });
    }
    if width != 2 * height {
        return Err(Error::ImageDims {
            width,
            height,
            reason: "equirectangular frames need width == 2 * height",
        });
    }
    Ok(())
}

fn to_u8(v: f64) -> u8 {
    round(v.clamp(0.0, 1.0) * 255.0) as u8
}

impl SceneImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        check_dims(width, height)?;
        if pixels.len() != width * height * 3 {
            return Err(Error::LengthMismatch {
                left: pixels.len(),
                right: width * height * 3,
            });
        }
        Ok(Self { width, height, pixels })
    }

    /// Panics on a non-2:1 size.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        check_dims(width, height).expect("invalid scene size");
        let pixels = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, pixels }
    }

    /// Build from a function returning channel values in `[0, 1]`
    /// (quantized to 8 bits). Panics on a non-2:1 size.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        check_dims(width, height).expect("invalid scene size");
        let mut pixels = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend(f(x, y).map(to_u8));
            }
        }
        Self { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Channel value in `[0, 1]`.
    pub fn value(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[3 * (y * self.width + x) + c] as f64 / 255.0
    }

    /// Rec. 601 luma in `[0, 1]`.
    pub fn luminance(&self, x: usize, y: usize) -> f64 {
        0.299 * self.value(x, y, 0) + 0.587 * self.value(x, y, 1) + 0.114 * self.value(x, y, 2)
    }

    pub fn mean_luminance(&self) -> f64 {
        let mut total = 0.0;
        for y in 0..self.height {
            for x in 0..self.width {
                total += self.luminance(x, y);
            }
        }
        total / (self.width * self.height) as f64
    }

    pub fn check_patch_size(&self, patch_px: usize) -> Result<()> {
        if patch_px == 0 || self.width % patch_px != 0 || self.height % patch_px != 0 {
            return Err(Error::ImageDims {
                width: self.width,
                height: self.height,
                reason: "dimensions are not divisible by the patch size",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScanpathRecord {
    pub scene_id: String,
    pub points: Vec<GazePoint>,
}

impl ScanpathRecord {
    pub fn validate(&self) -> Result<()> {
        if self.points.len() < WINDOW_LEN + 1 {
            return Err(Error::TooShort {
                needed: WINDOW_LEN + 1,
                found: self.points.len(),
            });
        }
        validate_points(&self.points)
    }
}

/// A 10-point history and the point that follows it.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scene_id: String,
    pub window: Vec<GazePoint>,
    pub target: GazePoint,
}

/// Sliding windows with stride 1.
pub fn make_samples(record: &ScanpathRecord) -> Result<Vec<Sample>> {
    record.validate()?;
    let n = record.points.len();
    Ok((0..n - WINDOW_LEN)
        .map(|k| Sample {
            scene_id: record.scene_id.clone(),
            window: record.points[k..k + WINDOW_LEN].to_vec(),
            target: record.points[k + WINDOW_LEN],
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub scenes: BTreeMap<String, SceneImage>,
    pub records: Vec<ScanpathRecord>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if !self.scenes.contains_key(&r.scene_id) {
                return Err(Error::UnknownScene(r.scene_id.clone()));
            }
            r.validate()?;
        }
        Ok(())
    }

    /// Samples of the listed scenes, in record order.
    pub fn samples_for(&self, scene_ids: &[String]) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for r in &self.records {
            if scene_ids.contains(&r.scene_id) {
                out.extend(make_samples(r)?);
            }
        }
        Ok(out)
    }

    pub fn samples(&self) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for r in &self.records {
            out.extend(make_samples(r)?);
        }
        Ok(out)
    }

    pub fn scene_ids(&self) -> Vec<String> {
        self.scenes.keys().cloned().collect()
    }
}

/// Shuffle scene ids (seeded) and cut them into train/val/test groups.
/// Group sizes are rounded from the fractions; the test group takes the
/// remainder.
pub fn split_by_scene(ids: &[String], fractions: [f64; 3], seed: u64) -> Result<[Vec<String>; 3]> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(alloc::format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let mut ids = ids.to_vec();
    ids.sort();
    SplitMix64::stream(seed, SPLIT_STREAM).shuffle(&mut ids);
    let n = ids.len();
    let n_train = (round(fractions[0] * n as f64) as usize).min(n);
    let n_val = (round(fractions[1] * n as f64) as usize).min(n - n_train);
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok([ids, val, test])
}

const SPLIT_STREAM: u64 = 0x5EED_0001;
const LAYOUT_STREAM: u64 = 1;
const PATH_STREAM: u64 = 2;

/// Background level of synthetic scenes.
pub const BACKGROUND: f64 = 0.08;
/// Peak added by one blob.
pub const BLOB_PEAK: f64 = 0.85;
/// Fixation jitter in normalized units.
pub const FIXATION_JITTER: f64 = 0.01;
const MIN_BLOB_SEPARATION: f64 = 0.2;

/// Render blobs (normalized centers) with `σ = height / 16` pixels onto the
/// dark background.
pub fn render_scene(width: usize, height: usize, centers: &[[f64; 2]]) -> Result<SceneImage> {
    check_dims(width, height)?;
    let sigma = height as f64 / 16.0;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let centers_px: Vec<(f64, f64)> = centers
        .iter()
        .map(|c| (c[0] * width as f64, c[1] * height as f64))
        .collect();
    Ok(SceneImage::from_fn(width, height, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut v = BACKGROUND;
        for (cx, cy) in &centers_px {
            let d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
            v += BLOB_PEAK * exp(-d2 * inv);
        }
        [v, v, v]
    }))
}

/// Blob centers are drawn one after another from the seed, so a scene with
/// more blobs contains the blobs of every smaller scene of the same seed.
pub fn blob_centers(seed: u64, n_blobs: usize) -> Vec<[f64; 2]> {
    let mut rng = SplitMix64::stream(seed, LAYOUT_STREAM);
    let mut centers: Vec<[f64; 2]> = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let mut c = [0.0; 2];
        for _ in 0..100 {
            c = [rng.uniform(0.1, 0.9), rng.uniform(0.2, 0.8)];
            if centers.iter().all(|o| distance(*o, c) >= MIN_BLOB_SEPARATION) {
                break;
            }
        }
        centers.push(c);
    }
    centers
}

pub fn generate_scene(seed: u64, width: usize, height: usize, n_blobs: usize) -> Result<(SceneImage, Vec<[f64; 2]>)> {
    if n_blobs == 0 {
        return Err(Error::InvalidArgument("a scene needs at least one blob".into()));
    }
    let centers = blob_centers(seed, n_blobs);
    Ok((render_scene(width, height, &centers)?, centers))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanpathStyle {
    /// Fixations on blobs with saccades to the nearest unvisited blob.
    #[default]
    Fixation,
    /// Smooth drift with persistent velocity, unrelated to the scene.
    Momentum,
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    crate::math::sqrt(dx * dx + dy * dy)
}

/// Round to 6 decimals so text files reproduce values exactly.
pub fn quantize(v: f64) -> f64 {
    round(v * 1e6) / 1e6
}

fn confidence(rng: &mut SplitMix64) -> f64 {
    quantize((0.9 + 0.05 * rng.normal()).clamp(0.0, 1.0))
}

fn step_ms(rng: &mut SplitMix64) -> f64 {
    rng.range_inclusive(200, 400) as f64
}

pub fn generate_scanpath(centers: &[[f64; 2]], seed: u64, length: usize, style: ScanpathStyle) -> Result<Vec<GazePoint>> {
    if length < WINDOW_LEN + 1 {
        return Err(Error::TooShort {
            needed: WINDOW_LEN + 1,
            found: length,
        });
    }
    if centers.is_empty() {
        return Err(Error::Empty("blob centers"));
    }
    let mut rng = SplitMix64::stream(seed, PATH_STREAM);
    let mut points = Vec::with_capacity(length);
    let mut t = 0.0;
    match style {
        ScanpathStyle::Fixation => {
            let mut current = rng.below(centers.len());
            let mut visited = alloc::vec![false; centers.len()];
            visited[current] = true;
            let dwell = rng.range_inclusive(3, 6);
            while points.len() < length {
                for _ in 0..dwell {
                    if points.len() == length {
                        break;
                    }
                    let c = centers[current];
                    let x = quantize((c[0] + FIXATION_JITTER * rng.normal()).clamp(0.0, 1.0));
                    let y = quantize((c[1] + FIXATION_JITTER * rng.normal()).clamp(0.0, 1.0));
                    points.push(GazePoint::new(t, x, y, confidence(&mut rng)));
                    t += step_ms(&mut rng);
                }
                if visited.iter().all(|v| *v) {
                    visited.iter_mut().for_each(|v| *v = false);
                    visited[current] = true;
                }
                let next = (0..centers.len())
                    .filter(|&k| !visited[k])
                    .min_by(|&a, &b| {
                        distance(centers[current], centers[a]).total_cmp(&distance(centers[current], centers[b]))
                    });
                if let Some(next) = next {
                    current = next;
                    visited[next] = true;
                }
            }
        }
        ScanpathStyle::Momentum => {
            let (lo, hi) = (0.02, 0.98);
            let mut pos = [rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)];
            let angle = rng.uniform(0.0, crate::math::TAU);
            let speed = rng.uniform(0.015, 0.03);
            let mut vel = [speed * crate::math::cos(angle), speed * crate::math::sin(angle)];
            while points.len() < length {
                let x = quantize(pos[0]);
                let y = quantize(pos[1]);
                points.push(GazePoint::new(t, x, y, confidence(&mut rng)));
                t += step_ms(&mut rng);
                for k in 0..2 {
                    vel[k] += 0.001 * rng.normal();
                    pos[k] += vel[k];
                    if pos[k] < lo {
                        pos[k] = 2.0 * lo - pos[k];
                        vel[k] = -vel[k];
                    } else if pos[k] > hi {
                        pos[k] = 2.0 * hi - pos[k];
                        vel[k] = -vel[k];
                    }
                    pos[k] = pos[k].clamp(lo, hi);
                }
            }
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub scenes: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub blobs: usize,
    /// Points per scanpath.
    pub length: usize,
    #[serde(default)]
    pub style: ScanpathStyle,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 10,
            seed: 0,
            width: 512,
            height: 256,
            blobs: 3,
            length: 40,
            style: ScanpathStyle::Fixation,
        }
    }
}

pub fn scene_id(index: usize) -> String {
    alloc::format!("scene_{index:04}")
}

/// One scene and one scanpath per index; scene `i` draws from its own
/// stream of `seed`.
pub fn synthesize(cfg: &SynthConfig) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for i in 0..cfg.scenes {
        let scene_seed = SplitMix64::stream(cfg.seed, i as u64).next_u64();
        let (image, centers) = generate_scene(scene_seed, cfg.width, cfg.height, cfg.blobs)?;
        let points = generate_scanpath(&centers, scene_seed, cfg.length, cfg.style)?;
        let id = scene_id(i);
        ds.scenes.insert(id.clone(), image);
        ds.records.push(ScanpathRecord { scene_id: id, points });
    }
    Ok(ds)
}
