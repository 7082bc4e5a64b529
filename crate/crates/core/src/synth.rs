//! Procedural Lambertian scenes with dense ground truth.
//!
//! Reflectance is a Voronoi partition with one flat colour per cell, shading
//! is smoothed noise optionally darkened by a half-plane cast shadow, and the
//! image is their product. Every sample is a pure function of
//! `(config, index)`.

use crate::image::{
    load_pfm, load_png, load_segments, save_pfm, save_png, save_segments, GrayImage, ImageError, ImageRGB,
    IntrinsicSample, SegmentClass, SegmentMap,
};
use crate::priors::canny::gaussian_blur;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("malformed manifest {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },
    #[error("I/O failure on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] ImageError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub size: usize,
    pub n_regions: usize,
    /// Gaussian sigma (pixels) applied to the shading noise.
    pub shading_smoothness: f64,
    /// Replace the noise field by constant shading 1 (the infinite
    /// smoothness limit).
    pub flat_shading: bool,
    pub shadow_prob: f64,
    pub shadow_attenuation: f64,
    pub wall_ceiling_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            n_regions: 8,
            shading_smoothness: 12.0,
            flat_shading: false,
            shadow_prob: 0.5,
            shadow_attenuation: 0.4,
            wall_ceiling_prob: 0.3,
            seed: 0,
        }
    }
}

const SHADING_RANGE: (f32, f32) = (0.2, 1.0);
const ALBEDO_RANGE: (f32, f32) = (0.1, 0.9);
/// Half-width of the linear shadow penumbra, in pixels.
const PENUMBRA: f64 = 1.0;

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        if self.size < 32 {
            return bad("size must be at least 32");
        }
        if self.n_regions < 2 {
            return bad("n_regions must be at least 2");
        }
        for (name, p) in [("shadow_prob", self.shadow_prob), ("wall_ceiling_prob", self.wall_ceiling_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.shadow_attenuation > 0.0 && self.shadow_attenuation <= 1.0) {
            return bad("shadow_attenuation must lie in (0, 1]");
        }
        if !self.flat_shading && !(self.shading_smoothness > 0.0 && self.shading_smoothness.is_finite()) {
            return bad("shading_smoothness must be positive and finite");
        }
        Ok(())
    }
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn voronoi(size: usize, sites: &[(f64, f64)]) -> Vec<u32> {
    let mut labels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut best = (f64::INFINITY, 0u32);
            for (i, &(sx, sy)) in sites.iter().enumerate() {
                let d = (px - sx).powi(2) + (py - sy).powi(2);
                if d < best.0 {
                    best = (d, i as u32);
                }
            }
            labels.push(best.1);
        }
    }
    labels
}

fn shading_field(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = cfg.size;
    if cfg.flat_shading {
        return vec![1.0; n * n];
    }
    let noise: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
    let smooth = gaussian_blur(&noise, n, n, cfg.shading_smoothness);
    let lo = smooth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = smooth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (a, b) = (SHADING_RANGE.0 as f64, SHADING_RANGE.1 as f64);
    smooth.iter().map(|&v| if hi - lo < 1e-12 { 1.0 } else { (a + (b - a) * (v - lo) / (hi - lo)) as f32 }).collect()
}

fn apply_shadow(cfg: &SynthConfig, rng: &mut ChaCha8Rng, shading: &mut [f32]) {
    let n = cfg.size as f64;
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (ox, oy) = (rng.random_range(0.25 * n..0.75 * n), rng.random_range(0.25 * n..0.75 * n));
    let (c, s) = (theta.cos(), theta.sin());
    let att = cfg.shadow_attenuation;
    for (i, v) in shading.iter_mut().enumerate() {
        let (x, y) = ((i % cfg.size) as f64 + 0.5, (i / cfg.size) as f64 + 0.5);
        let d = (x - ox) * c + (y - oy) * s;
        let t = ((d + PENUMBRA) / (2.0 * PENUMBRA)).clamp(0.0, 1.0);
        *v *= (att + (1.0 - att) * t) as f32;
    }
}

/// Renders scene `index`. Deterministic in `(cfg, index)`.
pub fn sample_scene(cfg: &SynthConfig, index: u64) -> Result<IntrinsicSample, SynthError> {
    cfg.validate()?;
    let n = cfg.size;
    let mut rng = scene_rng(cfg.seed, index);

    let sites: Vec<(f64, f64)> =
        (0..cfg.n_regions).map(|_| (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64))).collect();
    let colors: Vec<[f32; 3]> = (0..cfg.n_regions)
        .map(|_| std::array::from_fn(|_| rng.random_range(ALBEDO_RANGE.0..=ALBEDO_RANGE.1)))
        .collect();
    let classes: Vec<SegmentClass> = (0..cfg.n_regions)
        .map(|_| {
            if rng.random_bool(cfg.wall_ceiling_prob) {
                if rng.random_bool(0.5) {
                    SegmentClass::Wall
                } else {
                    SegmentClass::Ceiling
                }
            } else {
                SegmentClass::Other
            }
        })
        .collect();

    let raw = voronoi(n, &sites);
    let mut shading = shading_field(cfg, &mut rng);
    if rng.random_bool(cfg.shadow_prob) {
        apply_shadow(cfg, &mut rng, &mut shading);
    }

    let reflectance = ImageRGB::new(n, n, raw.iter().flat_map(|&l| colors[l as usize]).collect())?;
    let shading = GrayImage::new(n, n, shading)?;
    let image = reflectance.modulate(&shading)?.map(|v| v.clamp(0.0, 1.0));
    let segments = SegmentMap::from_raw(n, n, &raw, |site| Some(classes[site as usize]))?;
    Ok(IntrinsicSample::new(image, reflectance, shading, segments)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// 80/10/10 assignment by index, each share rounded down; the test split
    /// takes the remainder.
    pub fn assign(index: usize, count: usize) -> Split {
        let train = count * 8 / 10;
        let val = count / 10;
        if index < train {
            Split::Train
        } else if index < train + val {
            Split::Val
        } else {
            Split::Test
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub index: u64,
    pub image: String,
    pub reflectance: String,
    pub shading: String,
    pub segments: String,
    pub split: Split,
}

/// Dataset index written next to the samples; paths are relative to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub samples: Vec<ManifestEntry>,
    pub config: SynthConfig,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SynthError::Io { path: path.into(), source })?;
        let mut m: Manifest = serde_json::from_str(&text)
            .map_err(|e| SynthError::Manifest { path: path.into(), detail: e.to_string() })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.samples.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Reads one sample back: image from PNG, ground truth from PFM.
    pub fn load_sample(&self, entry: &ManifestEntry) -> Result<IntrinsicSample, SynthError> {
        let image = load_png(self.resolve(&entry.image))?;
        let reflectance = load_pfm(self.resolve(&entry.reflectance))?
            .into_rgb()
            .ok_or_else(|| self.bad(entry, "reflectance PFM is not colour"))?;
        let shading = load_pfm(self.resolve(&entry.shading))?
            .into_gray()
            .ok_or_else(|| self.bad(entry, "shading PFM is not gray"))?;
        let segments = load_segments(self.resolve(&entry.segments))?;
        Ok(IntrinsicSample::new(image, reflectance, shading, segments)?)
    }

    fn bad(&self, entry: &ManifestEntry, detail: &str) -> SynthError {
        SynthError::Manifest { path: self.resolve(&entry.image), detail: detail.into() }
    }
}

/// Writes `count` scenes plus `manifest.json` into `out_dir`.
pub fn generate_dataset(cfg: &SynthConfig, count: usize, out_dir: impl AsRef<Path>) -> Result<Manifest, SynthError> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|source| SynthError::Io { path: out_dir.into(), source })?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let scene = sample_scene(cfg, i as u64)?;
        let stem = format!("scene_{i:05}");
        let entry = ManifestEntry {
            index: i as u64,
            image: format!("{stem}.png"),
            reflectance: format!("{stem}.reflectance.pfm"),
            shading: format!("{stem}.shading.pfm"),
            segments: format!("{stem}.segments.png"),
            split: Split::assign(i, count),
        };
        save_png(&scene.image, out_dir.join(&entry.image))?;
        save_pfm(&scene.reflectance, out_dir.join(&entry.reflectance))?;
        save_pfm(&scene.shading, out_dir.join(&entry.shading))?;
        save_segments(&scene.segments, out_dir.join(&entry.segments))?;
        samples.push(entry);
    }
    let manifest = Manifest { samples, config: cfg.clone(), root: out_dir.to_path_buf() };
    let path = out_dir.join(MANIFEST_NAME);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, json + "\n").map_err(|source| SynthError::Io { path, source })?;
    Ok(manifest)
}
