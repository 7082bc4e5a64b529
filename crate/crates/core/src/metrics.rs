//! Evaluation metrics: scale-invariant MSE, local MSE, DSSIM and WHDR.
//!
//! Everything here is plain `f64` arithmetic on finished images; none of it
//! builds a graph. The DSSIM here is a direct-window implementation kept
//! separate from the separable one in [`crate::losses`] so each can check
//! the other.

use crate::image::{GrayImage, ImageRGB, Pfm};
use crate::signet::{SigNet, SignetError};
use crate::synth::{Manifest, Split, SynthError};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
pub const WHDR_DELTA: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("shape mismatch: prediction is {pred:?}, ground truth is {gt:?} (height, width, channels)")]
    ShapeMismatch { pred: (usize, usize, usize), gt: (usize, usize, usize) },
    #[error("{window}x{window} window does not fit a {height}x{width} image")]
    WindowLargerThanImage { window: usize, height: usize, width: usize },
    #[error("judgment set is empty")]
    EmptyJudgments,
    #[error("judgment weights sum to zero")]
    ZeroTotalWeight,
    #[error("invalid judgment {index}: {detail}")]
    InvalidJudgment { index: usize, detail: String },
    #[error("split {0:?} has no samples")]
    EmptySplit(Split),
    #[error("I/O failure on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed judgments {path}: {detail}")]
    Json { path: PathBuf, detail: String },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Signet(#[from] SignetError),
}

fn dims(img: &impl Pfm) -> (usize, usize, usize) {
    let (h, w) = img.dims();
    (h, w, img.channels())
}

fn same_shape(pred: &impl Pfm, gt: &impl Pfm) -> Result<(), MetricError> {
    if dims(pred) != dims(gt) {
        return Err(MetricError::ShapeMismatch { pred: dims(pred), gt: dims(gt) });
    }
    Ok(())
}

/// Least-squares scale `⟨p,g⟩/⟨p,p⟩`, zero for an all-zero prediction.
fn best_scale(p: &[f64], g: &[f64]) -> f64 {
    let pp: f64 = p.iter().map(|v| v * v).sum();
    if pp == 0.0 {
        return 0.0;
    }
    p.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / pp
}

/// `Σ (α·p − g)²` at the optimal scale.
fn scaled_sse(p: &[f64], g: &[f64]) -> f64 {
    let a = best_scale(p, g);
    p.iter().zip(g).map(|(x, y)| (a * x - y).powi(2)).sum()
}

fn as_f64(img: &impl Pfm) -> Vec<f64> {
    img.samples().iter().map(|&v| v as f64).collect()
}

/// Scale-invariant MSE over all samples and channels jointly.
pub fn si_mse(pred: &impl Pfm, gt: &impl Pfm) -> Result<f64, MetricError> {
    same_shape(pred, gt)?;
    let (p, g) = (as_f64(pred), as_f64(gt));
    Ok(scaled_sse(&p, &g) / p.len().max(1) as f64)
}

/// Plain mean squared error.
pub fn mse(pred: &impl Pfm, gt: &impl Pfm) -> Result<f64, MetricError> {
    same_shape(pred, gt)?;
    let n = pred.samples().len().max(1) as f64;
    Ok(pred.samples().iter().zip(gt.samples()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / n)
}

/// Default LMSE window: a quarter of the shorter side, at least 8.
pub fn lmse_window(height: usize, width: usize) -> usize {
    (height.min(width) / 4).max(8)
}

/// Local scale-invariant MSE over half-overlapping `k×k` windows,
/// normalized by ground-truth energy in the same windows and averaged over
/// channels. `window = None` uses [`lmse_window`].
pub fn lmse(pred: &impl Pfm, gt: &impl Pfm, window: Option<usize>) -> Result<f64, MetricError> {
    same_shape(pred, gt)?;
    let (h, w, c) = dims(gt);
    let k = window.unwrap_or_else(|| lmse_window(h, w));
    if k == 0 || k > h || k > w {
        return Err(MetricError::WindowLargerThanImage { window: k, height: h, width: w });
    }
    let stride = (k / 2).max(1);
    let (ps, gs) = (pred.samples(), gt.samples());
    let mut total = 0.0;
    let mut pw = Vec::with_capacity(k * k);
    let mut gw = Vec::with_capacity(k * k);
    for ch in 0..c {
        let (mut num, mut den) = (0.0, 0.0);
        for y0 in (0..=h - k).step_by(stride) {
            for x0 in (0..=w - k).step_by(stride) {
                pw.clear();
                gw.clear();
                for y in y0..y0 + k {
                    for x in x0..x0 + k {
                        let i = (y * w + x) * c + ch;
                        pw.push(ps[i] as f64);
                        gw.push(gs[i] as f64);
                    }
                }
                num += scaled_sse(&pw, &gw);
                den += gw.iter().map(|v| v * v).sum::<f64>();
            }
        }
        total += if den > 0.0 { num / den } else { 0.0 };
    }
    Ok(total / c as f64)
}

fn ssim_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut k = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            k.push((-(di * di + dj * dj) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// `(1 − SSIM) / 2` with an 11×11 Gaussian window (σ 1.5) evaluated only at
/// positions where the window fits, averaged over positions and channels.
/// Sample values are assumed to span `[0, 1]`.
pub fn dssim_metric(pred: &impl Pfm, gt: &impl Pfm) -> Result<f64, MetricError> {
    same_shape(pred, gt)?;
    let (h, w, c) = dims(gt);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::WindowLargerThanImage { window: SSIM_WINDOW, height: h, width: w });
    }
    let win = ssim_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (ps, gs) = (pred.samples(), gt.samples());
    let mut sum = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let k = win[i * SSIM_WINDOW + j];
                        let idx = ((y0 + i) * w + x0 + j) * c + ch;
                        let (a, b) = (ps[idx] as f64, gs[idx] as f64);
                        mx += k * a;
                        my += k * b;
                        sxx += k * a * a;
                        syy += k * b * b;
                        sxy += k * a * b;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    Ok((1.0 - sum / count as f64) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Darker {
    #[serde(rename = "1")]
    First,
    #[serde(rename = "2")]
    Second,
    #[serde(rename = "E")]
    Equal,
}

/// A weighted pairwise lightness judgment between two pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Judgment {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
    pub darker: Darker,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgmentSet {
    pub judgments: Vec<Judgment>,
}

impl JudgmentSet {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, MetricError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| MetricError::Io { path: path.into(), source })?;
        serde_json::from_str(&text).map_err(|e| MetricError::Json { path: path.into(), detail: e.to_string() })
    }

    /// Checks weights and coordinates against an image size.
    pub fn validate(&self, height: usize, width: usize) -> Result<(), MetricError> {
        if self.judgments.is_empty() {
            return Err(MetricError::EmptyJudgments);
        }
        for (index, j) in self.judgments.iter().enumerate() {
            let bad = |detail: String| Err(MetricError::InvalidJudgment { index, detail });
            if !j.weight.is_finite() || j.weight < 0.0 {
                return bad(format!("weight {} is not a finite non-negative number", j.weight));
            }
            for (x, y) in [(j.x1, j.y1), (j.x2, j.y2)] {
                if x >= width || y >= height {
                    return bad(format!("point ({x}, {y}) lies outside {width}x{height}"));
                }
            }
        }
        if self.judgments.iter().map(|j| j.weight).sum::<f64>() == 0.0 {
            return Err(MetricError::ZeroTotalWeight);
        }
        Ok(())
    }
}

/// Mean luminance of the 3×3 patch around `(x, y)`, clipped at the border.
fn patch_luminance(img: &ImageRGB, x: usize, y: usize) -> f64 {
    let (mut sum, mut n) = (0.0, 0);
    for py in y.saturating_sub(1)..=(y + 1).min(img.height() - 1) {
        for px in x.saturating_sub(1)..=(x + 1).min(img.width() - 1) {
            let [r, g, b] = img.get(py, px);
            sum += 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
            n += 1;
        }
    }
    sum / n as f64
}

/// Relation predicted by a reflectance image for one judgment.
pub fn predicted_relation(img: &ImageRGB, j: &Judgment, delta: f64) -> Darker {
    let l1 = patch_luminance(img, j.x1, j.y1);
    let l2 = patch_luminance(img, j.x2, j.y2);
    let ratio = l1 / l2.max(1e-6);
    if ratio > 1.0 + delta {
        Darker::Second
    } else if ratio < 1.0 / (1.0 + delta) {
        Darker::First
    } else {
        Darker::Equal
    }
}

/// Weighted human disagreement rate of a reflectance prediction.
pub fn whdr(pred: &ImageRGB, set: &JudgmentSet, delta: f64) -> Result<f64, MetricError> {
    set.validate(pred.height(), pred.width())?;
    let (mut wrong, mut total) = (0.0, 0.0);
    for j in &set.judgments {
        if predicted_relation(pred, j, delta) != j.darker {
            wrong += j.weight;
        }
        total += j.weight;
    }
    Ok(wrong / total)
}

/// Reflectance and shading scores for one image, or their mean.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Scale-invariant.
    pub mse_r: f64,
    pub lmse_r: f64,
    pub dssim_r: f64,
    pub mse_s: f64,
    pub lmse_s: f64,
    pub dssim_s: f64,
    pub plain_mse_r: f64,
    pub plain_mse_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub whdr: Option<f64>,
}

impl MetricReport {
    pub fn compute(r: &ImageRGB, s: &GrayImage, gt_r: &ImageRGB, gt_s: &GrayImage) -> Result<Self, MetricError> {
        Ok(Self {
            mse_r: si_mse(r, gt_r)?,
            lmse_r: lmse(r, gt_r, None)?,
            dssim_r: dssim_metric(r, gt_r)?,
            mse_s: si_mse(s, gt_s)?,
            lmse_s: lmse(s, gt_s, None)?,
            dssim_s: dssim_metric(s, gt_s)?,
            plain_mse_r: mse(r, gt_r)?,
            plain_mse_s: mse(s, gt_s)?,
            whdr: None,
        })
    }

    /// Unweighted mean; `whdr` is averaged over the reports that have one.
    pub fn mean(reports: &[MetricReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let whdrs: Vec<f64> = reports.iter().filter_map(|r| r.whdr).collect();
        Self {
            mse_r: avg(|r| r.mse_r),
            lmse_r: avg(|r| r.lmse_r),
            dssim_r: avg(|r| r.dssim_r),
            mse_s: avg(|r| r.mse_s),
            lmse_s: avg(|r| r.lmse_s),
            dssim_s: avg(|r| r.dssim_s),
            plain_mse_r: avg(|r| r.plain_mse_r),
            plain_mse_s: avg(|r| r.plain_mse_s),
            whdr: (!whdrs.is_empty()).then(|| whdrs.iter().sum::<f64>() / whdrs.len() as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub index: u64,
    pub image: String,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    /// Architecture hash of the evaluated model; `None` for the ground
    /// truth pass-through.
    pub arch_hash: Option<String>,
    pub aggregate: MetricReport,
    pub images: Vec<ImageMetrics>,
}

/// Source of the decompositions being scored.
pub enum Predictor<'a> {
    Model(&'a SigNet<f32>),
    /// Feeds the ground truth back as the prediction.
    GroundTruth,
}

/// Scores every sample of `split` and aggregates by unweighted mean.
pub fn evaluate(manifest: &Manifest, split: Split, predictor: &Predictor<'_>) -> Result<EvalReport, MetricError> {
    let entries: Vec<_> = manifest.split(split).collect();
    if entries.is_empty() {
        return Err(MetricError::EmptySplit(split));
    }
    let mut images = Vec::with_capacity(entries.len());
    for e in entries {
        let sample = manifest.load_sample(e)?;
        let metrics = match predictor {
            Predictor::GroundTruth => {
                MetricReport::compute(&sample.reflectance, &sample.shading, &sample.reflectance, &sample.shading)?
            }
            Predictor::Model(net) => {
                let (r, s) = net.decompose(&sample.image, &sample.segments)?;
                MetricReport::compute(&r, &s, &sample.reflectance, &sample.shading)?
            }
        };
        images.push(ImageMetrics { index: e.index, image: e.image.clone(), metrics });
    }
    let aggregate = MetricReport::mean(&images.iter().map(|i| i.metrics.clone()).collect::<Vec<_>>());
    let arch_hash = match predictor {
        Predictor::Model(net) => Some(net.arch_hash()),
        Predictor::GroundTruth => None,
    };
    Ok(EvalReport { split, arch_hash, aggregate, images })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, v: Vec<f32>) -> GrayImage {
        GrayImage::new(h, w, v).unwrap()
    }

    #[test]
    fn si_mse_examples() {
        let g = gray(2, 2, vec![0.1, 0.4, 0.3, 0.9]);
        let p = g.map(|v| 2.0 * v);
        assert!(si_mse(&p, &g).unwrap() < 1e-15);
        let z = gray(2, 2, vec![0.0; 4]);
        let expect = (0.01 + 0.16 + 0.09 + 0.81) / 4.0;
        assert!((si_mse(&z, &g).unwrap() - expect).abs() < 1e-7);
        assert!(matches!(si_mse(&gray(1, 4, vec![0.0; 4]), &g), Err(MetricError::ShapeMismatch { .. })));
    }

    #[test]
    fn lmse_single_window_by_hand() {
        // one 8x8 window: num = Σ(αp − g)², den = Σg²
        let g = GrayImage::from_fn(8, 8, |y, x| 0.1 + 0.01 * (y * 8 + x) as f32);
        let p = GrayImage::from_fn(8, 8, |y, x| if (x + y) % 2 == 0 { 0.5 } else { 0.3 });
        let (pv, gv): (Vec<f64>, Vec<f64>) = p.data().iter().zip(g.data()).map(|(&a, &b)| (a as f64, b as f64)).unzip();
        let a = pv.iter().zip(&gv).map(|(x, y)| x * y).sum::<f64>() / pv.iter().map(|x| x * x).sum::<f64>();
        let num: f64 = pv.iter().zip(&gv).map(|(x, y)| (a * x - y).powi(2)).sum();
        let den: f64 = gv.iter().map(|y| y * y).sum();
        assert!((lmse(&p, &g, None).unwrap() - num / den).abs() < 1e-12);
        let si = si_mse(&p, &g).unwrap();
        assert!((lmse(&p, &g, None).unwrap() - si * 64.0 / den).abs() < 1e-12);
    }

    #[test]
    fn lmse_window_too_large() {
        let g = gray(6, 6, vec![0.5; 36]);
        assert!(matches!(lmse(&g, &g, None), Err(MetricError::WindowLargerThanImage { window: 8, .. })));
    }

    #[test]
    fn whdr_examples() {
        let img = ImageRGB::from_fn(3, 9, |_, x| if x < 3 { [0.2; 3] } else { [0.8; 3] });
        let j = |darker, weight| Judgment { x1: 1, y1: 1, x2: 7, y2: 1, darker, weight };
        let right = JudgmentSet { judgments: vec![j(Darker::First, 1.0)] };
        assert_eq!(whdr(&img, &right, WHDR_DELTA).unwrap(), 0.0);
        let wrong = JudgmentSet { judgments: vec![j(Darker::Second, 1.0)] };
        assert_eq!(whdr(&img, &wrong, WHDR_DELTA).unwrap(), 1.0);
        let mixed = JudgmentSet { judgments: vec![j(Darker::Equal, 0.8), j(Darker::First, 0.2)] };
        assert!((whdr(&img, &mixed, WHDR_DELTA).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(whdr(&img, &JudgmentSet::default(), WHDR_DELTA), Err(MetricError::EmptyJudgments)));
        let zero = JudgmentSet { judgments: vec![j(Darker::First, 0.0)] };
        assert!(matches!(whdr(&img, &zero, WHDR_DELTA), Err(MetricError::ZeroTotalWeight)));
        let out = JudgmentSet { judgments: vec![Judgment { x1: 9, ..j(Darker::First, 1.0) }] };
        assert!(matches!(whdr(&img, &out, WHDR_DELTA), Err(MetricError::InvalidJudgment { .. })));
    }

    #[test]
    fn judgments_json_shape() {
        let text = r#"{"judgments":[{"x1":0,"y1":1,"x2":2,"y2":3,"darker":"E","weight":0.5}]}"#;
        let set: JudgmentSet = serde_json::from_str(text).unwrap();
        assert_eq!(set.judgments[0].darker, Darker::Equal);
        assert_eq!(serde_json::to_string(&set).unwrap(), text);
    }
}
