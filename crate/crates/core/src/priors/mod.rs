//! Physics and statistics priors computed from an image and its segments.
//!
//! * Cross colour ratios between neighbouring pixels. For pixels `p1`, `p2`
//!   the ratio `R(p1) G(p2) / (R(p2) G(p1))` cancels any illumination factor
//!   that scales all channels of a pixel equally, so the ratios only respond
//!   to reflectance transitions.
//! * A reflectance estimate that spreads each segment's mean colour over the
//!   segment, and the shading estimate obtained by inverting `I = R * S`.
//! * Normalised RGB (chromaticity).
//! * The Canny edge pyramid used as supervision for the edge decoder.

pub(crate) mod canny;

pub use canny::{canny, canny_edge_pyramid, CannyParams, EdgePyramid};

use crate::image::{GrayImage, ImageError, ImageRGB, SegmentMap};

pub const DEFAULT_EPS: f32 = 1e-4;
/// Upper clamp for the inverse shading estimate.
pub const MAX_SHADING_ESTIMATE: f32 = 10.0;

#[derive(Debug, thiserror::Error)]
pub enum PriorError {
    #[error("edge detection needs at least 16x16 pixels, got {height}x{width}")]
    DegenerateImage { height: usize, width: usize },
    #[error("invalid canny parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Neighbour direction used for a ratio.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Right,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::Right, Direction::Down];
}

/// Ratio maps for one channel pair, one raster per neighbour direction.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioPair {
    pub right: GrayImage,
    pub down: GrayImage,
}

impl RatioPair {
    pub fn get(&self, dir: Direction) -> &GrayImage {
        match dir {
            Direction::Right => &self.right,
            Direction::Down => &self.down,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CcrMaps {
    pub m_rg: RatioPair,
    pub m_rb: RatioPair,
    pub m_gb: RatioPair,
    /// Sum over directions and channel pairs of `|ln m|`.
    pub strength: GrayImage,
}

impl CcrMaps {
    /// The six ratio rasters in channel order `rg→, rg↓, rb→, rb↓, gb→, gb↓`.
    pub fn ratio_maps(&self) -> [&GrayImage; 6] {
        [&self.m_rg.right, &self.m_rg.down, &self.m_rb.right, &self.m_rb.down, &self.m_gb.right, &self.m_gb.down]
    }
}

/// The three cross colour ratios between `p1` and `p2`, channels clamped
/// below at `eps`. Evaluated in `f64`.
pub fn cross_ratios(p1: [f32; 3], p2: [f32; 3], eps: f32) -> [f64; 3] {
    let e = eps as f64;
    let a = p1.map(|v| (v as f64).max(e));
    let b = p2.map(|v| (v as f64).max(e));
    [(a[0] * b[1]) / (b[0] * a[1]), (a[0] * b[2]) / (b[0] * a[2]), (a[1] * b[2]) / (b[1] * a[2])]
}

/// Cross colour ratios against the right and lower neighbour. Border pixels
/// use themselves as neighbour, which yields ratio 1.
pub fn ccr_maps(img: &ImageRGB, eps: f32) -> CcrMaps {
    assert!(eps > 0.0, "eps must be positive");
    let (h, w) = (img.height(), img.width());
    let mut maps: [Vec<f32>; 6] = std::array::from_fn(|_| vec![0.0; h * w]);
    let mut strength = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let p1 = img.get(y, x);
            let idx = y * w + x;
            let mut s = 0.0f64;
            for (d, (ny, nx)) in [(y, (x + 1).min(w - 1)), ((y + 1).min(h - 1), x)].into_iter().enumerate() {
                let ratios = cross_ratios(p1, img.get(ny, nx), eps);
                for (pair, m) in ratios.iter().enumerate() {
                    maps[pair * 2 + d][idx] = *m as f32;
                    s += m.ln().abs();
                }
            }
            strength[idx] = s as f32;
        }
    }
    let [rg_r, rg_d, rb_r, rb_d, gb_r, gb_d] = maps;
    let gray = |data| GrayImage::new(h, w, data).expect("finite ratios");
    CcrMaps {
        m_rg: RatioPair { right: gray(rg_r), down: gray(rg_d) },
        m_rb: RatioPair { right: gray(rb_r), down: gray(rb_d) },
        m_gb: RatioPair { right: gray(gb_r), down: gray(gb_d) },
        strength: gray(strength),
    }
}

fn check_covers(img: &ImageRGB, seg: &SegmentMap) -> Result<(), ImageError> {
    if (img.height(), img.width()) != (seg.height(), seg.width()) {
        return Err(ImageError::SizeMismatch(format!(
            "image {}x{} vs segments {}x{}",
            img.height(),
            img.width(),
            seg.height(),
            seg.width()
        )));
    }
    Ok(())
}

/// Per-segment channel means.
pub fn segment_means(img: &ImageRGB, seg: &SegmentMap) -> Result<Vec<[f32; 3]>, ImageError> {
    check_covers(img, seg)?;
    let mut sums = vec![[0.0f64; 3]; seg.num_segments()];
    let mut counts = vec![0usize; seg.num_segments()];
    for (i, &l) in seg.labels().iter().enumerate() {
        let p = img.pixel(i);
        let acc = &mut sums[l as usize];
        for c in 0..3 {
            acc[c] += p[c] as f64;
        }
        counts[l as usize] += 1;
    }
    Ok(sums.iter().zip(&counts).map(|(s, &n)| s.map(|v| (v / n as f64) as f32)).collect())
}

/// Spreads each segment's mean colour over the segment.
pub fn mean_reflectance_estimate(img: &ImageRGB, seg: &SegmentMap) -> Result<ImageRGB, ImageError> {
    let means = segment_means(img, seg)?;
    let data = seg.labels().iter().flat_map(|&l| means[l as usize]).collect();
    ImageRGB::new(img.height(), img.width(), data)
}

/// `s(p) = mean_c I_c(p) / max(R_c(p), eps)`, clamped to `[0, 10]`.
pub fn inverse_shading_estimate(img: &ImageRGB, r_est: &ImageRGB, eps: f32) -> Result<GrayImage, ImageError> {
    assert!(eps > 0.0, "eps must be positive");
    if (img.height(), img.width()) != (r_est.height(), r_est.width()) {
        return Err(ImageError::SizeMismatch("image vs reflectance estimate".into()));
    }
    let data = img
        .data()
        .chunks_exact(3)
        .zip(r_est.data().chunks_exact(3))
        .map(|(i, r)| {
            let s: f64 = (0..3).map(|c| i[c] as f64 / (r[c].max(eps) as f64)).sum::<f64>() / 3.0;
            (s as f32).clamp(0.0, MAX_SHADING_ESTIMATE)
        })
        .collect();
    GrayImage::new(img.height(), img.width(), data)
}

/// Chromaticity `c / max(R + G + B, eps)` per pixel.
pub fn normalized_rgb(img: &ImageRGB, eps: f32) -> ImageRGB {
    assert!(eps > 0.0, "eps must be positive");
    let data = img
        .data()
        .chunks_exact(3)
        .flat_map(|p| {
            let sum = (p[0] + p[1] + p[2]).max(eps);
            [p[0] / sum, p[1] / sum, p[2] / sum]
        })
        .collect();
    ImageRGB::new(img.height(), img.width(), data).expect("finite chromaticity")
}

/// All priors for one image. The edge pyramid is only present when ground
/// truth reflectance was supplied.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorBundle {
    pub ccr: CcrMaps,
    pub r_est: ImageRGB,
    pub s_est: GrayImage,
    pub nrgb: ImageRGB,
    pub edge_pyramid: Option<EdgePyramid>,
}

impl PriorBundle {
    pub fn compute(
        img: &ImageRGB,
        seg: &SegmentMap,
        gt_reflectance: Option<&ImageRGB>,
        eps: f32,
    ) -> Result<Self, PriorError> {
        let ccr = ccr_maps(img, eps);
        let r_est = mean_reflectance_estimate(img, seg)?;
        let s_est = inverse_shading_estimate(img, &r_est, eps)?;
        let nrgb = normalized_rgb(img, eps);
        let edge_pyramid = gt_reflectance.map(|r| canny_edge_pyramid(r, &CannyParams::default())).transpose()?;
        Ok(Self { ccr, r_est, s_est, nrgb, edge_pyramid })
    }
}
