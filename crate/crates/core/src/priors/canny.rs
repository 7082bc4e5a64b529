use super::PriorError;
use crate::image::{GrayImage, ImageRGB};

/// Canny settings. Thresholds are fractions of the image's largest gradient
/// magnitude, so they live in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CannyParams {
    pub sigma: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self { sigma: 1.4, lo: 0.1, hi: 0.2 }
    }
}

/// Binary edge maps at full, half and quarter resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgePyramid {
    pub full: GrayImage,
    pub half: GrayImage,
    pub quarter: GrayImage,
}

impl EdgePyramid {
    pub fn levels(&self) -> [&GrayImage; 3] {
        [&self.full, &self.half, &self.quarter]
    }
}

/// Gradient magnitudes below this are treated as a flat image.
const FLAT_MAGNITUDE: f64 = 1e-6;
const REBINARIZE: f32 = 0.25;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable blur with edge replication.
pub(crate) fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] =
                k.iter().enumerate().map(|(i, kv)| kv * src[y * w + clamp(x as isize + i as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] =
                k.iter().enumerate().map(|(i, kv)| kv * tmp[clamp(y as isize + i as isize - r, h) * w + x]).sum();
        }
    }
    out
}

/// Binary Canny edges of `gray`: blur, Sobel, non-maximum suppression,
/// double threshold with hysteresis (8-connected).
pub fn canny(gray: &GrayImage, params: &CannyParams) -> Result<GrayImage, PriorError> {
    let (h, w) = (gray.height(), gray.width());
    if h.min(w) < 16 {
        return Err(PriorError::DegenerateImage { height: h, width: w });
    }
    if !(params.sigma > 0.0) || !(0.0 <= params.lo && params.lo < params.hi && params.hi <= 1.0) {
        return Err(PriorError::InvalidParams(format!("{params:?}")));
    }
    let src: Vec<f64> = gray.data().iter().map(|&v| v as f64).collect();
    let blurred = gaussian_blur(&src, h, w, params.sigma);

    let at =
        |y: isize, x: isize| blurred[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let mut mag = vec![0.0f64; h * w];
    let mut gx = vec![0.0f64; h * w];
    let mut gy = vec![0.0f64; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let dx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let dy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let i = y as usize * w + x as usize;
            gx[i] = dx;
            gy[i] = dy;
            mag[i] = dx.hypot(dy);
        }
    }
    let max = mag.iter().copied().fold(0.0, f64::max);
    if max < FLAT_MAGNITUDE {
        return Ok(GrayImage::zeros(h, w));
    }

    let m = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0f64; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            if mag[i] == 0.0 {
                continue;
            }
            // quantize the gradient direction to 0, 45, 90 or 135 degrees
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            let (oy, ox) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let (a, b) = (m(y + oy, x + ox), m(y - oy, x - ox));
            if mag[i] > a && mag[i] >= b {
                thin[i] = mag[i];
            }
        }
    }

    let (lo, hi) = (params.lo * max, params.hi * max);
    let mut edges = vec![0.0f32; h * w];
    let mut stack: Vec<usize> = (0..h * w).filter(|&i| thin[i] >= hi).collect();
    for &i in &stack {
        edges[i] = 1.0;
    }
    while let Some(i) = stack.pop() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for ny in y - 1..=y + 1 {
            for nx in x - 1..=x + 1 {
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if edges[j] == 0.0 && thin[j] >= lo && thin[j] > 0.0 {
                    edges[j] = 1.0;
                    stack.push(j);
                }
            }
        }
    }
    Ok(GrayImage::new(h, w, edges)?)
}

fn rebinarize(img: GrayImage) -> GrayImage {
    img.map(|v| if v >= REBINARIZE { 1.0 } else { 0.0 })
}

/// Canny on the luminance of `reflectance`, plus area-downsampled copies at
/// 1/2 and 1/4 resolution re-binarized at 0.25.
pub fn canny_edge_pyramid(reflectance: &ImageRGB, params: &CannyParams) -> Result<EdgePyramid, PriorError> {
    let full = canny(&reflectance.luminance(), params)?;
    let half = rebinarize(full.area_downsample(2));
    let quarter = rebinarize(full.area_downsample(4));
    Ok(EdgePyramid { full, half, quarter })
}
