//! Dense float rasters, segment maps and their file formats.
//!
//! Every raster is row-major with `f32` samples. Colour images interleave
//! their channels (`r, g, b, r, g, b, ...`). All values are treated as
//! linear; no transfer curve is applied on load or save.

mod io;

pub use io::{load_pfm, load_png, load_segments, save_pfm, save_png, save_segments, sidecar_path, Pfm, PfmImage};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("raster dimensions must be at least 1x1, got {height}x{width}")]
    EmptyRaster { height: usize, width: usize },
    #[error("expected {expected} samples, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("raster size mismatch: {0}")]
    SizeMismatch(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("unsupported bit depth in {path}: {detail}")]
    UnsupportedBitDepth { path: PathBuf, detail: String },
    #[error("failed to decode {path}: {detail}")]
    DecodeFailure { path: PathBuf, detail: String },
    #[error("PFM header mismatch in {path}: {detail}")]
    HeaderMismatch { path: PathBuf, detail: String },
    #[error("PFM payload truncated in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload { path: PathBuf, expected: usize, found: usize },
    #[error("segment label {0} does not fit a 16-bit PNG")]
    LabelOverflow(usize),
    #[error("malformed segment sidecar {path}: {detail}")]
    MalformedSidecar { path: PathBuf, detail: String },
    #[error("I/O failure on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn check_dims(height: usize, width: usize, channels: usize, len: usize) -> Result<(), ImageError> {
    if height == 0 || width == 0 {
        return Err(ImageError::EmptyRaster { height, width });
    }
    let expected = height * width * channels;
    if len != expected {
        return Err(ImageError::LengthMismatch { expected, actual: len });
    }
    Ok(())
}

fn check_finite(data: &[f32]) -> Result<(), ImageError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(ImageError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Three-channel float image (input image, reflectance).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRGB {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageRGB {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        check_dims(height, width, 3, data.len())?;
        check_finite(&data)?;
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, [0.0; 3])
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        assert!(height > 0 && width > 0, "empty raster");
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    /// Builds an image by evaluating `f(y, x)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        assert!(height > 0 && width > 0, "empty raster");
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn pixel(&self, index: usize) -> [f32; 3] {
        let i = index * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel `c` as a planar buffer.
    pub fn channel(&self, c: usize) -> Vec<f32> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    /// Applies `f` to every sample; the result must stay finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v)).collect();
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self { height: self.height, width: self.width, data }
    }

    /// Rec. 601 luma, the weighting used by the edge detector and WHDR.
    pub fn luminance(&self) -> GrayImage {
        let data = self.data.chunks_exact(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect();
        GrayImage { height: self.height, width: self.width, data }
    }

    /// Multiplies every channel by the matching shading value.
    pub fn modulate(&self, shading: &GrayImage) -> Result<Self, ImageError> {
        same_size(self.height, self.width, shading.height, shading.width)?;
        let data =
            self.data.chunks_exact(3).zip(&shading.data).flat_map(|(p, &s)| [p[0] * s, p[1] * s, p[2] * s]).collect();
        Ok(Self { height: self.height, width: self.width, data })
    }
}

/// Single-channel float image (shading, edge maps, prior strengths).
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        check_dims(height, width, 1, data.len())?;
        check_finite(&data)?;
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0, "empty raster");
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(height > 0 && width > 0, "empty raster");
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Averages `factor`x`factor` blocks. Trailing rows/columns that do not
    /// fill a whole block are dropped.
    pub fn area_downsample(&self, factor: usize) -> Self {
        assert!(factor >= 1);
        let (h, w) = (self.height / factor, self.width / factor);
        assert!(h > 0 && w > 0, "downsample factor {factor} too large");
        let norm = 1.0 / (factor * factor) as f64;
        Self::from_fn(h, w, |y, x| {
            let mut acc = 0.0f64;
            for dy in 0..factor {
                let row = (y * factor + dy) * self.width;
                for dx in 0..factor {
                    acc += self.data[row + x * factor + dx] as f64;
                }
            }
            (acc * norm) as f32
        })
    }
}

fn same_size(h1: usize, w1: usize, h2: usize, w2: usize) -> Result<(), ImageError> {
    if (h1, w1) != (h2, w2) {
        return Err(ImageError::SizeMismatch(format!("{h1}x{w1} vs {h2}x{w2}")));
    }
    Ok(())
}

/// Semantic class attached to a segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentClass {
    Wall,
    Ceiling,
    Other,
}

impl SegmentClass {
    pub fn is_homogeneous(self) -> bool {
        matches!(self, SegmentClass::Wall | SegmentClass::Ceiling)
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "wall" => Some(Self::Wall),
            "ceiling" => Some(Self::Ceiling),
            "other" => Some(Self::Other),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Wall => "wall",
            Self::Ceiling => "ceiling",
            Self::Other => "other",
        }
    }
}

/// Per-pixel segment labels, contiguous `0..K`, plus one class per label.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    classes: Vec<SegmentClass>,
}

impl SegmentMap {
    /// Relabels `raw` to `0..K` in first-seen (row-major) order. `class_of`
    /// is queried with the original label; `None` means [`SegmentClass::Other`].
    pub fn from_raw(
        height: usize,
        width: usize,
        raw: &[u32],
        mut class_of: impl FnMut(u32) -> Option<SegmentClass>,
    ) -> Result<Self, ImageError> {
        check_dims(height, width, 1, raw.len())?;
        let mut remap: BTreeMap<u32, u32> = BTreeMap::new();
        let mut classes = Vec::new();
        let labels = raw
            .iter()
            .map(|&l| {
                *remap.entry(l).or_insert_with(|| {
                    classes.push(class_of(l).unwrap_or(SegmentClass::Other));
                    (classes.len() - 1) as u32
                })
            })
            .collect();
        Ok(Self { height, width, labels, classes })
    }

    /// Constructs a map whose labels are already contiguous.
    pub fn new(height: usize, width: usize, labels: Vec<u32>, classes: Vec<SegmentClass>) -> Result<Self, ImageError> {
        check_dims(height, width, 1, labels.len())?;
        let mut seen = vec![false; classes.len()];
        for &l in &labels {
            match seen.get_mut(l as usize) {
                Some(s) => *s = true,
                None => {
                    return Err(ImageError::SizeMismatch(format!(
                        "label {l} has no class entry ({} classes)",
                        classes.len()
                    )))
                }
            }
        }
        if let Some(gap) = seen.iter().position(|s| !s) {
            return Err(ImageError::SizeMismatch(format!("label {gap} unused; labels must be contiguous")));
        }
        Ok(Self { height, width, labels, classes })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn classes(&self) -> &[SegmentClass] {
        &self.classes
    }

    pub fn num_segments(&self) -> usize {
        self.classes.len()
    }

    #[inline]
    pub fn label(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn class_at(&self, index: usize) -> SegmentClass {
        self.classes[self.labels[index] as usize]
    }

    /// Pixel count per segment.
    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.classes.len()];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

/// One decomposition example: `image = reflectance * shading`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntrinsicSample {
    pub image: ImageRGB,
    pub reflectance: ImageRGB,
    pub shading: GrayImage,
    pub segments: SegmentMap,
}

impl IntrinsicSample {
    pub fn new(
        image: ImageRGB,
        reflectance: ImageRGB,
        shading: GrayImage,
        segments: SegmentMap,
    ) -> Result<Self, ImageError> {
        let (h, w) = (image.height, image.width);
        same_size(h, w, reflectance.height, reflectance.width)?;
        same_size(h, w, shading.height, shading.width)?;
        same_size(h, w, segments.height, segments.width)?;
        Ok(Self { image, reflectance, shading, segments })
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    /// Largest |image - reflectance * shading| over all samples.
    pub fn composition_error(&self) -> f64 {
        self.image
            .data
            .chunks_exact(3)
            .zip(self.reflectance.data.chunks_exact(3))
            .zip(&self.shading.data)
            .flat_map(|((i, r), &s)| (0..3).map(move |c| (i[c] as f64 - (r[c] * s) as f64).abs()))
            .fold(0.0, f64::max)
    }
}
