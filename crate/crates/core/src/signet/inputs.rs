use super::SignetError;
use crate::autodiff::{Scalar, Tensor};
use crate::image::{GrayImage, ImageRGB, SegmentClass, SegmentMap};
use crate::priors::{canny, CannyParams, PriorBundle};

/// One-hot channels for segment labels; larger labels share the last one.
pub const SEMANTIC_LABELS: usize = 16;
pub const SEMANTIC_CHANNELS: usize = SEMANTIC_LABELS + 2;
pub const CCR_CHANNELS: usize = 7;

/// Network inputs for one image, as channel-major planes.
#[derive(Clone, Debug, PartialEq)]
pub struct InputPlanes {
    pub size: usize,
    pub image: Vec<f32>,
    pub semantic: Vec<f32>,
    pub ccr: Vec<f32>,
    pub r_est: Vec<f32>,
    pub s_est: Vec<f32>,
    /// Edge map of the input image itself, used by the image-edges variant.
    pub image_edges: Vec<f32>,
}

fn planes(img: &ImageRGB) -> Vec<f32> {
    (0..3).flat_map(|c| img.channel(c)).collect()
}

fn check(what: &str, h: usize, w: usize, size: usize) -> Result<(), SignetError> {
    if h != size || w != size {
        return Err(SignetError::SizeMismatch(format!("{what} is {h}x{w}, expected {size}x{size}")));
    }
    Ok(())
}

/// Assembles the five encoder inputs (plus the image edge map) for one
/// square image.
pub fn make_inputs(image: &ImageRGB, seg: &SegmentMap, bundle: &PriorBundle) -> Result<InputPlanes, SignetError> {
    let size = image.height();
    check("image", image.height(), image.width(), size)?;
    check("segment map", seg.height(), seg.width(), size)?;
    check("reflectance estimate", bundle.r_est.height(), bundle.r_est.width(), size)?;
    check("shading estimate", bundle.s_est.height(), bundle.s_est.width(), size)?;
    check("ccr maps", bundle.ccr.strength.height(), bundle.ccr.strength.width(), size)?;
    let n = size * size;

    let mut semantic = vec![0.0f32; SEMANTIC_CHANNELS * n];
    for (i, &l) in seg.labels().iter().enumerate() {
        let ch = (l as usize).min(SEMANTIC_LABELS - 1);
        semantic[ch * n + i] = 1.0;
        match seg.class_at(i) {
            SegmentClass::Wall => semantic[SEMANTIC_LABELS * n + i] = 1.0,
            SegmentClass::Ceiling => semantic[(SEMANTIC_LABELS + 1) * n + i] = 1.0,
            SegmentClass::Other => {}
        }
    }

    let mut ccr = Vec::with_capacity(CCR_CHANNELS * n);
    for m in bundle.ccr.ratio_maps() {
        ccr.extend(m.data().iter().map(|v| v.ln()));
    }
    ccr.extend_from_slice(bundle.ccr.strength.data());

    let edges = canny(&image.luminance(), &CannyParams::default())?;
    Ok(InputPlanes {
        size,
        image: planes(image),
        semantic,
        ccr,
        r_est: planes(&bundle.r_est),
        s_est: bundle.s_est.data().to_vec(),
        image_edges: edges.into_data(),
    })
}

/// Batched network inputs.
#[derive(Clone, Debug)]
pub struct NetInputs<S: Scalar = f32> {
    pub image: Tensor<S>,
    pub semantic: Tensor<S>,
    pub ccr: Tensor<S>,
    pub r_est: Tensor<S>,
    pub s_est: Tensor<S>,
    pub image_edges: Tensor<S>,
}

/// Stacks per-image planes along the batch axis.
pub fn stack<S: Scalar>(items: &[&[f32]], channels: usize, size: usize) -> Tensor<S> {
    let data: Vec<S> = items.iter().flat_map(|p| p.iter().map(|v| S::lit(*v as f64))).collect();
    Tensor::new([items.len(), channels, size, size], data)
}

impl<S: Scalar> NetInputs<S> {
    pub fn batch(items: &[&InputPlanes]) -> Result<Self, SignetError> {
        let size = items.first().ok_or_else(|| SignetError::SizeMismatch("empty batch".into()))?.size;
        if let Some(p) = items.iter().find(|p| p.size != size) {
            return Err(SignetError::SizeMismatch(format!("batch mixes sizes {size} and {}", p.size)));
        }
        let get = |f: fn(&InputPlanes) -> &Vec<f32>, c| {
            stack(&items.iter().map(|p| f(p).as_slice()).collect::<Vec<_>>(), c, size)
        };
        Ok(Self {
            image: get(|p| &p.image, 3),
            semantic: get(|p| &p.semantic, SEMANTIC_CHANNELS),
            ccr: get(|p| &p.ccr, CCR_CHANNELS),
            r_est: get(|p| &p.r_est, 3),
            s_est: get(|p| &p.s_est, 1),
            image_edges: get(|p| &p.image_edges, 1),
        })
    }
}

/// Channel-major planes of an RGB image.
pub fn rgb_planes(img: &ImageRGB) -> Vec<f32> {
    planes(img)
}

/// Converts the first image of a `[N, 3, H, W]` tensor back to an image.
pub fn tensor_to_rgb<S: Scalar>(t: &Tensor<S>, index: usize) -> ImageRGB {
    let [_, c, h, w] = t.shape();
    assert_eq!(c, 3, "expected an RGB tensor");
    let v = t.value();
    let base = index * 3 * h * w;
    ImageRGB::from_fn(h, w, |y, x| std::array::from_fn(|ch| v[base + ch * h * w + y * w + x].as_f64() as f32))
}

pub fn tensor_to_gray<S: Scalar>(t: &Tensor<S>, index: usize) -> GrayImage {
    let [_, c, h, w] = t.shape();
    assert_eq!(c, 1, "expected a single-channel tensor");
    let v = t.value();
    GrayImage::from_fn(h, w, |y, x| v[index * h * w + y * w + x].as_f64() as f32)
}
