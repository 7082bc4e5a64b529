//! Training objectives.
//!
//! All losses are scalar [`Tensor`]s so they can be summed and
//! backpropagated together. [`total_loss`] combines them with
//! [`LossWeights`] and returns a [`LossReport`] alongside the graph.

mod ssim;

pub use ssim::dssim_loss;

use crate::autodiff::{Scalar, Tensor, TensorError};
use crate::image::SegmentMap;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_e: f64,
    pub lambda_i: f64,
    /// Weight of the perceptual term. Kept for the record; that term is
    /// not implemented and always contributes zero.
    pub lambda_p: f64,
    pub lambda_dssim: f64,
    /// Clamp for the channel sum in chromaticity.
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_e: 0.4, lambda_i: 0.5, lambda_p: 0.05, lambda_dssim: 0.4, eps: 1e-4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.lambda_e, self.lambda_i, self.lambda_p, self.lambda_dssim];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(format!("loss weights must be finite and non-negative, got {all:?}"));
        }
        if !(self.eps > 0.0) {
            return Err(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_e: f64,
    pub l_i: f64,
    pub l_f: f64,
    pub l_norm: f64,
    pub l_tv: f64,
    pub l_dssim: f64,
    pub total: f64,
}

impl LossReport {
    /// Weighted sum of the components.
    pub fn combine(w: &LossWeights, l_e: f64, l_i: f64, l_f: f64, l_norm: f64, l_tv: f64, l_dssim: f64) -> Self {
        let total = w.lambda_e * l_e + w.lambda_i * l_i + l_f + l_norm + l_tv + w.lambda_dssim * l_dssim;
        Self { l_e, l_i, l_f, l_norm, l_tv, l_dssim, total }
    }
}

/// Sum of the MSEs between predicted and target edge maps at every scale.
pub fn edge_loss<S: Scalar>(pred: &[&Tensor<S>], target: &[&Tensor<S>]) -> Result<Tensor<S>, TensorError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "edge_loss",
            detail: format!("{} predictions for {} targets", pred.len(), target.len()),
        });
    }
    let mut total = pred[0].mse(target[0])?;
    for (p, t) in pred.iter().zip(target).skip(1) {
        total = total.add(&p.mse(t)?)?;
    }
    Ok(total)
}

pub fn initial_loss<S: Scalar>(
    r: &Tensor<S>,
    s: &Tensor<S>,
    gt_r: &Tensor<S>,
    gt_s: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    r.mse(gt_r)?.add(&s.mse(gt_s)?)
}

/// Repeats a single-channel tensor across three channels.
pub fn gray_to_rgb<S: Scalar>(s: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    if s.shape()[1] != 1 {
        return Err(TensorError::InvalidArgument {
            op: "gray_to_rgb",
            detail: format!("expected 1 channel, got {:?}", s.shape()),
        });
    }
    Tensor::concat(&[s, s, s])
}

/// Reconstruction residual `MSE(r ⊙ s, image)` with `s` broadcast over channels.
pub fn reconstruction_loss<S: Scalar>(
    r: &Tensor<S>,
    s: &Tensor<S>,
    image: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    r.mul(&gray_to_rgb(s)?)?.mse(image)
}

/// `MSE(r, gt_r) + MSE(s, gt_s) + MSE(r ⊙ s, image)`.
pub fn final_loss<S: Scalar>(
    r: &Tensor<S>,
    s: &Tensor<S>,
    gt_r: &Tensor<S>,
    gt_s: &Tensor<S>,
    image: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    r.mse(gt_r)?.add(&s.mse(gt_s)?)?.add(&reconstruction_loss(r, s, image)?)
}

/// Per-pixel chromaticity `c / max(R + G + B, eps)` of a 3-channel tensor.
pub fn chromaticity<S: Scalar>(x: &Tensor<S>, eps: f64) -> Result<Tensor<S>, TensorError> {
    let [n, c, h, w] = x.shape();
    if c != 3 {
        return Err(TensorError::InvalidArgument {
            op: "chromaticity",
            detail: format!("expected 3 channels, got {c}"),
        });
    }
    let plane = h * w;
    let eps = S::lit(eps);
    let xv = x.value();
    let mut denom = vec![S::zero(); n * plane];
    let mut out = vec![S::zero(); xv.len()];
    for b in 0..n {
        let base = b * 3 * plane;
        for i in 0..plane {
            let sum = xv[base + i] + xv[base + plane + i] + xv[base + 2 * plane + i];
            let d = if sum > eps { sum } else { eps };
            denom[b * plane + i] = d;
            for ch in 0..3 {
                out[base + ch * plane + i] = xv[base + ch * plane + i] / d;
            }
        }
    }
    drop(xv);
    Ok(Tensor::from_op(
        x.shape(),
        out,
        vec![x.clone()],
        Box::new(move |bw| {
            let (g, y) = (bw.grad, bw.output);
            let mut dx = vec![S::zero(); g.len()];
            for b in 0..n {
                let base = b * 3 * plane;
                for i in 0..plane {
                    let d = denom[b * plane + i];
                    let idx = [base + i, base + plane + i, base + 2 * plane + i];
                    let clamped = d == eps;
                    // d y_c / d x_k = (δ_ck − y_c) / d when the sum is unclamped
                    let gy: S = if clamped { S::zero() } else { idx.iter().map(|&j| g[j] * y[j]).sum() };
                    for &j in &idx {
                        dx[j] = (g[j] - gy) / d;
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Chromaticity of every pixel of a constant image tensor, as plain values.
fn chromaticity_values<S: Scalar>(x: &Tensor<S>, eps: f64) -> Result<Vec<S>, TensorError> {
    crate::autodiff::no_grad(|| chromaticity(&x.detach(), eps).map(|t| t.to_vec()))
}

fn check_segments<S: Scalar>(op: &'static str, x: &Tensor<S>, segs: &[SegmentMap]) -> Result<(), TensorError> {
    let [n, _, h, w] = x.shape();
    if segs.len() != n || segs.iter().any(|s| s.height() != h || s.width() != w) {
        return Err(TensorError::InvalidArgument {
            op,
            detail: format!("{} segment maps for batch {:?}", segs.len(), x.shape()),
        });
    }
    Ok(())
}

/// Chromaticity consistency between the predicted reflectance and the
/// image. Within each segment the squared chromaticity error is averaged
/// over pixels and channels; segment terms are summed, then averaged over
/// the batch.
pub fn norm_invariance_loss<S: Scalar>(
    r: &Tensor<S>,
    image: &Tensor<S>,
    segs: &[SegmentMap],
    eps: f64,
) -> Result<Tensor<S>, TensorError> {
    if r.shape() != image.shape() {
        return Err(TensorError::ShapeMismatch { op: "norm_invariance_loss", lhs: r.shape(), rhs: image.shape() });
    }
    check_segments("norm_invariance_loss", r, segs)?;
    let [n, _, h, w] = r.shape();
    let plane = h * w;
    let target = chromaticity_values(image, eps)?;
    let mut weights = vec![S::zero(); r.numel()];
    for (b, seg) in segs.iter().enumerate() {
        let sizes = seg.segment_sizes();
        for (i, &l) in seg.labels().iter().enumerate() {
            let wgt = S::lit(1.0 / (3.0 * sizes[l as usize] as f64 * n as f64));
            for ch in 0..3 {
                weights[(b * 3 + ch) * plane + i] = wgt;
            }
        }
    }
    chromaticity(r, eps)?.weighted_sq_err(&target, &weights)
}

/// For every pixel, whether its right and lower neighbours lie in the same
/// wall or ceiling segment, plus whether the pixel itself is such a pixel.
struct TvMask {
    right: Vec<bool>,
    down: Vec<bool>,
    inside: Vec<bool>,
}

fn tv_mask(seg: &SegmentMap) -> TvMask {
    let (h, w) = (seg.height(), seg.width());
    let labels = seg.labels();
    let homog = |i: usize| seg.classes()[labels[i] as usize].is_homogeneous();
    let mut m = TvMask { right: vec![false; h * w], down: vec![false; h * w], inside: vec![false; h * w] };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !homog(i) {
                continue;
            }
            m.inside[i] = true;
            m.right[i] = x + 1 < w && labels[i + 1] == labels[i];
            m.down[i] = y + 1 < h && labels[i + w] == labels[i];
        }
    }
    m
}

/// Anisotropic total variation `|∂x| + |∂y|` per pixel and channel with
/// forward differences, counting only neighbour pairs inside one wall or
/// ceiling segment.
fn masked_tv<S: Scalar>(x: &Tensor<S>, masks: std::rc::Rc<Vec<TvMask>>) -> Tensor<S> {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let xv = x.value();
    let mut out = vec![S::zero(); xv.len()];
    for b in 0..n {
        let m = &masks[b];
        for ch in 0..c {
            let p = &xv[(b * c + ch) * plane..][..plane];
            let o = &mut out[(b * c + ch) * plane..][..plane];
            for i in 0..plane {
                if m.right[i] {
                    o[i] += (p[i + 1] - p[i]).abs();
                }
                if m.down[i] {
                    o[i] += (p[i + w] - p[i]).abs();
                }
            }
        }
    }
    drop(xv);
    Tensor::from_op(
        x.shape(),
        out,
        vec![x.clone()],
        Box::new(move |bw| {
            let xv = bw.inputs[0].value();
            let mut dx = vec![S::zero(); xv.len()];
            let sign = |d: S| {
                if d > S::zero() {
                    S::one()
                } else if d < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                }
            };
            for b in 0..n {
                let m = &masks[b];
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    for i in 0..plane {
                        let g = bw.grad[base + i];
                        if m.right[i] {
                            let s = sign(xv[base + i + 1] - xv[base + i]) * g;
                            dx[base + i + 1] += s;
                            dx[base + i] -= s;
                        }
                        if m.down[i] {
                            let s = sign(xv[base + i + w] - xv[base + i]) * g;
                            dx[base + i + w] += s;
                            dx[base + i] -= s;
                        }
                    }
                }
            }
            vec![Some(dx)]
        }),
    )
}

/// MSE between the masked total variation of the prediction and of the
/// ground truth over wall and ceiling pixels. Zero when there are none.
pub fn tv_loss<S: Scalar>(r: &Tensor<S>, gt_r: &Tensor<S>, segs: &[SegmentMap]) -> Result<Tensor<S>, TensorError> {
    if r.shape() != gt_r.shape() {
        return Err(TensorError::ShapeMismatch { op: "tv_loss", lhs: r.shape(), rhs: gt_r.shape() });
    }
    check_segments("tv_loss", r, segs)?;
    let [n, c, h, w] = r.shape();
    let plane = h * w;
    let masks = std::rc::Rc::new(segs.iter().map(tv_mask).collect::<Vec<_>>());
    let count: usize = masks.iter().map(|m| m.inside.iter().filter(|v| **v).count()).sum::<usize>() * c;
    if count == 0 {
        return Ok(Tensor::scalar(S::zero()));
    }
    let target = crate::autodiff::no_grad(|| masked_tv(&gt_r.detach(), masks.clone()).to_vec());
    let wgt = S::lit(1.0 / count as f64);
    let mut weights = vec![S::zero(); r.numel()];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..plane {
                if masks[b].inside[i] {
                    weights[(b * c + ch) * plane + i] = wgt;
                }
            }
        }
    }
    masked_tv(r, masks).weighted_sq_err(&target, &weights)
}

/// Everything the losses compare predictions against, batched.
pub struct Targets<S: Scalar = f32> {
    pub image: Tensor<S>,
    pub reflectance: Tensor<S>,
    pub shading: Tensor<S>,
    /// Edge maps at full, half and quarter resolution.
    pub edges: [Tensor<S>; 3],
    pub segments: Vec<SegmentMap>,
}

/// The six loss components as graph nodes.
pub struct LossTerms<S: Scalar = f32> {
    pub l_e: Option<Tensor<S>>,
    pub l_i: Tensor<S>,
    pub l_f: Tensor<S>,
    pub l_norm: Tensor<S>,
    pub l_tv: Tensor<S>,
    pub l_dssim: Tensor<S>,
}

/// Predictions the objective needs. `edges` is `None` for variants that
/// do not predict reflectance edges; the edge term is then zero.
pub struct Predictions<'a, S: Scalar = f32> {
    pub edges: Option<[&'a Tensor<S>; 3]>,
    pub r_initial: &'a Tensor<S>,
    pub s_initial: &'a Tensor<S>,
    pub r_final: &'a Tensor<S>,
    pub s_final: &'a Tensor<S>,
}

pub fn loss_terms<S: Scalar>(p: &Predictions<'_, S>, t: &Targets<S>, eps: f64) -> Result<LossTerms<S>, TensorError> {
    let l_e = match p.edges {
        Some(e) => Some(edge_loss(&e, &[&t.edges[0], &t.edges[1], &t.edges[2]])?),
        None => None,
    };
    Ok(LossTerms {
        l_e,
        l_i: initial_loss(p.r_initial, p.s_initial, &t.reflectance, &t.shading)?,
        l_f: final_loss(p.r_final, p.s_final, &t.reflectance, &t.shading, &t.image)?,
        l_norm: norm_invariance_loss(p.r_final, &t.image, &t.segments, eps)?,
        l_tv: tv_loss(p.r_final, &t.reflectance, &t.segments)?,
        l_dssim: dssim_loss(p.r_final, &t.reflectance)?.add(&dssim_loss(p.s_final, &t.shading)?)?,
    })
}

/// Weighted objective and its per-component report.
pub fn total_loss<S: Scalar>(
    p: &Predictions<'_, S>,
    t: &Targets<S>,
    w: &LossWeights,
) -> Result<(Tensor<S>, LossReport), TensorError> {
    let terms = loss_terms(p, t, w.eps)?;
    let mut total = terms
        .l_i
        .scale(w.lambda_i)
        .add(&terms.l_f)?
        .add(&terms.l_norm)?
        .add(&terms.l_tv)?
        .add(&terms.l_dssim.scale(w.lambda_dssim))?;
    if let Some(l_e) = &terms.l_e {
        total = total.add(&l_e.scale(w.lambda_e))?;
    }
    let v = |t: &Tensor<S>| t.item().as_f64();
    let mut report = LossReport::combine(
        w,
        terms.l_e.as_ref().map_or(0.0, v),
        v(&terms.l_i),
        v(&terms.l_f),
        v(&terms.l_norm),
        v(&terms.l_tv),
        v(&terms.l_dssim),
    );
    report.total = v(&total);
    Ok((total, report))
}
