use crate::autodiff::{Scalar, Tensor, TensorError};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn kernel1d() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Valid-mode separable Gaussian filtering of one `h×w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h + 1 - WINDOW, w + 1 - WINDOW);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..WINDOW).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `(h−10)×(w−10)` map back onto
/// the full plane.
fn filter_adjoint(src: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h + 1 - WINDOW, w + 1 - WINDOW);
    let mut rows = vec![0.0; h * wo];
    for y in 0..ho {
        for x in 0..wo {
            let v = src[y * wo + x];
            for i in 0..WINDOW {
                rows[(y + i) * wo + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..wo {
            let v = rows[y * wo + x];
            for i in 0..WINDOW {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

/// Per-position partial derivatives of SSIM with respect to the local
/// statistics of one argument.
struct Partials {
    d_mu: Vec<f64>,
    d_sq: Vec<f64>,
    d_cross: Vec<f64>,
}

struct Plane {
    ssim_sum: f64,
    dx: Partials,
    dy: Partials,
}

fn plane_ssim(x: &[f64], y: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> Plane {
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, my) = (filter_valid(x, h, w, k), filter_valid(y, h, w, k));
    let (exx, eyy, exy) = (filter_valid(&xx, h, w, k), filter_valid(&yy, h, w, k), filter_valid(&xy, h, w, k));
    let n = mx.len();
    let mut sum = 0.0;
    let blank = || Partials { d_mu: vec![0.0; n], d_sq: vec![0.0; n], d_cross: vec![0.0; n] };
    let (mut dx, mut dy) = (blank(), blank());
    for q in 0..n {
        let (ux, uy) = (mx[q], my[q]);
        let a1 = 2.0 * ux * uy + c1;
        let a2 = 2.0 * (exy[q] - ux * uy) + c2;
        let b1 = ux * ux + uy * uy + c1;
        let b2 = (exx[q] - ux * ux) + (eyy[q] - uy * uy) + c2;
        let s = (a1 * a2) / (b1 * b2);
        sum += s;
        dx.d_mu[q] = s * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2);
        dy.d_mu[q] = s * (2.0 * ux / a1 - 2.0 * ux / a2 - 2.0 * uy / b1 + 2.0 * uy / b2);
        dx.d_sq[q] = -s / b2;
        dy.d_sq[q] = -s / b2;
        dx.d_cross[q] = 2.0 * s / a2;
        dy.d_cross[q] = 2.0 * s / a2;
    }
    Plane { ssim_sum: sum, dx, dy }
}

/// Gradient of `scale · Σ_q SSIM_q` with respect to the plane `a`, where
/// `b` is the other argument.
fn plane_grad(p: &Partials, a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64; WINDOW], scale: f64) -> Vec<f64> {
    let mu = filter_adjoint(&p.d_mu, h, w, k);
    let sq = filter_adjoint(&p.d_sq, h, w, k);
    let cross = filter_adjoint(&p.d_cross, h, w, k);
    (0..h * w).map(|i| scale * (mu[i] + 2.0 * a[i] * sq[i] + b[i] * cross[i])).collect()
}

/// Structural dissimilarity `(1 − SSIM) / 2`, with SSIM averaged over valid
/// window positions, channels and batch. Both inputs receive gradients.
pub fn dssim_loss<S: Scalar>(x: &Tensor<S>, y: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
    if x.shape() != y.shape() {
        return Err(crate::autodiff::TensorError::ShapeMismatch { op: "dssim", lhs: x.shape(), rhs: y.shape() });
    }
    let [n, c, h, w] = x.shape();
    if h < WINDOW || w < WINDOW {
        return Err(TensorError::InvalidArgument {
            op: "dssim",
            detail: format!("{h}x{w} is smaller than the {WINDOW}x{WINDOW} window"),
        });
    }
    let k = kernel1d();
    let plane = h * w;
    let positions = ((h + 1 - WINDOW) * (w + 1 - WINDOW) * n * c) as f64;
    let xv: Vec<f64> = x.value().iter().map(|v| v.as_f64()).collect();
    let yv: Vec<f64> = y.value().iter().map(|v| v.as_f64()).collect();
    let planes: Vec<Plane> =
        (0..n * c).map(|p| plane_ssim(&xv[p * plane..][..plane], &yv[p * plane..][..plane], h, w, &k)).collect();
    let mean_ssim = planes.iter().map(|p| p.ssim_sum).sum::<f64>() / positions;
    let value = (1.0 - mean_ssim) / 2.0;
    Ok(Tensor::from_op(
        [1, 1, 1, 1],
        vec![S::lit(value)],
        vec![x.clone(), y.clone()],
        Box::new(move |bw| {
            let scale = -bw.grad[0].as_f64() / (2.0 * positions);
            let mut gx = Vec::with_capacity(n * c * plane);
            let mut gy = Vec::with_capacity(n * c * plane);
            for (i, p) in planes.iter().enumerate() {
                let (a, b) = (&xv[i * plane..][..plane], &yv[i * plane..][..plane]);
                if bw.inputs[0].requires_grad() {
                    gx.extend(plane_grad(&p.dx, a, b, h, w, &k, scale).into_iter().map(S::lit));
                }
                if bw.inputs[1].requires_grad() {
                    gy.extend(plane_grad(&p.dy, b, a, h, w, &k, scale).into_iter().map(S::lit));
                }
            }
            vec![(!gx.is_empty()).then_some(gx), (!gy.is_empty()).then_some(gy)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjoint_filter_matches_transpose() {
        let (h, w) = (13, 14);
        let k = kernel1d();
        let a: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..(h - 10) * (w - 10)).map(|i| ((i * 7) % 5) as f64 * 0.3).collect();
        let lhs: f64 = filter_valid(&a, h, w, &k).iter().zip(&b).map(|(p, q)| p * q).sum();
        let rhs: f64 = a.iter().zip(filter_adjoint(&b, h, w, &k)).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn identical_inputs_are_exactly_zero() {
        let x = crate::autodiff::tensor_from_fn::<f32>([2, 3, 12, 16], |i| ((i * 13) % 17) as f64 / 17.0);
        assert_eq!(dssim_loss(&x, &x).unwrap().item(), 0.0);
    }

    #[test]
    fn symmetric() {
        let x = crate::autodiff::tensor_from_fn::<f64>([1, 2, 12, 12], |i| ((i * 13) % 17) as f64 / 17.0);
        let y = crate::autodiff::tensor_from_fn::<f64>([1, 2, 12, 12], |i| ((i * 5) % 7) as f64 / 7.0);
        let a = dssim_loss(&x, &y).unwrap().item();
        let b = dssim_loss(&y, &x).unwrap().item();
        assert!(a > 0.0 && (a - b).abs() < 1e-9);
    }

    #[test]
    fn too_small() {
        let x = Tensor::<f64>::zeros([1, 1, 10, 20]);
        assert!(dssim_loss(&x, &x).is_err());
    }
}
