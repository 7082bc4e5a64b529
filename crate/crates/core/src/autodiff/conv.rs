//! Convolution and transposed convolution via im2col + gemm. Convolutions
//! are tiled over output rows so each im2col block stays cache-resident.
//!
//! Convolution weights are `[C_out, C_in, k, k]`; transposed convolution
//! weights are `[C_in, C_out, k, k]` so that `deconv2d` with weight `w` is
//! exactly the input-gradient of `conv2d` with the same `w`.

use super::{gemm, shape_err, Scalar, Tensor, TensorError};

/// `⌊(n + 2·pad − k) / stride⌋ + 1`.
pub fn conv_output_size(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|d| d / stride + 1)
}

/// `stride·(n − 1) + k − 2·pad`.
pub fn deconv_output_size(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (stride * (n - 1) + k).checked_sub(2 * pad)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Offsets of the output column range whose input coordinate
    /// `o*stride - pad + kk` falls inside `[0, n)`.
    #[inline]
    fn valid(&self, kk: usize, n: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let kk = kk as isize;
        // smallest o with o*s - p + kk >= 0
        let lo = ((p - kk).max(0) + s - 1) / s;
        // largest o with o*s - p + kk <= n - 1
        let hi_num = n as isize - 1 + p - kk;
        let hi = if hi_num < 0 { -1 } else { (hi_num / s).min(out as isize - 1) };
        (lo as usize, (hi + 1).max(lo) as usize)
    }
}

fn im2col<S: Scalar>(img: &[S], g: &Geometry, cols: &mut [S]) {
    im2col_rows(img, g, 0, g.ho, cols)
}

fn col2im<S: Scalar>(cols: &[S], g: &Geometry, img: &mut [S]) {
    col2im_rows(cols, g, 0, g.ho, img)
}

/// Output rows per tile so that one im2col tile stays around 256 KiB.
fn tile_rows(g: &Geometry) -> usize {
    const TILE_ELEMS: usize = 1 << 16;
    (TILE_ELEMS / (g.rows() * g.wo).max(1)).clamp(1, g.ho.max(1))
}

/// im2col restricted to output rows `[r0, r1)`; `cols` is
/// `rows × (r1 − r0)·wo`.
fn im2col_rows<S: Scalar>(img: &[S], g: &Geometry, r0: usize, r1: usize, cols: &mut [S]) {
    let (k, s) = (g.k, g.stride);
    let tw = (r1 - r0) * g.wo;
    cols.iter_mut().for_each(|v| *v = S::zero());
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let (oy0, oy1) = g.valid(ky, g.h, g.ho);
            let (oy0, oy1) = (oy0.max(r0), oy1.min(r1));
            for kx in 0..k {
                let (ox0, ox1) = g.valid(kx, g.w, g.wo);
                let row = &mut cols[((c * k + ky) * k + kx) * tw..][..tw];
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut row[(oy - r0) * g.wo..(oy - r0 + 1) * g.wo];
                    if ox1 <= ox0 {
                        continue;
                    }
                    if s == 1 {
                        let off = ox0 + kx - g.pad;
                        dst[ox0..ox1].copy_from_slice(&src[off..off + ox1 - ox0]);
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox] = src[ox * s + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_rows`]: accumulates a tile back into the image.
fn col2im_rows<S: Scalar>(cols: &[S], g: &Geometry, r0: usize, r1: usize, img: &mut [S]) {
    let (k, s) = (g.k, g.stride);
    let tw = (r1 - r0) * g.wo;
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let (oy0, oy1) = g.valid(ky, g.h, g.ho);
            let (oy0, oy1) = (oy0.max(r0), oy1.min(r1));
            for kx in 0..k {
                let (ox0, ox1) = g.valid(kx, g.w, g.wo);
                let row = &cols[((c * k + ky) * k + kx) * tw..][..tw];
                if ox1 <= ox0 {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let src = &row[(oy - r0) * g.wo + ox0..(oy - r0) * g.wo + ox1];
                    if s == 1 {
                        let off = ox0 + kx - g.pad;
                        for (d, v) in dst[off..off + src.len()].iter_mut().zip(src) {
                            *d += *v;
                        }
                    } else {
                        for (i, v) in src.iter().enumerate() {
                            dst[(ox0 + i) * s + kx - g.pad] += *v;
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<S: Scalar>(op: &'static str, b: Option<&Tensor<S>>, channels: usize) -> Result<(), TensorError> {
    if let Some(b) = b {
        if b.numel() != channels {
            return Err(shape_err(op, b.shape(), [1, channels, 1, 1]));
        }
    }
    Ok(())
}

fn add_bias<S: Scalar>(out: &mut [S], bias: &[S], plane: usize) {
    for (chunk, &b) in out.chunks_exact_mut(plane).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<S: Scalar>(grad: &[S], n: usize, c: usize, plane: usize) -> Vec<S> {
    let mut gb = vec![S::zero(); c];
    for b in 0..n {
        for (ch, g) in gb.iter_mut().enumerate() {
            *g += grad[(b * c + ch) * plane..][..plane].iter().copied().sum::<S>();
        }
    }
    gb
}

/// 2-D cross-correlation with zero padding. `x: [N, C_in, H, W]`,
/// `w: [C_out, C_in, k, k]`, optional bias with `C_out` elements.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>, TensorError> {
    let [n, ci, h, wd] = x.shape();
    let [co, wci, k, k2] = w.shape();
    if wci != ci || k != k2 || stride == 0 {
        return Err(shape_err("conv2d", x.shape(), w.shape()));
    }
    check_bias("conv2d", b, co)?;
    let (Some(ho), Some(wo)) = (conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)) else {
        return Err(shape_err("conv2d", x.shape(), w.shape()));
    };
    let g = Geometry { c: ci, h, w: wd, k, stride, pad, ho, wo };
    let (rows, cols) = (g.rows(), g.cols());

    let mut out = vec![S::zero(); n * co * cols];
    {
        let xv = x.value();
        let wv = w.value();
        let th = tile_rows(&g);
        let mut buf = vec![S::zero(); if g.is_pointwise() { 0 } else { rows * th * wo }];
        let mut tile = vec![S::zero(); co * th * wo];
        for s in 0..n {
            let img = &xv[s * ci * h * wd..(s + 1) * ci * h * wd];
            let dst = &mut out[s * co * cols..(s + 1) * co * cols];
            if g.is_pointwise() {
                gemm(false, false, co, cols, rows, S::one(), &wv, img, S::zero(), dst);
                continue;
            }
            for r0 in (0..ho).step_by(th) {
                let r1 = (r0 + th).min(ho);
                let tw = (r1 - r0) * wo;
                im2col_rows(img, &g, r0, r1, &mut buf[..rows * tw]);
                gemm(false, false, co, tw, rows, S::one(), &wv, &buf[..rows * tw], S::zero(), &mut tile[..co * tw]);
                for c in 0..co {
                    dst[c * cols + r0 * wo..][..tw].copy_from_slice(&tile[c * tw..(c + 1) * tw]);
                }
            }
        }
        if let Some(b) = b {
            add_bias(&mut out, &b.value(), cols);
        }
    }

    let mut inputs = vec![x.clone(), w.clone()];
    inputs.extend(b.cloned());
    Ok(Tensor::from_op(
        [n, co, ho, wo],
        out,
        inputs,
        Box::new(move |bw| {
            let (xv, wv) = (bw.inputs[0].value(), bw.inputs[1].value());
            let need_x = bw.inputs[0].requires_grad();
            let need_w = bw.inputs[1].requires_grad();
            let mut gx = need_x.then(|| vec![S::zero(); n * ci * h * wd]);
            let mut gw = need_w.then(|| vec![S::zero(); co * rows]);
            let th = tile_rows(&g);
            let mut buf = vec![S::zero(); rows * th * wo];
            let mut gtile = vec![S::zero(); co * th * wo];
            for s in 0..n {
                let gout = &bw.grad[s * co * cols..(s + 1) * co * cols];
                let img = &xv[s * ci * h * wd..(s + 1) * ci * h * wd];
                if g.is_pointwise() {
                    if let Some(gw) = gw.as_mut() {
                        gemm(false, true, co, rows, cols, S::one(), gout, img, S::one(), gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx[s * ci * h * wd..(s + 1) * ci * h * wd];
                        gemm(true, false, rows, cols, co, S::one(), &wv, gout, S::zero(), dst);
                    }
                    continue;
                }
                for r0 in (0..ho).step_by(th) {
                    let r1 = (r0 + th).min(ho);
                    let tw = (r1 - r0) * wo;
                    for c in 0..co {
                        gtile[c * tw..(c + 1) * tw].copy_from_slice(&gout[c * cols + r0 * wo..][..tw]);
                    }
                    if let Some(gw) = gw.as_mut() {
                        im2col_rows(img, &g, r0, r1, &mut buf[..rows * tw]);
                        gemm(false, true, co, rows, tw, S::one(), &gtile[..co * tw], &buf[..rows * tw], S::one(), gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx[s * ci * h * wd..(s + 1) * ci * h * wd];
                        gemm(
                            true,
                            false,
                            rows,
                            tw,
                            co,
                            S::one(),
                            &wv,
                            &gtile[..co * tw],
                            S::zero(),
                            &mut buf[..rows * tw],
                        );
                        col2im_rows(&buf[..rows * tw], &g, r0, r1, dst);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if bw.inputs.len() == 3 {
                grads.push(bw.inputs[2].requires_grad().then(|| bias_grad(bw.grad, n, co, cols)));
            }
            grads
        }),
    ))
}

/// Transposed convolution. `x: [N, C_in, H, W]`, `w: [C_in, C_out, k, k]`;
/// output side is `stride·(H − 1) + k − 2·pad`.
pub fn deconv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>, TensorError> {
    let [n, ci, h, wd] = x.shape();
    let [wci, co, k, k2] = w.shape();
    if wci != ci || k != k2 || stride == 0 || h == 0 || wd == 0 {
        return Err(shape_err("deconv2d", x.shape(), w.shape()));
    }
    check_bias("deconv2d", b, co)?;
    let (Some(ho), Some(wo)) = (deconv_output_size(h, k, stride, pad), deconv_output_size(wd, k, stride, pad)) else {
        return Err(shape_err("deconv2d", x.shape(), w.shape()));
    };
    // geometry of the adjoint convolution mapping the output back onto x
    let g = Geometry { c: co, h: ho, w: wo, k, stride, pad, ho: h, wo: wd };
    if conv_output_size(ho, k, stride, pad) != Some(h) || conv_output_size(wo, k, stride, pad) != Some(wd) {
        return Err(shape_err("deconv2d", x.shape(), w.shape()));
    }
    let (rows, cols) = (g.rows(), g.cols());
    let out_plane = ho * wo;

    let mut out = vec![S::zero(); n * co * out_plane];
    {
        let xv = x.value();
        let wv = w.value();
        let mut buf = vec![S::zero(); rows * cols];
        for s in 0..n {
            let xs = &xv[s * ci * cols..(s + 1) * ci * cols];
            gemm(true, false, rows, cols, ci, S::one(), &wv, xs, S::zero(), &mut buf);
            col2im(&buf, &g, &mut out[s * co * out_plane..(s + 1) * co * out_plane]);
        }
        if let Some(b) = b {
            add_bias(&mut out, &b.value(), out_plane);
        }
    }

    let mut inputs = vec![x.clone(), w.clone()];
    inputs.extend(b.cloned());
    Ok(Tensor::from_op(
        [n, co, ho, wo],
        out,
        inputs,
        Box::new(move |bw| {
            let (xv, wv) = (bw.inputs[0].value(), bw.inputs[1].value());
            let need_x = bw.inputs[0].requires_grad();
            let need_w = bw.inputs[1].requires_grad();
            let mut gx = need_x.then(|| vec![S::zero(); n * ci * cols]);
            let mut gw = need_w.then(|| vec![S::zero(); ci * rows]);
            let mut dcols = vec![S::zero(); rows * cols];
            for s in 0..n {
                im2col(&bw.grad[s * co * out_plane..(s + 1) * co * out_plane], &g, &mut dcols);
                if let Some(gx) = gx.as_mut() {
                    gemm(
                        false,
                        false,
                        ci,
                        cols,
                        rows,
                        S::one(),
                        &wv,
                        &dcols,
                        S::zero(),
                        &mut gx[s * ci * cols..(s + 1) * ci * cols],
                    );
                }
                if let Some(gw) = gw.as_mut() {
                    let xs = &xv[s * ci * cols..(s + 1) * ci * cols];
                    gemm(false, true, ci, rows, cols, S::one(), xs, &dcols, S::one(), gw);
                }
            }
            let mut grads = vec![gx, gw];
            if bw.inputs.len() == 3 {
                grads.push(bw.inputs[2].requires_grad().then(|| bias_grad(bw.grad, n, co, out_plane)));
            }
            grads
        }),
    ))
}
