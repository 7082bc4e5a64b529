use super::{shape_err, Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Running per-channel statistics. Variances are biased (divide by n) both
/// for normalization and for the running update.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

impl<S: Scalar> RunningStats<S> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![S::zero(); channels], var: vec![S::one(); channels] }
    }
}

/// Batch normalization over `(N, H, W)` per channel.
///
/// In train mode batch statistics are used and `running` is updated with
/// `momentum`; eval mode normalizes with `running` instead. Gradients never
/// flow through the running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm2d<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running: &mut RunningStats<S>,
    mode: BatchNormMode,
    momentum: f64,
    eps: f64,
) -> Result<Tensor<S>, TensorError> {
    let [n, c, h, w] = x.shape();
    if gamma.numel() != c || beta.numel() != c || running.mean.len() != c {
        return Err(shape_err("batch_norm2d", x.shape(), gamma.shape()));
    }
    let plane = h * w;
    let count = n * plane;
    let eps = S::lit(eps);

    let (mean, var) = match mode {
        BatchNormMode::Train => {
            if count < 2 {
                return Err(TensorError::DegenerateBatch(count));
            }
            let xv = x.value();
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for ch in 0..c {
                let (mut s, mut sq) = (0.0f64, 0.0f64);
                for b in 0..n {
                    for v in &xv[(b * c + ch) * plane..][..plane] {
                        s += v.as_f64();
                    }
                }
                let m = s / count as f64;
                for b in 0..n {
                    for v in &xv[(b * c + ch) * plane..][..plane] {
                        let d = v.as_f64() - m;
                        sq += d * d;
                    }
                }
                mean[ch] = S::lit(m);
                var[ch] = S::lit(sq / count as f64);
            }
            let mo = S::lit(momentum);
            for ch in 0..c {
                running.mean[ch] = (S::one() - mo) * running.mean[ch] + mo * mean[ch];
                running.var[ch] = (S::one() - mo) * running.var[ch] + mo * var[ch];
            }
            (mean, var)
        }
        BatchNormMode::Eval => (running.mean.clone(), running.var.clone()),
    };

    let inv_std: Vec<S> = var.iter().map(|v| S::one() / (*v + eps).sqrt()).collect();
    let mut xhat = vec![S::zero(); x.numel()];
    let mut out = vec![S::zero(); x.numel()];
    {
        let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
    }

    Ok(Tensor::from_op(
        x.shape(),
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |bw| {
            let g = bw.grad;
            let gv = bw.inputs[1].value();
            let mut dgamma = vec![S::zero(); c];
            let mut dbeta = vec![S::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    for i in base..base + plane {
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                }
            }
            let dx = bw.inputs[0].requires_grad().then(|| {
                let mut dx = vec![S::zero(); g.len()];
                let m = S::lit(count as f64);
                for ch in 0..c {
                    let scale = gv[ch] * inv_std[ch];
                    for b in 0..n {
                        let base = (b * c + ch) * plane;
                        for i in base..base + plane {
                            dx[i] = match mode {
                                // dx = γ/σ · (g − mean(g) − x̂·mean(g·x̂))
                                BatchNormMode::Train => scale * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m),
                                BatchNormMode::Eval => scale * g[i],
                            };
                        }
                    }
                }
                dx
            });
            vec![dx, Some(dgamma), Some(dbeta)]
        }),
    ))
}
