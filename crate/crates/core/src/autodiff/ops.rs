use super::{numel, shape_err, Scalar, Shape, Tensor, TensorError};

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn wants(b: &super::Backward<'_, impl Scalar>, i: usize) -> bool {
    b.inputs[i].requires_grad()
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        same_shape("add", self, other)?;
        let value = self.value().iter().zip(other.value().iter()).map(|(a, b)| *a + *b).collect();
        Ok(Tensor::from_op(
            self.shape(),
            value,
            vec![self.clone(), other.clone()],
            Box::new(|b| vec![Some(b.grad.to_vec()), Some(b.grad.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        same_shape("sub", self, other)?;
        let value = self.value().iter().zip(other.value().iter()).map(|(a, b)| *a - *b).collect();
        Ok(Tensor::from_op(
            self.shape(),
            value,
            vec![self.clone(), other.clone()],
            Box::new(|b| vec![Some(b.grad.to_vec()), Some(b.grad.iter().map(|g| -*g).collect())]),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        same_shape("mul", self, other)?;
        let value = self.value().iter().zip(other.value().iter()).map(|(a, b)| *a * *b).collect();
        Ok(Tensor::from_op(
            self.shape(),
            value,
            vec![self.clone(), other.clone()],
            Box::new(|b| {
                let (x, y) = (b.inputs[0].value(), b.inputs[1].value());
                let gx = wants(b, 0).then(|| b.grad.iter().zip(y.iter()).map(|(g, v)| *g * *v).collect());
                let gy = wants(b, 1).then(|| b.grad.iter().zip(x.iter()).map(|(g, v)| *g * *v).collect());
                vec![gx, gy]
            }),
        ))
    }

    /// Multiplies by a constant.
    pub fn scale(&self, c: f64) -> Tensor<S> {
        let c = S::lit(c);
        let value = self.value().iter().map(|v| *v * c).collect();
        Tensor::from_op(
            self.shape(),
            value,
            vec![self.clone()],
            Box::new(move |b| vec![Some(b.grad.iter().map(|g| *g * c).collect())]),
        )
    }

    pub fn relu(&self) -> Tensor<S> {
        let value = self.value().iter().map(|v| v.max(S::zero())).collect();
        Tensor::from_op(
            self.shape(),
            value,
            vec![self.clone()],
            Box::new(|b| {
                let x = b.inputs[0].value();
                vec![Some(
                    b.grad.iter().zip(x.iter()).map(|(g, v)| if *v > S::zero() { *g } else { S::zero() }).collect(),
                )]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        let value = self.value().iter().map(|&v| sigmoid(v)).collect();
        Tensor::from_op(
            self.shape(),
            value,
            vec![self.clone()],
            Box::new(|b| vec![Some(b.grad.iter().zip(b.output).map(|(g, y)| *g * *y * (S::one() - *y)).collect())]),
        )
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self) -> Tensor<S> {
        let total = self.value().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            [1, 1, 1, 1],
            vec![total],
            vec![self.clone()],
            Box::new(move |b| vec![Some(vec![b.grad[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<S> {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// `Σ x_i r_i` against a constant vector.
    pub fn dot_const(&self, r: &[S]) -> Result<Tensor<S>, TensorError> {
        if r.len() != self.numel() {
            return Err(TensorError::InvalidArgument {
                op: "dot_const",
                detail: format!("{} weights for {} elements", r.len(), self.numel()),
            });
        }
        let total = self.value().iter().zip(r).map(|(x, w)| *x * *w).sum();
        let r = r.to_vec();
        Ok(Tensor::from_op(
            [1, 1, 1, 1],
            vec![total],
            vec![self.clone()],
            Box::new(move |b| vec![Some(r.iter().map(|w| *w * b.grad[0]).collect())]),
        ))
    }

    /// Mean squared difference to `target` over all elements.
    pub fn mse(&self, target: &Tensor<S>) -> Result<Tensor<S>, TensorError> {
        same_shape("mse", self, target)?;
        let n = S::lit(self.numel() as f64);
        let total: S = self.value().iter().zip(target.value().iter()).map(|(x, t)| (*x - *t) * (*x - *t)).sum();
        Ok(Tensor::from_op(
            [1, 1, 1, 1],
            vec![total / n],
            vec![self.clone(), target.clone()],
            Box::new(move |b| {
                let (x, t) = (b.inputs[0].value(), b.inputs[1].value());
                let two = S::lit(2.0) * b.grad[0] / n;
                let d: Vec<S> = x.iter().zip(t.iter()).map(|(x, t)| two * (*x - *t)).collect();
                let dt = wants(b, 1).then(|| d.iter().map(|v| -*v).collect());
                vec![Some(d), dt]
            }),
        ))
    }

    /// `Σ w_i (x_i - t_i)^2` with constant targets and weights.
    pub fn weighted_sq_err(&self, target: &[S], weights: &[S]) -> Result<Tensor<S>, TensorError> {
        if target.len() != self.numel() || weights.len() != self.numel() {
            return Err(TensorError::InvalidArgument {
                op: "weighted_sq_err",
                detail: format!("{} targets, {} weights for {} elements", target.len(), weights.len(), self.numel()),
            });
        }
        let total = self.value().iter().zip(target).zip(weights).map(|((x, t), w)| *w * (*x - *t) * (*x - *t)).sum();
        let (target, weights) = (target.to_vec(), weights.to_vec());
        Ok(Tensor::from_op(
            [1, 1, 1, 1],
            vec![total],
            vec![self.clone()],
            Box::new(move |b| {
                let x = b.inputs[0].value();
                let two = S::lit(2.0) * b.grad[0];
                vec![Some(x.iter().zip(&target).zip(&weights).map(|((x, t), w)| two * *w * (*x - *t)).collect())]
            }),
        ))
    }

    /// Concatenates along the channel axis.
    pub fn concat(xs: &[&Tensor<S>]) -> Result<Tensor<S>, TensorError> {
        let first = xs.first().ok_or(TensorError::InvalidArgument { op: "concat", detail: "no inputs".into() })?;
        let [n, _, h, w] = first.shape();
        for x in xs {
            let s = x.shape();
            if s[0] != n || s[2] != h || s[3] != w {
                return Err(shape_err("concat", first.shape(), s));
            }
        }
        let chans: Vec<usize> = xs.iter().map(|x| x.shape()[1]).collect();
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut value = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (x, &c) in xs.iter().zip(&chans) {
                value.extend_from_slice(&x.value()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        Ok(Tensor::from_op(
            [n, total, h, w],
            value,
            xs.iter().map(|x| (*x).clone()).collect(),
            Box::new(move |bw| {
                let mut offset = 0;
                chans
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        let start = offset;
                        offset += c;
                        wants(bw, i).then(|| {
                            let mut g = Vec::with_capacity(n * c * plane);
                            for b in 0..n {
                                let base = (b * total + start) * plane;
                                g.extend_from_slice(&bw.grad[base..base + c * plane]);
                            }
                            g
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Averages non-overlapping 2x2 blocks. Height and width must be even.
    pub fn downsample2x(&self) -> Result<Tensor<S>, TensorError> {
        let [n, c, h, w] = self.shape();
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(TensorError::InvalidArgument { op: "downsample2x", detail: format!("odd size {h}x{w}") });
        }
        let (ho, wo) = (h / 2, w / 2);
        let quarter = S::lit(0.25);
        let x = self.value();
        let mut value = vec![S::zero(); n * c * ho * wo];
        for p in 0..n * c {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut value[p * ho * wo..(p + 1) * ho * wo];
            for y in 0..ho {
                for xx in 0..wo {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * wo + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            [n, c, ho, wo],
            value,
            vec![self.clone()],
            Box::new(move |b| {
                let mut g = vec![S::zero(); n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            g[p * h * w + y * w + xx] = b.grad[p * ho * wo + (y / 2) * wo + xx / 2] * quarter;
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}

/// Convenience for building constant tensors from images in tests and
/// input pipelines.
pub fn tensor_from_fn<S: Scalar>(shape: Shape, f: impl Fn(usize) -> f64) -> Tensor<S> {
    Tensor::new(shape, (0..numel(&shape)).map(|i| S::lit(f(i))).collect())
}
