use super::{Scalar, Shape, Tensor, TensorError};

/// A trainable tensor with its Adam moments.
pub struct Param<S: Scalar = f32> {
    name: String,
    tensor: Tensor<S>,
    m: Vec<S>,
    v: Vec<S>,
    step: u64,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, shape: Shape, value: Vec<S>) -> Self {
        let n = value.len();
        Self {
            name: name.into(),
            tensor: Tensor::leaf(shape, value),
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
            step: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.tensor
    }

    pub fn shape(&self) -> Shape {
        self.tensor.shape()
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn first_moment(&self) -> &[S] {
        &self.m
    }

    pub fn second_moment(&self) -> &[S] {
        &self.v
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_value(&mut self, value: &[S]) {
        self.tensor.update_value(|v| v.copy_from_slice(value));
    }

    /// Restores optimizer state (from a checkpoint).
    pub fn set_state(&mut self, m: Vec<S>, v: Vec<S>, step: u64) {
        assert_eq!(m.len(), self.numel());
        assert_eq!(v.len(), self.numel());
        self.m = m;
        self.v = v;
        self.step = step;
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    /// Updates every parameter from its gradient, then clears the
    /// gradients. Nothing is modified if any parameter lacks a gradient.
    pub fn step<S: Scalar>(&self, params: &mut [&mut Param<S>]) -> Result<(), TensorError> {
        if let Some(p) = params.iter().find(|p| p.tensor.grad().is_none()) {
            return Err(TensorError::MissingGrad(p.name.clone()));
        }
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let (lr, eps) = (S::lit(self.lr), S::lit(self.eps));
        for p in params.iter_mut() {
            let grad = p.tensor.grad().expect("checked above");
            p.step += 1;
            let t = p.step as i32;
            let c1 = S::one() - b1.powi(t);
            let c2 = S::one() - b2.powi(t);
            let (m, v) = (&mut p.m, &mut p.v);
            p.tensor.update_value(|theta| {
                for i in 0..theta.len() {
                    let g = grad[i];
                    m[i] = b1 * m[i] + (S::one() - b1) * g;
                    v[i] = b2 * v[i] + (S::one() - b2) * g * g;
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    theta[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            });
            p.tensor.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Param::<f64>::new("w", [1, 1, 1, 1], vec![0.0]);
        p.tensor().set_grad(Some(vec![1.0]));
        Adam::default().step(&mut [&mut p]).unwrap();
        let delta = p.tensor().item();
        // mhat = vhat = 1, so the step is lr / (1 + eps)
        assert!((delta + 2e-4).abs() < 1e-9, "{delta}");
        assert!(p.tensor().grad().is_none());
        assert_eq!(p.step(), 1);
    }

    #[test]
    fn zero_grad_leaves_value() {
        let mut p = Param::<f32>::new("w", [1, 1, 1, 2], vec![0.3, -0.7]);
        p.tensor().set_grad(Some(vec![0.0, 0.0]));
        Adam::default().step(&mut [&mut p]).unwrap();
        assert_eq!(p.tensor().to_vec(), vec![0.3, -0.7]);
    }

    #[test]
    fn identical_params_update_identically() {
        let mut a = Param::<f32>::new("a", [1, 1, 1, 3], vec![0.1, 0.2, 0.3]);
        let mut b = Param::<f32>::new("b", [1, 1, 1, 3], vec![0.1, 0.2, 0.3]);
        for _ in 0..5 {
            a.tensor().set_grad(Some(vec![0.5, -1.0, 2.0]));
            b.tensor().set_grad(Some(vec![0.5, -1.0, 2.0]));
            Adam::default().step(&mut [&mut a, &mut b]).unwrap();
        }
        assert_eq!(a.tensor().to_vec(), b.tensor().to_vec());
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut a = Param::<f32>::new("a", [1, 1, 1, 1], vec![1.0]);
        let mut b = Param::<f32>::new("b", [1, 1, 1, 1], vec![1.0]);
        a.tensor().set_grad(Some(vec![1.0]));
        let err = Adam::default().step(&mut [&mut a, &mut b]).unwrap_err();
        assert_eq!(err, TensorError::MissingGrad("b".into()));
        assert_eq!(a.tensor().item(), 1.0);
    }
}
