//! Minimal reverse-mode automatic differentiation over NCHW tensors.
//!
//! A [`Tensor`] is a reference-counted node in a dynamically built graph.
//! Operations record their inputs and a backward closure; calling
//! [`Tensor::backward`] on a scalar walks the graph in reverse topological
//! order and accumulates gradients into every leaf that requires them.
//!
//! The kernel is generic over [`Scalar`] so the same code trains in `f32`
//! and is gradient-checked in `f64`.

mod checkpoint;
mod conv;
mod norm;
mod ops;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointEntry, CheckpointError, CheckpointHeader, EntryKind};
pub use conv::{conv2d, conv_output_size, deconv2d, deconv_output_size};
pub use norm::{batch_norm2d, BatchNormMode, RunningStats};
pub use ops::tensor_from_fn;
pub use optim::{Adam, Param};

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

/// Floating point type the kernel can run on.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    /// `C = alpha * A * B + beta * C` with explicit element strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    #[inline]
    fn lit(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("representable constant")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite scalar")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                // SAFETY: the callers pass dense row-major or transposed
                // buffers of exactly the asserted sizes, so every strided
                // access stays inside the slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major product `C(m×n) = alpha·op(A)·op(B) + beta·C`, where
/// `op(A)` is `A` (m×k) or, when `ta`, the transpose of a k×m buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<S: Scalar>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: S,
    a: &[S],
    b: &[S],
    beta: S,
    c: &mut [S],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    S::gemm_raw(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c);
}

/// `(N, C, H, W)`.
pub type Shape = [usize; 4];

pub fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("batch norm needs at least two values per channel in train mode, got {0}")]
    DegenerateBatch(usize),
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar(Shape),
}

pub(crate) fn shape_err(op: &'static str, lhs: Shape, rhs: Shape) -> TensorError {
    TensorError::ShapeMismatch { op, lhs, rhs }
}

/// What a backward closure sees: the gradient flowing into the op's output,
/// the output value, and the op's inputs.
pub struct Backward<'a, S: Scalar> {
    pub grad: &'a [S],
    pub output: &'a [S],
    pub inputs: &'a [Tensor<S>],
}

/// Returns one optional gradient per input, in input order.
pub type BackwardFn<S> = Box<dyn Fn(&Backward<'_, S>) -> Vec<Option<Vec<S>>>>;

struct Node<S: Scalar> {
    shape: Shape,
    value: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: bool,
    inputs: Vec<Tensor<S>>,
    backward: Option<BackwardFn<S>>,
}

/// Differentiable NCHW tensor.
pub struct Tensor<S: Scalar = f32>(Rc<Node<S>>);

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.0.shape).field("requires_grad", &self.0.requires_grad).finish()
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording a graph; every op output is a constant.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

impl<S: Scalar> Tensor<S> {
    fn build(
        shape: Shape,
        value: Vec<S>,
        requires_grad: bool,
        inputs: Vec<Tensor<S>>,
        backward: Option<BackwardFn<S>>,
    ) -> Self {
        assert_eq!(numel(&shape), value.len(), "value length does not match shape {shape:?}");
        Tensor(Rc::new(Node {
            shape,
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            inputs,
            backward,
        }))
    }

    /// Constant tensor; gradients never flow into it.
    pub fn new(shape: Shape, value: Vec<S>) -> Self {
        Self::build(shape, value, false, Vec::new(), None)
    }

    /// Leaf that collects gradients (parameters, gradcheck inputs).
    pub fn leaf(shape: Shape, value: Vec<S>) -> Self {
        Self::build(shape, value, true, Vec::new(), None)
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::new(shape, vec![S::zero(); numel(&shape)])
    }

    pub fn full(shape: Shape, v: S) -> Self {
        Self::new(shape, vec![v; numel(&shape)])
    }

    pub fn scalar(v: S) -> Self {
        Self::new([1, 1, 1, 1], vec![v])
    }

    /// Records a custom operation. When no input requires a gradient (or
    /// recording is disabled) the result is a plain constant.
    pub fn from_op(shape: Shape, value: Vec<S>, inputs: Vec<Tensor<S>>, backward: BackwardFn<S>) -> Self {
        if grad_enabled() && inputs.iter().any(Tensor::requires_grad) {
            Self::build(shape, value, true, inputs, Some(backward))
        } else {
            Self::new(shape, value)
        }
    }

    pub fn shape(&self) -> Shape {
        self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.backward.is_none()
    }

    pub fn value(&self) -> Ref<'_, Vec<S>> {
        self.0.value.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.0.value.borrow().clone()
    }

    /// Overwrites the data of a leaf in place (optimizer updates,
    /// finite-difference probes).
    pub fn update_value(&self, f: impl FnOnce(&mut [S])) {
        assert!(self.is_leaf(), "only leaves can be modified in place");
        f(&mut self.0.value.borrow_mut());
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor {:?}", self.shape());
        self.0.value.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.grad.borrow().clone()
    }

    pub fn set_grad(&self, grad: Option<Vec<S>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.numel());
        }
        *self.0.grad.borrow_mut() = grad;
    }

    pub fn zero_grad(&self) {
        self.set_grad(None);
    }

    /// Same data, detached from the graph.
    pub fn detach(&self) -> Self {
        Self::new(self.shape(), self.to_vec())
    }

    /// Same data under another shape with equal element count.
    pub fn reshape(&self, shape: Shape) -> Result<Self, TensorError> {
        if numel(&shape) != self.numel() {
            return Err(shape_err("reshape", self.shape(), shape));
        }
        Ok(Self::from_op(shape, self.to_vec(), vec![self.clone()], Box::new(|b| vec![Some(b.grad.to_vec())])))
    }

    fn key(&self) -> *const Node<S> {
        Rc::as_ptr(&self.0)
    }

    /// Backpropagates from this scalar. Leaf gradients are accumulated onto
    /// whatever they already hold.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<*const Node<S>, Vec<S>> = HashMap::new();
        grads.insert(self.key(), vec![S::one()]);
        for node in order.iter().rev() {
            let Some(grad) = grads.remove(&node.key()) else { continue };
            match &node.0.backward {
                None => {
                    let mut slot = node.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += *g),
                        None => *slot = Some(grad),
                    }
                }
                Some(backward) => {
                    let output = node.0.value.borrow();
                    let input_grads = backward(&Backward { grad: &grad, output: &output, inputs: &node.0.inputs });
                    debug_assert_eq!(input_grads.len(), node.0.inputs.len());
                    for (input, g) in node.0.inputs.iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(g.len(), input.numel());
                        match grads.get_mut(&input.key()) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += *v),
                            None => {
                                grads.insert(input.key(), g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` that require gradients, inputs first.
    fn topo_order(&self) -> Vec<Tensor<S>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<S>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            for input in &t.0.inputs {
                if input.requires_grad() && !visited.contains(&input.key()) {
                    stack.push((input.clone(), false));
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(false, false, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(true, false, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(false, true, 2, 2, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn reuse_accumulates_branch_gradients() {
        let x = Tensor::<f64>::leaf([1, 1, 1, 3], vec![1.0, -2.0, 3.0]);
        // y = sum(x*x) + sum(3x)  => dy/dx = 2x + 3
        let y = x.mul(&x).unwrap().sum().add(&x.scale(3.0).sum()).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0, -1.0, 9.0]);

        // the same value split over two independent leaves gives the parts
        let a = Tensor::<f64>::leaf([1, 1, 1, 3], vec![1.0, -2.0, 3.0]);
        let b = Tensor::<f64>::leaf([1, 1, 1, 3], vec![1.0, -2.0, 3.0]);
        a.mul(&b).unwrap().sum().add(&a.scale(3.0).sum()).unwrap().backward().unwrap();
        let parts: Vec<f64> = a.grad().unwrap().iter().zip(b.grad().unwrap()).map(|(p, q)| p + q).collect();
        assert_eq!(parts, x.grad().unwrap());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::leaf([1, 1, 1, 2], vec![1.0, 2.0]);
        x.scale(2.0).sum().backward().unwrap();
        x.scale(2.0).sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 4.0]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::<f32>::leaf([1, 1, 1, 2], vec![1.0, 2.0]);
        let y = no_grad(|| x.scale(2.0));
        assert!(!y.requires_grad());
        assert!(x.scale(2.0).requires_grad());
    }

    #[test]
    fn backward_needs_scalar() {
        let x = Tensor::<f32>::leaf([1, 1, 1, 2], vec![1.0, 2.0]);
        assert!(matches!(x.scale(1.0).backward(), Err(TensorError::NotScalar(_))));
    }
}
