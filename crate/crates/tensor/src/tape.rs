//! Gradient tape.
//!
//! A [`Tape`] owns the values of every differentiable operation evaluated
//! through it, in execution order. [`Tape::backward`] replays the adjoints of
//! those operations in reverse and returns the gradient of a scalar loss with
//! respect to every leaf created with [`Tape::leaf`].
//!
//! ```
//! use basisconv_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64([2], &[2.0, -3.0]).unwrap());
//! let loss = tape.l1_norm(x).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, -1.0]);
//! ```

use std::sync::Arc;

use crate::error::{mismatch, Result, TensorError};
use crate::ops::conv::{self, ConvGeometry};
use crate::ops::{norm, pool};
use crate::scalar::Scalar;
use crate::sparse::SparseOperator;
use crate::tensor::{permute_indices, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    L1(Var),
    Relu(Var),
    Matmul(Var, Var),
    Reshape(Var),
    Remap(Var, Arc<Vec<usize>>),
    Sparse(Var, Arc<SparseOperator>),
    Correlate(Var, Var, ConvGeometry),
    TransposeCorrelate(Var, Var, ConvGeometry),
    MaxPool2x2(Var, Vec<usize>),
    MaxTrailing(Var, Vec<usize>),
    SoftmaxCrossEntropy { logits: Var, probs: Vec<T>, labels: Vec<usize> },
    BatchNorm(Box<norm::BatchNormSaved<T>>),
    AddBias(Var, Var, usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of evaluated operations and their saved inputs.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    /// Finite-value checking defaults to on in debug builds.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), check_finite: cfg!(debug_assertions) }
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Constant, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() && inputs.iter().all(|v| self.nodes[v.0].value.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    /// Sum of absolute values as a scalar.
    pub fn l1_norm(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).data().iter().map(|x| x.abs()).sum());
        self.push("l1_norm", v, Op::L1(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", v, Op::Relu(a), &[a])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let v = Tensor::new([m, n], out)?;
        self.push("matmul", v, Op::Matmul(a, b), &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    /// Gather: output element `i` is input element `src[i]`.
    ///
    /// Permutations, rolls, crops and slot duplication are all expressed this
    /// way; the adjoint scatters gradients back and sums repeated sources.
    pub fn remap(&mut self, a: Var, shape: impl Into<Vec<usize>>, src: Arc<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let input = self.value(a);
        if shape.iter().product::<usize>() != src.len() {
            return Err(TensorError::InvalidShape { shape, len: src.len() });
        }
        if let Some(&bad) = src.iter().find(|&&i| i >= input.numel()) {
            return Err(TensorError::Invalid(format!(
                "remap: source index {bad} out of range for {} elements",
                input.numel()
            )));
        }
        let data = src.iter().map(|&i| input.data()[i]).collect();
        let v = Tensor::new(shape, data)?;
        self.push("remap", v, Op::Remap(a, src), &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let src = permute_indices(&shape, axes)?;
        let out_shape: Vec<usize> = axes.iter().map(|&i| shape[i]).collect();
        self.remap(a, out_shape, Arc::new(src))
    }

    /// Keeps `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(mismatch("narrow", &shape, (axis, start, len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut src = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for i in start..start + len {
                let base = (o * shape[axis] + i) * inner;
                src.extend(base..base + inner);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.remap(a, out_shape, Arc::new(src))
    }

    /// Applies a sparse linear map to every trailing `H x W` plane.
    pub fn sparse_apply(&mut self, a: Var, op: Arc<SparseOperator>) -> Result<Var> {
        let v = op.apply(self.value(a))?;
        self.push("sparse_apply", v, Op::Sparse(a, op), &[a])
    }

    /// Multichannel cross-correlation with zero padding.
    ///
    /// `input [B, C_in, H, W]`, `kernel [C_out, C_in, k, k]`, `k` odd.
    pub fn correlate2d(&mut self, input: Var, kernel: Var, padding: conv::Padding, stride: usize) -> Result<Var> {
        let geom = ConvGeometry::new("correlate2d", self.shape(input), self.shape(kernel), padding, stride)?;
        let v = conv::forward(self.value(input), self.value(kernel), &geom)?;
        self.push("correlate2d", v, Op::Correlate(input, kernel, geom), &[input, kernel])
    }

    /// Adjoint of same-padded, stride-1 [`Tape::correlate2d`] with the same kernel.
    ///
    /// `input [B, C_out, H, W]`, `kernel [C_out, C_in, k, k]` gives `[B, C_in, H, W]`.
    /// This is correlation with the spatially flipped kernel and swapped
    /// channel axes.
    pub fn transpose_correlate2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let geom = ConvGeometry::transposed(self.shape(input), self.shape(kernel))?;
        let v = conv::backward_input(self.value(input), self.value(kernel), &geom)?;
        self.push("transpose_correlate2d", v, Op::TransposeCorrelate(input, kernel, geom), &[input, kernel])
    }

    /// Non-overlapping 2x2 max pooling over the last two axes.
    pub fn maxpool2x2(&mut self, a: Var) -> Result<Var> {
        let (v, argmax) = pool::maxpool2x2(self.value(a))?;
        self.push("maxpool2x2", v, Op::MaxPool2x2(a, argmax), &[a])
    }

    /// Maximum over every axis after the first `keep`.
    pub fn max_trailing(&mut self, a: Var, keep: usize) -> Result<Var> {
        let (v, argmax) = pool::max_trailing(self.value(a), keep)?;
        self.push("max_trailing", v, Op::MaxTrailing(a, argmax), &[a])
    }

    /// Mean softmax cross-entropy of `logits [B, K]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = norm::softmax_cross_entropy(self.value(logits), labels)?;
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, probs, labels: labels.to_vec() },
            &[logits],
        )
    }

    /// Batch normalization with per-channel statistics.
    ///
    /// Statistics run over every axis except `channel_axis`. In
    /// [`norm::BatchNormMode::Train`] the batch statistics are used and
    /// folded into `stats`; in eval mode the frozen running statistics are
    /// used and `stats` is left untouched.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        channel_axis: usize,
        stats: &mut norm::BatchNormStats<T>,
        mode: norm::BatchNormMode,
    ) -> Result<Var> {
        let (v, saved) = norm::batchnorm_forward(
            x,
            self.value(x),
            gamma,
            self.value(gamma),
            beta,
            self.value(beta),
            channel_axis,
            stats,
            mode,
        )?;
        self.push("batchnorm", v, Op::BatchNorm(Box::new(saved)), &[x, gamma, beta])
    }

    /// Adds `bias[c]` to every element whose index along `axis` is `c`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let v = norm::add_bias(self.value(x), self.value(bias), axis)?;
        self.push("add_bias", v, Op::AddBias(x, bias, axis), &[x, bias])
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: lv.shape().to_vec() });
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(TensorError::DetachedGraph);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            for (target, contribution) in self.adjoint(node, &g)? {
                if !self.nodes[target.0].needs_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += *c;
                        }
                    }
                    slot => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn adjoint(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    out.push((*a, g.zip_map(val(*b), |x, y| x * y)?));
                }
                if want(*b) {
                    out.push((*b, g.zip_map(val(*a), |x, y| x * y)?));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.map(|x| x * *s))),
            Op::Sum(a) => {
                let gv = g.item()?;
                out.push((*a, Tensor::full(val(*a).shape().to_vec(), gv)));
            }
            Op::L1(a) => {
                let gv = g.item()?;
                out.push((*a, val(*a).map(|x| gv * sign(x))));
            }
            Op::Relu(a) => {
                out.push((*a, g.zip_map(val(*a), |gv, x| if x > T::zero() { gv } else { T::zero() })?));
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if want(*a) {
                    let mut da = vec![T::zero(); m * k];
                    // dA = dC B^T
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        (n as isize, 1),
                        bv.data(),
                        (1, n as isize),
                        T::zero(),
                        &mut da,
                        (k as isize, 1),
                    );
                    out.push((*a, Tensor::new([m, k], da)?));
                }
                if want(*b) {
                    let mut db = vec![T::zero(); k * n];
                    // dB = A^T dC
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av.data(),
                        (1, k as isize),
                        g.data(),
                        (n as isize, 1),
                        T::zero(),
                        &mut db,
                        (n as isize, 1),
                    );
                    out.push((*b, Tensor::new([k, n], db)?));
                }
            }
            Op::Reshape(a) => out.push((*a, g.clone().reshape(val(*a).shape().to_vec())?)),
            Op::Remap(a, src) => {
                let mut d = vec![T::zero(); val(*a).numel()];
                for (&s, &gv) in src.iter().zip(g.data()) {
                    d[s] += gv;
                }
                out.push((*a, Tensor::new(val(*a).shape().to_vec(), d)?));
            }
            Op::Sparse(a, op) => out.push((*a, op.apply_transpose(g, val(*a).shape())?)),
            Op::Correlate(x, w, geom) => {
                if want(*x) {
                    out.push((*x, conv::backward_input(g, val(*w), geom)?));
                }
                if want(*w) {
                    out.push((*w, conv::backward_kernel(val(*x), g, geom)?));
                }
            }
            Op::TransposeCorrelate(x, w, geom) => {
                // y = C_w^T x, so dx = C_w dy and dw comes from <C_w dy, x>.
                if want(*x) {
                    out.push((*x, conv::forward(g, val(*w), geom)?));
                }
                if want(*w) {
                    out.push((*w, conv::backward_kernel(g, val(*x), geom)?));
                }
            }
            Op::MaxPool2x2(a, argmax) | Op::MaxTrailing(a, argmax) => {
                let mut d = vec![T::zero(); val(*a).numel()];
                for (&s, &gv) in argmax.iter().zip(g.data()) {
                    d[s] += gv;
                }
                out.push((*a, Tensor::new(val(*a).shape().to_vec(), d)?));
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let gv = g.item()?;
                let shape = val(*logits).shape().to_vec();
                let (b, k) = (shape[0], shape[1]);
                let scale = gv / T::lit(b as f64);
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                out.push((*logits, Tensor::new(shape, d)?));
            }
            Op::BatchNorm(saved) => {
                let (dx, dgamma, dbeta) = norm::batchnorm_backward(saved, g, val(saved.x), val(saved.gamma))?;
                out.push((saved.x, dx));
                out.push((saved.gamma, dgamma));
                out.push((saved.beta, dbeta));
            }
            Op::AddBias(x, b, axis) => {
                out.push((*x, g.clone()));
                if want(*b) {
                    out.push((*b, norm::bias_grad(g, val(*b).numel(), *axis)));
                }
            }
        }
        Ok(out)
    }
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
