//! Wengert-list tape: operations are recorded in execution order and
//! replayed in reverse to accumulate gradients.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Result, TensorError};
use crate::kernels::{self, Conv2dSpec, ConvGeometry};
use crate::real::{Real, Strides};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

/// Backward rule of a user-supplied operation: receives the input values,
/// the output value and the upstream gradient, returns one gradient per input.
pub type CustomBackward<F> = Box<dyn Fn(&[&Tensor<F>], &Tensor<F>, &Tensor<F>) -> Vec<Tensor<F>> + Send + Sync>;

enum Op<F> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    Conv2d {
        x: usize,
        k: usize,
        bias: Option<usize>,
        geo: ConvGeometry,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, F),
    Concat(usize, usize),
    Mse {
        y: usize,
        t: usize,
        n: F,
    },
    L2Norm(usize),
    Sum(usize),
    Reshape(usize),
    LeakyRelu(usize, F),
    Custom {
        inputs: Vec<usize>,
        backward: CustomBackward<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records differentiable operations for one forward pass.
pub struct Tape<F: Real> {
    id: usize,
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<F> {
    tape: usize,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss with respect to `v`, if `v` requires grad and is
    /// reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but yields zeros for unreachable tensors.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<F> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable tensor.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Copies `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.node(v)?.value.clone();
        Ok(self.constant(value))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.node(v).expect("var belongs to this tape").value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    fn node(&self, v: Var) -> Result<&Node<F>> {
        if v.tape != self.id {
            return Err(TensorError::DetachedTensor);
        }
        self.nodes.get(v.index).ok_or(TensorError::DetachedTensor)
    }

    fn push_unchecked(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn idx(&self, v: Var) -> Result<usize> {
        self.node(v).map(|_| v.index)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = kernels::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        self.push("matmul", out, Op::MatMul(ia, ib), &[ia, ib])
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = kernels::transpose2d(&self.nodes[ix].value)?;
        self.push("transpose2d", out, Op::Transpose(ix), &[ix])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = kernels::softmax_rows(&self.nodes[ix].value)?;
        self.push("softmax_rows", out, Op::SoftmaxRows(ix), &[ix])
    }

    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (ix, ik) = (self.idx(x)?, self.idx(k)?);
        let ib = bias.map(|b| self.idx(b)).transpose()?;
        let geo = ConvGeometry::new(self.nodes[ix].value.shape(), self.nodes[ik].value.shape(), spec)?;
        if let Some(ib) = ib {
            let bshape = self.nodes[ib].value.shape();
            if bshape != [geo.c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![geo.c_out],
                    rhs: bshape.to_vec(),
                });
            }
        }
        let out = kernels::conv2d_with(
            &geo,
            self.nodes[ix].value.data(),
            self.nodes[ik].value.data(),
            ib.map(|i| self.nodes[i].value.data()),
        );
        let mut inputs = vec![ix, ik];
        inputs.extend(ib);
        self.push(
            "conv2d",
            out,
            Op::Conv2d {
                x: ix,
                k: ik,
                bias: ib,
                geo,
            },
            &inputs,
        )
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F, op: impl FnOnce(usize, usize) -> Op<F>) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.zip_map(&self.nodes[ib].value, name, f)?;
        self.push(name, out, op(ia, ib), &[ia, ib])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Element-wise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("hadamard", a, b, |x, y| x * y, Op::Hadamard)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.map(|v| v * s);
        self.push("scale", out, Op::Scale(ix, s), &[ix])
    }

    /// Concatenates along the leading axis (channels for `C×H×W` tensors).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.rank() != vb.rank() || va.shape()[1..] != vb.shape()[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut shape = va.shape().to_vec();
        shape[0] += vb.shape()[0];
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let out = Tensor::from_parts_unchecked(shape, data);
        self.push("concat_channels", out, Op::Concat(ia, ib), &[ia, ib])
    }

    /// Squared L2 distance between `y` and `t` divided by `n`.
    pub fn mse(&mut self, y: Var, t: Var, n: usize) -> Result<Var> {
        let (iy, it) = (self.idx(y)?, self.idx(t)?);
        let (vy, vt) = (&self.nodes[iy].value, &self.nodes[it].value);
        vy.check_same_shape(vt, "mse")?;
        let n = F::from_usize(n.max(1)).expect("count fits");
        let total: F = vy.data().iter().zip(vt.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        self.push("mse", Tensor::scalar(total / n), Op::Mse { y: iy, t: it, n }, &[iy, it])
    }

    pub fn l2_norm(&mut self, w: Var) -> Result<Var> {
        let iw = self.idx(w)?;
        let out = Tensor::scalar(self.nodes[iw].value.norm_l2());
        self.push("l2_norm", out, Op::L2Norm(iw), &[iw])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = Tensor::scalar(self.nodes[ix].value.sum());
        self.push("sum", out, Op::Sum(ix), &[ix])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.reshape(shape)?;
        self.push("reshape", out, Op::Reshape(ix), &[ix])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = kernels::leaky_relu(&self.nodes[ix].value, slope);
        self.push("leaky_relu", out, Op::LeakyRelu(ix, slope), &[ix])
    }

    /// Records an operation whose value was computed outside the tape.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<F>, backward: CustomBackward<F>) -> Result<Var> {
        let idx = inputs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        self.push(
            "custom",
            value,
            Op::Custom {
                inputs: idx.clone(),
                backward,
            },
            &idx,
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// where a tensor feeds several consumers.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let root = self.node(loss)?;
        if !root.value.is_scalar() {
            return Err(TensorError::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(TensorError::DetachedTensor);
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(loss.index + 1);
        grads.resize_with(loss.index + 1, || None);
        grads[loss.index] = Some(vec![F::one()]);

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            tape: self.id,
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| {
                    let node = &self.nodes[i];
                    g.filter(|_| node.requires_grad)
                        .map(|g| Tensor::from_parts_unchecked(node.value.shape().to_vec(), g))
                })
                .collect(),
        })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2("matmul").expect("recorded");
                let n = val(*b).shape()[1];
                if self.wants(*a) {
                    let slot = slot(grads, *a, m * k);
                    F::gemm(
                        m,
                        n,
                        k,
                        g,
                        Strides::row_major(n),
                        val(*b).data(),
                        Strides::transposed(n),
                        F::one(),
                        slot,
                    );
                }
                if self.wants(*b) {
                    let slot = slot(grads, *b, k * n);
                    F::gemm(
                        k,
                        m,
                        n,
                        val(*a).data(),
                        Strides::transposed(k),
                        g,
                        Strides::row_major(n),
                        F::one(),
                        slot,
                    );
                }
            }
            Op::Transpose(x) => {
                let (r, c) = val(*x).dims2("transpose2d").expect("recorded");
                // upstream is c×r; transposing it back gives r×c
                let slot = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        slot[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let cols = node.value.shape()[1];
                let y = node.value.data();
                let slot = slot(grads, *x, y.len());
                for ((yr, gr), sr) in y.chunks(cols).zip(g.chunks(cols)).zip(slot.chunks_mut(cols)) {
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((s, &yv), &gv) in sr.iter_mut().zip(yr).zip(gr) {
                        *s += yv * (gv - dot);
                    }
                }
            }
            Op::Conv2d { x, k, bias, geo } => {
                let want_b = bias.is_some_and(|b| self.wants(b));
                let cg = kernels::conv2d_backward(geo, val(*x).data(), val(*k).data(), g, (self.wants(*x), self.wants(*k), want_b));
                if let Some(dx) = cg.dx {
                    accumulate(grads, *x, &dx);
                }
                if let Some(dk) = cg.dk {
                    accumulate(grads, *k, &dk);
                }
                if let (Some(db), Some(b)) = (cg.dbias, bias) {
                    accumulate(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                for &i in [a, b] {
                    if self.wants(i) {
                        accumulate(grads, i, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g);
                }
                if self.wants(*b) {
                    let slot = slot(grads, *b, g.len());
                    for (s, &v) in slot.iter_mut().zip(g) {
                        *s -= v;
                    }
                }
            }
            Op::Hadamard(a, b) => {
                for (i, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(i) {
                        let o = val(other).data();
                        let slot = slot(grads, i, g.len());
                        for ((s, &gv), &ov) in slot.iter_mut().zip(g).zip(o) {
                            *s += gv * ov;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                let slot = slot(grads, *x, g.len());
                for (d, &gv) in slot.iter_mut().zip(g) {
                    *d += gv * *s;
                }
            }
            Op::Concat(a, b) => {
                let split = val(*a).numel();
                if self.wants(*a) {
                    accumulate(grads, *a, &g[..split]);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, &g[split..]);
                }
            }
            Op::Mse { y, t, n } => {
                let coef = g[0] * F::from_f64_lossy(2.0) / *n;
                let (vy, vt) = (val(*y).data(), val(*t).data());
                if self.wants(*y) {
                    let slot = slot(grads, *y, vy.len());
                    for ((s, &a), &b) in slot.iter_mut().zip(vy).zip(vt) {
                        *s += coef * (a - b);
                    }
                }
                if self.wants(*t) {
                    let slot = slot(grads, *t, vt.len());
                    for ((s, &a), &b) in slot.iter_mut().zip(vy).zip(vt) {
                        *s -= coef * (a - b);
                    }
                }
            }
            Op::L2Norm(w) => {
                let norm = node.value.data()[0];
                let vw = val(*w).data();
                let slot = slot(grads, *w, vw.len());
                // zero vector: subgradient 0
                if norm > F::zero() {
                    let coef = g[0] / norm;
                    for (s, &v) in slot.iter_mut().zip(vw) {
                        *s += coef * v;
                    }
                }
            }
            Op::Sum(x) => {
                let slot = slot(grads, *x, val(*x).numel());
                for s in slot.iter_mut() {
                    *s += g[0];
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, g),
            Op::LeakyRelu(x, slope) => {
                let vx = val(*x).data();
                let slot = slot(grads, *x, vx.len());
                for ((s, &v), &gv) in slot.iter_mut().zip(vx).zip(g) {
                    *s += if v >= F::zero() { gv } else { gv * *slope };
                }
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor<F>> = inputs.iter().map(|&i| val(i)).collect();
                let upstream = Tensor::from_parts_unchecked(node.value.shape().to_vec(), g.to_vec());
                let gs = backward(&vals, &node.value, &upstream);
                for (&i, gi) in inputs.iter().zip(&gs) {
                    if self.wants(i) {
                        accumulate(grads, i, gi.data());
                    }
                }
            }
        }
    }
}

fn slot<F: Real>(grads: &mut [Option<Vec<F>>], i: usize, len: usize) -> &mut [F] {
    grads[i].get_or_insert_with(|| vec![F::zero(); len])
}

fn accumulate<F: Real>(grads: &mut [Option<Vec<F>>], i: usize, g: &[F]) {
    let s = slot(grads, i, g.len());
    for (d, &v) in s.iter_mut().zip(g) {
        *d += v;
    }
}
