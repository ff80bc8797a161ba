//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records each primitive as it is evaluated. Leaves are tagged
//! differentiable or not when they are created, so the same machinery serves
//! weight gradients during training and input gradients during an attack:
//! only the adjoints that lead to a differentiable leaf are ever computed.
//!
//! ```
//! use uap_sga::autodiff::Tape;
//! use uap_sga::Tensor;
//!
//! let w = Tensor::from_fn(&[2, 3], |i| i as f32);
//! let mut tape = Tape::new();
//! let v = tape.leaf(w, true);
//! let s = tape.sum(v);
//! let grads = tape.backward(s, &Tensor::full(&[], 1.0)).unwrap();
//! assert_eq!(grads.get(v).unwrap().data(), &[1.0; 6]);
//! ```

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Output keeps the input's spatial size; needs an odd kernel.
    Same,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    AddBroadcast { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { a: Var, c: f32 },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, batch: usize },
    MaxPool { x: Var, argmax: Vec<u32> },
    Relu { a: Var },
    Reshape { a: Var },
    Sum { a: Var },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f32> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass. Leaves may borrow their values
/// (network weights) for the lifetime `'a`.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    consumed: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, differentiable: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad: differentiable,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that borrows its value instead of copying it.
    pub fn leaf_ref(&mut self, value: &'a Tensor, differentiable: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad: differentiable,
        });
        Var(self.nodes.len() - 1)
    }

    /// `(m,k) · (k,n)`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Adds `b` to every leading-axis slice of `a`; `b`'s shape must equal
    /// the trailing dimensions of `a`. Serves both bias-add and `x + δ`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() + 1 || sa[1..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(bv.len().max(1)) {
            for (o, &x) in chunk.iter_mut().zip(bv) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::AddBroadcast { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale { a, c }, &[a])
    }

    /// Stride-1 convolution. `x` is `(n, cin, h, w)`, `w` is
    /// `(cout, cin, k, k)`, `b` is `(cout)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: Padding) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", sx, sw));
        }
        if sb != [sw[0]] {
            return Err(Error::shape("conv2d(bias)", sw, sb));
        }
        let k = sw[2];
        let pad = match padding {
            Padding::Valid => 0,
            Padding::Same if k % 2 == 1 => k / 2,
            Padding::Same => return Err(Error::shape("conv2d(same padding needs odd kernel)", sx, sw)),
        };
        if sx[2] + 2 * pad < k || sx[3] + 2 * pad < k {
            return Err(Error::shape("conv2d", sx, sw));
        }
        let geom = ConvGeom {
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            k,
            pad,
        };
        let batch = sx[0];
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
            batch,
        );
        let value = Tensor::new(vec![batch, geom.cout, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, batch }, &[x, w, b]))
    }

    /// 2×2 stride-2 max pooling over `(n, c, h, w)`.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("max_pool2", &s, &[2, 2]));
        }
        let (out, argmax) = kernels::max_pool2(self.value(x).data(), s[0] * s[1], s[2], s[3]);
        let value = Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu { a }, &[a])
    }

    /// `(n, ...)` to `(n, prod(...))`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() < 1 {
            return Err(Error::shape("flatten", t.shape(), &[]));
        }
        let shape = [t.rows(), t.row_len()];
        let out = t.clone().reshape(&shape)?;
        Ok(self.push(out, Op::Reshape { a }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::full(&[], self.value(a).sum());
        self.push(out, Op::Sum { a }, &[a])
    }

    /// Fused softmax and cross-entropy, averaged over rows. Produces a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || labels.is_empty() {
            return Err(Error::shape("softmax_cross_entropy", s, &[labels.len()]));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        let (losses, probs) = kernels::softmax_cross_entropy(self.value(logits).data(), classes, labels);
        let mean = losses.iter().sum::<f32>() / labels.len() as f32;
        let op = Op::SoftmaxCe {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::full(&[], mean), op, &[logits]))
    }

    /// Propagates `seed` (the adjoint of `output`) back to every
    /// differentiable leaf. A tape supports exactly one backward pass.
    pub fn backward(&mut self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::shape("backward(seed)", self.shape(output), seed.shape()));
        }
        self.consumed = true;

        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(seed.clone());

        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    adj[i] = Some(g);
                }
                Op::MatMul { a, b } => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if self.needs(*a) {
                        let mut da = vec![0.0; m * k];
                        kernels::matmul_a_bt_acc(g.data(), self.value(*b).data(), &mut da, m, n, k);
                        accumulate(&mut adj, *a, Tensor::new(vec![m, k], da)?)?;
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; k * n];
                        kernels::matmul_at_b_acc(self.value(*a).data(), g.data(), &mut db, m, k, n);
                        accumulate(&mut adj, *b, Tensor::new(vec![k, n], db)?)?;
                    }
                }
                Op::AddBroadcast { a, b } => {
                    if self.needs(*b) {
                        let width = self.value(*b).len();
                        let mut db = vec![0.0; width];
                        for chunk in g.data().chunks(width.max(1)) {
                            for (d, &x) in db.iter_mut().zip(chunk) {
                                *d += x;
                            }
                        }
                        accumulate(&mut adj, *b, Tensor::new(self.shape(*b).to_vec(), db)?)?;
                    }
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, g)?;
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, g.clone())?;
                    }
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, g)?;
                    }
                }
                Op::Scale { a, c } => {
                    accumulate(&mut adj, *a, g.scale(*c))?;
                }
                Op::Conv2d { x, w, b, geom, batch } => {
                    let mut dx = self.needs(*x).then(|| vec![0.0; batch * geom.in_len()]);
                    let mut dw = self.needs(*w).then(|| vec![0.0; self.value(*w).len()]);
                    let mut db = self.needs(*b).then(|| vec![0.0; geom.cout]);
                    kernels::conv2d_backward(
                        self.value(*x).data(),
                        self.value(*w).data(),
                        g.data(),
                        geom,
                        *batch,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut adj, *x, Tensor::new(self.shape(*x).to_vec(), dx)?)?;
                    }
                    if let Some(dw) = dw {
                        accumulate(&mut adj, *w, Tensor::new(self.shape(*w).to_vec(), dw)?)?;
                    }
                    if let Some(db) = db {
                        accumulate(&mut adj, *b, Tensor::new(self.shape(*b).to_vec(), db)?)?;
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = Tensor::zeros(self.shape(*x));
                    let d = dx.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        d[src as usize] += gv;
                    }
                    accumulate(&mut adj, *x, dx)?;
                }
                Op::Relu { a } => {
                    let input = self.value(*a).data();
                    let mut d = g;
                    for (dv, &x) in d.data_mut().iter_mut().zip(input) {
                        if x <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accumulate(&mut adj, *a, d)?;
                }
                Op::Reshape { a } => {
                    let shape = self.shape(*a).to_vec();
                    accumulate(&mut adj, *a, g.reshape(&shape)?)?;
                }
                Op::Sum { a } => {
                    let s = g.data()[0];
                    accumulate(&mut adj, *a, Tensor::full(self.shape(*a), s))?;
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    let classes = self.shape(*logits)[1];
                    let scale = g.data()[0] / labels.len() as f32;
                    let mut d = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        d[r * classes + y] -= 1.0;
                    }
                    for v in d.iter_mut() {
                        *v *= scale;
                    }
                    accumulate(&mut adj, *logits, Tensor::new(self.shape(*logits).to_vec(), d)?)?;
                }
            }
        }

        let mut grads = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = adj[i].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                grads.push((Var(i), g));
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Gradients of every differentiable leaf, keyed by its [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.iter().find(|(k, _)| *k == v).map(|(_, g)| g)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        let pos = self.grads.iter().position(|(k, _)| *k == v)?;
        Some(self.grads.swap_remove(pos).1)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
