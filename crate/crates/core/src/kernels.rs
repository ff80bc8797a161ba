//! Raw loops behind the differentiable primitives. Everything here works on
//! flat row-major slices; shape checking happens in the callers.

/// `out(m,n) += a(m,k) · b(k,n)`
pub(crate) fn matmul_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out(m,n) += a(p,m)ᵀ · b(p,n)`
pub(crate) fn matmul_at_b_acc(a: &[f32], b: &[f32], out: &mut [f32], p: usize, m: usize, n: usize) {
    for r in 0..p {
        let b_row = &b[r * n..(r + 1) * n];
        for (i, &av) in a[r * m..(r + 1) * m].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out(m,n) += a(m,k) · b(n,k)ᵀ`
pub(crate) fn matmul_a_bt_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0f32;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// Geometry of a stride-1 square-kernel convolution over one sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    pub fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.positions()
    }
}

/// Unfolds one sample into a `(cin·k·k, oh·ow)` patch matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = g.positions();
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy + ky;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < g.pad || iy - g.pad >= g.h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * g.h + iy - g.pad) * g.w..(ci * g.h + iy - g.pad + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox + kx;
                        *v = if ix < g.pad || ix - g.pad >= g.w {
                            0.0
                        } else {
                            src[ix - g.pad]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the input.
pub(crate) fn col2im_acc(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = g.positions();
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let base = (ci * g.h + iy - g.pad) * g.w;
                    for ox in 0..ow {
                        let ix = ox + kx;
                        if ix < g.pad || ix - g.pad >= g.w {
                            continue;
                        }
                        dx[base + ix - g.pad] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Forward convolution of a batch. `weight` is `(cout, cin, k, k)`.
pub(crate) fn conv2d_forward(x: &[f32], weight: &[f32], bias: &[f32], g: &ConvGeom, batch: usize) -> Vec<f32> {
    let p = g.positions();
    let mut out = vec![0.0; batch * g.out_len()];
    let mut cols = vec![0.0; g.patch() * p];
    for n in 0..batch {
        im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], g, &mut cols);
        let o = &mut out[n * g.out_len()..(n + 1) * g.out_len()];
        for (co, &b) in bias.iter().enumerate() {
            o[co * p..(co + 1) * p].fill(b);
        }
        matmul_acc(weight, &cols, o, g.cout, g.patch(), p);
    }
    out
}

/// Accumulates input, weight and bias gradients of a batch convolution.
/// Any of the outputs may be skipped by passing `None`.
pub(crate) fn conv2d_backward(
    x: &[f32],
    weight: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    batch: usize,
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
    mut db: Option<&mut [f32]>,
) {
    let p = g.positions();
    let mut cols = vec![0.0; g.patch() * p];
    for n in 0..batch {
        let dyn_ = &dy[n * g.out_len()..(n + 1) * g.out_len()];
        if let Some(db) = db.as_deref_mut() {
            for (co, d) in db.iter_mut().enumerate() {
                *d += dyn_[co * p..(co + 1) * p].iter().sum::<f32>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], g, &mut cols);
            matmul_a_bt_acc(dyn_, &cols, dw, g.cout, p, g.patch());
        }
        if let Some(dx) = dx.as_deref_mut() {
            cols.fill(0.0);
            matmul_at_b_acc(weight, dyn_, &mut cols, g.cout, g.patch(), p);
            col2im_acc(&cols, g, &mut dx[n * g.in_len()..(n + 1) * g.in_len()]);
        }
    }
}

/// 2×2 stride-2 max pooling over `(planes, h, w)`; odd trailing rows and
/// columns are dropped. Returns the pooled values and, for each output, the
/// flat input index that won (first maximum in scan order).
pub(crate) fn max_pool2(x: &[f32], planes: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for c in 0..planes {
        let base = c * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// Numerically stable per-row log-softmax cross-entropy. Returns the
/// per-row losses and the softmax probabilities.
pub(crate) fn softmax_cross_entropy(logits: &[f32], classes: usize, labels: &[usize]) -> (Vec<f32>, Vec<f32>) {
    let mut losses = Vec::with_capacity(labels.len());
    let mut probs = vec![0.0; logits.len()];
    for (r, &y) in labels.iter().enumerate() {
        let z = &logits[r * classes..(r + 1) * classes];
        let max = z.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let p = &mut probs[r * classes..(r + 1) * classes];
        let mut total = 0.0f32;
        for (pi, &zi) in p.iter_mut().zip(z) {
            *pi = (zi - max).exp();
            total += *pi;
        }
        for pi in p.iter_mut() {
            *pi /= total;
        }
        losses.push(total.ln() - (z[y] - max));
    }
    (losses, probs)
}
