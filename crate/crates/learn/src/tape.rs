//! Reverse-mode differentiation over a fixed set of tensor operators.
//!
//! Every operator appends a node holding its value and whatever it needs for
//! the backward pass. [`Tape::backward`] walks the nodes in reverse creation
//! order, so the accumulation order is fixed and results are reproducible.

use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, cols: Vec<f64> },
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    AddConst(Var),
    Channels { x: Var, start: usize },
    SumSquares(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// `c = alpha · op(a) · op(b) + beta · c` for row-major operands described
/// by `(rows, cols)` and explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the callers pass buffers whose extents match (m, k, n) and the
    // given strides; c is exclusively borrowed and row-major m × n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lays out `k × k` zero-padded neighbourhoods of a `[c, h, w]` input as the
/// rows of a `[c·k·k, h·w]` matrix.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let y_lo = (-dy).max(0) as usize;
                let y_hi = (h as isize - dy).min(h as isize).max(0) as usize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in y_lo..y_hi {
                    let sy = (y as isize + dy) as usize;
                    let src = &plane[sy * w..(sy + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    for x in x_lo..x_hi {
                        dst[x] = src[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let y_lo = (-dy).max(0) as usize;
                let y_hi = (h as isize - dy).min(h as isize).max(0) as usize;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in y_lo..y_hi {
                    let sy = (y as isize + dy) as usize;
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy * w..(sy + 1) * w];
                    for xx in x_lo..x_hi {
                        dst[(xx as isize + dx) as usize] += src[xx];
                    }
                }
            }
        }
    }
    x
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Input or parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Same-padded 2D convolution of `x: [cin, h, w]` with
    /// `w: [cout, cin, k, k]` (odd `k`) and bias `b: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        assert_eq!(xs.len(), 3, "conv input must be [c, h, w]");
        assert_eq!(ws.len(), 4, "conv weight must be [cout, cin, k, k]");
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv channel mismatch");
        assert_eq!(ws[3], k);
        assert!(k % 2 == 1, "conv kernel must be odd");
        assert_eq!(self.value(b).shape(), [cout]);
        let hw = h * wd;
        let ck = cin * k * k;
        let cols = im2col(self.value(x).data(), cin, h, wd, k);
        let mut out = vec![0.0; cout * hw];
        for (o, row) in out.chunks_exact_mut(hw).enumerate() {
            row.fill(self.value(b).data()[o]);
        }
        gemm(cout, ck, hw, self.value(w).data(), (ck as isize, 1), &cols, (hw as isize, 1), &mut out, 1.0);
        self.push(Tensor::new(vec![cout, h, wd], out), Op::Conv2d { x, w, b, cols })
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data);
        self.push(value, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    /// 2×2 average pooling of `[c, h, w]` (even `h`, `w`).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2]];
        assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let src = t.data();
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = ci * h * w + 2 * y * w + 2 * xx;
                    out[(ci * oh + y) * ow + xx] =
                        0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
                }
            }
        }
        self.push(Tensor::new(vec![c, oh, ow], out), Op::AvgPool2(x))
    }

    /// Nearest-neighbour 2× upsampling of `[c, h, w]`.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2]];
        let src = t.data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ci * oh + y) * ow + xx] = src[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(Tensor::new(vec![c, oh, ow], out), Op::Upsample2(x))
    }

    /// Channel concatenation `[a; b]` of two `[c, h, w]` tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape()[1..], tb.shape()[1..], "concat spatial mismatch");
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let shape = vec![ta.shape()[0] + tb.shape()[0], ta.shape()[1], ta.shape()[2]];
        self.push(Tensor::new(shape, data), Op::Concat(a, b))
    }

    /// Channels `start..end` of a `[c, h, w]` tensor.
    pub fn channels(&mut self, x: Var, start: usize, end: usize) -> Var {
        let t = self.value(x);
        let plane = t.shape()[1] * t.shape()[2];
        assert!(start < end && end <= t.shape()[0]);
        let data = t.data()[start * plane..end * plane].to_vec();
        let shape = vec![end - start, t.shape()[1], t.shape()[2]];
        self.push(Tensor::new(shape, data), Op::Channels { x, start })
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "element-wise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Element-wise product with a constant of the same length.
    pub fn mul_const(&mut self, x: Var, c: &[f64]) -> Var {
        let t = self.value(x);
        assert_eq!(t.len(), c.len());
        let data = t.data().iter().zip(c).map(|(a, b)| a * b).collect();
        let value = Tensor::new(t.shape().to_vec(), data);
        self.push(value, Op::MulConst(x, c.to_vec()))
    }

    /// Element-wise sum with a constant of the same length.
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Var {
        let t = self.value(x);
        assert_eq!(t.len(), c.len());
        let data = t.data().iter().zip(c).map(|(a, b)| a + b).collect();
        let value = Tensor::new(t.shape().to_vec(), data);
        self.push(value, Op::AddConst(x))
    }

    /// `Σ x²` as a scalar.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x))
    }

    /// Gradients of the scalar `root` with respect to every leaf; `None` for
    /// leaves that do not influence it and for all interior nodes.
    pub fn backward(&self, root: Var) -> Vec<Option<Tensor>> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            let like = |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape().to_vec(), data);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b, cols } => {
                    let ws = self.value(*w).shape();
                    let (cout, cin, k) = (ws[0], ws[1], ws[2]);
                    let xs = self.value(*x).shape();
                    let (h, wd) = (xs[1], xs[2]);
                    let hw = h * wd;
                    let ck = cin * k * k;
                    let gd = g.data();
                    let db: Vec<f64> = gd.chunks_exact(hw).map(|r| r.iter().sum()).collect();
                    let mut dw = vec![0.0; cout * ck];
                    // dW = dOut · colsᵀ
                    gemm(cout, hw, ck, gd, (hw as isize, 1), cols, (1, hw as isize), &mut dw, 0.0);
                    // dCols = Wᵀ · dOut
                    let mut dcols = vec![0.0; ck * hw];
                    gemm(ck, cout, hw, self.value(*w).data(), (1, ck as isize), gd, (hw as isize, 1), &mut dcols, 0.0);
                    let dx = col2im(&dcols, cin, h, wd, k);
                    acc(&mut grads, *x, like(*x, dx));
                    acc(&mut grads, *w, like(*w, dw));
                    acc(&mut grads, *b, like(*b, db));
                }
                Op::Relu(x) => {
                    let d = self.value(*x).data().iter().zip(g.data()).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect();
                    acc(&mut grads, *x, like(*x, d));
                }
                Op::Softplus(x) => {
                    let d = self.value(*x).data().iter().zip(g.data()).map(|(&v, &gv)| gv * sigmoid(v)).collect();
                    acc(&mut grads, *x, like(*x, d));
                }
                Op::Exp(x) => {
                    let d = node.value.data().iter().zip(g.data()).map(|(&v, &gv)| gv * v).collect();
                    acc(&mut grads, *x, like(*x, d));
                }
                Op::Scale(x, s) => {
                    let d = g.data().iter().map(|gv| gv * s).collect();
                    acc(&mut grads, *x, like(*x, d));
                }
                Op::AvgPool2(x) => {
                    let xs = self.value(*x).shape();
                    let [c, h, w] = [xs[0], xs[1], xs[2]];
                    let (oh, ow) = (h / 2, w / 2);
                    let mut d = vec![0.0; c * h * w];
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                d[(ci * h + y) * w + xx] = 0.25 * g.data()[(ci * oh + y / 2) * ow + xx / 2];
                            }
                        }
                    }
                    acc(&mut grads, *x, like(*x, d));
                }
                Op::Upsample2(x) => {
                    let xs = self.value(*x).shape();
                    let [c, h, w] = [xs[0], xs[1], xs[2]];
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut d = vec![0.0; c * h * w];
                    for ci in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                d[(ci * h + y / 2) * w + xx / 2] += g.data()[(ci * oh + y) * ow + xx];
                            }
                        }
                    }
                    acc(&mut grads, *x, like(*x, d));
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).len();
                    acc(&mut grads, *a, like(*a, g.data()[..na].to_vec()));
                    acc(&mut grads, *b, like(*b, g.data()[na..].to_vec()));
                }
                Op::Channels { x, start } => {
                    let xs = self.value(*x).shape();
                    let plane = xs[1] * xs[2];
                    let mut d = vec![0.0; self.value(*x).len()];
                    d[start * plane..start * plane + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *x, like(*x, d));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.scaled(-1.0));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.data().iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    let db = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    acc(&mut grads, *a, like(*a, da));
                    acc(&mut grads, *b, like(*b, db));
                }
                Op::MulConst(x, c) => {
                    let d = g.data().iter().zip(c).map(|(a, b)| a * b).collect();
                    acc(&mut grads, *x, like(*x, d));
                }
                Op::AddConst(x) => acc(&mut grads, *x, g),
                Op::SumSquares(x) => {
                    let s = g.data()[0];
                    let d = self.value(*x).data().iter().map(|v| 2.0 * s * v).collect();
                    acc(&mut grads, *x, like(*x, d));
                }
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks the VJP of `op` through `L = Σ (g ⊙ op(inputs) + 0.5)²` for a
    /// random cotangent `g`, analytic gradient against central differences.
    fn check_vjp(shapes: &[Vec<usize>], seed: u64, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let cot = {
            let mut probe = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| probe.leaf(t.clone())).collect();
            let out = build(&mut probe, &vars);
            random(probe.value(out).shape(), &mut rng)
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let weighted = tape.mul_const(out, cot.data());
        let shifted = tape.add_const(weighted, &vec![0.5; cot.len()]);
        // Σ (g·y + 0.5)² has gradient 2(g·y + 0.5)·g; compare against that loss
        let loss_var = tape.sum_squares(shifted);
        let grads = tape.backward(loss_var);
        let loss_of = |inputs: &[Tensor]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
            let o = build(&mut t, &vs);
            t.value(o).data().iter().zip(cot.data()).map(|(y, g)| (g * y + 0.5).powi(2)).sum()
        };
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads[vars[k].index()].clone().unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
            for i in 0..input.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = analytic.data()[i];
                let tol = 1e-4 * fd.abs().max(an.abs()).max(1e-3);
                assert!((fd - an).abs() <= tol, "input {k} element {i}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn conv2d_vjp() {
        check_vjp(&[vec![2, 5, 4], vec![3, 2, 3, 3], vec![3]], 1, |t, v| t.conv2d(v[0], v[1], v[2]));
        check_vjp(&[vec![3, 4, 4], vec![2, 3, 1, 1], vec![2]], 2, |t, v| t.conv2d(v[0], v[1], v[2]));
        check_vjp(&[vec![1, 6, 6], vec![2, 1, 5, 5], vec![2]], 3, |t, v| t.conv2d(v[0], v[1], v[2]));
    }

    #[test]
    fn elementwise_vjps() {
        let s = vec![vec![2, 3, 4]];
        check_vjp(&s, 4, |t, v| t.relu(v[0]));
        check_vjp(&s, 5, |t, v| t.softplus(v[0]));
        check_vjp(&s, 6, |t, v| t.exp(v[0]));
        check_vjp(&s, 7, |t, v| t.scale(v[0], -2.5));
        check_vjp(&s, 8, |t, v| t.mul_const(v[0], &(0..24).map(|i| i as f64 * 0.1 - 1.0).collect::<Vec<_>>()));
        check_vjp(&s, 9, |t, v| t.add_const(v[0], &[0.3; 24]));
        check_vjp(&s, 10, |t, v| t.sum_squares(v[0]));
    }

    #[test]
    fn binary_vjps() {
        let s = vec![vec![2, 2, 4], vec![2, 2, 4]];
        check_vjp(&s, 11, |t, v| t.add(v[0], v[1]));
        check_vjp(&s, 12, |t, v| t.sub(v[0], v[1]));
        check_vjp(&s, 13, |t, v| t.mul(v[0], v[1]));
        check_vjp(&[vec![2, 2, 4], vec![3, 2, 4]], 14, |t, v| t.concat(v[0], v[1]));
        // a node used twice accumulates both contributions
        check_vjp(&[vec![1, 2, 2]], 15, |t, v| t.mul(v[0], v[0]));
    }

    #[test]
    fn resampling_vjps() {
        check_vjp(&[vec![2, 4, 6]], 16, |t, v| t.avg_pool2(v[0]));
        check_vjp(&[vec![2, 3, 2]], 17, |t, v| t.upsample2(v[0]));
        check_vjp(&[vec![4, 3, 3]], 18, |t, v| t.channels(v[0], 1, 3));
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let (x, w, b) = (random(&[2, 5, 6], &mut rng), random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng));
        let mut tape = Tape::new();
        let (vx, vw, vb) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
        let out = tape.conv2d(vx, vw, vb);
        for o in 0..3 {
            for y in 0..5 {
                for z in 0..6 {
                    let mut s = b.data()[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kz in 0..3 {
                                let (sy, sz) = (y as isize + ky as isize - 1, z as isize + kz as isize - 1);
                                if (0..5).contains(&sy) && (0..6).contains(&sz) {
                                    s += w.data()[((o * 2 + c) * 3 + ky) * 3 + kz] * x.data()[(c * 5 + sy as usize) * 6 + sz as usize];
                                }
                            }
                        }
                    }
                    assert!((tape.value(out).data()[(o * 5 + y) * 6 + z] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
    }
}
