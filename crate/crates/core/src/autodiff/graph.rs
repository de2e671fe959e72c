//! Tape-based reverse-mode differentiation over a fixed operator set.
//!
//! Every node is recorded in evaluation order, so the backward sweep walks the
//! tape in reverse and accumulates adjoints into parents. Index-moving
//! operators (reshape, permute, pad, crop, roll, broadcast, window partition)
//! all reduce to [`Graph::gather`], whose adjoint is a scatter-add; reductions
//! reduce to [`Graph::segment_sum`], whose adjoint is a gather.

use std::rc::Rc;

use super::Tensor;
use crate::fft;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sentinel gather index producing an implicit zero (used for padding).
pub const ZERO: usize = usize::MAX;

#[derive(Debug, Clone, Copy)]
enum Unary {
    Sigmoid,
    Gelu,
    Abs,
    Exp,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Reshape(Var),
    Gather(Var, Rc<[usize]>),
    SegmentSum(Var, Rc<[usize]>),
    Concat(Vec<Var>),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool, b_batched: bool },
    Map(Var, Unary),
    Softmax(Var, usize),
    LayerNorm { x: Var, cols: usize, inv_std: Vec<f64> },
    BetaFilter { kappa: Var, modes: Rc<[f64]>, positions: Rc<[f64]> },
    Rfft2 { x: Var, batch: usize, h: usize, w: usize, c: usize },
    Irfft2 { x: Var, batch: usize, h: usize, w: usize, c: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation. Build values with the operator methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints of every node reachable from the differentiated output.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v` as a tensor; zeros when `v` does not influence the output.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * A * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(v) * coef` with the convention `0 * ln 0 = 0`.
fn xlogy(coef: f64, v: f64) -> f64 {
    if coef == 0.0 {
        0.0
    } else {
        coef * v.ln()
    }
}

/// Normalized Beta filter weight at normalized frequency `x` for mode `mode`
/// and spread `kappa`. Equals 1 at `x == mode` and lies in `[0, 1]`.
pub fn beta_weight(mode: f64, kappa: f64, x: f64) -> f64 {
    let a = mode * (kappa - 2.0);
    let b = (1.0 - mode) * (kappa - 2.0);
    // (x/mode)^a ((1-x)/(1-mode))^b, with 0^0 = 1
    let la = if a == 0.0 { 0.0 } else { a * (x / mode).ln() };
    let lb = if b == 0.0 { 0.0 } else { b * ((1.0 - x) / (1.0 - mode)).ln() };
    let l = la + lb;
    if l.is_nan() {
        return 0.0;
    }
    l.min(0.0).exp()
}

/// `d ln B / d kappa` of [`beta_weight`], finite wherever the weight is non-zero.
fn beta_dlog_dkappa(mode: f64, x: f64) -> f64 {
    xlogy(mode, x) + xlogy(1.0 - mode, 1.0 - x) - xlogy(mode, mode) - xlogy(1.0 - mode, 1.0 - mode)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise operands must share a shape");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let src = self.value(a);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| x * k).collect()).unwrap();
        self.push(t, Op::Scale(a, k))
    }

    /// Adds a constant tensor (no gradient flows into it). Entries may be `-inf`
    /// for attention masking.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let src = self.value(a);
        assert_eq!(src.shape(), c.shape());
        let t = Tensor::new(
            src.shape().to_vec(),
            src.data().iter().zip(c.data()).map(|(x, y)| x + y).collect(),
        )
        .unwrap();
        self.push(t, Op::Shift(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let src = self.value(a);
        let t = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| x + c).collect()).unwrap();
        self.push(t, Op::Shift(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshaped(shape).expect("reshape");
        self.push(t, Op::Reshape(a))
    }

    /// `out[i] = a[index[i]]`, or `0` where `index[i] == ZERO`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Var {
        assert_eq!(index.len(), shape.iter().product::<usize>(), "gather index/shape mismatch");
        let src = self.data(a);
        let data = index.iter().map(|&i| if i == ZERO { 0.0 } else { src[i] }).collect();
        let t = Tensor::new(shape.to_vec(), data).unwrap();
        self.push(t, Op::Gather(a, index.into()))
    }

    /// `out[map[i]] += a[i]`.
    pub fn segment_sum(&mut self, a: Var, map: Vec<usize>, shape: &[usize]) -> Var {
        let src = self.data(a);
        assert_eq!(map.len(), src.len());
        let mut data = vec![0.0; shape.iter().product()];
        for (x, &m) in src.iter().zip(&map) {
            data[m] += x;
        }
        let t = Tensor::new(shape.to_vec(), data).unwrap();
        self.push(t, Op::SegmentSum(a, map.into()))
    }

    /// Flat concatenation of the inputs' data, viewed with `shape`.
    pub fn concat(&mut self, parts: &[Var], shape: &[usize]) -> Var {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let t = Tensor::new(shape.to_vec(), data).expect("concat shape");
        self.push(t, Op::Concat(parts.to_vec()))
    }

    /// Permutes axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let shape = self.shape(a).to_vec();
        assert_eq!(axes.len(), shape.len());
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&i| shape[i]).collect();
        let n: usize = out_shape.iter().product();
        let mut index = Vec::with_capacity(n);
        let mut coord = vec![0usize; out_shape.len()];
        for _ in 0..n {
            let src: usize = coord.iter().zip(axes).map(|(c, &ax)| c * in_strides[ax]).sum();
            index.push(src);
            for d in (0..coord.len()).rev() {
                coord[d] += 1;
                if coord[d] < out_shape[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        self.gather(a, index, &out_shape)
    }

    /// Numpy-style broadcast of `a` to `shape` (trailing axes aligned).
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Var {
        let src_shape = self.shape(a).to_vec();
        assert!(src_shape.len() <= shape.len());
        let offset = shape.len() - src_shape.len();
        let src_strides = strides(&src_shape);
        let n: usize = shape.iter().product();
        let mut index = Vec::with_capacity(n);
        let mut coord = vec![0usize; shape.len()];
        for _ in 0..n {
            let mut src = 0;
            for (d, &c) in coord.iter().enumerate().skip(offset) {
                let sd = d - offset;
                if src_shape[sd] != 1 {
                    assert_eq!(src_shape[sd], shape[d], "broadcast mismatch");
                    src += c * src_strides[sd];
                }
            }
            index.push(src);
            for d in (0..coord.len()).rev() {
                coord[d] += 1;
                if coord[d] < shape[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        self.gather(a, index, shape)
    }

    /// `x + broadcast(b)`.
    pub fn add_bcast(&mut self, x: Var, b: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let bb = self.broadcast(b, &shape);
        self.add(x, bb)
    }

    /// `x * broadcast(b)`.
    pub fn mul_bcast(&mut self, x: Var, b: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let bb = self.broadcast(b, &shape);
        self.mul(x, bb)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().unwrap();
        let n = self.value(a).len();
        let map = (0..n).map(|i| i / cols).collect();
        self.segment_sum(a, map, &shape[..shape.len() - 1])
    }

    /// Mean over the axes in `axes` (must be a contiguous run), keeping the rest.
    pub fn mean_axes(&mut self, a: Var, first: usize, last: usize) -> Var {
        let shape = self.shape(a).to_vec();
        let outer: usize = shape[..first].iter().product();
        let mid: usize = shape[first..=last].iter().product();
        let inner: usize = shape[last + 1..].iter().product();
        let mut out_shape = shape[..first].to_vec();
        out_shape.extend_from_slice(&shape[last + 1..]);
        let map = (0..outer * mid * inner)
            .map(|i| {
                let o = i / (mid * inner);
                let r = i % inner;
                o * inner + r
            })
            .collect();
        let s = self.segment_sum(a, map, &out_shape);
        self.scale(s, 1.0 / mid as f64)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.segment_sum(a, vec![0; n], &[])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Batched matrix product. `a: [batch, m, k]`; `b: [batch, k, n]` (or
    /// `[batch, n, k]` with `trans_b`), or a shared 2D `b` when `b` has rank 2.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 3, "bmm lhs must be rank 3");
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let b_batched = sb.len() == 3;
        let (bk, bn) = match (b_batched, trans_b) {
            (true, false) => (sb[1], sb[2]),
            (true, true) => (sb[2], sb[1]),
            (false, false) => (sb[0], sb[1]),
            (false, true) => (sb[1], sb[0]),
        };
        if b_batched {
            assert_eq!(sb[0], batch, "bmm batch mismatch");
        }
        assert_eq!(k, bk, "bmm inner dimension mismatch");
        let n = bn;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; batch * m * n];
        for bt in 0..batch {
            let ao = bt * m * k;
            let bo = if b_batched { bt * k * n } else { 0 };
            let oo = bt * m * n;
            for i in 0..m {
                for p in 0..k {
                    let av = da[ao + i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        let bv = if trans_b { db[bo + j * k + p] } else { db[bo + p * n + j] };
                        out[oo + i * n + j] += av * bv;
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch, m, n], out).unwrap();
        self.push(t, Op::MatMul { a, b, batch, m, k, n, trans_b, b_batched })
    }

    /// `x @ w` applied to the last axis of `x` (any leading shape), `w: [k, n]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let sx = self.shape(x).to_vec();
        let k = *sx.last().unwrap();
        let rows = self.value(x).len() / k;
        let n = self.shape(w)[1];
        let x2 = self.reshape(x, &[1, rows, k]);
        let y = self.bmm(x2, w, false);
        let mut out_shape = sx[..sx.len() - 1].to_vec();
        out_shape.push(n);
        self.reshape(y, &out_shape)
    }

    /// `x @ w + b` on the last axis.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.linear(x, w);
        self.add_bcast(y, b)
    }

    fn map(&mut self, a: Var, u: Unary) -> Var {
        let src = self.value(a);
        let data = src
            .data()
            .iter()
            .map(|&x| match u {
                Unary::Sigmoid => sigmoid(x),
                Unary::Gelu => gelu(x).0,
                Unary::Abs => x.abs(),
                Unary::Exp => x.exp(),
            })
            .collect();
        let t = Tensor::new(src.shape().to_vec(), data).unwrap();
        self.push(t, Op::Map(a, u))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Unary::Sigmoid)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Unary::Gelu)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Unary::Abs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Unary::Exp)
    }

    /// Softmax over the last axis. `-inf` entries receive zero weight.
    pub fn softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let cols = *src.shape().last().unwrap();
        let mut data = src.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(src.shape().to_vec(), data).unwrap();
        self.push(t, Op::Softmax(a, cols))
    }

    /// Layer normalization over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let src = self.value(a);
        let cols = *src.shape().last().unwrap();
        let mut data = src.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / cols);
        for row in data.chunks_exact_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::new(src.shape().to_vec(), data).unwrap();
        self.push(t, Op::LayerNorm { x: a, cols, inv_std })
    }

    /// Beta filter bank evaluation. `kappa: [batch, N]` spreads; returns
    /// `[batch, B, N]` weights at the `B` normalized frequency `positions`.
    pub fn beta_filter(&mut self, kappa: Var, modes: &[f64], positions: &[f64]) -> Var {
        let ks = self.shape(kappa).to_vec();
        assert_eq!(ks.len(), 2);
        assert_eq!(ks[1], modes.len());
        let (batch, nf, nb) = (ks[0], modes.len(), positions.len());
        let kd = self.data(kappa);
        let mut out = vec![0.0; batch * nb * nf];
        for r in 0..batch {
            for (b, &x) in positions.iter().enumerate() {
                for (n, &mode) in modes.iter().enumerate() {
                    out[(r * nb + b) * nf + n] = beta_weight(mode, kd[r * nf + n], x);
                }
            }
        }
        let t = Tensor::new(vec![batch, nb, nf], out).unwrap();
        self.push(t, Op::BetaFilter { kappa, modes: modes.into(), positions: positions.into() })
    }

    /// Half-spectrum 2D transform over axes 1-2: `[batch, h, w, c]` to
    /// `[batch, 2, h, w/2+1, c]` (real plane then imaginary plane).
    pub fn rfft2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        let (batch, h, w, c) = (s[0], s[1], s[2], s[3]);
        let wf = fft::half_width(w);
        let src = self.data(x);
        let mut out = vec![0.0; batch * 2 * h * wf * c];
        let mut plane = vec![0.0; h * w];
        for b in 0..batch {
            for ch in 0..c {
                for (i, p) in plane.iter_mut().enumerate() {
                    *p = src[(b * h * w + i) * c + ch];
                }
                let (re, im) = fft::rfft2(&plane, h, w);
                for i in 0..h * wf {
                    out[((b * 2) * h * wf + i) * c + ch] = re[i];
                    out[((b * 2 + 1) * h * wf + i) * c + ch] = im[i];
                }
            }
        }
        let t = Tensor::new(vec![batch, 2, h, wf, c], out).unwrap();
        self.push(t, Op::Rfft2 { x, batch, h, w, c })
    }

    /// Inverse of [`Graph::rfft2`] for original width `w`.
    pub fn irfft2(&mut self, x: Var, w: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 5);
        assert_eq!(s[1], 2);
        let (batch, h, wf, c) = (s[0], s[2], s[3], s[4]);
        assert_eq!(wf, fft::half_width(w));
        let src = self.data(x);
        let mut out = vec![0.0; batch * h * w * c];
        let mut re = vec![0.0; h * wf];
        let mut im = vec![0.0; h * wf];
        for b in 0..batch {
            for ch in 0..c {
                for i in 0..h * wf {
                    re[i] = src[((b * 2) * h * wf + i) * c + ch];
                    im[i] = src[((b * 2 + 1) * h * wf + i) * c + ch];
                }
                let plane = fft::irfft2(&re, &im, h, w);
                for (i, v) in plane.into_iter().enumerate() {
                    out[(b * h * w + i) * c + ch] = v;
                }
            }
        }
        let t = Tensor::new(vec![batch, h, w, c], out).unwrap();
        self.push(t, Op::Irfft2 { x, batch, h, w, c })
    }

    /// Reverse sweep from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let len_of = |v: Var| self.nodes[v.0].value.len();
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (d, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += x;
                    }
                    for (d, x) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *d += x;
                    }
                }
                Op::Sub(a, b) => {
                    for (d, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += x;
                    }
                    for (d, x) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *d -= x;
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.data(*a), self.data(*b));
                    let ga: Vec<f64> = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    for (d, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&ga) {
                        *d += x;
                    }
                    for (d, x) in acc(&mut grads, *b, g.len()).iter_mut().zip(&gb) {
                        *d += x;
                    }
                }
                Op::Scale(a, k) => {
                    for (d, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += x * k;
                    }
                }
                Op::Shift(a) | Op::Reshape(a) => {
                    for (d, x) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += x;
                    }
                }
                Op::Gather(a, index) => {
                    let n = len_of(*a);
                    let d = acc(&mut grads, *a, n);
                    for (&ix, x) in index.iter().zip(&g) {
                        if ix != ZERO {
                            d[ix] += x;
                        }
                    }
                }
                Op::SegmentSum(a, map) => {
                    let n = len_of(*a);
                    let d = acc(&mut grads, *a, n);
                    for (dv, &m) in d.iter_mut().zip(map.iter()) {
                        *dv += g[m];
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = len_of(p);
                        for (d, x) in acc(&mut grads, p, n).iter_mut().zip(&g[off..off + n]) {
                            *d += x;
                        }
                        off += n;
                    }
                }
                Op::MatMul { a, b, batch, m, k, n, trans_b, b_batched } => {
                    let (batch, m, k, n) = (*batch, *m, *k, *n);
                    let (va, vb) = (self.data(*a), self.data(*b));
                    let mut ga = vec![0.0; va.len()];
                    let mut gb = vec![0.0; vb.len()];
                    for bt in 0..batch {
                        let ao = bt * m * k;
                        let bo = if *b_batched { bt * k * n } else { 0 };
                        let oo = bt * m * n;
                        for i in 0..m {
                            for j in 0..n {
                                let gij = g[oo + i * n + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    let bidx = if *trans_b { bo + j * k + p } else { bo + p * n + j };
                                    ga[ao + i * k + p] += gij * vb[bidx];
                                    gb[bidx] += gij * va[ao + i * k + p];
                                }
                            }
                        }
                    }
                    for (d, x) in acc(&mut grads, *a, ga.len()).iter_mut().zip(&ga) {
                        *d += x;
                    }
                    for (d, x) in acc(&mut grads, *b, gb.len()).iter_mut().zip(&gb) {
                        *d += x;
                    }
                }
                Op::Map(a, u) => {
                    let (x, y) = (self.data(*a), node.value.data());
                    let local: Vec<f64> = match u {
                        Unary::Sigmoid => y.iter().map(|s| s * (1.0 - s)).collect(),
                        Unary::Gelu => x.iter().map(|&v| gelu(v).1).collect(),
                        Unary::Abs => x.iter().map(|&v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }).collect(),
                        Unary::Exp => y.to_vec(),
                    };
                    for ((d, x), l) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(&local) {
                        *d += x * l;
                    }
                }
                Op::Softmax(a, cols) => {
                    let y = node.value.data();
                    let d = acc(&mut grads, *a, g.len());
                    for ((yr, gr), dr) in y.chunks_exact(*cols).zip(g.chunks_exact(*cols)).zip(d.chunks_exact_mut(*cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((dv, p), q) in dr.iter_mut().zip(yr).zip(gr) {
                            *dv += p * (q - dot);
                        }
                    }
                }
                Op::LayerNorm { x, cols, inv_std } => {
                    let y = node.value.data();
                    let cols = *cols;
                    let d = acc(&mut grads, *x, g.len());
                    for (r, ((yr, gr), dr)) in
                        y.chunks_exact(cols).zip(g.chunks_exact(cols)).zip(d.chunks_exact_mut(cols)).enumerate()
                    {
                        let mg = gr.iter().sum::<f64>() / cols as f64;
                        let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / cols as f64;
                        for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv += inv_std[r] * (gv - mg - yv * mgy);
                        }
                    }
                }
                Op::BetaFilter { kappa, modes, positions } => {
                    let y = node.value.data();
                    let (nf, nb) = (modes.len(), positions.len());
                    let n = len_of(*kappa);
                    let batch = n / nf;
                    let d = acc(&mut grads, *kappa, n);
                    for r in 0..batch {
                        for (b, &x) in positions.iter().enumerate() {
                            for (f, &mode) in modes.iter().enumerate() {
                                let o = (r * nb + b) * nf + f;
                                if y[o] == 0.0 || g[o] == 0.0 {
                                    continue;
                                }
                                d[r * nf + f] += g[o] * y[o] * beta_dlog_dkappa(mode, x);
                            }
                        }
                    }
                }
                Op::Rfft2 { x, batch, h, w, c } => {
                    let (batch, h, w, c) = (*batch, *h, *w, *c);
                    let wf = fft::half_width(w);
                    let d = acc(&mut grads, *x, batch * h * w * c);
                    let mut gr = vec![0.0; h * wf];
                    let mut gi = vec![0.0; h * wf];
                    for b in 0..batch {
                        for ch in 0..c {
                            for i in 0..h * wf {
                                gr[i] = g[((b * 2) * h * wf + i) * c + ch];
                                gi[i] = g[((b * 2 + 1) * h * wf + i) * c + ch];
                            }
                            let plane = fft::rfft2_adjoint(&gr, &gi, h, w);
                            for (i, v) in plane.into_iter().enumerate() {
                                d[(b * h * w + i) * c + ch] += v;
                            }
                        }
                    }
                }
                Op::Irfft2 { x, batch, h, w, c } => {
                    let (batch, h, w, c) = (*batch, *h, *w, *c);
                    let wf = fft::half_width(w);
                    let d = acc(&mut grads, *x, batch * 2 * h * wf * c);
                    let mut plane = vec![0.0; h * w];
                    for b in 0..batch {
                        for ch in 0..c {
                            for (i, p) in plane.iter_mut().enumerate() {
                                *p = g[(b * h * w + i) * c + ch];
                            }
                            let (re, im) = fft::irfft2_adjoint(&plane, h, w);
                            for i in 0..h * wf {
                                d[((b * 2) * h * wf + i) * c + ch] += re[i];
                                d[((b * 2 + 1) * h * wf + i) * c + ch] += im[i];
                            }
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Gradients { grads, shapes }
    }
}
