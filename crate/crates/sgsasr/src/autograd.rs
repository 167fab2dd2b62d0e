//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation applied to its variables and replays
//! them in reverse to accumulate gradients. The op set is deliberately small:
//! everything the network needs (convolutions, pixel rearrangement, padding,
//! nearest-latent gathers) is expressed through index-map gathers plus a
//! deterministic matrix multiply, so gradients stay exact and reproducible
//! bit-for-bit across runs regardless of tensor sizes.

use std::rc::Rc;

use ndarray::{Array2, ArrayD, ArrayViewD, Axis, IxDyn};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Abs(Var),
    /// `[m,k] x [k,n]` matrix product.
    Matmul(Var, Var),
    /// `x: [n,d] + b: [d]`, broadcast over rows.
    AddRowBias(Var, Var),
    /// `x: [c,h,w] + b: [c]`, broadcast over spatial dims.
    AddChanBias(Var, Var),
    /// `x: [c,h,w] * v: [c]`, broadcast over spatial dims.
    MulChans(Var, Var),
    /// `x * s` where `s` is a single-element tensor.
    ScaleVar(Var, Var),
    /// Mean over every element, result shape `[1]`.
    MeanAll(Var),
    /// `[c,h,w] -> [c]` spatial mean (global average pooling).
    MeanSpatial(Var),
    /// Flat index gather; entries of `-1` read as zero (used for padding).
    Gather { src: Var, map: Rc<Vec<i64>> },
    Narrow {
        src: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    /// 2-D transpose.
    Transpose2(Var),
    /// Layer normalization over the channel axis of `[c,h,w]`, per spatial
    /// location, with per-channel affine parameters.
    LayerNormChan {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    /// 3x3 depthwise convolution, stride 1, zero padding 1.
    /// `x: [c,h,w]`, `w: [c,9]`, `b: [c]`.
    DwConv3x3 {
        x: Var,
        w: Var,
        b: Var,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradient table produced by [`Tape::backward`].
pub struct Grads {
    g: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.g[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.g[v.0].take()
    }
}

/// Deterministic `a x b` for `a: [m,k]`, `b: [k,n]`.
///
/// Accumulation runs in a fixed k-order per output element and each output
/// row is independent, so results do not depend on the surrounding matrix
/// sizes. That property is load-bearing: several tests compare decodes that
/// batch the same rows differently and expect bit-identical pixels.
pub fn mm(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "mm: inner dims {k} vs {k2}");
    let mut out = Array2::<f64>::zeros((m, n));
    let a_s = a.as_slice().expect("mm: a not contiguous");
    let b_s = b.as_slice().expect("mm: b not contiguous");
    let o_s = out.as_slice_mut().unwrap();
    // four output rows share each loaded b row; per-element accumulation
    // order stays k-ascending
    let m4 = m / 4 * 4;
    for i in (0..m4).step_by(4) {
        let (r0, rest) = o_s[i * n..(i + 4) * n].split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, r3) = rest.split_at_mut(n);
        for kk in 0..k {
            let a0 = a_s[i * k + kk];
            let a1 = a_s[(i + 1) * k + kk];
            let a2 = a_s[(i + 2) * k + kk];
            let a3 = a_s[(i + 3) * k + kk];
            let brow = &b_s[kk * n..(kk + 1) * n];
            for j in 0..n {
                let bj = brow[j];
                r0[j] += a0 * bj;
                r1[j] += a1 * bj;
                r2[j] += a2 * bj;
                r3[j] += a3 * bj;
            }
        }
    }
    for i in m4..m {
        let orow = &mut o_s[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a_s[i * k + kk];
            let brow = &b_s[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

/// Deterministic `a x b^T` for `a: [m,k]`, `b: [n,k]`.
pub fn mm_nt(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let (n, k2) = b.dim();
    assert_eq!(k, k2, "mm_nt: inner dims {k} vs {k2}");
    let mut out = Array2::<f64>::zeros((m, n));
    let a_s = a.as_slice().expect("mm_nt: a not contiguous");
    let b_s = b.as_slice().expect("mm_nt: b not contiguous");
    let o_s = out.as_slice_mut().unwrap();
    let k4 = k / 4 * 4;
    // dot kernel with four independent partial sums; the combining order is
    // fixed, so results are deterministic per (row, column) pair
    let dot = |x: &[f64], y: &[f64]| -> f64 {
        let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
        let mut kk = 0;
        while kk < k4 {
            s0 += x[kk] * y[kk];
            s1 += x[kk + 1] * y[kk + 1];
            s2 += x[kk + 2] * y[kk + 2];
            s3 += x[kk + 3] * y[kk + 3];
            kk += 4;
        }
        let mut acc = (s0 + s1) + (s2 + s3);
        while kk < k {
            acc += x[kk] * y[kk];
            kk += 1;
        }
        acc
    };
    // block rows so each b row stays hot across the block
    const IB: usize = 8;
    let mut ib = 0;
    while ib < m {
        let ie = (ib + IB).min(m);
        for j in 0..n {
            let brow = &b_s[j * k..(j + 1) * k];
            for i in ib..ie {
                o_s[i * n + j] = dot(&a_s[i * k..(i + 1) * k], brow);
            }
        }
        ib = ie;
    }
    out
}

/// Deterministic `a^T x b` for `a: [k,m]`, `b: [k,n]`.
pub fn mm_tn(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (k, m) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "mm_tn: inner dims {k} vs {k2}");
    let mut out = Array2::<f64>::zeros((m, n));
    let a_s = a.as_slice().expect("mm_tn: a not contiguous");
    let b_s = b.as_slice().expect("mm_tn: b not contiguous");
    let o_s = out.as_slice_mut().unwrap();
    for kk in 0..k {
        let brow = &b_s[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a_s[kk * m + i];
            let orow = &mut o_s[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aki * brow[j];
            }
        }
    }
    out
}

fn as_2d(v: &ArrayD<f64>) -> Array2<f64> {
    let sh = v.shape();
    assert_eq!(sh.len(), 2, "expected 2-d tensor, got {sh:?}");
    v.to_owned()
        .into_shape_with_order((sh[0], sh[1]))
        .expect("as_2d: non-standard layout")
}

fn standardized(v: ArrayD<f64>) -> ArrayD<f64> {
    if v.is_standard_layout() {
        v
    } else {
        v.as_standard_layout().into_owned()
    }
}

/// Recording tape. Create one per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Record a tensor that never needs gradients (inputs, coordinates, targets).
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(standardized(value), Op::Leaf, false)
    }

    /// Record a trainable leaf.
    pub fn param(&mut self, value: ArrayD<f64>) -> Var {
        self.push(standardized(value), Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        let rg = self.rg(&[a]);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = as_2d(&self.nodes[a.0].value);
        let vb = as_2d(&self.nodes[b.0].value);
        let v = mm(&va, &vb).into_dyn();
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Matmul(a, b), rg)
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        assert_eq!(sx.len(), 2);
        assert_eq!(sb, vec![sx[1]], "add_row_bias: bias dim mismatch");
        let mut v = self.nodes[x.0].value.clone();
        let bs = self.nodes[b.0].value.clone();
        let bs = bs.as_slice().unwrap();
        let (n, d) = (sx[0], sx[1]);
        let vs = v.as_slice_mut().unwrap();
        for i in 0..n {
            for j in 0..d {
                vs[i * d + j] += bs[j];
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(v, Op::AddRowBias(x, b), rg)
    }

    pub fn add_chan_bias(&mut self, x: Var, b: Var) -> Var {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        assert_eq!(sx.len(), 3);
        assert_eq!(sb, vec![sx[0]], "add_chan_bias: bias dim mismatch");
        let mut v = self.nodes[x.0].value.clone();
        let bs = self.nodes[b.0].value.clone();
        let bs = bs.as_slice().unwrap();
        let hw = sx[1] * sx[2];
        let vs = v.as_slice_mut().unwrap();
        for c in 0..sx[0] {
            let row = &mut vs[c * hw..(c + 1) * hw];
            let bc = bs[c];
            for e in row.iter_mut() {
                *e += bc;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(v, Op::AddChanBias(x, b), rg)
    }

    pub fn mul_chans(&mut self, x: Var, v: Var) -> Var {
        let (sx, sv) = (self.shape(x).to_vec(), self.shape(v).to_vec());
        assert_eq!(sx.len(), 3);
        assert_eq!(sv, vec![sx[0]], "mul_chans: vector dim mismatch");
        let mut out = self.nodes[x.0].value.clone();
        let vv = self.nodes[v.0].value.clone();
        let vv = vv.as_slice().unwrap();
        let hw = sx[1] * sx[2];
        let os = out.as_slice_mut().unwrap();
        for c in 0..sx[0] {
            let row = &mut os[c * hw..(c + 1) * hw];
            let vc = vv[c];
            for e in row.iter_mut() {
                *e *= vc;
            }
        }
        let rg = self.rg(&[x, v]);
        self.push(out, Op::MulChans(x, v), rg)
    }

    pub fn scale_var(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.nodes[s.0].value.len(), 1, "scale_var: s must be scalar");
        let sv = self.nodes[s.0].value.as_slice().unwrap()[0];
        let v = self.nodes[x.0].value.mapv(|e| e * sv);
        let rg = self.rg(&[x, s]);
        self.push(v, Op::ScaleVar(x, s), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        assert!(n > 0, "mean_all: empty tensor");
        let m = self.nodes[a.0].value.sum() / n as f64;
        let v = ArrayD::from_elem(IxDyn(&[1]), m);
        let rg = self.rg(&[a]);
        self.push(v, Op::MeanAll(a), rg)
    }

    pub fn mean_spatial(&mut self, a: Var) -> Var {
        let sh = self.shape(a).to_vec();
        assert_eq!(sh.len(), 3, "mean_spatial: expected [c,h,w]");
        let hw = (sh[1] * sh[2]) as f64;
        let src = self.nodes[a.0].value.as_slice().unwrap();
        let mut v = ArrayD::zeros(IxDyn(&[sh[0]]));
        let vs = v.as_slice_mut().unwrap();
        let hw_u = sh[1] * sh[2];
        for c in 0..sh[0] {
            let mut acc = 0.0;
            for e in &src[c * hw_u..(c + 1) * hw_u] {
                acc += *e;
            }
            vs[c] = acc / hw;
        }
        let rg = self.rg(&[a]);
        self.push(v, Op::MeanSpatial(a), rg)
    }

    /// Flat gather: `out[i] = if map[i] < 0 { 0.0 } else { src[map[i]] }`.
    pub fn gather(&mut self, src: Var, map: Rc<Vec<i64>>, shape: &[usize]) -> Var {
        let numel: usize = shape.iter().product();
        assert_eq!(map.len(), numel, "gather: map length vs shape");
        let s = self.nodes[src.0].value.as_slice().unwrap();
        let mut out = vec![0.0f64; numel];
        for (o, &ix) in out.iter_mut().zip(map.iter()) {
            if ix >= 0 {
                *o = s[ix as usize];
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(shape), out).unwrap();
        let rg = self.rg(&[src]);
        self.push(v, Op::Gather { src, map }, rg)
    }

    pub fn narrow(&mut self, src: Var, axis: usize, start: usize, len: usize) -> Var {
        let sh = self.shape(src).to_vec();
        assert!(axis < sh.len() && start + len <= sh[axis], "narrow: out of range");
        let v = self.nodes[src.0]
            .value
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        let v = standardized(v);
        let rg = self.rg(&[src]);
        self.push(v, Op::Narrow { src, axis, start, len }, rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<ArrayViewD<f64>> =
            parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat: shape mismatch");
        let v = standardized(v);
        let rg = self.rg(parts);
        self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Var {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.nodes[src.0].value.len(), "reshape: numel mismatch");
        let v = self.nodes[src.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: non-standard layout");
        let rg = self.rg(&[src]);
        self.push(v, Op::Reshape(src), rg)
    }

    pub fn transpose2(&mut self, src: Var) -> Var {
        let sh = self.shape(src).to_vec();
        assert_eq!(sh.len(), 2, "transpose2: expected 2-d");
        let v = self.nodes[src.0].value.clone().reversed_axes();
        let v = standardized(v);
        let rg = self.rg(&[src]);
        self.push(v, Op::Transpose2(src), rg)
    }

    pub fn layer_norm_chan(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh.len(), 3, "layer_norm_chan: expected [c,h,w]");
        assert_eq!(self.shape(gamma), &[sh[0]]);
        assert_eq!(self.shape(beta), &[sh[0]]);
        let (c, hw) = (sh[0], sh[1] * sh[2]);
        let xs = self.nodes[x.0].value.as_slice().unwrap();
        let gs = self.nodes[gamma.0].value.as_slice().unwrap();
        let bs = self.nodes[beta.0].value.as_slice().unwrap();
        let (mean, rstd) = chan_stats(xs, c, hw, eps);
        let mut out = vec![0.0f64; c * hw];
        for ci in 0..c
        {
            let g = gs[ci];
            let b = bs[ci];
            let row = &xs[ci * hw..(ci + 1) * hw];
            let orow = &mut out[ci * hw..(ci + 1) * hw];
            for p in 0..hw {
                orow[p] = (row[p] - mean[p]) * rstd[p] * g + b;
            }
        }
        let v = ArrayD::from_shape_vec(IxDyn(&sh), out).unwrap();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(v, Op::LayerNormChan { x, gamma, beta, eps }, rg)
    }

    pub fn dw_conv3x3(&mut self, x: Var, w: Var, b: Var) -> Var {
        let sh = self.shape(x).to_vec();
        assert_eq!(sh.len(), 3);
        let (c, h, wd) = (sh[0], sh[1], sh[2]);
        assert_eq!(self.shape(w), &[c, 9], "dw_conv3x3: weight must be [c,9]");
        assert_eq!(self.shape(b), &[c]);
        let xs = self.nodes[x.0].value.as_slice().unwrap();
        let ws = self.nodes[w.0].value.as_slice().unwrap();
        let bs = self.nodes[b.0].value.as_slice().unwrap();
        let mut out = vec![0.0f64; c * h * wd];
        for ci in 0..c {
            let xrow = &xs[ci * h * wd..(ci + 1) * h * wd];
            let wrow = &ws[ci * 9..ci * 9 + 9];
            let orow = &mut out[ci * h * wd..(ci + 1) * h * wd];
            dw3x3_plane(xrow, wrow, bs[ci], h, wd, orow);
        }
        let v = ArrayD::from_shape_vec(IxDyn(&sh), out).unwrap();
        let rg = self.rg(&[x, w, b]);
        self.push(v, Op::DwConv3x3 { x, w, b }, rg)
    }

    /// Accumulate gradients of a single-element `loss` w.r.t. every recorded
    /// variable that requires them.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward: loss must be a single element"
        );
        let mut g: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(ArrayD::from_elem(
            IxDyn(self.nodes[loss.0].value.shape()),
            1.0,
        ));
        for i in (0..self.nodes.len()).rev() {
            if g[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let gi = g[i].take().unwrap();
            self.step_back(i, &gi, &mut g);
            g[i] = Some(gi);
        }
        Grads { g }
    }

    fn accum(&self, g: &mut [Option<ArrayD<f64>>], v: Var, contrib: ArrayD<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut g[v.0] {
            Some(acc) => *acc += &contrib,
            slot @ None => *slot = Some(contrib),
        }
    }

    fn step_back(&self, i: usize, gi: &ArrayD<f64>, g: &mut Vec<Option<ArrayD<f64>>>) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(g, *a, gi.clone());
                self.accum(g, *b, gi.clone());
            }
            Op::Sub(a, b) => {
                self.accum(g, *a, gi.clone());
                self.accum(g, *b, gi.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    self.accum(g, *a, gi * &self.nodes[b.0].value);
                }
                if self.nodes[b.0].requires_grad {
                    self.accum(g, *b, gi * &self.nodes[a.0].value);
                }
            }
            Op::Scale(a, c) => self.accum(g, *a, gi.mapv(|x| x * c)),
            Op::AddScalar(a) => self.accum(g, *a, gi.clone()),
            Op::Relu(a) => {
                let va = &self.nodes[a.0].value;
                let mut d = gi.clone();
                d.zip_mut_with(va, |gd, &xv| {
                    if xv <= 0.0 {
                        *gd = 0.0;
                    }
                });
                self.accum(g, *a, d);
            }
            Op::Abs(a) => {
                let va = &self.nodes[a.0].value;
                let mut d = gi.clone();
                d.zip_mut_with(va, |gd, &xv| {
                    *gd *= if xv > 0.0 {
                        1.0
                    } else if xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.accum(g, *a, d);
            }
            Op::Matmul(a, b) => {
                let ga2 = as_2d(gi);
                if self.nodes[a.0].requires_grad {
                    let vb = as_2d(&self.nodes[b.0].value);
                    self.accum(g, *a, mm_nt(&ga2, &vb).into_dyn());
                }
                if self.nodes[b.0].requires_grad {
                    let va = as_2d(&self.nodes[a.0].value);
                    self.accum(g, *b, mm_tn(&va, &ga2).into_dyn());
                }
            }
            Op::AddRowBias(x, b) => {
                self.accum(g, *x, gi.clone());
                if self.nodes[b.0].requires_grad {
                    let sh = gi.shape();
                    let (n, d) = (sh[0], sh[1]);
                    let gs = gi.as_slice().unwrap();
                    let mut gb = vec![0.0f64; d];
                    for r in 0..n {
                        for j in 0..d {
                            gb[j] += gs[r * d + j];
                        }
                    }
                    self.accum(g, *b, ArrayD::from_shape_vec(IxDyn(&[d]), gb).unwrap());
                }
            }
            Op::AddChanBias(x, b) => {
                self.accum(g, *x, gi.clone());
                if self.nodes[b.0].requires_grad {
                    let sh = gi.shape();
                    let (c, hw) = (sh[0], sh[1] * sh[2]);
                    let gs = gi.as_slice().unwrap();
                    let mut gb = vec![0.0f64; c];
                    for ci in 0..c {
                        let mut acc = 0.0;
                        for e in &gs[ci * hw..(ci + 1) * hw] {
                            acc += *e;
                        }
                        gb[ci] = acc;
                    }
                    self.accum(g, *b, ArrayD::from_shape_vec(IxDyn(&[c]), gb).unwrap());
                }
            }
            Op::MulChans(x, v) => {
                let sh = gi.shape();
                let (c, hw) = (sh[0], sh[1] * sh[2]);
                if self.nodes[x.0].requires_grad {
                    let vv = self.nodes[v.0].value.as_slice().unwrap();
                    let mut d = gi.clone();
                    let ds = d.as_slice_mut().unwrap();
                    for ci in 0..c {
                        for e in &mut ds[ci * hw..(ci + 1) * hw] {
                            *e *= vv[ci];
                        }
                    }
                    self.accum(g, *x, d);
                }
                if self.nodes[v.0].requires_grad {
                    let xs = self.nodes[x.0].value.as_slice().unwrap();
                    let gs = gi.as_slice().unwrap();
                    let mut gv = vec![0.0f64; c];
                    for ci in 0..c {
                        let mut acc = 0.0;
                        for p in 0..hw {
                            acc += gs[ci * hw + p] * xs[ci * hw + p];
                        }
                        gv[ci] = acc;
                    }
                    self.accum(g, *v, ArrayD::from_shape_vec(IxDyn(&[c]), gv).unwrap());
                }
            }
            Op::ScaleVar(x, s) => {
                let sv = self.nodes[s.0].value.as_slice().unwrap()[0];
                if self.nodes[x.0].requires_grad {
                    self.accum(g, *x, gi.mapv(|e| e * sv));
                }
                if self.nodes[s.0].requires_grad {
                    let xs = &self.nodes[x.0].value;
                    let acc: f64 = gi
                        .as_slice()
                        .unwrap()
                        .iter()
                        .zip(xs.as_slice().unwrap())
                        .map(|(a, b)| a * b)
                        .sum();
                    self.accum(g, *s, ArrayD::from_elem(IxDyn(&[1]), acc));
                }
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len() as f64;
                let gv = gi.as_slice().unwrap()[0] / n;
                self.accum(
                    g,
                    *a,
                    ArrayD::from_elem(IxDyn(self.nodes[a.0].value.shape()), gv),
                );
            }
            Op::MeanSpatial(a) => {
                let sh = self.nodes[a.0].value.shape().to_vec();
                let (c, hw) = (sh[0], sh[1] * sh[2]);
                let gs = gi.as_slice().unwrap();
                let mut d = vec![0.0f64; c * hw];
                for ci in 0..c {
                    let gv = gs[ci] / hw as f64;
                    for e in &mut d[ci * hw..(ci + 1) * hw] {
                        *e = gv;
                    }
                }
                self.accum(g, *a, ArrayD::from_shape_vec(IxDyn(&sh), d).unwrap());
            }
            Op::Gather { src, map } => {
                if self.nodes[src.0].requires_grad {
                    let mut d = vec![0.0f64; self.nodes[src.0].value.len()];
                    let gs = gi.as_slice().unwrap();
                    for (gv, &ix) in gs.iter().zip(map.iter()) {
                        if ix >= 0 {
                            d[ix as usize] += *gv;
                        }
                    }
                    self.accum(
                        g,
                        *src,
                        ArrayD::from_shape_vec(IxDyn(self.nodes[src.0].value.shape()), d)
                            .unwrap(),
                    );
                }
            }
            Op::Narrow { src, axis, start, len } => {
                if self.nodes[src.0].requires_grad {
                    let mut d = ArrayD::zeros(IxDyn(self.nodes[src.0].value.shape()));
                    d.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..start + len))
                        .assign(gi);
                    self.accum(g, *src, d);
                }
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    if self.nodes[p.0].requires_grad {
                        let piece = gi
                            .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + len))
                            .to_owned();
                        self.accum(g, *p, standardized(piece));
                    }
                    offset += len;
                }
            }
            Op::Reshape(src) => {
                let d = gi
                    .clone()
                    .into_shape_with_order(IxDyn(self.nodes[src.0].value.shape()))
                    .unwrap();
                self.accum(g, *src, d);
            }
            Op::Transpose2(src) => {
                let d = standardized(gi.clone().reversed_axes());
                self.accum(g, *src, d);
            }
            Op::LayerNormChan { x, gamma, beta, eps } => {
                let sh = self.nodes[x.0].value.shape().to_vec();
                let (c, hw) = (sh[0], sh[1] * sh[2]);
                let xs = self.nodes[x.0].value.as_slice().unwrap();
                let gs = self.nodes[gamma.0].value.as_slice().unwrap();
                let gradv = gi.as_slice().unwrap();
                let (mean, rstd) = chan_stats(xs, c, hw, *eps);
                // dxhat = g * gamma; dx = rstd*(dxhat - mean_c(dxhat) - xhat*mean_c(dxhat*xhat))
                let mut m1 = vec![0.0f64; hw];
                let mut m2 = vec![0.0f64; hw];
                for ci in 0..c {
                    let gam = gs[ci];
                    let xrow = &xs[ci * hw..(ci + 1) * hw];
                    let grow = &gradv[ci * hw..(ci + 1) * hw];
                    for p in 0..hw {
                        let dxh = grow[p] * gam;
                        let xhat = (xrow[p] - mean[p]) * rstd[p];
                        m1[p] += dxh;
                        m2[p] += dxh * xhat;
                    }
                }
                let cf = c as f64;
                for p in 0..hw {
                    m1[p] /= cf;
                    m2[p] /= cf;
                }
                if self.nodes[x.0].requires_grad {
                    let mut d = vec![0.0f64; c * hw];
                    for ci in 0..c {
                        let gam = gs[ci];
                        let xrow = &xs[ci * hw..(ci + 1) * hw];
                        let grow = &gradv[ci * hw..(ci + 1) * hw];
                        let drow = &mut d[ci * hw..(ci + 1) * hw];
                        for p in 0..hw {
                            let dxh = grow[p] * gam;
                            let xhat = (xrow[p] - mean[p]) * rstd[p];
                            drow[p] = rstd[p] * (dxh - m1[p] - xhat * m2[p]);
                        }
                    }
                    self.accum(g, *x, ArrayD::from_shape_vec(IxDyn(&sh), d).unwrap());
                }
                if self.nodes[gamma.0].requires_grad {
                    let mut dg = vec![0.0f64; c];
                    for ci in 0..c {
                        let xrow = &xs[ci * hw..(ci + 1) * hw];
                        let grow = &gradv[ci * hw..(ci + 1) * hw];
                        let mut acc = 0.0;
                        for p in 0..hw {
                            acc += grow[p] * (xrow[p] - mean[p]) * rstd[p];
                        }
                        dg[ci] = acc;
                    }
                    self.accum(g, *gamma, ArrayD::from_shape_vec(IxDyn(&[c]), dg).unwrap());
                }
                if self.nodes[beta.0].requires_grad {
                    let mut db = vec![0.0f64; c];
                    for ci in 0..c {
                        let grow = &gradv[ci * hw..(ci + 1) * hw];
                        let mut acc = 0.0;
                        for e in grow {
                            acc += *e;
                        }
                        db[ci] = acc;
                    }
                    self.accum(g, *beta, ArrayD::from_shape_vec(IxDyn(&[c]), db).unwrap());
                }
            }
            Op::DwConv3x3 { x, w, b } => {
                let sh = self.nodes[x.0].value.shape().to_vec();
                let (c, h, wd) = (sh[0], sh[1], sh[2]);
                let xs = self.nodes[x.0].value.as_slice().unwrap();
                let ws = self.nodes[w.0].value.as_slice().unwrap();
                let gs = gi.as_slice().unwrap();
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0f64; c * h * wd];
                    for ci in 0..c {
                        let grow = &gs[ci * h * wd..(ci + 1) * h * wd];
                        let wrow = &ws[ci * 9..ci * 9 + 9];
                        let drow = &mut dx[ci * h * wd..(ci + 1) * h * wd];
                        for y in 0..h {
                            for xx in 0..wd {
                                let gv = grow[y * wd + xx];
                                for ky in 0..3usize {
                                    let iy = y as isize + ky as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3usize {
                                        let ix = xx as isize + kx as isize - 1;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        drow[iy as usize * wd + ix as usize] +=
                                            gv * wrow[ky * 3 + kx];
                                    }
                                }
                            }
                        }
                    }
                    self.accum(g, *x, ArrayD::from_shape_vec(IxDyn(&sh), dx).unwrap());
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![0.0f64; c * 9];
                    for ci in 0..c {
                        let grow = &gs[ci * h * wd..(ci + 1) * h * wd];
                        let xrow = &xs[ci * h * wd..(ci + 1) * h * wd];
                        let drow = &mut dw[ci * 9..ci * 9 + 9];
                        for y in 0..h {
                            for xx in 0..wd {
                                let gv = grow[y * wd + xx];
                                for ky in 0..3usize {
                                    let iy = y as isize + ky as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3usize {
                                        let ix = xx as isize + kx as isize - 1;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        drow[ky * 3 + kx] +=
                                            gv * xrow[iy as usize * wd + ix as usize];
                                    }
                                }
                            }
                        }
                    }
                    self.accum(
                        g,
                        *w,
                        ArrayD::from_shape_vec(IxDyn(&[c, 9]), dw).unwrap(),
                    );
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0f64; c];
                    for ci in 0..c {
                        let mut acc = 0.0;
                        for e in &gs[ci * h * wd..(ci + 1) * h * wd] {
                            acc += *e;
                        }
                        db[ci] = acc;
                    }
                    self.accum(g, *b, ArrayD::from_shape_vec(IxDyn(&[c]), db).unwrap());
                }
            }
        }
    }
}

/// Per-position channel mean and reciprocal std for `[c, hw]` data.
fn chan_stats(xs: &[f64], c: usize, hw: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0f64; hw];
    let mut sumsq = vec![0.0f64; hw];
    for ci in 0..c {
        let row = &xs[ci * hw..(ci + 1) * hw];
        for p in 0..hw {
            sum[p] += row[p];
            sumsq[p] += row[p] * row[p];
        }
    }
    let cf = c as f64;
    let mut mean = sum;
    let mut rstd = sumsq;
    for p in 0..hw {
        mean[p] /= cf;
        let var = rstd[p] / cf - mean[p] * mean[p];
        rstd[p] = 1.0 / (var.max(0.0) + eps).sqrt();
    }
    (mean, rstd)
}

fn dw3x3_plane(x: &[f64], w: &[f64], b: f64, h: usize, wd: usize, out: &mut [f64]) {
    for y in 0..h {
        for xx in 0..wd {
            let mut acc = b;
            for ky in 0..3usize {
                let iy = y as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3usize {
                    let ix = xx as isize + kx as isize - 1;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    acc += w[ky * 3 + kx] * x[iy as usize * wd + ix as usize];
                }
            }
            out[y * wd + xx] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, ArrayD};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn randn(rng: &mut ChaCha20Rng, shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let a = randn(&mut rng, &[5, 4]);
        let b = randn(&mut rng, &[4, 6]);
        let a2 = a.clone().into_shape_with_order((5, 4)).unwrap();
        let b2 = b.clone().into_shape_with_order((4, 6)).unwrap();
        let c = mm(&a2, &b2);
        for i in 0..5 {
            for j in 0..6 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a2[[i, k]] * b2[[k, j]];
                }
                assert!((c[[i, j]] - acc).abs() < 1e-12);
            }
        }
        // the three kernels use different (but fixed) accumulation orders,
        // so they agree to rounding, not bit-for-bit
        let bt = b2.t().as_standard_layout().into_owned();
        let c2 = mm_nt(&a2, &bt);
        let at = a2.t().as_standard_layout().into_owned();
        let c3 = mm_tn(&at, &b2);
        for i in 0..5 {
            for j in 0..6 {
                assert!((c[[i, j]] - c2[[i, j]]).abs() < 1e-12);
                assert!((c[[i, j]] - c3[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn simple_graph_values() {
        let mut t = Tape::new();
        let a = t.param(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = t.param(arr2(&[[0.5, 0.5], [0.5, 0.5]]).into_dyn());
        let c = t.mul(a, b);
        let s = t.mean_all(c);
        assert!((t.value(s)[[0]] - 1.25).abs() < 1e-12);
        let g = t.backward(s);
        let ga = g.get(a).unwrap();
        // d(mean(a*b))/da = b/4
        assert!((ga[[0, 0]] - 0.125).abs() < 1e-12);
    }

    /// Finite-difference check used across the op set.
    fn fd_check(build: impl Fn(&mut Tape, &[Var]) -> Var, shapes: &[&[usize]], seed: u64) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let leaves: Vec<ArrayD<f64>> = shapes.iter().map(|s| randn(&mut rng, s)).collect();
        // analytic
        let mut t = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|l| t.param(l.clone())).collect();
        let loss = build(&mut t, &vars);
        assert_eq!(t.value(loss).len(), 1);
        let grads = t.backward(loss);
        // numeric on a handful of coordinates per leaf
        let h = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let n = leaf.len();
            let picks: Vec<usize> = (0..n.min(5)).map(|i| i * (n / n.min(5)).max(1)).collect();
            for &pi in &picks {
                let eval = |delta: f64| -> f64 {
                    let mut t2 = Tape::new();
                    let vars2: Vec<Var> = leaves
                        .iter()
                        .enumerate()
                        .map(|(j, l)| {
                            let mut l = l.clone();
                            if j == li {
                                l.as_slice_mut().unwrap()[pi] += delta;
                            }
                            t2.param(l)
                        })
                        .collect();
                    let out = build(&mut t2, &vars2);
                    t2.value(out)[[0]]
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = grads
                    .get(vars[li])
                    .map(|g| g.as_slice().unwrap()[pi])
                    .unwrap_or(0.0);
                let denom = num.abs().max(ana.abs()).max(1e-8);
                assert!(
                    (num - ana).abs() / denom < 1e-6,
                    "leaf {li} coord {pi}: numeric {num} vs analytic {ana}"
                );
            }
        }
    }

    #[test]
    fn fd_elementwise_chain() {
        fd_check(
            |t, v| {
                let x = t.mul(v[0], v[1]);
                let y = t.add(x, v[2]);
                let z = t.relu(y);
                let w = t.abs(z);
                let s = t.scale(w, 1.7);
                let s = t.add_scalar(s, 0.3);
                t.mean_all(s)
            },
            &[&[3, 4], &[3, 4], &[3, 4]],
            11,
        );
    }

    #[test]
    fn fd_matmul_bias() {
        fd_check(
            |t, v| {
                let y = t.matmul(v[0], v[1]);
                let y = t.add_row_bias(y, v[2]);
                let y = t.relu(y);
                t.mean_all(y)
            },
            &[&[4, 3], &[3, 5], &[5]],
            12,
        );
    }

    #[test]
    fn fd_chan_ops() {
        fd_check(
            |t, v| {
                let y = t.add_chan_bias(v[0], v[1]);
                let y = t.mul_chans(y, v[2]);
                let m = t.mean_spatial(y);
                let m = t.reshape(m, &[1, 3]);
                t.mean_all(m)
            },
            &[&[3, 4, 5], &[3], &[3]],
            13,
        );
    }

    #[test]
    fn fd_scale_var_sub() {
        fd_check(
            |t, v| {
                let y = t.scale_var(v[0], v[1]);
                let y = t.sub(y, v[2]);
                let y = t.abs(y);
                t.mean_all(y)
            },
            &[&[4, 4], &[1], &[4, 4]],
            14,
        );
    }

    #[test]
    fn fd_gather_narrow_concat() {
        fd_check(
            |t, v| {
                let map = Rc::new(vec![0i64, 3, -1, 5, 2, 2]);
                let gx = t.gather(v[0], map, &[2, 3]);
                let n = t.narrow(v[1], 1, 1, 3);
                let c = t.concat(&[gx, n], 1);
                let c = t.relu(c);
                t.mean_all(c)
            },
            &[&[2, 3], &[2, 5]],
            15,
        );
    }

    #[test]
    fn fd_transpose_reshape() {
        fd_check(
            |t, v| {
                let y = t.transpose2(v[0]);
                let y = t.reshape(y, &[12]);
                let y = t.reshape(y, &[4, 3]);
                let y = t.mul(y, v[1]);
                t.mean_all(y)
            },
            &[&[3, 4], &[4, 3]],
            16,
        );
    }

    #[test]
    fn fd_layer_norm() {
        fd_check(
            |t, v| {
                let y = t.layer_norm_chan(v[0], v[1], v[2], 1e-6);
                let y = t.relu(y);
                t.mean_all(y)
            },
            &[&[4, 3, 2], &[4], &[4]],
            17,
        );
    }

    #[test]
    fn fd_dw_conv() {
        fd_check(
            |t, v| {
                let y = t.dw_conv3x3(v[0], v[1], v[2]);
                let y = t.abs(y);
                t.mean_all(y)
            },
            &[&[2, 5, 4], &[2, 9], &[2]],
            18,
        );
    }

    #[test]
    fn gather_zero_padding_reads_zero() {
        let mut t = Tape::new();
        let x = t.constant(ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, 2.0, 3.0]).unwrap());
        let map = Rc::new(vec![2i64, -1, 0]);
        let y = t.gather(x, map, &[3]);
        assert_eq!(t.value(y).as_slice().unwrap(), &[3.0, 0.0, 1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.constant(ArrayD::from_elem(IxDyn(&[2, 2]), 2.0));
        let p = t.param(ArrayD::from_elem(IxDyn(&[2, 2]), 3.0));
        let y = t.mul(x, p);
        let s = t.mean_all(y);
        let g = t.backward(s);
        assert!(g.get(x).is_none());
        assert!(g.get(p).is_some());
    }
}
