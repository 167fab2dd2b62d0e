//! Parameter storage, layer primitives, initialization, and the Adam optimizer.
//!
//! Layers are lightweight descriptors: they hold a parameter name prefix and
//! their dimensions, register arrays into a [`ParamStore`] once, and replay
//! themselves onto a [`Tape`] each forward pass. Initialization draws an
//! independent stream per parameter name so that two configurations sharing a
//! layer initialize it identically regardless of what else they contain.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use indexmap::IndexMap;
use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::autograd::{mm, Tape, Var};
use crate::error::{Error, Result};

/// One named tensor. Non-trainable entries are bound as constants and never
/// appear in optimizer updates.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: ArrayD<f64>,
    pub trainable: bool,
}

/// Ordered, named parameter set for a model instance.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) {
        let prev = self.entries.insert(
            name.to_string(),
            ParamEntry { value, trainable },
        );
        assert!(prev.is_none(), "duplicate parameter name: {name}");
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// Total number of trainable scalar parameters.
    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }
}

/// Parameters bound onto a tape for one forward pass.
pub struct Bound {
    ids: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter not bound: {name}"))
    }
}

/// Bind every parameter onto `tape`. With `train=false` everything is bound
/// as a constant, so backward passes skip the whole network.
pub fn bind(tape: &mut Tape, store: &ParamStore, train: bool) -> Bound {
    let mut ids = HashMap::with_capacity(store.len());
    for (name, entry) in store.iter() {
        let var = if train && entry.trainable {
            tape.param(entry.value.clone())
        } else {
            tape.constant(entry.value.clone())
        };
        ids.insert(name.clone(), var);
    }
    Bound { ids }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent RNG stream for one named parameter (or any named purpose).
pub fn named_rng(seed: u64, name: &str) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(splitmix64(seed ^ fnv1a(name.as_bytes())))
}

/// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
fn uniform_init(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let mut rng = named_rng(seed, name);
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

// ---------------------------------------------------------------------------
// Gather-map builders (convolution lowering, pixel shuffle, padding)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum MapKey {
    Im2col {
        c: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    PixelShuffle2 {
        c: usize,
        h: usize,
        w: usize,
    },
    ReflectPad {
        c: usize,
        h: usize,
        w: usize,
        pb: usize,
        pr: usize,
    },
}

thread_local! {
    static MAP_CACHE: RefCell<HashMap<MapKey, Rc<Vec<i64>>>> = RefCell::new(HashMap::new());
}

fn cached_map(key: MapKey, build: impl FnOnce() -> Vec<i64>) -> Rc<Vec<i64>> {
    MAP_CACHE.with(|c| {
        c.borrow_mut()
            .entry(key)
            .or_insert_with(|| Rc::new(build()))
            .clone()
    })
}

pub fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Lower `[c,h,w]` to `[c*k*k, oh*ow]` columns; `-1` marks zero padding.
fn im2col_map(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Rc<Vec<i64>> {
    cached_map(MapKey::Im2col { c, h, w, k, stride, pad }, || {
        let oh = conv_out_dim(h, k, stride, pad);
        let ow = conv_out_dim(w, k, stride, pad);
        let mut map = vec![0i64; c * k * k * oh * ow];
        let mut ptr = 0;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            map[ptr] = if iy >= 0
                                && iy < h as isize
                                && ix >= 0
                                && ix < w as isize
                            {
                                (ci * h * w) as i64 + (iy as usize * w + ix as usize) as i64
                            } else {
                                -1
                            };
                            ptr += 1;
                        }
                    }
                }
            }
        }
        map
    })
}

/// `[4c, h, w] -> [c, 2h, 2w]` rearrangement map.
fn pixel_shuffle2_map(c4: usize, h: usize, w: usize) -> Rc<Vec<i64>> {
    assert_eq!(c4 % 4, 0, "pixel shuffle needs channels divisible by 4");
    cached_map(MapKey::PixelShuffle2 { c: c4, h, w }, || {
        let c = c4 / 4;
        let (oh, ow) = (2 * h, 2 * w);
        let mut map = vec![0i64; c * oh * ow];
        let mut ptr = 0;
        for co in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let ci = co * 4 + (y % 2) * 2 + (x % 2);
                    map[ptr] = (ci * h * w + (y / 2) * w + x / 2) as i64;
                    ptr += 1;
                }
            }
        }
        map
    })
}

fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    debug_assert!(i >= 0 && i < n);
    i as usize
}

/// Reflect-pad `[c,h,w]` on the bottom/right only (used to round image dims
/// up to a multiple of the encoder stride).
fn reflect_pad_map(c: usize, h: usize, w: usize, pb: usize, pr: usize) -> Rc<Vec<i64>> {
    assert!(pb < h && pr < w, "reflect pad larger than input");
    cached_map(MapKey::ReflectPad { c, h, w, pb, pr }, || {
        let (oh, ow) = (h + pb, w + pr);
        let mut map = vec![0i64; c * oh * ow];
        let mut ptr = 0;
        for ci in 0..c {
            for y in 0..oh {
                let sy = reflect_index(y as isize, h);
                for x in 0..ow {
                    let sx = reflect_index(x as isize, w);
                    map[ptr] = (ci * h * w + sy * w + sx) as i64;
                    ptr += 1;
                }
            }
        }
        map
    })
}

/// Pixel shuffle with factor 2 on the tape.
pub fn pixel_shuffle2(t: &mut Tape, x: Var) -> Var {
    let sh = t.shape(x).to_vec();
    assert_eq!(sh.len(), 3);
    let map = pixel_shuffle2_map(sh[0], sh[1], sh[2]);
    t.gather(x, map, &[sh[0] / 4, sh[1] * 2, sh[2] * 2])
}

/// Reflect-pad bottom/right on the tape.
pub fn reflect_pad_br(t: &mut Tape, x: Var, pb: usize, pr: usize) -> Var {
    if pb == 0 && pr == 0 {
        return x;
    }
    let sh = t.shape(x).to_vec();
    let map = reflect_pad_map(sh[0], sh[1], sh[2], pb, pr);
    t.gather(x, map, &[sh[0], sh[1] + pb, sh[2] + pr])
}

/// Crop `[c,h,w]` to its top-left `[c,h2,w2]` corner.
pub fn crop_tl(t: &mut Tape, x: Var, h2: usize, w2: usize) -> Var {
    let sh = t.shape(x).to_vec();
    let mut out = x;
    if sh[1] != h2 {
        out = t.narrow(out, 1, 0, h2);
    }
    if sh[2] != w2 {
        out = t.narrow(out, 2, 0, w2);
    }
    out
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// 2-D convolution with square kernel and zero padding.
/// Weight layout: `[out_ch, in_ch*k*k]`, bias `[out_ch]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, ksize: usize) -> Self {
        Conv2d {
            name: name.into(),
            in_ch,
            out_ch,
            ksize,
            stride: 1,
            pad: ksize / 2,
        }
    }

    pub fn strided(mut self, stride: usize, pad: usize) -> Self {
        self.stride = stride;
        self.pad = pad;
        self
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        let fan_in = self.in_ch * self.ksize * self.ksize;
        let wname = self.weight_name();
        store.insert(
            &wname,
            uniform_init(seed, &wname, &[self.out_ch, fan_in], fan_in),
            true,
        );
        let bname = self.bias_name();
        store.insert(&bname, uniform_init(seed, &bname, &[self.out_ch], fan_in), true);
    }

    pub fn num_params(&self) -> usize {
        self.out_ch * self.in_ch * self.ksize * self.ksize + self.out_ch
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        let sh = t.shape(x).to_vec();
        assert_eq!(sh.len(), 3, "conv input must be [c,h,w]");
        assert_eq!(sh[0], self.in_ch, "conv {}: channel mismatch", self.name);
        let w = p.var(&self.weight_name());
        let b = p.var(&self.bias_name());
        let (oh, ow) = (
            conv_out_dim(sh[1], self.ksize, self.stride, self.pad),
            conv_out_dim(sh[2], self.ksize, self.stride, self.pad),
        );
        let y = if self.ksize == 1 && self.stride == 1 {
            let flat = t.reshape(x, &[self.in_ch, sh[1] * sh[2]]);
            t.matmul(w, flat)
        } else {
            let map = im2col_map(sh[0], sh[1], sh[2], self.ksize, self.stride, self.pad);
            let cols = t.gather(
                x,
                map,
                &[self.in_ch * self.ksize * self.ksize, oh * ow],
            );
            t.matmul(w, cols)
        };
        let y = t.reshape(y, &[self.out_ch, oh, ow]);
        t.add_chan_bias(y, b)
    }
}

/// Fully connected layer acting on `[n, in_dim]` rows.
/// Weight layout: `[in_dim, out_dim]`, bias `[out_dim]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        let wname = self.weight_name();
        store.insert(
            &wname,
            uniform_init(seed, &wname, &[self.in_dim, self.out_dim], self.in_dim),
            true,
        );
        let bname = self.bias_name();
        store.insert(
            &bname,
            uniform_init(seed, &bname, &[self.out_dim], self.in_dim),
            true,
        );
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        let sh = t.shape(x).to_vec();
        assert_eq!(sh.len(), 2);
        assert_eq!(sh[1], self.in_dim, "linear {}: dim mismatch", self.name);
        let w = p.var(&self.weight_name());
        let b = p.var(&self.bias_name());
        let y = t.matmul(x, w);
        t.add_row_bias(y, b)
    }
}

/// Channel-wise layer norm over `[c,h,w]` with learnable per-channel affine.
#[derive(Debug, Clone)]
pub struct LayerNorm2d {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
}

impl LayerNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        LayerNorm2d {
            name: name.into(),
            channels,
            eps: 1e-6,
        }
    }

    pub fn register(&self, store: &mut ParamStore, _seed: u64) {
        store.insert(
            &format!("{}.gamma", self.name),
            ArrayD::from_elem(IxDyn(&[self.channels]), 1.0),
            true,
        );
        store.insert(
            &format!("{}.beta", self.name),
            ArrayD::zeros(IxDyn(&[self.channels])),
            true,
        );
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        let gamma = p.var(&format!("{}.gamma", self.name));
        let beta = p.var(&format!("{}.beta", self.name));
        t.layer_norm_chan(x, gamma, beta, self.eps)
    }
}

// ---------------------------------------------------------------------------
// Raw (tape-free) convolution, for frozen inference paths
// ---------------------------------------------------------------------------

/// Convolution on plain arrays. `w: [out_ch, in_ch*k*k]`, zero padding.
pub fn conv2d_raw(
    x: &Array3<f64>,
    w: &Array2<f64>,
    b: &Array1<f64>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (c, h, wd) = x.dim();
    let (out_ch, fan) = w.dim();
    assert_eq!(fan, c * k * k, "conv2d_raw: weight shape mismatch");
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(wd, k, stride, pad);
    let map = im2col_map(c, h, wd, k, stride, pad);
    let xs = x.as_slice().expect("conv2d_raw: x not contiguous");
    let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
    {
        let cs = cols.as_slice_mut().unwrap();
        for (o, &ix) in cs.iter_mut().zip(map.iter()) {
            if ix >= 0 {
                *o = xs[ix as usize];
            }
        }
    }
    let mut y = mm(w, &cols);
    for (mut row, &bc) in y.rows_mut().into_iter().zip(b.iter()) {
        row.mapv_inplace(|v| v + bc);
    }
    y.into_shape_with_order((out_ch, oh, ow)).unwrap()
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam optimizer state. Moments are kept per parameter name so checkpoints
/// can persist them for exact training resumption.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: IndexMap<String, ArrayD<f64>>,
    pub v: IndexMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// Apply one update. Parameters without a gradient entry are treated as
    /// zero-gradient; non-trainable parameters are never touched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &HashMap<String, ArrayD<f64>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = store
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.clone())
            .collect();
        for name in names {
            let entry = store.get_mut(&name).unwrap();
            let shape = entry.value.shape().to_vec();
            let zero = || ArrayD::<f64>::zeros(IxDyn(&shape));
            let m = self.m.entry(name.clone()).or_insert_with(zero);
            let v = self.v.entry(name.clone()).or_insert_with(zero);
            let gz = ArrayD::<f64>::zeros(IxDyn(&shape));
            let g = grads.get(&name).unwrap_or(&gz);
            if g.shape() != shape.as_slice() {
                return Err(Error::Input(format!(
                    "gradient shape {:?} does not match parameter {name} {:?}",
                    g.shape(),
                    shape
                )));
            }
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let ms = m.as_slice_mut().unwrap();
            let vs = v.as_slice_mut().unwrap();
            let gs = g.as_slice().unwrap();
            let ps = entry.value.as_slice_mut().unwrap();
            for i in 0..ps.len() {
                ms[i] = b1 * ms[i] + (1.0 - b1) * gs[i];
                vs[i] = b2 * vs[i] + (1.0 - b2) * gs[i] * gs[i];
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ps[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}
