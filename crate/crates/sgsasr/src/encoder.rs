//! SFEEM: the saliency-enhanced feature extraction encoder.
//!
//! A NAFNet-style U-shape: shallow 3x3 convolution, per-scale NAFBlocks with
//! saliency fusion before each downsampling layer, a middle stack, a decoder
//! path with additive skip connections, and a residual projection of the
//! shallow features onto the output width.

use ndarray::{ArrayD, IxDyn};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{crop_tl, pixel_shuffle2, reflect_pad_br, Bound, Conv2d, LayerNorm2d, ParamStore};

/// Encoder hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub base_width: usize,
    pub enc_blocks: Vec<usize>,
    pub middle_blocks: usize,
    pub dec_blocks: Vec<usize>,
    /// Output feature width `D_FE` (the decoder's latent dimension).
    pub out_dim: usize,
    pub ffn_expansion: usize,
    pub dw_expansion: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            base_width: 32,
            enc_blocks: vec![2, 2, 4, 8],
            middle_blocks: 12,
            dec_blocks: vec![2, 2, 2, 2],
            out_dim: 128,
            ffn_expansion: 2,
            dw_expansion: 2,
        }
    }
}

impl EncoderConfig {
    pub fn levels(&self) -> usize {
        self.enc_blocks.len()
    }

    /// Channel width at scale level `i`.
    pub fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Widths of the saliency pyramid levels this encoder fuses with.
    pub fn fusion_widths(&self) -> Vec<usize> {
        (0..self.levels()).map(|i| self.width_at(i)).collect()
    }

    /// Input dims must be divisible by this before entering the encoder.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.levels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_blocks.is_empty() {
            return Err(Error::Config("encoder needs at least one scale".into()));
        }
        if self.enc_blocks.len() != self.dec_blocks.len() {
            return Err(Error::Config(format!(
                "enc_blocks ({}) and dec_blocks ({}) must have equal length",
                self.enc_blocks.len(),
                self.dec_blocks.len()
            )));
        }
        if self.base_width == 0 || self.out_dim == 0 {
            return Err(Error::Config("widths must be positive".into()));
        }
        for i in 0..=self.levels() {
            let d = self.width_at(i) * self.dw_expansion;
            if d % 2 != 0 {
                return Err(Error::Config(format!(
                    "dw branch width {d} at level {i} must be even for the gate"
                )));
            }
        }
        Ok(())
    }
}

/// Channel-halving gate: split along the channel axis, multiply the halves.
pub fn simple_gate(t: &mut Tape, x: Var) -> Result<Var> {
    let sh = t.shape(x).to_vec();
    let c = sh[0];
    if c % 2 != 0 {
        return Err(Error::Input(format!(
            "simple gate requires an even channel count, got {c}"
        )));
    }
    let a = t.narrow(x, 0, 0, c / 2);
    let b = t.narrow(x, 0, c / 2, c / 2);
    Ok(t.mul(a, b))
}

/// Reweight channels by a 1x1 convolution of the global spatial average.
pub fn simplified_channel_attention(t: &mut Tape, p: &Bound, conv: &Conv2d, x: Var) -> Var {
    let c = t.shape(x)[0];
    let gap = t.mean_spatial(x);
    let gap = t.reshape(gap, &[c, 1, 1]);
    let att = conv.forward(t, p, gap);
    let att = t.reshape(att, &[c]);
    t.mul_chans(x, att)
}

/// Weighted fusion `w1 (.) f + w2 (.) f_s`. Weights are single-element
/// scalars by default; per-channel vectors broadcast over space.
pub fn affem_fuse(t: &mut Tape, f: Var, f_s: Var, w1: Var, w2: Var) -> Result<Var> {
    if t.shape(f) != t.shape(f_s) {
        return Err(Error::Input(format!(
            "affem fusion shape mismatch: {:?} vs {:?}",
            t.shape(f),
            t.shape(f_s)
        )));
    }
    let apply = |t: &mut Tape, w: Var, x: Var| -> Var {
        if t.shape(w) == [1] {
            t.scale_var(x, w)
        } else {
            t.mul_chans(x, w)
        }
    };
    let a = apply(t, w1, f);
    let b = apply(t, w2, f_s);
    Ok(t.add(a, b))
}

/// Nonlinear-activation-free residual block.
#[derive(Debug, Clone)]
pub struct NafBlock {
    prefix: String,
    pub width: usize,
    ln1: LayerNorm2d,
    conv1: Conv2d,
    sca: Conv2d,
    conv3: Conv2d,
    ln2: LayerNorm2d,
    conv4: Conv2d,
    conv5: Conv2d,
    dw_ch: usize,
}

impl NafBlock {
    pub fn new(prefix: impl Into<String>, width: usize, dw_expansion: usize, ffn_expansion: usize) -> Self {
        let prefix = prefix.into();
        let dw_ch = width * dw_expansion;
        let ffn_ch = width * ffn_expansion * 2;
        NafBlock {
            ln1: LayerNorm2d::new(format!("{prefix}.ln1"), width),
            conv1: Conv2d::new(format!("{prefix}.conv1"), width, dw_ch, 1),
            sca: Conv2d::new(format!("{prefix}.sca"), dw_ch / 2, dw_ch / 2, 1),
            conv3: Conv2d::new(format!("{prefix}.conv3"), dw_ch / 2, width, 1),
            ln2: LayerNorm2d::new(format!("{prefix}.ln2"), width),
            conv4: Conv2d::new(format!("{prefix}.conv4"), width, ffn_ch, 1),
            conv5: Conv2d::new(format!("{prefix}.conv5"), ffn_ch / 2, width, 1),
            prefix,
            width,
            dw_ch,
        }
    }

    fn dw_weight_name(&self) -> String {
        format!("{}.dwconv.weight", self.prefix)
    }

    fn dw_bias_name(&self) -> String {
        format!("{}.dwconv.bias", self.prefix)
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        self.ln1.register(store, seed);
        self.conv1.register(store, seed);
        // depthwise kernel: fan-in 9 per channel
        let wname = self.dw_weight_name();
        let mut rng = crate::nn::named_rng(seed, &wname);
        use rand::Rng;
        let bound = 1.0 / 3.0;
        let w: Vec<f64> = (0..self.dw_ch * 9)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        store.insert(&wname, ArrayD::from_shape_vec(IxDyn(&[self.dw_ch, 9]), w).unwrap(), true);
        let bname = self.dw_bias_name();
        let mut rng = crate::nn::named_rng(seed, &bname);
        let b: Vec<f64> = (0..self.dw_ch)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        store.insert(&bname, ArrayD::from_shape_vec(IxDyn(&[self.dw_ch]), b).unwrap(), true);
        self.sca.register(store, seed);
        self.conv3.register(store, seed);
        self.ln2.register(store, seed);
        self.conv4.register(store, seed);
        self.conv5.register(store, seed);
    }

    pub fn num_params(&self) -> usize {
        self.ln1.num_params()
            + self.conv1.num_params()
            + self.dw_ch * 10
            + self.sca.num_params()
            + self.conv3.num_params()
            + self.ln2.num_params()
            + self.conv4.num_params()
            + self.conv5.num_params()
    }

    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var) -> Var {
        // branch 1: LN -> 1x1 expand -> 3x3 depthwise -> gate -> SCA -> 1x1
        let y = self.ln1.forward(t, p, x);
        let y = self.conv1.forward(t, p, y);
        let w = p.var(&self.dw_weight_name());
        let b = p.var(&self.dw_bias_name());
        let y = t.dw_conv3x3(y, w, b);
        let y = simple_gate(t, y).expect("dw branch width is even");
        let y = simplified_channel_attention(t, p, &self.sca, y);
        let y = self.conv3.forward(t, p, y);
        let x1 = t.add(x, y);
        // branch 2: LN -> 1x1 expand -> gate -> 1x1
        let z = self.ln2.forward(t, p, x1);
        let z = self.conv4.forward(t, p, z);
        let z = simple_gate(t, z).expect("ffn width is even");
        let z = self.conv5.forward(t, p, z);
        t.add(x1, z)
    }
}

/// How saliency features merge with encoder features at each scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// Learnable weighted sum, weights initialized to 1.
    Affem,
    /// Plain elementwise sum.
    Sum,
    /// Channel concatenation followed by a 1x1 reduction.
    Concat,
}

impl Fusion {
    pub fn parse(s: &str) -> Result<Fusion> {
        match s {
            "affem" => Ok(Fusion::Affem),
            "sum" => Ok(Fusion::Sum),
            "concat" => Ok(Fusion::Concat),
            other => Err(Error::Config(format!(
                "unknown fusion '{other}' (expected affem|sum|concat)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Fusion::Affem => "affem",
            Fusion::Sum => "sum",
            Fusion::Concat => "concat",
        }
    }
}

/// One fusion site (per encoder scale).
#[derive(Debug, Clone)]
struct FusionSite {
    prefix: String,
    kind: Fusion,
    per_channel: bool,
    channels: usize,
    reduce: Conv2d,
}

impl FusionSite {
    fn new(prefix: String, kind: Fusion, per_channel: bool, channels: usize) -> Self {
        let reduce = Conv2d::new(format!("{prefix}.reduce"), 2 * channels, channels, 1);
        FusionSite {
            prefix,
            kind,
            per_channel,
            channels,
            reduce,
        }
    }

    fn register(&self, store: &mut ParamStore, seed: u64) {
        match self.kind {
            Fusion::Affem => {
                let shape = if self.per_channel {
                    vec![self.channels]
                } else {
                    vec![1]
                };
                store.insert(
                    &format!("{}.w1", self.prefix),
                    ArrayD::from_elem(IxDyn(&shape), 1.0),
                    true,
                );
                store.insert(
                    &format!("{}.w2", self.prefix),
                    ArrayD::from_elem(IxDyn(&shape), 1.0),
                    true,
                );
            }
            Fusion::Sum => {}
            Fusion::Concat => self.reduce.register(store, seed),
        }
    }

    fn num_params(&self) -> usize {
        match self.kind {
            Fusion::Affem => {
                if self.per_channel {
                    2 * self.channels
                } else {
                    2
                }
            }
            Fusion::Sum => 0,
            Fusion::Concat => self.reduce.num_params(),
        }
    }

    fn forward(&self, t: &mut Tape, p: &Bound, f: Var, f_s: Var) -> Result<Var> {
        match self.kind {
            Fusion::Affem => {
                let w1 = p.var(&format!("{}.w1", self.prefix));
                let w2 = p.var(&format!("{}.w2", self.prefix));
                affem_fuse(t, f, f_s, w1, w2)
            }
            Fusion::Sum => {
                if t.shape(f) != t.shape(f_s) {
                    return Err(Error::Input("fusion shape mismatch".into()));
                }
                Ok(t.add(f, f_s))
            }
            Fusion::Concat => {
                let cat = t.concat(&[f, f_s], 0);
                Ok(self.reduce.forward(t, p, cat))
            }
        }
    }
}

/// The full encoder.
#[derive(Debug, Clone)]
pub struct SfeemEncoder {
    pub cfg: EncoderConfig,
    pub in_channels: usize,
    intro: Conv2d,
    enc_stages: Vec<(Vec<NafBlock>, FusionSite, Conv2d)>,
    middle: Vec<NafBlock>,
    dec_stages: Vec<(Conv2d, Vec<NafBlock>)>,
    ending: Conv2d,
    shallow_proj: Conv2d,
}

impl SfeemEncoder {
    pub fn new(
        cfg: EncoderConfig,
        in_channels: usize,
        fusion: Fusion,
        affem_per_channel: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.base_width;
        let intro = Conv2d::new("encoder.intro", in_channels, w, 3);
        let mut enc_stages = Vec::new();
        for (i, &n) in cfg.enc_blocks.iter().enumerate() {
            let cw = cfg.width_at(i);
            let blocks = (0..n)
                .map(|j| {
                    NafBlock::new(
                        format!("encoder.enc{i}.block{j}"),
                        cw,
                        cfg.dw_expansion,
                        cfg.ffn_expansion,
                    )
                })
                .collect();
            let fuse = FusionSite::new(
                format!("encoder.enc{i}.fuse"),
                fusion,
                affem_per_channel,
                cw,
            );
            let down = Conv2d::new(format!("encoder.enc{i}.down"), cw, 2 * cw, 2).strided(2, 0);
            enc_stages.push((blocks, fuse, down));
        }
        let mid_w = cfg.width_at(cfg.levels());
        let middle = (0..cfg.middle_blocks)
            .map(|j| {
                NafBlock::new(
                    format!("encoder.mid.block{j}"),
                    mid_w,
                    cfg.dw_expansion,
                    cfg.ffn_expansion,
                )
            })
            .collect();
        let mut dec_stages = Vec::new();
        for (i, &n) in cfg.dec_blocks.iter().enumerate().rev() {
            let cw = cfg.width_at(i);
            let up = Conv2d::new(format!("encoder.dec{i}.up"), 2 * cw, 4 * cw, 1);
            let blocks = (0..n)
                .map(|j| {
                    NafBlock::new(
                        format!("encoder.dec{i}.block{j}"),
                        cw,
                        cfg.dw_expansion,
                        cfg.ffn_expansion,
                    )
                })
                .collect();
            dec_stages.push((up, blocks));
        }
        let ending = Conv2d::new("encoder.ending", w, cfg.out_dim, 3);
        let shallow_proj = Conv2d::new("encoder.shallow_proj", w, cfg.out_dim, 1);
        Ok(SfeemEncoder {
            cfg,
            in_channels,
            intro,
            enc_stages,
            middle,
            dec_stages,
            ending,
            shallow_proj,
        })
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        self.intro.register(store, seed);
        for (blocks, fuse, down) in &self.enc_stages {
            for b in blocks {
                b.register(store, seed);
            }
            fuse.register(store, seed);
            down.register(store, seed);
        }
        for b in &self.middle {
            b.register(store, seed);
        }
        for (up, blocks) in &self.dec_stages {
            up.register(store, seed);
            for b in blocks {
                b.register(store, seed);
            }
        }
        self.ending.register(store, seed);
        self.shallow_proj.register(store, seed);
    }

    pub fn num_params(&self) -> usize {
        let mut n = self.intro.num_params() + self.ending.num_params() + self.shallow_proj.num_params();
        for (blocks, fuse, down) in &self.enc_stages {
            n += blocks.iter().map(NafBlock::num_params).sum::<usize>();
            n += fuse.num_params() + down.num_params();
        }
        n += self.middle.iter().map(NafBlock::num_params).sum::<usize>();
        for (up, blocks) in &self.dec_stages {
            n += up.num_params() + blocks.iter().map(NafBlock::num_params).sum::<usize>();
        }
        n
    }

    /// Run the encoder on `x: [in_ch, h, w]` with one saliency feature map
    /// per scale. Dims must already be divisible by [`EncoderConfig::spatial_divisor`].
    pub fn forward(&self, t: &mut Tape, p: &Bound, x: Var, pyramid: &[Var]) -> Result<Var> {
        let sh = t.shape(x).to_vec();
        let div = self.cfg.spatial_divisor();
        if sh[1] % div != 0 || sh[2] % div != 0 {
            return Err(Error::Input(format!(
                "encoder input {}x{} not divisible by {div}",
                sh[1], sh[2]
            )));
        }
        assert_eq!(
            pyramid.len(),
            self.cfg.levels(),
            "pyramid level count mismatch"
        );
        let shallow = self.intro.forward(t, p, x);
        let mut cur = shallow;
        let mut skips = Vec::with_capacity(self.enc_stages.len());
        for (i, (blocks, fuse, down)) in self.enc_stages.iter().enumerate() {
            for b in blocks {
                cur = b.forward(t, p, cur);
            }
            let fused = fuse.forward(t, p, cur, pyramid[i])?;
            skips.push(fused);
            cur = down.forward(t, p, fused);
        }
        for b in &self.middle {
            cur = b.forward(t, p, cur);
        }
        for (si, (up, blocks)) in self.dec_stages.iter().enumerate() {
            let lifted = up.forward(t, p, cur);
            let lifted = pixel_shuffle2(t, lifted);
            let skip = skips[skips.len() - 1 - si];
            cur = t.add(lifted, skip);
            for b in blocks {
                cur = b.forward(t, p, cur);
            }
        }
        let out = self.ending.forward(t, p, cur);
        let res = self.shallow_proj.forward(t, p, shallow);
        Ok(t.add(out, res))
    }

    /// Reflect-pad `x` so the encoder accepts it, run, and crop the output
    /// back to the original spatial size.
    pub fn forward_padded(&self, t: &mut Tape, p: &Bound, x: Var, pyramid: &[Var]) -> Result<Var> {
        let sh = t.shape(x).to_vec();
        let div = self.cfg.spatial_divisor();
        let pb = (div - sh[1] % div) % div;
        let pr = (div - sh[2] % div) % div;
        let padded = reflect_pad_br(t, x, pb, pr);
        let out = self.forward(t, p, padded, pyramid)?;
        Ok(crop_tl(t, out, sh[1], sh[2]))
    }
}

/// Zero saliency feature maps matching the encoder's fusion sites, for
/// configurations without the saliency branch.
pub fn zero_pyramid(t: &mut Tape, cfg: &EncoderConfig, h: usize, w: usize) -> Vec<Var> {
    (0..cfg.levels())
        .map(|i| {
            t.constant(ArrayD::zeros(IxDyn(&[
                cfg.width_at(i),
                h >> i,
                w >> i,
            ])))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::bind;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn randn(rng: &mut ChaCha20Rng, shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            base_width: 4,
            enc_blocks: vec![1, 1],
            middle_blocks: 1,
            dec_blocks: vec![1, 1],
            out_dim: 8,
            ffn_expansion: 2,
            dw_expansion: 2,
        }
    }

    #[test]
    fn simple_gate_identity_against_ones() {
        let mut t = Tape::new();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[3, 4, 4]);
        let mut x = ArrayD::<f64>::from_elem(IxDyn(&[6, 4, 4]), 1.0);
        x.slice_axis_mut(ndarray::Axis(0), ndarray::Slice::from(0..3))
            .assign(&a);
        let xv = t.constant(x);
        let y = simple_gate(&mut t, xv).unwrap();
        assert_eq!(t.value(y), &a);
    }

    #[test]
    fn simple_gate_constant_halves() {
        let mut t = Tape::new();
        let mut x = ArrayD::<f64>::from_elem(IxDyn(&[4, 2, 2]), 2.0);
        x.slice_axis_mut(ndarray::Axis(0), ndarray::Slice::from(2..4))
            .fill(3.0);
        let xv = t.constant(x);
        let y = simple_gate(&mut t, xv).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 6.0));
    }

    #[test]
    fn simple_gate_matches_elementwise_loop() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let x = randn(&mut rng, &[4, 2, 2]);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = simple_gate(&mut t, xv).unwrap();
        for c in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let expect = x[[c, i, j]] * x[[c + 2, i, j]];
                    assert_eq!(t.value(y)[[c, i, j]], expect);
                }
            }
        }
    }

    #[test]
    fn simple_gate_rejects_odd_channels() {
        let mut t = Tape::new();
        let x = t.constant(ArrayD::zeros(IxDyn(&[3, 2, 2])));
        assert!(matches!(simple_gate(&mut t, x), Err(Error::Input(_))));
    }

    #[test]
    fn sca_identity_conv_on_constant_input() {
        let conv = Conv2d::new("sca", 2, 2, 1);
        let mut store = ParamStore::new();
        conv.register(&mut store, 0);
        store.get_mut("sca.weight").unwrap().value =
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        store.get_mut("sca.bias").unwrap().value = ArrayD::zeros(IxDyn(&[2]));
        let mut t = Tape::new();
        let p = bind(&mut t, &store, false);
        let x = t.constant(ArrayD::from_elem(IxDyn(&[2, 3, 3]), 2.0));
        let y = simplified_channel_attention(&mut t, &p, &conv, x);
        assert!(t.value(y).iter().all(|&v| v == 4.0));
    }

    #[test]
    fn sca_matches_brute_force() {
        let conv = Conv2d::new("sca", 3, 3, 1);
        let mut store = ParamStore::new();
        conv.register(&mut store, 5);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let x = randn(&mut rng, &[3, 4, 5]);
        let mut t = Tape::new();
        let p = bind(&mut t, &store, false);
        let xv = t.constant(x.clone());
        let y = simplified_channel_attention(&mut t, &p, &conv, xv);
        // oracle: channel means, 1x1 conv as matvec, broadcast multiply
        let w = &store.get("sca.weight").unwrap().value;
        let b = &store.get("sca.bias").unwrap().value;
        let mut means = [0.0f64; 3];
        for c in 0..3 {
            let mut acc = 0.0;
            for i in 0..4 {
                for j in 0..5 {
                    acc += x[[c, i, j]];
                }
            }
            means[c] = acc / 20.0;
        }
        for c in 0..3 {
            let mut att = b[[c]];
            for k in 0..3 {
                att += w[[c, k]] * means[k];
            }
            for i in 0..4 {
                for j in 0..5 {
                    let expect = x[[c, i, j]] * att;
                    let got = t.value(y)[[c, i, j]];
                    assert!((got - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn affem_examples() {
        let mut t = Tape::new();
        let f = t.constant(ArrayD::from_elem(IxDyn(&[2, 2, 2]), 2.0));
        let fs = t.constant(ArrayD::from_elem(IxDyn(&[2, 2, 2]), 1.0));
        let one = t.constant(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let zero = t.constant(ArrayD::from_elem(IxDyn(&[1]), 0.0));
        let half = t.constant(ArrayD::from_elem(IxDyn(&[1]), 0.5));
        let two = t.constant(ArrayD::from_elem(IxDyn(&[1]), 2.0));
        let id = affem_fuse(&mut t, f, fs, one, zero).unwrap();
        assert_eq!(t.value(id), t.value(f));
        let init = affem_fuse(&mut t, f, fs, one, one).unwrap();
        assert!(t.value(init).iter().all(|&v| v == 3.0));
        let mixed = affem_fuse(&mut t, f, fs, half, two).unwrap();
        assert!(t.value(mixed).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn affem_rejects_shape_mismatch() {
        let mut t = Tape::new();
        let f = t.constant(ArrayD::zeros(IxDyn(&[2, 2, 2])));
        let fs = t.constant(ArrayD::zeros(IxDyn(&[2, 3, 2])));
        let one = t.constant(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        assert!(matches!(
            affem_fuse(&mut t, f, fs, one, one),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn naf_block_zero_projections_is_identity() {
        let block = NafBlock::new("b", 4, 2, 2);
        let mut store = ParamStore::new();
        block.register(&mut store, 3);
        for name in ["b.conv3.weight", "b.conv3.bias", "b.conv5.weight", "b.conv5.bias"] {
            store.get_mut(name).unwrap().value.fill(0.0);
        }
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[4, 5, 6]);
        let mut t = Tape::new();
        let p = bind(&mut t, &store, false);
        let xv = t.constant(x.clone());
        // stacking zeroed blocks stays the identity
        let y1 = block.forward(&mut t, &p, xv);
        let y2 = block.forward(&mut t, &p, y1);
        let y3 = block.forward(&mut t, &p, y2);
        assert_eq!(t.value(y3), &x);
    }

    #[test]
    fn naf_block_preserves_shape() {
        let block = NafBlock::new("b", 32, 2, 2);
        let mut store = ParamStore::new();
        block.register(&mut store, 9);
        let mut t = Tape::new();
        let p = bind(&mut t, &store, false);
        let x = t.constant(ArrayD::zeros(IxDyn(&[32, 16, 16])));
        let y = block.forward(&mut t, &p, x);
        assert_eq!(t.shape(y), &[32, 16, 16]);
    }

    /// Straight-line reference recomputation of a NAFBlock on plain arrays.
    fn naf_reference(store: &ParamStore, prefix: &str, x: &ArrayD<f64>, width: usize) -> ArrayD<f64> {
        let get = |n: &str| &store.get(&format!("{prefix}.{n}")).unwrap().value;
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(c, width);
        let ln = |x: &ArrayD<f64>, g: &ArrayD<f64>, b: &ArrayD<f64>| -> ArrayD<f64> {
            let c = x.shape()[0];
            let (h, w) = (x.shape()[1], x.shape()[2]);
            let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
            for i in 0..h {
                for j in 0..w {
                    let mut mean = 0.0;
                    for ci in 0..c {
                        mean += x[[ci, i, j]];
                    }
                    mean /= c as f64;
                    let mut var = 0.0;
                    for ci in 0..c {
                        let d = x[[ci, i, j]] - mean;
                        var += d * d;
                    }
                    var /= c as f64;
                    let rstd = 1.0 / (var + 1e-6).sqrt();
                    for ci in 0..c {
                        out[[ci, i, j]] = (x[[ci, i, j]] - mean) * rstd * g[[ci]] + b[[ci]];
                    }
                }
            }
            out
        };
        let conv1x1 = |x: &ArrayD<f64>, w_: &ArrayD<f64>, b_: &ArrayD<f64>| -> ArrayD<f64> {
            let (ci_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let co_n = w_.shape()[0];
            let mut out = ArrayD::zeros(IxDyn(&[co_n, h, w]));
            for co in 0..co_n {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = b_[[co]];
                        for ci in 0..ci_n {
                            acc += w_[[co, ci]] * x[[ci, i, j]];
                        }
                        out[[co, i, j]] = acc;
                    }
                }
            }
            out
        };
        let dw3 = |x: &ArrayD<f64>, w_: &ArrayD<f64>, b_: &ArrayD<f64>| -> ArrayD<f64> {
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
            for ci in 0..c {
                for i in 0..h as isize {
                    for j in 0..w as isize {
                        let mut acc = b_[[ci]];
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let iy = i + ky - 1;
                                let ix = j + kx - 1;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += w_[[ci, (ky * 3 + kx) as usize]]
                                    * x[[ci, iy as usize, ix as usize]];
                            }
                        }
                        out[[ci, i as usize, j as usize]] = acc;
                    }
                }
            }
            out
        };
        let gate = |x: &ArrayD<f64>| -> ArrayD<f64> {
            let c = x.shape()[0] / 2;
            let (h, w) = (x.shape()[1], x.shape()[2]);
            let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        out[[ci, i, j]] = x[[ci, i, j]] * x[[ci + c, i, j]];
                    }
                }
            }
            out
        };
        let sca = |x: &ArrayD<f64>, w_: &ArrayD<f64>, b_: &ArrayD<f64>| -> ArrayD<f64> {
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut means = vec![0.0f64; c];
            for ci in 0..c {
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        acc += x[[ci, i, j]];
                    }
                }
                means[ci] = acc / (h * w) as f64;
            }
            let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
            for co in 0..c {
                let mut att = b_[[co]];
                for ci in 0..c {
                    att += w_[[co, ci]] * means[ci];
                }
                for i in 0..h {
                    for j in 0..w {
                        out[[co, i, j]] = x[[co, i, j]] * att;
                    }
                }
            }
            out
        };

        let y = ln(x, get("ln1.gamma"), get("ln1.beta"));
        let y = conv1x1(&y, get("conv1.weight"), get("conv1.bias"));
        let y = dw3(&y, get("dwconv.weight"), get("dwconv.bias"));
        let y = gate(&y);
        let y = sca(&y, get("sca.weight"), get("sca.bias"));
        let y = conv1x1(&y, get("conv3.weight"), get("conv3.bias"));
        let mut x1 = x.clone();
        x1 += &y;
        let z = ln(&x1, get("ln2.gamma"), get("ln2.beta"));
        let z = conv1x1(&z, get("conv4.weight"), get("conv4.bias"));
        let z = gate(&z);
        let z = conv1x1(&z, get("conv5.weight"), get("conv5.bias"));
        let mut out = x1;
        out += &z;
        let _ = (h, w);
        out
    }

    #[test]
    fn naf_block_matches_straight_line_reference() {
        let block = NafBlock::new("b", 6, 2, 2);
        let mut store = ParamStore::new();
        block.register(&mut store, 21);
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let x = randn(&mut rng, &[6, 5, 4]);
        let mut t = Tape::new();
        let p = bind(&mut t, &store, false);
        let xv = t.constant(x.clone());
        let y = block.forward(&mut t, &p, xv);
        let expect = naf_reference(&store, "b", &x, 6);
        let got = t.value(y);
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn sfeem_default_config_shape_contract() {
        let enc = SfeemEncoder::new(EncoderConfig::default(), 1, Fusion::Affem, false).unwrap();
        let mut store = ParamStore::new();
        enc.register(&mut store, 0);
        let mut t = Tape::new();
        let p = bind(&mut t, &store, false);
        let x = t.constant(ArrayD::zeros(IxDyn(&[1, 48, 48])));
        let pyramid = zero_pyramid(&mut t, &enc.cfg, 48, 48);
        let y = enc.forward(&mut t, &p, x, &pyramid).unwrap();
        assert_eq!(t.shape(y), &[128, 48, 48]);
        assert!(t.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sfeem_zero_weights_stay_finite() {
        let enc = SfeemEncoder::new(tiny_cfg(), 1, Fusion::Affem, false).unwrap();
        let mut store = ParamStore::new();
        enc.register(&mut store, 0);
        let names: Vec<String> = store.names().cloned().collect();
        for n in names {
            store.get_mut(&n).unwrap().value.fill(0.0);
        }
        let mut t = Tape::new();
        let p = bind(&mut t, &store, false);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x = t.constant(randn(&mut rng, &[1, 8, 8]));
        let pyramid = zero_pyramid(&mut t, &enc.cfg, 8, 8);
        let y = enc.forward(&mut t, &p, x, &pyramid).unwrap();
        assert!(t.value(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sfeem_rejects_indivisible_input() {
        let enc = SfeemEncoder::new(tiny_cfg(), 1, Fusion::Sum, false).unwrap();
        let mut store = ParamStore::new();
        enc.register(&mut store, 0);
        let mut t = Tape::new();
        let p = bind(&mut t, &store, false);
        let x = t.constant(ArrayD::zeros(IxDyn(&[1, 10, 8])));
        let pyramid = zero_pyramid(&mut t, &enc.cfg, 8, 8);
        assert!(matches!(
            enc.forward(&mut t, &p, x, &pyramid),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn sfeem_padded_forward_handles_odd_sizes() {
        let enc = SfeemEncoder::new(tiny_cfg(), 1, Fusion::Sum, false).unwrap();
        let mut store = ParamStore::new();
        enc.register(&mut store, 0);
        let mut t = Tape::new();
        let p = bind(&mut t, &store, false);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let x = t.constant(randn(&mut rng, &[1, 11, 7]));
        let pyramid = zero_pyramid(&mut t, &enc.cfg, 12, 8);
        let y = enc.forward_padded(&mut t, &p, x, &pyramid).unwrap();
        assert_eq!(t.shape(y), &[8, 11, 7]);
    }

    #[test]
    fn affem_weights_one_zero_ignores_pyramid() {
        // With (w1, w2) = (1, 0) at every site, the output is bit-identical
        // to running with an all-zero pyramid.
        let enc = SfeemEncoder::new(tiny_cfg(), 1, Fusion::Affem, false).unwrap();
        let mut store = ParamStore::new();
        enc.register(&mut store, 12);
        for i in 0..2 {
            store
                .get_mut(&format!("encoder.enc{i}.fuse.w2"))
                .unwrap()
                .value
                .fill(0.0);
        }
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let x_data = randn(&mut rng, &[1, 8, 8]);
        let run = |pyr_data: Option<&[ArrayD<f64>]>| -> ArrayD<f64> {
            let mut t = Tape::new();
            let p = bind(&mut t, &store, false);
            let x = t.constant(x_data.clone());
            let pyramid: Vec<Var> = match pyr_data {
                Some(maps) => maps.iter().map(|m| t.constant(m.clone())).collect(),
                None => zero_pyramid(&mut t, &enc.cfg, 8, 8),
            };
            let y = enc.forward(&mut t, &p, x, &pyramid).unwrap();
            t.value(y).clone()
        };
        let mut rng2 = ChaCha20Rng::seed_from_u64(14);
        let maps = vec![randn(&mut rng2, &[4, 8, 8]), randn(&mut rng2, &[8, 4, 4])];
        let with_pyr = run(Some(&maps));
        let with_zeros = run(None);
        assert_eq!(with_pyr, with_zeros);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let enc = SfeemEncoder::new(
            EncoderConfig {
                base_width: 4,
                enc_blocks: vec![1],
                middle_blocks: 1,
                dec_blocks: vec![1],
                out_dim: 4,
                ffn_expansion: 2,
                dw_expansion: 2,
            },
            1,
            Fusion::Affem,
            false,
        )
        .unwrap();
        let mut store = ParamStore::new();
        enc.register(&mut store, 31);
        let mut rng = ChaCha20Rng::seed_from_u64(32);
        let x_data = randn(&mut rng, &[1, 4, 4]);
        let pyr_data = randn(&mut rng, &[4, 4, 4]);
        let loss_of = |store: &ParamStore| -> f64 {
            let mut t = Tape::new();
            let p = bind(&mut t, store, true);
            let x = t.constant(x_data.clone());
            let pyr = vec![t.constant(pyr_data.clone())];
            let y = enc.forward(&mut t, &p, x, &pyr).unwrap();
            let y = t.abs(y);
            let l = t.mean_all(y);
            t.value(l)[[0]]
        };
        // analytic
        let mut t = Tape::new();
        let p = bind(&mut t, &store, true);
        let x = t.constant(x_data.clone());
        let pyr = vec![t.constant(pyr_data.clone())];
        let y = enc.forward(&mut t, &p, x, &pyr).unwrap();
        let y = t.abs(y);
        let l = t.mean_all(y);
        let grads = t.backward(l);
        // probe a few parameters
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let names: Vec<String> = store.names().cloned().collect();
        for probe in 0..6 {
            let name = &names[rng.random_range(0..names.len())];
            let len = store.get(name).unwrap().value.len();
            let idx = rng.random_range(0..len);
            let h = 1e-5;
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().value.as_slice_mut().unwrap()[idx] += h;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().value.as_slice_mut().unwrap()[idx] -= h;
            let num = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let ana = grads
                .get(p.var(name))
                .map(|g| g.as_slice().unwrap()[idx])
                .unwrap_or(0.0);
            let denom = num.abs().max(ana.abs()).max(1e-7);
            assert!(
                (num - ana).abs() / denom < 1e-5,
                "probe {probe} {name}[{idx}]: numeric {num} vs analytic {ana}"
            );
        }
    }

    #[test]
    fn param_count_is_deterministic() {
        let enc = SfeemEncoder::new(EncoderConfig::default(), 1, Fusion::Affem, false).unwrap();
        let a = enc.num_params();
        let enc2 = SfeemEncoder::new(EncoderConfig::default(), 1, Fusion::Affem, false).unwrap();
        assert_eq!(a, enc2.num_params());
        let mut store = ParamStore::new();
        enc.register(&mut store, 0);
        assert_eq!(store.num_scalars(), a);
    }
}
