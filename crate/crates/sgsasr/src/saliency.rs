//! Spacecraft core-region saliency detection and its per-scale feature
//! pyramid.
//!
//! Detection is pluggable: the default luminance-threshold backend needs no
//! weights and is fully deterministic, while the external backend runs a
//! frozen convolutional detector loaded from a single NPZ model file. Either
//! way the detector is inference-only — none of its values ever reach the
//! trainable parameter set.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};

use crate::autograd::{Tape, Var};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::nn::{conv2d_raw, Bound, Conv2d, ParamStore};
use crate::npz;

/// Saliency detector selection plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum SaliencyBackend {
    /// Threshold at `mean + k * std` of the channel-mean luminance.
    Luminance { k: f64 },
    /// Frozen convolutional detector stored in an NPZ model file.
    External { model_path: PathBuf },
}

impl Default for SaliencyBackend {
    fn default() -> Self {
        SaliencyBackend::Luminance { k: 0.5 }
    }
}

/// Binary saliency from a global luminance threshold.
///
/// Reduces channels by mean, computes `tau = mean + k*std` over all pixels
/// (population std), and marks pixels strictly above `tau`. A zero-variance
/// image has no foreground and maps to all zeros.
pub fn luminance_saliency(image: &Image, k: f64) -> Result<Array2<f64>> {
    if k < 0.0 {
        return Err(Error::Input(format!("luminance threshold k must be >= 0, got {k}")));
    }
    let lum = image.luminance();
    let n = lum.len() as f64;
    let mean = lum.sum() / n;
    let var = lum.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(Array2::zeros(lum.dim()));
    }
    let tau = mean + k * std;
    Ok(lum.mapv(|v| if v > tau { 1.0 } else { 0.0 }))
}

/// Frozen external detector: a stack of same-padded 3x3 convolutions with
/// ReLU between layers and a sigmoid head producing one channel.
///
/// Model file layout (NPZ): `conv0.weight [c1, c_in, 3, 3]`, `conv0.bias
/// [c1]`, `conv1.weight`, ... with the final layer mapping to one channel.
#[derive(Debug, Clone)]
pub struct ExternalSaliencyModel {
    layers: Vec<(Array2<f64>, Array1<f64>, usize, usize)>,
}

impl ExternalSaliencyModel {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Config(format!(
                "saliency model file not found: {}",
                path.display()
            )));
        }
        let arrays = npz::npz_read(path)
            .map_err(|e| Error::Config(format!("unreadable saliency model {}: {e}", path.display())))?;
        let mut layers = Vec::new();
        for i in 0.. {
            let wname = format!("conv{i}.weight");
            let bname = format!("conv{i}.bias");
            let Some(w) = arrays.get(&wname) else { break };
            let b = arrays.get(&bname).ok_or_else(|| {
                Error::Config(format!("saliency model missing {bname}"))
            })?;
            let shape = w.shape();
            if shape.len() != 4 || shape[2] != 3 || shape[3] != 3 {
                return Err(Error::Config(format!(
                    "{wname}: expected [out, in, 3, 3], got {shape:?}"
                )));
            }
            let (out_ch, in_ch) = (shape[0], shape[1]);
            if b.shape() != [out_ch] {
                return Err(Error::Config(format!("{bname}: expected [{out_ch}]")));
            }
            let w2 = w
                .clone()
                .into_shape_with_order((out_ch, in_ch * 9))
                .unwrap();
            let b1 = b.clone().into_shape_with_order(out_ch).unwrap();
            layers.push((w2, b1, in_ch, out_ch));
        }
        if layers.is_empty() {
            return Err(Error::Config(
                "saliency model has no conv0.weight entry".to_string(),
            ));
        }
        if layers.last().unwrap().3 != 1 {
            return Err(Error::Config(
                "saliency model must end in a single-channel layer".to_string(),
            ));
        }
        for w in layers.windows(2) {
            if w[0].3 != w[1].2 {
                return Err(Error::Config(format!(
                    "saliency model channel chain broken: {} -> {}",
                    w[0].3, w[1].2
                )));
            }
        }
        Ok(ExternalSaliencyModel { layers })
    }

    pub fn run(&self, image: &Image) -> Result<Array2<f64>> {
        let want_in = self.layers[0].2;
        let (c, h, w) = image.data.dim();
        let mut x: Array3<f64> = if want_in == c {
            image.data.clone()
        } else if want_in == 1 {
            let lum = image.luminance();
            lum.into_shape_with_order((1, h, w)).unwrap()
        } else if c == 1 {
            let mut rep = Array3::zeros((want_in, h, w));
            for ci in 0..want_in {
                rep.index_axis_mut(ndarray::Axis(0), ci)
                    .assign(&image.data.index_axis(ndarray::Axis(0), 0));
            }
            rep
        } else {
            return Err(Error::Input(format!(
                "saliency model expects {want_in} channels, image has {c}"
            )));
        };
        let n_layers = self.layers.len();
        for (i, (wm, bv, _, _)) in self.layers.iter().enumerate() {
            x = conv2d_raw(&x, wm, bv, 3, 1, 1);
            if i + 1 < n_layers {
                x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
            }
        }
        // sigmoid head keeps the map inside [0, 1]
        x.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
        Ok(x.index_axis(ndarray::Axis(0), 0).to_owned())
    }
}

/// A configured detector with the external model (if any) loaded up front.
#[derive(Debug, Clone)]
pub struct SaliencyDetector {
    backend: SaliencyBackend,
    external: Option<ExternalSaliencyModel>,
}

impl SaliencyDetector {
    pub fn new(backend: SaliencyBackend) -> Result<Self> {
        let external = match &backend {
            SaliencyBackend::External { model_path } => {
                Some(ExternalSaliencyModel::load(model_path)?)
            }
            SaliencyBackend::Luminance { k } => {
                if *k < 0.0 {
                    return Err(Error::Config(format!(
                        "saliency.k must be >= 0, got {k}"
                    )));
                }
                None
            }
        };
        Ok(SaliencyDetector { backend, external })
    }

    pub fn detect(&self, image: &Image) -> Result<Array2<f64>> {
        let c = image.channels();
        if c != 1 && c != 3 {
            return Err(Error::Input(format!(
                "saliency detection supports 1 or 3 channels, got {c}"
            )));
        }
        match (&self.backend, &self.external) {
            (SaliencyBackend::Luminance { k }, _) => luminance_saliency(image, *k),
            (SaliencyBackend::External { .. }, Some(model)) => model.run(image),
            (SaliencyBackend::External { .. }, None) => unreachable!("model loaded in new()"),
        }
    }
}

/// Detect the core-region saliency map for `image` with the given backend.
pub fn detect_saliency(image: &Image, backend: &SaliencyBackend) -> Result<Array2<f64>> {
    SaliencyDetector::new(backend.clone())?.detect(image)
}

/// Learnable projection of a saliency map into one feature map per encoder
/// scale: a full-resolution 3x3 convolution followed by strided 3x3
/// convolutions, channel-matched to the encoder widths.
#[derive(Debug, Clone)]
pub struct ScrrbPyramid {
    pub widths: Vec<usize>,
    head: Conv2d,
    downs: Vec<Conv2d>,
}

impl ScrrbPyramid {
    pub fn new(prefix: &str, widths: &[usize]) -> Self {
        assert!(!widths.is_empty(), "pyramid needs at least one level");
        let head = Conv2d::new(format!("{prefix}.head"), 1, widths[0], 3);
        let downs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Conv2d::new(format!("{prefix}.down{i}"), w[0], w[1], 3).strided(2, 1)
            })
            .collect();
        ScrrbPyramid { widths: widths.to_vec(), head, downs }
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        self.head.register(store, seed);
        for d in &self.downs {
            d.register(store, seed);
        }
    }

    pub fn num_params(&self) -> usize {
        self.head.num_params() + self.downs.iter().map(Conv2d::num_params).sum::<usize>()
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Produce the per-scale feature maps for saliency map `s` (`[1, h, w]`
    /// on the tape). Level `i` has spatial size `(h/2^i, w/2^i)` and
    /// `widths[i]` channels.
    pub fn forward(&self, t: &mut Tape, p: &Bound, s: Var) -> Result<Vec<Var>> {
        let sh = t.shape(s).to_vec();
        assert_eq!(sh.len(), 3, "saliency input must be [1,h,w]");
        let div = 1 << (self.levels() - 1);
        if sh[1] % div != 0 || sh[2] % div != 0 {
            return Err(Error::Input(format!(
                "saliency map {}x{} not divisible by {div} (pad the image upstream)",
                sh[1], sh[2]
            )));
        }
        let mut maps = Vec::with_capacity(self.levels());
        let mut cur = self.head.forward(t, p, s);
        maps.push(cur);
        for d in &self.downs {
            cur = d.forward(t, p, cur);
            maps.push(cur);
        }
        Ok(maps)
    }
}

/// Free-function form of [`ScrrbPyramid::forward`].
pub fn saliency_feature_pyramid(
    t: &mut Tape,
    p: &Bound,
    pyramid: &ScrrbPyramid,
    s: Var,
) -> Result<Vec<Var>> {
    pyramid.forward(t, p, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::bind;
    use ndarray::{Array3, IxDyn};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Image {
        Image::new(Array3::from_shape_fn((1, h, w), |(_, y, x)| f(y, x)))
    }

    #[test]
    fn black_image_has_no_saliency() {
        let img = gray(32, 32, |_, _| 0.0);
        let s = luminance_saliency(&img, 0.5).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_white_image_has_no_saliency() {
        let img = gray(32, 32, |_, _| 1.0);
        let s = luminance_saliency(&img, 0.5).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bright_patch_is_exactly_segmented() {
        // 10x10 black image with a 3x3 patch of ones; tau computed
        // independently here and compared pixel by pixel.
        let img = gray(10, 10, |y, x| {
            if (3..6).contains(&y) && (3..6).contains(&x) {
                1.0
            } else {
                0.0
            }
        });
        let mean: f64 = 9.0 / 100.0;
        let var: f64 = (9.0 * (1.0 - mean) * (1.0 - mean) + 91.0 * mean * mean) / 100.0;
        let tau: f64 = mean + 0.5 * var.sqrt();
        assert!((tau - 0.2331).abs() < 1e-3);
        let s = luminance_saliency(&img, 0.5).unwrap();
        for y in 0..10 {
            for x in 0..10 {
                let expect = if img.data[[0, y, x]] > tau { 1.0 } else { 0.0 };
                assert_eq!(s[[y, x]], expect, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn half_and_half_with_k_zero() {
        let img = gray(8, 8, |y, _| if y < 4 { 0.0 } else { 1.0 });
        let s = luminance_saliency(&img, 0.0).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(s[[y, x]], if y < 4 { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn matches_per_pixel_oracle_on_random_images() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        for _ in 0..20 {
            let img = Image::new(Array3::from_shape_fn((3, 12, 9), |_| {
                rng.random_range(0.0..1.0)
            }));
            let k = rng.random_range(0.0..2.0);
            let s = luminance_saliency(&img, k).unwrap();
            // independent scalar-loop oracle
            let mut lum = vec![0.0f64; 12 * 9];
            for y in 0..12 {
                for x in 0..9 {
                    let mut acc = 0.0;
                    for c in 0..3 {
                        acc += img.data[[c, y, x]];
                    }
                    lum[y * 9 + x] = acc / 3.0;
                }
            }
            let mean = lum.iter().sum::<f64>() / lum.len() as f64;
            let std =
                (lum.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / lum.len() as f64)
                    .sqrt();
            let tau = mean + k * std;
            for y in 0..12 {
                for x in 0..9 {
                    let expect = if lum[y * 9 + x] > tau { 1.0 } else { 0.0 };
                    assert_eq!(s[[y, x]], expect);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn luminance_invariant_to_channel_permutation(seed in 0u64..500) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let data = Array3::from_shape_fn((3, 6, 6), |_| rng.random_range(0.0..1.0));
            let img = Image::new(data.clone());
            let mut permuted = Array3::zeros((3, 6, 6));
            for (dst, src) in [(0usize, 2usize), (1, 0), (2, 1)] {
                permuted
                    .index_axis_mut(ndarray::Axis(0), dst)
                    .assign(&data.index_axis(ndarray::Axis(0), src));
            }
            let a = luminance_saliency(&img, 0.5).unwrap();
            let b = luminance_saliency(&Image::new(permuted), 0.5).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn pyramid_shapes_follow_widths() {
        let pyr = ScrrbPyramid::new("scrrb", &[32, 64, 128, 256]);
        let mut store = ParamStore::new();
        pyr.register(&mut store, 0);
        let mut t = Tape::new();
        let p = bind(&mut t, &store, false);
        let s = t.constant(ndarray::ArrayD::zeros(IxDyn(&[1, 64, 64])));
        let maps = pyr.forward(&mut t, &p, s).unwrap();
        let shapes: Vec<Vec<usize>> = maps.iter().map(|m| t.shape(*m).to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![32, 64, 64],
                vec![64, 32, 32],
                vec![128, 16, 16],
                vec![256, 8, 8]
            ]
        );
        for m in &maps {
            assert!(t.value(*m).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn pyramid_single_level_keeps_resolution() {
        let pyr = ScrrbPyramid::new("scrrb", &[8]);
        let mut store = ParamStore::new();
        pyr.register(&mut store, 0);
        let mut t = Tape::new();
        let p = bind(&mut t, &store, false);
        let s = t.constant(ndarray::ArrayD::zeros(IxDyn(&[1, 13, 7])));
        let maps = pyr.forward(&mut t, &p, s).unwrap();
        assert_eq!(maps.len(), 1);
        assert_eq!(t.shape(maps[0]), &[8, 13, 7]);
    }

    #[test]
    fn pyramid_zero_weights_give_zero_maps() {
        let pyr = ScrrbPyramid::new("scrrb", &[4, 8]);
        let mut store = ParamStore::new();
        pyr.register(&mut store, 0);
        for name in ["scrrb.head.weight", "scrrb.head.bias", "scrrb.down0.weight", "scrrb.down0.bias"] {
            let e = store.get_mut(name).unwrap();
            e.value.fill(0.0);
        }
        let mut t = Tape::new();
        let p = bind(&mut t, &store, false);
        let s = t.constant(ndarray::ArrayD::from_elem(IxDyn(&[1, 8, 8]), 0.7));
        let maps = pyr.forward(&mut t, &p, s).unwrap();
        for m in maps {
            assert!(t.value(m).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn pyramid_rejects_indivisible_dims() {
        let pyr = ScrrbPyramid::new("scrrb", &[4, 8, 16]);
        let mut store = ParamStore::new();
        pyr.register(&mut store, 0);
        let mut t = Tape::new();
        let p = bind(&mut t, &store, false);
        let s = t.constant(ndarray::ArrayD::zeros(IxDyn(&[1, 10, 12])));
        assert!(matches!(
            pyr.forward(&mut t, &p, s),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn external_backend_runs_a_frozen_model() {
        let dir = std::env::temp_dir().join(format!("sgsasr_ext_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("detector.npz");
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let w0 = ndarray::ArrayD::from_shape_fn(IxDyn(&[4, 1, 3, 3]), |_| {
            rng.random_range(-0.3..0.3)
        });
        let b0 = ndarray::ArrayD::zeros(IxDyn(&[4]));
        let w1 = ndarray::ArrayD::from_shape_fn(IxDyn(&[1, 4, 3, 3]), |_| {
            rng.random_range(-0.3..0.3)
        });
        let b1 = ndarray::ArrayD::zeros(IxDyn(&[1]));
        npz::npz_write(
            &path,
            [
                ("conv0.weight", &w0),
                ("conv0.bias", &b0),
                ("conv1.weight", &w1),
                ("conv1.bias", &b1),
            ],
        )
        .unwrap();
        let backend = SaliencyBackend::External { model_path: path.clone() };
        let img = gray(12, 10, |y, x| ((y + x) % 5) as f64 / 5.0);
        let s = detect_saliency(&img, &backend).unwrap();
        assert_eq!(s.dim(), (12, 10));
        assert!(s.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // determinism
        let s2 = detect_saliency(&img, &backend).unwrap();
        assert_eq!(s, s2);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_model_file_is_a_config_error() {
        let backend = SaliencyBackend::External {
            model_path: PathBuf::from("/nonexistent/detector.npz"),
        };
        let img = gray(8, 8, |_, _| 0.0);
        assert!(matches!(
            detect_saliency(&img, &backend),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unsupported_channel_count_is_an_input_error() {
        let img = Image::new(Array3::zeros((2, 8, 8)));
        assert!(matches!(
            detect_saliency(&img, &SaliencyBackend::default()),
            Err(Error::Input(_))
        ));
    }
}
