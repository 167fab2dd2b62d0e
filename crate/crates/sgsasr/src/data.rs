//! Images, synthetic scene generation, degradation, and training samples.
//!
//! Images are dense `[channels, height, width]` arrays with values in
//! `[0, 1]`. The synthetic generator produces spacecraft-like scenes (bright
//! geometric structures on a black background) so the full pipeline can be
//! exercised without any external dataset.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Dense image, `[c, h, w]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Self {
        Image { data }
    }

    pub fn from_gray(gray: Array2<f64>) -> Self {
        let (h, w) = gray.dim();
        Image {
            data: gray.into_shape_with_order((1, h, w)).unwrap(),
        }
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Image {
            data: Array3::zeros((c, h, w)),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Channel-mean luminance, `[h, w]`.
    pub fn luminance(&self) -> Array2<f64> {
        let (c, h, w) = self.data.dim();
        let mut out = Array2::zeros((h, w));
        for ci in 0..c {
            out += &self.data.index_axis(ndarray::Axis(0), ci);
        }
        out / c as f64
    }

    pub fn clamped(&self) -> Image {
        Image {
            data: self.data.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }
}

// ---------------------------------------------------------------------------
// PNG I/O
// ---------------------------------------------------------------------------

/// Load an 8-bit grayscale or RGB PNG, normalized to `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("unreadable image {}: {e}", path.display())))?;
    use image::DynamicImage::*;
    let arr = match img {
        ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            let mut a = Array3::zeros((1, h as usize, w as usize));
            for (x, y, p) in g.enumerate_pixels() {
                a[[0, y as usize, x as usize]] = p.0[0] as f64 / 255.0;
            }
            a
        }
        ImageLumaA8(g) => {
            let (w, h) = g.dimensions();
            let mut a = Array3::zeros((1, h as usize, w as usize));
            for (x, y, p) in g.enumerate_pixels() {
                a[[0, y as usize, x as usize]] = p.0[0] as f64 / 255.0;
            }
            a
        }
        ImageRgb8(g) => {
            let (w, h) = g.dimensions();
            let mut a = Array3::zeros((3, h as usize, w as usize));
            for (x, y, p) in g.enumerate_pixels() {
                for c in 0..3 {
                    a[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
                }
            }
            a
        }
        ImageRgba8(g) => {
            let (w, h) = g.dimensions();
            let mut a = Array3::zeros((3, h as usize, w as usize));
            for (x, y, p) in g.enumerate_pixels() {
                for c in 0..3 {
                    a[[c, y as usize, x as usize]] = p.0[c] as f64 / 255.0;
                }
            }
            a
        }
        other => {
            return Err(Error::Data(format!(
                "{}: unsupported pixel format {:?} (expected 8-bit gray or RGB)",
                path.display(),
                other.color()
            )))
        }
    };
    Ok(Image::new(arr))
}

/// Save as 8-bit PNG (grayscale for 1 channel, RGB for 3), clamping to `[0, 1]`.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (c, h, w) = img.data.dim();
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let res = match c {
        1 => {
            let mut buf = image::GrayImage::new(w as u32, h as u32);
            for (x, y, p) in buf.enumerate_pixels_mut() {
                p.0[0] = to_u8(img.data[[0, y as usize, x as usize]]);
            }
            buf.save(path)
        }
        3 => {
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for (x, y, p) in buf.enumerate_pixels_mut() {
                for ci in 0..3 {
                    p.0[ci] = to_u8(img.data[[ci, y as usize, x as usize]]);
                }
            }
            buf.save(path)
        }
        other => {
            return Err(Error::Input(format!(
                "cannot save image with {other} channels (expected 1 or 3)"
            )))
        }
    };
    res.map_err(|e| Error::Data(format!("failed to write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Synthetic spacecraft scenes
// ---------------------------------------------------------------------------

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    /// Square canvas size in pixels.
    pub size: usize,
    /// Number of rectangular body segments.
    pub bodies: usize,
    /// Number of paired solar panels (each count draws two).
    pub panel_pairs: usize,
    /// Number of thin line antennas.
    pub antennas: usize,
    /// Component intensity range.
    pub intensity: (f64, f64),
    /// Additive Gaussian noise sigma (0 disables noise).
    pub noise_sigma: f64,
    /// Background level.
    pub background: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            size: 64,
            bodies: 1,
            panel_pairs: 1,
            antennas: 2,
            intensity: (0.55, 1.0),
            noise_sigma: 0.0,
            background: 0.0,
        }
    }
}

struct RotRect {
    cx: f64,
    cy: f64,
    half_u: f64,
    half_v: f64,
    cos_t: f64,
    sin_t: f64,
    value: f64,
}

impl RotRect {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos_t + dy * self.sin_t;
        let v = -dx * self.sin_t + dy * self.cos_t;
        u.abs() <= self.half_u && v.abs() <= self.half_v
    }
}

/// Render a black canvas with anti-aliased bright geometry: a rectangular
/// body, paired panels offset perpendicular to the body axis, and thin line
/// antennas. Deterministic per RNG state; 4x supersampled for smooth edges.
pub fn synth_spacecraft_image(spec: &SynthSpec, rng: &mut ChaCha20Rng) -> Image {
    let n = spec.size;
    let s = n as f64;
    let mut shapes: Vec<RotRect> = Vec::new();
    let sample_val =
        |rng: &mut ChaCha20Rng| rng.random_range(spec.intensity.0..=spec.intensity.1);

    for _ in 0..spec.bodies {
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let val = sample_val(rng);
        shapes.push(RotRect {
            cx: rng.random_range(0.38..0.62) * s,
            cy: rng.random_range(0.38..0.62) * s,
            half_u: rng.random_range(0.08..0.15) * s,
            half_v: rng.random_range(0.05..0.10) * s,
            cos_t: theta.cos(),
            sin_t: theta.sin(),
            value: val,
        });
    }
    // panels attach to the first body's axis when one exists
    let (bx, by, bcos, bsin) = shapes
        .first()
        .map(|b| (b.cx, b.cy, b.cos_t, b.sin_t))
        .unwrap_or((0.5 * s, 0.5 * s, 1.0, 0.0));
    for _ in 0..spec.panel_pairs {
        let dist = rng.random_range(0.16..0.26) * s;
        let half_u = rng.random_range(0.07..0.12) * s;
        let half_v = rng.random_range(0.025..0.05) * s;
        let val = sample_val(rng);
        for side in [-1.0, 1.0] {
            shapes.push(RotRect {
                cx: bx + side * dist * bcos,
                cy: by + side * dist * bsin,
                half_u,
                half_v,
                cos_t: bcos,
                sin_t: bsin,
                value: val,
            });
        }
    }
    for _ in 0..spec.antennas {
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let val = sample_val(rng);
        shapes.push(RotRect {
            cx: rng.random_range(0.3..0.7) * s,
            cy: rng.random_range(0.3..0.7) * s,
            half_u: rng.random_range(0.08..0.16) * s,
            half_v: (0.004 * s).max(0.5),
            cos_t: theta.cos(),
            sin_t: theta.sin(),
            value: val,
        });
    }

    // 4x supersampling, max-blend, box downsample
    const SS: usize = 4;
    let mut canvas = Array2::<f64>::from_elem((n, n), spec.background);
    if !shapes.is_empty() {
        for py in 0..n {
            for px in 0..n {
                let mut acc = 0.0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let x = px as f64 + (sx as f64 + 0.5) / SS as f64;
                        let y = py as f64 + (sy as f64 + 0.5) / SS as f64;
                        let mut v = spec.background;
                        for sh in &shapes {
                            if sh.value > v && sh.contains(x, y) {
                                v = sh.value;
                            }
                        }
                        acc += v;
                    }
                }
                canvas[[py, px]] = acc / (SS * SS) as f64;
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
        for v in canvas.iter_mut() {
            *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
        }
    } else {
        canvas.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    Image::from_gray(canvas)
}

// ---------------------------------------------------------------------------
// Bicubic resampling
// ---------------------------------------------------------------------------

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Weights of the four taps `floor(src)-1 .. floor(src)+2` for fractional
/// phase `frac = src - floor(src)`.
pub fn bicubic_tap_weights(frac: f64) -> [f64; 4] {
    [
        cubic_kernel(1.0 + frac),
        cubic_kernel(frac),
        cubic_kernel(1.0 - frac),
        cubic_kernel(2.0 - frac),
    ]
}

/// Per-output-index taps for resampling a length-`n_src` axis to `n_dst`.
fn resample_taps(n_src: usize, n_dst: usize) -> Vec<(isize, [f64; 4])> {
    let ratio = n_src as f64 / n_dst as f64;
    (0..n_dst)
        .map(|j| {
            let src = (j as f64 + 0.5) * ratio - 0.5;
            let base = src.floor();
            let frac = src - base;
            (base as isize, bicubic_tap_weights(frac))
        })
        .collect()
}

fn resample_axis_1d(src: &[f64], n_src: usize, taps: &[(isize, [f64; 4])]) -> Vec<f64> {
    let mut out = vec![0.0f64; taps.len()];
    for (j, (base, w)) in taps.iter().enumerate() {
        let mut acc = 0.0;
        for (ti, wt) in w.iter().enumerate() {
            let idx = (base - 1 + ti as isize).clamp(0, n_src as isize - 1) as usize;
            acc += wt * src[idx];
        }
        out[j] = acc;
    }
    out
}

/// Separable cubic-convolution resampling (`a = -0.5`, edge clamping).
pub fn bicubic_resize(img: &Image, oh: usize, ow: usize) -> Image {
    assert!(oh >= 1 && ow >= 1, "bicubic_resize: target dims must be >= 1");
    let (c, h, w) = img.data.dim();
    let taps_h = resample_taps(h, oh);
    let taps_w = resample_taps(w, ow);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    let mut col_src = vec![0.0f64; h];
    let mut mid = Array2::<f64>::zeros((oh, w));
    for ci in 0..c {
        // rows (vertical) pass
        for x in 0..w {
            for y in 0..h {
                col_src[y] = img.data[[ci, y, x]];
            }
            let col_dst = resample_axis_1d(&col_src, h, &taps_h);
            for (y, v) in col_dst.iter().enumerate() {
                mid[[y, x]] = *v;
            }
        }
        // columns (horizontal) pass
        for y in 0..oh {
            let row: Vec<f64> = (0..w).map(|x| mid[[y, x]]).collect();
            let row_dst = resample_axis_1d(&row, w, &taps_w);
            for (x, v) in row_dst.iter().enumerate() {
                out[[ci, y, x]] = *v;
            }
        }
    }
    Image::new(out)
}

// ---------------------------------------------------------------------------
// Training samples
// ---------------------------------------------------------------------------

/// Coordinate/cell/target triples supervising one low-resolution patch.
#[derive(Debug, Clone)]
pub struct QuerySet {
    /// Normalized coordinates in `[-1, 1]^2`, `[n, 2]` as (row, col).
    pub coords: Array2<f64>,
    /// Output pixel extents `(2/H_out, 2/W_out)`, `[n, 2]`.
    pub cells: Array2<f64>,
    /// Ground-truth pixel values, `[n, channels]`.
    pub targets: Array2<f64>,
}

/// One supervised sample: an LR patch plus coordinate queries into its HR crop.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub lr: Image,
    pub queries: QuerySet,
    /// Side length of the HR crop the queries index into.
    pub hr_size: usize,
}

/// Pixel-center coordinate of index `i` on an axis of length `n`.
pub fn pixel_center(i: usize, n: usize) -> f64 {
    -1.0 + (2 * i + 1) as f64 / n as f64
}

/// Build an arbitrary-scale training sample: draw `s ~ U(s_min, s_max)`, crop
/// a `round(p*s)` square from `hr` at a random position, bicubic-downscale it
/// to `p x p` for the LR patch, and sample `p^2` distinct HR pixel centers as
/// supervision queries.
pub fn make_training_sample(
    hr: &Image,
    scale_range: (f64, f64),
    p: usize,
    rng: &mut ChaCha20Rng,
) -> Result<TrainingSample> {
    let (s_min, s_max) = scale_range;
    if !(s_min >= 1.0 && s_max >= s_min) {
        return Err(Error::Input(format!(
            "invalid scale range ({s_min}, {s_max})"
        )));
    }
    let (c, h, w) = hr.data.dim();
    let q_max = (p as f64 * s_max).round() as usize;
    if q_max > h.min(w) {
        return Err(Error::Input(format!(
            "hr image {h}x{w} too small for {q_max} crops (p={p}, s_max={s_max})"
        )));
    }
    let s = if s_max > s_min {
        rng.random_range(s_min..s_max)
    } else {
        s_min
    };
    let q = (p as f64 * s).round() as usize;
    let top = rng.random_range(0..=h - q);
    let left = rng.random_range(0..=w - q);
    let crop = hr
        .data
        .slice(ndarray::s![.., top..top + q, left..left + q])
        .to_owned();
    let crop = Image::new(crop.as_standard_layout().into_owned());
    let lr = bicubic_resize(&crop, p, p);

    // p^2 distinct pixel indices via partial Fisher-Yates
    let n_q = p * p;
    let total = q * q;
    let mut idx: Vec<u32> = (0..total as u32).collect();
    for i in 0..n_q {
        let j = rng.random_range(i..total);
        idx.swap(i, j);
    }
    let mut coords = Array2::zeros((n_q, 2));
    let mut cells = Array2::zeros((n_q, 2));
    let mut targets = Array2::zeros((n_q, c));
    let cell = 2.0 / q as f64;
    for (qi, &flat) in idx[..n_q].iter().enumerate() {
        let r = flat as usize / q;
        let col = flat as usize % q;
        coords[[qi, 0]] = pixel_center(r, q);
        coords[[qi, 1]] = pixel_center(col, q);
        cells[[qi, 0]] = cell;
        cells[[qi, 1]] = cell;
        for ci in 0..c {
            targets[[qi, ci]] = crop.data[[ci, r, col]];
        }
    }
    Ok(TrainingSample {
        lr,
        queries: QuerySet {
            coords,
            cells,
            targets,
        },
        hr_size: q,
    })
}

// ---------------------------------------------------------------------------
// Folder ingestion
// ---------------------------------------------------------------------------

/// Lazily loaded image folder with a deterministic lexicographic order.
#[derive(Debug, Clone)]
pub struct ImageFolder {
    paths: Vec<PathBuf>,
}

impl ImageFolder {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn path(&self, i: usize) -> &Path {
        &self.paths[i]
    }

    pub fn get(&self, i: usize) -> Result<Image> {
        load_png(&self.paths[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Image>> + '_ {
        self.paths.iter().map(|p| load_png(p))
    }
}

fn glob_match(pattern: &str, name: &str) -> bool {
    // single-star glob, enough for "*.png" style patterns
    match pattern.find('*') {
        Some(pos) => {
            let (pre, post) = (&pattern[..pos], &pattern[pos + 1..]);
            name.len() >= pre.len() + post.len() && name.starts_with(pre) && name.ends_with(post)
        }
        None => pattern == name,
    }
}

/// List a directory's matching files in lexicographic order.
pub fn load_image_folder(path: &Path, pattern: &str) -> Result<ImageFolder> {
    let entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(path, e))?;
        let p = entry.path();
        if !p.is_file() {
            continue;
        }
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_default();
        if glob_match(pattern, &name) {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "no files matching {pattern} in {}",
            path.display()
        )));
    }
    Ok(ImageFolder { paths })
}

/// Largest per-element |a - b|; shared by tests and sanity checks.
pub fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
