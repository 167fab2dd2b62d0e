//! LMASSRM: latent-modulation arbitrary-scale decoding.
//!
//! Stage one (LMGB) maps each latent code to FiLM modulation vectors plus a
//! compressed latent. Stage two (ASRB) renders each output pixel with a
//! small MLP whose activations are scaled/shifted by the modulations of the
//! pixel's nearest latent. Modulations are computed once per latent location
//! and reused for every pixel that maps to it, so the per-pixel cost stays
//! independent of the latent width.
//!
//! Two execution paths share the same arithmetic: a tape path used for
//! training (gradients flow through gathers back into the encoder) and a raw
//! path used for full-image decoding that streams query chunks with bounded
//! memory. A test pins them bit-identical.

use ndarray::{Array1, Array2, Array3};

use crate::autograd::{mm, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamStore};

/// Decoder hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    /// Render MLP feature width.
    pub render_width: usize,
    /// Number of modulated activations `K`; the render MLP has `K+1` linear
    /// layers.
    pub mod_layers: usize,
    /// Latent MLP hidden width (two hidden layers).
    pub latent_hidden: usize,
    /// Compressed latent dimension `D_c`.
    pub d_compressed: usize,
    /// Feed the output cell extent to the render MLP.
    pub use_cell: bool,
    /// Blend the four surrounding latents instead of the nearest one.
    pub local_ensemble: bool,
    /// Concatenate the 3x3 latent neighborhood before the latent MLP.
    pub feature_unfold: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            render_width: 16,
            mod_layers: 6,
            latent_hidden: 128,
            d_compressed: 96,
            use_cell: true,
            local_ensemble: false,
            feature_unfold: false,
        }
    }
}

impl DecoderConfig {
    /// Latent MLP output width: `2 * K * render_width + D_c`.
    pub fn latent_out(&self) -> usize {
        2 * self.mod_layers * self.render_width + self.d_compressed
    }

    pub fn validate(&self) -> Result<()> {
        if self.render_width == 0 || self.mod_layers == 0 || self.d_compressed == 0 {
            return Err(Error::Config("decoder dims must be positive".into()));
        }
        Ok(())
    }
}

/// Which modulation components the render MLP consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModulationVariant {
    /// No FiLM injection: a plain render MLP.
    Off,
    /// Scale only: `(1 + alpha) (.) h`.
    ScaleOnly,
    /// Shift only: `h + beta`.
    ShiftOnly,
    /// Full FiLM: `(1 + alpha) (.) h + beta`.
    Both,
}

impl ModulationVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::Off),
            "scale" => Ok(Self::ScaleOnly),
            "shift" => Ok(Self::ShiftOnly),
            "both" | "scale+shift" => Ok(Self::Both),
            other => Err(Error::Config(format!(
                "unknown modulation '{other}' (expected none|scale|shift|both)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Off => "none",
            Self::ScaleOnly => "scale",
            Self::ShiftOnly => "shift",
            Self::Both => "both",
        }
    }

    pub fn uses_alpha(&self) -> bool {
        matches!(self, Self::ScaleOnly | Self::Both)
    }

    pub fn uses_beta(&self) -> bool {
        matches!(self, Self::ShiftOnly | Self::Both)
    }
}

// ---------------------------------------------------------------------------
// Coordinates
// ---------------------------------------------------------------------------

/// Pixel-center coordinates of an `h x w` grid in row-major order, `[h*w, 2]`
/// as (row coordinate, column coordinate), each axis spanning `[-1, 1]`.
pub fn make_coordinate_grid(h: usize, w: usize) -> Array2<f64> {
    assert!(h >= 1 && w >= 1);
    let mut out = Array2::zeros((h * w, 2));
    for i in 0..h {
        let x = crate::data::pixel_center(i, h);
        for j in 0..w {
            out[[i * w + j, 0]] = x;
            out[[i * w + j, 1]] = crate::data::pixel_center(j, w);
        }
    }
    out
}

fn nearest_index(coord: f64, n: usize) -> usize {
    // centers sit at t = i + 0.5 in grid units; ties resolve to the smaller
    // index via the ceil form
    let t = (coord + 1.0) * n as f64 / 2.0;
    let i = (t - 1.0).ceil() as isize;
    i.clamp(0, n as isize - 1) as usize
}

/// Nearest latent grid cell for a normalized coordinate, with the relative
/// offset rescaled by the grid density so it spans `[-1, 1]` per cell.
pub fn nearest_latent_lookup(
    h_lat: usize,
    w_lat: usize,
    coord: (f64, f64),
) -> (usize, usize, (f64, f64)) {
    let iy = nearest_index(coord.0, h_lat);
    let ix = nearest_index(coord.1, w_lat);
    let rel = (
        (coord.0 - crate::data::pixel_center(iy, h_lat)) * h_lat as f64,
        (coord.1 - crate::data::pixel_center(ix, w_lat)) * w_lat as f64,
    );
    (iy, ix, rel)
}

/// Target output size for a real-valued scale factor.
pub fn output_size(h: usize, w: usize, scale: f64) -> (usize, usize) {
    (
        (h as f64 * scale).round() as usize,
        (w as f64 * scale).round() as usize,
    )
}

// ---------------------------------------------------------------------------
// Decoder layers
// ---------------------------------------------------------------------------

/// The decoder's layer set (latent MLP + render MLP).
#[derive(Debug, Clone)]
pub struct LmDecoder {
    pub cfg: DecoderConfig,
    /// Latent code width as produced by the encoder (`D_FE`).
    pub latent_dim: usize,
    pub out_channels: usize,
    latent_mlp: Vec<Linear>,
    render_mlp: Vec<Linear>,
}

impl LmDecoder {
    pub fn new(cfg: DecoderConfig, latent_dim: usize, out_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let lat_in = if cfg.feature_unfold {
            latent_dim * 9
        } else {
            latent_dim
        };
        let latent_mlp = vec![
            Linear::new("decoder.latent0", lat_in, cfg.latent_hidden),
            Linear::new("decoder.latent1", cfg.latent_hidden, cfg.latent_hidden),
            Linear::new("decoder.latent2", cfg.latent_hidden, cfg.latent_out()),
        ];
        let rin = cfg.d_compressed + 2 + if cfg.use_cell { 2 } else { 0 };
        let mut render_mlp = Vec::with_capacity(cfg.mod_layers + 1);
        render_mlp.push(Linear::new("decoder.render0", rin, cfg.render_width));
        for k in 1..cfg.mod_layers {
            render_mlp.push(Linear::new(
                format!("decoder.render{k}"),
                cfg.render_width,
                cfg.render_width,
            ));
        }
        render_mlp.push(Linear::new(
            format!("decoder.render{}", cfg.mod_layers),
            cfg.render_width,
            out_channels,
        ));
        Ok(LmDecoder {
            cfg,
            latent_dim,
            out_channels,
            latent_mlp,
            render_mlp,
        })
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) {
        for l in &self.latent_mlp {
            l.register(store, seed);
        }
        for l in &self.render_mlp {
            l.register(store, seed);
        }
    }

    pub fn num_params(&self) -> usize {
        self.latent_mlp.iter().map(Linear::num_params).sum::<usize>()
            + self.render_mlp.iter().map(Linear::num_params).sum::<usize>()
    }

    pub fn render_input_dim(&self) -> usize {
        self.cfg.d_compressed + 2 + if self.cfg.use_cell { 2 } else { 0 }
    }
}

// ---------------------------------------------------------------------------
// Tape path
// ---------------------------------------------------------------------------

/// Run the latent MLP on `z: [n, latent_dim]` and split the output into the
/// modulation pairs `[(alpha_1, beta_1) ... (alpha_K, beta_K)]` and the
/// compressed latent.
pub fn lmgb_generate(
    t: &mut Tape,
    p: &Bound,
    dec: &LmDecoder,
    z: Var,
) -> Result<(Vec<(Var, Var)>, Var)> {
    let sh = t.shape(z).to_vec();
    if sh.len() != 2 || sh[1] != dec.latent_mlp[0].in_dim {
        return Err(Error::Input(format!(
            "latent input {:?} does not match latent MLP input {}",
            sh, dec.latent_mlp[0].in_dim
        )));
    }
    let mut h = z;
    let last = dec.latent_mlp.len() - 1;
    for (i, l) in dec.latent_mlp.iter().enumerate() {
        h = l.forward(t, p, h);
        if i < last {
            h = t.relu(h);
        }
    }
    let rw = dec.cfg.render_width;
    let mut pairs = Vec::with_capacity(dec.cfg.mod_layers);
    for k in 0..dec.cfg.mod_layers {
        let alpha = t.narrow(h, 1, 2 * k * rw, rw);
        let beta = t.narrow(h, 1, (2 * k + 1) * rw, rw);
        pairs.push((alpha, beta));
    }
    let zc = t.narrow(h, 1, 2 * dec.cfg.mod_layers * rw, dec.cfg.d_compressed);
    Ok((pairs, zc))
}

/// FiLM the hidden features and apply the next render layer:
/// `h_{k+1} = Linear(ReLU((1 + alpha) (.) h + beta))`.
pub fn modulated_layer(
    t: &mut Tape,
    p: &Bound,
    layer: &Linear,
    h: Var,
    alpha: Var,
    beta: Var,
) -> Var {
    let scaled = {
        let one_plus = t.add_scalar(alpha, 1.0);
        t.mul(one_plus, h)
    };
    let shifted = t.add(scaled, beta);
    let act = t.relu(shifted);
    layer.forward(t, p, act)
}

fn film(t: &mut Tape, h: Var, alpha: Var, beta: Var, variant: ModulationVariant) -> Var {
    let mut cur = h;
    if variant.uses_alpha() {
        let one_plus = t.add_scalar(alpha, 1.0);
        cur = t.mul(one_plus, cur);
    }
    if variant.uses_beta() {
        cur = t.add(cur, beta);
    }
    cur
}

/// Per-query gather map for `[rows, dim]` matrices.
fn row_gather_map(row_of_query: &[usize], dim: usize) -> std::rc::Rc<Vec<i64>> {
    let mut map = Vec::with_capacity(row_of_query.len() * dim);
    for &r in row_of_query {
        let base = (r * dim) as i64;
        for d in 0..dim as i64 {
            map.push(base + d);
        }
    }
    std::rc::Rc::new(map)
}

fn unfold_map(d: usize, h: usize, w: usize) -> std::rc::Rc<Vec<i64>> {
    // rows: positions (row-major), cols: 9 neighbor blocks of d channels
    let mut map = Vec::with_capacity(h * w * 9 * d);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (ny, nx) = (y + dy, x + dx);
                    for ci in 0..d {
                        if ny < 0 || ny >= h as isize || nx < 0 || nx >= w as isize {
                            map.push(-1);
                        } else {
                            map.push((ci * h * w) as i64 + (ny as usize * w + nx as usize) as i64);
                        }
                    }
                }
            }
        }
    }
    std::rc::Rc::new(map)
}

/// Latent rows for the latent MLP: `[h*w, latent_dim]` (or the unfolded
/// 9x neighborhood when enabled).
fn latent_rows(t: &mut Tape, dec: &LmDecoder, f_fe: Var) -> Var {
    let sh = t.shape(f_fe).to_vec();
    let (d, h, w) = (sh[0], sh[1], sh[2]);
    if dec.cfg.feature_unfold {
        let map = unfold_map(d, h, w);
        t.gather(f_fe, map, &[h * w, 9 * d])
    } else {
        let flat = t.reshape(f_fe, &[d, h * w]);
        t.transpose2(flat)
    }
}

/// Render a batch of coordinate queries against latent map `f_fe` on the
/// tape. Returns `[n, out_channels]` predictions.
pub fn render_queries(
    t: &mut Tape,
    p: &Bound,
    dec: &LmDecoder,
    f_fe: Var,
    coords: &Array2<f64>,
    cells: &Array2<f64>,
    variant: ModulationVariant,
) -> Result<Var> {
    let sh = t.shape(f_fe).to_vec();
    if sh.len() != 3 || sh[0] != dec.latent_dim {
        return Err(Error::Input(format!(
            "latent map {:?} does not match decoder latent dim {}",
            sh, dec.latent_dim
        )));
    }
    let (h, w) = (sh[1], sh[2]);
    let n = coords.nrows();
    if n == 0 {
        return Err(Error::Input("empty query set".into()));
    }

    let z = latent_rows(t, dec, f_fe);
    let (pairs, zc) = lmgb_generate(t, p, dec, z)?;

    if !dec.cfg.local_ensemble {
        let mut rows = Vec::with_capacity(n);
        let mut rel = Array2::zeros((n, 2));
        for qi in 0..n {
            let (iy, ix, r) = nearest_latent_lookup(h, w, (coords[[qi, 0]], coords[[qi, 1]]));
            rows.push(iy * w + ix);
            rel[[qi, 0]] = r.0;
            rel[[qi, 1]] = r.1;
        }
        render_group(t, p, dec, &pairs, zc, &rows, &rel, cells, variant)
    } else {
        // four corner latents, blended by opposite-corner areas
        let corners = ensemble_corners(h, w, coords);
        let mut blended: Option<Var> = None;
        for corner in &corners {
            let pred = render_group(
                t, p, dec, &pairs, zc, &corner.rows, &corner.rel, cells, variant,
            )?;
            let wts = Array2::from_shape_fn((n, dec.out_channels), |(qi, _)| corner.weight[qi]);
            let wts = t.constant(wts.into_dyn());
            let weighted = t.mul(pred, wts);
            blended = Some(match blended {
                Some(acc) => t.add(acc, weighted),
                None => weighted,
            });
        }
        Ok(blended.unwrap())
    }
}

#[allow(clippy::too_many_arguments)]
fn render_group(
    t: &mut Tape,
    p: &Bound,
    dec: &LmDecoder,
    pairs: &[(Var, Var)],
    zc: Var,
    rows: &[usize],
    rel: &Array2<f64>,
    cells: &Array2<f64>,
    variant: ModulationVariant,
) -> Result<Var> {
    let n = rows.len();
    let rw = dec.cfg.render_width;
    let zc_rows = {
        let map = row_gather_map(rows, dec.cfg.d_compressed);
        t.gather(zc, map, &[n, dec.cfg.d_compressed])
    };
    let rel_v = t.constant(rel.clone().into_dyn());
    let mut parts = vec![zc_rows, rel_v];
    if dec.cfg.use_cell {
        let cell_v = t.constant(cells.clone().into_dyn());
        parts.push(cell_v);
    }
    let x0 = t.concat(&parts, 1);
    let mut hid = dec.render_mlp[0].forward(t, p, x0);
    for k in 0..dec.cfg.mod_layers {
        let (alpha, beta) = pairs[k];
        let (a_rows, b_rows) = (
            {
                let map = row_gather_map(rows, rw);
                t.gather(alpha, map, &[n, rw])
            },
            {
                let map = row_gather_map(rows, rw);
                t.gather(beta, map, &[n, rw])
            },
        );
        let modded = film(t, hid, a_rows, b_rows, variant);
        let act = t.relu(modded);
        hid = dec.render_mlp[k + 1].forward(t, p, act);
    }
    Ok(hid)
}

struct Corner {
    rows: Vec<usize>,
    rel: Array2<f64>,
    weight: Vec<f64>,
}

fn ensemble_corners(h: usize, w: usize, coords: &Array2<f64>) -> Vec<Corner> {
    let n = coords.nrows();
    let mut corners: Vec<Corner> = (0..4)
        .map(|_| Corner {
            rows: Vec::with_capacity(n),
            rel: Array2::zeros((n, 2)),
            weight: vec![0.0; n],
        })
        .collect();
    for qi in 0..n {
        let (x, y) = (coords[[qi, 0]], coords[[qi, 1]]);
        let ty = (x + 1.0) * h as f64 / 2.0 - 0.5;
        let tx = (y + 1.0) * w as f64 / 2.0 - 0.5;
        let i0 = (ty.floor() as isize).clamp(0, h as isize - 1) as usize;
        let j0 = (tx.floor() as isize).clamp(0, w as isize - 1) as usize;
        let i1 = (i0 + 1).min(h - 1);
        let j1 = (j0 + 1).min(w - 1);
        let cands = [(i0, j0), (i0, j1), (i1, j0), (i1, j1)];
        let opposite = [(i1, j1), (i1, j0), (i0, j1), (i0, j0)];
        let mut weights = [0.0f64; 4];
        let mut total = 0.0;
        for (ci, (oi, oj)) in opposite.iter().enumerate() {
            let wy = (x - crate::data::pixel_center(*oi, h)).abs();
            let wx = (y - crate::data::pixel_center(*oj, w)).abs();
            weights[ci] = wy * wx;
            total += weights[ci];
        }
        if total == 0.0 {
            weights = [0.25; 4];
            total = 1.0;
        }
        for (ci, (iy, ix)) in cands.iter().enumerate() {
            corners[ci].rows.push(iy * w + ix);
            corners[ci].rel[[qi, 0]] = (x - crate::data::pixel_center(*iy, h)) * h as f64;
            corners[ci].rel[[qi, 1]] = (y - crate::data::pixel_center(*ix, w)) * w as f64;
            corners[ci].weight[qi] = weights[ci] / total;
        }
    }
    corners
}

// ---------------------------------------------------------------------------
// Raw path (full-image decode)
// ---------------------------------------------------------------------------

/// Instrumentation counters for one decode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeStats {
    /// Rows pushed through the latent MLP.
    pub lmgb_evals: usize,
    /// Rows pushed through the render MLP.
    pub render_evals: usize,
}

/// Options for [`decode_image`].
#[derive(Debug, Clone, Copy)]
pub struct DecodeOptions {
    /// Compute modulations once per latent location (the default). Disabling
    /// re-evaluates the latent MLP per query; outputs are identical.
    pub cache_modulations: bool,
    pub modulation: ModulationVariant,
    /// Query rows per chunk (memory bound).
    pub chunk: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            cache_modulations: true,
            modulation: ModulationVariant::Both,
            chunk: 16384,
        }
    }
}

struct RawLinear {
    w: Array2<f64>,
    b: Array1<f64>,
}

fn fetch_linear(store: &ParamStore, l: &Linear) -> RawLinear {
    let w = store
        .get(&format!("{}.weight", l.name))
        .unwrap_or_else(|| panic!("missing {}", l.name))
        .value
        .clone()
        .into_shape_with_order((l.in_dim, l.out_dim))
        .unwrap();
    let b = store
        .get(&format!("{}.bias", l.name))
        .unwrap()
        .value
        .clone()
        .into_shape_with_order(l.out_dim)
        .unwrap();
    RawLinear { w, b }
}

fn raw_linear(x: &Array2<f64>, l: &RawLinear) -> Array2<f64> {
    let mut y = mm(x, &l.w);
    let (n, d) = y.dim();
    let ys = y.as_slice_mut().unwrap();
    let bs = l.b.as_slice().unwrap();
    for i in 0..n {
        for j in 0..d {
            ys[i * d + j] += bs[j];
        }
    }
    y
}

fn raw_relu(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

fn raw_film(
    h: &Array2<f64>,
    alpha: &Array2<f64>,
    beta: &Array2<f64>,
    variant: ModulationVariant,
) -> Array2<f64> {
    let mut cur = h.clone();
    if variant.uses_alpha() {
        let (n, d) = cur.dim();
        let cs = cur.as_slice_mut().unwrap();
        let al = alpha.as_slice().unwrap();
        for i in 0..n * d {
            cs[i] = (1.0 + al[i]) * cs[i];
        }
    }
    if variant.uses_beta() {
        cur += beta;
    }
    cur
}

fn gather_rows(src: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let d = src.ncols();
    let mut out = Array2::zeros((rows.len(), d));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&src.row(r));
    }
    out
}

/// Tape-free decoder evaluator over a fixed parameter snapshot.
pub struct RawDecoder<'a> {
    dec: &'a LmDecoder,
    latent: Vec<RawLinear>,
    render: Vec<RawLinear>,
}

impl<'a> RawDecoder<'a> {
    pub fn new(dec: &'a LmDecoder, store: &ParamStore) -> Self {
        RawDecoder {
            dec,
            latent: dec.latent_mlp.iter().map(|l| fetch_linear(store, l)).collect(),
            render: dec.render_mlp.iter().map(|l| fetch_linear(store, l)).collect(),
        }
    }

    fn latent_input_rows(&self, f_fe: &Array3<f64>) -> Array2<f64> {
        let (d, h, w) = f_fe.dim();
        if self.dec.cfg.feature_unfold {
            let map = unfold_map(d, h, w);
            let src = f_fe.as_slice().expect("f_fe contiguous");
            let mut out = Array2::zeros((h * w, 9 * d));
            let os = out.as_slice_mut().unwrap();
            for (o, &ix) in os.iter_mut().zip(map.iter()) {
                if ix >= 0 {
                    *o = src[ix as usize];
                }
            }
            out
        } else {
            let mut out = Array2::zeros((h * w, d));
            for ci in 0..d {
                for p in 0..h * w {
                    out[[p, ci]] = f_fe.as_slice().unwrap()[ci * h * w + p];
                }
            }
            out
        }
    }

    fn run_latent_mlp(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut h = z.clone();
        let last = self.latent.len() - 1;
        for (i, l) in self.latent.iter().enumerate() {
            h = raw_linear(&h, l);
            if i < last {
                raw_relu(&mut h);
            }
        }
        h
    }

    fn split_lmgb(&self, out: &Array2<f64>) -> (Vec<(Array2<f64>, Array2<f64>)>, Array2<f64>) {
        let rw = self.dec.cfg.render_width;
        let k = self.dec.cfg.mod_layers;
        let mut pairs = Vec::with_capacity(k);
        for ki in 0..k {
            let a = out.slice(ndarray::s![.., 2 * ki * rw..(2 * ki + 1) * rw]).to_owned();
            let b = out
                .slice(ndarray::s![.., (2 * ki + 1) * rw..(2 * ki + 2) * rw])
                .to_owned();
            pairs.push((
                a.as_standard_layout().into_owned(),
                b.as_standard_layout().into_owned(),
            ));
        }
        let zc = out
            .slice(ndarray::s![.., 2 * k * rw..2 * k * rw + self.dec.cfg.d_compressed])
            .to_owned()
            .as_standard_layout()
            .into_owned();
        (pairs, zc)
    }

    fn render_rows(
        &self,
        zc: &Array2<f64>,
        pairs: &[(Array2<f64>, Array2<f64>)],
        rel: &Array2<f64>,
        cells: &Array2<f64>,
        variant: ModulationVariant,
    ) -> Array2<f64> {
        let n = rel.nrows();
        let rin = self.dec.render_input_dim();
        let mut x0 = Array2::zeros((n, rin));
        x0.slice_mut(ndarray::s![.., 0..self.dec.cfg.d_compressed])
            .assign(zc);
        x0.slice_mut(ndarray::s![
            ..,
            self.dec.cfg.d_compressed..self.dec.cfg.d_compressed + 2
        ])
        .assign(rel);
        if self.dec.cfg.use_cell {
            x0.slice_mut(ndarray::s![.., self.dec.cfg.d_compressed + 2..])
                .assign(cells);
        }
        let mut hid = raw_linear(&x0, &self.render[0]);
        for k in 0..self.dec.cfg.mod_layers {
            let mut modded = raw_film(&hid, &pairs[k].0, &pairs[k].1, variant);
            raw_relu(&mut modded);
            hid = raw_linear(&modded, &self.render[k + 1]);
        }
        hid
    }

    /// Render one query independently (per-pixel recomputation oracle).
    pub fn render_single(
        &self,
        f_fe: &Array3<f64>,
        coord: (f64, f64),
        cell: (f64, f64),
        variant: ModulationVariant,
    ) -> Vec<f64> {
        let (_, h, w) = f_fe.dim();
        let z_all = self.latent_input_rows(f_fe);
        let (iy, ix, rel) = nearest_latent_lookup(h, w, coord);
        let row = iy * w + ix;
        let z = gather_rows(&z_all, &[row]);
        let out = self.run_latent_mlp(&z);
        let (pairs, zc) = self.split_lmgb(&out);
        let rel_m = Array2::from_shape_vec((1, 2), vec![rel.0, rel.1]).unwrap();
        let cell_m = Array2::from_shape_vec((1, 2), vec![cell.0, cell.1]).unwrap();
        let pred = self.render_rows(&zc, &pairs, &rel_m, &cell_m, variant);
        pred.row(0).to_vec()
    }
}

/// Decode the full `h_out x w_out` image from latent map `f_fe`.
///
/// Modulations are generated once per latent location and cached; render
/// queries stream through in chunks. Output values are raw network outputs —
/// clamping to `[0, 1]` happens at image export.
pub fn decode_image(
    dec: &LmDecoder,
    store: &ParamStore,
    f_fe: &Array3<f64>,
    h_out: usize,
    w_out: usize,
    opts: &DecodeOptions,
) -> Result<(Array3<f64>, DecodeStats)> {
    if h_out == 0 || w_out == 0 {
        return Err(Error::Input("output dims must be >= 1".into()));
    }
    let (d, h, w) = f_fe.dim();
    if d != dec.latent_dim {
        return Err(Error::Input(format!(
            "latent map width {d} does not match decoder latent dim {}",
            dec.latent_dim
        )));
    }
    let raw = RawDecoder::new(dec, store);
    let mut stats = DecodeStats::default();

    let z_all = raw.latent_input_rows(f_fe);
    let cached = if opts.cache_modulations {
        let out = raw.run_latent_mlp(&z_all);
        stats.lmgb_evals += out.nrows();
        Some(raw.split_lmgb(&out))
    } else {
        None
    };

    let cell = (2.0 / h_out as f64, 2.0 / w_out as f64);
    let n_total = h_out * w_out;
    let mut out = Array3::zeros((dec.out_channels, h_out, w_out));
    let chunk = opts.chunk.max(1);

    let mut start = 0;
    while start < n_total {
        let end = (start + chunk).min(n_total);
        let n = end - start;
        let mut coords = Array2::zeros((n, 2));
        for (qi, flat) in (start..end).enumerate() {
            coords[[qi, 0]] = crate::data::pixel_center(flat / w_out, h_out);
            coords[[qi, 1]] = crate::data::pixel_center(flat % w_out, w_out);
        }
        let cells = Array2::from_shape_fn((n, 2), |(_, j)| if j == 0 { cell.0 } else { cell.1 });

        let pred: Array2<f64> = if !dec.cfg.local_ensemble {
            let mut rows = Vec::with_capacity(n);
            let mut rel = Array2::zeros((n, 2));
            for qi in 0..n {
                let (iy, ix, r) =
                    nearest_latent_lookup(h, w, (coords[[qi, 0]], coords[[qi, 1]]));
                rows.push(iy * w + ix);
                rel[[qi, 0]] = r.0;
                rel[[qi, 1]] = r.1;
            }
            let (pairs, zc) = gather_group(&raw, &z_all, &cached, &rows, &mut stats);
            stats.render_evals += n;
            raw.render_rows(&zc, &pairs, &rel, &cells, opts.modulation)
        } else {
            let corners = ensemble_corners(h, w, &coords);
            let mut acc: Option<Array2<f64>> = None;
            for corner in &corners {
                let (pairs, zc) =
                    gather_group(&raw, &z_all, &cached, &corner.rows, &mut stats);
                stats.render_evals += n;
                let mut pred = raw.render_rows(&zc, &pairs, &corner.rel, &cells, opts.modulation);
                for (qi, mut row) in pred.rows_mut().into_iter().enumerate() {
                    row.mapv_inplace(|v| v * corner.weight[qi]);
                }
                acc = Some(match acc {
                    Some(mut a) => {
                        a += &pred;
                        a
                    }
                    None => pred,
                });
            }
            acc.unwrap()
        };

        for (qi, flat) in (start..end).enumerate() {
            let (y, x) = (flat / w_out, flat % w_out);
            for c in 0..dec.out_channels {
                out[[c, y, x]] = pred[[qi, c]];
            }
        }
        start = end;
    }
    Ok((out, stats))
}

type ModPairs = Vec<(Array2<f64>, Array2<f64>)>;

fn gather_group(
    raw: &RawDecoder,
    z_all: &Array2<f64>,
    cached: &Option<(ModPairs, Array2<f64>)>,
    rows: &[usize],
    stats: &mut DecodeStats,
) -> (ModPairs, Array2<f64>) {
    match cached {
        Some((pairs, zc)) => (
            pairs
                .iter()
                .map(|(a, b)| (gather_rows(a, rows), gather_rows(b, rows)))
                .collect(),
            gather_rows(zc, rows),
        ),
        None => {
            let z = gather_rows(z_all, rows);
            let out = raw.run_latent_mlp(&z);
            stats.lmgb_evals += out.nrows();
            raw.split_lmgb(&out)
        }
    }
}
