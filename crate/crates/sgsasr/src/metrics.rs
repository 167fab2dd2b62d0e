//! Quality metrics (PSNR, SSIM) and an analytic FLOPs estimator.
//!
//! FLOP conventions: multiplies and adds count separately (a MAC is 2),
//! convolution and linear costs are `2 * macs` with bias folded in,
//! elementwise operations and activations count 1 per element, index
//! rearrangements (pixel shuffle, padding, crops) are free. Layer norm over
//! `C` channels costs `7C + 2` per spatial position.

use ndarray::Array2;

use crate::data::Image;
use crate::decoder::ModulationVariant;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::saliency::SaliencyBackend;

// ---------------------------------------------------------------------------
// PSNR
// ---------------------------------------------------------------------------

/// Peak signal-to-noise ratio in dB; identical images return `+inf`.
pub fn psnr(a: &Image, b: &Image, max_val: f64) -> Result<f64> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::Input(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            a.data.dim(),
            b.data.dim()
        )));
    }
    let n = a.data.len() as f64;
    let mse = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel_1d() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Valid-region separable Gaussian filter (output `(h-10) x (w-10)`).
fn gaussian_filter_valid(x: &Array2<f64>) -> Array2<f64> {
    let k = gaussian_kernel_1d();
    let (h, w) = x.dim();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    // horizontal pass
    let mut mid = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for ox in 0..ow {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * x[[y, ox + t]];
            }
            mid[[y, ox]] = acc;
        }
    }
    // vertical pass
    let mut out = Array2::<f64>::zeros((oh, ow));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * mid[[oy + t, ox]];
            }
            out[[oy, ox]] = acc;
        }
    }
    out
}

fn ssim_channel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mu_a = gaussian_filter_valid(a);
    let mu_b = gaussian_filter_valid(b);
    let aa = gaussian_filter_valid(&(a * a));
    let bb = gaussian_filter_valid(&(b * b));
    let ab = gaussian_filter_valid(&(a * b));
    let mut total = 0.0;
    let n = mu_a.len() as f64;
    for ((&ma, &mb), ((&saa, &sbb), &sab)) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(aa.iter().zip(bb.iter()).zip(ab.iter()))
    {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        total += s;
    }
    total / n
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1. Multi-channel inputs average per-channel SSIM.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::Input(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            a.data.dim(),
            b.data.dim()
        )));
    }
    let (c, h, w) = a.data.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let mut total = 0.0;
    for ci in 0..c {
        let pa = a.data.index_axis(ndarray::Axis(0), ci).to_owned();
        let pb = b.data.index_axis(ndarray::Axis(0), ci).to_owned();
        total += ssim_channel(&pa, &pb);
    }
    Ok(total / c as f64)
}

// ---------------------------------------------------------------------------
// Metric reports
// ---------------------------------------------------------------------------

/// Per-image metric row.
#[derive(Debug, Clone)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Aggregated metrics over an evaluation set. The aggregate PSNR is the mean
/// of the finite per-image values; infinite entries (identical images) are
/// skipped and counted separately.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub per_image: Vec<ImageMetrics>,
    pub infinite_psnr_count: usize,
}

impl MetricReport {
    pub fn aggregate(per_image: Vec<ImageMetrics>) -> MetricReport {
        let finite: Vec<f64> = per_image
            .iter()
            .map(|m| m.psnr_db)
            .filter(|v| v.is_finite())
            .collect();
        let infinite = per_image.len() - finite.len();
        let psnr_db = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        let ssim = if per_image.is_empty() {
            0.0
        } else {
            per_image.iter().map(|m| m.ssim).sum::<f64>() / per_image.len() as f64
        };
        MetricReport {
            psnr_db,
            ssim,
            per_image,
            infinite_psnr_count: infinite,
        }
    }

    /// Flat text table; `per_image` adds one row per entry.
    pub fn to_table(&self, per_image: bool) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>10} {:>10}\n",
            "image", "psnr_db", "ssim"
        ));
        if per_image {
            for m in &self.per_image {
                out.push_str(&format!(
                    "{:<24} {:>10.4} {:>10.6}\n",
                    m.name, m.psnr_db, m.ssim
                ));
            }
        }
        out.push_str(&format!(
            "{:<24} {:>10.4} {:>10.6}\n",
            "mean", self.psnr_db, self.ssim
        ));
        if self.infinite_psnr_count > 0 {
            out.push_str(&format!(
                "# {} image(s) with infinite psnr skipped in the mean\n",
                self.infinite_psnr_count
            ));
        }
        out
    }

    /// Machine-parseable key=value form.
    pub fn to_kv(&self) -> String {
        format!(
            "psnr_db = {}\nssim = {}\nimages = {}\ninfinite_psnr = {}\n",
            self.psnr_db,
            self.ssim,
            self.per_image.len(),
            self.infinite_psnr_count
        )
    }
}

// ---------------------------------------------------------------------------
// Analytic FLOPs
// ---------------------------------------------------------------------------

/// Which part of the pipeline an item belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopPhase {
    Saliency,
    Encoder,
    DecoderLatent,
    DecoderRender,
}

#[derive(Debug, Clone)]
pub struct FlopItem {
    pub name: String,
    pub phase: FlopPhase,
    pub flops: u64,
}

/// Itemized count; `total` is always the exact sum of `items`.
#[derive(Debug, Clone, Default)]
pub struct FlopsReport {
    pub items: Vec<FlopItem>,
}

impl FlopsReport {
    fn push(&mut self, name: impl Into<String>, phase: FlopPhase, flops: u64) {
        self.items.push(FlopItem {
            name: name.into(),
            phase,
            flops,
        });
    }

    pub fn total(&self) -> u64 {
        self.items.iter().map(|i| i.flops).sum()
    }

    pub fn phase_total(&self, phase: FlopPhase) -> u64 {
        self.items
            .iter()
            .filter(|i| i.phase == phase)
            .map(|i| i.flops)
            .sum()
    }

    /// Everything downstream of the encoder.
    pub fn decoder_total(&self) -> u64 {
        self.phase_total(FlopPhase::DecoderLatent) + self.phase_total(FlopPhase::DecoderRender)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<40} {:>16}\n", "item", "flops"));
        for i in &self.items {
            out.push_str(&format!("{:<40} {:>16}\n", i.name, i.flops));
        }
        out.push_str(&format!("{:<40} {:>16}\n", "total", self.total()));
        out
    }
}

fn conv_flops(h: usize, w: usize, cin: usize, cout: usize, k: usize, groups: usize) -> u64 {
    2 * (h * w * cout * cin * k * k / groups) as u64
}

fn linear_flops(rows: usize, din: usize, dout: usize) -> u64 {
    2 * (rows * din * dout) as u64
}

fn naf_block_flops(rep: &mut FlopsReport, name: &str, c: usize, h: usize, w: usize, cfg: &ModelConfig) {
    let dw = c * cfg.encoder.dw_expansion;
    let ffn = c * cfg.encoder.ffn_expansion * 2;
    let hw = (h * w) as u64;
    let mut f = 0u64;
    // branch 1
    f += hw * (7 * c as u64 + 2); // layer norm
    f += conv_flops(h, w, c, dw, 1, 1);
    f += conv_flops(h, w, dw, dw, 3, dw); // depthwise
    f += hw * (dw as u64 / 2); // gate product
    f += hw * (dw as u64 / 2); // GAP adds
    f += linear_flops(1, dw / 2, dw / 2); // SCA 1x1 on pooled vector
    f += hw * (dw as u64 / 2); // SCA broadcast multiply
    f += conv_flops(h, w, dw / 2, c, 1, 1);
    f += hw * c as u64; // residual add
    // branch 2
    f += hw * (7 * c as u64 + 2);
    f += conv_flops(h, w, c, ffn, 1, 1);
    f += hw * (ffn as u64 / 2); // gate
    f += conv_flops(h, w, ffn / 2, c, 1, 1);
    f += hw * c as u64; // residual add
    rep.push(name, FlopPhase::Encoder, f);
}

fn encoder_flops(rep: &mut FlopsReport, cfg: &ModelConfig, h: usize, w: usize) {
    let enc = &cfg.encoder;
    if cfg.ablation.use_scrrb {
        if let SaliencyBackend::Luminance { .. } = cfg.saliency {
            rep.push(
                "saliency.luminance",
                FlopPhase::Saliency,
                (h * w) as u64 * (cfg.in_channels as u64 + 2),
            );
        }
        let widths = enc.fusion_widths();
        rep.push(
            "scrrb.head",
            FlopPhase::Encoder,
            conv_flops(h, w, 1, widths[0], 3, 1),
        );
        for i in 1..widths.len() {
            let (hh, ww) = (h >> i, w >> i);
            rep.push(
                format!("scrrb.down{}", i - 1),
                FlopPhase::Encoder,
                conv_flops(hh, ww, widths[i - 1], widths[i], 3, 1),
            );
        }
    }
    rep.push(
        "encoder.intro",
        FlopPhase::Encoder,
        conv_flops(h, w, cfg.in_channels, enc.base_width, 3, 1),
    );
    for (i, &n) in enc.enc_blocks.iter().enumerate() {
        let c = enc.width_at(i);
        let (hh, ww) = (h >> i, w >> i);
        for j in 0..n {
            naf_block_flops(rep, &format!("encoder.enc{i}.block{j}"), c, hh, ww, cfg);
        }
        // fusion
        let el = (c * hh * ww) as u64;
        let fuse = match cfg.ablation.fusion {
            crate::encoder::Fusion::Affem => 3 * el,
            crate::encoder::Fusion::Sum => el,
            crate::encoder::Fusion::Concat => conv_flops(hh, ww, 2 * c, c, 1, 1),
        };
        rep.push(format!("encoder.enc{i}.fuse"), FlopPhase::Encoder, fuse);
        rep.push(
            format!("encoder.enc{i}.down"),
            FlopPhase::Encoder,
            conv_flops(hh / 2, ww / 2, c, 2 * c, 2, 1),
        );
    }
    let levels = enc.levels();
    let mid_c = enc.width_at(levels);
    let (mh, mw) = (h >> levels, w >> levels);
    for j in 0..enc.middle_blocks {
        naf_block_flops(rep, &format!("encoder.mid.block{j}"), mid_c, mh, mw, cfg);
    }
    for (i, &n) in enc.dec_blocks.iter().enumerate().rev() {
        let c = enc.width_at(i);
        let (hh, ww) = (h >> (i + 1), w >> (i + 1));
        rep.push(
            format!("encoder.dec{i}.up"),
            FlopPhase::Encoder,
            conv_flops(hh, ww, 2 * c, 4 * c, 1, 1),
        );
        let el = (c * (hh * 2) * (ww * 2)) as u64;
        rep.push(format!("encoder.dec{i}.skip"), FlopPhase::Encoder, el);
        for j in 0..n {
            naf_block_flops(
                rep,
                &format!("encoder.dec{i}.block{j}"),
                c,
                hh * 2,
                ww * 2,
                cfg,
            );
        }
    }
    rep.push(
        "encoder.ending",
        FlopPhase::Encoder,
        conv_flops(h, w, enc.base_width, enc.out_dim, 3, 1),
    );
    rep.push(
        "encoder.shallow_proj",
        FlopPhase::Encoder,
        conv_flops(h, w, enc.base_width, enc.out_dim, 1, 1),
    );
    rep.push(
        "encoder.residual_add",
        FlopPhase::Encoder,
        (enc.out_dim * h * w) as u64,
    );
}

/// Padded spatial dims used for the encoder walk.
fn padded(cfg: &ModelConfig, h: usize, w: usize) -> (usize, usize) {
    let div = cfg.encoder.spatial_divisor();
    (h.div_ceil(div) * div, w.div_ceil(div) * div)
}

/// Analytic operation count for one forward pass at the given input size and
/// scale factor.
pub fn count_flops(cfg: &ModelConfig, lr_hw: (usize, usize), scale: f64) -> FlopsReport {
    let (h, w) = lr_hw;
    let (hp, wp) = padded(cfg, h, w);
    let mut rep = FlopsReport::default();
    encoder_flops(&mut rep, cfg, hp, wp);

    let dec = &cfg.decoder;
    let latents = h * w; // modulations computed once per latent location
    let lat_in = if dec.feature_unfold {
        cfg.encoder.out_dim * 9
    } else {
        cfg.encoder.out_dim
    };
    let mut lat = 0u64;
    lat += linear_flops(latents, lat_in, dec.latent_hidden);
    lat += (latents * dec.latent_hidden) as u64; // relu
    lat += linear_flops(latents, dec.latent_hidden, dec.latent_hidden);
    lat += (latents * dec.latent_hidden) as u64; // relu
    lat += linear_flops(latents, dec.latent_hidden, dec.latent_out());
    rep.push("decoder.latent_mlp", FlopPhase::DecoderLatent, lat);

    let (oh, ow) = crate::decoder::output_size(h, w, scale);
    let pixels = oh * ow;
    let ensemble = if dec.local_ensemble { 4 } else { 1 };
    let rin = dec.d_compressed + 2 + if dec.use_cell { 2 } else { 0 };
    let film_per_elem: u64 = match cfg.ablation.modulation {
        ModulationVariant::Off => 0,
        ModulationVariant::ScaleOnly | ModulationVariant::ShiftOnly => 2,
        ModulationVariant::Both => 3,
    };
    let mut per_pixel = 0u64;
    per_pixel += 2 * (rin * dec.render_width) as u64;
    for _ in 0..dec.mod_layers - 1 {
        per_pixel += (film_per_elem + 1) * dec.render_width as u64; // film + relu
        per_pixel += 2 * (dec.render_width * dec.render_width) as u64;
    }
    per_pixel += (film_per_elem + 1) * dec.render_width as u64;
    per_pixel += 2 * (dec.render_width * cfg.out_channels) as u64;
    rep.push(
        "decoder.render_mlp",
        FlopPhase::DecoderRender,
        per_pixel * (pixels * ensemble) as u64,
    );
    if dec.local_ensemble {
        rep.push(
            "decoder.ensemble_blend",
            FlopPhase::DecoderRender,
            2 * (pixels * 4 * cfg.out_channels) as u64,
        );
    }
    rep
}

/// Per-pixel full-width implicit decoding baseline: the same encoder feeding
/// a 5-layer, 256-wide MLP evaluated once per output pixel on the full
/// latent vector (no modulation stage, no compressed latent).
pub fn count_flops_pointwise_baseline(
    cfg: &ModelConfig,
    lr_hw: (usize, usize),
    scale: f64,
) -> FlopsReport {
    const HIDDEN: usize = 256;
    const LAYERS: usize = 5;
    let (h, w) = lr_hw;
    let (hp, wp) = padded(cfg, h, w);
    let mut rep = FlopsReport::default();
    encoder_flops(&mut rep, cfg, hp, wp);
    let (oh, ow) = crate::decoder::output_size(h, w, scale);
    let pixels = oh * ow;
    let rin = cfg.encoder.out_dim + 4; // latent + rel coord + cell
    let mut per_pixel = 0u64;
    per_pixel += 2 * (rin * HIDDEN) as u64;
    per_pixel += HIDDEN as u64; // relu
    for _ in 0..LAYERS - 2 {
        per_pixel += 2 * (HIDDEN * HIDDEN) as u64;
        per_pixel += HIDDEN as u64;
    }
    per_pixel += 2 * (HIDDEN * cfg.out_channels) as u64;
    rep.push(
        "baseline.render_mlp",
        FlopPhase::DecoderRender,
        per_pixel * pixels as u64,
    );
    rep
}
