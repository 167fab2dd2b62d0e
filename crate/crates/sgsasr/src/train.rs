//! The training loop: deterministic sample streams, per-epoch validation,
//! machine-parseable logging, periodic checkpoints, and exact resumption.
//!
//! Every random draw is keyed by `(seed, epoch, step, slot)` through named
//! RNG streams, so two runs with the same seed see identical data in
//! identical order — including runs resumed from a checkpoint and ablation
//! variants that must share their sample stream.

use std::io::Write;
use std::path::Path;

use crate::checkpoint::save_checkpoint;
use crate::config::TrainKv;
use crate::data::{bicubic_resize, make_training_sample, Image, TrainingSample};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::model::{train_step, Model, ModelConfig, TrainState};
use crate::nn::named_rng;

use rand::seq::SliceRandom;
use rand::Rng;

/// Anything that can hand out training images by index.
pub trait ImageSource {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> Result<Image>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ImageSource for Vec<Image> {
    fn len(&self) -> usize {
        Vec::len(self)
    }
    fn get(&self, i: usize) -> Result<Image> {
        Ok(self[i].clone())
    }
}

impl ImageSource for crate::data::ImageFolder {
    fn len(&self) -> usize {
        crate::data::ImageFolder::len(self)
    }
    fn get(&self, i: usize) -> Result<Image> {
        crate::data::ImageFolder::get(self, i)
    }
}

/// Sample indices drawn in epoch `epoch`: shuffled passes over the index
/// list, truncated or repeated to `epoch_length`.
pub fn epoch_indices(seed: u64, epoch: usize, n: usize, epoch_length: usize) -> Vec<usize> {
    assert!(n > 0);
    let mut out = Vec::with_capacity(epoch_length);
    let mut round = 0usize;
    while out.len() < epoch_length {
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = named_rng(seed, &format!("perm.e{epoch}.r{round}"));
        perm.shuffle(&mut rng);
        for idx in perm {
            if out.len() == epoch_length {
                break;
            }
            out.push(idx);
        }
        round += 1;
    }
    out
}

/// FNV-1a hash of the full sample-index stream a run will consume. Ablation
/// sweeps log this to prove every variant saw identical data order.
pub fn sample_stream_hash(seed: u64, epochs: usize, n: usize, epoch_length: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for epoch in 0..epochs {
        for idx in epoch_indices(seed, epoch, n, epoch_length) {
            for byte in (idx as u64).to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        }
    }
    h
}

/// Degradation protocol shared by training-time validation and `eval`: crop
/// the HR image so the LR/SR sizes are exact for the scale, then
/// bicubic-downscale.
pub fn degrade_for_scale(hr: &Image, scale: f64) -> Result<(Image, Image)> {
    if scale < 1.0 {
        return Err(Error::Input(format!("scale must be >= 1, got {scale}")));
    }
    let (h, w) = (hr.height(), hr.width());
    let lr_h = ((h as f64 / scale).floor() as usize).max(1);
    let lr_w = ((w as f64 / scale).floor() as usize).max(1);
    let (gt_h, gt_w) = crate::decoder::output_size(lr_h, lr_w, scale);
    if gt_h > h || gt_w > w {
        return Err(Error::Input(format!(
            "image {h}x{w} too small for scale {scale}"
        )));
    }
    let gt = Image::new(
        hr.data
            .slice(ndarray::s![.., 0..gt_h, 0..gt_w])
            .to_owned()
            .as_standard_layout()
            .into_owned(),
    );
    let lr = bicubic_resize(&gt, lr_h, lr_w);
    Ok((lr, gt))
}

/// Mean PSNR of the model against a validation set at one scale.
pub fn validate_psnr(
    model: &Model,
    state: &TrainState,
    val: &dyn ImageSource,
    scale: f64,
    max_images: usize,
) -> Result<f64> {
    let n = val.len().min(max_images.max(1));
    if n == 0 {
        return Err(Error::Data("empty validation set".into()));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        let hr = val.get(i)?;
        let (lr, gt) = degrade_for_scale(&hr, scale)?;
        let (sr, _) = model.forward_sized(&state.store, &lr, gt.height(), gt.width())?;
        let p = psnr(&sr.clamped(), &gt, 1.0)?;
        if p.is_finite() {
            acc += p;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(f64::INFINITY);
    }
    Ok(acc / count as f64)
}

/// One validation record; also a line in `train.log`.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_psnr: f64,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} step={} lr={} loss={} val_psnr={}",
            self.epoch, self.step, self.lr, self.train_loss, self.val_psnr
        )
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub logs: Vec<EpochLog>,
    pub losses: Vec<f64>,
    pub stream_hash: u64,
}

fn build_batch(
    train: &dyn ImageSource,
    indices: &[usize],
    kv: &TrainKv,
    seed: u64,
    epoch: usize,
    step_in_epoch: usize,
) -> Result<Vec<TrainingSample>> {
    let mut batch = Vec::with_capacity(indices.len());
    for (slot, &idx) in indices.iter().enumerate() {
        let hr = train.get(idx)?;
        let mut rng = named_rng(seed, &format!("crop.e{epoch}.s{step_in_epoch}.k{slot}"));
        // consume one draw so the stream differs from other purposes keyed
        // on the same tuple
        let _: u64 = rng.random();
        batch.push(make_training_sample(
            &hr,
            (kv.scale_min, kv.scale_max),
            kv.patch,
            &mut rng,
        )?);
    }
    Ok(batch)
}

/// Run (or continue) training until `kv.epochs`. Writes `train.log` and
/// periodic `ckpt_epochN` bundles plus a final `ckpt_final` into `out_dir`
/// when given. On a non-finite loss the error propagates with the last
/// periodic checkpoint left on disk.
pub fn run_training(
    model: &Model,
    model_cfg: &ModelConfig,
    state: &mut TrainState,
    train: &dyn ImageSource,
    val: &dyn ImageSource,
    kv: &TrainKv,
    out_dir: Option<&Path>,
) -> Result<TrainSummary> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    state.base_lr = kv.base_lr;
    state.milestones = kv.milestones.clone();
    state.lr_factor = kv.lr_factor;
    let epoch_length = if kv.epoch_length == 0 {
        train.len()
    } else {
        kv.epoch_length
    };

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train.log");
            Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?,
            )
        }
        None => None,
    };

    let mut logs = Vec::new();
    let mut losses = Vec::new();
    let start_epoch = state.epoch;
    for epoch in start_epoch..kv.epochs {
        let indices = epoch_indices(state.seed, epoch, train.len(), epoch_length);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (step_in_epoch, chunk) in indices.chunks(kv.batch.max(1)).enumerate() {
            let batch = build_batch(train, chunk, kv, state.seed, epoch, step_in_epoch)?;
            let loss = train_step(model, state, &batch)?;
            epoch_loss += loss;
            losses.push(loss);
            steps += 1;
        }
        state.epoch = epoch + 1;
        let train_loss = epoch_loss / steps.max(1) as f64;

        let is_last = epoch + 1 == kv.epochs;
        if (epoch + 1) % kv.val_interval.max(1) == 0 || is_last {
            let val_psnr = if val.is_empty() {
                f64::NAN
            } else {
                validate_psnr(model, state, val, kv.val_scale, kv.val_max_images)?
            };
            let entry = EpochLog {
                epoch: epoch + 1,
                step: state.step,
                lr: state.current_lr(),
                train_loss,
                val_psnr,
            };
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", entry.to_line())
                    .map_err(|e| Error::io(out_dir.unwrap().join("train.log"), e))?;
            }
            logs.push(entry);
        }
        if let Some(dir) = out_dir {
            if (epoch + 1) % kv.checkpoint_interval.max(1) == 0 {
                save_checkpoint(&dir.join(format!("ckpt_epoch{}", epoch + 1)), model_cfg, state)?;
            }
            if is_last {
                save_checkpoint(&dir.join("ckpt_final"), model_cfg, state)?;
            }
        }
    }
    Ok(TrainSummary {
        logs,
        losses,
        stream_hash: sample_stream_hash(state.seed, kv.epochs, train.len(), epoch_length),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::train_config_from_kv;
    use crate::config::KvConfig;
    use crate::data::{synth_spacecraft_image, SynthSpec};
    use crate::decoder::DecoderConfig;
    use crate::encoder::EncoderConfig;
    use crate::model::build_model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                base_width: 4,
                enc_blocks: vec![1],
                middle_blocks: 1,
                dec_blocks: vec![1],
                out_dim: 8,
                ffn_expansion: 2,
                dw_expansion: 2,
            },
            decoder: DecoderConfig {
                render_width: 4,
                mod_layers: 2,
                latent_hidden: 8,
                d_compressed: 6,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn tiny_train_kv(epochs: usize) -> TrainKv {
        let kv = KvConfig::parse(&format!(
            "train.epochs = {epochs}\ntrain.batch = 2\ntrain.patch = 8\n\
             train.scale_min = 2\ntrain.scale_max = 2\ntrain.epoch_length = 4\n\
             train.base_lr = 1e-3\ntrain.milestones = 1000\ntrain.val_scale = 2\n\
             train.val_interval = 1\ntrain.checkpoint_interval = 2\ntrain.val_max_images = 2\n"
        ))
        .unwrap();
        train_config_from_kv(&kv).unwrap()
    }

    fn images(n: usize, size: usize, seed: u64) -> Vec<Image> {
        (0..n)
            .map(|i| {
                synth_spacecraft_image(
                    &SynthSpec {
                        size,
                        ..Default::default()
                    },
                    &mut ChaCha20Rng::seed_from_u64(seed + i as u64),
                )
            })
            .collect()
    }

    #[test]
    fn epoch_indices_cover_and_repeat() {
        let idx = epoch_indices(1, 0, 4, 4);
        let mut sorted = idx.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        let long = epoch_indices(1, 0, 3, 8);
        assert_eq!(long.len(), 8);
        assert!(long.iter().all(|&i| i < 3));
        // deterministic
        assert_eq!(epoch_indices(1, 2, 5, 5), epoch_indices(1, 2, 5, 5));
        assert_ne!(epoch_indices(1, 2, 5, 5), epoch_indices(1, 3, 5, 5));
    }

    #[test]
    fn stream_hash_depends_on_seed_only_through_indices() {
        assert_eq!(sample_stream_hash(7, 3, 5, 5), sample_stream_hash(7, 3, 5, 5));
        assert_ne!(sample_stream_hash(7, 3, 5, 5), sample_stream_hash(8, 3, 5, 5));
    }

    #[test]
    fn degrade_protocol_sizes() {
        let hr = Image::zeros(1, 64, 64);
        let (lr, gt) = degrade_for_scale(&hr, 2.0).unwrap();
        assert_eq!(lr.data.dim(), (1, 32, 32));
        assert_eq!(gt.data.dim(), (1, 64, 64));
        let (lr, gt) = degrade_for_scale(&hr, 3.6).unwrap();
        assert_eq!(lr.data.dim(), (1, 17, 17)); // floor(64/3.6)
        assert_eq!(gt.data.dim(), (1, 61, 61)); // round(17*3.6)
    }

    #[test]
    fn training_runs_and_logs() {
        let cfg = tiny_cfg();
        let (model, store) = build_model(&cfg, 3).unwrap();
        let mut state = TrainState::new(store, 3);
        let train = images(4, 32, 10);
        let val = images(2, 32, 99);
        let kv = tiny_train_kv(2);
        let dir = std::env::temp_dir().join(format!("sgsasr_train_{}", std::process::id()));
        std::fs::remove_dir_all(&dir).ok();
        let summary =
            run_training(&model, &cfg, &mut state, &train, &val, &kv, Some(&dir)).unwrap();
        assert_eq!(summary.logs.len(), 2); // one validation per epoch
        let log_text = std::fs::read_to_string(dir.join("train.log")).unwrap();
        assert_eq!(log_text.lines().count(), 2);
        assert!(log_text.contains("val_psnr="));
        assert!(dir.join("ckpt_final").is_dir());
        assert!(dir.join("ckpt_epoch2").is_dir());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn fixed_seed_runs_are_identical_and_resume_matches() {
        let cfg = tiny_cfg();
        let train = images(4, 32, 20);
        let val: Vec<Image> = Vec::new();
        let kv = tiny_train_kv(4);

        // run A: straight through
        let (model, store) = build_model(&cfg, 5).unwrap();
        let mut state_a = TrainState::new(store, 5);
        let a = run_training(&model, &cfg, &mut state_a, &train, &val, &kv, None).unwrap();

        // run B: identical seed, fresh state
        let (model_b, store_b) = build_model(&cfg, 5).unwrap();
        let mut state_b = TrainState::new(store_b, 5);
        let b = run_training(&model_b, &cfg, &mut state_b, &train, &val, &kv, None).unwrap();
        assert_eq!(a.losses.len(), b.losses.len());
        for (x, y) in a.losses.iter().zip(b.losses.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }

        // run C: stop after 2 epochs, checkpoint, reload, continue
        let dir = std::env::temp_dir().join(format!("sgsasr_resume_{}", std::process::id()));
        std::fs::remove_dir_all(&dir).ok();
        let (model_c, store_c) = build_model(&cfg, 5).unwrap();
        let mut state_c = TrainState::new(store_c, 5);
        let kv_half = tiny_train_kv(2);
        let c1 = run_training(
            &model_c,
            &cfg,
            &mut state_c,
            &train,
            &val,
            &kv_half,
            Some(&dir),
        )
        .unwrap();
        let mut resumed =
            crate::checkpoint::load_checkpoint_matching(&dir.join("ckpt_final"), &cfg).unwrap();
        assert_eq!(resumed.epoch, 2);
        let c2 = run_training(&model_c, &cfg, &mut resumed, &train, &val, &kv, None).unwrap();
        let stitched: Vec<f64> = c1.losses.iter().chain(c2.losses.iter()).copied().collect();
        assert_eq!(stitched.len(), a.losses.len());
        for (x, y) in stitched.iter().zip(a.losses.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "resumed trajectory diverged");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn nan_loss_leaves_last_checkpoint_behind() {
        let cfg = tiny_cfg();
        let (model, mut store) = build_model(&cfg, 9).unwrap();
        // poison a parameter so the very first loss is non-finite
        store
            .get_mut("decoder.render2.bias")
            .unwrap()
            .value
            .fill(f64::INFINITY);
        let mut state = TrainState::new(store, 9);
        let train = images(2, 32, 30);
        let val: Vec<Image> = Vec::new();
        let kv = tiny_train_kv(1);
        let dir = std::env::temp_dir().join(format!("sgsasr_nan_{}", std::process::id()));
        std::fs::remove_dir_all(&dir).ok();
        let err = run_training(&model, &cfg, &mut state, &train, &val, &kv, Some(&dir));
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert!(!dir.join("ckpt_final").exists());
        std::fs::remove_dir_all(&dir).ok();
    }
}
