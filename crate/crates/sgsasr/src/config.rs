//! Layered key=value configuration.
//!
//! Flat, sectioned keys (`encoder.base_width = 32`) in a human-diffable text
//! format. Resolution order: built-in defaults < named profile < config file
//! < command-line overrides. The fully resolved set is persisted verbatim
//! into every run directory so a run can be reproduced from its own output.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::decoder::{DecoderConfig, ModulationVariant};
use crate::encoder::{EncoderConfig, Fusion};
use crate::error::{Error, Result};
use crate::model::{AblationConfig, ModelConfig};
use crate::saliency::SaliencyBackend;

/// Flat key=value map with typed accessors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvConfig {
    map: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse `key = value` lines. `#` starts a comment; `[section]` headers
    /// prefix the keys that follow them.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(Error::Config(format!(
                    "config line {}: expected key = value, got '{raw}'",
                    ln + 1
                )));
            };
            let key = line[..eq].trim();
            let value = line[eq + 1..].trim();
            if key.is_empty() {
                return Err(Error::Config(format!("config line {}: empty key", ln + 1)));
            }
            // dotted keys are already fully qualified; bare keys pick up the
            // active section prefix
            let full = if section.is_empty() || key.contains('.') {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            map.insert(full, value.to_string());
        }
        Ok(KvConfig { map })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    /// Overlay `other`'s entries on top of this one.
    pub fn merge_over(&mut self, other: &KvConfig) {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), v.clone());
        }
    }

    /// Apply one `key=value` override string.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let Some(eq) = spec.find('=') else {
            return Err(Error::Config(format!(
                "override '{spec}' must have the form key=value"
            )));
        };
        let key = spec[..eq].trim();
        let value = spec[eq + 1..].trim();
        if key.is_empty() {
            return Err(Error::Config(format!("override '{spec}': empty key")));
        }
        self.set(key, value);
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.map.iter()
    }

    fn parse_with<T>(&self, key: &str, default: T, parse: impl Fn(&str) -> Option<T>) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => parse(raw).ok_or_else(|| {
                Error::Config(format!("config key {key}: cannot parse '{raw}'"))
            }),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        self.parse_with(key, default, |s| s.parse().ok())
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        self.parse_with(key, default, |s| s.parse().ok())
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        self.parse_with(key, default, |s| s.parse().ok())
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        self.parse_with(key, default, |s| match s {
            "true" | "1" | "yes" | "on" => Some(true),
            "false" | "0" | "no" | "off" => Some(false),
            _ => None,
        })
    }

    pub fn get_usize_list(&self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        self.parse_with(key, default.to_vec(), |s| {
            s.split(',')
                .map(|p| p.trim().parse::<usize>().ok())
                .collect::<Option<Vec<_>>>()
        })
    }
}

/// Built-in profile text, selectable by name.
pub fn builtin_profile(name: &str) -> Option<&'static str> {
    match name {
        "default" => Some(""),
        // Small models and short schedules sized so a full ablation sweep
        // finishes on a single desk machine.
        "ablate-desk" => Some(
            "encoder.base_width = 8\n\
             encoder.enc_blocks = 1,1\n\
             encoder.middle_blocks = 1\n\
             encoder.dec_blocks = 1,1\n\
             encoder.out_dim = 32\n\
             decoder.render_width = 8\n\
             decoder.k = 6\n\
             decoder.latent_hidden = 32\n\
             decoder.d_compressed = 24\n\
             train.epochs = 30\n\
             train.batch = 2\n\
             train.patch = 16\n\
             train.scale_min = 2\n\
             train.scale_max = 2\n\
             train.epoch_length = 8\n\
             train.base_lr = 2e-3\n\
             train.milestones = 15,22,27\n\
             train.val_scale = 2\n\
             train.val_interval = 30\n\
             train.checkpoint_interval = 30\n",
        ),
        // Single-sample-set overfit run used by the sanity gate: width-16
        // encoder, 64-wide latents, 500 total steps.
        "overfit-desk" => Some(
            "encoder.base_width = 16\n\
             encoder.enc_blocks = 1,1\n\
             encoder.middle_blocks = 1\n\
             encoder.dec_blocks = 1,1\n\
             encoder.out_dim = 64\n\
             decoder.render_width = 16\n\
             decoder.k = 6\n\
             decoder.latent_hidden = 64\n\
             decoder.d_compressed = 32\n\
             train.epochs = 125\n\
             train.batch = 2\n\
             train.patch = 24\n\
             train.scale_min = 2\n\
             train.scale_max = 2\n\
             train.epoch_length = 8\n\
             train.base_lr = 2e-3\n\
             train.milestones = 60,90,110\n\
             train.val_scale = 2\n\
             train.val_interval = 25\n\
             train.checkpoint_interval = 125\n",
        ),
        _ => None,
    }
}

/// Construct the model configuration from resolved keys.
pub fn model_config_from_kv(kv: &KvConfig) -> Result<ModelConfig> {
    let d = ModelConfig::default();
    let encoder = EncoderConfig {
        base_width: kv.get_usize("encoder.base_width", d.encoder.base_width)?,
        enc_blocks: kv.get_usize_list("encoder.enc_blocks", &d.encoder.enc_blocks)?,
        middle_blocks: kv.get_usize("encoder.middle_blocks", d.encoder.middle_blocks)?,
        dec_blocks: kv.get_usize_list("encoder.dec_blocks", &d.encoder.dec_blocks)?,
        out_dim: kv.get_usize("encoder.out_dim", d.encoder.out_dim)?,
        ffn_expansion: kv.get_usize("encoder.ffn_expansion", d.encoder.ffn_expansion)?,
        dw_expansion: kv.get_usize("encoder.dw_expansion", d.encoder.dw_expansion)?,
    };
    let decoder = DecoderConfig {
        render_width: kv.get_usize("decoder.render_width", d.decoder.render_width)?,
        mod_layers: kv.get_usize("decoder.k", d.decoder.mod_layers)?,
        latent_hidden: kv.get_usize("decoder.latent_hidden", d.decoder.latent_hidden)?,
        d_compressed: kv.get_usize("decoder.d_compressed", d.decoder.d_compressed)?,
        use_cell: kv.get_bool("decoder.use_cell", d.decoder.use_cell)?,
        local_ensemble: kv.get_bool("decoder.local_ensemble", d.decoder.local_ensemble)?,
        feature_unfold: kv.get_bool("decoder.feature_unfold", d.decoder.feature_unfold)?,
    };
    // the modulation-count identity is structural; an explicit latent_out
    // must agree with it
    if let Some(raw) = kv.get("decoder.latent_out") {
        let explicit: usize = raw
            .parse()
            .map_err(|_| Error::Config(format!("decoder.latent_out: bad value '{raw}'")))?;
        if explicit != decoder.latent_out() {
            return Err(Error::Config(format!(
                "decoder.latent_out = {explicit} contradicts 2*K*render_width + D_c = {}",
                decoder.latent_out()
            )));
        }
    }
    let saliency = match kv.get("saliency.backend").unwrap_or("luminance") {
        "luminance" => SaliencyBackend::Luminance {
            k: kv.get_f64("saliency.k", 0.5)?,
        },
        "external" => {
            let path = kv.get("saliency.model_path").ok_or_else(|| {
                Error::Config("saliency.backend = external requires saliency.model_path".into())
            })?;
            SaliencyBackend::External {
                model_path: PathBuf::from(path),
            }
        }
        other => {
            return Err(Error::Config(format!(
                "saliency.backend '{other}' (expected luminance|external)"
            )))
        }
    };
    let ablation = AblationConfig {
        use_scrrb: kv.get_bool("ablation.use_scrrb", true)?,
        fusion: Fusion::parse(kv.get("ablation.fusion").unwrap_or("affem"))?,
        modulation: ModulationVariant::parse(kv.get("ablation.modulation").unwrap_or("both"))?,
    };
    let cfg = ModelConfig {
        in_channels: kv.get_usize("model.in_channels", d.in_channels)?,
        out_channels: kv.get_usize("model.out_channels", d.out_channels)?,
        encoder,
        decoder,
        saliency,
        ablation,
        affem_per_channel: kv.get_bool("affem.per_channel", false)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn join(list: &[usize]) -> String {
    list.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Canonical key=value form of a model configuration (used for checkpoint
/// hashing and run persistence).
pub fn model_config_to_kv(cfg: &ModelConfig) -> KvConfig {
    let mut kv = KvConfig::new();
    kv.set("model.in_channels", cfg.in_channels);
    kv.set("model.out_channels", cfg.out_channels);
    kv.set("encoder.base_width", cfg.encoder.base_width);
    kv.set("encoder.enc_blocks", join(&cfg.encoder.enc_blocks));
    kv.set("encoder.middle_blocks", cfg.encoder.middle_blocks);
    kv.set("encoder.dec_blocks", join(&cfg.encoder.dec_blocks));
    kv.set("encoder.out_dim", cfg.encoder.out_dim);
    kv.set("encoder.ffn_expansion", cfg.encoder.ffn_expansion);
    kv.set("encoder.dw_expansion", cfg.encoder.dw_expansion);
    kv.set("decoder.render_width", cfg.decoder.render_width);
    kv.set("decoder.k", cfg.decoder.mod_layers);
    kv.set("decoder.latent_hidden", cfg.decoder.latent_hidden);
    kv.set("decoder.d_compressed", cfg.decoder.d_compressed);
    kv.set("decoder.latent_out", cfg.decoder.latent_out());
    kv.set("decoder.use_cell", cfg.decoder.use_cell);
    kv.set("decoder.local_ensemble", cfg.decoder.local_ensemble);
    kv.set("decoder.feature_unfold", cfg.decoder.feature_unfold);
    match &cfg.saliency {
        SaliencyBackend::Luminance { k } => {
            kv.set("saliency.backend", "luminance");
            kv.set("saliency.k", k);
        }
        SaliencyBackend::External { model_path } => {
            kv.set("saliency.backend", "external");
            kv.set("saliency.model_path", model_path.display());
        }
    }
    kv.set("ablation.use_scrrb", cfg.ablation.use_scrrb);
    kv.set("ablation.fusion", cfg.ablation.fusion.name());
    kv.set("ablation.modulation", cfg.ablation.modulation.name());
    kv.set("affem.per_channel", cfg.affem_per_channel);
    kv
}

/// Training-loop knobs resolved from the same key space.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainKv {
    pub epochs: usize,
    pub batch: usize,
    pub patch: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Samples per epoch; 0 means "the training-set size".
    pub epoch_length: usize,
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    pub val_scale: f64,
    pub val_interval: usize,
    pub checkpoint_interval: usize,
    pub val_max_images: usize,
}

pub fn train_config_from_kv(kv: &KvConfig) -> Result<TrainKv> {
    Ok(TrainKv {
        epochs: kv.get_usize("train.epochs", 200)?,
        batch: kv.get_usize("train.batch", 16)?,
        patch: kv.get_usize("train.patch", 48)?,
        scale_min: kv.get_f64("train.scale_min", 1.0)?,
        scale_max: kv.get_f64("train.scale_max", 4.0)?,
        epoch_length: kv.get_usize("train.epoch_length", 0)?,
        base_lr: kv.get_f64("train.base_lr", 2e-4)?,
        milestones: kv.get_usize_list("train.milestones", &[50, 100, 150, 175])?,
        lr_factor: kv.get_f64("train.lr_factor", 0.5)?,
        val_scale: kv.get_f64("train.val_scale", 2.0)?,
        val_interval: kv.get_usize("train.val_interval", 1)?,
        checkpoint_interval: kv.get_usize("train.checkpoint_interval", 25)?,
        val_max_images: kv.get_usize("train.val_max_images", 16)?,
    })
}

/// Resolve defaults < profile < file < overrides into one map.
pub fn resolve_config(
    profile: Option<&str>,
    file: Option<&std::path::Path>,
    overrides: &[String],
) -> Result<KvConfig> {
    let mut kv = KvConfig::new();
    if let Some(name) = profile {
        let text = builtin_profile(name)
            .ok_or_else(|| Error::Config(format!("unknown profile '{name}'")))?;
        kv.merge_over(&KvConfig::parse(text)?);
    }
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        kv.merge_over(&KvConfig::parse(&text)?);
    }
    for ov in overrides {
        kv.apply_override(ov)?;
    }
    Ok(kv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_supports_sections_and_flat_keys() {
        let text = "# comment\n[encoder]\nbase_width = 16\n\ndecoder.k = 4\n";
        let kv = KvConfig::parse(text).unwrap();
        assert_eq!(kv.get("encoder.base_width"), Some("16"));
        assert_eq!(kv.get("decoder.k"), Some("4"));
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(KvConfig::parse("not a kv line").is_err());
    }

    #[test]
    fn layering_order() {
        let mut base = KvConfig::parse("a.x = 1\na.y = 2\n").unwrap();
        let over = KvConfig::parse("a.y = 3\n").unwrap();
        base.merge_over(&over);
        assert_eq!(base.get("a.x"), Some("1"));
        assert_eq!(base.get("a.y"), Some("3"));
        base.apply_override("a.x=9").unwrap();
        assert_eq!(base.get("a.x"), Some("9"));
    }

    #[test]
    fn model_config_roundtrip() {
        let cfg = ModelConfig::default();
        let kv = model_config_to_kv(&cfg);
        let back = model_config_from_kv(&kv).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn latent_out_identity_is_enforced() {
        let mut kv = model_config_to_kv(&ModelConfig::default());
        kv.set("decoder.latent_out", 300);
        assert!(matches!(model_config_from_kv(&kv), Err(Error::Config(_))));
        kv.set("decoder.latent_out", 288);
        assert!(model_config_from_kv(&kv).is_ok());
    }

    #[test]
    fn profiles_parse_cleanly() {
        for name in ["default", "ablate-desk", "overfit-desk"] {
            let kv = KvConfig::parse(builtin_profile(name).unwrap()).unwrap();
            let cfg = model_config_from_kv(&kv).unwrap();
            cfg.validate().unwrap();
            train_config_from_kv(&kv).unwrap();
        }
        assert!(builtin_profile("nope").is_none());
    }

    #[test]
    fn serialize_is_sorted_and_reparsable() {
        let mut kv = KvConfig::new();
        kv.set("z.last", 1);
        kv.set("a.first", 2);
        let text = kv.serialize();
        assert!(text.find("a.first").unwrap() < text.find("z.last").unwrap());
        assert_eq!(KvConfig::parse(&text).unwrap(), kv);
    }
}
