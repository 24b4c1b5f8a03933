//! Run configuration: a flat `key = value` text format with dotted
//! namespaces, chosen for diff-ability and zero-dependency parsing.
//!
//! Unknown keys are rejected naming the offending key. `snapshot()` emits
//! every key canonically, so a snapshot is a complete, re-runnable record of
//! the run.

use crate::augment::AugmentationPolicy;
use crate::data::{DatasetId, DatasetSpec, OodKind};
use crate::encoder::EncoderConfig;
use crate::energy::{EnergyModelConfig, EnergyVariant, ProjectorKind};
use crate::error::{Error, Result};
use crate::objectives::LossConfig;
use crate::optim::{AdamConfig, SgdConfig};
use crate::sgld::SgldConfig;
use std::path::PathBuf;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub total_iters: u64,
    pub batch_size: usize,
    pub d_z: usize,
    pub checkpoint_every: u64,

    pub data_id: DatasetId,
    pub data_dir: Option<PathBuf>,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub data_scale: f64,
    pub ood: OodKind,

    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub generated_negatives: bool,

    pub model_widths: Vec<usize>,
    pub spectral_norm: bool,
    pub projector: ProjectorKind,
    pub projector_slope: f64,
    pub variant: EnergyVariant,
    pub comp_unsquared: bool,
    pub encoder_widths: Vec<usize>,

    pub sgld_steps: usize,
    pub sgld_grad_coeff: f64,
    pub sgld_noise: f64,
    pub sgld_aug_period: usize,
    pub sgld_eval_steps: usize,

    pub buffer_capacity: usize,
    pub buffer_reinit_prob: f64,

    pub ebm_lr: f64,
    pub ebm_beta1: f64,
    pub ebm_beta2: f64,
    pub ebm_eps: f64,
    pub enc_lr: f64,
    pub enc_momentum: f64,
    pub enc_weight_decay: f64,
    pub warmup_iters: u64,
    pub ema_decay: f64,

    /// Jitter σ as a fraction of the dataset scale.
    pub aug_jitter: f64,
    pub aug_rotation_deg: f64,
    /// Strength multiplier of the SGLD transition policy relative to the
    /// encoder policy.
    pub aug_sgld_strength: f64,
    pub aug_crop_shift: usize,
    pub aug_flip_prob: f64,
    pub aug_brightness: f64,
    pub aug_contrast: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = DatasetSpec::builtin(DatasetId::Gauss8);
        Self {
            seed: 0,
            total_iters: 5000,
            batch_size: 64,
            d_z: 128,
            checkpoint_every: 1000,
            data_id: DatasetId::Gauss8,
            data_dir: None,
            clamp_lo: spec.clamp.0,
            clamp_hi: spec.clamp.1,
            data_scale: spec.data_scale,
            ood: spec.ood,
            alpha: 1.0,
            beta: 0.01,
            tau: 0.2,
            generated_negatives: true,
            model_widths: vec![128, 128],
            spectral_norm: true,
            projector: ProjectorKind::Mlp,
            projector_slope: 0.2,
            variant: EnergyVariant::NormDirection,
            comp_unsquared: false,
            encoder_widths: vec![128, 128],
            sgld_steps: 60,
            sgld_grad_coeff: 0.01,
            sgld_noise: 0.01,
            sgld_aug_period: 60,
            sgld_eval_steps: 600,
            buffer_capacity: 10000,
            buffer_reinit_prob: 0.001,
            ebm_lr: 1e-4,
            ebm_beta1: 0.0,
            ebm_beta2: 0.999,
            ebm_eps: 1e-8,
            enc_lr: 3e-2,
            enc_momentum: 0.9,
            enc_weight_decay: 5e-4,
            warmup_iters: 2000,
            ema_decay: 0.999,
            aug_jitter: 0.03,
            aug_rotation_deg: 10.0,
            aug_sgld_strength: 0.5,
            aug_crop_shift: 3,
            aug_flip_prob: 0.5,
            aug_brightness: 0.4,
            aug_contrast: 0.4,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("key `{key}`: expected bool, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{v}`")))
}

fn parse_widths(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("key `{key}`: bad width `{t}`")))
        })
        .collect()
}

impl RunConfig {
    /// Defaults adjusted for the named dataset (clamp box, scale).
    pub fn default_for(id: DatasetId) -> Self {
        let spec = DatasetSpec::builtin(id);
        Self {
            data_id: id,
            clamp_lo: spec.clamp.0,
            clamp_hi: spec.clamp.1,
            data_scale: spec.data_scale,
            ood: spec.ood,
            ..Self::default()
        }
    }

    /// Set one `key = value` entry; unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "total_iters" => self.total_iters = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "d_z" => self.d_z = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "data.id" => {
                self.data_id = DatasetId::parse(v)?;
                let spec = DatasetSpec::builtin(self.data_id);
                self.clamp_lo = spec.clamp.0;
                self.clamp_hi = spec.clamp.1;
                self.data_scale = spec.data_scale;
            }
            "data.dir" => {
                self.data_dir = if v.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(v))
                }
            }
            "data.clamp_lo" => self.clamp_lo = parse_num(key, v)?,
            "data.clamp_hi" => self.clamp_hi = parse_num(key, v)?,
            "data.scale" => self.data_scale = parse_num(key, v)?,
            "data.ood" => self.ood = OodKind::parse(v)?,
            "loss.alpha" => self.alpha = parse_num(key, v)?,
            "loss.beta" => self.beta = parse_num(key, v)?,
            "loss.tau" => self.tau = parse_num(key, v)?,
            "loss.generated_negatives" => self.generated_negatives = parse_bool(key, v)?,
            "model.widths" => self.model_widths = parse_widths(key, v)?,
            "model.spectral_norm" => self.spectral_norm = parse_bool(key, v)?,
            "model.projector" => {
                self.projector = match v {
                    "mlp" => ProjectorKind::Mlp,
                    "linear" => ProjectorKind::Linear,
                    "identity" => ProjectorKind::Identity,
                    _ => return Err(Error::Config(format!("key `model.projector`: unknown `{v}`"))),
                }
            }
            "model.projector_slope" => self.projector_slope = parse_num(key, v)?,
            "model.variant" => {
                self.variant = match v {
                    "norm-direction" => EnergyVariant::NormDirection,
                    "multi-head" => EnergyVariant::MultiHead,
                    _ => return Err(Error::Config(format!("key `model.variant`: unknown `{v}`"))),
                }
            }
            "model.comp_unsquared" => self.comp_unsquared = parse_bool(key, v)?,
            "encoder.widths" => self.encoder_widths = parse_widths(key, v)?,
            "sgld.step_count" => self.sgld_steps = parse_num(key, v)?,
            "sgld.grad_coeff" => self.sgld_grad_coeff = parse_num(key, v)?,
            "sgld.noise_scale" => self.sgld_noise = parse_num(key, v)?,
            "sgld.aug_period" => self.sgld_aug_period = parse_num(key, v)?,
            "sgld.eval_steps" => self.sgld_eval_steps = parse_num(key, v)?,
            "buffer.capacity" => self.buffer_capacity = parse_num(key, v)?,
            "buffer.reinit_prob" => self.buffer_reinit_prob = parse_num(key, v)?,
            "ebm_opt.lr" => self.ebm_lr = parse_num(key, v)?,
            "ebm_opt.beta1" => self.ebm_beta1 = parse_num(key, v)?,
            "ebm_opt.beta2" => self.ebm_beta2 = parse_num(key, v)?,
            "ebm_opt.eps" => self.ebm_eps = parse_num(key, v)?,
            "enc_opt.lr" => self.enc_lr = parse_num(key, v)?,
            "enc_opt.momentum" => self.enc_momentum = parse_num(key, v)?,
            "enc_opt.weight_decay" => self.enc_weight_decay = parse_num(key, v)?,
            "warmup_iters" => self.warmup_iters = parse_num(key, v)?,
            "ema_decay" => self.ema_decay = parse_num(key, v)?,
            "aug.jitter" => self.aug_jitter = parse_num(key, v)?,
            "aug.rotation_deg" => self.aug_rotation_deg = parse_num(key, v)?,
            "aug.sgld_strength" => self.aug_sgld_strength = parse_num(key, v)?,
            "aug.crop_shift" => self.aug_crop_shift = parse_num(key, v)?,
            "aug.flip_prob" => self.aug_flip_prob = parse_num(key, v)?,
            "aug.brightness" => self.aug_brightness = parse_num(key, v)?,
            "aug.contrast" => self.aug_contrast = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        self.validate()
    }

    fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config("loss.tau must be positive".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("loss.alpha and loss.beta must be ≥ 0".into()));
        }
        if self.sgld_grad_coeff <= 0.0 {
            return Err(Error::Config("sgld.grad_coeff must be positive".into()));
        }
        if self.sgld_noise < 0.0 {
            return Err(Error::Config("sgld.noise_scale must be ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.buffer_reinit_prob) {
            return Err(Error::Config("buffer.reinit_prob must be in [0, 1]".into()));
        }
        if self.clamp_lo >= self.clamp_hi {
            return Err(Error::Config("data.clamp_lo must be below data.clamp_hi".into()));
        }
        if self.warmup_iters > self.total_iters && self.total_iters > 0 {
            // allowed, warmup simply never completes; no error
        }
        if self.ebm_lr < 0.0 || self.enc_lr < 0.0 {
            return Err(Error::Config("learning rates must be ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Parse a config file body (starting from dataset-aware defaults when
    /// the file sets `data.id` first; otherwise gauss8 defaults).
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
        Self::parse(&text)
    }

    /// Canonical full serialization; `parse(snapshot()) == self`.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("data.id", self.data_id.name().into());
        kv(
            "data.dir",
            self.data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv("data.clamp_lo", format!("{}", self.clamp_lo));
        kv("data.clamp_hi", format!("{}", self.clamp_hi));
        kv("data.scale", format!("{}", self.data_scale));
        kv("data.ood", self.ood.name().into());
        kv("seed", format!("{}", self.seed));
        kv("total_iters", format!("{}", self.total_iters));
        kv("batch_size", format!("{}", self.batch_size));
        kv("d_z", format!("{}", self.d_z));
        kv("checkpoint_every", format!("{}", self.checkpoint_every));
        kv("loss.alpha", format!("{}", self.alpha));
        kv("loss.beta", format!("{}", self.beta));
        kv("loss.tau", format!("{}", self.tau));
        kv(
            "loss.generated_negatives",
            format!("{}", self.generated_negatives),
        );
        kv(
            "model.widths",
            self.model_widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("model.spectral_norm", format!("{}", self.spectral_norm));
        kv(
            "model.projector",
            match self.projector {
                ProjectorKind::Mlp => "mlp",
                ProjectorKind::Linear => "linear",
                ProjectorKind::Identity => "identity",
            }
            .into(),
        );
        kv("model.projector_slope", format!("{}", self.projector_slope));
        kv(
            "model.variant",
            match self.variant {
                EnergyVariant::NormDirection => "norm-direction",
                EnergyVariant::MultiHead => "multi-head",
            }
            .into(),
        );
        kv("model.comp_unsquared", format!("{}", self.comp_unsquared));
        kv(
            "encoder.widths",
            self.encoder_widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("sgld.step_count", format!("{}", self.sgld_steps));
        kv("sgld.grad_coeff", format!("{}", self.sgld_grad_coeff));
        kv("sgld.noise_scale", format!("{}", self.sgld_noise));
        kv("sgld.aug_period", format!("{}", self.sgld_aug_period));
        kv("sgld.eval_steps", format!("{}", self.sgld_eval_steps));
        kv("buffer.capacity", format!("{}", self.buffer_capacity));
        kv("buffer.reinit_prob", format!("{}", self.buffer_reinit_prob));
        kv("ebm_opt.lr", format!("{}", self.ebm_lr));
        kv("ebm_opt.beta1", format!("{}", self.ebm_beta1));
        kv("ebm_opt.beta2", format!("{}", self.ebm_beta2));
        kv("ebm_opt.eps", format!("{}", self.ebm_eps));
        kv("enc_opt.lr", format!("{}", self.enc_lr));
        kv("enc_opt.momentum", format!("{}", self.enc_momentum));
        kv("enc_opt.weight_decay", format!("{}", self.enc_weight_decay));
        kv("warmup_iters", format!("{}", self.warmup_iters));
        kv("ema_decay", format!("{}", self.ema_decay));
        kv("aug.jitter", format!("{}", self.aug_jitter));
        kv("aug.rotation_deg", format!("{}", self.aug_rotation_deg));
        kv("aug.sgld_strength", format!("{}", self.aug_sgld_strength));
        kv("aug.crop_shift", format!("{}", self.aug_crop_shift));
        kv("aug.flip_prob", format!("{}", self.aug_flip_prob));
        kv("aug.brightness", format!("{}", self.aug_brightness));
        kv("aug.contrast", format!("{}", self.aug_contrast));
        s
    }

    /// FNV-1a hash of the snapshot, for score reports.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.snapshot().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    // ── derived sub-configs ─────────────────────────────────────────────

    pub fn dataset_spec(&self) -> DatasetSpec {
        let mut spec = DatasetSpec::builtin(self.data_id);
        spec.clamp = (self.clamp_lo, self.clamp_hi);
        spec.data_scale = self.data_scale;
        spec.ood = self.ood;
        spec.image_dir = self.data_dir.clone();
        if self.data_id != DatasetId::ImageDir {
            spec.dim = 2;
        }
        spec
    }

    pub fn energy_config(&self, in_dim: usize) -> EnergyModelConfig {
        EnergyModelConfig {
            in_dim,
            hidden: self.model_widths.clone(),
            d_z: self.d_z,
            spectral_norm: self.spectral_norm,
            projector: self.projector,
            projector_slope: self.projector_slope,
            variant: self.variant,
            beta: self.beta,
            comp_unsquared: self.comp_unsquared,
        }
    }

    pub fn encoder_config(&self, in_dim: usize) -> EncoderConfig {
        EncoderConfig {
            in_dim,
            hidden: self.encoder_widths.clone(),
            d_z: self.d_z,
        }
    }

    pub fn sgld_config(&self) -> SgldConfig {
        SgldConfig {
            step_count: self.sgld_steps,
            grad_coeff: self.sgld_grad_coeff,
            noise_scale: self.sgld_noise,
            clamp: Some((self.clamp_lo, self.clamp_hi)),
            aug_period: self.sgld_aug_period,
        }
    }

    pub fn sgld_eval_config(&self) -> SgldConfig {
        SgldConfig {
            step_count: self.sgld_eval_steps,
            ..self.sgld_config()
        }
    }

    /// The encoder's augmentation policy for this dataset family.
    pub fn encoder_policy(&self, image_dims: Option<(usize, usize)>) -> AugmentationPolicy {
        match self.data_id {
            DatasetId::ImageDir => {
                let (h, w) = image_dims.expect("image dims required for image policy");
                AugmentationPolicy::Image {
                    h,
                    w,
                    crop_shift: self.aug_crop_shift,
                    flip_prob: self.aug_flip_prob,
                    brightness: self.aug_brightness,
                    contrast: self.aug_contrast,
                    clamp: (self.clamp_lo, self.clamp_hi),
                }
            }
            _ => AugmentationPolicy::Vector2d {
                jitter_sigma: self.aug_jitter * self.data_scale,
                rot_range_rad: self.aug_rotation_deg.to_radians(),
                center: [0.0, 0.0],
                clamp: (self.clamp_lo, self.clamp_hi),
            },
        }
    }

    /// The (weaker) SGLD transition policy.
    pub fn sgld_policy(&self, image_dims: Option<(usize, usize)>) -> AugmentationPolicy {
        self.encoder_policy(image_dims).scaled(self.aug_sgld_strength)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            beta: self.beta,
            tau: self.tau,
            use_generated_negatives: self.generated_negatives,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.ebm_lr,
            beta1: self.ebm_beta1,
            beta2: self.ebm_beta2,
            eps: self.ebm_eps,
        }
    }

    pub fn sgd_config(&self) -> SgdConfig {
        SgdConfig {
            lr: self.enc_lr,
            momentum: self.enc_momentum,
            weight_decay: self.enc_weight_decay,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.beta = 0.1;
        cfg.model_widths = vec![64, 32];
        cfg.projector = ProjectorKind::Linear;
        let text = cfg.snapshot();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back.snapshot(), text);
        assert_eq!(back.seed, 42);
        assert_eq!(back.beta, 0.1);
        assert_eq!(back.model_widths, vec![64, 32]);
        assert_eq!(back.projector, ProjectorKind::Linear);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = RunConfig::parse("sgld.stepcount = 60\n").unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("sgld.stepcount"), "{msg}"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# a comment\n\nseed = 9\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("loss.tau = 0\n").is_err());
        assert!(RunConfig::parse("buffer.reinit_prob = 1.5\n").is_err());
        assert!(RunConfig::parse("model.projector = conv\n").is_err());
        assert!(RunConfig::parse("seed\n").is_err());
    }

    #[test]
    fn hash_is_stable_and_config_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
