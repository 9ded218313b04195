//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are skipped. Unknown keys are an
//! error. Command-line overrides go through [`TrainConfig::set`], so flags and
//! files accept exactly the same keys.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::SynthSpec;
use crate::error::{EdmaeError, Result};
use crate::model::{DenseEncoderConfig, EdmaeConfig, ReconScope};
use crate::optim::{AdamWConfig, FocalParams, PlateauConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegLoss {
    Focal,
    CrossEntropy,
}

impl SegLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            SegLoss::Focal => "focal",
            SegLoss::CrossEntropy => "ce",
        }
    }
}

impl FromStr for SegLoss {
    type Err = EdmaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "focal" => Ok(SegLoss::Focal),
            "ce" => Ok(SegLoss::CrossEntropy),
            _ => Err(EdmaeError::Config(format!("loss must be focal or ce, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub adamw: AdamWConfig,
    pub plateau: PlateauConfig,
    pub mask_ratio: f64,
    pub patch: usize,
    pub model: EdmaeConfig,
    pub loss: SegLoss,
    pub focal: FocalParams,
    /// Head-only training with the encoder held fixed.
    pub freeze_encoder: bool,
    pub seg_hidden: usize,
    pub classes: usize,
    pub noise: f64,
    pub image_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 1e-3,
            epochs: 20,
            batch: 16,
            adamw: AdamWConfig::default(),
            plateau: PlateauConfig::default(),
            mask_ratio: 0.75,
            patch: 8,
            model: EdmaeConfig::default(),
            loss: SegLoss::Focal,
            focal: FocalParams::default(),
            freeze_encoder: false,
            seg_hidden: 8,
            classes: 4,
            noise: 0.15,
            image_size: 64,
        }
    }
}

pub const KEYS: [&str; 26] = [
    "seed",
    "lr",
    "epochs",
    "batch",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "plateau_factor",
    "plateau_patience",
    "plateau_threshold",
    "min_lr",
    "mask_ratio",
    "patch",
    "momentum",
    "align_weight",
    "recon_scope",
    "decoder_hidden",
    "stem_channels",
    "growth",
    "block_layers",
    "loss",
    "focal_gamma",
    "focal_alpha",
    "freeze_encoder",
    "seg_hidden",
];

const EXTRA_KEYS: [&str; 3] = ["classes", "noise", "image_size"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| EdmaeError::Config(format!("invalid value {value:?} for key {key}")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "beta1" => self.adamw.beta1 = parse(key, v)?,
            "beta2" => self.adamw.beta2 = parse(key, v)?,
            "eps" => self.adamw.eps = parse(key, v)?,
            "weight_decay" => self.adamw.weight_decay = parse(key, v)?,
            "plateau_factor" => self.plateau.factor = parse(key, v)?,
            "plateau_patience" => self.plateau.patience = parse(key, v)?,
            "plateau_threshold" => self.plateau.threshold = parse(key, v)?,
            "min_lr" => self.plateau.min_lr = parse(key, v)?,
            "mask_ratio" => self.mask_ratio = parse(key, v)?,
            "patch" => self.patch = parse(key, v)?,
            "momentum" => self.model.momentum = parse(key, v)?,
            "align_weight" => self.model.align_weight = parse(key, v)?,
            "recon_scope" => self.model.recon_scope = v.parse()?,
            "decoder_hidden" => self.model.decoder_hidden = parse(key, v)?,
            "stem_channels" => self.model.encoder.stem_channels = parse(key, v)?,
            "growth" => self.model.encoder.growth = parse(key, v)?,
            "block_layers" => {
                self.model.encoder.blocks = v.split(',').map(|b| parse(key, b)).collect::<Result<_>>()?;
            }
            "loss" => self.loss = v.parse()?,
            "focal_gamma" => self.focal.gamma = parse(key, v)?,
            "focal_alpha" => self.focal.alpha = parse(key, v)?,
            "freeze_encoder" => self.freeze_encoder = parse(key, v)?,
            "seg_hidden" => self.seg_hidden = parse(key, v)?,
            "classes" => self.classes = parse(key, v)?,
            "noise" => self.noise = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            other => return Err(EdmaeError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let blocks = || {
            let parts: Vec<String> = self.model.encoder.blocks.iter().map(|b| b.to_string()).collect();
            parts.join(",")
        };
        Some(match key {
            "seed" => self.seed.to_string(),
            "lr" => self.lr.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch" => self.batch.to_string(),
            "beta1" => self.adamw.beta1.to_string(),
            "beta2" => self.adamw.beta2.to_string(),
            "eps" => self.adamw.eps.to_string(),
            "weight_decay" => self.adamw.weight_decay.to_string(),
            "plateau_factor" => self.plateau.factor.to_string(),
            "plateau_patience" => self.plateau.patience.to_string(),
            "plateau_threshold" => self.plateau.threshold.to_string(),
            "min_lr" => self.plateau.min_lr.to_string(),
            "mask_ratio" => self.mask_ratio.to_string(),
            "patch" => self.patch.to_string(),
            "momentum" => self.model.momentum.to_string(),
            "align_weight" => self.model.align_weight.to_string(),
            "recon_scope" => self.model.recon_scope.as_str().to_string(),
            "decoder_hidden" => self.model.decoder_hidden.to_string(),
            "stem_channels" => self.model.encoder.stem_channels.to_string(),
            "growth" => self.model.encoder.growth.to_string(),
            "block_layers" => blocks(),
            "loss" => self.loss.as_str().to_string(),
            "focal_gamma" => self.focal.gamma.to_string(),
            "focal_alpha" => self.focal.alpha.to_string(),
            "freeze_encoder" => self.freeze_encoder.to_string(),
            "seg_hidden" => self.seg_hidden.to_string(),
            "classes" => self.classes.to_string(),
            "noise" => self.noise.to_string(),
            "image_size" => self.image_size.to_string(),
            _ => return None,
        })
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| EdmaeError::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| EdmaeError::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(EdmaeError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(EdmaeError::Config("batch must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(EdmaeError::Config(format!("mask_ratio must be in [0,1], got {}", self.mask_ratio)));
        }
        if self.patch == 0 {
            return Err(EdmaeError::Config("patch must be >= 1".into()));
        }
        if self.seg_hidden == 0 {
            return Err(EdmaeError::Config("seg_hidden must be >= 1".into()));
        }
        self.adamw.validate()?;
        self.plateau.validate()?;
        self.model.validate()?;
        self.focal.validate()?;
        self.synth_spec().validate()
    }

    pub fn encoder(&self) -> &DenseEncoderConfig {
        &self.model.encoder
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            size: self.image_size,
            classes: self.classes,
            noise: self.noise,
            patch: self.patch,
            seed: self.seed,
        }
    }

    pub fn recon_scope(&self) -> ReconScope {
        self.model.recon_scope
    }
}

/// Every key with its current value, one `key=value` per line.
impl fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for k in KEYS.iter().chain(&EXTRA_KEYS) {
            writeln!(f, "{k}={}", self.get(k).unwrap_or_default())?;
        }
        Ok(())
    }
}
