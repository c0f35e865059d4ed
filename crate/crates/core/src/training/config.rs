use crate::config::KeyValues;
use crate::data::AugmentOps;
use crate::error::{Error, Result};
use crate::network::{NetConfig, NET_KEYS};

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_height: usize,
    pub crop_width: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub hflip: bool,
    /// Weight of each batch in the running normalization statistics.
    pub norm_momentum: f64,
    /// Save a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: 64² crops, batch 4, 30 epochs.
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            seed: 0,
            epochs: 30,
            batch_size: 4,
            crop_height: 64,
            crop_width: 64,
            base_lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            power: 0.9,
            scale_min: 0.5,
            scale_max: 2.0,
            hflip: true,
            norm_momentum: 0.1,
            checkpoint_every: 0,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "seed",
    "epochs",
    "batch_size",
    "crop_height",
    "crop_width",
    "base_lr",
    "momentum",
    "weight_decay",
    "power",
    "scale_min",
    "scale_max",
    "hflip",
    "norm_momentum",
    "checkpoint_every",
];

impl TrainConfig {
    /// The full-scale recipe (768² crops, batch 8, 240 epochs, ResNet-101
    /// sized attention input). Kept for reference and FLOP reports; not
    /// trainable on a laptop.
    pub fn paper_profile() -> Self {
        Self {
            net: NetConfig {
                stem_widths: [256, 512, 1024, 2048],
                channels: 512,
                reduced_channels: 64,
                num_classes: 19,
                head_channels: 512,
                ..NetConfig::default()
            },
            epochs: 240,
            batch_size: 8,
            crop_height: 768,
            crop_width: 768,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.crop_height % 16 != 0 || self.crop_width % 16 != 0 || self.crop_height == 0 || self.crop_width == 0 {
            return Err(Error::config("crop extents must be positive multiples of 16"));
        }
        if !(self.base_lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("learning rate, momentum or weight decay out of range"));
        }
        if !(self.norm_momentum > 0.0 && self.norm_momentum <= 1.0) {
            return Err(Error::config("norm_momentum must lie in (0, 1]"));
        }
        if !(self.power > 0.0) {
            return Err(Error::config("poly power must be positive"));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::config("scale range must satisfy 0 < scale_min <= scale_max"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let known: Vec<&str> = NET_KEYS.iter().chain(TRAIN_KEYS).copied().collect();
        kv.reject_unknown(&known)?;
        let d = Self::default();
        let cfg = Self {
            net: NetConfig::from_kv(kv)?,
            seed: kv.get_or("seed", d.seed)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            crop_height: kv.get_or("crop_height", d.crop_height)?,
            crop_width: kv.get_or("crop_width", d.crop_width)?,
            base_lr: kv.get_or("base_lr", d.base_lr)?,
            momentum: kv.get_or("momentum", d.momentum)?,
            weight_decay: kv.get_or("weight_decay", d.weight_decay)?,
            power: kv.get_or("power", d.power)?,
            scale_min: kv.get_or("scale_min", d.scale_min)?,
            scale_max: kv.get_or("scale_max", d.scale_max)?,
            hflip: kv.get_or("hflip", d.hflip)?,
            norm_momentum: kv.get_or("norm_momentum", d.norm_momentum)?,
            checkpoint_every: kv.get_or("checkpoint_every", d.checkpoint_every)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }

    /// All keys with every default materialised.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("seed", self.seed);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("crop_height", self.crop_height);
        kv.set("crop_width", self.crop_width);
        kv.set("base_lr", self.base_lr);
        kv.set("momentum", self.momentum);
        kv.set("weight_decay", self.weight_decay);
        kv.set("power", self.power);
        kv.set("scale_min", self.scale_min);
        kv.set("scale_max", self.scale_max);
        kv.set("hflip", self.hflip);
        kv.set("norm_momentum", self.norm_momentum);
        kv.set("checkpoint_every", self.checkpoint_every);
        self.net.write_kv(&mut kv);
        kv
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }

    pub fn augment_ops(&self) -> AugmentOps {
        AugmentOps {
            hflip: self.hflip,
            scale: Some((self.scale_min, self.scale_max)),
            crop: Some((self.crop_height, self.crop_width)),
        }
    }

    pub fn iterations_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    pub fn max_iter(&self, samples: usize) -> usize {
        self.epochs * self.iterations_per_epoch(samples)
    }
}
