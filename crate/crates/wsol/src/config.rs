//! Pipeline configuration: a flat `key = value` text format with defaults
//! that reproduce the full method, plus switches for every ablation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, WsolError};

/// How the per-stage feature maps are combined into one map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    Mul,
    Add,
    Concat,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Mul => "mul",
            Fusion::Add => "add",
            Fusion::Concat => "concat",
        })
    }
}

impl FromStr for Fusion {
    type Err = WsolError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mul" => Ok(Fusion::Mul),
            "add" => Ok(Fusion::Add),
            "concat" => Ok(Fusion::Concat),
            other => Err(WsolError::Config(format!(
                "unknown fusion {other:?}; expected mul, add, or concat"
            ))),
        }
    }
}

/// Interpolation used when feature maps are brought to a common resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleKind {
    Bilinear,
    Nearest,
}

impl fmt::Display for UpsampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpsampleKind::Bilinear => "bilinear",
            UpsampleKind::Nearest => "nearest",
        })
    }
}

impl FromStr for UpsampleKind {
    type Err = WsolError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(UpsampleKind::Bilinear),
            "nearest" => Ok(UpsampleKind::Nearest),
            other => Err(WsolError::Config(format!(
                "unknown upsample kind {other:?}; expected bilinear or nearest"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    /// Master seed; all randomness (data, init, batching) derives from it.
    pub seed: u64,
    /// Square image side in pixels.
    pub image_size: usize,
    pub train_count: usize,
    pub test_count: usize,

    pub fusion: Fusion,
    /// How many of the deepest backbone stages are fused (1..=4).
    pub fuse_k: usize,
    /// Channel attention across the fused branches.
    pub mca: bool,
    /// Auxiliary classification loss on the deepest stage.
    pub aux: bool,
    /// Gaussian enhancement of CAMs before thresholding.
    pub gauss: bool,
    /// Train and use the segmentation stage; when off, boxes come from
    /// thresholded CAMs directly.
    pub seg: bool,
    pub upsample: UpsampleKind,

    /// Gaussian-map foreground gate.
    pub t_gauss: f64,
    /// Pseudo-label foreground threshold.
    pub t_fg: f64,
    /// Pseudo-label background threshold.
    pub t_bg: f64,
    /// Mask binarization threshold.
    pub tau: f64,

    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Epochs for the CAM network, the segmenter, and the classifier.
    pub epochs_cam: usize,
    pub epochs_seg: usize,
    pub epochs_cls: usize,

    /// Common channel count the fused branches are projected to.
    pub fuse_channels: usize,
    /// Latent dimension of the channel attention.
    pub mca_latent: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 42,
            image_size: 64,
            train_count: 2000,
            test_count: 500,
            fusion: Fusion::Mul,
            fuse_k: 3,
            mca: true,
            aux: true,
            gauss: true,
            seg: true,
            upsample: UpsampleKind::Bilinear,
            t_gauss: 0.7,
            t_fg: 0.5,
            t_bg: 0.004,
            tau: 0.5,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 16,
            epochs_cam: 3,
            epochs_seg: 3,
            epochs_cls: 3,
            fuse_channels: 64,
            mca_latent: 32,
        }
    }
}

impl Config {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                WsolError::Config(format!("bad value {value:?} for key {key:?}"))
            })
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(WsolError::Config(format!(
                    "bad value {other:?} for key {key:?}; expected true or false"
                ))),
            }
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "image_size" => self.image_size = num(key, value)?,
            "train_count" => self.train_count = num(key, value)?,
            "test_count" => self.test_count = num(key, value)?,
            "fusion" => self.fusion = value.parse()?,
            "fuse_k" => self.fuse_k = num(key, value)?,
            "mca" => self.mca = flag(key, value)?,
            "aux" => self.aux = flag(key, value)?,
            "gauss" => self.gauss = flag(key, value)?,
            "seg" => self.seg = flag(key, value)?,
            "upsample" => self.upsample = value.parse()?,
            "t_gauss" => self.t_gauss = num(key, value)?,
            "t_fg" => self.t_fg = num(key, value)?,
            "t_bg" => self.t_bg = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs_cam" => self.epochs_cam = num(key, value)?,
            "epochs_seg" => self.epochs_seg = num(key, value)?,
            "epochs_cls" => self.epochs_cls = num(key, value)?,
            "fuse_channels" => self.fuse_channels = num(key, value)?,
            "mca_latent" => self.mca_latent = num(key, value)?,
            other => {
                return Err(WsolError::Config(format!("unknown config key {other:?}")))
            }
        }
        Ok(())
    }

    /// Parses the flat text format: one `key = value` per line, `#` comments.
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                WsolError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.fuse_k) {
            return Err(WsolError::Config(format!(
                "fuse_k must be 1..=4, got {}",
                self.fuse_k
            )));
        }
        if !(0.0 <= self.t_bg && self.t_bg < self.t_fg && self.t_fg <= 1.0) {
            return Err(WsolError::BadThresholds {
                t_bg: self.t_bg,
                t_fg: self.t_fg,
            });
        }
        if !(0.0 < self.tau && self.tau < 1.0) {
            return Err(WsolError::Config(format!(
                "tau must be in (0,1), got {}",
                self.tau
            )));
        }
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return Err(WsolError::Config(format!(
                "image_size must be a positive multiple of 16, got {}",
                self.image_size
            )));
        }
        if self.train_count == 0 || self.test_count == 0 || self.batch_size == 0 {
            return Err(WsolError::Config(
                "train_count, test_count, and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The flat text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        format!(
            "seed = {}\n\
             image_size = {}\n\
             train_count = {}\n\
             test_count = {}\n\
             fusion = {}\n\
             fuse_k = {}\n\
             mca = {}\n\
             aux = {}\n\
             gauss = {}\n\
             seg = {}\n\
             upsample = {}\n\
             t_gauss = {}\n\
             t_fg = {}\n\
             t_bg = {}\n\
             tau = {}\n\
             lr = {}\n\
             momentum = {}\n\
             batch_size = {}\n\
             epochs_cam = {}\n\
             epochs_seg = {}\n\
             epochs_cls = {}\n\
             fuse_channels = {}\n\
             mca_latent = {}\n",
            self.seed,
            self.image_size,
            self.train_count,
            self.test_count,
            self.fusion,
            self.fuse_k,
            self.mca,
            self.aux,
            self.gauss,
            self.seg,
            self.upsample,
            self.t_gauss,
            self.t_fg,
            self.t_bg,
            self.tau,
            self.lr,
            self.momentum,
            self.batch_size,
            self.epochs_cam,
            self.epochs_seg,
            self.epochs_cls,
            self.fuse_channels,
            self.mca_latent,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_text() {
        let cfg = Config::default();
        let back = Config::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = Config::parse("# header\n\nseed = 7 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::parse("sedd = 7\n").is_err());
    }

    #[test]
    fn threshold_order_is_enforced() {
        let err = Config::parse("t_fg = 0.1\nt_bg = 0.2\n").unwrap_err();
        assert!(matches!(err, WsolError::BadThresholds { .. }));
    }

    #[test]
    fn fuse_k_range_is_enforced() {
        assert!(Config::parse("fuse_k = 0\n").is_err());
        assert!(Config::parse("fuse_k = 5\n").is_err());
        assert!(Config::parse("fuse_k = 4\n").is_ok());
    }
}
