//! Training configuration and its flat `key=value` text form.
//!
//! ```text
//! # comment
//! keypoints=10
//! loss.mutual_target=input
//! ```
//!
//! Every key has a default; a file only needs the keys it changes. Rendering
//! writes every key, and floating-point values use the shortest
//! representation that parses back to the same bits.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::encoder::{EncoderConfig, ScoreNorm};
use crate::error::{bail, Error, Result};
use crate::losses::LossWeights;
use crate::mutual::Direction;
use crate::skeleton::DecoderConfig;

/// What the mutual reconstructions are compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MutualTarget {
    /// The input clouds.
    Input,
    /// The self reconstructions of the same inputs, held fixed.
    SelfRec,
}

impl MutualTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            MutualTarget::Input => "input",
            MutualTarget::SelfRec => "self_rec",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "input" => Some(MutualTarget::Input),
            "self_rec" => Some(MutualTarget::SelfRec),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub category: String,
    pub keypoints: usize,
    pub points_per_cloud: usize,
    pub epochs: usize,
    /// `None` means half the dataset size, rounded down.
    pub pairs_per_epoch: Option<usize>,
    pub seed: u64,
    pub weights: LossWeights,
    pub mutual_target: MutualTarget,
    pub direction: Direction,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Log the gradient norm contributed by the mutual branch alone.
    pub log_branch_grad_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            category: String::new(),
            keypoints: 10,
            points_per_cloud: 2048,
            epochs: 80,
            pairs_per_epoch: None,
            seed: 0,
            weights: LossWeights::default(),
            mutual_target: MutualTarget::Input,
            direction: Direction::Verbatim,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            log_branch_grad_norm: false,
        }
    }
}

/// Every recognized key, in rendering order.
pub const KEYS: &[&str] = &[
    "category",
    "keypoints",
    "points_per_cloud",
    "epochs",
    "pairs_per_epoch",
    "seed",
    "loss.lambda_self",
    "loss.lambda_mutual",
    "loss.mu_skeleton",
    "loss.mu_keypoint",
    "loss.mutual_target",
    "mutual.direction",
    "optim.learning_rate",
    "optim.clip_norm",
    "encoder.sa1_centers",
    "encoder.sa2_centers",
    "encoder.sa1_radius",
    "encoder.sa2_radius",
    "encoder.group_size",
    "encoder.offset_code_width",
    "encoder.score_norm",
    "decoder.interval",
    "decoder.cap_per_segment",
    "decoder.hidden",
    "log.branch_grad_norm",
];

/// Keys that change parameter shapes or the network's behavior. A checkpoint
/// can only be resumed under a configuration that agrees on all of them.
pub const STRUCTURAL_KEYS: &[&str] = &[
    "keypoints",
    "encoder.sa1_centers",
    "encoder.sa2_centers",
    "encoder.sa1_radius",
    "encoder.sa2_radius",
    "encoder.group_size",
    "encoder.offset_code_width",
    "encoder.score_norm",
    "decoder.interval",
    "decoder.cap_per_segment",
    "decoder.hidden",
];

fn invalid(key: &str, value: &str) -> Error {
    Error::Argument(format!("invalid value `{value}` for `{key}`"))
}

fn num<T: core::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| invalid(key, value))
}

impl TrainConfig {
    /// Encoder settings with the configured keypoint count.
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig { keypoints: self.keypoints, ..self.encoder.clone() }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "category" => self.category = v.to_string(),
            "keypoints" => self.keypoints = num(key, v)?,
            "points_per_cloud" => self.points_per_cloud = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "pairs_per_epoch" => {
                self.pairs_per_epoch = if v == "auto" { None } else { Some(num(key, v)?) }
            }
            "seed" => self.seed = num(key, v)?,
            "loss.lambda_self" => self.weights.lambda_self = num(key, v)?,
            "loss.lambda_mutual" => self.weights.lambda_mutual = num(key, v)?,
            "loss.mu_skeleton" => self.weights.mu_skeleton = num(key, v)?,
            "loss.mu_keypoint" => self.weights.mu_keypoint = num(key, v)?,
            "loss.mutual_target" => self.mutual_target = MutualTarget::parse(v).ok_or_else(|| invalid(key, v))?,
            "mutual.direction" => self.direction = Direction::parse(v).ok_or_else(|| invalid(key, v))?,
            "optim.learning_rate" => self.learning_rate = num(key, v)?,
            "optim.clip_norm" => self.clip_norm = num(key, v)?,
            "encoder.sa1_centers" => self.encoder.sa1_centers = num(key, v)?,
            "encoder.sa2_centers" => self.encoder.sa2_centers = num(key, v)?,
            "encoder.sa1_radius" => self.encoder.sa1_radius = num(key, v)?,
            "encoder.sa2_radius" => self.encoder.sa2_radius = num(key, v)?,
            "encoder.group_size" => self.encoder.group_size = num(key, v)?,
            "encoder.offset_code_width" => self.encoder.offset_code_width = num(key, v)?,
            "encoder.score_norm" => self.encoder.score_norm = ScoreNorm::parse(v).ok_or_else(|| invalid(key, v))?,
            "decoder.interval" => self.decoder.interval = num(key, v)?,
            "decoder.cap_per_segment" => self.decoder.cap_per_segment = num(key, v)?,
            "decoder.hidden" => self.decoder.hidden = num(key, v)?,
            "log.branch_grad_norm" => self.log_branch_grad_norm = num(key, v)?,
            _ => bail!(Argument, "unknown configuration key `{key}`"),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "category" => self.category.clone(),
            "keypoints" => self.keypoints.to_string(),
            "points_per_cloud" => self.points_per_cloud.to_string(),
            "epochs" => self.epochs.to_string(),
            "pairs_per_epoch" => match self.pairs_per_epoch {
                Some(n) => n.to_string(),
                None => "auto".to_string(),
            },
            "seed" => self.seed.to_string(),
            "loss.lambda_self" => self.weights.lambda_self.to_string(),
            "loss.lambda_mutual" => self.weights.lambda_mutual.to_string(),
            "loss.mu_skeleton" => self.weights.mu_skeleton.to_string(),
            "loss.mu_keypoint" => self.weights.mu_keypoint.to_string(),
            "loss.mutual_target" => self.mutual_target.as_str().to_string(),
            "mutual.direction" => self.direction.as_str().to_string(),
            "optim.learning_rate" => self.learning_rate.to_string(),
            "optim.clip_norm" => self.clip_norm.to_string(),
            "encoder.sa1_centers" => self.encoder.sa1_centers.to_string(),
            "encoder.sa2_centers" => self.encoder.sa2_centers.to_string(),
            "encoder.sa1_radius" => self.encoder.sa1_radius.to_string(),
            "encoder.sa2_radius" => self.encoder.sa2_radius.to_string(),
            "encoder.group_size" => self.encoder.group_size.to_string(),
            "encoder.offset_code_width" => self.encoder.offset_code_width.to_string(),
            "encoder.score_norm" => self.encoder.score_norm.as_str().to_string(),
            "decoder.interval" => self.decoder.interval.to_string(),
            "decoder.cap_per_segment" => self.decoder.cap_per_segment.to_string(),
            "decoder.hidden" => self.decoder.hidden.to_string(),
            "log.branch_grad_norm" => self.log_branch_grad_norm.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse { line: i + 1, msg: format!("expected key=value, got `{line}`") });
            };
            self.set(key.trim(), value).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push('=');
            out.push_str(&self.get(key).unwrap_or_default());
            out.push('\n');
        }
        out
    }

    /// `(key, value)` pairs in rendering order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().map(|k| (*k, self.get(k).unwrap_or_default())).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, n) in [("keypoints", self.keypoints), ("points_per_cloud", self.points_per_cloud), ("epochs", self.epochs)] {
            if n == 0 {
                bail!(Argument, "`{name}` must be at least 1");
            }
        }
        if self.pairs_per_epoch == Some(0) {
            bail!(Argument, "`pairs_per_epoch` must be at least 1");
        }
        self.weights.validate()?;
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            bail!(Argument, "learning rate must be finite and non-negative");
        }
        if !(self.clip_norm >= 0.0) {
            bail!(Argument, "clip norm must be non-negative");
        }
        self.encoder_config().validate()?;
        self.decoder.validate()
    }

    /// Fails with an incompatibility error naming the first structural key
    /// on which `self` and `other` disagree.
    pub fn check_structural(&self, other: &TrainConfig) -> Result<()> {
        for key in STRUCTURAL_KEYS {
            let (a, b) = (self.get(key), other.get(key));
            if a != b {
                bail!(
                    Incompatible,
                    "`{key}` is {} in the checkpoint but {} requested",
                    a.unwrap_or_default(),
                    b.unwrap_or_default()
                );
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = TrainConfig::default();
        assert_eq!((c.keypoints, c.points_per_cloud, c.epochs), (10, 2048, 80));
        assert_eq!((c.weights.lambda_self, c.weights.lambda_mutual), (0.5, 0.5));
        assert_eq!(c.learning_rate, 1e-3);
    }

    #[test]
    fn render_parse_round_trip() {
        let mut c = TrainConfig::default();
        c.category = "tee".into();
        c.learning_rate = 0.1 + 0.2;
        c.weights.mu_skeleton = 1.0 / 3.0;
        c.pairs_per_epoch = Some(7);
        c.mutual_target = MutualTarget::SelfRec;
        c.direction = Direction::Mirrored;
        assert_eq!(TrainConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = TrainConfig::parse("epochs=3\n\nbogus.key=1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
        let err = TrainConfig::parse("# c\nepochs=abc").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(matches!(TrainConfig::parse("novalue").unwrap_err(), Error::Parse { line: 1, .. }));
    }

    #[test]
    fn structural_mismatch_is_incompatible() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.epochs = 3;
        assert!(a.check_structural(&b).is_ok());
        b.keypoints = 4;
        assert!(matches!(a.check_structural(&b), Err(Error::Incompatible(_))));
    }

    #[test]
    fn validation_rejects_zero_counts() {
        let mut c = TrainConfig::default();
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.weights.lambda_mutual = -0.5;
        assert!(c.validate().is_err());
    }
}
