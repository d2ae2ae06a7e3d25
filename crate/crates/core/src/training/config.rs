use sha2::{Digest, Sha256};

use super::optimizer::step_decay;
use crate::error::{Error, Result};
use crate::labelgen::{ClassWeights, LabelScheme};
use crate::network::NetConfig;
use crate::preprocess::{AugmentConfig, ClaheConfig, PATCH_SIZE};

/// Everything that determines a training run, read from a `key = value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub halving_period: usize,
    pub momentum: f64,
    pub l2: f64,
    pub batch_size: usize,
    /// `None` uses the label scheme's default weights.
    pub class_weights: Option<ClassWeights>,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub patch_size: usize,
    pub patch_stride: usize,
    pub inference_stride: usize,
    pub augment: Option<AugmentConfig>,
    pub labels: LabelScheme,
    pub clahe: ClaheConfig,
    /// Architecture; the class count is taken from `labels`.
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.01,
            halving_period: 100,
            momentum: 0.9,
            l2: 5e-4,
            batch_size: 8,
            class_weights: None,
            seed: 0,
            checkpoint_every: 10,
            patch_size: PATCH_SIZE,
            patch_stride: 48,
            inference_stride: 48,
            augment: Some(AugmentConfig::default()),
            labels: LabelScheme::default(),
            clahe: ClaheConfig::default(),
            net: NetConfig::default(),
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in file order.
pub const CONFIG_KEYS: &[&str] = &[
    "epochs",
    "learning_rate",
    "halving_period",
    "momentum",
    "l2",
    "batch_size",
    "class_weights",
    "seed",
    "checkpoint_every",
    "patch_size",
    "patch_stride",
    "inference_stride",
    "augment",
    "flip_prob",
    "rotation_deg",
    "scale_min",
    "scale_max",
    "shear_deg",
    "noise_sigma",
    "brightness",
    "contrast_min",
    "contrast_max",
    "labels",
    "band_radius",
    "clahe_tiles",
    "clahe_clip",
    "channels",
    "bottleneck_channels",
    "dropout",
    "bn_eps",
    "bn_momentum",
];

/// Keys that do not change the trajectory of the epochs that are run.
const UNDIGESTED: &[&str] = &["epochs", "checkpoint_every", "inference_stride"];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: std::fmt::Display>(values: &[T]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl TrainConfig {
    /// Parses `key = value` lines over the defaults; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let aug = || Error::Config(format!("{key} needs augment = true"));
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "halving_period" => self.halving_period = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "l2" => self.l2 = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "class_weights" => {
                self.class_weights = match value {
                    "default" => None,
                    v => Some(ClassWeights::parse(v)?),
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "patch_stride" => self.patch_stride = parse(key, value)?,
            "inference_stride" => self.inference_stride = parse(key, value)?,
            "augment" => {
                let on: bool = parse(key, value)?;
                self.augment = match (on, self.augment.take()) {
                    (true, Some(a)) => Some(a),
                    (true, None) => Some(AugmentConfig::default()),
                    (false, _) => None,
                }
            }
            "flip_prob" => self.augment.as_mut().ok_or_else(aug)?.flip_prob = parse(key, value)?,
            "rotation_deg" => {
                self.augment.as_mut().ok_or_else(aug)?.rotation_deg = parse(key, value)?
            }
            "scale_min" => self.augment.as_mut().ok_or_else(aug)?.scale.0 = parse(key, value)?,
            "scale_max" => self.augment.as_mut().ok_or_else(aug)?.scale.1 = parse(key, value)?,
            "shear_deg" => self.augment.as_mut().ok_or_else(aug)?.shear_deg = parse(key, value)?,
            "noise_sigma" => {
                self.augment.as_mut().ok_or_else(aug)?.noise_sigma = parse(key, value)?
            }
            "brightness" => self.augment.as_mut().ok_or_else(aug)?.brightness = parse(key, value)?,
            "contrast_min" => {
                self.augment.as_mut().ok_or_else(aug)?.contrast.0 = parse(key, value)?
            }
            "contrast_max" => {
                self.augment.as_mut().ok_or_else(aug)?.contrast.1 = parse(key, value)?
            }
            "labels" => {
                let radius = match self.labels {
                    LabelScheme::EdgeAware { band_radius } => band_radius,
                    LabelScheme::Binary => crate::labelgen::DEFAULT_BAND_RADIUS,
                };
                self.labels = match value {
                    "edge_aware" => LabelScheme::EdgeAware {
                        band_radius: radius,
                    },
                    "binary" => LabelScheme::Binary,
                    other => {
                        return Err(Error::Config(format!(
                            "labels = {other:?}: expected edge_aware or binary"
                        )))
                    }
                }
            }
            "band_radius" => match &mut self.labels {
                LabelScheme::EdgeAware { band_radius } => *band_radius = parse(key, value)?,
                LabelScheme::Binary => {
                    return Err(Error::Config(
                        "band_radius needs labels = edge_aware".into(),
                    ))
                }
            },
            "clahe_tiles" => {
                let (r, c) = value.split_once('x').ok_or_else(|| {
                    Error::Config(format!("clahe_tiles = {value:?}: expected RxC"))
                })?;
                self.clahe.tile_rows = parse(key, r.trim())?;
                self.clahe.tile_cols = parse(key, c.trim())?;
            }
            "clahe_clip" => self.clahe.clip_limit = parse(key, value)?,
            "channels" => self.net.channels = parse_list(key, value)?,
            "bottleneck_channels" => self.net.bottleneck_channels = parse(key, value)?,
            "dropout" => self.net.dropout = parse(key, value)?,
            "bn_eps" => self.net.bn_eps = parse(key, value)?,
            "bn_momentum" => self.net.bn_momentum = parse(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key {other:?}; known keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0
            || self.halving_period == 0
            || self.batch_size == 0
            || self.checkpoint_every == 0
        {
            return fail(
                "epochs, halving_period, batch_size and checkpoint_every must be positive".into(),
            );
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.l2 >= 0.0)
        {
            return fail(format!(
                "learning_rate {} must be positive, momentum {} in [0, 1), l2 {} non-negative",
                self.learning_rate, self.momentum, self.l2
            ));
        }
        let m = self.net.size_multiple();
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(m) {
            return fail(format!(
                "patch_size {} must be a positive multiple of {m}",
                self.patch_size
            ));
        }
        for (name, s) in [
            ("patch_stride", self.patch_stride),
            ("inference_stride", self.inference_stride),
        ] {
            if s == 0 || s > self.patch_size {
                return fail(format!("{name} {s} must be in 1..={}", self.patch_size));
            }
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.labels.classes() {
                return fail(format!(
                    "{} class weights for a {}-class label scheme",
                    w.len(),
                    self.labels.classes()
                ));
            }
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        self.network().validate()
    }

    pub fn weights(&self) -> ClassWeights {
        self.class_weights
            .clone()
            .unwrap_or_else(|| self.labels.default_weights())
    }

    /// Network configuration with the label scheme's class count.
    pub fn network(&self) -> NetConfig {
        NetConfig {
            classes: self.labels.classes(),
            ..self.net.clone()
        }
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> Result<f64> {
        step_decay(self.learning_rate, self.halving_period, self.epochs, epoch)
    }

    fn value_of(&self, key: &str) -> Option<String> {
        let a = self.augment.as_ref();
        Some(match key {
            "epochs" => self.epochs.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "halving_period" => self.halving_period.to_string(),
            "momentum" => self.momentum.to_string(),
            "l2" => self.l2.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "class_weights" => self
                .class_weights
                .as_ref()
                .map_or("default".into(), ClassWeights::to_line),
            "seed" => self.seed.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "patch_stride" => self.patch_stride.to_string(),
            "inference_stride" => self.inference_stride.to_string(),
            "augment" => a.is_some().to_string(),
            "flip_prob" => a?.flip_prob.to_string(),
            "rotation_deg" => a?.rotation_deg.to_string(),
            "scale_min" => a?.scale.0.to_string(),
            "scale_max" => a?.scale.1.to_string(),
            "shear_deg" => a?.shear_deg.to_string(),
            "noise_sigma" => a?.noise_sigma.to_string(),
            "brightness" => a?.brightness.to_string(),
            "contrast_min" => a?.contrast.0.to_string(),
            "contrast_max" => a?.contrast.1.to_string(),
            "labels" => match self.labels {
                LabelScheme::EdgeAware { .. } => "edge_aware".into(),
                LabelScheme::Binary => "binary".into(),
            },
            "band_radius" => match self.labels {
                LabelScheme::EdgeAware { band_radius } => band_radius.to_string(),
                LabelScheme::Binary => return None,
            },
            "clahe_tiles" => format!("{}x{}", self.clahe.tile_rows, self.clahe.tile_cols),
            "clahe_clip" => self.clahe.clip_limit.to_string(),
            "channels" => join(&self.net.channels),
            "bottleneck_channels" => self.net.bottleneck_channels.to_string(),
            "dropout" => self.net.dropout.to_string(),
            "bn_eps" => self.net.bn_eps.to_string(),
            "bn_momentum" => self.net.bn_momentum.to_string(),
            _ => return None,
        })
    }

    /// Canonical `key = value` text; [`TrainConfig::parse`] reads it back.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .filter_map(|k| self.value_of(k).map(|v| format!("{k} = {v}\n")))
            .collect()
    }

    /// SHA-256 over the settings that shape the trajectory (not `epochs` or cadences).
    pub fn digest(&self) -> Vec<u8> {
        let mut h = Sha256::new();
        for k in CONFIG_KEYS.iter().filter(|k| !UNDIGESTED.contains(k)) {
            if let Some(v) = self.value_of(k) {
                h.update(format!("{k}={v}\n"));
            }
        }
        h.finalize().to_vec()
    }
}

/// Learning rate for `epoch` under `cfg`'s schedule.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    cfg.lr_at_epoch(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_protocol() {
        let cfg = TrainConfig::default();
        assert_eq!(
            (cfg.epochs, cfg.learning_rate, cfg.halving_period),
            (200, 0.01, 100)
        );
        assert_eq!((cfg.momentum, cfg.l2, cfg.batch_size), (0.9, 5e-4, 8));
        assert_eq!(cfg.network().classes, 5);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn schedule_is_piecewise_constant() {
        let cfg = TrainConfig::default();
        for e in 0..100 {
            assert_eq!(lr_at_epoch(&cfg, e).unwrap(), 0.01);
        }
        for e in 100..200 {
            assert_eq!(lr_at_epoch(&cfg, e).unwrap(), 0.005);
        }
        assert!(matches!(lr_at_epoch(&cfg, 200), Err(Error::Argument(_))));
    }

    #[test]
    fn text_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.set("labels", "binary").unwrap();
        cfg.set("class_weights", "1,3.5").unwrap();
        cfg.set("channels", "8,16,32,64").unwrap();
        cfg.set("clahe_tiles", "4x6").unwrap();
        cfg.set("augment", "false").unwrap();
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(
            TrainConfig::parse(&TrainConfig::default().to_text()).unwrap(),
            TrainConfig::default()
        );
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(
            TrainConfig::parse("learning_rte = 0.1"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(TrainConfig::parse("# c\nepochs = many").is_err());
        assert!(TrainConfig::parse("epochs = 0").is_err());
        assert!(TrainConfig::parse("class_weights = 1,2").is_err());
        assert!(TrainConfig::parse("patch_size = 90").is_err());
        assert!(TrainConfig::parse("augment = false\nflip_prob = 0.1").is_err());
    }

    #[test]
    fn digest_ignores_epoch_count_only() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.epochs = 20;
        b.checkpoint_every = 3;
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 32);
    }
}
