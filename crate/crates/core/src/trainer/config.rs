//! `key = value` configuration files.

use std::path::Path;

use crate::edf::PassOptions;
use crate::error::{Error, Result};
use crate::halting::HaltConfig;
use crate::losses::{LossWeights, SparsityKind};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub scenes_per_epoch: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_floor: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub loss_weights: LossWeights,
    pub sparsity: SparsityKind,
    pub halt: HaltConfig,
    pub halting: bool,
    pub recycle: bool,
    pub augment: bool,
    pub objects_per_scene: usize,
    pub clusters_per_scene: usize,
    pub heatmap_sigma: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 3,
            scenes_per_epoch: 200,
            lr_start: 1e-4,
            lr_peak: 2.5e-3,
            lr_floor: 1e-5,
            warmup_fraction: 0.3,
            weight_decay: 0.01,
            grad_clip_norm: 10.0,
            loss_weights: LossWeights::default(),
            sparsity: SparsityKind::NonUniform,
            halt: HaltConfig::default(),
            halting: true,
            recycle: true,
            augment: false,
            objects_per_scene: 4,
            clusters_per_scene: 3,
            heatmap_sigma: 0.25,
            model: ModelConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        key: key.to_string(),
        msg: format!("cannot parse `{value}`"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config {
            key: key.to_string(),
            msg: format!("expected a boolean, got `{value}`"),
        }),
    }
}

impl TrainConfig {
    pub fn pass_options(&self) -> PassOptions {
        PassOptions {
            halt: self.halt.clone(),
            halting: self.halting,
            recycle: self.recycle,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.scenes_per_epoch
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.scenes_per_epoch" => self.scenes_per_epoch = parse(key, value)?,
            "train.lr_start" => self.lr_start = parse(key, value)?,
            "train.lr_peak" => self.lr_peak = parse(key, value)?,
            "train.lr_floor" => self.lr_floor = parse(key, value)?,
            "train.warmup_fraction" => self.warmup_fraction = parse(key, value)?,
            "train.weight_decay" => self.weight_decay = parse(key, value)?,
            "train.grad_clip_norm" => self.grad_clip_norm = parse(key, value)?,
            "train.augment" => self.augment = parse_bool(key, value)?,
            "train.recycle" => self.recycle = parse_bool(key, value)?,
            "loss.lambda_box" => self.loss_weights.boxes = parse(key, value)?,
            "loss.lambda_heat" => self.loss_weights.heat = parse(key, value)?,
            "loss.lambda_sparse" => self.loss_weights.sparse = parse(key, value)?,
            "loss.sparsity" => {
                self.sparsity = match value {
                    "nonuniform" => SparsityKind::NonUniform,
                    "uniform" => SparsityKind::Uniform,
                    _ => {
                        return Err(Error::Config {
                            key: key.into(),
                            msg: format!("expected `nonuniform` or `uniform`, got `{value}`"),
                        })
                    }
                }
            }
            "halt.enabled" => self.halting = parse_bool(key, value)?,
            "halt.u" => self.halt.u = parse(key, value)?,
            "halt.layers" => {
                // comma list; extra modules inherit the last module's bounds
                let layers: Vec<usize> = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?;
                let last = self.halt.bounds.last().copied().unwrap_or((0.0, 1.0));
                self.halt.bounds.resize(layers.len(), last);
                m.halt_layers = layers;
            }
            "halt.module1_channels" => m.module1_channels = parse(key, value)?,
            "scene.objects" => self.objects_per_scene = parse(key, value)?,
            "scene.clusters" => self.clusters_per_scene = parse(key, value)?,
            "scene.heatmap_sigma" => self.heatmap_sigma = parse(key, value)?,
            "model.d_model" => {
                m.layers.d_model = parse(key, value)?;
                m.layers.d_head = m.layers.d_model / m.layers.heads.max(1);
            }
            "model.heads" => {
                m.layers.heads = parse(key, value)?;
                m.layers.d_head = m.layers.d_model / m.layers.heads.max(1);
            }
            "model.d_ff" => m.layers.d_ff = parse(key, value)?,
            "model.layers" => {
                let n: usize = parse(key, value)?;
                m.layers.n_layers = n;
                m.layers.shifted = (0..n).map(|l| l % 2 == 1).collect();
            }
            "model.region_size" => m.region_size = parse(key, value)?,
            "model.head_channels" => m.head_channels = parse(key, value)?,
            _ => {
                let bound = key
                    .strip_prefix("halt.alpha_lo_")
                    .map(|i| (i, true))
                    .or_else(|| key.strip_prefix("halt.alpha_hi_").map(|i| (i, false)));
                match bound {
                    Some((idx, lo)) => {
                        let i: usize = parse(key, idx)?;
                        let slot = i
                            .checked_sub(1)
                            .and_then(|i| self.halt.bounds.get_mut(i))
                            .ok_or_else(|| Error::Config {
                                key: key.into(),
                                msg: "no such halting module".into(),
                            })?;
                        let v: f64 = parse(key, value)?;
                        if lo {
                            slot.0 = v;
                        } else {
                            slot.1 = v;
                        }
                    }
                    None => {
                        return Err(Error::Config {
                            key: key.into(),
                            msg: "unknown key".into(),
                        })
                    }
                }
            }
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                what: "config",
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if !(self.lr_start > 0.0 && self.lr_start < self.lr_peak) {
            return bad("train.lr_start", "need 0 < lr_start < lr_peak");
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor <= self.lr_peak) {
            return bad("train.lr_floor", "need 0 <= lr_floor <= lr_peak");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("train.warmup_fraction", "must lie in (0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("train.weight_decay", "must be non-negative");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("train.grad_clip_norm", "must be positive");
        }
        let lw = self.loss_weights;
        for (k, v) in [
            ("loss.lambda_box", lw.boxes),
            ("loss.lambda_heat", lw.heat),
            ("loss.lambda_sparse", lw.sparse),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(k, "must be finite and non-negative");
            }
        }
        if self.scenes_per_epoch == 0 {
            return bad("train.scenes_per_epoch", "must be positive");
        }
        if !(self.heatmap_sigma > 0.0) {
            return bad("scene.heatmap_sigma", "must be positive");
        }
        if self.model.layers.heads == 0 || self.model.layers.d_model % self.model.layers.heads != 0
        {
            return bad("model.heads", "must divide model.d_model");
        }
        self.model.validate().map_err(|e| match e {
            Error::Config { .. } => e,
            other => Error::Config {
                key: "model".into(),
                msg: other.to_string(),
            },
        })?;
        self.halt.validate(self.model.halt_layers.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_ignores_comments() {
        let cfg = TrainConfig::parse_str(
            "# desk run\nseed = 9\ntrain.epochs = 1 # short\nhalt.alpha_lo_2 = 0.5\nloss.sparsity = uniform\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.epochs, 1);
        assert_eq!(cfg.halt.bounds[1], (0.5, 0.99));
        assert_eq!(cfg.sparsity, SparsityKind::Uniform);
    }

    #[test]
    fn halting_layers_resize_bounds() {
        let cfg = TrainConfig::parse_str(
            "model.layers = 3\nhalt.layers = 0, 1, 2\nhalt.alpha_hi_3 = 1\n",
        )
        .unwrap();
        assert_eq!(cfg.model.halt_layers, vec![0, 1, 2]);
        assert_eq!(cfg.halt.bounds, vec![(0.8, 0.9), (0.9, 0.99), (0.9, 1.0)]);
        let cfg = TrainConfig::parse_str("model.layers = 2\nhalt.layers = 1\n").unwrap();
        assert_eq!(cfg.halt.bounds, vec![(0.8, 0.9)]);
        match TrainConfig::parse_str("model.layers = 2") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "model"),
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn unknown_key_is_named() {
        match TrainConfig::parse_str("train.epoch = 3") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.epoch"),
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn bad_value_is_named() {
        match TrainConfig::parse_str("halt.u = lots") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "halt.u"),
            r => panic!("unexpected {r:?}"),
        }
        match TrainConfig::parse_str("train.lr_start = 1\ntrain.lr_peak = 0.5") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.lr_start"),
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn out_of_range_module_is_rejected() {
        assert!(TrainConfig::parse_str("halt.alpha_hi_3 = 0.5").is_err());
        assert!(TrainConfig::parse_str("halt.alpha_hi_0 = 0.5").is_err());
    }
}
