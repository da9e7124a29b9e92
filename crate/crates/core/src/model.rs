//! Full network: embedding, attention stack, halting modules and head.

use std::path::Path;

use crate::backbone::{AttentionLayerWeights, LayerSpec};
use crate::error::{Error, Result};
use crate::halting::{DenseHaltWeights, MlpHaltWeights};
use crate::losses::HeadWeights;
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::scene::{GridSpec, RAW_FEATURES};
use crate::tensor::{randn, Tensor};

/// Architecture hyper-parameters. Stored in checkpoint metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: LayerSpec,
    pub grid: GridSpec,
    pub region_size: usize,
    /// Width of the convolutional halting module.
    pub module1_channels: usize,
    pub head_channels: usize,
    /// Attention layer (0-based) preceded by each halting module. The first
    /// module is convolutional, later ones are single linear layers.
    pub halt_layers: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: LayerSpec::default(),
            grid: GridSpec::default(),
            region_size: 7,
            module1_channels: 8,
            head_channels: 16,
            halt_layers: vec![0, 2],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.layers.validate()?;
        self.grid.validate()?;
        if self.region_size == 0 {
            return Err(Error::Invalid("region size must be positive".into()));
        }
        if self.head_channels == 0 {
            return Err(Error::Invalid("head channels must be positive".into()));
        }
        if self.module1_channels == 0 {
            return Err(Error::Config {
                key: "halt.module1_channels".into(),
                msg: "must be positive".into(),
            });
        }
        let ordered = self.halt_layers.windows(2).all(|w| w[0] < w[1]);
        if !ordered || self.halt_layers.iter().any(|&l| l >= self.layers.n_layers) {
            return Err(Error::Invalid(format!(
                "halting layers {:?} must be increasing and below {}",
                self.halt_layers, self.layers.n_layers
            )));
        }
        Ok(())
    }

    fn write_meta(&self, store: &mut ParamStore) {
        let l = &self.layers;
        store.set_meta("n_layers", l.n_layers);
        store.set_meta("heads", l.heads);
        store.set_meta("d_model", l.d_model);
        store.set_meta("d_ff", l.d_ff);
        store.set_meta("pe_hidden", l.pe_hidden);
        let shifts: Vec<&str> = l
            .shifted
            .iter()
            .map(|&s| if s { "1" } else { "0" })
            .collect();
        store.set_meta("shifted", shifts.join(","));
        store.set_meta("extent_m", self.grid.extent_m);
        store.set_meta("voxel_m", self.grid.voxel_m);
        store.set_meta("z_min", self.grid.z_min);
        store.set_meta("z_max", self.grid.z_max);
        store.set_meta("region_size", self.region_size);
        store.set_meta("module1_channels", self.module1_channels);
        store.set_meta("head_channels", self.head_channels);
        let hl: Vec<String> = self.halt_layers.iter().map(ToString::to_string).collect();
        store.set_meta("halt_layers", hl.join(","));
    }

    fn read_meta(store: &ParamStore) -> Result<Self> {
        fn get<T: std::str::FromStr>(store: &ParamStore, key: &str) -> Result<T> {
            store
                .meta(key)
                .ok_or_else(|| Error::Checkpoint(format!("missing meta `{key}`")))?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad meta `{key}`")))
        }
        fn list(store: &ParamStore, key: &str) -> Result<Vec<usize>> {
            let raw = store
                .meta(key)
                .ok_or_else(|| Error::Checkpoint(format!("missing meta `{key}`")))?;
            if raw.is_empty() {
                return Ok(Vec::new());
            }
            raw.split(',')
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::Checkpoint(format!("bad meta `{key}`")))
                })
                .collect()
        }
        let heads: usize = get(store, "heads")?;
        let d_model: usize = get(store, "d_model")?;
        let cfg = Self {
            layers: LayerSpec {
                n_layers: get(store, "n_layers")?,
                heads,
                d_model,
                d_head: if heads == 0 { 0 } else { d_model / heads },
                d_ff: get(store, "d_ff")?,
                pe_hidden: get(store, "pe_hidden")?,
                shifted: list(store, "shifted")?
                    .into_iter()
                    .map(|v| v == 1)
                    .collect(),
            },
            grid: GridSpec {
                extent_m: get(store, "extent_m")?,
                voxel_m: get(store, "voxel_m")?,
                z_min: get(store, "z_min")?,
                z_max: get(store, "z_max")?,
            },
            region_size: get(store, "region_size")?,
            module1_channels: get(store, "module1_channels")?,
            head_channels: get(store, "head_channels")?,
            halt_layers: list(store, "halt_layers")?,
        };
        cfg.validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(cfg)
    }
}

/// Weights of one halting module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HaltModule {
    Dense(DenseHaltWeights),
    Mlp(MlpHaltWeights),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub layers: Vec<AttentionLayerWeights>,
    pub halt: Vec<HaltModule>,
    pub head: HeadWeights,
}

impl Model {
    /// Random initialization from the `init` sub-stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "init");
        let mut store = ParamStore::new();
        let d = config.layers.d_model;
        let embed_w = store.add(
            "embed.w",
            randn(
                &[RAW_FEATURES, d],
                (1.0 / RAW_FEATURES as f64).sqrt(),
                &mut r,
            ),
        )?;
        let embed_b = store.add("embed.b", Tensor::zeros(&[d]))?;
        let mut layers = Vec::new();
        let mut halt = Vec::new();
        for l in 0..config.layers.n_layers {
            if let Some(m) = config.halt_layers.iter().position(|&h| h == l) {
                let prefix = format!("halt{}", m + 1);
                halt.push(if m == 0 {
                    HaltModule::Dense(DenseHaltWeights::register(
                        &mut store,
                        &prefix,
                        d,
                        config.module1_channels,
                        &mut r,
                    )?)
                } else {
                    HaltModule::Mlp(MlpHaltWeights::register(&mut store, &prefix, d, &mut r)?)
                });
            }
            layers.push(AttentionLayerWeights::register(
                &mut store,
                &format!("layer{}", l + 1),
                &config.layers,
                &mut r,
            )?);
        }
        let head = HeadWeights::register(&mut store, "head", d, config.head_channels, &mut r)?;
        config.write_meta(&mut store);
        Ok(Self {
            config,
            params: store,
            embed_w,
            embed_b,
            layers,
            halt,
            head,
        })
    }

    /// Rebuilds the model described by a checkpoint's metadata and copies
    /// its tensors.
    pub fn from_params(store: &ParamStore) -> Result<Self> {
        let config = ModelConfig::read_meta(store)?;
        let mut model = Self::new(config, 0)?;
        model.params.load_from(store)?;
        for (k, v) in store.meta_entries() {
            model.params.set_meta(k, v);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_params(&ParamStore::load(path)?)
    }

    pub fn n_halt_modules(&self) -> usize {
        self.halt.len()
    }

    /// Halting module (index) run before attention layer `l`.
    pub fn module_before(&self, l: usize) -> Option<usize> {
        self.config.halt_layers.iter().position(|&h| h == l)
    }
}
