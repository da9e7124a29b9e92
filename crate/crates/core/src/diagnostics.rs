//! Finite-difference check of the whole trainable pipeline on a small model.

use crate::backbone::LayerSpec;
use crate::edf::PassOptions;
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::params::Bound;
use crate::rng;
use crate::scene::{generate_scene, GridSpec};
use crate::tensor::{
    directional_check, grad_check_report, randn, GradCheckReport, Graph, Tensor, Var,
};
use crate::trainer::{scene_loss, Sample, TrainConfig};

/// Two attention layers with both halting modules, a one-channel head and
/// 434 parameters over a 16×16 grid.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        layers: LayerSpec {
            pe_hidden: 2,
            ..LayerSpec::alternating(2, 1, 4, 4)
        },
        grid: GridSpec::new(8.0, 0.5).expect("valid grid"),
        region_size: 4,
        module1_channels: 1,
        head_channels: 1,
        halt_layers: vec![0, 1],
    }
}

pub struct ModelGradCheck {
    /// Per-entry comparison at every parameter.
    pub report: GradCheckReport,
    /// Worst relative error over random directions.
    pub directional: f64,
    pub parameter_names: Vec<String>,
}

impl ModelGradCheck {
    pub fn worst_parameter(&self) -> Option<&str> {
        self.report
            .worst
            .map(|(k, _)| self.parameter_names[k].as_str())
    }
}

/// Checks box, heatmap and sparsity losses of the toy model against central
/// differences with step `h`. Every parameter is moved off its initial value
/// by N(0, 0.1) noise so zero biases do not leave relu units sitting exactly
/// on their kink, where a central difference sees half a slope.
pub fn model_gradcheck(seed: u64, h: f64, directions: usize) -> Result<ModelGradCheck> {
    let cfg = toy_config();
    let mut model = Model::new(cfg.clone(), seed)?;
    let mut r = rng::indexed(seed, "gradcheck_perturb", 0);
    for id in model.params.ids().collect::<Vec<_>>() {
        let t = model.params.get_mut(id);
        let noise = randn(t.shape(), 0.1, &mut r);
        for (v, e) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += e;
        }
    }
    let tc = TrainConfig {
        model: cfg.clone(),
        ..TrainConfig::default()
    };
    let sample = Sample::new(generate_scene(seed, 3, 2, 8.0), &cfg, tc.heatmap_sigma)?;
    let opts = PassOptions::no_halting();
    let f = |g: &mut Graph, v: &[Var]| {
        let b = Bound::from_vars(v.to_vec());
        scene_loss(g, &b, &model, &sample, &tc, &opts).map(|(l, _, _)| l)
    };
    let inputs: Vec<Tensor> = model.params.tensors().to_vec();
    let report = grad_check_report(&f, &inputs, h)?;
    let mut r = rng::indexed(seed, "gradcheck_directions", 0);
    let dirs: Vec<Vec<Tensor>> = (0..directions)
        .map(|_| {
            inputs
                .iter()
                .map(|t| randn(t.shape(), 1.0, &mut r))
                .collect()
        })
        .collect();
    let directional = directional_check(&f, &inputs, h, &dirs)?;
    let parameter_names = model
        .params
        .ids()
        .map(|id| model.params.name(id).to_string())
        .collect();
    Ok(ModelGradCheck {
        report,
        directional,
        parameter_names,
    })
}
