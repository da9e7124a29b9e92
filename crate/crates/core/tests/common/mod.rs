#![allow(dead_code)]

use tokenhalt::backbone::{AttentionLayerWeights, LayerSpec, LayerVars};
use tokenhalt::params::ParamStore;
use tokenhalt::rng;
use tokenhalt::scene::RegionField;
use tokenhalt::tensor::{directional_check, grad_check_report, randn, uniform, Graph, Tensor, Var};

pub struct LayerCase {
    pub spec: LayerSpec,
    pub store: ParamStore,
    pub weights: AttentionLayerWeights,
    pub field: RegionField,
    pub f: Tensor,
}

/// One layer over `regions × per` tokens with random offsets and features.
/// Small biases and non-unit gains are added so no parameter sits at its
/// trivial initial value.
pub fn layer_case(seed: u64, spec: LayerSpec, regions: usize, per: usize) -> LayerCase {
    let mut r = rng::indexed(seed, "layer_case", 0);
    let mut store = ParamStore::new();
    let weights = AttentionLayerWeights::register(&mut store, "l", &spec, &mut r).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let noise = randn(store.get(id).shape(), 0.1, &mut r);
        let t = store.get_mut(id);
        for (v, e) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += e;
        }
    }
    let n = regions * per;
    let field = RegionField {
        ids: (0..n).map(|i| (i * 7 + 3) % regions).collect(),
        offsets: uniform(&[n, 2], -1.0, 1.0, &mut r),
    };
    let f = randn(&[n, spec.d_model], 1.0, &mut r);
    LayerCase {
        spec,
        store,
        weights,
        field,
        f,
    }
}

pub fn layer_tensors(store: &ParamStore, w: &AttentionLayerWeights) -> Vec<Tensor> {
    [
        w.ln1_g, w.ln1_b, w.wq, w.wk, w.wv, w.ln2_g, w.ln2_b, w.mlp_w1, w.mlp_b1, w.mlp_w2,
        w.mlp_b2, w.pe_w1, w.pe_b1, w.pe_w2, w.pe_b2,
    ]
    .iter()
    .map(|&id| store.get(id).clone())
    .collect()
}

/// Inverse of [`layer_tensors`] on graph handles.
pub fn layer_vars(v: &[Var]) -> LayerVars {
    LayerVars {
        ln1_g: v[0],
        ln1_b: v[1],
        wq: v[2],
        wk: v[3],
        wv: v[4],
        ln2_g: v[5],
        ln2_b: v[6],
        mlp_w1: v[7],
        mlp_b1: v[8],
        mlp_w2: v[9],
        mlp_b2: v[10],
        pe_w1: v[11],
        pe_b1: v[12],
        pe_w2: v[13],
        pe_b2: v[14],
    }
}

/// Per-entry check at the usual step plus random directional checks. Entries
/// with near-zero gradient are compared within the rounding noise of the
/// central difference rather than relatively.
pub fn assert_gradients<F>(label: &str, f: F, inputs: &[Tensor], seed: u64)
where
    F: Fn(&mut Graph, &[Var]) -> tokenhalt::Result<Var>,
{
    let report = grad_check_report(&f, inputs, 1e-6).unwrap();
    assert!(
        report.within(1e-4),
        "{label} seed {seed}: max rel {} floor {}",
        report.max_rel_error,
        report.noise_floor
    );
    let mut r = rng::indexed(seed, "directions", 0);
    let dirs: Vec<Vec<Tensor>> = (0..4)
        .map(|_| {
            inputs
                .iter()
                .map(|t| randn(t.shape(), 1.0, &mut r))
                .collect()
        })
        .collect();
    let d = directional_check(&f, inputs, 1e-6, &dirs).unwrap();
    assert!(d < 1e-4, "{label} seed {seed}: directional {d}");
}
