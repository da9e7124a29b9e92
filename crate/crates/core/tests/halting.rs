//! Threshold clamping, score modules and latent fusion.

mod common;

use common::assert_gradients;
use proptest::prelude::*;
use tokenhalt::halting::{
    fuse_latent, quantile, score_module_dense, score_module_mlp, threshold, DenseHaltWeights,
    MlpHaltWeights,
};
use tokenhalt::params::{Bound, ParamStore};
use tokenhalt::rng;
use tokenhalt::tensor::{randn, Graph, Tensor, Var};

fn halted(active: &[bool], mask: &[bool]) -> usize {
    active.iter().zip(mask).filter(|(&a, &k)| a && !k).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn halt_fraction_stays_within_bounds(
        scores in prop::collection::vec(0.0f64..1.0, 1..120),
        u in -0.1f64..1.1,
        a in 0.0f64..=1.0,
        b in 0.0f64..=1.0,
        active_seed in any::<u64>(),
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let n = scores.len();
        // about a fifth of the tokens are already halted
        let active: Vec<bool> = (0..n).map(|i| (active_seed.rotate_left(i as u32 % 64) ^ i as u64) % 5 != 0).collect();
        let na = active.iter().filter(|&&x| x).count();
        let out = threshold(&scores, u, lo, hi, &active).unwrap();
        let h = halted(&active, &out.mask) as f64;
        let n = na as f64;
        prop_assert!(h >= lo * n - 1.0 && h <= hi * n + 1.0, "halted {} of {}, bounds ({}, {})", h, n, lo, hi);
        for (i, (&act, &k)) in active.iter().zip(&out.mask).enumerate() {
            prop_assert!(act || !k, "inactive token {} kept", i);
        }
    }
}

#[test]
fn lower_bound_raises_threshold_to_quantile() {
    let mut r = rng::stream(3, "quantile");
    for _ in 0..50 {
        let scores: Vec<f64> = randn(&[40], 1.0, &mut r)
            .data()
            .iter()
            .map(|v| 0.5 + 0.1 * v.abs())
            .collect();
        let active = vec![true; scores.len()];
        let out = threshold(&scores, 0.01, 0.8, 1.0, &active).unwrap();
        // brute-force 0.8 quantile: the value with 32 scores strictly below it
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(out.threshold, sorted[32]);
        assert_eq!(quantile(&sorted, 0.8), sorted[32]);
        assert!(halted(&active, &out.mask) >= 32);
    }
}

fn perturbed(store: &mut ParamStore, seed: u64) {
    let mut r = rng::indexed(seed, "perturb", 0);
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get_mut(id);
        let noise = randn(t.shape(), 0.1, &mut r);
        for (v, e) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += e;
        }
    }
}

#[test]
fn dense_module_gradcheck() {
    let cells = 8;
    for seed in 0..5 {
        let mut r = rng::indexed(seed, "dense_module", 0);
        let mut store = ParamStore::new();
        let w = DenseHaltWeights::register(&mut store, "m", 6, 2, &mut r).unwrap();
        perturbed(&mut store, seed);
        let cell_index: Vec<usize> = (0..20)
            .map(|i| (i * 13 + seed as usize) % (cells * cells))
            .collect();
        let mut inputs = store.tensors().to_vec();
        inputs.push(randn(&[20, 6], 1.0, &mut r));
        let np = store.len();
        let f = |g: &mut Graph, v: &[Var]| {
            let b = Bound::from_vars(v[..np].to_vec());
            let (s, latent) = score_module_dense(g, v[np], &cell_index, cells, &w, &b)?;
            let fused = fuse_latent(g, v[np], latent, b[w.fuse_w], b[w.fuse_b])?;
            let sq = g.mul(fused, fused)?;
            let a = g.mean(sq)?;
            let c = g.sum(s)?;
            g.add(a, c)
        };
        assert_gradients("dense module", f, &inputs, seed);
    }
}

#[test]
fn mlp_module_and_fusion_gradcheck() {
    for seed in 0..10 {
        let mut r = rng::indexed(seed, "mlp_module", 0);
        let mut store = ParamStore::new();
        let w = MlpHaltWeights::register(&mut store, "m", 40, &mut r).unwrap();
        perturbed(&mut store, seed);
        let mut inputs = store.tensors().to_vec();
        inputs.push(randn(&[7, 40], 1.0, &mut r));
        inputs.push(randn(&[7, 3], 1.0, &mut r));
        inputs.push(randn(&[3, 40], 0.3, &mut r));
        inputs.push(randn(&[40], 0.3, &mut r));
        let proj = randn(&[7, 40], 1.0, &mut r);
        let f = |g: &mut Graph, v: &[Var]| {
            let b = Bound::from_vars(v[..2].to_vec());
            let s = score_module_mlp(g, v[2], &w, &b)?;
            let fused = fuse_latent(g, v[2], v[3], v[4], v[5])?;
            let p = g.constant(proj.clone());
            let y = g.mul(fused, p)?;
            let y = g.sum(y)?;
            let s = g.sum(s)?;
            g.add(y, s)
        };
        assert_gradients("mlp module", f, &inputs, seed);
    }
}

#[test]
fn zero_fusion_leaves_tokens_unchanged() {
    let mut r = rng::stream(1, "fusion");
    let mut g = Graph::new();
    let t = g.constant(randn(&[5, 4], 1.0, &mut r));
    let l = g.constant(randn(&[5, 2], 1.0, &mut r));
    let w = g.constant(Tensor::zeros(&[2, 4]));
    let b = g.constant(Tensor::zeros(&[4]));
    let out = fuse_latent(&mut g, t, l, w, b).unwrap();
    assert_eq!(g.value(out), g.value(t));
}
