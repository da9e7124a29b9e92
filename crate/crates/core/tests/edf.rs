//! Training and inference passes: recycling partition, provenance, the
//! recycling sum re-evaluated from the trace, and train/infer equivalence.

use tokenhalt::backbone::LayerSpec;
use tokenhalt::edf::{
    assemble_bev, check_equivalence, infer_forward, train_forward, PassOptions, PassTrace,
};
use tokenhalt::halting::{compare_records, HaltConfig};
use tokenhalt::model::{Model, ModelConfig};
use tokenhalt::rng;
use tokenhalt::scene::{assign_regions, generate_scene, voxelize, GridSpec, Scene, TokenSet};
use tokenhalt::Error;

use rand::Rng as _;

fn small_config(n_layers: usize, halt_layers: Vec<usize>) -> ModelConfig {
    ModelConfig {
        layers: LayerSpec {
            pe_hidden: 4,
            ..LayerSpec::alternating(n_layers, 2, 8, 16)
        },
        grid: GridSpec::new(8.0, 0.5).unwrap(),
        region_size: 4,
        module1_channels: 2,
        head_channels: 4,
        halt_layers,
    }
}

fn tokens_for(cfg: &ModelConfig, seed: u64, objects: usize) -> TokenSet {
    let scene = generate_scene(seed, objects, 2, cfg.grid.extent_m);
    let mut t = voxelize(&scene, &cfg.grid).unwrap();
    assign_regions(&mut t, cfg.region_size);
    t
}

fn golden(cfg: &ModelConfig) -> TokenSet {
    let mut t = voxelize(&generate_scene(7, 3, 2, 40.0), &cfg.grid).unwrap();
    assign_regions(&mut t, cfg.region_size);
    t
}

/// Cumulative masks `k_{0:l}` for `l = 0..=L+1` rebuilt from the records.
fn cumulative_masks(trace: &PassTrace) -> Vec<Vec<bool>> {
    let n = trace.n_tokens;
    let layers = trace.layers.len();
    let mut cum = vec![vec![true; n]];
    for l in 0..layers {
        let next = match trace.records.iter().find(|r| r.layer == l) {
            Some(r) => r.cumulative.clone(),
            None => cum[l].clone(),
        };
        cum.push(next);
    }
    cum.push(vec![false; n]);
    cum
}

fn check_partition(trace: &PassTrace, provenance: &[usize], cells: &[usize], label: &str) {
    let cum = cumulative_masks(trace);
    for i in 0..trace.n_tokens {
        let diffs: Vec<i32> = (1..cum.len())
            .map(|l| cum[l - 1][i] as i32 - cum[l][i] as i32)
            .collect();
        assert!(
            diffs.iter().all(|&d| d >= 0),
            "{label}: token {i} re-activated"
        );
        assert_eq!(diffs.iter().sum::<i32>(), 1, "{label}: token {i}");
        let halt = diffs.iter().position(|&d| d == 1).unwrap() + 1;
        assert_eq!(trace.halt_layer[i], halt, "{label}: token {i}");
        assert_eq!(provenance[cells[i]], halt, "{label}: token {i}");
    }
}

#[test]
fn telescoping_partition_over_random_schedules() {
    let cfg = small_config(4, vec![0, 1, 3]);
    let mut r = rng::stream(11, "schedules");
    for k in 0..1000u64 {
        let model = Model::new(cfg.clone(), k % 7).unwrap();
        let tokens = tokens_for(&cfg, k, 1 + (k % 3) as usize);
        let fractions: Vec<f64> = (0..3)
            .map(|_| match r.random_range(0..4) {
                0 => 0.0,
                1 => 1.0,
                _ => r.random_range(0.0..1.0),
            })
            .collect();
        let opts = PassOptions::with_halt(HaltConfig::fixed_fractions(&fractions));
        let cells = tokens.cell_indices();
        let (bev, trace) = infer_forward(&model, &tokens, &opts).unwrap();
        check_partition(
            &trace,
            &bev.provenance,
            &cells,
            &format!("infer schedule {k}"),
        );
        if k % 10 == 0 {
            let (bev, trace) = train_forward(&model, &tokens, &opts).unwrap();
            check_partition(
                &trace,
                &bev.provenance,
                &cells,
                &format!("train schedule {k}"),
            );
        }
    }
}

#[test]
fn recycling_sum_matches_bev_exactly() {
    let cfg = ModelConfig::default();
    let tokens = golden(&cfg);
    let model = Model::new(cfg.clone(), 0).unwrap();
    for opts in [
        PassOptions::default(),
        PassOptions {
            recycle: false,
            ..PassOptions::default()
        },
    ] {
        let (bev, trace) = train_forward(&model, &tokens, &opts).unwrap();
        let by_hand = assemble_bev(&trace, &tokens.cell_indices(), opts.recycle).unwrap();
        assert_eq!(by_hand, bev.features, "recycle {}", opts.recycle);
    }
}

#[test]
fn no_halting_writes_final_layer_only() {
    let cfg = small_config(2, vec![0, 1]);
    let tokens = tokens_for(&cfg, 3, 2);
    let model = Model::new(cfg.clone(), 1).unwrap();
    let (train, tt) = train_forward(&model, &tokens, &PassOptions::no_halting()).unwrap();
    let (infer, _) = infer_forward(&model, &tokens, &PassOptions::no_halting()).unwrap();
    let cells = tokens.cell_indices();
    for (i, &c) in cells.iter().enumerate() {
        assert_eq!(train.provenance[c], 3);
        let d = cfg.layers.d_model;
        assert_eq!(
            &train.features.data()[c * d..(c + 1) * d],
            tt.features[2].row(i)
        );
    }
    assert!(train.max_abs_diff(&infer) < 1e-12);
}

#[test]
fn halting_everything_at_module_one() {
    let cfg = small_config(2, vec![0, 1]);
    let tokens = tokens_for(&cfg, 4, 2);
    let model = Model::new(cfg.clone(), 2).unwrap();
    let opts = PassOptions::with_halt(HaltConfig::fixed_fractions(&[1.0, 0.0]));
    let (bev, trace) = infer_forward(&model, &tokens, &opts).unwrap();
    assert!(trace.layers.iter().all(|l| l.survivors.is_empty()));
    // the training pass keeps every row, so its layer-1 input is the reference
    let (_, tt) = train_forward(&model, &tokens, &opts).unwrap();
    for (i, &c) in tokens.cell_indices().iter().enumerate() {
        assert_eq!(bev.provenance[c], 1);
        let d = cfg.layers.d_model;
        assert_eq!(
            &bev.features.data()[c * d..(c + 1) * d],
            tt.features[0].row(i)
        );
    }
    assert!(check_equivalence(&model, &tokens, &opts).unwrap() < 1e-9);
}

#[test]
fn passes_agree_across_seeds_and_options() {
    let cfg = ModelConfig::default();
    let options = [
        PassOptions::default(),
        PassOptions::no_halting(),
        PassOptions {
            recycle: false,
            ..PassOptions::default()
        },
        PassOptions::with_halt(HaltConfig::unclamped(0.5, 2)),
    ];
    for seed in 0..8u64 {
        let model = Model::new(cfg.clone(), seed).unwrap();
        let scene = generate_scene(1000 + seed, 3, 2, 40.0);
        let mut tokens = voxelize(&scene, &cfg.grid).unwrap();
        assign_regions(&mut tokens, cfg.region_size);
        let opts = &options[seed as usize % options.len()];
        let diff = check_equivalence(&model, &tokens, opts).unwrap();
        assert!(diff < 1e-9, "seed {seed}: {diff}");
    }
}

#[test]
fn corrupted_survivor_set_is_reported() {
    let cfg = small_config(2, vec![0, 1]);
    let tokens = tokens_for(&cfg, 5, 2);
    let model = Model::new(cfg.clone(), 3).unwrap();
    let opts = PassOptions::with_halt(HaltConfig::fixed_fractions(&[0.5, 0.5]));
    let (_, tt) = train_forward(&model, &tokens, &opts).unwrap();
    let (_, mut ti) = infer_forward(&model, &tokens, &opts).unwrap();
    compare_records(&tt.records, &ti.records).unwrap();
    // keep one token the inference pass halted
    let rec = &mut ti.records[1];
    let i = (0..rec.mask.len())
        .find(|&i| rec.active[i] && !rec.mask[i])
        .unwrap();
    rec.mask[i] = true;
    rec.cumulative[i] = true;
    match compare_records(&tt.records, &ti.records) {
        Err(Error::HaltMismatch { layer, token, .. }) => {
            assert_eq!(layer, 1);
            assert_eq!(token, i);
        }
        other => panic!("expected a mismatch, got {other:?}"),
    }
}

#[test]
fn empty_scene_passes() {
    let cfg = small_config(2, vec![0, 1]);
    let scene = Scene {
        seed: 0,
        extent_m: 8.0,
        points: Vec::new(),
        boxes: Vec::new(),
    };
    let mut tokens = voxelize(&scene, &cfg.grid).unwrap();
    assert!(tokens.is_empty());
    assign_regions(&mut tokens, cfg.region_size);
    let model = Model::new(cfg, 0).unwrap();
    assert_eq!(
        check_equivalence(&model, &tokens, &PassOptions::default()).unwrap(),
        0.0
    );
}
