//! Sweep driver on the toy model.

use tokenhalt::diagnostics::toy_config;
use tokenhalt::sweep::{run_sweep, write_sweep_csv, SweepConfig, SweepPoint};
use tokenhalt::trainer::TrainConfig;

fn base() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        scenes_per_epoch: 4,
        objects_per_scene: 2,
        clusters_per_scene: 2,
        model: toy_config(),
        ..TrainConfig::default()
    }
}

fn small(points: Vec<SweepPoint>, finetune_steps: usize) -> SweepConfig {
    SweepConfig {
        points,
        finetune_steps,
        heldout_scenes: 4,
        ..SweepConfig::new(base(), &[], (0.0, 1.0))
    }
}

#[test]
fn pinned_fractions_order_the_speedups() {
    let fractions = [0.0, 0.3, 0.6, 0.9];
    let mut points = vec![SweepPoint {
        u: None,
        bounds: vec![(0.0, 1.0); 2],
    }];
    points.extend(fractions.iter().rev().map(|&a| SweepPoint {
        u: Some(0.5),
        bounds: vec![(a, a), (0.0, 0.0)],
    }));
    let rows = run_sweep(&small(points, 2)).unwrap();
    // off and 0.0 tie at 1.0 and keep grid order, then 0.3, 0.6, 0.9
    assert_eq!(rows[0].point.u, None);
    assert_eq!(rows[0].speedup, 1.0);
    assert_eq!(rows[0].observed_flops, rows[0].dense_flops);
    for (row, &a) in rows[1..].iter().zip(&fractions) {
        assert_eq!(row.point.bounds[0].0, a);
    }
    assert!(rows.windows(2).skip(1).all(|w| w[1].speedup > w[0].speedup));
    assert!(rows[1..]
        .windows(2)
        .all(|w| w[1].sparsity[0] >= w[0].sparsity[0]));
    assert!(rows.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn larger_u_halts_more_at_the_first_module() {
    let grid: Vec<Option<f64>> = [0.0, 0.05, 0.2, 0.6, 1.1]
        .iter()
        .map(|&u| Some(u))
        .collect();
    let cfg = SweepConfig {
        finetune_steps: 0,
        heldout_scenes: 4,
        ..SweepConfig::new(base(), &grid, (0.0, 1.0))
    };
    let mut rows = run_sweep(&cfg).unwrap();
    rows.sort_by(|a, b| a.point.u.partial_cmp(&b.point.u).unwrap());
    assert_eq!(rows[0].sparsity[0], 0.0);
    assert_eq!(rows[4].sparsity[0], 1.0);
    assert!(rows
        .windows(2)
        .all(|w| w[1].sparsity[0] >= w[0].sparsity[0]));
}

#[test]
fn csv_and_errors() {
    let rows = run_sweep(&small(
        vec![
            SweepPoint {
                u: Some(0.1),
                bounds: vec![(0.2, 0.5); 2],
            },
            SweepPoint {
                u: None,
                bounds: vec![(0.0, 1.0); 2],
            },
        ],
        0,
    ))
    .unwrap();
    let mut buf = Vec::new();
    write_sweep_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    let cols = lines[0].split(',').count();
    assert!(lines.iter().all(|l| l.split(',').count() == cols));
    assert!(lines[1].starts_with("off,"));

    assert!(run_sweep(&small(Vec::new(), 0)).is_err());
    let bad = SweepPoint {
        u: Some(0.1),
        bounds: vec![(0.7, 0.2); 2],
    };
    assert!(run_sweep(&small(vec![bad], 0)).is_err());
}

#[test]
fn sweep_is_deterministic() {
    let grid = [Some(0.05), Some(0.2)];
    let cfg = SweepConfig {
        finetune_steps: 2,
        heldout_scenes: 3,
        ..SweepConfig::new(base(), &grid, (0.0, 0.95))
    };
    assert_eq!(run_sweep(&cfg).unwrap(), run_sweep(&cfg).unwrap());
}
