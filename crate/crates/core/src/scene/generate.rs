use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{BBox, Point, Scene};
use crate::rng::{self, Rng};

/// Knobs for [`generate_scene_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub n_objects: usize,
    pub n_background_clusters: usize,
    pub extent_m: f64,
    pub ground_points: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            n_objects: 4,
            n_background_clusters: 3,
            extent_m: 40.0,
            ground_points: 400,
        }
    }
}

/// Scene over `[0, extent)²` with the default ground density.
pub fn generate_scene(
    seed: u64,
    n_objects: usize,
    n_background_clusters: usize,
    extent_m: f64,
) -> Scene {
    generate_scene_with(
        seed,
        &SceneParams {
            n_objects,
            n_background_clusters,
            extent_m,
            ..SceneParams::default()
        },
    )
}

pub fn generate_scene_with(seed: u64, params: &SceneParams) -> Scene {
    let e = params.extent_m;
    let mut points = Vec::new();

    let mut rng = rng::stream(seed, "scene.ground");
    let ground_z = Normal::new(0.0, 0.05).expect("valid normal");
    for _ in 0..params.ground_points {
        points.push(Point {
            x: rng.random_range(0.0..e),
            y: rng.random_range(0.0..e),
            z: f64::clamp(ground_z.sample(&mut rng), -0.3, 0.3),
            r: rng.random_range(0.0..0.25),
            t: rng.random_range(0.0..0.15),
        });
    }

    let mut rng = rng::stream(seed, "scene.objects");
    let boxes = place_boxes(&mut rng, params.n_objects, e);
    for b in &boxes {
        object_points(&mut rng, b, &mut points);
    }

    let mut rng = rng::stream(seed, "scene.clusters");
    for _ in 0..params.n_background_clusters {
        cluster_points(&mut rng, e, &boxes, &mut points);
    }

    Scene {
        seed,
        extent_m: e,
        points,
        boxes,
    }
}

fn sample_dims(rng: &mut Rng, class_id: u32) -> (f64, f64, f64) {
    match class_id {
        0 => (
            rng.random_range(4.0..5.0),
            rng.random_range(1.8..2.1),
            rng.random_range(1.4..1.8),
        ),
        1 => (
            rng.random_range(0.6..1.0),
            rng.random_range(0.6..1.0),
            rng.random_range(1.6..1.9),
        ),
        _ => (
            rng.random_range(1.6..2.0),
            rng.random_range(0.6..0.9),
            rng.random_range(1.5..1.8),
        ),
    }
}

fn place_boxes(rng: &mut Rng, n: usize, e: f64) -> Vec<BBox> {
    let mut boxes: Vec<BBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let c: f64 = rng.random();
        let class_id = if c < 0.6 {
            0
        } else if c < 0.85 {
            1
        } else {
            2
        };
        let (wx, wy, wz) = sample_dims(rng, class_id);
        let half_diag = 0.5 * wx.hypot(wy);
        let margin = half_diag + 0.5;
        if 2.0 * margin >= e {
            continue;
        }
        for _attempt in 0..200 {
            let lx = rng.random_range(margin..e - margin);
            let ly = rng.random_range(margin..e - margin);
            let free = boxes.iter().all(|o| {
                (o.lx - lx).hypot(o.ly - ly) > half_diag + 0.5 * o.planar_diagonal() + 0.5
            });
            if free {
                boxes.push(BBox {
                    lx,
                    ly,
                    lz: 0.5 * wz,
                    wx,
                    wy,
                    wz,
                    alpha: rng.random_range(-PI..PI),
                    class_id,
                });
                break;
            }
        }
    }
    boxes
}

/// Uniform interior points plus a surface-biased shell.
fn object_points(rng: &mut Rng, b: &BBox, out: &mut Vec<Point>) {
    let n = 30 + (20.0 * b.wx * b.wy).round() as usize;
    let (hx, hy, hz) = (0.49 * b.wx, 0.49 * b.wy, 0.5 * b.wz);
    let side_x = b.wy * b.wz;
    let side_y = b.wx * b.wz;
    let top = b.wx * b.wy;
    let total = 2.0 * side_x + 2.0 * side_y + top;
    let (s, c) = b.alpha.sin_cos();
    for _ in 0..n {
        let mut u = rng.random_range(-hx..hx);
        let mut v = rng.random_range(-hy..hy);
        let mut w = rng.random_range(0.0..2.0 * hz);
        if rng.random::<f64>() < 0.7 {
            let f = rng.random_range(0.0..total);
            if f < 2.0 * side_x {
                u = if f < side_x { -hx } else { hx };
            } else if f < 2.0 * side_x + 2.0 * side_y {
                v = if f < 2.0 * side_x + side_y { -hy } else { hy };
            } else {
                w = 2.0 * hz;
            }
        }
        out.push(Point {
            x: b.lx + c * u - s * v,
            y: b.ly + s * u + c * v,
            z: w,
            r: rng.random_range(0.45..1.0),
            t: rng.random_range(0.0..0.3),
        });
    }
}

/// Wall-like slabs or foliage-like blobs that avoid object footprints.
fn cluster_points(rng: &mut Rng, e: f64, boxes: &[BBox], out: &mut Vec<Point>) {
    let cx = rng.random_range(0.0..e);
    let cy = rng.random_range(0.0..e);
    let wall = rng.random::<f64>() < 0.5;
    let mut candidates = Vec::new();
    if wall {
        let len = rng.random_range(4.0..10.0);
        let theta = rng.random_range(-PI..PI);
        let height = rng.random_range(2.0..4.0);
        let (s, c) = f64::sin_cos(theta);
        for _ in 0..150 {
            let a = rng.random_range(-0.5 * len..0.5 * len);
            let b = rng.random_range(-0.15..0.15);
            candidates.push((
                cx + c * a - s * b,
                cy + s * a + c * b,
                rng.random_range(0.0..height),
            ));
        }
    } else {
        let sigma = rng.random_range(0.8..1.5);
        let height = rng.random_range(1.0..3.0);
        let spread = Normal::new(0.0, sigma).expect("valid normal");
        for _ in 0..120 {
            let dx = spread.sample(rng);
            let dy = spread.sample(rng);
            candidates.push((cx + dx, cy + dy, rng.random_range(0.0..height)));
        }
    }
    for (x, y, z) in candidates {
        let r = rng.random_range(0.05..0.5);
        let t = rng.random_range(0.3..1.0);
        let inside = (0.0..e).contains(&x) && (0.0..e).contains(&y);
        if inside && !boxes.iter().any(|b| b.contains_xy(x, y)) {
            out.push(Point { x, y, z, r, t });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_is_ground_only() {
        let s = generate_scene(7, 0, 0, 40.0);
        assert!(s.boxes.is_empty());
        assert_eq!(s.points.len(), SceneParams::default().ground_points);
        assert!(s.points.iter().all(|p| p.z.abs() <= 0.3));
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_scene(11, 5, 3, 40.0);
        let b = generate_scene(11, 5, 3, 40.0);
        assert_eq!(a, b);
        let c = generate_scene(12, 5, 3, 40.0);
        assert_ne!(a, c);
    }

    #[test]
    fn everything_inside_extent() {
        for seed in 0..20 {
            let s = generate_scene(seed, 6, 4, 40.0);
            for p in &s.points {
                assert!((0.0..40.0).contains(&p.x) && (0.0..40.0).contains(&p.y));
                assert!((0.0..=1.0).contains(&p.r) && (0.0..=1.0).contains(&p.t));
            }
            for b in &s.boxes {
                assert!((0.0..40.0).contains(&b.lx) && (0.0..40.0).contains(&b.ly));
                assert!(b.wx > 0.0 && b.wy > 0.0 && b.wz > 0.0);
                assert!((-PI..PI).contains(&b.alpha));
            }
        }
    }
}
