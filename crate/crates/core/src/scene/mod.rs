//! Synthetic scenes, voxelization into BEV tokens, regional grouping, and
//! ground-truth heatmaps.

mod generate;
mod heatmap;
mod io;
mod voxel;

pub use generate::{generate_scene, generate_scene_with, SceneParams};
pub use heatmap::{build_heatmap, classify_tokens_fg_bg, Heatmap, POSITIVE_EPS};
pub use io::{read_scene, read_scene_file, write_scene, write_scene_file};
pub use voxel::{
    assign_regions, region_of, voxelize, GridSpec, RegionField, TokenSet, RAW_FEATURES,
};

/// One LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Intensity in `[0, 1]`.
    pub r: f64,
    /// Elongation in `[0, 1]`.
    pub t: f64,
}

/// Oriented 3D box: center, dimensions and heading about +z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub lx: f64,
    pub ly: f64,
    pub lz: f64,
    pub wx: f64,
    pub wy: f64,
    pub wz: f64,
    /// Heading in `[-π, π)`.
    pub alpha: f64,
    pub class_id: u32,
}

impl BBox {
    /// Exact point-in-rotated-rectangle test on the footprint.
    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.lx, y - self.ly);
        let (s, c) = self.alpha.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= 0.5 * self.wx && v.abs() <= 0.5 * self.wy
    }

    pub fn planar_diagonal(&self) -> f64 {
        self.wx.hypot(self.wy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub extent_m: f64,
    pub points: Vec<Point>,
    pub boxes: Vec<BBox>,
}

impl Scene {
    /// Number of points whose footprint lies inside `b`.
    pub fn points_in(&self, b: &BBox) -> usize {
        self.points
            .iter()
            .filter(|p| b.contains_xy(p.x, p.y))
            .count()
    }
}
