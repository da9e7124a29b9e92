use super::{BBox, GridSpec, TokenSet};

/// Threshold below 1 at which a heatmap cell counts as an object center.
pub const POSITIVE_EPS: f64 = 1e-4;

/// Class-agnostic center heatmap over the BEV grid (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub cells: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn at(&self, cell: [usize; 2]) -> f64 {
        self.values[cell[1] * self.cells + cell[0]]
    }

    /// Row-major indices with `m >= 1 - eps`.
    pub fn positives(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &m)| m >= 1.0 - POSITIVE_EPS)
            .map(|(i, _)| i)
            .collect()
    }

    /// Heatmap value per token.
    pub fn for_tokens(&self, tokens: &TokenSet) -> Vec<f64> {
        tokens.grid_coords.iter().map(|&c| self.at(c)).collect()
    }
}

/// Gaussian of the planar distance to the box center for cells whose
/// center lies inside the footprint, `σ = sigma_fraction · diagonal`. The
/// cell holding the box center is pinned to exactly 1. Overlaps and classes
/// reduce by elementwise max.
pub fn build_heatmap(boxes: &[BBox], grid: &GridSpec, sigma_fraction: f64) -> Heatmap {
    let n = grid.cells();
    let mut values = vec![0.0f64; n * n];
    for b in boxes {
        let sigma = sigma_fraction * b.planar_diagonal();
        let reach = 0.5 * b.planar_diagonal();
        let lo_x = ((b.lx - reach) / grid.voxel_m).floor().max(0.0) as usize;
        let lo_y = ((b.ly - reach) / grid.voxel_m).floor().max(0.0) as usize;
        let hi_x = (((b.lx + reach) / grid.voxel_m).ceil() as usize).min(n.saturating_sub(1));
        let hi_y = (((b.ly + reach) / grid.voxel_m).ceil() as usize).min(n.saturating_sub(1));
        for cy in lo_y..=hi_y {
            for cx in lo_x..=hi_x {
                let (x, y) = grid.cell_center([cx, cy]);
                if !b.contains_xy(x, y) {
                    continue;
                }
                let d2 = (x - b.lx).powi(2) + (y - b.ly).powi(2);
                let m = (-d2 / (2.0 * sigma * sigma)).exp();
                let slot = &mut values[cy * n + cx];
                *slot = slot.max(m);
            }
        }
        if let Some(c) = grid.cell_of(b.lx, b.ly) {
            values[grid.linear(c)] = 1.0;
        }
    }
    Heatmap { cells: n, values }
}

/// Foreground iff the token's cell center lies in some box footprint.
pub fn classify_tokens_fg_bg(tokens: &TokenSet, boxes: &[BBox]) -> Vec<bool> {
    tokens
        .grid_coords
        .iter()
        .map(|&c| {
            let (x, y) = tokens.grid.cell_center(c);
            boxes.iter().any(|b| b.contains_xy(x, y))
        })
        .collect()
}
