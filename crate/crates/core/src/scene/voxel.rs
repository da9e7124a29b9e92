use std::collections::BTreeMap;

use super::{Point, Scene};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width of the pre-embedding token feature:
/// `[dx, dy, dz, mean r, mean t, n_points / 16]`.
pub const RAW_FEATURES: usize = 6;

/// Square BEV grid over `[0, extent)²` with a single pillar in z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub extent_m: f64,
    pub voxel_m: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            extent_m: 40.0,
            voxel_m: 0.5,
            z_min: -1.0,
            z_max: 3.0,
        }
    }
}

impl GridSpec {
    pub fn new(extent_m: f64, voxel_m: f64) -> Result<Self> {
        let g = Self {
            extent_m,
            voxel_m,
            ..Self::default()
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let ratio = self.extent_m / self.voxel_m;
        if !(self.extent_m > 0.0 && self.voxel_m > 0.0) || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "voxel size {} does not divide extent {}",
                self.voxel_m, self.extent_m
            )));
        }
        Ok(())
    }

    /// Cells per side.
    pub fn cells(&self) -> usize {
        (self.extent_m / self.voxel_m).round() as usize
    }

    pub fn n_cells(&self) -> usize {
        self.cells() * self.cells()
    }

    /// Cell `(x, y)` containing a planar position, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<[usize; 2]> {
        let n = self.cells() as f64;
        let cx = (x / self.voxel_m).floor();
        let cy = (y / self.voxel_m).floor();
        (cx >= 0.0 && cy >= 0.0 && cx < n && cy < n).then_some([cx as usize, cy as usize])
    }

    pub fn cell_center(&self, cell: [usize; 2]) -> (f64, f64) {
        (
            (cell[0] as f64 + 0.5) * self.voxel_m,
            (cell[1] as f64 + 0.5) * self.voxel_m,
        )
    }

    /// Row-major index `y * cells + x`.
    pub fn linear(&self, cell: [usize; 2]) -> usize {
        cell[1] * self.cells() + cell[0]
    }
}

/// Region ids and normalized within-region offsets for one grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionField {
    pub ids: Vec<usize>,
    /// `[n, 2]` offsets in `[-1, 1]`; zero at the region center.
    pub offsets: Tensor,
}

impl RegionField {
    /// Token indices grouped by region in ascending region id; within each
    /// group indices keep the order of `subset`.
    pub fn groups(&self, subset: &[usize]) -> Vec<Vec<usize>> {
        let mut by_region: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (pos, &i) in subset.iter().enumerate() {
            by_region.entry(self.ids[i]).or_default().push(pos);
        }
        by_region.into_values().collect()
    }
}

/// Occupied BEV cells as tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    pub grid: GridSpec,
    /// `[n, RAW_FEATURES]` pooled point statistics.
    pub raw: Tensor,
    /// `[n, d]` token features; equals `raw` until embedded.
    pub features: Tensor,
    /// `(x, y)` cell per token, unique, in row-major order.
    pub grid_coords: Vec<[usize; 2]>,
    pub n_points: Vec<usize>,
    pub region_size: usize,
    pub region_id: Vec<usize>,
    pub shifted_region_id: Vec<usize>,
    plain: RegionField,
    shifted: RegionField,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.grid_coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid_coords.is_empty()
    }

    /// Row-major BEV cell index per token.
    pub fn cell_indices(&self) -> Vec<usize> {
        self.grid_coords
            .iter()
            .map(|&c| self.grid.linear(c))
            .collect()
    }

    pub fn region_field(&self, shifted: bool) -> &RegionField {
        if shifted {
            &self.shifted
        } else {
            &self.plain
        }
    }

    /// Replaces `features` with `raw · w + b`.
    pub fn embed(&mut self, w: &Tensor, b: &Tensor) -> Result<()> {
        let mut f = self.raw.matmul(w)?;
        let d = b.len();
        for row in f.data_mut().chunks_mut(d) {
            for (v, bb) in row.iter_mut().zip(b.data()) {
                *v += bb;
            }
        }
        self.features = f;
        Ok(())
    }
}

fn cmp_points(a: &Point, b: &Point) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x)
        .then(a.y.total_cmp(&b.y))
        .then(a.z.total_cmp(&b.z))
        .then(a.r.total_cmp(&b.r))
        .then(a.t.total_cmp(&b.t))
}

/// Mean-pools points into one token per occupied cell. Points inside a cell
/// are summed in a canonical order, so the result does not depend on the
/// order of `scene.points`. Regions use the default size 7 until
/// [`assign_regions`] is called again.
pub fn voxelize(scene: &Scene, grid: &GridSpec) -> Result<TokenSet> {
    grid.validate()?;
    let mut cells: BTreeMap<usize, ([usize; 2], Vec<Point>)> = BTreeMap::new();
    for p in &scene.points {
        if p.z < grid.z_min || p.z > grid.z_max {
            continue;
        }
        if let Some(c) = grid.cell_of(p.x, p.y) {
            cells
                .entry(grid.linear(c))
                .or_insert((c, Vec::new()))
                .1
                .push(*p);
        }
    }
    let n = cells.len();
    let z_center = 0.5 * (grid.z_min + grid.z_max);
    let z_half = 0.5 * (grid.z_max - grid.z_min);
    let half = 0.5 * grid.voxel_m;
    let mut raw = Vec::with_capacity(n * RAW_FEATURES);
    let mut coords = Vec::with_capacity(n);
    let mut counts = Vec::with_capacity(n);
    for (_, (c, mut pts)) in cells {
        pts.sort_by(cmp_points);
        let k = pts.len() as f64;
        let (cx, cy) = grid.cell_center(c);
        let mut s = [0.0; 5];
        for p in &pts {
            s[0] += p.x;
            s[1] += p.y;
            s[2] += p.z;
            s[3] += p.r;
            s[4] += p.t;
        }
        raw.extend_from_slice(&[
            (s[0] / k - cx) / half,
            (s[1] / k - cy) / half,
            (s[2] / k - z_center) / z_half,
            s[3] / k,
            s[4] / k,
            k / 16.0,
        ]);
        coords.push(c);
        counts.push(pts.len());
    }
    let raw = Tensor::new(vec![n, RAW_FEATURES], raw)?;
    let mut tokens = TokenSet {
        grid: *grid,
        features: raw.clone(),
        raw,
        grid_coords: coords,
        n_points: counts,
        region_size: 0,
        region_id: Vec::new(),
        shifted_region_id: Vec::new(),
        plain: RegionField {
            ids: Vec::new(),
            offsets: Tensor::zeros(&[0, 2]),
        },
        shifted: RegionField {
            ids: Vec::new(),
            offsets: Tensor::zeros(&[0, 2]),
        },
    };
    assign_regions(&mut tokens, 7);
    Ok(tokens)
}

/// Region `(rx, ry)` of a cell; the shifted grouping first offsets the cell
/// by `floor(r / 2)`.
pub fn region_of(cell: [usize; 2], r: usize, shifted: bool) -> [usize; 2] {
    let s = if shifted { r / 2 } else { 0 };
    [(cell[0] + s) / r, (cell[1] + s) / r]
}

fn field(tokens: &TokenSet, r: usize, shifted: bool) -> RegionField {
    let s = if shifted { r / 2 } else { 0 };
    let per_row = (tokens.grid.cells() + s) / r + 1;
    let half = (r as f64 - 1.0) / 2.0;
    let mut ids = Vec::with_capacity(tokens.len());
    let mut off = Vec::with_capacity(tokens.len() * 2);
    for &c in &tokens.grid_coords {
        let [rx, ry] = region_of(c, r, shifted);
        ids.push(ry * per_row + rx);
        for (k, rk) in [rx, ry].into_iter().enumerate() {
            let o = (c[k] + s - rk * r) as f64;
            off.push(if r > 1 { (o - half) / half } else { 0.0 });
        }
    }
    let n = ids.len();
    RegionField {
        ids,
        offsets: Tensor::new(vec![n, 2], off).expect("offset shape"),
    }
}

/// Assigns both the plain and the shifted `r × r` grouping.
pub fn assign_regions(tokens: &mut TokenSet, r: usize) {
    let r = r.max(1);
    tokens.region_size = r;
    tokens.plain = field(tokens, r, false);
    tokens.shifted = field(tokens, r, true);
    tokens.region_id = tokens.plain.ids.clone();
    tokens.shifted_region_id = tokens.shifted.ids.clone();
}
