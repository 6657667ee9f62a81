//! Binary occupancy grid used for empty-space skipping.

use rayon::prelude::*;

use crate::batched::grouped_density;
use crate::error::{Error, Result};
use crate::field::{bin_clamped, bin_point, Aabb, CellIndex, GridResolution, Vec3};
use crate::grid::NetworkGrid;

/// Density threshold for marking a cell occupied.
pub const DEFAULT_TAU: f32 = 10.0;
/// Occupancy resolution relative to the network grid.
pub const OCCUPANCY_MULTIPLIER: usize = 16;
pub const MAX_OCCUPANCY_DIM: usize = 256;

/// Anything that can report densities at a batch of points.
pub trait DensityField: Sync {
    fn densities(&self, points: &[Vec3]) -> Result<Vec<f32>>;
}

impl DensityField for NetworkGrid<f32> {
    fn densities(&self, points: &[Vec3]) -> Result<Vec<f32>> {
        grouped_density(self, points)
    }
}

/// Adapts a pointwise closure.
pub struct FnDensity<F>(pub F);

impl<F: Fn(&Vec3) -> f32 + Sync> DensityField for FnDensity<F> {
    fn densities(&self, points: &[Vec3]) -> Result<Vec<f32>> {
        Ok(points.par_iter().map(&self.0).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub aabb: Aabb,
    pub resolution: GridResolution,
    words: Vec<u64>,
}

impl OccupancyGrid {
    pub fn empty(aabb: Aabb, resolution: GridResolution) -> Result<Self> {
        if let Some(&r) = resolution.0.iter().find(|&&r| r == 0 || r > MAX_OCCUPANCY_DIM) {
            return Err(Error::InvalidConfig(format!(
                "occupancy resolution {r} outside 1..={MAX_OCCUPANCY_DIM}"
            )));
        }
        let words = vec![0; resolution.cell_count().div_ceil(64)];
        Ok(Self {
            aabb,
            resolution,
            words,
        })
    }

    pub fn full(aabb: Aabb, resolution: GridResolution) -> Result<Self> {
        let mut g = Self::empty(aabb, resolution)?;
        for i in 0..g.len() {
            g.set(i, true);
        }
        Ok(g)
    }

    /// Rebuilds a grid from its packed words (bit `i` is bit `i % 64` of word `i / 64`).
    pub fn from_words(aabb: Aabb, resolution: GridResolution, words: Vec<u64>) -> Result<Self> {
        let mut g = Self::empty(aabb, resolution)?;
        if words.len() != g.words.len() {
            return Err(Error::DimensionMismatch {
                what: "occupancy words",
                expected: g.words.len(),
                got: words.len(),
            });
        }
        let tail = g.len() % 64;
        if tail != 0 && words[words.len() - 1] >> tail != 0 {
            return Err(Error::Checkpoint("occupancy bitmap has bits past the last cell".into()));
        }
        g.words = words;
        Ok(g)
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Number of cells.
    pub fn len(&self) -> usize {
        self.resolution.cell_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        let mask = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn cell_occupied(&self, cell: CellIndex) -> bool {
        self.get(self.resolution.flatten(cell))
    }

    pub fn is_occupied(&self, x: &Vec3) -> Result<bool> {
        Ok(self.cell_occupied(bin_point(x, &self.aabb, self.resolution)?))
    }

    /// Lookup for points that may sit a rounding error outside the box.
    #[inline]
    pub fn is_occupied_clamped(&self, x: &Vec3) -> bool {
        self.cell_occupied(bin_clamped(x, &self.aabb, self.resolution))
    }
}

/// Planes of probe lattice evaluated per field call.
const PLANES_PER_CALL: usize = 4;

/// Marks a cell occupied when any of its 3x3x3 probes exceeds `tau`. Probes
/// span the closed cell, so neighbouring cells share their face probes. The
/// probe lattice is walked plane by plane along z to bound memory.
pub fn extract_occupancy(
    field: &dyn DensityField,
    aabb: &Aabb,
    resolution: GridResolution,
    tau: f32,
) -> Result<OccupancyGrid> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidConfig(format!("occupancy threshold {tau} must be >= 0")));
    }
    let mut grid = OccupancyGrid::empty(*aabb, resolution)?;
    let [rx, ry, rz] = resolution.0;
    let (nx, ny, nz) = (2 * rx + 1, 2 * ry + 1, 2 * rz + 1);
    let coord = |axis: usize, a: usize, n: usize| {
        aabb.min[axis] + (aabb.max[axis] - aabb.min[axis]) * (a as f32 / (n - 1) as f32)
    };
    let xs: Vec<f32> = (0..nx).map(|a| coord(0, a, nx)).collect();
    let ys: Vec<f32> = (0..ny).map(|b| coord(1, b, ny)).collect();

    // Max over each cell's 3x3 probe window within one lattice plane.
    let window_max = |plane: &[f32]| -> Vec<f32> {
        let mut out = vec![f32::NEG_INFINITY; rx * ry];
        for j in 0..ry {
            for i in 0..rx {
                let mut m = f32::NEG_INFINITY;
                for b in 2 * j..2 * j + 3 {
                    for a in 2 * i..2 * i + 3 {
                        m = m.max(plane[a + nx * b]);
                    }
                }
                out[i + rx * j] = m;
            }
        }
        out
    };

    let mut layer = vec![f32::NEG_INFINITY; rx * ry];
    let mut c = 0;
    while c < nz {
        let planes = (nz - c).min(PLANES_PER_CALL);
        let mut points = Vec::with_capacity(planes * nx * ny);
        for p in c..c + planes {
            let z = coord(2, p, nz);
            for &y in &ys {
                for &x in &xs {
                    points.push(Vec3::new(x, y, z));
                }
            }
        }
        let sigma = field.densities(&points)?;
        if sigma.len() != points.len() {
            return Err(Error::DimensionMismatch {
                what: "field densities",
                expected: points.len(),
                got: sigma.len(),
            });
        }
        for (p, plane) in (c..c + planes).zip(sigma.chunks(nx * ny)) {
            let wm = window_max(plane);
            for (l, w) in layer.iter_mut().zip(&wm) {
                *l = l.max(*w);
            }
            // Plane 2k+2 closes layer k and opens layer k+1.
            if p % 2 == 0 && p > 0 {
                let k = p / 2 - 1;
                for (ij, &m) in layer.iter().enumerate() {
                    if m > tau {
                        grid.set(ij + rx * ry * k, true);
                    }
                }
                layer = wm;
            }
        }
        c += planes;
    }
    Ok(grid)
}
