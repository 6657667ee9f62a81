//! Spatial primitives shared by training and rendering: the scene bounding
//! box, uniform-grid binning and the density to alpha conversion.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

pub type Vec3 = Vector3<f32>;

/// Axis-aligned box enclosing the scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f32; 3],
    pub max: [f32; 3],
}

impl Aabb {
    pub fn new(min: [f32; 3], max: [f32; 3]) -> Result<Self> {
        for axis in 0..3 {
            if !(min[axis] < max[axis]) || !min[axis].is_finite() || !max[axis].is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "aabb axis {axis}: min {} must be below max {}",
                    min[axis], max[axis]
                )));
            }
        }
        Ok(Self { min, max })
    }

    pub fn unit() -> Self {
        Self {
            min: [0.0; 3],
            max: [1.0; 3],
        }
    }

    pub fn min_v(&self) -> Vec3 {
        Vec3::from(self.min)
    }

    pub fn max_v(&self) -> Vec3 {
        Vec3::from(self.max)
    }

    pub fn extent(&self) -> Vec3 {
        self.max_v() - self.min_v()
    }

    pub fn center(&self) -> Vec3 {
        (self.min_v() + self.max_v()) * 0.5
    }

    pub fn diagonal(&self) -> f32 {
        self.extent().norm()
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        (0..3).all(|a| x[a] >= self.min[a] && x[a] <= self.max[a])
    }

    pub fn check_contains(&self, x: &Vec3) -> Result<()> {
        for axis in 0..3 {
            let value = x[axis];
            if !(value >= self.min[axis] && value <= self.max[axis]) {
                return Err(Error::OutOfBounds {
                    axis,
                    value,
                    min: self.min[axis],
                    max: self.max[axis],
                });
            }
        }
        Ok(())
    }

    /// Slab-method intersection of a ray with the box. Returns the parametric
    /// interval `[t_near, t_far]` clipped to `t >= 0`, or `None` on a miss.
    pub fn intersect(&self, origin: &Vec3, direction: &Vec3) -> Option<(f32, f32)> {
        let mut t_near = 0.0f32;
        let mut t_far = f32::INFINITY;
        for axis in 0..3 {
            let o = origin[axis];
            let d = direction[axis];
            if d.abs() < 1e-12 {
                if o < self.min[axis] || o > self.max[axis] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let mut t0 = (self.min[axis] - o) * inv;
            let mut t1 = (self.max[axis] - o) * inv;
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_near = t_near.max(t0);
            t_far = t_far.min(t1);
            if t_near > t_far {
                return None;
            }
        }
        (t_far > t_near).then_some((t_near, t_far))
    }
}

/// Number of cells per axis of a uniform grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridResolution(pub [usize; 3]);

impl GridResolution {
    pub fn new(r: [usize; 3]) -> Result<Self> {
        if r.iter().any(|&c| c == 0) {
            return Err(Error::InvalidConfig(format!(
                "grid resolution {r:?} has an empty axis"
            )));
        }
        Ok(Self(r))
    }

    pub fn cube(n: usize) -> Self {
        Self([n, n, n])
    }

    pub fn cell_count(&self) -> usize {
        self.0.iter().product()
    }

    pub fn scaled(&self, factor: usize) -> Self {
        Self(self.0.map(|c| c * factor))
    }

    /// x-major flattening (`i_x` varies fastest).
    pub fn flatten(&self, cell: CellIndex) -> usize {
        let [rx, ry, _] = self.0;
        cell.0[0] + rx * (cell.0[1] + ry * cell.0[2])
    }

    pub fn unflatten(&self, flat: usize) -> CellIndex {
        let [rx, ry, _] = self.0;
        CellIndex([flat % rx, (flat / rx) % ry, flat / (rx * ry)])
    }

    pub fn cells(&self) -> impl Iterator<Item = CellIndex> + '_ {
        (0..self.cell_count()).map(|f| self.unflatten(f))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex(pub [usize; 3]);

/// Uniform binning of `x` into the cells of `r` over `aabb`. Points on the
/// upper face belong to the last cell.
pub fn bin_point(x: &Vec3, aabb: &Aabb, r: GridResolution) -> Result<CellIndex> {
    aabb.check_contains(x)?;
    Ok(bin_clamped(x, aabb, r))
}

/// Binning without the bounds check; points outside the box are clamped onto
/// the nearest boundary cell.
#[inline]
pub fn bin_clamped(x: &Vec3, aabb: &Aabb, r: GridResolution) -> CellIndex {
    let mut out = [0usize; 3];
    for axis in 0..3 {
        let n = r.0[axis];
        let width = (aabb.max[axis] - aabb.min[axis]) / n as f32;
        let f = ((x[axis] - aabb.min[axis]) / width).floor();
        out[axis] = if f <= 0.0 {
            0
        } else {
            (f as usize).min(n - 1)
        };
    }
    CellIndex(out)
}

/// World-space bounds of one cell.
pub fn cell_bounds(cell: CellIndex, aabb: &Aabb, r: GridResolution) -> Aabb {
    let mut min = [0.0; 3];
    let mut max = [0.0; 3];
    for axis in 0..3 {
        let width = (aabb.max[axis] - aabb.min[axis]) / r.0[axis] as f32;
        min[axis] = aabb.min[axis] + cell.0[axis] as f32 * width;
        max[axis] = if cell.0[axis] + 1 == r.0[axis] {
            aabb.max[axis]
        } else {
            aabb.min[axis] + (cell.0[axis] + 1) as f32 * width
        };
    }
    Aabb { min, max }
}

pub fn cell_center(cell: CellIndex, aabb: &Aabb, r: GridResolution) -> Vec3 {
    cell_bounds(cell, aabb, r).center()
}

/// Per-segment opacity `1 - exp(-sigma * delta)`.
#[inline]
pub fn density_to_alpha<T: Real>(sigma: T, delta: T) -> T {
    -(-(sigma * delta)).exp_m1()
}
