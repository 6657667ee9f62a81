//! Analytic scenes with closed-form density and color, used as ground truth.
//!
//! Primitives have constant interior density that fades to zero across a
//! thin shell straddling the surface (a C2 smootherstep), so every scene has
//! compact support and quadrature converges quickly. Colors get mild
//! Lambertian shading; an optional specular term makes them view-dependent.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batched::QueryBatch;
use crate::error::{Error, Result};
use crate::field::{cell_bounds, Aabb, GridResolution, Vec3};
use crate::occupancy::{DensityField, OccupancyGrid};
use crate::render::RadianceField;
use crate::rng::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: [f32; 3], radius: f32 },
    Box { min: [f32; 3], max: [f32; 3] },
}

impl Shape {
    /// Signed distance (negative inside) and outward normal.
    fn distance(&self, x: &Vec3) -> (f32, Vec3) {
        match self {
            Shape::Sphere { center, radius } => {
                let v = x - Vec3::from(*center);
                let n = v.norm();
                let normal = if n > 0.0 { v / n } else { Vec3::z() };
                (n - radius, normal)
            }
            Shape::Box { min, max } => {
                let c = (Vec3::from(*min) + Vec3::from(*max)) * 0.5;
                let h = (Vec3::from(*max) - Vec3::from(*min)) * 0.5;
                let p = x - c;
                let q = p.abs() - h;
                let outside = q.map(|v| v.max(0.0));
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                let axis = q.imax();
                let mut normal = Vec3::zeros();
                normal[axis] = p[axis].signum();
                (outside.norm() + inside, normal)
            }
        }
    }

    /// Whether the shape, grown by `margin`, can reach into `b`.
    fn touches(&self, b: &Aabb, margin: f32) -> bool {
        match self {
            Shape::Sphere { center, radius } => {
                let c = Vec3::from(*center);
                let nearest = c.zip_zip_map(&b.min_v(), &b.max_v(), |v, lo, hi| v.clamp(lo, hi));
                (nearest - c).norm() < radius + margin
            }
            Shape::Box { min, max } => (0..3).all(|a| min[a] - margin < b.max[a] && max[a] + margin > b.min[a]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub density: f32,
    pub color: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub aabb: Aabb,
    pub primitives: Vec<Primitive>,
    /// Width of the density fade across each surface.
    pub shell: f32,
    /// Direction towards the light, for shading.
    pub light: [f32; 3],
    /// Strength of the view-dependent highlight; 0 gives Lambertian colors.
    pub specular: f32,
}

fn smootherstep(t: f32) -> f32 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (t * (6.0 * t - 15.0) + 10.0)
}

impl AnalyticScene {
    /// Empty box of the standard scene.
    pub fn empty() -> Self {
        Self {
            primitives: Vec::new(),
            ..Self::standard()
        }
    }

    /// Three overlapping spheres in `[-1, 1]^3`.
    pub fn standard() -> Self {
        let sphere = |center: [f32; 3], radius: f32, color: [f32; 3]| Primitive {
            shape: Shape::Sphere { center, radius },
            density: 40.0,
            color,
        };
        Self {
            aabb: Aabb::new([-1.0; 3], [1.0; 3]).expect("valid box"),
            primitives: vec![
                sphere([-0.35, -0.25, -0.1], 0.38, [0.85, 0.2, 0.15]),
                sphere([0.4, -0.05, 0.15], 0.32, [0.15, 0.7, 0.25]),
                sphere([-0.05, 0.4, 0.35], 0.28, [0.2, 0.3, 0.9]),
            ],
            shell: 0.08,
            light: [0.4, -0.5, 0.75],
            specular: 0.0,
        }
    }

    /// The standard scene with a view-dependent highlight.
    pub fn specular() -> Self {
        Self {
            specular: 0.35,
            ..Self::standard()
        }
    }

    /// Seeded union of `count` spheres and boxes inside `[-1, 1]^3`.
    pub fn random(seed: u64, count: usize) -> Self {
        let mut rng = stream_rng(seed, 0);
        let primitives = (0..count)
            .map(|_| {
                let center: [f32; 3] = std::array::from_fn(|_| rng.gen_range(-0.5..0.5));
                let size = rng.gen_range(0.12..0.35);
                let shape = if rng.gen_bool(0.5) {
                    Shape::Sphere { center, radius: size }
                } else {
                    let h: [f32; 3] = std::array::from_fn(|_| size * rng.gen_range(0.6..1.0));
                    Shape::Box {
                        min: std::array::from_fn(|a| center[a] - h[a]),
                        max: std::array::from_fn(|a| center[a] + h[a]),
                    }
                };
                Primitive {
                    shape,
                    density: rng.gen_range(25.0..60.0),
                    color: std::array::from_fn(|_| rng.gen_range(0.1..0.95)),
                }
            })
            .collect();
        Self {
            primitives,
            ..Self::standard()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shell > 0.0) {
            return Err(Error::InvalidConfig("scene shell width must be positive".into()));
        }
        for p in &self.primitives {
            if !(p.density >= 0.0) || !p.color.iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(Error::InvalidConfig(format!("bad primitive {p:?}")));
            }
            // Support must stay strictly inside the box.
            let inner = Aabb {
                min: self.aabb.min.map(|v| v + 0.5 * self.shell),
                max: self.aabb.max.map(|v| v - 0.5 * self.shell),
            };
            let fits = match &p.shape {
                Shape::Sphere { center, radius } => {
                    (0..3).all(|a| center[a] - radius >= inner.min[a] && center[a] + radius <= inner.max[a])
                }
                Shape::Box { min, max } => (0..3).all(|a| min[a] >= inner.min[a] && max[a] <= inner.max[a]),
            };
            if !fits {
                return Err(Error::InvalidConfig(format!("primitive {:?} leaves the scene box", p.shape)));
            }
        }
        Ok(())
    }

    fn weight(&self, sd: f32) -> f32 {
        smootherstep(0.5 - sd / self.shell)
    }

    pub fn density(&self, x: &Vec3) -> f32 {
        self.primitives
            .iter()
            .map(|p| p.density * self.weight(p.shape.distance(x).0))
            .fold(0.0, f32::max)
    }

    /// Density and color seen from direction `d`.
    pub fn radiance(&self, x: &Vec3, d: &Vec3) -> ([f32; 3], f32) {
        let light = Vec3::from(self.light).normalize();
        let mut sigma = 0.0f32;
        let mut total = 0.0f32;
        let mut color = Vec3::zeros();
        for p in &self.primitives {
            let (sd, normal) = p.shape.distance(x);
            let s = p.density * self.weight(sd);
            if s <= 0.0 {
                continue;
            }
            sigma = sigma.max(s);
            let shade = 0.7 + 0.3 * normal.dot(&light);
            let mut c = Vec3::from(p.color) * shade;
            if self.specular > 0.0 {
                let reflected = d - normal * (2.0 * d.dot(&normal));
                let highlight = self.specular * reflected.dot(&light).max(0.0).powi(8);
                c += Vec3::repeat(highlight);
            }
            color += c * s;
            total += s;
        }
        if total == 0.0 {
            return ([0.0; 3], 0.0);
        }
        let c = color / total;
        (std::array::from_fn(|i| c[i].clamp(0.0, 1.0)), sigma)
    }

    /// True if the density is exactly zero over the closed cell `b`.
    pub fn is_empty_in(&self, b: &Aabb) -> bool {
        !self.primitives.iter().any(|p| p.shape.touches(b, 0.5 * self.shell))
    }

    /// Occupancy from geometry: a cell is marked unless the scene is
    /// provably empty over it.
    pub fn occupancy(&self, resolution: GridResolution) -> Result<OccupancyGrid> {
        let mut grid = OccupancyGrid::empty(self.aabb, resolution)?;
        for (i, cell) in resolution.cells().enumerate() {
            if !self.is_empty_in(&cell_bounds(cell, &self.aabb, resolution)) {
                grid.set(i, true);
            }
        }
        Ok(grid)
    }
}

impl DensityField for AnalyticScene {
    fn densities(&self, points: &[Vec3]) -> Result<Vec<f32>> {
        Ok(points.par_iter().map(|p| self.density(p)).collect())
    }
}

impl RadianceField for AnalyticScene {
    fn aabb(&self) -> &Aabb {
        &self.aabb
    }

    fn evaluate(&self, batch: &QueryBatch) -> Result<Vec<([f32; 3], f32)>> {
        Ok(batch
            .positions
            .par_iter()
            .zip(batch.direction_index.par_iter())
            .map(|(x, &di)| self.radiance(x, &batch.directions[di as usize]))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn standard_scenes_are_valid() {
        AnalyticScene::standard().validate().unwrap();
        AnalyticScene::specular().validate().unwrap();
        for seed in 0..20 {
            let n = 3 + seed as usize % 6;
            AnalyticScene::random(seed, n).validate().unwrap();
        }
    }

    #[test]
    fn density_profile_across_the_shell() {
        let s = AnalyticScene::standard();
        let Shape::Sphere { center, radius } = s.primitives[0].shape else {
            unreachable!()
        };
        let c = Vec3::from(center);
        let at = |r: f32| s.density(&(c + Vec3::new(0.0, 0.0, -1.0) * r));
        assert_eq!(at(0.0), 40.0);
        assert_eq!(at(radius + 0.5 * s.shell + 1e-4), 0.0);
        assert!((at(radius) - 20.0).abs() < 1e-3);
        assert_eq!(at(radius - 0.5 * s.shell - 1e-4), 40.0);
    }

    #[test]
    fn box_distance_and_normal() {
        let b = Shape::Box {
            min: [-0.5; 3],
            max: [0.5; 3],
        };
        let (d, n) = b.distance(&Vec3::new(0.8, 0.1, 0.0));
        assert!((d - 0.3).abs() < 1e-6);
        assert_eq!(n, Vec3::x());
        let (d, _) = b.distance(&Vec3::new(0.0, -0.2, 0.0));
        assert!((d + 0.3).abs() < 1e-6);
    }

    #[test]
    fn specular_variant_depends_on_view() {
        let lambert = AnalyticScene::standard();
        let shiny = AnalyticScene::specular();
        let Shape::Sphere { center, radius } = shiny.primitives[0].shape else {
            unreachable!()
        };
        let x = Vec3::from(center) + Vec3::from(shiny.light).normalize() * (radius - 0.05);
        let toward = -Vec3::from(shiny.light).normalize();
        let (a, _) = shiny.radiance(&x, &toward);
        let (b, _) = shiny.radiance(&x, &Vec3::from(shiny.light).normalize());
        assert_ne!(a, b);
        let (c, _) = lambert.radiance(&x, &toward);
        let (d, _) = lambert.radiance(&x, &Vec3::x());
        assert_eq!(c, d);
    }

    proptest! {
        #[test]
        fn occupancy_is_conservative(x in -1.0f32..1.0, y in -1.0f32..1.0, z in -1.0f32..1.0, seed in 0u64..8) {
            let s = AnalyticScene::random(seed, 5);
            let r = GridResolution::cube(16);
            let occ = s.occupancy(r).unwrap();
            let p = Vec3::new(x, y, z);
            if s.density(&p) > 0.0 {
                prop_assert!(occ.is_occupied(&p).unwrap());
            }
        }

        #[test]
        fn radiance_is_bounded(x in -1.0f32..1.0, y in -1.0f32..1.0, z in -1.0f32..1.0, t in 0.0f32..6.28) {
            let s = AnalyticScene::specular();
            let d = Vec3::new(t.cos(), t.sin(), 0.3).normalize();
            let (c, sigma) = s.radiance(&Vec3::new(x, y, z), &d);
            prop_assert!(sigma >= 0.0);
            prop_assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
