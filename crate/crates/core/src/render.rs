//! Ray sampling with empty-space skipping, alpha compositing, and the
//! distance-ordered marching loop with early ray termination.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batched::{group_by_network, grouped_forward, QueryBatch};
use crate::camera::{Camera, Ray};
use crate::error::{Error, Result};
use crate::field::{density_to_alpha, Aabb, Vec3};
use crate::grid::NetworkGrid;
use crate::image::ImageBuffer;
use crate::occupancy::OccupancyGrid;
use crate::real::Real;
use crate::rng::stream_rng;

/// Rays marched together; bounds the sample buffers of one pass.
const TILE_RAYS: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Maximum samples per ray (K).
    pub samples_per_ray: usize,
    /// Transmittance below which a ray stops; 0 disables termination.
    pub epsilon: f32,
    pub background: [f32; 3],
    /// Samples per ray evaluated in one marching round.
    pub ert_chunk: usize,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples_per_ray: 384,
            epsilon: 0.01,
            background: [1.0; 3],
            ert_chunk: 32,
            stratified: false,
            seed: 0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray == 0 {
            return Err(Error::InvalidConfig("samples_per_ray must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::InvalidConfig(format!("epsilon {} outside [0, 1)", self.epsilon)));
        }
        if self.ert_chunk == 0 {
            return Err(Error::InvalidConfig("ert_chunk must be >= 1".into()));
        }
        if !self.background.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(Error::InvalidConfig(format!("background {:?} outside [0, 1]", self.background)));
        }
        Ok(())
    }

    /// Nominal segment length for rays crossing `aabb` along its diagonal.
    pub fn reference_delta(&self, aabb: &Aabb) -> f32 {
        aabb.diagonal() / self.samples_per_ray as f32
    }
}

/// A radiance field the marcher can query in batches.
pub trait RadianceField: Sync {
    fn aabb(&self) -> &Aabb;

    /// Network owning `x`, for fields made of several networks.
    fn network_of(&self, _x: &Vec3) -> u32 {
        0
    }

    /// `(color, sigma)` per query, in batch order.
    fn evaluate(&self, batch: &QueryBatch) -> Result<Vec<([f32; 3], f32)>>;
}

impl RadianceField for NetworkGrid<f32> {
    fn aabb(&self) -> &Aabb {
        &self.aabb
    }

    #[inline]
    fn network_of(&self, x: &Vec3) -> u32 {
        self.network_index_clamped(x) as u32
    }

    fn evaluate(&self, batch: &QueryBatch) -> Result<Vec<([f32; 3], f32)>> {
        let layout = group_by_network(&batch.network_index, self.network_count());
        grouped_forward(self, batch, &layout)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub t: f32,
    pub position: Vec3,
    /// Nominal segment length used for the alpha conversion.
    pub delta: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RaySamples {
    pub samples: Vec<Sample>,
    /// Samples dropped because their cell is empty.
    pub skipped: usize,
}

/// Splits the ray's box interval into `samples_per_ray` equal segments and
/// places one sample per segment (the midpoint, or a uniform draw when
/// stratified). Samples in empty occupancy cells are dropped; the rest keep
/// the nominal segment length as `delta`.
pub fn sample_ray<R: Rng>(
    ray: &Ray,
    aabb: &Aabb,
    occupancy: Option<&OccupancyGrid>,
    cfg: &RenderConfig,
    rng: &mut R,
) -> RaySamples {
    let mut out = RaySamples::default();
    let Some((t0, t1)) = ray.interval(aabb) else {
        return out;
    };
    if !(t1 > t0) {
        return out;
    }
    let k = cfg.samples_per_ray;
    let delta = (t1 - t0) / k as f32;
    out.samples.reserve(k);
    for i in 0..k {
        let u = if cfg.stratified { rng.gen::<f32>() } else { 0.5 };
        let t = t0 + (i as f32 + u) * delta;
        let position = ray.at(t);
        if occupancy.is_some_and(|o| !o.is_occupied_clamped(&position)) {
            out.skipped += 1;
            continue;
        }
        out.samples.push(Sample { t, position, delta });
    }
    out
}

/// Front-to-back accumulation of `T_i * alpha_i * c_i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Compositor<T> {
    pub color: [T; 3],
    pub transmittance: T,
}

impl<T: Real> Default for Compositor<T> {
    fn default() -> Self {
        Self {
            color: [T::zero(); 3],
            transmittance: T::one(),
        }
    }
}

impl<T: Real> Compositor<T> {
    #[inline]
    pub fn add(&mut self, color: [T; 3], alpha: T) {
        let w = self.transmittance * alpha;
        for (acc, c) in self.color.iter_mut().zip(color) {
            *acc += w * c;
        }
        self.transmittance *= T::one() - alpha;
    }

    /// Composited color with `background` behind the remaining transmittance.
    pub fn over(&self, background: [T; 3]) -> [T; 3] {
        std::array::from_fn(|c| self.color[c] + self.transmittance * background[c])
    }
}

/// Composites `(color, alpha)` pairs ordered front to back. Returns the
/// accumulated color and the final transmittance; the caller adds the
/// background weighted by the latter.
pub fn composite<T: Real>(samples: &[([T; 3], T)]) -> ([T; 3], T) {
    let mut acc = Compositor::default();
    for &(c, a) in samples {
        acc.add(c, a);
    }
    (acc.color, acc.transmittance)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderStats {
    pub rays: u64,
    /// Network evaluations performed.
    pub total_queries: u64,
    /// Samples skipped by the occupancy grid.
    pub ess_skipped: u64,
    /// Rays stopped with samples left.
    pub ert_terminated: u64,
    pub wall_ms: f64,
}

impl RenderStats {
    pub fn merge(&mut self, other: &RenderStats) {
        self.rays += other.rays;
        self.total_queries += other.total_queries;
        self.ess_skipped += other.ess_skipped;
        self.ert_terminated += other.ert_terminated;
        self.wall_ms += other.wall_ms;
    }
}

/// Renders `rays`. Each marching round evaluates the next `ert_chunk`
/// samples of every live ray in one grouped batch, composites them, and
/// retires rays whose transmittance fell below `epsilon`.
pub fn render_rays(
    field: &dyn RadianceField,
    occupancy: Option<&OccupancyGrid>,
    rays: &[Ray],
    cfg: &RenderConfig,
) -> Result<(Vec<[f32; 3]>, RenderStats)> {
    cfg.validate()?;
    let start = Instant::now();
    let mut stats = RenderStats {
        rays: rays.len() as u64,
        ..Default::default()
    };
    let mut colors = Vec::with_capacity(rays.len());
    for (tile_index, tile) in rays.chunks(TILE_RAYS).enumerate() {
        let base = tile_index * TILE_RAYS;
        let tile_colors = march_tile(field, occupancy, tile, base, cfg, &mut stats)?;
        colors.extend(tile_colors);
    }
    stats.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((colors, stats))
}

fn march_tile(
    field: &dyn RadianceField,
    occupancy: Option<&OccupancyGrid>,
    rays: &[Ray],
    base: usize,
    cfg: &RenderConfig,
    stats: &mut RenderStats,
) -> Result<Vec<[f32; 3]>> {
    let aabb = field.aabb();
    let sampled: Vec<RaySamples> = rays
        .par_iter()
        .enumerate()
        .map(|(i, ray)| {
            let mut rng: ChaCha8Rng = stream_rng(cfg.seed, (base + i) as u64);
            sample_ray(ray, aabb, occupancy, cfg, &mut rng)
        })
        .collect();
    stats.ess_skipped += sampled.iter().map(|s| s.skipped as u64).sum::<u64>();

    let mut comp = vec![Compositor::<f32>::default(); rays.len()];
    let mut cursor = vec![0usize; rays.len()];
    let mut active: Vec<usize> = (0..rays.len()).filter(|&r| !sampled[r].samples.is_empty()).collect();
    let mut batch = QueryBatch {
        directions: rays.iter().map(|r| r.direction).collect(),
        ..Default::default()
    };
    let mut spans = Vec::with_capacity(active.len());
    while !active.is_empty() {
        batch.clear_queries();
        spans.clear();
        for &r in &active {
            let s = &sampled[r].samples;
            let end = (cursor[r] + cfg.ert_chunk).min(s.len());
            for smp in &s[cursor[r]..end] {
                batch.push_raw(smp.position, r as u32, field.network_of(&smp.position));
            }
            spans.push(end - cursor[r]);
        }
        let out = field.evaluate(&batch)?;
        if out.len() != batch.len() {
            return Err(Error::DimensionMismatch {
                what: "field results",
                expected: batch.len(),
                got: out.len(),
            });
        }
        stats.total_queries += out.len() as u64;

        let mut at = 0;
        let mut next = Vec::with_capacity(active.len());
        for (&r, &len) in active.iter().zip(&spans) {
            let s = &sampled[r].samples[cursor[r]..cursor[r] + len];
            for (smp, &(c, sigma)) in s.iter().zip(&out[at..at + len]) {
                comp[r].add(c, density_to_alpha(sigma, smp.delta));
            }
            at += len;
            cursor[r] += len;
            if cursor[r] < sampled[r].samples.len() {
                if cfg.epsilon > 0.0 && comp[r].transmittance < cfg.epsilon {
                    stats.ert_terminated += 1;
                } else {
                    next.push(r);
                }
            }
        }
        active = next;
    }
    Ok(comp.iter().map(|c| c.over(cfg.background)).collect())
}

/// Renders every pixel of `camera`.
pub fn render_image(
    field: &dyn RadianceField,
    occupancy: Option<&OccupancyGrid>,
    camera: &Camera,
    cfg: &RenderConfig,
) -> Result<(ImageBuffer, RenderStats)> {
    camera.validate()?;
    let start = Instant::now();
    let (colors, mut stats) = render_rays(field, occupancy, &camera.rays(), cfg)?;
    let image = ImageBuffer::from_pixels(camera.width, camera.height, &colors)?;
    stats.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((image, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridResolution;
    use nalgebra::Matrix4;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn axis_ray() -> Ray {
        Ray {
            origin: Vec3::new(-1.0, 0.5, 0.5),
            direction: Vec3::x(),
        }
    }

    fn cfg(k: usize) -> RenderConfig {
        RenderConfig {
            samples_per_ray: k,
            ..Default::default()
        }
    }

    #[test]
    fn dense_sampling_hits_segment_midpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = OccupancyGrid::full(Aabb::unit(), GridResolution::cube(4)).unwrap();
        let s = sample_ray(&axis_ray(), &Aabb::unit(), Some(&full), &cfg(8), &mut rng);
        assert_eq!(s.samples.len(), 8);
        assert_eq!(s.skipped, 0);
        for (i, smp) in s.samples.iter().enumerate() {
            assert!((smp.position.x - (i as f32 + 0.5) / 8.0).abs() < 1e-6);
            assert!((smp.delta - 0.125).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_grid_and_missed_box_give_no_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty = OccupancyGrid::empty(Aabb::unit(), GridResolution::cube(4)).unwrap();
        let s = sample_ray(&axis_ray(), &Aabb::unit(), Some(&empty), &cfg(16), &mut rng);
        assert!(s.samples.is_empty());
        assert_eq!(s.skipped, 16);
        let miss = Ray {
            origin: Vec3::new(-1.0, 2.0, 0.5),
            direction: Vec3::x(),
        };
        assert!(sample_ray(&miss, &Aabb::unit(), None, &cfg(16), &mut rng).samples.is_empty());
    }

    #[test]
    fn half_empty_box_keeps_front_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = GridResolution::cube(8);
        let mut occ = OccupancyGrid::empty(Aabb::unit(), r).unwrap();
        for cell in r.cells() {
            if cell.0[0] < 4 {
                occ.set(r.flatten(cell), true);
            }
        }
        for k in [7, 64, 101, 384] {
            let s = sample_ray(&axis_ray(), &Aabb::unit(), Some(&occ), &cfg(k), &mut rng);
            assert!(s.samples.iter().all(|smp| smp.position.x < 0.5));
            let n = s.samples.len() as f64;
            assert!((n - k as f64 / 2.0).abs() <= 1.0, "{k}: {n}");
        }
    }

    #[test]
    fn stratified_samples_stay_in_their_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = RenderConfig {
            stratified: true,
            ..cfg(10)
        };
        let s = sample_ray(&axis_ray(), &Aabb::unit(), None, &c, &mut rng);
        for (i, smp) in s.samples.iter().enumerate() {
            let x = smp.position.x;
            assert!(x >= i as f32 / 10.0 - 1e-6 && x <= (i + 1) as f32 / 10.0 + 1e-6);
        }
    }

    #[test]
    fn composite_hand_examples() {
        assert_eq!(composite(&[([1.0f64, 0.0, 0.0], 1.0)]), ([1.0, 0.0, 0.0], 0.0));
        assert_eq!(composite(&[([0.3f64, 0.2, 0.9], 0.0); 5]), ([0.0; 3], 1.0));
        assert_eq!(
            composite(&[([1.0f64, 0.0, 0.0], 0.5), ([0.0, 1.0, 0.0], 1.0)]),
            ([0.5, 0.5, 0.0], 0.0)
        );
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0).validate().is_err());
        assert!(RenderConfig { epsilon: 1.0, ..cfg(4) }.validate().is_err());
        assert!(RenderConfig { ert_chunk: 0, ..cfg(4) }.validate().is_err());
        assert!(RenderConfig { epsilon: 0.0, ..cfg(4) }.validate().is_ok());
    }

    struct Fog {
        aabb: Aabb,
        sigma: f32,
    }

    impl RadianceField for Fog {
        fn aabb(&self) -> &Aabb {
            &self.aabb
        }
        fn evaluate(&self, batch: &QueryBatch) -> Result<Vec<([f32; 3], f32)>> {
            Ok(batch.positions.iter().map(|p| ([p.x, 0.2, 0.7], self.sigma)).collect())
        }
    }

    #[test]
    fn empty_field_renders_background_exactly() {
        let fog = Fog {
            aabb: Aabb::unit(),
            sigma: 0.0,
        };
        let pose = crate::camera::look_at(Vec3::new(0.5, 0.5, -2.0), Vec3::repeat(0.5), Vec3::y()).unwrap();
        let cam = Camera::with_fov(16, 12, 60.0, pose).unwrap();
        let c = RenderConfig {
            background: [0.25, 0.5, 1.0],
            ..cfg(32)
        };
        let (img, stats) = render_image(&fog, None, &cam, &c).unwrap();
        assert!(img.pixels().all(|p| p == [0.25, 0.5, 1.0]));
        assert!(stats.total_queries <= 16 * 12 * 32);
        let empty = OccupancyGrid::empty(Aabb::unit(), GridResolution::cube(4)).unwrap();
        let (img, stats) = render_image(&fog, Some(&empty), &cam, &c).unwrap();
        assert_eq!(stats.total_queries, 0);
        assert!(img.pixels().all(|p| p == [0.25, 0.5, 1.0]));
    }

    #[test]
    fn termination_stays_within_epsilon_and_saves_queries() {
        let fog = Fog {
            aabb: Aabb::unit(),
            sigma: 6.0,
        };
        let cam = Camera::with_fov(8, 8, 30.0, {
            let mut m = Matrix4::identity();
            m[(0, 3)] = 0.5;
            m[(1, 3)] = 0.5;
            m[(2, 3)] = -1.0;
            m
        })
        .unwrap();
        let exact = RenderConfig {
            epsilon: 0.0,
            ert_chunk: 4,
            ..cfg(256)
        };
        let early = RenderConfig {
            epsilon: 0.01,
            ..exact.clone()
        };
        let (a, sa) = render_image(&fog, None, &cam, &exact).unwrap();
        let (b, sb) = render_image(&fog, None, &cam, &early).unwrap();
        assert_eq!(sa.ert_terminated, 0);
        assert!(sb.ert_terminated > 0);
        assert!(sb.total_queries < sa.total_queries);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() <= 0.01);
        }
    }

    #[test]
    fn chunk_size_is_invisible_without_termination() {
        let fog = Fog {
            aabb: Aabb::unit(),
            sigma: 3.0,
        };
        let rays: Vec<Ray> = (0..50)
            .map(|i| Ray {
                origin: Vec3::new(-1.0, i as f32 / 50.0, 0.3),
                direction: Vec3::new(1.0, 0.1, 0.2).normalize(),
            })
            .collect();
        let base = RenderConfig {
            epsilon: 0.0,
            stratified: true,
            seed: 9,
            ..cfg(64)
        };
        let (a, _) = render_rays(&fog, None, &rays, &RenderConfig { ert_chunk: 1, ..base.clone() }).unwrap();
        let (b, _) = render_rays(&fog, None, &rays, &RenderConfig { ert_chunk: 64, ..base }).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn transmittance_never_increases(alphas in proptest::collection::vec(0.0f32..=1.0, 0..64)) {
            let mut acc = Compositor::<f32>::default();
            let mut last = 1.0f32;
            for a in alphas {
                acc.add([1.0, 0.5, 0.0], a);
                prop_assert!(acc.transmittance <= last);
                prop_assert!((0.0..=1.0).contains(&acc.transmittance));
                last = acc.transmittance;
            }
        }
    }
}
