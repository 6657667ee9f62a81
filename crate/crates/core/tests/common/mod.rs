//! Oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::sync::Arc;

use nerfgrid_core::batched::per_query_forward;
use nerfgrid_core::encoding::PositionalEncoding;
use nerfgrid_core::mlp::{backward, forward_train, init_params, Layout, MlpArchitecture, MlpParams};
use nerfgrid_core::train::{photometric_gradients, RayBatch};
use nerfgrid_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_arch() -> MlpArchitecture {
    let e = PositionalEncoding::default();
    MlpArchitecture::tiny(e.position_dim(), e.direction_dim())
}

pub fn full_arch() -> MlpArchitecture {
    let e = PositionalEncoding::default();
    MlpArchitecture::full(e.position_dim(), e.direction_dim())
}

pub fn manifest(aabb: Aabb, resolution: [usize; 3], architecture: MlpArchitecture) -> GridManifest {
    GridManifest {
        aabb,
        resolution: GridResolution(resolution),
        encoding: PositionalEncoding::default(),
        architecture,
    }
}

/// `|a - b| / max(|a|, |b|)`, with magnitudes below 1e-8 treated as 1e-8
/// so coordinates with a vanishing gradient compare absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest relative error between the analytic parameter gradient of
/// `sum(wc * color + ws * sigma)` and central differences with h = 1e-4,
/// over `coords` random parameters.
pub fn mlp_gradient_error(arch: &MlpArchitecture, seed: u64, coords: usize) -> f64 {
    let layout = Arc::new(Layout::new(arch).unwrap());
    let params: MlpParams<f64> = init_params(layout.clone(), seed);
    let rows = 3;
    let mut r = rng(seed);
    let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| r.gen_range(-1.0..1.0)).collect() };
    let x = uniform(rows * arch.position_input_dim);
    let d = uniform(rows * arch.direction_input_dim);
    let wc = uniform(rows * 3);
    let ws = uniform(rows);
    let objective = |p: &MlpParams<f64>| {
        let c = forward_train(p, &x, &d, rows).unwrap();
        let a: f64 = c.color.iter().zip(&wc).map(|(v, w)| v * w).sum();
        a + c.sigma.iter().zip(&ws).map(|(v, w)| v * w).sum::<f64>()
    };
    let cache = forward_train(&params, &x, &d, rows).unwrap();
    let mut grads = vec![0.0; layout.param_count];
    backward(&params, &cache, &wc, &ws, &mut grads).unwrap();

    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut r = rng(seed ^ 0xfd);
    for _ in 0..coords {
        let i = r.gen_range(0..layout.param_count);
        let mut p = params.clone();
        p.data[i] += h;
        let up = objective(&p);
        p.data[i] -= 2.0 * h;
        let down = objective(&p);
        worst = worst.max(relative_error(grads[i], (up - down) / (2.0 * h)));
    }
    worst
}

/// Rays entering `aabb` through its -x face towards random interior points.
pub fn rays_through(aabb: &Aabb, count: usize, seed: u64) -> Vec<Ray> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let lo = aabb.min_v();
            let hi = aabb.max_v();
            let target = Vec3::new(
                r.gen_range(lo.x..hi.x),
                r.gen_range(lo.y..hi.y),
                r.gen_range(lo.z..hi.z),
            );
            let origin = Vec3::new(lo.x - 2.0, r.gen_range(lo.y..hi.y), r.gen_range(lo.z..hi.z));
            Ray {
                origin,
                direction: (target - origin).normalize(),
            }
        })
        .collect()
}

/// Largest relative error of the photometric loss gradient (data term
/// plus regularization) against central differences, over `coords`
/// random parameters of networks that receive samples.
pub fn photometric_gradient_error(seed: u64, coords: usize) -> f64 {
    let aabb = Aabb::new([-1.0; 3], [1.0; 3]).unwrap();
    let grid: NetworkGrid<f64> = NetworkGrid::random(&manifest(aabb, [2, 2, 2], tiny_arch()), seed).unwrap();
    let mut r = rng(seed);
    let rays = rays_through(&aabb, 6, seed);
    let targets = (0..rays.len()).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
    let batch = RayBatch { rays, targets };
    let cfg = RenderConfig {
        samples_per_ray: 24,
        epsilon: 0.0,
        stratified: true,
        seed,
        ..Default::default()
    };
    let reg = 1e-3;
    let loss = |g: &NetworkGrid<f64>| photometric_gradients(g, None, &batch, &cfg, reg).unwrap().0.loss;
    let (_, grads) = photometric_gradients(&grid, None, &batch, &cfg, reg).unwrap();
    let active: Vec<usize> = (0..grads.len()).filter(|&n| grads[n].is_some()).collect();
    assert!(!active.is_empty());

    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let n = active[r.gen_range(0..active.len())];
        let i = r.gen_range(0..grid.layout.param_count);
        let mut g = grid.clone();
        g.params[n].data[i] += h;
        let up = loss(&g);
        g.params[n].data[i] -= 2.0 * h;
        let down = loss(&g);
        let analytic = grads[n].as_ref().unwrap()[i];
        worst = worst.max(relative_error(analytic, (up - down) / (2.0 * h)));
    }
    worst
}

/// Front-to-back compositing written directly from the definitions:
/// `T_i = prod_{j<i} (1 - alpha_j)`, `C = sum T_i alpha_i c_i`.
pub fn reference_composite(samples: &[([f64; 3], f64)]) -> ([f64; 3], f64) {
    let mut color = [0.0; 3];
    for i in 0..samples.len() {
        let t: f64 = samples[..i].iter().map(|s| 1.0 - s.1).product();
        for c in 0..3 {
            color[c] += t * samples[i].1 * samples[i].0[c];
        }
    }
    (color, samples.iter().map(|s| 1.0 - s.1).product())
}

/// Largest channel difference between `composite` and the reference over
/// `lists` random sample lists of up to 64 entries.
pub fn composite_error(lists: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..lists {
        let n = r.gen_range(0..64);
        let s: Vec<([f64; 3], f64)> = (0..n)
            .map(|_| {
                let alpha = if r.gen_bool(0.1) { 1.0 } else { r.gen_range(0.0..1.0) };
                ([r.gen(), r.gen(), r.gen()], alpha)
            })
            .collect();
        let (a, ta) = composite(&s);
        let (b, tb) = reference_composite(&s);
        worst = worst.max((ta - tb).abs());
        for c in 0..3 {
            worst = worst.max((a[c] - b[c]).abs());
        }
    }
    worst
}

/// `count` random queries across all networks of `grid`, sharing 64
/// directions.
pub fn random_queries(grid: &NetworkGrid<f32>, count: usize, seed: u64) -> QueryBatch {
    let mut r = rng(seed);
    let mut batch = QueryBatch::default();
    for _ in 0..64 {
        let d = Vec3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
        batch.directions.push(d.normalize());
    }
    let (lo, hi) = (grid.aabb.min_v(), grid.aabb.max_v());
    for _ in 0..count {
        let x = Vec3::new(
            r.gen_range(lo.x..hi.x),
            r.gen_range(lo.y..hi.y),
            r.gen_range(lo.z..hi.z),
        );
        batch.push(grid, x, r.gen_range(0..64));
    }
    batch
}

pub fn max_output_difference(a: &[([f32; 3], f32)], b: &[([f32; 3], f32)]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| (0..3).map(|c| (x.0[c] - y.0[c]).abs()).chain([(x.1 - y.1).abs()]))
        .fold(0.0f64, |m, v| m.max(v as f64))
}

/// Grouped evaluation against the per-query oracle, and against grouped
/// evaluation of a shuffled copy of the batch.
pub fn grouped_equivalence(queries: usize, seed: u64) -> (f64, f64) {
    let aabb = Aabb::new([-1.0; 3], [1.0; 3]).unwrap();
    let grid: NetworkGrid<f32> = NetworkGrid::random(&manifest(aabb, [16, 16, 16], tiny_arch()), seed).unwrap();
    let batch = random_queries(&grid, queries, seed);
    let layout = group_by_network(&batch.network_index, grid.network_count());
    let grouped = grouped_forward(&grid, &batch, &layout).unwrap();
    let oracle = per_query_forward(&grid, &batch).unwrap();

    let mut r = rng(seed ^ 0x5f);
    let mut perm: Vec<usize> = (0..batch.len()).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, r.gen_range(0..=i));
    }
    let mut shuffled = QueryBatch {
        directions: batch.directions.clone(),
        ..Default::default()
    };
    for &p in &perm {
        shuffled.push_raw(batch.positions[p], batch.direction_index[p], batch.network_index[p]);
    }
    let layout = group_by_network(&shuffled.network_index, grid.network_count());
    let out = grouped_forward(&grid, &shuffled, &layout).unwrap();
    let mut unshuffled = vec![([0.0; 3], 0.0); out.len()];
    for (k, &p) in perm.iter().enumerate() {
        unshuffled[p] = out[k];
    }
    (
        max_output_difference(&grouped, &oracle),
        max_output_difference(&grouped, &unshuffled),
    )
}

pub fn max_pixel_difference(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    assert_eq!((a.width, a.height), (b.width, b.height));
    a.data.iter().zip(&b.data).fold(0.0f64, |m, (x, y)| m.max((x - y).abs() as f64))
}

/// A view of the standard scene from an oblique orbit position.
pub fn toy_camera(scene: &AnalyticScene, size: u32) -> Camera {
    let dir = Vec3::new(0.8, -0.5, 0.45).normalize();
    nerfgrid_core::dataset::orbit_camera(scene.aabb.center(), dir, 3.2, size, 45.0).unwrap()
}

pub fn dense(samples_per_ray: usize, epsilon: f32) -> RenderConfig {
    RenderConfig {
        samples_per_ray,
        epsilon,
        ..Default::default()
    }
}

/// Renders `camera` twice and returns the largest channel difference with
/// the stats of both renders.
pub fn render_pair(
    field: &dyn RadianceField,
    camera: &Camera,
    a: (Option<&OccupancyGrid>, &RenderConfig),
    b: (Option<&OccupancyGrid>, &RenderConfig),
) -> (f64, RenderStats, RenderStats) {
    let (ia, sa) = render_image(field, a.0, camera, a.1).unwrap();
    let (ib, sb) = render_image(field, b.0, camera, b.1).unwrap();
    (max_pixel_difference(&ia, &ib), sa, sb)
}
