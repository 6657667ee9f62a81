//! Loss functions and their gradients: the photometric loss through volume
//! rendering, and the distillation loss matching a teacher pointwise.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batched::{blocks, group_by_network, grouped_forward, QueryBatch, MAX_BLOCK_ROWS};
use crate::camera::Ray;
use crate::dataset::View;
use crate::error::{Error, Result};
use crate::field::{cell_bounds, density_to_alpha, GridResolution, Vec3};
use crate::grid::NetworkGrid;
use crate::mlp::{backward, forward_train, ForwardCache};
use crate::occupancy::OccupancyGrid;
use crate::optim::{add_regularization, OptimizerState, SparseGrads};
use crate::real::Real;
use crate::render::{sample_ray, RenderConfig, Sample};
use crate::rng::stream_rng;

/// Rays whose samples are held in memory at once.
const RAY_CHUNK: usize = 1024;

/// Training pixels with their target colors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub targets: Vec<[f32; 3]>,
}

/// A random training image and `count` random pixels of it.
pub fn sample_pixels<R: Rng>(views: &[&View], count: usize, rng: &mut R) -> Result<RayBatch> {
    if views.is_empty() {
        return Err(Error::Dataset("no training views".into()));
    }
    let view = views[rng.gen_range(0..views.len())];
    let (w, h) = (view.camera.width, view.camera.height);
    let mut batch = RayBatch::default();
    for _ in 0..count {
        let (px, py) = (rng.gen_range(0..w), rng.gen_range(0..h));
        batch.rays.push(view.camera.generate_ray(px, py)?);
        batch.targets.push(view.image.pixel(px, py));
    }
    Ok(batch)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Data term plus regularization.
    pub loss: f64,
    pub mse: f64,
    pub regularization: f64,
    pub samples: u64,
}

/// Forward results of one group of samples evaluated by one network.
struct BlockPass<T> {
    network: usize,
    /// Sample ids in row order.
    rows: Vec<u32>,
    cache: ForwardCache<T>,
}

/// Evaluates `positions` (with per-sample directions taken from
/// `directions[direction_index]`) grouped by network, keeping activations.
fn forward_grouped<T: Real>(
    grid: &NetworkGrid<T>,
    positions: &[Vec3],
    direction_index: &[u32],
    directions: &[Vec3],
    network_index: &[u32],
) -> Result<Vec<BlockPass<T>>> {
    let layout = group_by_network(network_index, grid.network_count());
    let pos_dim = grid.encoding.position_dim();
    let dir_dim = grid.encoding.direction_dim();
    let mut dir_table = vec![T::zero(); directions.len() * dir_dim];
    for (d, out) in directions.iter().zip(dir_table.chunks_mut(dir_dim)) {
        grid.encode_direction_into(d, out);
    }
    blocks(&layout, MAX_BLOCK_ROWS)
        .par_iter()
        .map(|b| {
            let rows: Vec<u32> = layout.order[b.offset..b.offset + b.len].to_vec();
            let mut x_enc = vec![T::zero(); b.len * pos_dim];
            let mut d_enc = vec![T::zero(); b.len * dir_dim];
            for (r, &q) in rows.iter().enumerate() {
                grid.encode_position_into(&positions[q as usize], &mut x_enc[r * pos_dim..(r + 1) * pos_dim]);
                let di = direction_index[q as usize] as usize;
                d_enc[r * dir_dim..(r + 1) * dir_dim].copy_from_slice(&dir_table[di * dir_dim..(di + 1) * dir_dim]);
            }
            let cache = forward_train(&grid.params[b.network], &x_enc, &d_enc, b.len)?;
            Ok(BlockPass {
                network: b.network,
                rows,
                cache,
            })
        })
        .collect()
}

/// Backpropagates per-sample output gradients into per-network gradients.
/// Blocks run in parallel; their buffers are summed in block order.
fn backward_grouped<T: Real>(
    grid: &NetworkGrid<T>,
    passes: &[BlockPass<T>],
    d_color: &[[T; 3]],
    d_sigma: &[T],
    grads: &mut SparseGrads<T>,
) -> Result<()> {
    let per_block: Vec<Result<Vec<T>>> = passes
        .par_iter()
        .map(|p| {
            let dc: Vec<T> = p.rows.iter().flat_map(|&q| d_color[q as usize]).collect();
            let ds: Vec<T> = p.rows.iter().map(|&q| d_sigma[q as usize]).collect();
            let params = &grid.params[p.network];
            let mut g = vec![T::zero(); params.data.len()];
            backward(params, &p.cache, &dc, &ds, &mut g)?;
            Ok(g)
        })
        .collect();
    for (p, g) in passes.iter().zip(per_block) {
        accumulate(&mut grads[p.network], g?);
    }
    Ok(())
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
    }
}

/// Mean squared error of volume-rendered pixels against `batch.targets`
/// (averaged over rays and channels), plus `reg_weight` times the L2 norm
/// of the view-dependent layers of every network that received samples.
/// Sampling follows `cfg` (occupancy skipping when given, stratification,
/// `cfg.seed` with one stream per ray); early termination is never used.
pub fn photometric_gradients<T: Real>(
    grid: &NetworkGrid<T>,
    occupancy: Option<&OccupancyGrid>,
    batch: &RayBatch,
    cfg: &RenderConfig,
    reg_weight: f64,
) -> Result<(LossReport, SparseGrads<T>)> {
    cfg.validate()?;
    if batch.rays.len() != batch.targets.len() || batch.rays.is_empty() {
        return Err(Error::DimensionMismatch {
            what: "ray batch targets",
            expected: batch.rays.len(),
            got: batch.targets.len(),
        });
    }
    let norm = T::lit(1.0 / (3 * batch.rays.len()) as f64);
    let background = cfg.background.map(T::from_single);
    let mut grads: SparseGrads<T> = vec![None; grid.network_count()];
    let mut report = LossReport::default();

    for (chunk_index, rays) in batch.rays.chunks(RAY_CHUNK).enumerate() {
        let base = chunk_index * RAY_CHUNK;
        let sampled: Vec<Vec<Sample>> = rays
            .par_iter()
            .enumerate()
            .map(|(i, ray)| {
                let mut rng = stream_rng(cfg.seed, (base + i) as u64);
                sample_ray(ray, &grid.aabb, occupancy, cfg, &mut rng).samples
            })
            .collect();
        let mut offsets = Vec::with_capacity(rays.len() + 1);
        let mut positions = Vec::new();
        let mut direction_index = Vec::new();
        let mut network_index = Vec::new();
        offsets.push(0);
        for (r, s) in sampled.iter().enumerate() {
            for smp in s {
                positions.push(smp.position);
                direction_index.push(r as u32);
                network_index.push(grid.network_index_clamped(&smp.position) as u32);
            }
            offsets.push(positions.len());
        }
        report.samples += positions.len() as u64;
        let directions: Vec<Vec3> = rays.iter().map(|r| r.direction).collect();
        let passes = forward_grouped(grid, &positions, &direction_index, &directions, &network_index)?;

        let mut color = vec![[T::zero(); 3]; positions.len()];
        let mut sigma = vec![T::zero(); positions.len()];
        for p in &passes {
            for (r, &q) in p.rows.iter().enumerate() {
                let c = &p.cache.color[3 * r..3 * r + 3];
                color[q as usize] = [c[0], c[1], c[2]];
                sigma[q as usize] = p.cache.sigma[r];
            }
        }

        let mut d_color = vec![[T::zero(); 3]; positions.len()];
        let mut d_sigma = vec![T::zero(); positions.len()];
        for (r, s) in sampled.iter().enumerate() {
            let range = offsets[r]..offsets[r + 1];
            let target = batch.targets[base + r].map(T::from_single);
            let mse = ray_backward(
                s,
                &color[range.clone()],
                &sigma[range.clone()],
                background,
                target,
                norm,
                &mut d_color[range.clone()],
                &mut d_sigma[range],
            );
            report.mse += mse.to_f64().unwrap_or(f64::NAN);
        }
        backward_grouped(grid, &passes, &d_color, &d_sigma, &mut grads)?;
    }
    report.mse /= (3 * batch.rays.len()) as f64;

    if reg_weight > 0.0 {
        let w = T::lit(reg_weight);
        for (n, g) in grads.iter_mut().enumerate() {
            if let Some(g) = g {
                report.regularization += add_regularization(&grid.params[n], w, g).to_f64().unwrap_or(f64::NAN);
            }
        }
    }
    report.loss = report.mse + report.regularization;
    Ok((report, grads))
}

/// Composites one ray and writes `dL/dc_i`, `dL/dsigma_i` for
/// `L = norm * |C - target|^2`. Returns the unnormalized squared error.
///
/// With weights `w_i = T_i alpha_i` and the light arriving from behind
/// sample `i`, `S_i = sum_{j>i} w_j c_j + T_final * background`:
/// `dC/dc_i = w_i` and `dC/dsigma_i = delta_i (T_{i+1} c_i - S_i)`.
#[allow(clippy::too_many_arguments)]
fn ray_backward<T: Real>(
    samples: &[Sample],
    color: &[[T; 3]],
    sigma: &[T],
    background: [T; 3],
    target: [T; 3],
    norm: T,
    d_color: &mut [[T; 3]],
    d_sigma: &mut [T],
) -> T {
    let n = samples.len();
    let mut trans = Vec::with_capacity(n + 1);
    let mut weight = Vec::with_capacity(n);
    let mut t = T::one();
    let mut pixel = [T::zero(); 3];
    trans.push(t);
    for i in 0..n {
        let alpha = density_to_alpha(sigma[i], T::from_single(samples[i].delta));
        let w = t * alpha;
        for c in 0..3 {
            pixel[c] += w * color[i][c];
        }
        weight.push(w);
        t *= T::one() - alpha;
        trans.push(t);
    }
    let mut err = T::zero();
    let mut g = [T::zero(); 3];
    for c in 0..3 {
        pixel[c] += t * background[c];
        let e = pixel[c] - target[c];
        err += e * e;
        g[c] = T::lit(2.0) * norm * e;
    }
    let mut suffix: [T; 3] = std::array::from_fn(|c| t * background[c]);
    for i in (0..n).rev() {
        let delta = T::from_single(samples[i].delta);
        let mut ds = T::zero();
        for c in 0..3 {
            d_color[i][c] = weight[i] * g[c];
            ds += (trans[i + 1] * color[i][c] - suffix[c]) * g[c];
        }
        d_sigma[i] = delta * ds;
        for c in 0..3 {
            suffix[c] += weight[i] * color[i][c];
        }
    }
    err
}

/// One optimizer update on a fixed ray batch.
pub fn photometric_step_on(
    grid: &mut NetworkGrid<f32>,
    occupancy: Option<&OccupancyGrid>,
    batch: &RayBatch,
    cfg: &RenderConfig,
    reg_weight: f64,
    state: &mut OptimizerState<f32>,
    lr: f64,
) -> Result<LossReport> {
    let (report, grads) = photometric_gradients(grid, occupancy, batch, cfg, reg_weight)?;
    state.apply(grid, &grads, lr);
    Ok(report)
}

/// Samples a training image and `batch_size` pixels (the rng stream is
/// fixed by `cfg.seed` and `step`), then takes one optimizer step.
#[allow(clippy::too_many_arguments)]
pub fn photometric_step(
    grid: &mut NetworkGrid<f32>,
    occupancy: Option<&OccupancyGrid>,
    views: &[&View],
    batch_size: usize,
    cfg: &RenderConfig,
    reg_weight: f64,
    state: &mut OptimizerState<f32>,
    step: usize,
    lr: f64,
) -> Result<LossReport> {
    let mut rng = stream_rng(cfg.seed ^ 0x5eed_0001, step as u64);
    let batch = sample_pixels(views, batch_size, &mut rng)?;
    let cfg = RenderConfig {
        seed: cfg.seed.wrapping_add((step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        ..cfg.clone()
    };
    photometric_step_on(grid, occupancy, &batch, &cfg, reg_weight, state, lr)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillLoss {
    pub points_per_cell: usize,
    pub alpha_weight: f64,
    pub color_weight: f64,
    /// Segment length for converting densities to alphas.
    pub reference_delta: f32,
}

impl Default for DistillLoss {
    fn default() -> Self {
        Self {
            points_per_cell: 8,
            alpha_weight: 1.0,
            color_weight: 1.0,
            reference_delta: 2.0 * 3f32.sqrt() / 384.0,
        }
    }
}

/// `count` points uniformly inside cell `index` of the grid, each binning
/// back to that cell.
pub fn sample_cell_points<R: Rng>(
    aabb: &crate::field::Aabb,
    resolution: GridResolution,
    index: usize,
    count: usize,
    rng: &mut R,
) -> Vec<Vec3> {
    let cell = resolution.unflatten(index);
    let b = cell_bounds(cell, aabb, resolution);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let x = Vec3::from(std::array::from_fn(|a| b.min[a] + (b.max[a] - b.min[a]) * rng.gen::<f32>()));
        if crate::field::bin_clamped(&x, aabb, resolution) == cell {
            out.push(x);
        }
    }
    out
}

pub fn random_direction<R: Rng>(rng: &mut R) -> Vec3 {
    let z: f32 = rng.gen_range(-1.0..1.0);
    let phi: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Distillation inputs for one step: per network, `points_per_cell`
/// positions in its cell and random unit directions.
pub fn distill_inputs(student_aabb: &crate::field::Aabb, resolution: GridResolution, points: usize, seed: u64, step: usize) -> (Vec<Vec3>, Vec<Vec3>) {
    let networks = resolution.cell_count();
    let per: Vec<(Vec<Vec3>, Vec<Vec3>)> = (0..networks)
        .into_par_iter()
        .map(|n| {
            let mut rng = stream_rng(seed.wrapping_add(step as u64), n as u64);
            let p = sample_cell_points(student_aabb, resolution, n, points, &mut rng);
            let d = (0..points).map(|_| random_direction(&mut rng)).collect();
            (p, d)
        })
        .collect();
    let mut positions = Vec::with_capacity(networks * points);
    let mut directions = Vec::with_capacity(networks * points);
    for (p, d) in per {
        positions.extend(p);
        directions.extend(d);
    }
    (positions, directions)
}

/// Distillation loss and student gradients. The loss is the mean over
/// sampled points of `alpha_weight (a_s - a_t)^2 + color_weight |c_s - c_t|^2 / 3`,
/// with alphas from both models' densities at `reference_delta`. No images
/// and no volume rendering are involved.
pub fn distill_gradients<T: Real>(
    student: &NetworkGrid<T>,
    teacher: &NetworkGrid<T>,
    loss: &DistillLoss,
    seed: u64,
    step: usize,
) -> Result<(f64, SparseGrads<T>)> {
    if student.aabb != teacher.aabb {
        return Err(Error::InvalidConfig("student and teacher boxes differ".into()));
    }
    let p = loss.points_per_cell;
    if p == 0 {
        return Err(Error::InvalidConfig("points_per_cell must be >= 1".into()));
    }
    let (positions, directions) = distill_inputs(&student.aabb, student.resolution, p, seed, step);
    let mut batch = QueryBatch {
        directions,
        ..Default::default()
    };
    for (i, x) in positions.iter().enumerate() {
        batch.push_raw(*x, i as u32, teacher.network_index_clamped(x) as u32);
    }
    let layout = group_by_network(&batch.network_index, teacher.network_count());
    let targets = grouped_forward(teacher, &batch, &layout)?;

    let delta = T::from_single(loss.reference_delta);
    let wa = T::lit(loss.alpha_weight);
    let wc = T::lit(loss.color_weight / 3.0);
    let norm = T::lit(1.0 / positions.len() as f64);
    let pos_dim = student.encoding.position_dim();
    let dir_dim = student.encoding.direction_dim();
    let per_network: Vec<Result<(T, Vec<T>)>> = (0..student.network_count())
        .into_par_iter()
        .map(|n| {
            let rows = n * p..(n + 1) * p;
            let mut x_enc = vec![T::zero(); p * pos_dim];
            let mut d_enc = vec![T::zero(); p * dir_dim];
            for (r, q) in rows.clone().enumerate() {
                student.encode_position_into(&positions[q], &mut x_enc[r * pos_dim..(r + 1) * pos_dim]);
                student.encode_direction_into(&batch.directions[q], &mut d_enc[r * dir_dim..(r + 1) * dir_dim]);
            }
            let params = &student.params[n];
            let cache = forward_train(params, &x_enc, &d_enc, p)?;
            let mut total = T::zero();
            let mut dc = vec![T::zero(); 3 * p];
            let mut ds = vec![T::zero(); p];
            for (r, q) in rows.enumerate() {
                let (tc, ts) = targets[q];
                let a_s = density_to_alpha(cache.sigma[r], delta);
                let a_t = density_to_alpha(ts, delta);
                let ea = a_s - a_t;
                total += wa * ea * ea;
                // d alpha / d sigma = delta * (1 - alpha)
                ds[r] = norm * T::lit(2.0) * wa * ea * delta * (T::one() - a_s);
                for c in 0..3 {
                    let e = cache.color[3 * r + c] - tc[c];
                    total += wc * e * e;
                    dc[3 * r + c] = norm * T::lit(2.0) * wc * e;
                }
            }
            let mut g = vec![T::zero(); params.data.len()];
            backward(params, &cache, &dc, &ds, &mut g)?;
            Ok((total, g))
        })
        .collect();
    let mut sum = 0.0;
    let mut grads = Vec::with_capacity(per_network.len());
    for r in per_network {
        let (t, g) = r?;
        sum += t.to_f64().unwrap_or(f64::NAN);
        grads.push(Some(g));
    }
    Ok((sum / positions.len() as f64, grads))
}

pub fn distill_step(
    student: &mut NetworkGrid<f32>,
    teacher: &NetworkGrid<f32>,
    loss: &DistillLoss,
    state: &mut OptimizerState<f32>,
    seed: u64,
    step: usize,
    lr: f64,
) -> Result<f64> {
    let (value, grads) = distill_gradients(student, teacher, loss, seed, step)?;
    state.apply(student, &grads, lr);
    Ok(value)
}
