//! Render-time breakdown: dense big network, big network with skipping and
//! termination, network grid with skipping and termination.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::batched::{group_by_network, grouped_forward, per_query_forward, QueryBatch};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::field::Vec3;
use crate::grid::NetworkGrid;
use crate::occupancy::OccupancyGrid;
use crate::render::{render_image, RadianceField, RenderConfig};
use crate::rng::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub image_size: u32,
    pub samples_per_ray: usize,
    pub epsilon: f32,
    /// Timed runs per row; the median is reported.
    pub runs: usize,
    /// Untimed runs before the timed ones.
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            samples_per_ray: 384,
            epsilon: 0.01,
            runs: 5,
            warmup: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub median_ms: f64,
    pub runs_ms: Vec<f64>,
    /// Network evaluations per image.
    pub queries: u64,
    /// Median time of the slowest row divided by this row's.
    pub speedup: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn time_row(
    name: &str,
    field: &dyn RadianceField,
    occupancy: Option<&OccupancyGrid>,
    camera: &Camera,
    render: &RenderConfig,
    cfg: &BenchConfig,
) -> Result<BenchRow> {
    let mut runs_ms = Vec::with_capacity(cfg.runs);
    let mut queries = 0;
    for i in 0..cfg.warmup + cfg.runs {
        let start = Instant::now();
        let (_, stats) = render_image(field, occupancy, camera, render)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        queries = stats.total_queries;
        if i >= cfg.warmup {
            runs_ms.push(ms);
        }
    }
    Ok(BenchRow {
        name: name.into(),
        median_ms: median(&runs_ms),
        runs_ms,
        queries,
        speedup: 1.0,
    })
}

/// Times one view three ways. `camera` is rescaled to `cfg.image_size`.
pub fn benchmark(
    teacher: &NetworkGrid<f32>,
    student: &NetworkGrid<f32>,
    occupancy: &OccupancyGrid,
    camera: &Camera,
    cfg: &BenchConfig,
) -> Result<Vec<BenchRow>> {
    if cfg.runs == 0 {
        return Err(Error::InvalidConfig("benchmark needs at least one timed run".into()));
    }
    let scale = cfg.image_size as f32 / camera.width as f32;
    let camera = Camera::new(
        cfg.image_size,
        (camera.height as f32 * scale).round().max(1.0) as u32,
        camera.fx * scale,
        camera.fy * scale,
        camera.cx * scale,
        camera.cy * scale,
        camera.pose,
    )?;
    let dense = RenderConfig {
        samples_per_ray: cfg.samples_per_ray,
        epsilon: 0.0,
        ..Default::default()
    };
    let fast = RenderConfig {
        epsilon: cfg.epsilon,
        ..dense.clone()
    };
    let mut rows = vec![
        time_row("dense_teacher", teacher, None, &camera, &dense, cfg)?,
        time_row("teacher_ess_ert", teacher, Some(occupancy), &camera, &fast, cfg)?,
        time_row("tiny_grid_ess_ert", student, Some(occupancy), &camera, &fast, cfg)?,
    ];
    let slowest = rows[0].median_ms;
    for r in &mut rows {
        r.speedup = slowest / r.median_ms;
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub queries: usize,
    pub grouped_ms: f64,
    pub per_query_ms: f64,
    pub grouped_per_second: f64,
    pub ratio: f64,
}

/// Grouped against per-query evaluation of `count` random queries.
pub fn throughput(grid: &NetworkGrid<f32>, count: usize, seed: u64) -> Result<ThroughputReport> {
    use rand::Rng;
    let mut rng = stream_rng(seed, 0);
    let mut batch = QueryBatch::default();
    for _ in 0..64 {
        let d = Vec3::new(rng.gen::<f32>() - 0.5, rng.gen::<f32>() - 0.5, rng.gen::<f32>() - 0.5);
        batch.directions.push(d.normalize());
    }
    let (lo, ext) = (grid.aabb.min_v(), grid.aabb.extent());
    for _ in 0..count {
        let t = Vec3::new(rng.gen(), rng.gen(), rng.gen());
        batch.push(grid, lo + ext.component_mul(&t), rng.gen_range(0..64));
    }
    let start = Instant::now();
    let layout = group_by_network(&batch.network_index, grid.network_count());
    grouped_forward(grid, &batch, &layout)?;
    let grouped_ms = start.elapsed().as_secs_f64() * 1e3;
    let start = Instant::now();
    per_query_forward(grid, &batch)?;
    let per_query_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(ThroughputReport {
        queries: count,
        grouped_ms,
        per_query_ms,
        grouped_per_second: count as f64 / (grouped_ms / 1e3),
        ratio: per_query_ms / grouped_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even_counts() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
