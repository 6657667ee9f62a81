//! Grouped variable-batch evaluation of many networks.
//!
//! Queries arrive in arbitrary order, each tagged with the network that owns
//! its position. A counting sort groups them into one contiguous segment per
//! network; every segment is then pushed through its network as a stacked
//! matrix product per layer, and results are scattered back to arrival order.

use std::panic::{catch_unwind, AssertUnwindSafe};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::Vec3;
use crate::grid::NetworkGrid;
use crate::mlp::{forward_batch, forward_density};
use crate::real::Real;

/// Rows per evaluation block; larger segments are split so memory and work
/// granularity stay bounded. Fixed, so results never depend on worker count.
pub const MAX_BLOCK_ROWS: usize = 2048;

/// Raw network queries. Directions are shared through a table since every
/// sample on a ray looks the same way.
#[derive(Clone, Debug, Default)]
pub struct QueryBatch {
    pub positions: Vec<Vec3>,
    pub direction_index: Vec<u32>,
    pub directions: Vec<Vec3>,
    pub network_index: Vec<u32>,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn clear(&mut self) {
        self.positions.clear();
        self.direction_index.clear();
        self.directions.clear();
        self.network_index.clear();
    }

    /// Drops the queries but keeps the direction table.
    pub fn clear_queries(&mut self) {
        self.positions.clear();
        self.direction_index.clear();
        self.network_index.clear();
    }

    /// Appends a query whose owning network is already known.
    #[inline]
    pub fn push_raw(&mut self, position: Vec3, direction: u32, network: u32) {
        self.positions.push(position);
        self.direction_index.push(direction);
        self.network_index.push(network);
    }

    /// Appends a query, binning the position into `grid`.
    pub fn push<T: Real>(&mut self, grid: &NetworkGrid<T>, position: Vec3, direction: u32) {
        self.network_index.push(grid.network_index_clamped(&position) as u32);
        self.positions.push(position);
        self.direction_index.push(direction);
    }

    pub fn validate(&self, network_count: usize) -> Result<()> {
        let n = self.positions.len();
        for (what, len) in [
            ("direction_index", self.direction_index.len()),
            ("network_index", self.network_index.len()),
        ] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n,
                    got: len,
                });
            }
        }
        if let Some(&bad) = self.network_index.iter().find(|&&i| i as usize >= network_count) {
            return Err(Error::MissingNetwork {
                index: bad as usize,
                count: network_count,
            });
        }
        if let Some(&bad) = self
            .direction_index
            .iter()
            .find(|&&i| i as usize >= self.directions.len())
        {
            return Err(Error::DimensionMismatch {
                what: "direction table",
                expected: bad as usize + 1,
                got: self.directions.len(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub network: usize,
    pub offset: usize,
    pub len: usize,
}

/// Queries sorted by network.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroupedLayout {
    /// `order[sorted_position] = original query index`.
    pub order: Vec<u32>,
    /// Non-empty segments in increasing network order.
    pub segments: Vec<Segment>,
    /// CSR offsets: network `i` owns `order[starts[i]..starts[i + 1]]`.
    pub starts: Vec<usize>,
}

impl GroupedLayout {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Possibly empty range of sorted positions owned by `network`.
    pub fn segment_of(&self, network: usize) -> std::ops::Range<usize> {
        self.starts[network]..self.starts[network + 1]
    }

    /// Inverse of `order`: sorted position of each original query.
    pub fn rank(&self) -> Vec<u32> {
        let mut rank = vec![0u32; self.order.len()];
        for (pos, &orig) in self.order.iter().enumerate() {
            rank[orig as usize] = pos as u32;
        }
        rank
    }

    /// Restores arrival order of values given in sorted order.
    pub fn scatter<V: Copy + Default>(&self, sorted: &[V]) -> Vec<V> {
        let mut out = vec![V::default(); sorted.len()];
        for (pos, &orig) in self.order.iter().enumerate() {
            out[orig as usize] = sorted[pos];
        }
        out
    }
}

/// Stable counting sort of query indices by network.
pub fn group_by_network(network_index: &[u32], network_count: usize) -> GroupedLayout {
    let mut starts = vec![0usize; network_count + 1];
    for &n in network_index {
        starts[n as usize + 1] += 1;
    }
    for i in 0..network_count {
        starts[i + 1] += starts[i];
    }
    let mut cursor = starts.clone();
    let mut order = vec![0u32; network_index.len()];
    for (q, &n) in network_index.iter().enumerate() {
        let slot = &mut cursor[n as usize];
        order[*slot] = q as u32;
        *slot += 1;
    }
    let segments = (0..network_count)
        .filter(|&i| starts[i + 1] > starts[i])
        .map(|i| Segment {
            network: i,
            offset: starts[i],
            len: starts[i + 1] - starts[i],
        })
        .collect();
    GroupedLayout {
        order,
        segments,
        starts,
    }
}

/// One unit of segment work: a contiguous slice of a segment.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Block {
    pub network: usize,
    pub offset: usize,
    pub len: usize,
}

pub(crate) fn blocks(layout: &GroupedLayout, max_rows: usize) -> Vec<Block> {
    let mut out = Vec::with_capacity(layout.segments.len());
    for s in &layout.segments {
        let mut at = 0;
        while at < s.len {
            let len = (s.len - at).min(max_rows);
            out.push(Block {
                network: s.network,
                offset: s.offset + at,
                len,
            });
            at += len;
        }
    }
    out
}

/// Evaluates every query with its own network; results in arrival order.
pub fn grouped_forward<T: Real>(
    grid: &NetworkGrid<T>,
    batch: &QueryBatch,
    layout: &GroupedLayout,
) -> Result<Vec<([T; 3], T)>> {
    batch.validate(grid.network_count())?;
    if layout.len() != batch.len() {
        return Err(Error::DimensionMismatch {
            what: "grouped layout",
            expected: batch.len(),
            got: layout.len(),
        });
    }
    let dir_dim = grid.encoding.direction_dim();
    let pos_dim = grid.encoding.position_dim();
    let mut dir_table = vec![T::zero(); batch.directions.len() * dir_dim];
    for (d, out) in batch.directions.iter().zip(dir_table.chunks_mut(dir_dim)) {
        grid.encode_direction_into(d, out);
    }

    let work = blocks(layout, MAX_BLOCK_ROWS);
    let results: Vec<Result<(Vec<T>, Vec<T>)>> = work
        .par_iter()
        .map(|b| {
            let mut x_enc = vec![T::zero(); b.len * pos_dim];
            let mut d_enc = vec![T::zero(); b.len * dir_dim];
            for (row, &q) in layout.order[b.offset..b.offset + b.len].iter().enumerate() {
                let q = q as usize;
                grid.encode_position_into(&batch.positions[q], &mut x_enc[row * pos_dim..(row + 1) * pos_dim]);
                let di = batch.direction_index[q] as usize;
                d_enc[row * dir_dim..(row + 1) * dir_dim]
                    .copy_from_slice(&dir_table[di * dir_dim..(di + 1) * dir_dim]);
            }
            let mut color = vec![T::zero(); b.len * 3];
            let mut sigma = vec![T::zero(); b.len];
            forward_batch(&grid.params[b.network], &x_enc, &d_enc, b.len, &mut color, &mut sigma)?;
            Ok((color, sigma))
        })
        .collect();

    let mut out = vec![([T::zero(); 3], T::zero()); batch.len()];
    for (b, res) in work.iter().zip(results) {
        let (color, sigma) = res?;
        for row in 0..b.len {
            out[layout.order[b.offset + row] as usize] =
                ([color[3 * row], color[3 * row + 1], color[3 * row + 2]], sigma[row]);
        }
    }
    Ok(out)
}

/// Densities at arbitrary points of the grid, grouped by owning network.
pub fn grouped_density(grid: &NetworkGrid<f32>, points: &[Vec3]) -> Result<Vec<f32>> {
    let index: Vec<u32> = points.iter().map(|p| grid.network_index_clamped(p) as u32).collect();
    let layout = group_by_network(&index, grid.network_count());
    let pos_dim = grid.encoding.position_dim();
    let work = blocks(&layout, MAX_BLOCK_ROWS);
    let results: Vec<Result<Vec<f32>>> = work
        .par_iter()
        .map(|b| {
            let mut x_enc = vec![0.0f32; b.len * pos_dim];
            for (row, &q) in layout.order[b.offset..b.offset + b.len].iter().enumerate() {
                grid.encode_position_into(&points[q as usize], &mut x_enc[row * pos_dim..(row + 1) * pos_dim]);
            }
            let mut sigma = vec![0.0f32; b.len];
            forward_density(&grid.params[b.network], &x_enc, b.len, &mut sigma)?;
            Ok(sigma)
        })
        .collect();
    let mut out = vec![0.0f32; points.len()];
    for (b, res) in work.iter().zip(results) {
        for (row, value) in res?.into_iter().enumerate() {
            out[layout.order[b.offset + row] as usize] = value;
        }
    }
    Ok(out)
}

/// Baseline without grouping: every query dispatched to its network alone.
pub fn per_query_forward(grid: &NetworkGrid<f32>, batch: &QueryBatch) -> Result<Vec<([f32; 3], f32)>> {
    batch.validate(grid.network_count())?;
    batch
        .positions
        .iter()
        .zip(&batch.direction_index)
        .zip(&batch.network_index)
        .map(|((x, &d), &n)| {
            let mut xe = vec![0.0f32; grid.encoding.position_dim()];
            let mut de = vec![0.0f32; grid.encoding.direction_dim()];
            grid.encode_position_into(x, &mut xe);
            grid.encode_direction_into(&batch.directions[d as usize], &mut de);
            crate::mlp::forward(&grid.params[n as usize], &xe, &de)
        })
        .collect()
}

/// Pool of worker threads shared by rendering and training.
#[derive(Clone, Debug)]
pub struct Workers {
    pool: std::sync::Arc<rayon::ThreadPool>,
}

impl Workers {
    pub fn new(count: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(count.max(1))
            .build()
            .map_err(|e| Error::Worker(e.to_string()))?;
        Ok(Self {
            pool: std::sync::Arc::new(pool),
        })
    }

    pub fn count(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Runs `f` inside the pool; a panic in any worker becomes an error.
    pub fn run<R: Send>(&self, f: impl FnOnce() -> R + Send) -> Result<R> {
        catch_unwind(AssertUnwindSafe(|| self.pool.install(f))).map_err(|p| Error::Worker(panic_message(&p)))
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".to_string()
    }
}

/// Maps independent work items on `worker_count` threads; output order and
/// values match sequential execution.
pub fn parallel_map<I, R, F>(items: Vec<I>, worker_count: usize, f: F) -> Result<Vec<R>>
where
    I: Send,
    R: Send,
    F: Fn(I) -> R + Send + Sync,
{
    Workers::new(worker_count)?.run(|| items.into_par_iter().map(f).collect())
}
