mod common;

use common::*;
use nerfgrid_core::batched::parallel_map;
use nerfgrid_core::*;

#[test]
fn grouped_matches_per_query_oracle_and_ignores_arrival_order() {
    let (oracle, shuffle) = grouped_equivalence(100_000, 11);
    assert!(oracle <= 1e-6, "{oracle:e}");
    assert!(shuffle <= 1e-6, "{shuffle:e}");
}

#[test]
fn grouped_output_is_identical_across_worker_counts() {
    let aabb = Aabb::new([-1.0; 3], [1.0; 3]).unwrap();
    let grid: NetworkGrid<f32> = NetworkGrid::random(&manifest(aabb, [4, 4, 4], tiny_arch()), 2).unwrap();
    let batch = random_queries(&grid, 20_000, 2);
    let layout = group_by_network(&batch.network_index, grid.network_count());
    let run = |workers: usize| {
        Workers::new(workers)
            .unwrap()
            .run(|| grouped_forward(&grid, &batch, &layout).unwrap())
            .unwrap()
    };
    let base = run(1);
    for w in [2, 4, 8] {
        assert!(run(w) == base, "{w} workers");
    }
}

#[test]
fn parallel_map_is_order_preserving_for_any_worker_count() {
    let items: Vec<u64> = (0..1000).collect();
    let base: Vec<u64> = items.iter().map(|v| v * v + 1).collect();
    for w in [1, 2, 4, 8] {
        assert_eq!(parallel_map(items.clone(), w, |v| v * v + 1).unwrap(), base);
    }
}

#[test]
fn networks_without_queries_are_skipped() {
    let aabb = Aabb::new([0.0; 3], [1.0; 3]).unwrap();
    let grid: NetworkGrid<f32> = NetworkGrid::random(&manifest(aabb, [8, 8, 8], tiny_arch()), 4).unwrap();
    let mut batch = QueryBatch::default();
    batch.directions.push(Vec3::x());
    for i in 0..50 {
        batch.push(&grid, Vec3::new(0.05, 0.05, 0.01 * i as f32 + 0.5), 0);
    }
    let layout = group_by_network(&batch.network_index, grid.network_count());
    assert!(layout.segments.len() <= 5);
    let out = grouped_forward(&grid, &batch, &layout).unwrap();
    let oracle = nerfgrid_core::batched::per_query_forward(&grid, &batch).unwrap();
    assert!(max_output_difference(&out, &oracle) <= 1e-6);
}
