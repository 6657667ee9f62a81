use nerfgrid_core::field::cell_bounds;
use nerfgrid_core::occupancy::FnDensity;
use nerfgrid_core::*;

const CENTER: [f32; 3] = [0.5, 0.5, 0.5];
const RADIUS: f32 = 0.3;

fn inside(x: &Vec3) -> bool {
    (x - Vec3::from(CENTER)).norm() < RADIUS
}

/// Cells with at least one of the 27 probes (corners, edge and face
/// midpoints, center) inside the sphere, computed cell by cell.
fn geometric_oracle(aabb: &Aabb, r: GridResolution) -> Vec<bool> {
    (0..r.cell_count())
        .map(|i| {
            let b = cell_bounds(r.unflatten(i), aabb, r);
            let (lo, hi) = (b.min_v(), b.max_v());
            let mut any = false;
            for a in 0..3 {
                for c in 0..3 {
                    for e in 0..3 {
                        let t = Vec3::new(a as f32, c as f32, e as f32) / 2.0;
                        let p = lo + (hi - lo).component_mul(&t);
                        any |= inside(&p);
                    }
                }
            }
            any
        })
        .collect()
}

#[test]
fn sphere_occupancy_matches_probe_oracle() {
    let aabb = Aabb::new([0.0; 3], [1.0; 3]).unwrap();
    let r = GridResolution::cube(32);
    let field = FnDensity(|x: &Vec3| if inside(x) { 100.0 } else { 0.0 });
    let occ = extract_occupancy(&field, &aabb, r, 10.0).unwrap();
    let oracle = geometric_oracle(&aabb, r);
    let mismatches: Vec<usize> = (0..r.cell_count()).filter(|&i| occ.get(i) != oracle[i]).collect();
    assert!(mismatches.is_empty(), "{} cells differ, first {:?}", mismatches.len(), &mismatches[..mismatches.len().min(5)]);
    let count = oracle.iter().filter(|&&o| o).count();
    assert_eq!(occ.occupied_count(), count);
    // Every cell whose center is inside must be marked, and the marked
    // volume cannot be smaller than the sphere.
    assert!(count as f64 / r.cell_count() as f64 > 4.0 / 3.0 * std::f64::consts::PI * 0.027);
}

#[test]
fn analytic_scene_occupancy_covers_its_density() {
    let scene = AnalyticScene::standard();
    let r = GridResolution::cube(48);
    let geometric = scene.occupancy(r).unwrap();
    let extracted = extract_occupancy(&scene, &scene.aabb, r, 0.0).unwrap();
    // Geometric occupancy is conservative: any cell the probes see as
    // non-empty is geometrically occupied.
    for i in 0..r.cell_count() {
        assert!(!extracted.get(i) || geometric.get(i), "cell {i}");
    }
    assert!(extracted.occupied_count() > 0);
}
