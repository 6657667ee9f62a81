mod common;

use common::*;
use nerfgrid_core::checkpoint::encode_checkpoint;
use nerfgrid_core::mlp::{LayerRole, MlpParams};
use nerfgrid_core::pipeline::{distill, finetune, no_log, teacher_occupancy, train_teacher};
use nerfgrid_core::train::{distill_gradients, photometric_step_on, RayBatch};
use nerfgrid_core::*;

fn fixed_batch(aabb: &Aabb) -> RayBatch {
    let rays = rays_through(aabb, 64, 4);
    let targets = (0..rays.len()).map(|i| [0.2 + 0.01 * i as f32, 0.5, 0.8 - 0.01 * i as f32]).collect();
    RayBatch { rays, targets }
}

#[test]
fn repeated_steps_on_one_batch_reduce_the_loss() {
    let aabb = Aabb::new([-1.0; 3], [1.0; 3]).unwrap();
    let mut grid: NetworkGrid<f32> = NetworkGrid::random(&manifest(aabb, [2, 2, 2], tiny_arch()), 8).unwrap();
    let mut state = OptimizerState::for_grid(&grid);
    let batch = fixed_batch(&aabb);
    let cfg = dense(64, 0.0);
    let losses: Vec<f64> = (0..50)
        .map(|_| photometric_step_on(&mut grid, None, &batch, &cfg, 1e-6, &mut state, 1e-3).unwrap().loss)
        .collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
    assert!(losses[49] < 0.5 * losses[0], "{} -> {}", losses[0], losses[49]);
}

/// Zero weights, fixed biases: the same color and density everywhere.
fn constant_params(layout: std::sync::Arc<nerfgrid_core::mlp::Layout>) -> MlpParams<f64> {
    let mut p = MlpParams::zeros(layout.clone());
    for l in &layout.layers {
        match l.role {
            LayerRole::Density => p.data[l.bias_range()][0] = 7.0,
            LayerRole::Color => p.data[l.bias_range()].copy_from_slice(&[0.4, -1.0, 2.0]),
            _ => {}
        }
    }
    p
}

#[test]
fn exact_copy_of_constant_teacher_has_zero_distillation_loss() {
    let aabb = Aabb::new([0.0; 3], [1.0, 2.0, 1.0]).unwrap();
    let layout = std::sync::Arc::new(nerfgrid_core::mlp::Layout::new(&tiny_arch()).unwrap());
    let p = constant_params(layout);
    let e = Default::default();
    let teacher = NetworkGrid::uniform(aabb, GridResolution::cube(1), e, p.clone()).unwrap();
    let student = NetworkGrid::uniform(aabb, GridResolution([2, 4, 2]), e, p).unwrap();
    let (loss, grads) = distill_gradients(&student, &teacher, &DistillLoss::default(), 0, 0).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.iter().all(|g| g.as_ref().unwrap().iter().all(|&v| v == 0.0)));
}

#[test]
fn distillation_gradient_matches_finite_differences() {
    let aabb = Aabb::new([-1.0; 3], [1.0; 3]).unwrap();
    let teacher: NetworkGrid<f64> = NetworkGrid::random(&manifest(aabb, [1, 1, 1], tiny_arch()), 1).unwrap();
    let student: NetworkGrid<f64> = NetworkGrid::random(&manifest(aabb, [2, 1, 1], tiny_arch()), 2).unwrap();
    let loss = DistillLoss {
        points_per_cell: 4,
        reference_delta: 0.05,
        ..Default::default()
    };
    let (_, grads) = distill_gradients(&student, &teacher, &loss, 3, 0).unwrap();
    let mut r = rng(5);
    let h = 1e-4;
    for _ in 0..30 {
        use rand::Rng;
        let n = r.gen_range(0..2);
        let i = r.gen_range(0..student.layout.param_count);
        let mut s = student.clone();
        s.params[n].data[i] += h;
        let up = distill_gradients(&s, &teacher, &loss, 3, 0).unwrap().0;
        s.params[n].data[i] -= 2.0 * h;
        let down = distill_gradients(&s, &teacher, &loss, 3, 0).unwrap().0;
        let fd = (up - down) / (2.0 * h);
        let a = grads[n].as_ref().unwrap()[i];
        assert!(relative_error(a, fd) <= 1e-4, "network {n} param {i}: {a} vs {fd}");
    }
}

#[test]
fn default_grid_checkpoint_is_under_100_mib() {
    let aabb = Aabb::new([-1.0; 3], [1.0; 3]).unwrap();
    let cfg = TrainConfig::default();
    let grid: NetworkGrid<f32> = NetworkGrid::random(&cfg.student_manifest(aabb), 0).unwrap();
    assert_eq!(grid.network_count(), 4096);
    let bytes = encode_checkpoint(&grid, None).unwrap().len();
    assert!(bytes < 100 * 1024 * 1024, "{bytes}");
}

fn micro_dataset() -> SceneDataset {
    let cfg = ToyDatasetConfig {
        train_views: 6,
        test_views: 2,
        image_size: 16,
        oracle_samples: 128,
        ..Default::default()
    };
    generate_toy_dataset(&AnalyticScene::standard(), &cfg).unwrap()
}

fn micro_config() -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.log_every = 5;
    cfg.teacher.width = 16;
    cfg.teacher.steps = 6;
    cfg.teacher.batch_size_pixels = 32;
    cfg.teacher.samples_per_ray = 16;
    cfg.distill.steps = 4;
    cfg.distill.points_per_cell = 2;
    cfg.finetune.steps = 4;
    cfg.finetune.batch_size_pixels = 32;
    cfg.finetune.samples_per_ray = 32;
    cfg.grid.max_resolution = 4;
    cfg.grid.occupancy_multiplier = 4;
    cfg.grid.tau = 0.0;
    cfg
}

/// Every stage in miniature; returns the final checkpoint bytes.
fn micro_pipeline(ds: &SceneDataset, cfg: &TrainConfig) -> Vec<u8> {
    let (teacher, curve) = train_teacher(ds, cfg, &mut no_log).unwrap();
    assert_eq!(curve.steps.last(), Some(&6));
    let occ = teacher_occupancy(&teacher, cfg).unwrap();
    let (mut student, _) = distill(&teacher, cfg, &mut no_log).unwrap();
    finetune(&mut student, &occ, ds, cfg, &mut no_log).unwrap();
    encode_checkpoint(&student, Some(&occ)).unwrap()
}

#[test]
fn training_is_deterministic_across_runs_and_worker_counts() {
    let ds = micro_dataset();
    let cfg = micro_config();
    let base = micro_pipeline(&ds, &cfg);
    assert_eq!(micro_pipeline(&ds, &cfg), base);
    for w in [2, 4, 8] {
        let out = Workers::new(w).unwrap().run(|| micro_pipeline(&ds, &cfg)).unwrap();
        assert!(out == base, "{w} workers");
    }
}

#[test]
fn distillation_loss_falls_tenfold_on_a_toy_teacher() {
    let ds = micro_dataset();
    let mut cfg = micro_config();
    cfg.teacher.steps = 30;
    cfg.distill.steps = 600;
    cfg.distill.points_per_cell = 32;
    cfg.distill.learning_rate = 3e-3;
    cfg.log_every = 10;
    let (teacher, _) = train_teacher(&ds, &cfg, &mut no_log).unwrap();
    let (_, curve) = distill(&teacher, &cfg, &mut no_log).unwrap();
    let (first, last) = (curve.first().unwrap(), curve.last().unwrap());
    assert!(last * 10.0 <= first, "{first} -> {last}");
}

#[test]
fn stage_errors_name_the_stage() {
    let ds = micro_dataset();
    let mut cfg = micro_config();
    cfg.teacher.steps = 1;
    let mut empty = ds.clone();
    empty.views.retain(|v| v.split != Split::Train);
    let err = run_pipeline(&empty, &cfg, &RenderConfig::default(), false, &mut no_log).unwrap_err();
    assert!(err.to_string().contains("teacher"), "{err}");
}

#[test]
fn log_lines_are_json() {
    let ds = micro_dataset();
    let cfg = micro_config();
    let mut lines = Vec::new();
    train_teacher(&ds, &cfg, &mut |l: &LogLine| lines.push(serde_json::to_string(l).unwrap())).unwrap();
    assert_eq!(lines.len(), 2);
    let v: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    assert_eq!(v["stage"], "teacher");
    assert_eq!(v["step"], 5);
}
