//! The three training stages: teacher, distillation, fine-tuning.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::batched::grouped_density;
use crate::dataset::{SceneDataset, View};
use crate::encoding::PositionalEncoding;
use crate::error::{Error, Result};
use crate::field::{Aabb, GridResolution, Vec3};
use crate::grid::{grid_resolution_rule, GridManifest, NetworkGrid};
use crate::image::compute_psnr;
use crate::mlp::MlpArchitecture;
use crate::occupancy::{extract_occupancy, OccupancyGrid};
use crate::optim::{lr_schedule, OptimizerState};
use crate::render::{render_image, RadianceField, RenderConfig};
use crate::train::{distill_step, photometric_step, DistillLoss};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    /// Trunk width; the direction layer gets half of it.
    pub width: usize,
    pub steps: usize,
    pub batch_size_pixels: usize,
    pub samples_per_ray: usize,
    pub learning_rate: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            width: 256,
            steps: 600_000,
            batch_size_pixels: 8192,
            samples_per_ray: 384,
            learning_rate: 5e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub points_per_cell: usize,
    pub alpha_weight: f64,
    pub color_weight: f64,
    /// Segment length for the density to alpha conversion; defaults to the
    /// box diagonal over the fine-tuning sample count.
    pub reference_delta: Option<f32>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 150_000,
            learning_rate: 5e-4,
            points_per_cell: 8,
            alpha_weight: 1.0,
            color_weight: 1.0,
            reference_delta: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size_pixels: usize,
    pub samples_per_ray: usize,
    pub learning_rate: f64,
    pub l2_reg_weight: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 1_000_000,
            batch_size_pixels: 8192,
            samples_per_ray: 384,
            learning_rate: 5e-4,
            l2_reg_weight: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Networks along the longest box axis.
    pub max_resolution: usize,
    /// Occupancy cells per network cell along each axis.
    pub occupancy_multiplier: usize,
    /// Density threshold for occupancy.
    pub tau: f32,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            max_resolution: 16,
            occupancy_multiplier: 16,
            tau: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Steps between loss log lines.
    pub log_every: usize,
    pub background: [f32; 3],
    pub encoding: PositionalEncoding,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub finetune: FinetuneConfig,
    pub grid: GridConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            log_every: 100,
            background: [1.0; 3],
            encoding: PositionalEncoding::default(),
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
            finetune: FinetuneConfig::default(),
            grid: GridConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Reduced schedule for single-machine CPU runs on 128x128 toy scenes.
    pub fn desk() -> Self {
        Self {
            log_every: 250,
            teacher: TeacherConfig {
                width: 128,
                steps: 2_000,
                batch_size_pixels: 256,
                samples_per_ray: 96,
                learning_rate: 1e-3,
            },
            distill: DistillConfig {
                steps: 1_500,
                learning_rate: 2e-3,
                points_per_cell: 16,
                ..Default::default()
            },
            finetune: FinetuneConfig {
                steps: 3_000,
                batch_size_pixels: 1024,
                samples_per_ray: 384,
                learning_rate: 1e-3,
                l2_reg_weight: 1e-6,
            },
            grid: GridConfig {
                occupancy_multiplier: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("teacher.width", self.teacher.width),
            ("teacher.batch_size_pixels", self.teacher.batch_size_pixels),
            ("teacher.samples_per_ray", self.teacher.samples_per_ray),
            ("finetune.batch_size_pixels", self.finetune.batch_size_pixels),
            ("finetune.samples_per_ray", self.finetune.samples_per_ray),
            ("distill.points_per_cell", self.distill.points_per_cell),
            ("grid.max_resolution", self.grid.max_resolution),
            ("grid.occupancy_multiplier", self.grid.occupancy_multiplier),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !(self.grid.tau >= 0.0) {
            return Err(Error::InvalidConfig("grid.tau must be >= 0".into()));
        }
        if !(self.finetune.l2_reg_weight >= 0.0) {
            return Err(Error::InvalidConfig("finetune.l2_reg_weight must be >= 0".into()));
        }
        Ok(())
    }

    pub fn teacher_manifest(&self, aabb: Aabb) -> GridManifest {
        let e = self.encoding;
        GridManifest {
            aabb,
            resolution: GridResolution::cube(1),
            encoding: e,
            architecture: MlpArchitecture::scaled_full(self.teacher.width, e.position_dim(), e.direction_dim()),
        }
    }

    pub fn student_manifest(&self, aabb: Aabb) -> GridManifest {
        let e = self.encoding;
        GridManifest {
            aabb,
            resolution: grid_resolution_rule(&aabb, self.grid.max_resolution),
            encoding: e,
            architecture: MlpArchitecture::tiny(e.position_dim(), e.direction_dim()),
        }
    }

    pub fn occupancy_resolution(&self, aabb: &Aabb) -> GridResolution {
        grid_resolution_rule(aabb, self.grid.max_resolution).scaled(self.grid.occupancy_multiplier)
    }

    pub fn distill_loss(&self, aabb: &Aabb) -> DistillLoss {
        DistillLoss {
            points_per_cell: self.distill.points_per_cell,
            alpha_weight: self.distill.alpha_weight,
            color_weight: self.distill.color_weight,
            reference_delta: self
                .distill
                .reference_delta
                .unwrap_or(aabb.diagonal() / self.finetune.samples_per_ray as f32),
        }
    }

    fn sampling(&self, samples_per_ray: usize, seed: u64) -> RenderConfig {
        RenderConfig {
            samples_per_ray,
            epsilon: 0.0,
            background: self.background,
            stratified: true,
            seed,
            ..Default::default()
        }
    }
}

/// One JSON line of training progress.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub stage: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub elapsed_s: f64,
}

pub type Log<'a> = &'a mut dyn FnMut(&LogLine);

/// Discards log lines.
pub fn no_log(_: &LogLine) {}

fn loss_line(stage: &str, step: usize, loss: f64, lr: f64, start: &Instant) -> LogLine {
    LogLine {
        stage: stage.into(),
        step: Some(step),
        loss: Some(loss),
        lr: Some(lr),
        elapsed_s: start.elapsed().as_secs_f64(),
        ..Default::default()
    }
}

fn train_views(dataset: &SceneDataset) -> Result<Vec<&View>> {
    let views = dataset.train();
    if views.is_empty() {
        return Err(Error::Dataset("dataset has no training views".into()));
    }
    Ok(views)
}

/// Loss values recorded at every log point, plus the last step's loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub steps: Vec<usize>,
    pub losses: Vec<f64>,
}

impl LossCurve {
    fn push(&mut self, step: usize, loss: f64) {
        self.steps.push(step);
        self.losses.push(loss);
    }

    pub fn first(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Photometric training of any grid; shared by the teacher, fine-tuning and
/// the from-scratch baseline.
#[allow(clippy::too_many_arguments)]
fn photometric_stage(
    stage: &str,
    grid: &mut NetworkGrid<f32>,
    occupancy: Option<&OccupancyGrid>,
    dataset: &SceneDataset,
    cfg: &TrainConfig,
    steps: usize,
    batch: usize,
    samples_per_ray: usize,
    lr: f64,
    reg: f64,
    seed: u64,
    log: Log,
) -> Result<LossCurve> {
    let views = train_views(dataset)?;
    let sampling = cfg.sampling(samples_per_ray, seed);
    let mut state = OptimizerState::for_grid(grid);
    let mut curve = LossCurve::default();
    let start = Instant::now();
    let mut window = 0.0;
    let mut count = 0;
    for step in 0..steps {
        let rate = lr_schedule(step, lr, steps);
        let r = photometric_step(grid, occupancy, &views, batch, &sampling, reg, &mut state, step, rate)?;
        if !r.loss.is_finite() {
            return Err(Error::InvalidConfig(format!("{stage}: loss diverged at step {step}")));
        }
        window += r.loss;
        count += 1;
        if (step + 1) % cfg.log_every.max(1) == 0 || step + 1 == steps {
            let mean = window / count as f64;
            curve.push(step + 1, mean);
            log(&loss_line(stage, step + 1, mean, rate, &start));
            window = 0.0;
            count = 0;
        }
    }
    Ok(curve)
}

pub fn train_teacher(dataset: &SceneDataset, cfg: &TrainConfig, log: Log) -> Result<(NetworkGrid<f32>, LossCurve)> {
    cfg.validate()?;
    let mut teacher = NetworkGrid::random(&cfg.teacher_manifest(dataset.aabb), cfg.seed ^ 0x7e)?;
    let t = &cfg.teacher;
    let curve = photometric_stage(
        "teacher",
        &mut teacher,
        None,
        dataset,
        cfg,
        t.steps,
        t.batch_size_pixels,
        t.samples_per_ray,
        t.learning_rate,
        0.0,
        cfg.seed ^ 0x7e,
        log,
    )?;
    Ok((teacher, curve))
}

/// Occupancy of a trained field at the configured resolution and threshold.
pub fn teacher_occupancy(teacher: &NetworkGrid<f32>, cfg: &TrainConfig) -> Result<OccupancyGrid> {
    extract_occupancy(teacher, &teacher.aabb, cfg.occupancy_resolution(&teacher.aabb), cfg.grid.tau)
}

pub fn distill(teacher: &NetworkGrid<f32>, cfg: &TrainConfig, log: Log) -> Result<(NetworkGrid<f32>, LossCurve)> {
    cfg.validate()?;
    let mut student = NetworkGrid::random(&cfg.student_manifest(teacher.aabb), cfg.seed ^ 0xd1)?;
    let loss = cfg.distill_loss(&teacher.aabb);
    let mut state = OptimizerState::for_grid(&student);
    let mut curve = LossCurve::default();
    let start = Instant::now();
    let steps = cfg.distill.steps;
    let (mut window, mut count) = (0.0, 0);
    for step in 0..steps {
        let rate = lr_schedule(step, cfg.distill.learning_rate, steps);
        let value = distill_step(&mut student, teacher, &loss, &mut state, cfg.seed ^ 0xd1, step, rate)?;
        if !value.is_finite() {
            return Err(Error::InvalidConfig(format!("distill: loss diverged at step {step}")));
        }
        if step == 0 {
            curve.push(0, value);
            log(&loss_line("distill", 0, value, rate, &start));
        }
        window += value;
        count += 1;
        if (step + 1) % cfg.log_every.max(1) == 0 || step + 1 == steps {
            let mean = window / count as f64;
            curve.push(step + 1, mean);
            log(&loss_line("distill", step + 1, mean, rate, &start));
            window = 0.0;
            count = 0;
        }
    }
    Ok((student, curve))
}

pub fn finetune(
    student: &mut NetworkGrid<f32>,
    occupancy: &OccupancyGrid,
    dataset: &SceneDataset,
    cfg: &TrainConfig,
    log: Log,
) -> Result<LossCurve> {
    cfg.validate()?;
    let f = &cfg.finetune;
    photometric_stage(
        "finetune",
        student,
        Some(occupancy),
        dataset,
        cfg,
        f.steps,
        f.batch_size_pixels,
        f.samples_per_ray,
        f.learning_rate,
        f.l2_reg_weight,
        cfg.seed ^ 0xf7,
        log,
    )
}

/// Baseline without a teacher: a fresh grid trained photometrically for as
/// many steps as distillation and fine-tuning take together. Without a
/// teacher there is no occupancy grid, so sampling is dense, with the
/// teacher's per-ray sample count.
pub fn train_from_scratch(dataset: &SceneDataset, cfg: &TrainConfig, log: Log) -> Result<(NetworkGrid<f32>, LossCurve)> {
    cfg.validate()?;
    let mut student = NetworkGrid::random(&cfg.student_manifest(dataset.aabb), cfg.seed ^ 0xd1)?;
    let f = &cfg.finetune;
    let curve = photometric_stage(
        "scratch",
        &mut student,
        None,
        dataset,
        cfg,
        cfg.distill.steps + f.steps,
        f.batch_size_pixels,
        cfg.teacher.samples_per_ray,
        f.learning_rate,
        f.l2_reg_weight,
        cfg.seed ^ 0x5c,
        log,
    )?;
    Ok((student, curve))
}

/// Mean PSNR over `views`.
pub fn evaluate_psnr(
    field: &dyn RadianceField,
    occupancy: Option<&OccupancyGrid>,
    views: &[&View],
    render: &RenderConfig,
) -> Result<f64> {
    if views.is_empty() {
        return Err(Error::Dataset("no views to evaluate".into()));
    }
    let mut total = 0.0;
    for v in views {
        let (img, _) = render_image(field, occupancy, &v.camera, render)?;
        total += compute_psnr(&img, &v.image)?;
    }
    Ok(total / views.len() as f64)
}

/// Mean density at `points` as the renderer sees it: zero wherever
/// `occupancy` marks the cell empty.
pub fn mean_density(grid: &NetworkGrid<f32>, occupancy: Option<&OccupancyGrid>, points: &[Vec3]) -> Result<f64> {
    if points.is_empty() {
        return Ok(0.0);
    }
    let kept: Vec<Vec3> = match occupancy {
        Some(occ) => points.iter().filter(|p| occ.is_occupied_clamped(p)).copied().collect(),
        None => points.to_vec(),
    };
    let sigma = grouped_density(grid, &kept)?;
    Ok(sigma.iter().map(|&s| s as f64).sum::<f64>() / points.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub teacher: LossCurve,
    pub distill: LossCurve,
    pub finetune: LossCurve,
    pub occupied_fraction: f64,
    pub teacher_psnr: Option<f64>,
    pub distilled_psnr: f64,
    pub finetuned_psnr: f64,
    pub stage_seconds: Vec<(String, f64)>,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub teacher: NetworkGrid<f32>,
    pub distilled: NetworkGrid<f32>,
    pub student: NetworkGrid<f32>,
    pub occupancy: OccupancyGrid,
    pub report: PipelineReport,
}

/// Teacher training, occupancy extraction, distillation and fine-tuning,
/// with held-out PSNR after distillation and after fine-tuning. Errors are
/// tagged with the stage they came from.
pub fn run_pipeline(
    dataset: &SceneDataset,
    cfg: &TrainConfig,
    render: &RenderConfig,
    evaluate_teacher: bool,
    log: Log,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    dataset.validate()?;
    let test = dataset.test();
    let mut report = PipelineReport::default();
    let timed = |name: &str, t: Instant, report: &mut PipelineReport| {
        report.stage_seconds.push((name.to_string(), t.elapsed().as_secs_f64()));
    };

    let t = Instant::now();
    let (teacher, curve) = train_teacher(dataset, cfg, log).map_err(|e| e.in_stage("teacher"))?;
    report.teacher = curve;
    timed("teacher", t, &mut report);

    let t = Instant::now();
    let occupancy = teacher_occupancy(&teacher, cfg).map_err(|e| e.in_stage("occupancy"))?;
    report.occupied_fraction = occupancy.occupied_count() as f64 / occupancy.len() as f64;
    log(&LogLine {
        stage: "occupancy".into(),
        value: Some(report.occupied_fraction),
        note: Some("occupied fraction".into()),
        elapsed_s: t.elapsed().as_secs_f64(),
        ..Default::default()
    });
    timed("occupancy", t, &mut report);

    if evaluate_teacher && !test.is_empty() {
        let t = Instant::now();
        let psnr = evaluate_psnr(&teacher, Some(&occupancy), &test, render).map_err(|e| e.in_stage("teacher"))?;
        report.teacher_psnr = Some(psnr);
        log(&LogLine {
            stage: "teacher".into(),
            psnr: Some(psnr),
            elapsed_s: t.elapsed().as_secs_f64(),
            ..Default::default()
        });
    }

    let t = Instant::now();
    let (mut student, curve) = distill(&teacher, cfg, log).map_err(|e| e.in_stage("distill"))?;
    report.distill = curve;
    timed("distill", t, &mut report);
    let distilled = student.clone();
    if !test.is_empty() {
        report.distilled_psnr =
            evaluate_psnr(&student, Some(&occupancy), &test, render).map_err(|e| e.in_stage("distill"))?;
        log(&LogLine {
            stage: "distill".into(),
            psnr: Some(report.distilled_psnr),
            elapsed_s: t.elapsed().as_secs_f64(),
            ..Default::default()
        });
    }

    let t = Instant::now();
    report.finetune = finetune(&mut student, &occupancy, dataset, cfg, log).map_err(|e| e.in_stage("finetune"))?;
    timed("finetune", t, &mut report);
    if !test.is_empty() {
        report.finetuned_psnr =
            evaluate_psnr(&student, Some(&occupancy), &test, render).map_err(|e| e.in_stage("finetune"))?;
        log(&LogLine {
            stage: "finetune".into(),
            psnr: Some(report.finetuned_psnr),
            elapsed_s: t.elapsed().as_secs_f64(),
            ..Default::default()
        });
    }
    Ok(PipelineOutput {
        teacher,
        distilled,
        student,
        occupancy,
        report,
    })
}
