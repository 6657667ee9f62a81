use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nerfgrid_core::bench::{benchmark, throughput, BenchConfig};
use nerfgrid_core::checkpoint::{load_checkpoint, save_checkpoint};
use nerfgrid_core::pipeline::{distill, finetune, teacher_occupancy, train_teacher, LossCurve};
use nerfgrid_core::{
    generate_toy_dataset, load_nsvf_dataset, render_image, write_nsvf_dataset, AnalyticScene, LogLine, RenderConfig,
    RenderStats, SceneDataset, ToyDatasetConfig, TrainConfig, Workers,
};
use nerfgrid_service::{AppState, ServiceConfig};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "nerfgrid", version, about = "Radiance fields as grids of tiny MLPs")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
struct Global {
    /// TOML run configuration; missing sections use built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output path (file or directory, depending on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Serialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
enum Command {
    /// Render a toy scene into a dataset directory.
    GenData {
        /// standard, specular or random
        #[arg(long)]
        scene: Option<String>,
        #[arg(long)]
        image_size: Option<u32>,
    },
    /// Train the teacher and extract its occupancy grid.
    TrainTeacher {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Distill a teacher checkpoint into a network grid.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fine-tune a network grid on the training images.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Render the test views of a dataset (or one orbit view) to PNGs.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset whose test cameras are rendered; PSNR is reported.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Image size of the orbit view used without a dataset.
        #[arg(long, default_value_t = 128)]
        size: u32,
    },
    /// Time dense teacher, teacher with skipping and termination, and the
    /// network grid with skipping and termination on one view.
    Benchmark {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Serve renders of a checkpoint over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SceneConfig {
    kind: String,
    seed: u64,
    primitives: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    scene: SceneConfig,
    dataset: ToyDatasetConfig,
    train: TrainConfig,
    render: RenderConfig,
    bench: BenchConfig,
    service: ServiceConfig,
}

impl RunConfig {
    fn load(global: &Global) -> Result<Self> {
        let mut cfg = match &global.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig {
                train: TrainConfig::desk(),
                ..Default::default()
            },
        };
        if cfg.scene.kind.is_empty() {
            cfg.scene.kind = "standard".into();
        }
        if let Some(seed) = global.seed {
            cfg.train.seed = seed;
            cfg.dataset.seed = seed;
            cfg.render.seed = seed;
        }
        cfg.train.validate()?;
        cfg.render.validate()?;
        Ok(cfg)
    }

    fn scene(&self) -> Result<AnalyticScene> {
        let scene = match self.scene.kind.as_str() {
            "standard" => AnalyticScene::standard(),
            "specular" => AnalyticScene::specular(),
            "random" => AnalyticScene::random(self.scene.seed, self.scene.primitives.clamp(3, 8)),
            "empty" => AnalyticScene::empty(),
            other => bail!("unknown scene kind {other:?} (standard, specular, random, empty)"),
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// What each command leaves next to its output: the command line, the
/// effective configuration and the results.
#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    command: &'a Command,
    flags: &'a Global,
    config: &'a RunConfig,
    result: T,
}

fn out_path(global: &Global, default: &str) -> PathBuf {
    global.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_report<T: Serialize>(path: &Path, cli: &Cli, cfg: &RunConfig, result: T) -> Result<()> {
    let report = Report {
        command: &cli.command,
        flags: &cli.global,
        config: cfg,
        result,
    };
    let text = serde_json::to_string_pretty(&report)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn report_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("report.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".report.json");
        PathBuf::from(s)
    }
}

fn print_line(line: &LogLine) {
    log::info!("{}", serde_json::to_string(line).unwrap_or_default());
}

fn load_dataset(path: &Path) -> Result<SceneDataset> {
    load_nsvf_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

#[derive(Serialize)]
struct StageResult {
    curve: LossCurve,
    occupied_fraction: Option<f64>,
}

#[derive(Serialize)]
struct RenderResult {
    images: Vec<String>,
    mean_psnr: Option<f64>,
    stats: RenderStats,
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = RunConfig::load(&cli.global)?;
    let mut log = print_line;
    match &cli.command {
        Command::GenData { scene, image_size } => {
            if let Some(s) = scene {
                cfg.scene.kind = s.clone();
            }
            if let Some(s) = image_size {
                cfg.dataset.image_size = *s;
            }
            let out = out_path(&cli.global, "data");
            let ds = generate_toy_dataset(&cfg.scene()?, &cfg.dataset)?;
            write_nsvf_dataset(&ds, &out)?;
            write_report(&report_path(&out), cli, &cfg, ds.views.len())?;
        }
        Command::TrainTeacher { data, steps } => {
            if let Some(s) = steps {
                cfg.train.teacher.steps = *s;
            }
            let ds = load_dataset(data)?;
            let out = out_path(&cli.global, "teacher.ckpt");
            let (teacher, curve) = train_teacher(&ds, &cfg.train, &mut log).map_err(|e| e.in_stage("teacher"))?;
            let occ = teacher_occupancy(&teacher, &cfg.train).map_err(|e| e.in_stage("occupancy"))?;
            save_checkpoint(&out, &teacher, Some(&occ))?;
            let result = StageResult {
                curve,
                occupied_fraction: Some(occ.occupied_count() as f64 / occ.len() as f64),
            };
            write_report(&report_path(&out), cli, &cfg, result)?;
        }
        Command::Distill { teacher, steps } => {
            if let Some(s) = steps {
                cfg.train.distill.steps = *s;
            }
            let (teacher, occ) = load_checkpoint(teacher)?;
            let occ = match occ {
                Some(o) => o,
                None => teacher_occupancy(&teacher, &cfg.train)?,
            };
            let out = out_path(&cli.global, "distilled.ckpt");
            let (student, curve) = distill(&teacher, &cfg.train, &mut log).map_err(|e| e.in_stage("distill"))?;
            save_checkpoint(&out, &student, Some(&occ))?;
            let result = StageResult {
                curve,
                occupied_fraction: None,
            };
            write_report(&report_path(&out), cli, &cfg, result)?;
        }
        Command::Finetune { data, student, steps } => {
            if let Some(s) = steps {
                cfg.train.finetune.steps = *s;
            }
            let ds = load_dataset(data)?;
            let (mut grid, occ) = load_checkpoint(student)?;
            let Some(occ) = occ else {
                bail!("{} has no occupancy grid; fine-tuning samples through one", student.display());
            };
            let out = out_path(&cli.global, "student.ckpt");
            let curve = finetune(&mut grid, &occ, &ds, &cfg.train, &mut log).map_err(|e| e.in_stage("finetune"))?;
            save_checkpoint(&out, &grid, Some(&occ))?;
            let result = StageResult {
                curve,
                occupied_fraction: None,
            };
            write_report(&report_path(&out), cli, &cfg, result)?;
        }
        Command::Render { checkpoint, data, size } => {
            let (grid, occ) = load_checkpoint(checkpoint)?;
            let out = out_path(&cli.global, "renders");
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let views: Vec<(String, nerfgrid_core::Camera, Option<nerfgrid_core::ImageBuffer>)> = match data {
                Some(d) => load_dataset(d)?
                    .test()
                    .into_iter()
                    .map(|v| (v.name.clone(), v.camera.clone(), Some(v.image.clone())))
                    .collect(),
                None => {
                    let dir = nerfgrid_core::Vec3::new(0.8, -0.5, 0.45).normalize();
                    let r = 0.92 * grid.aabb.diagonal();
                    let cam = nerfgrid_core::dataset::orbit_camera(grid.aabb.center(), dir, r, *size, 45.0)?;
                    vec![("view".to_string(), cam, None)]
                }
            };
            let mut result = RenderResult {
                images: Vec::new(),
                mean_psnr: None,
                stats: RenderStats::default(),
            };
            let mut psnr = Vec::new();
            for (name, cam, gt) in views {
                let (img, stats) = render_image(&grid, occ.as_ref(), &cam, &cfg.render)?;
                let path = out.join(format!("{name}.png"));
                img.save_png(&path)?;
                if let Some(gt) = gt {
                    psnr.push(nerfgrid_core::compute_psnr(&img, &gt)?);
                }
                result.stats.merge(&stats);
                result.images.push(path.display().to_string());
            }
            if !psnr.is_empty() {
                result.mean_psnr = Some(psnr.iter().sum::<f64>() / psnr.len() as f64);
            }
            write_report(&out.join("report.json"), cli, &cfg, result)?;
        }
        Command::Benchmark { teacher, student, data } => {
            let (teacher, _) = load_checkpoint(teacher)?;
            let (student, occ) = load_checkpoint(student)?;
            let Some(occ) = occ else {
                bail!("student checkpoint has no occupancy grid");
            };
            let ds = load_dataset(data)?;
            let Some(view) = ds.test().into_iter().next().or(ds.views.first()) else {
                bail!("dataset has no views");
            };
            let rows = benchmark(&teacher, &student, &occ, &view.camera, &cfg.bench)?;
            let tp = throughput(&student, 100_000, cfg.train.seed)?;
            let out = out_path(&cli.global, "benchmark.jsonl");
            let mut text = String::new();
            for r in &rows {
                text += &serde_json::to_string(r)?;
                text.push('\n');
            }
            text += &serde_json::to_string(&tp)?;
            text.push('\n');
            fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
            print!("{text}");
            write_report(&report_path(&out), cli, &cfg, (&rows, &tp))?;
        }
        Command::Serve { checkpoint, addr } => {
            let mut service = cfg.service.clone();
            service.render = cfg.render.clone();
            if let Some(w) = cli.global.workers {
                service.workers = w;
            }
            let state = AppState::new(service)?;
            state.load(checkpoint)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(nerfgrid_service::serve(*addr, state))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let workers = match cli.global.workers.map(Workers::new).transpose() {
        Ok(w) => w,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    let result = match workers {
        Some(w) if !matches!(cli.command, Command::Serve { .. }) => w.run(|| run(&cli)).unwrap_or_else(|e| Err(e.into())),
        _ => run(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
