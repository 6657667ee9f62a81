//! Posed image datasets: synthetic generation and the NSVF directory layout.
//!
//! Layout read and written here:
//!
//! ```text
//! bbox.txt            x0 y0 z0 x1 y1 z1 [voxel_size]
//! intrinsics.txt      4x4 matrix, or the short form "f cx cy 0" on line 1
//! pose/<name>.txt     4x4 camera-to-world matrix, row-major
//! rgb/<name>.png      8-bit RGB
//! ```
//!
//! View names carry their split as a prefix: `0_` train, `1_` validation,
//! `2_` test.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{look_at, Camera};
use crate::error::{Error, Result};
use crate::field::{GridResolution, Vec3};
use crate::image::ImageBuffer;
use crate::render::{render_image, RenderConfig};
use crate::rng::stream_rng;
use crate::scene::AnalyticScene;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "0",
            Split::Val => "1",
            Split::Test => "2",
        }
    }

    fn from_name(name: &str) -> Option<Self> {
        match name.split('_').next()? {
            "0" => Some(Split::Train),
            "1" => Some(Split::Val),
            "2" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub name: String,
    pub split: Split,
    pub camera: Camera,
    pub image: ImageBuffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub aabb: crate::field::Aabb,
    pub views: Vec<View>,
}

impl SceneDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &View> {
        self.views.iter().filter(move |v| v.split == split)
    }

    pub fn train(&self) -> Vec<&View> {
        self.split(Split::Train).collect()
    }

    pub fn test(&self) -> Vec<&View> {
        self.split(Split::Test).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.views.first() else {
            return Err(Error::Dataset("dataset has no views".into()));
        };
        let size = (first.image.width, first.image.height);
        for v in &self.views {
            if (v.image.width, v.image.height) != size {
                return Err(Error::Dataset(format!(
                    "view {} is {}x{}, expected {}x{}",
                    v.name, v.image.width, v.image.height, size.0, size.1
                )));
            }
            if (v.camera.width, v.camera.height) != size {
                return Err(Error::Dataset(format!("camera of view {} does not match its image", v.name)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDatasetConfig {
    pub train_views: usize,
    pub test_views: usize,
    pub image_size: u32,
    pub fov_degrees: f32,
    /// Camera distance from the box center.
    pub radius: f32,
    /// Ground-truth quadrature samples per ray.
    pub oracle_samples: usize,
    pub seed: u64,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        Self {
            train_views: 100,
            test_views: 20,
            image_size: 128,
            fov_degrees: 45.0,
            radius: 3.2,
            oracle_samples: 4 * 384,
            seed: 0,
        }
    }
}

/// Camera positions on the sphere around the box: an evenly spread
/// Fibonacci lattice for training, seeded uniform draws for testing.
fn orbit_positions(count: usize, lattice: bool, seed: u64) -> Vec<Vec3> {
    let mut rng = stream_rng(seed, 1);
    let golden = std::f32::consts::PI * (3.0 - 5.0f32.sqrt());
    (0..count)
        .map(|i| {
            if lattice {
                let z = 1.0 - (2 * i + 1) as f32 / count as f32;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f32;
                Vec3::new(r * phi.cos(), r * phi.sin(), z)
            } else {
                let z: f32 = rng.gen_range(-1.0..1.0);
                let phi: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
                let r = (1.0 - z * z).sqrt();
                Vec3::new(r * phi.cos(), r * phi.sin(), z)
            }
        })
        .collect()
}

pub fn orbit_camera(center: Vec3, direction: Vec3, radius: f32, size: u32, fov_degrees: f32) -> Result<Camera> {
    let up = if direction.z.abs() > 0.99 { Vec3::y() } else { Vec3::z() };
    let pose = look_at(center + direction * radius, center, up)?;
    Camera::with_fov(size, size, fov_degrees, pose)
}

/// Renders the analytic scene from cameras orbiting its box. Ground truth
/// uses `oracle_samples` midpoint samples per ray; only cells where the scene
/// is provably empty are skipped, which leaves every pixel unchanged since
/// those samples have zero alpha. Images are quantized to 8 bits, matching
/// what a reader gets back from disk.
pub fn generate_toy_dataset(scene: &AnalyticScene, cfg: &ToyDatasetConfig) -> Result<SceneDataset> {
    scene.validate()?;
    let center = scene.aabb.center();
    let oracle = oracle_config(cfg.oracle_samples);
    let occupancy = scene.occupancy(GridResolution::cube(64))?;
    let mut specs = Vec::new();
    for (split, count, lattice) in [(Split::Train, cfg.train_views, true), (Split::Test, cfg.test_views, false)] {
        for (i, dir) in orbit_positions(count, lattice, cfg.seed).into_iter().enumerate() {
            specs.push((split, i, dir));
        }
    }
    let views = specs
        .into_par_iter()
        .map(|(split, i, dir)| {
            let camera = orbit_camera(center, dir, cfg.radius, cfg.image_size, cfg.fov_degrees)?;
            let (image, _) = render_image(scene, Some(&occupancy), &camera, &oracle)?;
            Ok(View {
                name: format!("{}_{}_{i:04}", split.prefix(), split_word(split)),
                split,
                camera,
                image: image.quantized(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneDataset {
        aabb: scene.aabb,
        views,
    })
}

/// Dense midpoint quadrature without termination.
pub fn oracle_config(samples: usize) -> RenderConfig {
    RenderConfig {
        samples_per_ray: samples,
        epsilon: 0.0,
        stratified: false,
        ..Default::default()
    }
}

fn split_word(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn matrix_text(m: &Matrix4<f32>) -> String {
    let mut s = String::new();
    for r in 0..4 {
        let row: Vec<String> = (0..4).map(|c| format!("{:?}", m[(r, c)])).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `dataset` in the NSVF layout. All views must share intrinsics.
pub fn write_nsvf_dataset(dataset: &SceneDataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    let cam = &dataset.views[0].camera;
    if dataset
        .views
        .iter()
        .any(|v| (v.camera.fx, v.camera.fy, v.camera.cx, v.camera.cy) != (cam.fx, cam.fy, cam.cx, cam.cy))
    {
        return Err(Error::Dataset("views do not share intrinsics".into()));
    }
    for sub in ["pose", "rgb"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let a = &dataset.aabb;
    let voxel = (a.max[0] - a.min[0]).min(a.max[1] - a.min[1]).min(a.max[2] - a.min[2]) / 16.0;
    write(
        &dir.join("bbox.txt"),
        format!(
            "{:?} {:?} {:?} {:?} {:?} {:?} {voxel:?}\n",
            a.min[0], a.min[1], a.min[2], a.max[0], a.max[1], a.max[2]
        ),
    )?;
    let mut k = Matrix4::identity();
    k[(0, 0)] = cam.fx;
    k[(1, 1)] = cam.fy;
    k[(0, 2)] = cam.cx;
    k[(1, 2)] = cam.cy;
    write(&dir.join("intrinsics.txt"), matrix_text(&k))?;
    for v in &dataset.views {
        let name = if Split::from_name(&v.name) == Some(v.split) {
            v.name.clone()
        } else {
            format!("{}_{}", v.split.prefix(), v.name)
        };
        write(&dir.join("pose").join(format!("{name}.txt")), matrix_text(&v.camera.pose))?;
        v.image.save_png(&dir.join("rgb").join(format!("{name}.png")))?;
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Whitespace-separated numbers per non-empty line, with line numbers.
fn numbers(path: &Path, text: &str) -> Result<Vec<(usize, Vec<f32>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f32>()
                    .map_err(|_| Error::parse(path, i + 1, format!("expected a number, found {tok:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((i + 1, values));
    }
    Ok(out)
}

fn read_matrix(path: &Path) -> Result<Matrix4<f32>> {
    let text = read_text(path)?;
    let rows = numbers(path, &text)?;
    if rows.len() < 4 {
        let line = rows.last().map_or(1, |r| r.0 + 1);
        return Err(Error::parse(path, line, format!("expected 4 rows, found {}", rows.len())));
    }
    let mut m = Matrix4::zeros();
    for (r, (line, values)) in rows.iter().take(4).enumerate() {
        if values.len() != 4 {
            return Err(Error::parse(path, *line, format!("expected 4 values, found {}", values.len())));
        }
        for c in 0..4 {
            m[(r, c)] = values[c];
        }
    }
    Ok(m)
}

/// `(fx, fy, cx, cy)` from either intrinsics form.
fn read_intrinsics(path: &Path) -> Result<(f32, f32, f32, f32)> {
    let text = read_text(path)?;
    let rows = numbers(path, &text)?;
    let Some((line, first)) = rows.first() else {
        return Err(Error::parse(path, 1, "empty intrinsics file"));
    };
    let full_matrix = rows.len() >= 3 && rows.iter().take(3).all(|(_, v)| v.len() >= 3) && first[1] == 0.0;
    if full_matrix {
        let m = read_matrix(path)?;
        Ok((m[(0, 0)], m[(1, 1)], m[(0, 2)], m[(1, 2)]))
    } else if first.len() >= 3 {
        Ok((first[0], first[0], first[1], first[2]))
    } else {
        Err(Error::parse(path, *line, "expected \"f cx cy\" or a 4x4 matrix"))
    }
}

fn read_bbox(path: &Path) -> Result<crate::field::Aabb> {
    let text = read_text(path)?;
    let rows = numbers(path, &text)?;
    let Some((line, v)) = rows.first() else {
        return Err(Error::parse(path, 1, "empty bbox file"));
    };
    if v.len() < 6 {
        return Err(Error::parse(path, *line, format!("expected 6 bounds, found {}", v.len())));
    }
    crate::field::Aabb::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
        .map_err(|e| Error::parse(path, *line, e.to_string()))
}

fn stems(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path: PathBuf = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_nsvf_dataset(dir: &Path) -> Result<SceneDataset> {
    let aabb = read_bbox(&dir.join("bbox.txt"))?;
    let (fx, fy, cx, cy) = read_intrinsics(&dir.join("intrinsics.txt"))?;
    let poses = stems(&dir.join("pose"), "txt")?;
    let images = stems(&dir.join("rgb"), "png")?;
    if poses != images {
        return Err(Error::Dataset(format!(
            "{}: {} poses but {} images, or their names differ",
            dir.display(),
            poses.len(),
            images.len()
        )));
    }
    let views = poses
        .par_iter()
        .map(|name| {
            let pose_path = dir.join("pose").join(format!("{name}.txt"));
            let pose = read_matrix(&pose_path)?;
            let image = ImageBuffer::load_png(&dir.join("rgb").join(format!("{name}.png")))?;
            let camera = Camera::new(image.width, image.height, fx, fy, cx, cy, pose)
                .map_err(|e| Error::parse(&pose_path, 1, e.to_string()))?;
            let split = Split::from_name(name)
                .ok_or_else(|| Error::Dataset(format!("view {name} lacks a 0_/1_/2_ split prefix")))?;
            Ok(View {
                name: name.clone(),
                split,
                camera,
                image,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = SceneDataset { aabb, views };
    ds.validate()?;
    Ok(ds)
}
