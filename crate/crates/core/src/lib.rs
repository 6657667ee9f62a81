//! Radiance fields represented as a uniform grid of tiny MLPs.
//!
//! The crate covers the full path from analytic toy scenes to trained
//! network grids: grouped variable-batch inference, occupancy-based empty
//! space skipping, early ray termination, teacher distillation and
//! photometric fine-tuning, plus the on-disk formats tying them together.

pub mod error;
pub mod real;

pub mod batched;
pub mod bench;
pub mod camera;
pub mod checkpoint;
pub mod dataset;
pub mod encoding;
pub mod field;
pub mod grid;
pub mod image;
pub mod kernels;
pub mod mlp;
pub mod occupancy;
pub mod optim;
pub mod pipeline;
pub mod render;
pub mod rng;
pub mod scene;
pub mod train;

pub use batched::{group_by_network, grouped_forward, GroupedLayout, QueryBatch, Workers};
pub use camera::{Camera, Ray};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dataset::{generate_toy_dataset, load_nsvf_dataset, write_nsvf_dataset, SceneDataset, Split, ToyDatasetConfig, View};
pub use error::{Error, Result};
pub use field::{Aabb, CellIndex, GridResolution, Vec3};
pub use grid::{grid_resolution_rule, GridManifest, NetworkGrid};
pub use image::{compute_psnr, ImageBuffer};
pub use occupancy::{extract_occupancy, DensityField, OccupancyGrid};
pub use optim::{lr_schedule, OptimizerState};
pub use pipeline::{run_pipeline, LogLine, PipelineOutput, PipelineReport, TrainConfig};
pub use real::Real;
pub use scene::AnalyticScene;
pub use render::{composite, render_image, render_rays, RadianceField, RenderConfig, RenderStats};
pub use train::{distill_step, photometric_step, DistillLoss, LossReport, RayBatch};
