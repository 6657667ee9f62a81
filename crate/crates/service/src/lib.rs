//! HTTP render service: `GET /meta` describes the loaded scene and
//! `POST /render` returns a PNG of the requested view.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use nalgebra::Matrix4;
use nerfgrid_core::camera::Camera;
use nerfgrid_core::checkpoint::load_checkpoint;
use nerfgrid_core::{Aabb, GridResolution, NetworkGrid, OccupancyGrid, RenderConfig, Workers};
use serde::{Deserialize, Serialize};

pub const RENDER_MILLIS: &str = "x-render-millis";
pub const QUERIES: &str = "x-queries";

/// Focal length over image width of a 45 degree horizontal field of view.
pub const DEFAULT_FOCAL_SCALE: f32 = 1.207_106_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// Largest accepted `width * height`.
    pub max_pixels: u64,
    pub render: RenderConfig,
    pub workers: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_pixels: 512 * 512,
            render: RenderConfig::default(),
            workers: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quality {
    pub samples_per_ray: Option<usize>,
    pub epsilon: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    /// Camera-to-world matrix, row-major; camera looks down +z with +y down.
    pub pose: [f32; 16],
    pub width: u32,
    pub height: u32,
    /// Focal length in pixels over `width`.
    pub focal_scale: f32,
    #[serde(default)]
    pub quality: Option<Quality>,
}

impl RenderRequest {
    pub fn camera(&self) -> nerfgrid_core::Result<Camera> {
        let pose = Matrix4::from_row_slice(&self.pose);
        let f = self.focal_scale * self.width as f32;
        Camera::new(
            self.width,
            self.height,
            f,
            f,
            self.width as f32 / 2.0,
            self.height as f32 / 2.0,
            pose,
        )
    }

    /// Request for `camera`, which must have square pixels and a centered
    /// principal point.
    pub fn for_camera(camera: &Camera) -> Self {
        let mut pose = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                pose[4 * r + c] = camera.pose[(r, c)];
            }
        }
        Self {
            pose,
            width: camera.width,
            height: camera.height,
            focal_scale: camera.fx / camera.width as f32,
            quality: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub aabb: Aabb,
    pub resolution: GridResolution,
    pub orbit_radius: f32,
    pub focal_scale: f32,
    pub max_pixels: u64,
    pub samples_per_ray: usize,
    pub epsilon: f32,
    pub has_occupancy: bool,
}

#[derive(Debug)]
pub struct Model {
    pub grid: NetworkGrid<f32>,
    pub occupancy: Option<OccupancyGrid>,
}

pub struct AppState {
    pub config: ServiceConfig,
    model: RwLock<Option<Arc<Model>>>,
    workers: Workers,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> nerfgrid_core::Result<Arc<Self>> {
        config.render.validate()?;
        let workers = Workers::new(config.workers)?;
        Ok(Arc::new(Self {
            config,
            model: RwLock::new(None),
            workers,
        }))
    }

    pub fn set_model(&self, model: Model) {
        *self.model.write().expect("model lock") = Some(Arc::new(model));
    }

    pub fn load(&self, checkpoint: &Path) -> nerfgrid_core::Result<()> {
        let (grid, occupancy) = load_checkpoint(checkpoint)?;
        self.set_model(Model { grid, occupancy });
        Ok(())
    }

    fn model(&self) -> Option<Arc<Model>> {
        self.model.read().expect("model lock").clone()
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

fn not_loaded() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "no model loaded")
}

async fn meta(State(state): State<Arc<AppState>>) -> Response {
    let Some(model) = state.model() else {
        return not_loaded();
    };
    let aabb = model.grid.aabb;
    Json(Meta {
        aabb,
        resolution: model.grid.resolution,
        orbit_radius: 0.92 * aabb.diagonal(),
        focal_scale: DEFAULT_FOCAL_SCALE,
        max_pixels: state.config.max_pixels,
        samples_per_ray: state.config.render.samples_per_ray,
        epsilon: state.config.render.epsilon,
        has_occupancy: model.occupancy.is_some(),
    })
    .into_response()
}

/// Validates `body` against the service limits and renders it.
pub fn render_request(
    state: &AppState,
    model: &Model,
    req: &RenderRequest,
) -> std::result::Result<(Vec<u8>, f64, u64), (StatusCode, String)> {
    let bad = |m: String| (StatusCode::BAD_REQUEST, m);
    if req.width == 0 || req.height == 0 {
        return Err(bad("width and height must be positive".into()));
    }
    if req.width as u64 * req.height as u64 > state.config.max_pixels {
        return Err(bad(format!(
            "{}x{} exceeds the {} pixel cap",
            req.width, req.height, state.config.max_pixels
        )));
    }
    if !(req.focal_scale.is_finite() && req.focal_scale > 0.0) {
        return Err(bad("focal_scale must be positive".into()));
    }
    let camera = req.camera().map_err(|e| bad(e.to_string()))?;
    let mut cfg = state.config.render.clone();
    if let Some(q) = req.quality {
        if let Some(k) = q.samples_per_ray {
            cfg.samples_per_ray = k;
        }
        if let Some(e) = q.epsilon {
            cfg.epsilon = e;
        }
    }
    cfg.validate().map_err(|e| bad(e.to_string()))?;
    let start = Instant::now();
    let rendered = state
        .workers
        .run(|| nerfgrid_core::render_image(&model.grid, model.occupancy.as_ref(), &camera, &cfg))
        .and_then(|r| r)
        .and_then(|(img, stats)| Ok((img.encode_png()?, stats)));
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let (png, stats) = rendered.map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok((png, ms, stats.total_queries))
}

async fn render(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let Some(model) = state.model() else {
        return not_loaded();
    };
    let req: RenderRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid request: {e}")),
    };
    let job = tokio::task::spawn_blocking(move || render_request(&state, &model, &req)).await;
    match job {
        Ok(Ok((png, ms, queries))) => {
            let mut resp = png.into_response();
            let h = resp.headers_mut();
            h.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
            h.insert(RENDER_MILLIS, HeaderValue::from_str(&format!("{ms:.3}")).expect("ascii"));
            h.insert(QUERIES, HeaderValue::from(queries));
            resp
        }
        Ok(Err((status, message))) => error(status, message),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/meta", get(meta))
        .route("/render", post(render))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
