//! Local HTTP service with an asynchronous job queue. Endpoint paths, bodies
//! and status codes are listed in `docs/api.md`.

mod jobs;

pub use jobs::{Job, JobKind, JobStatus, Progress};

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::diffusion::Model;
use crate::error::Error;
use crate::features::EmbeddingProvider;
use crate::layout::format::{decode_rle, LayoutDocument};
use crate::layout::{Layout, ValidationReport};
use crate::sampling::{GuidanceConfig, SamplerConfig, SamplerKind, DEFAULT_GUIDANCE_SCALE};
use jobs::{JobRegistry, WorkItem};

pub const MAX_SAMPLES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub checkpoint: Option<PathBuf>,
    pub host: String,
    pub port: u16,
    pub workers: usize,
    /// Seconds a job stays retrievable after it finishes.
    pub ttl: u64,
    pub queue_capacity: usize,
    pub default_steps: u32,
    /// Seeds the sequence of seeds drawn for requests that omit one.
    pub seed: Option<u64>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            host: "127.0.0.1".into(),
            port: 8080,
            workers: 2,
            ttl: 3600,
            queue_capacity: 16,
            default_steps: 50,
            seed: None,
        }
    }
}

pub struct AppState {
    model: Option<Arc<Model>>,
    jobs: Arc<JobRegistry>,
    config: ServiceConfig,
    seeds: Option<Mutex<ChaCha8Rng>>,
}

impl AppState {
    /// Starts `config.workers` sampling threads that live as long as the
    /// returned state.
    pub fn new(model: Option<Model>, config: ServiceConfig) -> Arc<Self> {
        let model = model.map(Arc::new);
        let jobs = JobRegistry::start(model.clone(), config.workers.max(1), config.queue_capacity, Duration::from_secs(config.ttl));
        let seeds = config.seed.map(|s| Mutex::new(ChaCha8Rng::seed_from_u64(s)));
        Arc::new(Self { model, jobs, config, seeds })
    }

    fn next_seed(&self) -> u64 {
        match &self.seeds {
            Some(rng) => rng.lock().unwrap().next_u64(),
            None => rand::random(),
        }
    }

    pub fn jobs(&self) -> &JobRegistry {
        &self.jobs
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/concepts", get(concepts))
        .route("/layouts/validate", post(validate))
        .route("/generate", post(generate))
        .route("/inpaint", post(inpaint))
        .route("/jobs/:id", get(job))
        .route("/results/:id/:k", get(result))
        .with_state(state)
}

/// Binds and serves until the process is stopped.
pub async fn serve(state: Arc<AppState>) -> crate::Result<()> {
    let addr: SocketAddr = format!("{}:{}", state.config.host, state.config.port)
        .parse()
        .map_err(|e| Error::invalid(format!("bad listen address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::io(format!("{addr}"), e))?;
    log::info!("listening on http://{addr}");
    axum::serve(listener, router(state)).await.map_err(|e| Error::io(format!("{addr}"), e))
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn no_model() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "no checkpoint loaded")
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| {
        (
            StatusCode::BAD_REQUEST,
            Json(json!({ "error": format!("malformed body: {e}"), "line": e.line(), "column": e.column() })),
        )
            .into_response()
    })
}

fn model_of(state: &AppState) -> Result<&Arc<Model>, Response> {
    state.model.as_ref().ok_or_else(no_model)
}

async fn concepts(State(state): State<Arc<AppState>>) -> Response {
    let Ok(model) = model_of(&state) else { return no_model() };
    let header = &model.header;
    let concepts: Vec<_> = header
        .vocabulary
        .concepts
        .iter()
        .map(|name| {
            let spec = header.scene_spec.as_ref().and_then(|s| s.index_of(name).map(|i| &s.concepts[i]));
            json!({
                "name": name,
                "shape": spec.map(|c| c.shape),
                "colors": spec.map(|c| c.colors.clone()).unwrap_or_default(),
            })
        })
        .collect();
    Json(json!({
        "canvas_exponent": model.canvas_exponent(),
        "embedding_dim": model.provider().dim(),
        "admissible_levels": header.admissible_levels,
        "diffusion_steps": header.schedule.steps(),
        "concepts": concepts,
    }))
    .into_response()
}

#[derive(Serialize)]
struct ValidateResponse {
    ok: bool,
    violations: Vec<crate::layout::Violation>,
    layout: Option<LayoutDocument>,
}

/// Parses the wire layout and validates it against the loaded vocabulary.
fn check_layout(model: &Model, doc: LayoutDocument) -> Result<(Layout, ValidationReport), Response> {
    let explicit = doc.admissible_levels.is_some();
    let mut layout = doc.into_layout(None).map_err(|e| error(StatusCode::BAD_REQUEST, e.to_string()))?;
    if !explicit {
        layout = layout.with_admissible(model.header.admissible_levels.clone());
    }
    let report = model.check_layout(&layout);
    Ok((layout, report))
}

async fn validate(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let model = match model_of(&state) {
        Ok(m) => m.clone(),
        Err(r) => return r,
    };
    let doc: LayoutDocument = match parse_json(&body) {
        Ok(d) => d,
        Err(r) => return r,
    };
    match check_layout(&model, doc) {
        Ok((layout, report)) => Json(ValidateResponse {
            ok: report.is_ok(),
            violations: report.violations,
            layout: Some(LayoutDocument::from_layout(&layout)),
        })
        .into_response(),
        Err(r) => r,
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub layout: LayoutDocument,
    /// Absent picks a random seed, which is reported back.
    pub seed: Option<u64>,
    #[serde(default = "default_scale")]
    pub guidance_scale: f64,
    pub drop_levels: Option<Vec<u32>>,
    pub steps: Option<u32>,
    #[serde(default = "one")]
    pub samples: usize,
    /// Reuse the given seed; requires `seed`.
    #[serde(default)]
    pub keep_noise: bool,
    pub sampler: Option<SamplerKind>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InpaintRequestBody {
    /// Base64 PNG at the model's resolution.
    pub image: String,
    /// Run-length-encoded edit mask (1 = regenerate), as in the layout format.
    pub mask: String,
    pub layout: LayoutDocument,
    pub seed: Option<u64>,
    #[serde(default = "default_scale")]
    pub guidance_scale: f64,
    pub drop_levels: Option<Vec<u32>>,
    pub steps: Option<u32>,
    pub sampler: Option<SamplerKind>,
}

fn default_scale() -> f64 {
    DEFAULT_GUIDANCE_SCALE
}

fn one() -> usize {
    1
}

fn sampler_config(state: &AppState, model: &Model, steps: Option<u32>, kind: Option<SamplerKind>, seed: u64) -> Result<SamplerConfig, Response> {
    let cfg = SamplerConfig {
        steps: steps.unwrap_or(state.config.default_steps.min(model.schedule().steps())),
        kind: kind.unwrap_or(SamplerKind::Ddim),
        seed,
        clip_denoised: true,
    };
    cfg.validate(model.schedule()).map_err(|e| error(StatusCode::BAD_REQUEST, e.to_string()))?;
    Ok(cfg)
}

fn guidance_config(model: &Model, scale: f64, drop_levels: Option<Vec<u32>>) -> Result<GuidanceConfig, Response> {
    let g = GuidanceConfig { scale, drop_levels };
    g.validate(model.canvas_exponent()).map_err(|e| error(StatusCode::BAD_REQUEST, e.to_string()))?;
    Ok(g)
}

fn accepted(state: &AppState, job: Job, work: WorkItem) -> Response {
    let id = job.id.clone();
    let seed = job.seed;
    match state.jobs.submit(job, work) {
        Ok(()) => (
            StatusCode::ACCEPTED,
            Json(json!({ "job_id": id, "seed": seed, "status_url": format!("/jobs/{id}") })),
        )
            .into_response(),
        Err(jobs::SubmitError::QueueFull) => error(StatusCode::TOO_MANY_REQUESTS, "job queue is full"),
    }
}

async fn generate(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let model = match model_of(&state) {
        Ok(m) => m.clone(),
        Err(r) => return r,
    };
    let req: GenerateRequest = match parse_json(&body) {
        Ok(r) => r,
        Err(r) => return r,
    };
    if !(1..=MAX_SAMPLES).contains(&req.samples) {
        return error(StatusCode::BAD_REQUEST, format!("samples must lie in 1..={MAX_SAMPLES}"));
    }
    if req.keep_noise && req.seed.is_none() {
        return error(StatusCode::BAD_REQUEST, "keep_noise requires the seed to reuse");
    }
    let (layout, report) = match check_layout(&model, req.layout) {
        Ok(v) => v,
        Err(r) => return r,
    };
    if !report.is_ok() {
        return (StatusCode::BAD_REQUEST, Json(json!({ "error": "invalid layout", "violations": report.violations })))
            .into_response();
    }
    let seed = req.seed.unwrap_or_else(|| state.next_seed());
    let sampler = match sampler_config(&state, &model, req.steps, req.sampler, seed) {
        Ok(s) => s,
        Err(r) => return r,
    };
    let guidance = match guidance_config(&model, req.guidance_scale, req.drop_levels) {
        Ok(g) => g,
        Err(r) => return r,
    };
    let job = Job::new(JobKind::Generate, seed, req.samples * sampler.steps as usize);
    accepted(&state, job, WorkItem::Generate { layout, guidance, sampler, samples: req.samples })
}

async fn inpaint(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let model = match model_of(&state) {
        Ok(m) => m.clone(),
        Err(r) => return r,
    };
    let req: InpaintRequestBody = match parse_json(&body) {
        Ok(r) => r,
        Err(r) => return r,
    };
    let bytes = match base64::engine::general_purpose::STANDARD.decode(req.image.as_bytes()) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("image is not valid base64: {e}")),
    };
    let original = match crate::imageio::decode_png(&bytes) {
        Ok(t) => t,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let mask = match decode_rle(&req.mask) {
        Ok(m) => m,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("mask: {e}")),
    };
    let (c, h, w) = model.image_shape();
    if (original.channels(), original.height(), original.width()) != (c, h, w) || mask.side() != w {
        return error(
            StatusCode::BAD_REQUEST,
            format!(
                "resolution mismatch: the model works at {w}x{h}, got a {}x{} image and a {m}x{m} mask",
                original.width(),
                original.height(),
                m = mask.side()
            ),
        );
    }
    let (layout, report) = match check_layout(&model, req.layout) {
        Ok(v) => v,
        Err(r) => return r,
    };
    if !report.is_ok() {
        return (StatusCode::BAD_REQUEST, Json(json!({ "error": "invalid layout", "violations": report.violations })))
            .into_response();
    }
    let seed = req.seed.unwrap_or_else(|| state.next_seed());
    let sampler = match sampler_config(&state, &model, req.steps, req.sampler, seed) {
        Ok(s) => s,
        Err(r) => return r,
    };
    let guidance = match guidance_config(&model, req.guidance_scale, req.drop_levels) {
        Ok(g) => g,
        Err(r) => return r,
    };
    let job = Job::new(JobKind::Inpaint, seed, sampler.steps as usize);
    accepted(&state, job, WorkItem::Inpaint { original, mask, layout, guidance, sampler })
}

fn lookup_error(e: jobs::LookupError) -> Response {
    match e {
        jobs::LookupError::Malformed => error(StatusCode::BAD_REQUEST, "malformed job id"),
        jobs::LookupError::Unknown => error(StatusCode::NOT_FOUND, "no such job"),
        jobs::LookupError::Expired => error(StatusCode::GONE, "job expired"),
    }
}

async fn job(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    match state.jobs.get(&id) {
        Ok(job) => Json(job).into_response(),
        Err(e) => lookup_error(e),
    }
}

async fn result(State(state): State<Arc<AppState>>, UrlPath((id, k)): UrlPath<(String, String)>) -> Response {
    let Ok(k) = k.parse::<usize>() else {
        return error(StatusCode::BAD_REQUEST, "result index must be a non-negative integer");
    };
    match state.jobs.result(&id, k) {
        Ok(Some(png)) => ([(header::CONTENT_TYPE, "image/png")], png).into_response(),
        Ok(None) => error(StatusCode::NOT_FOUND, "result not available"),
        Err(e) => lookup_error(e),
    }
}
