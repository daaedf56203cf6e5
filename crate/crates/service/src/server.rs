//! HTTP endpoints. Shared state is loaded once and only read afterwards.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use haptex_core::align;
use haptex_core::corpus::{self, Corpus, EmbeddingTable};
use haptex_core::render::{run_trajectory, RenderConfig, ServoSim, TrajectoryScript};
use haptex_core::synth;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::bundle::{self, Bundle, Texture};
use crate::error::ServiceError;
use crate::stream;

/// Longest script `/simulate` accepts, in seconds.
pub const MAX_SCRIPT_SECONDS: f64 = 600.0;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub addr: String,
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub embeddings: PathBuf,
    pub render_config: Option<PathBuf>,
}

pub struct StoredLog {
    pub csv: Vec<u8>,
    pub wav: Vec<u8>,
}

pub struct AppState {
    pub bundle: Mutex<Bundle>,
    pub corpus: Corpus,
    pub embeddings: EmbeddingTable,
    pub render: RenderConfig<f64>,
    logs: Mutex<HashMap<u64, StoredLog>>,
    next_log: AtomicU64,
}

impl AppState {
    pub fn new(bundle: Bundle, corpus: Corpus, embeddings: EmbeddingTable, render: RenderConfig<f64>) -> Self {
        Self { bundle: Mutex::new(bundle), corpus, embeddings, render, logs: Mutex::default(), next_log: AtomicU64::new(1) }
    }

    pub fn load(cfg: &ServeConfig) -> Result<Self, ServiceError> {
        for p in [Some(&cfg.checkpoint), Some(&cfg.corpus), Some(&cfg.embeddings), cfg.render_config.as_ref()].into_iter().flatten() {
            if !p.exists() {
                return Err(ServiceError::Io(format!("not found: {}", p.display())));
            }
        }
        Ok(Self::new(
            Bundle::load(&cfg.checkpoint)?,
            corpus::load_corpus(&cfg.corpus)?,
            corpus::load_embeddings(&cfg.embeddings)?,
            bundle::load_render_config(cfg.render_config.as_deref())?,
        ))
    }

    fn bundle(&self) -> std::sync::MutexGuard<'_, Bundle> {
        // a panic mid-decode leaves the weights untouched
        self.bundle.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Texture for a latent or a corpus material.
    pub fn texture(&self, z: Option<&[f64]>, material: Option<&str>) -> Result<Texture, ServiceError> {
        match (z, material) {
            (Some(z), None) => {
                let mut b = self.bundle();
                let z = b.check_latent(z)?;
                b.decode(&z, &self.render)
            }
            (None, Some(id)) => bundle::find_material(&self.corpus, id)
                .map(Texture::from_material)
                .ok_or_else(|| ServiceError::NotFound(format!("material {id:?}"))),
            _ => Err(ServiceError::Usage("give exactly one of z or material".into())),
        }
    }
}

pub struct ApiError(pub ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self(e)
    }
}

pub fn status_for(e: &ServiceError) -> StatusCode {
    match e {
        ServiceError::Usage(_) => StatusCode::BAD_REQUEST,
        ServiceError::EmbeddingNotFound(_) | ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
        ServiceError::Corpus(_) | ServiceError::Signal(_) | ServiceError::Render(_) | ServiceError::Eval(_) => StatusCode::UNPROCESSABLE_ENTITY,
        ServiceError::Io(_) | ServiceError::Model(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

pub fn error_body(e: &ServiceError) -> Value {
    json!({ "error": { "code": e.code(), "message": e.to_string() } })
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (status_for(&self.0), Json(error_body(&self.0))).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::Usage(format!("invalid request body: {e}")))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/materials", get(materials))
        .route("/latent/from-text", post(from_text))
        .route("/latent/average", post(average))
        .route("/decode", post(decode))
        .route("/simulate", post(simulate))
        .route("/logs/{id}", get(logs))
        .route("/stream", get(stream::handler))
        .fallback(|| async { ApiError(ServiceError::NotFound("no such endpoint".into())) })
        .with_state(state)
}

async fn health(State(s): State<Arc<AppState>>) -> Json<Value> {
    let latent = s.bundle().latent_dim();
    Json(json!({ "status": "ok", "latent_dim": latent, "materials": s.corpus.len() }))
}

async fn materials(State(s): State<Arc<AppState>>) -> Json<Value> {
    let b = s.bundle();
    let list: Vec<Value> = s
        .corpus
        .materials
        .iter()
        .map(|m| {
            let z = b.index.ids.iter().position(|id| id == &m.id).map(|i| &b.index.means[i]);
            json!({
                "id": m.id,
                "family": m.family,
                "class_label": m.class_label,
                "friction": m.friction_coefficient,
                "captions": m.captions,
                "z": z,
            })
        })
        .collect();
    Json(Value::Array(list))
}

#[derive(Deserialize)]
struct PromptRequest {
    prompt: String,
}

async fn from_text(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: PromptRequest = parse_body(&body)?;
    let e = s.embeddings.get(&req.prompt).ok_or_else(|| ServiceError::EmbeddingNotFound(req.prompt.clone()))?;
    let e: Vec<f32> = e.clone();
    let z = align::text_to_latent(Some(&mut s.bundle().model), &e).map_err(ServiceError::from)?;
    Ok(Json(json!({ "prompt": req.prompt, "z": z })))
}

#[derive(Deserialize)]
struct AverageRequest {
    a: Vec<f64>,
    b: Vec<f64>,
}

async fn average(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: AverageRequest = parse_body(&body)?;
    {
        let bundle = s.bundle();
        bundle.check_latent(&req.a)?;
        bundle.check_latent(&req.b)?;
    }
    let z = align::average_latents(&req.a, &req.b).map_err(ServiceError::from)?;
    Ok(Json(json!({ "z": z })))
}

#[derive(Deserialize)]
struct DecodeRequest {
    z: Vec<f64>,
}

async fn decode(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: DecodeRequest = parse_body(&body)?;
    let t = s.texture(Some(&req.z), None)?;
    // the texture must be renderable, not only well-formed
    t.render_model()?;
    Ok(Json(json!({ "ar_grid": t.ar_grid, "tap_bank": t.tap_bank, "mu": t.mu })))
}

#[derive(Deserialize)]
struct SimulateRequest {
    script: Value,
    #[serde(default)]
    z: Option<Vec<f64>>,
    #[serde(default)]
    material: Option<String>,
    #[serde(default)]
    seed: u64,
}

async fn simulate(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: SimulateRequest = parse_body(&body)?;
    let script = TrajectoryScript::from_json(&req.script.to_string()).map_err(ServiceError::from)?;
    script.validate().map_err(ServiceError::from)?;
    let seconds: f64 = script.segments.iter().map(|g| g.duration_s).sum();
    if seconds > MAX_SCRIPT_SECONDS {
        return Err(ServiceError::Usage(format!("script runs {seconds} s, limit is {MAX_SCRIPT_SECONDS} s")).into());
    }
    let texture = s.texture(req.z.as_deref(), req.material.as_deref())?;
    let render = s.render;
    let out = tokio::task::spawn_blocking(move || -> Result<_, ServiceError> {
        let mut sim = ServoSim::new(texture.render_model()?, render, req.seed)?;
        let log = run_trajectory(&script, &mut sim)?;
        let mut csv = Vec::new();
        log.write_csv(&mut csv)?;
        let wav = synth::encode_wav(&log.vibration, log.signal_rate)?;
        let summary = json!({
            "ticks": log.rows.len(),
            "samples": log.vibration.len(),
            "mean_compute_us": log.mean_compute_us(),
            "p99_compute_us": log.percentile_compute_us(99.0),
        });
        Ok((StoredLog { csv, wav }, summary))
    })
    .await
    .map_err(|e| ServiceError::Render(e.to_string()))??;
    let id = s.next_log.fetch_add(1, Ordering::Relaxed);
    s.logs.lock().unwrap_or_else(|e| e.into_inner()).insert(id, out.0);
    let mut summary = out.1;
    summary["id"] = json!(id.to_string());
    Ok(Json(summary))
}

#[derive(Deserialize)]
struct LogQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn logs(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, Query(q): Query<LogQuery>) -> Result<Response, ApiError> {
    let missing = || ServiceError::NotFound(format!("log {id:?}"));
    let key: u64 = id.parse().map_err(|_| missing())?;
    let logs = s.logs.lock().unwrap_or_else(|e| e.into_inner());
    let log = logs.get(&key).ok_or_else(missing)?;
    let (body, kind) = match q.format.as_deref().unwrap_or("csv") {
        "csv" => (log.csv.clone(), "text/csv"),
        "wav" => (log.wav.clone(), "audio/wav"),
        other => return Err(ServiceError::Usage(format!("format must be csv or wav, got {other:?}")).into()),
    };
    Ok(([(header::CONTENT_TYPE, kind)], body).into_response())
}

pub async fn serve(cfg: ServeConfig) -> Result<(), ServiceError> {
    let state = Arc::new(AppState::load(&cfg)?);
    let listener = tokio::net::TcpListener::bind(&cfg.addr).await?;
    println!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
