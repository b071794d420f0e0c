use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderName, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde_json::json;
use tokio::sync::Semaphore;
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

use crate::explorer::{EditStack, Explorer, StripRequest, EPS_LIMIT, MAX_STRIP};

const LATENT_NORM_HEADER: &str = "x-latent-norm";
const EPS_CLAMPED_HEADER: &str = "x-eps-clamped";
const EPS_RANGE_HEADER: &str = "x-eps-range";

/// An error response: `{"error": message, "field": path}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub field: Option<String>,
    pub message: String,
}

impl ApiError {
    pub fn bad_request(field: Option<String>, message: String) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            field,
            message,
        }
    }

    pub fn unprocessable(field: String, message: String) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            field: Some(field),
            message,
        }
    }

    pub fn internal(err: impl std::fmt::Display) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            field: None,
            message: err.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message, "field": self.field }))).into_response()
    }
}

/// Shared, read-only model plus a bound on concurrent renders.
pub struct AppState {
    pub explorer: Explorer,
    workers: Semaphore,
}

impl AppState {
    pub fn new(explorer: Explorer, workers: usize) -> Arc<Self> {
        Arc::new(Self {
            explorer,
            workers: Semaphore::new(workers.max(1)),
        })
    }

    /// Runs `f` on the blocking pool once a worker slot is free.
    async fn run<R: Send + 'static>(
        self: &Arc<Self>,
        f: impl FnOnce(&Explorer) -> Result<R, ApiError> + Send + 'static,
    ) -> Result<R, ApiError> {
        let _permit = self.workers.acquire().await.map_err(ApiError::internal)?;
        let state = Arc::clone(self);
        tokio::task::spawn_blocking(move || f(&state.explorer))
            .await
            .map_err(ApiError::internal)?
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let mut de = serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let field = (path != ".").then_some(path);
        ApiError::bad_request(field, e.into_inner().to_string())
    })
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let ex = &state.explorer;
    Json(json!({
        "status": "ok",
        "K": ex.num_directions(),
        "latent_dim": ex.latent_dim(),
        "checkpoint_id": ex.checkpoint_id(),
        "generator": ex.generator_name(),
        "eps_range": [-EPS_LIMIT, EPS_LIMIT],
        "max_shifts": ex.max_shifts(),
        "max_strip": MAX_STRIP,
    }))
}

async fn directions(State(state): State<Arc<AppState>>) -> Response {
    Json(state.explorer.directions()).into_response()
}

async fn generate(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let stack: EditStack = parse_body(&body)?;
    let out = state.run(move |ex| ex.generate(&stack)).await?;
    let headers = [
        (header::CONTENT_TYPE, HeaderValue::from_static("image/png")),
        (
            HeaderName::from_static(LATENT_NORM_HEADER),
            HeaderValue::from_str(&out.latent_norm.to_string()).map_err(ApiError::internal)?,
        ),
        (
            HeaderName::from_static(EPS_CLAMPED_HEADER),
            HeaderValue::from_static(if out.clamped { "true" } else { "false" }),
        ),
        (
            HeaderName::from_static(EPS_RANGE_HEADER),
            HeaderValue::from_static("-8,8"),
        ),
    ];
    Ok((headers, out.png).into_response())
}

async fn strip(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: StripRequest = parse_body(&body)?;
    let pngs = state.run(move |ex| ex.strip(&req)).await?;
    let encoded: Vec<String> = pngs
        .iter()
        .map(|p| base64::engine::general_purpose::STANDARD.encode(p))
        .collect();
    Ok(Json(encoded).into_response())
}

/// All routes, with CORS open to any origin. With `static_dir`, other paths
/// serve files from it (for the browser frontend).
pub fn router(state: Arc<AppState>, static_dir: Option<PathBuf>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers(Any)
        .expose_headers([
            HeaderName::from_static(LATENT_NORM_HEADER),
            HeaderName::from_static(EPS_CLAMPED_HEADER),
            HeaderName::from_static(EPS_RANGE_HEADER),
        ]);
    let mut app = Router::new()
        .route("/healthz", get(healthz))
        .route("/directions", get(directions))
        .route("/generate", post(generate))
        .route("/strip", post(strip));
    if let Some(dir) = static_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    app.layer(cors).with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, static_dir)).await
}
