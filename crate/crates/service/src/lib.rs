//! HTTP API over a frozen model: classification, counterfactuals and
//! prototypes. Images travel as base64 PNG inside JSON.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{AllowOrigin, CorsLayer};

use gdvae::counterfactual::{cf_image, prototype_path, CfMethod, CfRequest, CfTarget};
use gdvae::data::png::{decode_gray, encode_gray};
use gdvae::data::ImageBatch;
use gdvae::em::{em_classify, EmConfig, EmMode};
use gdvae::gaussian::{argmax, gda_posterior, GdaParams};
use gdvae::nets::{decode, gda_params, latents_tensor, prototypes, GdvaeModel, GdvaeNet};
use gdvae::Error;

/// Shared, read-only model plus a request counter.
pub struct AppState {
    model: GdvaeModel,
    gda: GdaParams,
    checksum: String,
    requests: AtomicU64,
}

impl AppState {
    /// `checksum` identifies the checkpoint the model came from.
    pub fn new(model: GdvaeModel, checksum: String) -> gdvae::Result<Self> {
        let gda = gda_params(&model)?;
        Ok(Self {
            model,
            gda,
            checksum,
            requests: AtomicU64::new(0),
        })
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }
}

/// An error response with a JSON body `{"error": …}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::DegenerateDirection(_) => StatusCode::CONFLICT,
            Error::DimensionMismatch { .. }
            | Error::ClassOutOfRange { .. }
            | Error::SameClass(_)
            | Error::InvalidArgument(_)
            | Error::SharedCovarianceRequired => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiImage {
    pub image: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiCfRequest {
    pub image: String,
    pub p_c: f64,
    pub method: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub probs: Vec<f64>,
    pub predicted: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CfResponse {
    pub x_star: String,
    pub x_delta: String,
    pub p_hat: f64,
    pub kappa: f64,
    pub delta: f64,
    pub class: usize,
    pub counter_class: usize,
    pub class_probs: Vec<f64>,
    /// Discriminant value reached in latent space.
    pub f_delta: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PrototypesResponse {
    pub prototypes: Vec<String>,
    pub path: Vec<String>,
}

#[derive(Debug, Deserialize)]
pub struct PrototypeQuery {
    pub steps: Option<String>,
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed payload: {e}")))
}

/// Decodes a base64 PNG into a `[1, C, H, W]` batch of the model's shape.
fn decode_image(model: &GdvaeModel, b64: &str) -> Result<ImageBatch, ApiError> {
    let bytes = B64
        .decode(b64.trim())
        .map_err(|e| ApiError::bad_request(format!("invalid base64: {e}")))?;
    let (h, w, pixels) =
        decode_gray(&bytes).map_err(|e| ApiError::bad_request(format!("invalid PNG: {e}")))?;
    let shape = model.image_shape();
    if (1, h, w) != shape {
        return Err(ApiError::unprocessable(format!(
            "image is {h}×{w}, model expects {}×{}",
            shape.1, shape.2
        )));
    }
    Ok(ImageBatch::new(pixels, 1, shape)?)
}

fn encode_image(batch: &ImageBatch, i: usize) -> Result<String, ApiError> {
    let (_, h, w) = batch.shape();
    Ok(B64.encode(encode_gray(batch.image(i), h, w)?))
}

fn em_config(seed: Option<u64>) -> EmConfig {
    match seed {
        Some(seed) => EmConfig {
            mode: EmMode::Stochastic { seed },
            ..EmConfig::default()
        },
        None => EmConfig::mean_only(),
    }
}

async fn blocking<T, F>(state: Arc<AppState>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
{
    state.requests.fetch_add(1, Ordering::Relaxed);
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: format!("worker failed: {e}"),
        })?
        .map(Json)
}

fn classify(state: &AppState, req: ApiImage) -> Result<ClassifyResponse, ApiError> {
    let batch = decode_image(&state.model, &req.image)?;
    let x = batch.to_tensor(state.model.dtype(), state.model.device()).map_err(ApiError::from)?;
    let probs = em_classify(&state.model, &state.gda, &x, &em_config(req.seed))?.remove(0);
    Ok(ClassifyResponse {
        predicted: argmax(&probs),
        probs,
    })
}

fn counterfactual(state: &AppState, req: ApiCfRequest) -> Result<CfResponse, ApiError> {
    let method: CfMethod = req
        .method
        .parse()
        .map_err(|e: Error| ApiError::unprocessable(e.to_string()))?;
    if !(req.p_c > 0.0 && req.p_c < 1.0) {
        return Err(ApiError::unprocessable(format!(
            "p_c must lie strictly inside (0, 1), got {}",
            req.p_c
        )));
    }
    let batch = decode_image(&state.model, &req.image)?;
    let x = batch.to_tensor(state.model.dtype(), state.model.device()).map_err(ApiError::from)?;
    let cf_req = CfRequest {
        method,
        target: CfTarget::Confidence(req.p_c),
        counter_class: None,
        reference_class: None,
    };
    let r = cf_image(&state.model, &state.gda, &x, &cf_req, &em_config(req.seed), req.seed)?;
    Ok(CfResponse {
        x_star: encode_image(&r.x_star, 0)?,
        x_delta: encode_image(&r.x_delta, 0)?,
        p_hat: r.p_hat,
        kappa: r.kappa,
        delta: r.delta,
        class: r.class,
        counter_class: r.counter_class,
        class_probs: r.class_probs,
        f_delta: r.f_delta,
    })
}

fn prototype_images(state: &AppState, steps: usize) -> Result<PrototypesResponse, ApiError> {
    let model = &state.model;
    let protos = ImageBatch::from_tensor(&prototypes(model)?)?;
    let path = prototype_path(&state.gda, 0, 1, steps)?;
    // Each path point is decoded with the class the latent classifier assigns.
    let labels = path
        .iter()
        .map(|z| gda_posterior(&state.gda, z).map(|p| argmax(&p)))
        .collect::<gdvae::Result<Vec<_>>>()?;
    let z = latents_tensor(&path, model.dtype(), model.device())?;
    let imgs = ImageBatch::from_tensor(&decode(model, &z, &labels)?)?;
    Ok(PrototypesResponse {
        prototypes: (0..protos.len()).map(|i| encode_image(&protos, i)).collect::<Result<_, _>>()?,
        path: (0..imgs.len()).map(|i| encode_image(&imgs, i)).collect::<Result<_, _>>()?,
    })
}

/// Upper bound on `steps` for the prototype path.
pub const MAX_PATH_STEPS: usize = 256;

async fn handle_classify(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<ClassifyResponse> {
    let req: ApiImage = parse_json(&body)?;
    blocking(state, move |s| classify(s, req)).await
}

async fn handle_cf(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<CfResponse> {
    let req: ApiCfRequest = parse_json(&body)?;
    blocking(state, move |s| counterfactual(s, req)).await
}

async fn handle_prototypes(
    State(state): State<Arc<AppState>>,
    Query(q): Query<PrototypeQuery>,
) -> ApiResult<PrototypesResponse> {
    let steps = match q.steps.as_deref() {
        None => 2,
        Some(s) => s
            .parse::<usize>()
            .map_err(|_| ApiError::bad_request(format!("steps must be an integer, got {s:?}")))?,
    };
    if !(2..=MAX_PATH_STEPS).contains(&steps) {
        return Err(ApiError::bad_request(format!(
            "steps must be between 2 and {MAX_PATH_STEPS}"
        )));
    }
    blocking(state, move |s| prototype_images(s, steps)).await
}

async fn handle_health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "checksum": state.checksum,
        "config": state.model.config(),
        "requests": state.requests(),
    }))
}

/// CORS policy: any origin when `origin` is `None`.
pub fn cors(origin: Option<&str>) -> Result<CorsLayer, String> {
    let allow = match origin {
        None => AllowOrigin::any(),
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o).map_err(|e| format!("bad origin {o:?}: {e}"))?),
    };
    Ok(CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE]))
}

pub fn router(state: Arc<AppState>, cors: CorsLayer) -> Router {
    Router::new()
        .route("/api/classify", post(handle_classify))
        .route("/api/cf", post(handle_cf))
        .route("/api/prototypes", get(handle_prototypes))
        .route("/health", get(handle_health))
        .layer(cors)
        .with_state(state)
}

/// Serves until the process receives Ctrl-C.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr, cors: CorsLayer) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, cors))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
