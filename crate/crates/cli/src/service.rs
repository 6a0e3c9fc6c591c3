//! HTTP/JSON service for interactive sessions.
//!
//! Every session owns its feature cache and interaction state. Rounds on one
//! session are mutually exclusive (a second concurrent round gets 409); rounds on
//! different sessions run concurrently on the blocking pool.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clusterprop::evaluation::class_dsc;
use clusterprop::io::{read_labels, read_volume};
use clusterprop::model::Params;
use clusterprop::propagation::InferenceConfig;
use clusterprop::session::InteractionSession;
use clusterprop::synth::preprocess;
use clusterprop::{Click, Error as CoreError, LabelVolume};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const SCHEMA_VERSION: u32 = 1;
pub const ADDR_ENV: &str = "CLUSTERPROP_ADDR";
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";

struct Slot {
    session: Arc<tokio::sync::Mutex<InteractionSession>>,
    gt: Option<Arc<LabelVolume>>,
}

pub struct AppState {
    params: Arc<Params>,
    cfg: InferenceConfig,
    sessions: Mutex<HashMap<String, Slot>>,
}

impl AppState {
    pub fn new(params: Params, cfg: InferenceConfig) -> Arc<Self> {
        Arc::new(Self { params: Arc::new(params), cfg, sessions: Mutex::new(HashMap::new()) })
    }

    fn lookup(&self, id: &str) -> Result<(Arc<tokio::sync::Mutex<InteractionSession>>, Option<Arc<LabelVolume>>), ApiError> {
        let sessions = self.sessions.lock().unwrap();
        let slot = sessions.get(id).ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))?;
        Ok((slot.session.clone(), slot.gt.clone()))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn busy() -> Self {
        Self::new(StatusCode::CONFLICT, "a refinement round is already running on this session")
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let status = match &e {
            CoreError::ClickCapacity { .. } => StatusCode::CONFLICT,
            CoreError::Bounds(_) | CoreError::Input(_) | CoreError::Shape(_) | CoreError::Io(_) | CoreError::Json(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let message = match &e {
            CoreError::ClickCapacity { class_id, capacity } => {
                format!("click capacity reached for class {class_id} ({capacity} clicks)")
            }
            other => other.to_string(),
        };
        Self::new(status, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "schema_version": SCHEMA_VERSION, "error": self.message }))).into_response()
    }
}

fn ok(mut body: Value) -> Json<Value> {
    body["schema_version"] = json!(SCHEMA_VERSION);
    Json(body)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info).delete(delete_session))
        .route("/sessions/{id}/slice/{t}", get(slice_png))
        .route("/sessions/{id}/auto", post(run_auto))
        .route("/sessions/{id}/clicks", post(post_clicks))
        .route("/sessions/{id}/mask/{t}", get(mask))
        .with_state(state)
}

async fn health() -> Json<Value> {
    ok(json!({ "status": "ok" }))
}

#[derive(Deserialize)]
struct CreateSession {
    volume_path: PathBuf,
    #[serde(default)]
    labels_path: Option<PathBuf>,
}

fn new_id() -> String {
    let bytes: [u8; 12] = rand::rng().random();
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let load = move || -> Result<(clusterprop::Volume, Option<LabelVolume>), CoreError> {
        let volume = read_volume(&req.volume_path)
            .map_err(|e| CoreError::Input(format!("cannot read volume {}: {e}", req.volume_path.display())))?;
        let volume = preprocess(&volume)?;
        let gt = match &req.labels_path {
            Some(p) => {
                let (labels, _) =
                    read_labels(p).map_err(|e| CoreError::Input(format!("cannot read labels {}: {e}", p.display())))?;
                if labels.shape() != volume.shape() {
                    return Err(CoreError::Input("labels do not match the volume shape".into()));
                }
                Some(labels)
            }
            None => None,
        };
        Ok((volume, gt))
    };
    let (volume, gt) = tokio::task::spawn_blocking(load).await.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let shape = volume.shape();
    let session = InteractionSession::new(state.params.clone(), volume, state.cfg.clone());
    let id = new_id();
    state.sessions.lock().unwrap().insert(
        id.clone(),
        Slot { session: Arc::new(tokio::sync::Mutex::new(session)), gt: gt.map(Arc::new) },
    );
    Ok(ok(json!({
        "session_id": id,
        "shape": shape.as_array(),
        "n_classes": state.params.config.n_classes,
        "click_capacity": state.params.config.per_class_centers,
    })))
}

async fn session_info(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let (session, gt) = state.lookup(&id)?;
    let s = session.try_lock().map_err(|_| ApiError::busy())?;
    let counts: BTreeMap<u8, usize> =
        (1..=s.params().config.n_classes as u8).map(|k| (k, s.ledger().count(k))).collect();
    Ok(ok(json!({
        "session_id": id,
        "shape": s.volume().shape().as_array(),
        "round": s.round(),
        "auto_done": s.scores().is_some(),
        "clicks_per_class": counts,
        "has_ground_truth": gt.is_some(),
        "cache_encodes": s.cache().encodes(),
        "cache_hits": s.cache().hits(),
    })))
}

async fn delete_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    state
        .sessions
        .lock()
        .unwrap()
        .remove(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))?;
    Ok(ok(json!({ "session_id": id, "deleted": true })))
}

fn png_bytes(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>, ApiError> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let encode = || -> Result<(), png::EncodingError> {
        let mut w = enc.write_header()?;
        w.write_image_data(data)?;
        w.finish()
    };
    encode().map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(out)
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn slice_png(State(state): State<Arc<AppState>>, Path((id, t)): Path<(String, usize)>) -> Result<Response, ApiError> {
    let (session, _) = state.lookup(&id)?;
    let s = session.try_lock().map_err(|_| ApiError::busy())?;
    let shape = s.volume().shape();
    if t >= shape.slices {
        return Err(ApiError::bad_request(format!("slice {t} outside {} slices", shape.slices)));
    }
    let gray: Vec<u8> = s.volume().slice(t).iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    Ok(png_response(png_bytes(shape.width, shape.height, png::ColorType::Grayscale, &gray)?))
}

/// Per-class DSC against the session's ground truth, if one was loaded.
fn dsc_report(s: &InteractionSession, gt: Option<&LabelVolume>) -> Result<Value, CoreError> {
    match gt {
        Some(gt) => {
            let labels = s.labels()?;
            Ok(json!(class_dsc(&labels, gt, s.params().config.n_classes)?))
        }
        None => Ok(Value::Null),
    }
}

fn predicted_classes(labels: &LabelVolume) -> Vec<u8> {
    let mut seen = [false; 256];
    labels.labels().iter().for_each(|&l| seen[l as usize] = true);
    (1..=255u8).filter(|&k| seen[k as usize]).collect()
}

async fn run_auto(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let (session, gt) = state.lookup(&id)?;
    let mut guard = session.try_lock_owned().map_err(|_| ApiError::busy())?;
    let body = tokio::task::spawn_blocking(move || -> Result<Value, CoreError> {
        guard.run_auto()?;
        let labels = guard.labels()?;
        Ok(json!({
            "round": guard.round(),
            "classes": predicted_classes(&labels),
            "per_class_dsc_if_gt_known": dsc_report(&guard, gt.as_deref())?,
        }))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(ok(body))
}

/// One click, or several clicks forming a single round.
#[derive(Deserialize)]
#[serde(untagged)]
enum ClickBody {
    One(Click),
    Many(Vec<Click>),
}

async fn post_clicks(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<ClickBody>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let (session, gt) = state.lookup(&id)?;
    let Json(body) = body.map_err(|e| ApiError::bad_request(format!("malformed click: {}", e.body_text())))?;
    let clicks = match body {
        ClickBody::One(c) => vec![c],
        ClickBody::Many(v) if !v.is_empty() => v,
        ClickBody::Many(_) => return Err(ApiError::bad_request("malformed click: empty click list")),
    };
    let mut guard = session.try_lock_owned().map_err(|_| ApiError::busy())?;
    let body = tokio::task::spawn_blocking(move || -> Result<Value, CoreError> {
        let round = guard.refine(&clicks)?;
        Ok(json!({
            "round": round,
            "per_class_dsc_if_gt_known": dsc_report(&guard, gt.as_deref())?,
        }))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(ok(body))
}

#[derive(Deserialize)]
struct MaskQuery {
    class: Option<u8>,
    #[serde(default)]
    format: MaskFormat,
}

#[derive(Deserialize, Default, PartialEq)]
#[serde(rename_all = "lowercase")]
enum MaskFormat {
    #[default]
    Rle,
    Png,
}

/// Run-length encoding of a label row-major slice: `[[value, run], ...]`.
#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<(u8, usize)>,
}

pub fn rle_encode(values: &[u8], height: usize, width: usize) -> Rle {
    let mut runs: Vec<(u8, usize)> = Vec::new();
    for &v in values {
        match runs.last_mut() {
            Some((last, n)) if *last == v => *n += 1,
            _ => runs.push((v, 1)),
        }
    }
    Rle { height, width, runs }
}

pub fn rle_decode(rle: &Rle) -> Vec<u8> {
    rle.runs.iter().flat_map(|&(v, n)| std::iter::repeat_n(v, n)).collect()
}

const PALETTE: [[u8; 3]; 8] =
    [[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240], [240, 50, 230]];

async fn mask(
    State(state): State<Arc<AppState>>,
    Path((id, t)): Path<(String, usize)>,
    Query(q): Query<MaskQuery>,
) -> Result<Response, ApiError> {
    let (session, _) = state.lookup(&id)?;
    let s = session.try_lock().map_err(|_| ApiError::busy())?;
    let shape = s.volume().shape();
    if t >= shape.slices {
        return Err(ApiError::bad_request(format!("slice {t} outside {} slices", shape.slices)));
    }
    if let Some(k) = q.class {
        if k == 0 || k as usize > s.params().config.n_classes {
            return Err(ApiError::bad_request(format!("class {k} out of range")));
        }
    }
    let labels = s.labels()?;
    let slice = labels.slice(t);
    let values: Vec<u8> = match q.class {
        Some(k) => slice.iter().map(|&l| (l == k) as u8).collect(),
        None => slice.to_vec(),
    };
    if q.format == MaskFormat::Png {
        let rgba: Vec<u8> = values
            .iter()
            .flat_map(|&v| match (v, q.class) {
                (0, _) => [0, 0, 0, 0],
                (_, Some(k)) => {
                    let c = PALETTE[(k as usize - 1) % PALETTE.len()];
                    [c[0], c[1], c[2], 255]
                }
                (v, None) => {
                    let c = PALETTE[(v as usize - 1) % PALETTE.len()];
                    [c[0], c[1], c[2], 255]
                }
            })
            .collect();
        return Ok(png_response(png_bytes(shape.width, shape.height, png::ColorType::Rgba, &rgba)?));
    }
    let rle = rle_encode(&values, shape.height, shape.width);
    Ok(ok(json!({ "slice": t, "class": q.class, "round": s.round(), "mask": rle })).into_response())
}

/// Serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
