//! JSON-over-HTTP demo API: upload a photo, pick channel conditions, get
//! both systems' reconstructions with SSIM/PSNR.
//!
//! Uploads are resized so each side is a multiple of 32 (at most 512),
//! cut into 32×32 tiles, sent tile by tile and reassembled. Metrics compare
//! against that resized frame (`original_processed`), not the raw upload.

use std::collections::hash_map::RandomState;
use std::collections::BTreeMap;
use std::hash::{BuildHasher, Hasher};
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::codecs::png::PngEncoder;
use image::imageops::FilterType;
use image::{ImageFormat, ImageReader, RgbImage};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

use semlink::channel::{ChannelModel, Snr};
use semlink::checkpoint::decode_checkpoint;
use semlink::codec::{param_count, CodecParams};
use semlink::harness::System;
use semlink::rng::derive_seed;
use semlink::tiling::{frame_report, tile_count, transmit_frame, FrameLink};

pub const MAX_BODY_BYTES: usize = 16 * 1024 * 1024;
/// Uploads with a side above this are refused before decoding.
pub const MAX_DECODED_SIDE: u32 = 8192;
/// Longest side after resizing.
pub const MAX_SIDE: u32 = 512;
pub const TILE: u32 = 32;
pub const MIN_SNR_DB: f64 = -20.0;
pub const MAX_SNR_DB: f64 = 100.0;
pub const MAX_GRID: usize = 16;
pub const MAX_REPEATS: u32 = 16;

/// A decibel value serialized as a number, or `"inf"` when infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decibels(pub f64);

impl Serialize for Decibels {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Decibels {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Snr::deserialize(d).map(|s| Decibels(s.db()))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransmitRequest {
    pub image: String,
    pub snr_db: Snr,
    pub channel: ChannelModel,
    pub systems: Vec<System>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemResult {
    pub reconstruction: String,
    pub ssim: f64,
    pub psnr_db: Decibels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmitResponse {
    pub seed: u64,
    pub channel: ChannelModel,
    pub snr_db: Snr,
    pub width: u32,
    pub height: u32,
    pub tiles: usize,
    pub original_processed: String,
    pub results: BTreeMap<System, SystemResult>,
    pub timing_ms: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRequest {
    pub image: String,
    pub channel: ChannelModel,
    pub grid: Vec<Snr>,
    #[serde(default)]
    pub systems: Option<Vec<System>>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Transmissions averaged per grid point.
    #[serde(default)]
    pub repeats: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub snr_db: Snr,
    pub ssim: BTreeMap<System, f64>,
    pub psnr_db: BTreeMap<System, Decibels>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResponse {
    pub seed: u64,
    pub channel: ChannelModel,
    pub repeats: u32,
    pub width: u32,
    pub height: u32,
    pub points: Vec<SweepPoint>,
    pub timing_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn bad(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    fn too_large(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::PAYLOAD_TOO_LARGE,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

/// Immutable model state shared by every request.
pub struct AppState {
    params: CodecParams<f32>,
    checkpoint_id: String,
}

impl AppState {
    pub fn new(params: CodecParams<f32>, checkpoint_id: String) -> Self {
        Self { params, checkpoint_id }
    }

    /// Loads a checkpoint; its id is the first 16 hex digits of the file's
    /// SHA-256.
    pub fn from_checkpoint(path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("cannot read checkpoint {}", path.display()))?;
        let ck = decode_checkpoint(&bytes, path)?;
        let digest = format!("{:x}", Sha256::digest(&bytes));
        Ok(Self::new(ck.params, digest[..16].to_string()))
    }

    pub fn info(&self) -> serde_json::Value {
        let cfg = self.params.config();
        serde_json::json!({
            "codec": cfg,
            "param_count": param_count(cfg),
            "checkpoint_id": self.checkpoint_id,
            "channels": ChannelModel::ALL,
            "systems": System::ALL,
            "snr_db": { "min": MIN_SNR_DB, "max": MAX_SNR_DB, "noiseless": "inf" },
            "max_side": MAX_SIDE,
            "tile": TILE,
            "max_grid": MAX_GRID,
            "max_repeats": MAX_REPEATS,
            "max_body_bytes": MAX_BODY_BYTES,
        })
    }

    fn send(&self, system: System, img: &RgbImage, link: &FrameLink) -> Result<RgbImage, ApiError> {
        transmit_frame(system, Some(&self.params), img, link).map_err(|e| ApiError::internal(e.to_string()))
    }

    pub fn transmit(&self, req: TransmitRequest) -> Result<TransmitResponse, ApiError> {
        let start = Instant::now();
        check_snr(req.snr_db)?;
        let systems = check_systems(&req.systems)?;
        let img = preprocess(&decode_upload(&req.image)?);
        let seed = req.seed.unwrap_or_else(fresh_seed);
        let link = FrameLink::new(req.channel, req.snr_db, seed);
        let mut results = BTreeMap::new();
        for system in systems {
            let recon = self.send(system, &img, &link)?;
            let r = frame_report(&img, &recon).map_err(|e| ApiError::internal(e.to_string()))?;
            results.insert(
                system,
                SystemResult {
                    reconstruction: png_base64(&recon)?,
                    ssim: r.ssim,
                    psnr_db: Decibels(r.psnr_db),
                },
            );
        }
        Ok(TransmitResponse {
            seed,
            channel: req.channel,
            snr_db: req.snr_db,
            width: img.width(),
            height: img.height(),
            tiles: tile_count(img.width(), img.height()),
            original_processed: png_base64(&img)?,
            results,
            timing_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    pub fn sweep(&self, req: SweepRequest) -> Result<SweepResponse, ApiError> {
        let start = Instant::now();
        if req.grid.is_empty() || req.grid.len() > MAX_GRID {
            return Err(ApiError::bad(format!("grid must have 1 to {MAX_GRID} points")));
        }
        for &s in &req.grid {
            check_snr(s)?;
        }
        let systems = check_systems(req.systems.as_deref().unwrap_or(&System::ALL))?;
        let repeats = req.repeats.unwrap_or(1);
        if !(1..=MAX_REPEATS).contains(&repeats) {
            return Err(ApiError::bad(format!("repeats must be between 1 and {MAX_REPEATS}")));
        }
        let img = preprocess(&decode_upload(&req.image)?);
        let seed = req.seed.unwrap_or_else(fresh_seed);
        let mut points = Vec::with_capacity(req.grid.len());
        for &snr in &req.grid {
            let mut ssim = BTreeMap::new();
            let mut psnr = BTreeMap::new();
            for &system in &systems {
                let (mut s_sum, mut p_sum) = (0.0, 0.0);
                for r in 0..repeats {
                    let link = FrameLink::new(req.channel, snr, derive_seed(&[seed, r as u64]));
                    let recon = self.send(system, &img, &link)?;
                    let rep = frame_report(&img, &recon).map_err(|e| ApiError::internal(e.to_string()))?;
                    s_sum += rep.ssim;
                    p_sum += rep.psnr_db;
                }
                ssim.insert(system, s_sum / repeats as f64);
                psnr.insert(system, Decibels(p_sum / repeats as f64));
            }
            points.push(SweepPoint {
                snr_db: snr,
                ssim,
                psnr_db: psnr,
            });
        }
        Ok(SweepResponse {
            seed,
            channel: req.channel,
            repeats,
            width: img.width(),
            height: img.height(),
            points,
            timing_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

fn check_snr(s: Snr) -> Result<(), ApiError> {
    match s {
        Snr::Noiseless => Ok(()),
        Snr::Db(v) if (MIN_SNR_DB..=MAX_SNR_DB).contains(&v) => Ok(()),
        Snr::Db(v) => Err(ApiError::bad(format!(
            "snr_db {v} outside [{MIN_SNR_DB}, {MAX_SNR_DB}] (or \"inf\")"
        ))),
    }
}

fn check_systems(systems: &[System]) -> Result<Vec<System>, ApiError> {
    let mut out: Vec<System> = Vec::new();
    for &s in systems {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    if out.is_empty() {
        return Err(ApiError::bad("systems must name at least one of dnn, qam256"));
    }
    Ok(out)
}

/// Random seed within the range a JavaScript number holds exactly.
fn fresh_seed() -> u64 {
    let mut h = RandomState::new().build_hasher();
    if let Ok(t) = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH) {
        h.write_u128(t.as_nanos());
    }
    h.finish() & ((1 << 53) - 1)
}

/// Decodes a base64 PNG (a `data:` URL prefix is tolerated).
pub fn decode_upload(b64: &str) -> Result<RgbImage, ApiError> {
    let data = b64.trim();
    let data = data.strip_prefix("data:image/png;base64,").unwrap_or(data);
    let bytes = STANDARD
        .decode(data)
        .map_err(|e| ApiError::bad(format!("image is not valid base64: {e}")))?;
    let (w, h) = ImageReader::with_format(Cursor::new(&bytes), ImageFormat::Png)
        .into_dimensions()
        .map_err(|e| ApiError::bad(format!("image is not a decodable PNG: {e}")))?;
    if w > MAX_DECODED_SIDE || h > MAX_DECODED_SIDE {
        return Err(ApiError::too_large(format!(
            "image is {w}x{h}; sides above {MAX_DECODED_SIDE} are refused"
        )));
    }
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| ApiError::bad(format!("image is not a decodable PNG: {e}")))?;
    Ok(img.to_rgb8())
}

/// Target size: fit within 512×512 keeping the aspect ratio, then round
/// each side down to a multiple of 32 (at least 32).
pub fn processed_size(w: u32, h: u32) -> (u32, u32) {
    let scale = (MAX_SIDE as f64 / w.max(1) as f64)
        .min(MAX_SIDE as f64 / h.max(1) as f64)
        .min(1.0);
    let fit = |side: u32| (((side as f64 * scale).floor() as u32) / TILE * TILE).max(TILE);
    (fit(w), fit(h))
}

pub fn preprocess(img: &RgbImage) -> RgbImage {
    let (w, h) = processed_size(img.width(), img.height());
    if (w, h) == img.dimensions() {
        img.clone()
    } else {
        image::imageops::resize(img, w, h, FilterType::Triangle)
    }
}

pub fn png_base64(img: &RgbImage) -> Result<String, ApiError> {
    let mut buf = Vec::new();
    img.write_with_encoder(PngEncoder::new(&mut buf))
        .map_err(|e| ApiError::internal(format!("png encoding failed: {e}")))?;
    Ok(STANDARD.encode(buf))
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad(format!("invalid request: {e}")))
}

async fn run_blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn transmit_handler(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<TransmitResponse>, ApiError> {
    let req: TransmitRequest = parse_json(&body)?;
    run_blocking(move || st.transmit(req)).await.map(Json)
}

async fn sweep_handler(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<SweepResponse>, ApiError> {
    let req: SweepRequest = parse_json(&body)?;
    run_blocking(move || st.sweep(req)).await.map(Json)
}

async fn info_handler(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(st.info())
}

/// The API under `/api`, plus static files from `ui` at `/` when given.
pub fn router(state: Arc<AppState>, ui: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/transmit", post(transmit_handler))
        .route("/api/sweep", post(sweep_handler))
        .route("/api/info", get(info_handler))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state);
    let app = match ui {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.layer(
        CorsLayer::new()
            .allow_origin(Any)
            .allow_methods([Method::GET, Method::POST])
            .allow_headers([header::CONTENT_TYPE]),
    )
}
