//! Read-only HTTP facade over a loaded model, gallery index and dataset.
//!
//! Every handler reads from one immutable [`ServiceState`]; nothing is
//! mutated after startup, so responses depend only on the request.

use std::io::Cursor;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::engine::{self, GalleryIndex, QueryResult};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::synthgen::{to_rgb8, Dataset, LabeledImage};

pub struct ServiceState {
    pub model: Model,
    pub index: GalleryIndex,
    pub data: Dataset,
}

impl ServiceState {
    /// Refuses an index built by a different checkpoint, or a dataset with
    /// a different schema.
    pub fn new(model: Model, index: GalleryIndex, data: Dataset) -> Result<Self> {
        index.check_version(&model)?;
        if data.schema != model.schema {
            return Err(Error::Argument("dataset schema differs from the checkpoint schema".into()));
        }
        Ok(Self { model, index, data })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub query_id: String,
    pub attribute: String,
    pub value: String,
    pub k: usize,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    code: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<&'static str>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn not_found(message: impl Into<String>) -> Self {
        Self { status: StatusCode::NOT_FOUND, body: ErrorBody { code: "not_found", message: message.into(), field: None } }
    }

    fn invalid(field: Option<&'static str>, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: ErrorBody { code: "invalid_request", message: message.into(), field },
        }
    }

    fn internal(err: Error) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: ErrorBody { code: "internal", message: err.to_string(), field: None },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.body }))).into_response()
    }
}

type Shared = Arc<ServiceState>;

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/schema", get(schema))
        .route("/query", post(query))
        .route("/aam/:id/:attribute", get(aam_png))
        .route("/aam/:id/:attribute/box", get(aam_box))
        .route("/gallery/:id/thumbnail", get(thumbnail))
        .with_state(Arc::new(state))
}

pub async fn serve(state: ServiceState, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn schema(State(state): State<Shared>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], state.model.schema.to_canonical_json()).into_response()
}

async fn query(State(state): State<Shared>, body: Bytes) -> Result<Json<QueryResult>, ApiError> {
    let req: QueryRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::invalid(None, format!("malformed request body: {e}")))?;
    Ok(Json(run_query(&state, &req)?))
}

/// Resolves names and ids, then delegates to the engine.
pub fn run_query(state: &ServiceState, req: &QueryRequest) -> Result<QueryResult, ApiError> {
    let schema = &state.model.schema;
    let image = find_image(state, &req.query_id)?;
    let a = schema
        .attribute_index(&req.attribute)
        .ok_or_else(|| ApiError::invalid(Some("attribute"), format!("unknown attribute '{}'", req.attribute)))?;
    let v = schema.value_index(a, &req.value).ok_or_else(|| {
        ApiError::invalid(Some("value"), format!("attribute '{}' has no value '{}'", req.attribute, req.value))
    })?;
    if req.k < 1 {
        return Err(ApiError::invalid(Some("k"), "k must be at least 1"));
    }
    if image.labels[a] == v {
        return Err(ApiError::invalid(
            Some("value"),
            format!("query already has {}={}; choose a different value", req.attribute, req.value),
        ));
    }
    engine::query(&state.model, &state.index, image, a, v, req.k).map_err(ApiError::internal)
}

fn find_image<'a>(state: &'a ServiceState, id: &str) -> Result<&'a LabeledImage, ApiError> {
    state.data.get(id).ok_or_else(|| ApiError::not_found(format!("no image with id '{id}'")))
}

fn attribute_or_404(state: &ServiceState, name: &str) -> Result<usize, ApiError> {
    state.model.schema.attribute_index(name).ok_or_else(|| ApiError::not_found(format!("no attribute named '{name}'")))
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn encode_png(img: &image::DynamicImage) -> Result<Vec<u8>, ApiError> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).map_err(|e| ApiError::internal(e.into()))?;
    Ok(out.into_inner())
}

async fn aam_png(State(state): State<Shared>, Path((id, attribute)): Path<(String, String)>) -> Result<Response, ApiError> {
    let image = find_image(&state, &id)?;
    let a = attribute_or_404(&state, &attribute)?;
    let (_, heat) = state.model.explain(&image.id, &image.pixels, a).map_err(ApiError::internal)?;
    let bytes = encode_png(&image::DynamicImage::ImageLuma8(heat))?;
    Ok(png_response(bytes))
}

async fn aam_box(State(state): State<Shared>, Path((id, attribute)): Path<(String, String)>) -> Result<Response, ApiError> {
    let image = find_image(&state, &id)?;
    let a = attribute_or_404(&state, &attribute)?;
    let (record, _) = state.model.explain(&image.id, &image.pixels, a).map_err(ApiError::internal)?;
    Ok(Json(record).into_response())
}

async fn thumbnail(State(state): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let image = find_image(&state, &id)?;
    let rgb = to_rgb8(&image.pixels).map_err(ApiError::internal)?;
    let bytes = encode_png(&image::DynamicImage::ImageRgb8(rgb))?;
    Ok(png_response(bytes))
}
