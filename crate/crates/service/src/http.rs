//! HTTP surface of the model runner.
//!
//! Data endpoints take `multipart/form-data` with parts named `csv`, `json`,
//! `proto`, `model` or `config`, and an optional `operation` query parameter.
//! Each request takes one snapshot of the serving state on entry and reports
//! its epoch in the `X-Model-Epoch` header.

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use runner_core::bundle::{load_bundle, looks_like_archive, BundleError};
use runner_core::schema::parse_schema;
use runner_core::serving::{predict_payload, select_input_message, serialize_rows, DataFormat, RequestError};
use runner_core::swap::{SwapError, SwapManager};
use runner_core::tabular::TabularError;
use serde::Deserialize;
use serde_json::{json, Value as JsonValue};

pub const EPOCH_HEADER: &str = "x-model-epoch";

#[derive(Clone)]
struct AppState {
    manager: Arc<SwapManager>,
}

pub fn router(manager: Arc<SwapManager>, max_body_bytes: usize) -> Router {
    Router::new()
        .route("/getBinary", post(get_binary_supplied_csv))
        .route("/getBinaryDefault", post(get_binary_default_csv))
        .route("/getBinaryJSON", post(get_binary_supplied_json))
        .route("/getBinaryJSONDefault", post(get_binary_default_json))
        .route("/model", post(replace_model))
        .route("/model/configuration", post(replace_config))
        .route("/proto", post(replace_proto).get(current_proto))
        .route("/transformCSV", post(transform_install_csv))
        .route("/transformCSVDefault", post(transform_default_csv))
        .route("/transformJSON", post(transform_install_json))
        .route("/transformJSONDefault", post(transform_default_json))
        .route("/status", get(status))
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .with_state(AppState { manager })
}

#[derive(Debug, Deserialize)]
struct OperationQuery {
    operation: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
    epoch: Option<u64>,
    post_swap: bool,
    details: Option<JsonValue>,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, kind, message: message.into(), epoch: None, post_swap: false, details: None }
    }

    fn with_epoch(mut self, epoch: Option<u64>) -> Self {
        self.epoch = epoch;
        self
    }

    fn bad_request(kind: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, kind, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.kind, "message": self.message });
        if let Some(epoch) = self.epoch {
            body["epoch"] = json!(epoch);
        }
        if self.post_swap {
            body["post_swap_request_error"] = json!(true);
        }
        if let Some(details) = self.details {
            body["details"] = details;
        }
        let mut response = (self.status, Json(body)).into_response();
        if let Some(epoch) = self.epoch {
            response.headers_mut().insert(EPOCH_HEADER, HeaderValue::from(epoch));
        }
        response
    }
}

fn tabular_details(e: &TabularError) -> Option<JsonValue> {
    Some(match e {
        TabularError::CoercionError { row, column, expected, .. } => json!({ "row": row, "column": column, "expected": expected }),
        TabularError::ColumnCountMismatch { row, expected, found } => json!({ "row": row, "expected": expected, "found": found }),
        TabularError::HeaderFieldUnknown { column } => json!({ "column": column }),
        TabularError::UnknownKey { path, key } => json!({ "path": path, "key": key }),
        TabularError::JsonCoercionError { path, expected, .. } => json!({ "path": path, "expected": expected }),
        TabularError::ArrayForScalarField { path } => json!({ "path": path }),
        TabularError::JsonSyntaxError { line, column, .. } => json!({ "line": line, "column": column }),
        _ => return None,
    })
}

fn request_error(e: RequestError) -> ApiError {
    let (kind, details) = match &e {
        RequestError::Data(t) => ("data_error", tabular_details(t)),
        RequestError::Predict(_) => ("prediction_error", None),
        RequestError::Encode(_) => ("encode_error", None),
        RequestError::Operation(_) => ("unknown_operation", None),
        RequestError::Schema(_) => ("schema_error", None),
    };
    let mut err = ApiError::bad_request(kind, e.to_string());
    err.details = details;
    err
}

fn swap_error(e: SwapError) -> ApiError {
    match e {
        SwapError::NotInitialized => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "not_initialized", e.to_string()),
        SwapError::Validation(b) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation_error", b.to_string()),
        SwapError::Store(s) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "store_error", s.to_string()),
        SwapError::Request(r) => request_error(r),
        SwapError::PostSwapRequest { epoch, source } => {
            let mut err = request_error(source).with_epoch(Some(epoch));
            err.kind = "post_swap_request_error";
            err.post_swap = true;
            err
        }
    }
}

struct Parts(HashMap<String, Vec<u8>>);

impl Parts {
    async fn read(mut multipart: Multipart, allowed: &[&str]) -> Result<Self, ApiError> {
        let mut parts = HashMap::new();
        loop {
            let field = multipart
                .next_field()
                .await
                .map_err(|e| ApiError::new(e.status(), "multipart_error", e.body_text()))?;
            let Some(field) = field else { break };
            let name = field.name().unwrap_or_default().to_string();
            if !allowed.contains(&name.as_str()) {
                return Err(ApiError::bad_request(
                    "unexpected_part",
                    format!("part {name:?} is not accepted here (allowed: {})", allowed.join(", ")),
                ));
            }
            let bytes = field.bytes().await.map_err(|e| ApiError::new(e.status(), "multipart_error", e.body_text()))?;
            if parts.insert(name.clone(), bytes.to_vec()).is_some() {
                return Err(ApiError::bad_request("duplicate_part", format!("part {name:?} given twice")));
            }
        }
        Ok(Parts(parts))
    }

    fn bytes(&mut self, name: &str) -> Result<Vec<u8>, ApiError> {
        self.0
            .remove(name)
            .ok_or_else(|| ApiError::bad_request("missing_part", format!("multipart part {name:?} is required")))
    }

    fn text(&mut self, name: &str) -> Result<String, ApiError> {
        String::from_utf8(self.bytes(name)?)
            .map_err(|_| ApiError::bad_request("invalid_utf8", format!("part {name:?} is not UTF-8 text")))
    }
}

fn data_part(format: DataFormat) -> &'static str {
    format.name()
}

fn binary_response(bytes: Vec<u8>, epoch: Option<u64>) -> Response {
    let mut response = (StatusCode::OK, [(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response();
    if let Some(epoch) = epoch {
        response.headers_mut().insert(EPOCH_HEADER, HeaderValue::from(epoch));
    }
    response
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal_error", e.to_string()))
}

async fn get_binary(state: AppState, multipart: Multipart, format: DataFormat, supplied: bool) -> Result<Response, ApiError> {
    let snapshot = state.manager.snapshot().ok();
    let epoch = snapshot.as_ref().map(|s| s.epoch);
    let allowed: &[&str] = if supplied { &[data_part(format), "proto"] } else { &[data_part(format)] };
    let mut parts = Parts::read(multipart, allowed).await.map_err(|e| e.with_epoch(epoch))?;
    let data = parts.text(data_part(format)).map_err(|e| e.with_epoch(epoch))?;

    let descriptor = if supplied {
        let proto = parts.text("proto").map_err(|e| e.with_epoch(epoch))?;
        let schema = parse_schema(&proto).map_err(|e| {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "schema_error", e.to_string()).with_epoch(epoch)
        })?;
        let preferred = snapshot.as_ref().map(|s| s.bundle.config.input_message.as_str());
        select_input_message(&schema, preferred)
    } else {
        match &snapshot {
            Some(s) => Arc::clone(s.bundle.input_descriptor()),
            None => return Err(swap_error(SwapError::NotInitialized)),
        }
    };
    let bytes = blocking(move || serialize_rows(&data, format, &descriptor))
        .await?
        .map_err(|e| request_error(e).with_epoch(epoch))?;
    Ok(binary_response(bytes, epoch))
}

async fn get_binary_supplied_csv(State(s): State<AppState>, Query(_): Query<OperationQuery>, m: Multipart) -> Result<Response, ApiError> {
    get_binary(s, m, DataFormat::Csv, true).await
}

async fn get_binary_default_csv(State(s): State<AppState>, Query(_): Query<OperationQuery>, m: Multipart) -> Result<Response, ApiError> {
    get_binary(s, m, DataFormat::Csv, false).await
}

async fn get_binary_supplied_json(State(s): State<AppState>, Query(_): Query<OperationQuery>, m: Multipart) -> Result<Response, ApiError> {
    get_binary(s, m, DataFormat::Json, true).await
}

async fn get_binary_default_json(State(s): State<AppState>, Query(_): Query<OperationQuery>, m: Multipart) -> Result<Response, ApiError> {
    get_binary(s, m, DataFormat::Json, false).await
}

async fn transform_default(state: AppState, multipart: Multipart, format: DataFormat, operation: Option<String>) -> Result<Response, ApiError> {
    let snapshot = state.manager.snapshot().map_err(swap_error)?;
    let epoch = Some(snapshot.epoch);
    let mut parts = Parts::read(multipart, &[data_part(format)]).await.map_err(|e| e.with_epoch(epoch))?;
    let data = parts.text(data_part(format)).map_err(|e| e.with_epoch(epoch))?;
    let bundle = Arc::clone(&snapshot.bundle);
    let bytes = blocking(move || predict_payload(&bundle, &data, format, operation.as_deref()))
        .await?
        .map_err(|e| request_error(e).with_epoch(epoch))?;
    Ok(binary_response(bytes, epoch))
}

async fn transform_install(state: AppState, multipart: Multipart, format: DataFormat, operation: Option<String>) -> Result<Response, ApiError> {
    let mut parts = Parts::read(multipart, &[data_part(format), "proto", "model"]).await?;
    let data = parts.text(data_part(format))?;
    let proto = parts.text("proto")?;
    let ppf = parts.text("model")?;
    let manager = Arc::clone(&state.manager);
    let (bytes, epoch) = blocking(move || manager.transform(&data, format, &proto, &ppf, operation.as_deref()))
        .await?
        .map_err(swap_error)?;
    Ok(binary_response(bytes, Some(epoch)))
}

async fn transform_default_csv(State(s): State<AppState>, Query(q): Query<OperationQuery>, m: Multipart) -> Result<Response, ApiError> {
    transform_default(s, m, DataFormat::Csv, q.operation).await
}

async fn transform_default_json(State(s): State<AppState>, Query(q): Query<OperationQuery>, m: Multipart) -> Result<Response, ApiError> {
    transform_default(s, m, DataFormat::Json, q.operation).await
}

async fn transform_install_csv(State(s): State<AppState>, Query(q): Query<OperationQuery>, m: Multipart) -> Result<Response, ApiError> {
    transform_install(s, m, DataFormat::Csv, q.operation).await
}

async fn transform_install_json(State(s): State<AppState>, Query(q): Query<OperationQuery>, m: Multipart) -> Result<Response, ApiError> {
    transform_install(s, m, DataFormat::Json, q.operation).await
}

async fn replace_model(State(state): State<AppState>, m: Multipart) -> Result<Response, ApiError> {
    let mut parts = Parts::read(m, &["model"]).await?;
    let model = parts.bytes("model")?;
    let manager = Arc::clone(&state.manager);
    let epoch = blocking(move || {
        if looks_like_archive(&model) {
            let bundle = load_bundle(&model)?;
            manager.swap_bundle(bundle)
        } else {
            let ppf = String::from_utf8(model)
                .map_err(|_| SwapError::Validation(BundleError::ArchiveMalformed("model is neither a ZIP archive nor UTF-8 text".into())))?;
            match manager.swap_predictor(&ppf) {
                Err(SwapError::NotInitialized) => Err(SwapError::Validation(BundleError::ArchiveMalformed(
                    "a bare predictor needs an installed schema; send a bundle archive".into(),
                ))),
                other => other,
            }
        }
    })
    .await?
    .map_err(swap_error)?;
    let model_name = state.manager.status().model_name;
    Ok(Json(json!({ "epoch": epoch, "model_name": model_name })).into_response())
}

async fn replace_proto(State(state): State<AppState>, m: Multipart) -> Result<Response, ApiError> {
    let mut parts = Parts::read(m, &["proto"]).await?;
    let proto = parts.text("proto")?;
    let manager = Arc::clone(&state.manager);
    let epoch = blocking(move || manager.swap_proto(&proto)).await?.map_err(swap_error)?;
    Ok(Json(json!({ "epoch": epoch })).into_response())
}

async fn replace_config(State(state): State<AppState>, m: Multipart) -> Result<Response, ApiError> {
    let mut parts = Parts::read(m, &["config"]).await?;
    let config = parts.text("config")?;
    let manager = Arc::clone(&state.manager);
    let epoch = blocking(move || manager.swap_config(&config)).await?.map_err(swap_error)?;
    Ok(Json(json!({ "epoch": epoch })).into_response())
}

async fn current_proto(State(state): State<AppState>) -> Result<Response, ApiError> {
    let text = state.manager.proto_text().map_err(swap_error)?;
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], text).into_response())
}

async fn status(State(state): State<AppState>) -> Response {
    let mut report = serde_json::to_value(state.manager.status()).expect("status serializes");
    report["pid"] = json!(std::process::id());
    Json(report).into_response()
}
