use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dragedit_core::guidance::WeightOverrides;
use dragedit_core::tasks::EditRequest;
use dragedit_core::Error;
use futures_util::stream::{self, Stream};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::jobs::JobEvent;
use crate::state::{AppState, API_VERSION};

pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    field: Option<String>,
    message: String,
}

impl ApiError {
    fn not_found(what: &str, id: &str) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            code: "not_found",
            field: None,
            message: format!("unknown {what} `{id}`"),
        }
    }

    fn conflict(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::CONFLICT,
            code: "conflict",
            field: None,
            message: message.into(),
        }
    }

    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            code: "invalid",
            field: Some(field.into()),
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::Contract { field, message } => return ApiError::invalid(field.clone(), message.clone()),
            Error::Unavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "unavailable"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError {
            status,
            code,
            field: None,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut error = json!({"code": self.code, "message": self.message});
        if let Some(f) = self.field {
            error["field"] = f.into();
        }
        (self.status, Json(json!({"v": API_VERSION, "error": error}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Parses a versioned JSON body, naming the offending path on failure.
fn parse<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    let value: Value = serde_json::from_slice(body).map_err(|e| ApiError::invalid("body", e.to_string()))?;
    match value.get("v").and_then(Value::as_u64) {
        Some(v) if v == API_VERSION as u64 => {}
        Some(v) => return Err(ApiError::invalid("v", format!("unsupported version {v}"))),
        None => return Err(ApiError::invalid("v", "missing version field")),
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "body".to_string() } else { path };
        ApiError::invalid(field, e.into_inner().to_string())
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> dragedit_core::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::from(Error::Format(format!("task failed: {e}"))))?
        .map_err(ApiError::from)
}

async fn health(State(st): State<Arc<AppState>>) -> Json<Value> {
    let p = st.backend.profile();
    Json(json!({
        "v": API_VERSION,
        "backend": p.name,
        "profile_hash": p.hash(),
        "image_size": [p.image_size().0, p.image_size().1],
    }))
}

async fn post_image(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let (id, image) = {
        let st = Arc::clone(&st);
        blocking(move || st.put_image(&body)).await?
    };
    Ok((
        StatusCode::CREATED,
        Json(json!({"v": API_VERSION, "id": id, "width": image.width, "height": image.height})),
    )
        .into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BankRequest {
    #[allow(dead_code)]
    v: u32,
    image: String,
    #[serde(default)]
    reference: Option<String>,
    #[serde(default)]
    prompt: String,
    #[serde(default)]
    steps: Option<usize>,
}

async fn post_bank(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: BankRequest = parse(&body)?;
    let (info, existing) = blocking(move || {
        st.create_bank(&req.image, req.reference.as_deref(), &req.prompt, req.steps)
    })
    .await?;
    let status = if existing { StatusCode::OK } else { StatusCode::CREATED };
    Ok((status, Json(info)).into_response())
}

async fn get_bank(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let info = st.bank_info(&id).ok_or_else(|| ApiError::not_found("bank", &id))?;
    Ok(Json(info).into_response())
}

/// Builds the full edit specification from raw inputs without running it.
async fn validate(body: Bytes) -> ApiResult<Response> {
    let req: EditRequest = parse(&body)?;
    let spec = req.build()?;
    Ok(Json(json!({"v": API_VERSION, "kind": spec.kind, "spec": spec})).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EditSubmission {
    #[allow(dead_code)]
    v: u32,
    bank: String,
    edit: EditRequest,
    #[serde(default)]
    config: WeightOverrides,
}

async fn post_edit(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let sub: EditSubmission = parse(&body)?;
    if sub.edit.v != API_VERSION {
        return Err(ApiError::invalid("edit.v", format!("unsupported version {}", sub.edit.v)));
    }
    if st.bank_info(&sub.bank).is_none() {
        return Err(ApiError::not_found("bank", &sub.bank));
    }
    let submitted = blocking(move || st.submit(&sub.bank, sub.edit, &sub.config)).await?;
    let status = if submitted.existing {
        StatusCode::OK
    } else {
        StatusCode::ACCEPTED
    };
    Ok((status, Json(submitted.job)).into_response())
}

async fn get_edit(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let entry = st.job(&id).ok_or_else(|| ApiError::not_found("edit", &id))?;
    Ok(Json(entry.snapshot()).into_response())
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn get_result(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let entry = st.job(&id).ok_or_else(|| ApiError::not_found("edit", &id))?;
    let phase = entry.snapshot().phase;
    if phase != crate::jobs::Phase::Done {
        return Err(ApiError::conflict(format!("edit is {phase:?}, no result")));
    }
    let bytes = tokio::fs::read(st.store.result_path(&id))
        .await
        .map_err(|e| ApiError::from(Error::from(e)))?;
    Ok(png(bytes))
}

async fn get_steps(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    st.job(&id).ok_or_else(|| ApiError::not_found("edit", &id))?;
    let text = tokio::fs::read_to_string(st.store.job_dir(&id).join("steps.jsonl"))
        .await
        .map_err(|_| ApiError::conflict("step log not written yet"))?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}

async fn get_preview(State(st): State<Arc<AppState>>, Path((id, t)): Path<(String, usize)>) -> ApiResult<Response> {
    st.job(&id).ok_or_else(|| ApiError::not_found("edit", &id))?;
    let bytes = tokio::fs::read(st.store.preview_path(&id, t))
        .await
        .map_err(|_| ApiError::not_found("preview", &t.to_string()))?;
    Ok(png(bytes))
}

async fn cancel(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    match st.cancel(&id) {
        None => Err(ApiError::not_found("edit", &id)),
        Some(None) => Err(ApiError::conflict("edit already finished")),
        Some(Some(job)) => Ok((
            StatusCode::ACCEPTED,
            Json(json!({"v": API_VERSION, "id": job.id, "phase": job.phase})),
        )
            .into_response()),
    }
}

/// Replays the job's events from the start, then follows live ones until the
/// terminal event.
async fn events(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let entry = st.job(&id).ok_or_else(|| ApiError::not_found("edit", &id))?;
    let rx = entry.tick.subscribe();
    let stream = stream::unfold((entry, rx, 0usize, false), |(entry, mut rx, cursor, finished)| async move {
        if finished {
            return None;
        }
        loop {
            let next = entry.events.lock().unwrap().get(cursor).cloned();
            if let Some(ev) = next {
                let terminal = ev.is_terminal();
                return Some((Ok(to_sse(&ev)), (entry, rx, cursor + 1, terminal)));
            }
            if rx.changed().await.is_err() {
                return None;
            }
        }
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

fn to_sse(ev: &JobEvent) -> Event {
    let data = serde_json::to_string(ev).expect("event serializes");
    Event::default().event(ev.name()).data(data)
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_body_bytes;
    Router::new()
        .route("/healthz", get(health))
        .route("/images", post(post_image))
        .route("/banks", post(post_bank))
        .route("/banks/{id}", get(get_bank))
        .route("/validate", post(validate))
        .route("/edits", post(post_edit))
        .route("/edits/{id}", get(get_edit))
        .route("/edits/{id}/result", get(get_result))
        .route("/edits/{id}/steps", get(get_steps))
        .route("/edits/{id}/previews/{t}", get(get_preview))
        .route("/edits/{id}/events", get(events))
        .route("/edits/{id}/cancel", post(cancel))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}
