//! HTTP binding. Handlers authenticate, decode and delegate to [`App`].

use std::collections::{BTreeMap, BTreeSet};
use std::convert::Infallible;
use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode, header};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use elab_core::packaging::SliceSelector;
use serde::Deserialize;
use serde::de::DeserializeOwned;
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::app::{ApiError, App, StartError};
use crate::config::{Caller, ClockMode, ServiceConfig};

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let mut body = json!({ "error": self.code(), "message": self.to_string() });
        if let ApiError::Invalid { details: Some(d), .. } = &self {
            body["details"] = d.clone();
        }
        (status, Json(body)).into_response()
    }
}

type Shared = State<Arc<App>>;

fn caller(app: &App, headers: &HeaderMap) -> Result<Caller, ApiError> {
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim);
    app.authenticate(token)
}

fn body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::BadRequest(format!("bad JSON body: {e}")))
}

/// Runs a possibly long command off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn health(State(app): Shared) -> impl IntoResponse {
    Json(app.health())
}

async fn upload_package(State(app): Shared, headers: HeaderMap, zip: Bytes) -> Result<Response, ApiError> {
    let c = caller(&app, &headers)?;
    let receipt = blocking(move || app.upload_package(&c, &zip)).await?;
    Ok((StatusCode::CREATED, Json(receipt)).into_response())
}

#[derive(Deserialize)]
struct CompatQuery {
    device_class: Option<String>,
    /// Comma-separated play ids.
    play: Option<String>,
    /// Comma-separated activity ids.
    activity: Option<String>,
}

fn ids(s: &str) -> BTreeSet<String> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(str::to_string).collect()
}

async fn compat(
    State(app): Shared,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<CompatQuery>,
) -> Result<Response, ApiError> {
    let c = caller(&app, &headers)?;
    let selector = match (&q.play, &q.activity) {
        (Some(_), Some(_)) => return Err(ApiError::BadRequest("give play or activity, not both".into())),
        (Some(p), None) => Some(SliceSelector::Plays(ids(p))),
        (None, Some(a)) => Some(SliceSelector::Activities(ids(a))),
        (None, None) => None,
    };
    let answer = app.compat(&c, &id, q.device_class.as_deref(), selector.as_ref())?;
    Ok(Json(answer).into_response())
}

#[derive(Deserialize)]
struct CreateRun {
    package_id: String,
    assignments: BTreeMap<String, BTreeSet<String>>,
}

async fn create_run(State(app): Shared, headers: HeaderMap, raw: Bytes) -> Result<Response, ApiError> {
    let c = caller(&app, &headers)?;
    let req: CreateRun = body(&raw)?;
    let info = app.create_run(&c, &req.package_id, req.assignments)?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

#[derive(Deserialize)]
struct UserQuery {
    user: Option<String>,
}

async fn activities(
    State(app): Shared,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<UserQuery>,
) -> Result<Response, ApiError> {
    let c = caller(&app, &headers)?;
    let user = q.user.unwrap_or_else(|| c.user.clone());
    Ok(Json(app.activities(&c, &id, &user)?).into_response())
}

#[derive(Deserialize)]
struct Complete {
    user: Option<String>,
    activity_id: String,
}

async fn complete(State(app): Shared, headers: HeaderMap, Path(id): Path<String>, raw: Bytes) -> Result<Response, ApiError> {
    let c = caller(&app, &headers)?;
    let req: Complete = body(&raw)?;
    let user = req.user.unwrap_or_else(|| c.user.clone());
    Ok(Json(app.complete(&c, &id, &user, &req.activity_id)?).into_response())
}

#[derive(Deserialize)]
struct Notify {
    target_role: String,
    activity_id: String,
}

async fn notify(State(app): Shared, headers: HeaderMap, Path(id): Path<String>, raw: Bytes) -> Result<Response, ApiError> {
    let c = caller(&app, &headers)?;
    let req: Notify = body(&raw)?;
    Ok(Json(app.notify(&c, &id, &req.target_role, &req.activity_id)?).into_response())
}

async fn status(State(app): Shared, headers: HeaderMap, Path(id): Path<String>) -> Result<Response, ApiError> {
    let c = caller(&app, &headers)?;
    Ok(Json(app.status(&c, &id)?).into_response())
}

#[derive(Deserialize)]
struct RequestSession {
    run_id: String,
    user: Option<String>,
    device_class: String,
}

async fn request_session(State(app): Shared, headers: HeaderMap, raw: Bytes) -> Result<Response, ApiError> {
    let c = caller(&app, &headers)?;
    let req: RequestSession = body(&raw)?;
    let user = req.user.unwrap_or_else(|| c.user.clone());
    let info = app.request_session(&c, &req.run_id, &user, &req.device_class)?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

async fn get_session(State(app): Shared, headers: HeaderMap, Path(id): Path<String>) -> Result<Response, ApiError> {
    let c = caller(&app, &headers)?;
    Ok(Json(app.session(&c, &id)?).into_response())
}

async fn release_session(State(app): Shared, headers: HeaderMap, Path(id): Path<String>) -> Result<Response, ApiError> {
    let c = caller(&app, &headers)?;
    Ok(Json(app.release_session(&c, &id)?).into_response())
}

async fn da(State(app): Shared, headers: HeaderMap, raw: Bytes) -> Result<Response, ApiError> {
    let c = caller(&app, &headers)?;
    let xml = app.da(&c, &raw)?;
    Ok(([(header::CONTENT_TYPE, "application/xml")], xml).into_response())
}

#[derive(Deserialize)]
struct EventsQuery {
    since: Option<u64>,
    /// Keep the connection open for new events (default true).
    follow: Option<bool>,
}

async fn events(State(app): Shared, headers: HeaderMap, Query(q): Query<EventsQuery>) -> Result<Response, ApiError> {
    let c = caller(&app, &headers)?;
    let follow = q.follow.unwrap_or(true);
    // Subscribe before the first read so no append is missed in between.
    let rx = app.subscribe_seq();
    let start = (app, c, q.since.unwrap_or(0), rx);
    let stream = futures::stream::unfold(start, move |(app, c, mut cursor, mut rx)| async move {
        loop {
            if app.is_closing() {
                return None;
            }
            let (batch, last) = app.events_after(&c, cursor);
            cursor = last;
            if !batch.is_empty() {
                let mut out = String::new();
                for e in &batch {
                    out.push_str(&serde_json::to_string(e).expect("events serialize"));
                    out.push('\n');
                }
                return Some((Ok::<_, Infallible>(Bytes::from(out)), (app, c, cursor, rx)));
            }
            if !follow || rx.changed().await.is_err() {
                return None;
            }
        }
    });
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from_stream(stream)).into_response())
}

#[derive(Deserialize)]
struct Advance {
    advance: f64,
}

async fn advance_clock(State(app): Shared, headers: HeaderMap, raw: Bytes) -> Result<Response, ApiError> {
    let c = caller(&app, &headers)?;
    let req: Advance = body(&raw)?;
    let (time, events) = blocking(move || app.advance_clock(&c, req.advance)).await?;
    Ok(Json(json!({ "time": time, "events": events })).into_response())
}

pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/packages", post(upload_package))
        .route("/packages/{id}/compat", get(compat))
        .route("/runs", post(create_run))
        .route("/runs/{id}/activities", get(activities))
        .route("/runs/{id}/complete", post(complete))
        .route("/runs/{id}/notify", post(notify))
        .route("/runs/{id}/status", get(status))
        .route("/sessions", post(request_session))
        .route("/sessions/{id}", get(get_session).delete(release_session))
        .route("/da", post(da))
        .route("/events", get(events))
        .route("/admin/clock", post(advance_clock))
        .with_state(app)
}

/// A service started in the background, e.g. by tests.
#[derive(Debug)]
pub struct Running {
    pub addr: SocketAddr,
    pub app: Arc<App>,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl Running {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting requests and waits for the server task.
    pub async fn shutdown(mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.task).await;
    }
}

fn spawn_ticker(app: Arc<App>) -> Option<JoinHandle<()>> {
    if app.config().clock != ClockMode::System {
        return None;
    }
    let period = Duration::from_secs_f64(1.0 / app.config().clock_speed);
    Some(tokio::spawn(async move {
        let mut interval = tokio::time::interval(period);
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            interval.tick().await;
            let a = app.clone();
            if tokio::task::spawn_blocking(move || a.tick()).await.is_err() {
                break;
            }
        }
    }))
}

async fn bind(config: &ServiceConfig) -> Result<TcpListener, StartError> {
    TcpListener::bind(&config.listen).await.map_err(|e| StartError::Bind {
        address: config.listen.clone(),
        message: e.to_string(),
    })
}

/// Binds, replays and serves until `shutdown` resolves.
pub async fn serve(config: ServiceConfig, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), StartError> {
    let listener = bind(&config).await?;
    let app = App::open(config)?;
    let addr = listener.local_addr().map_err(|e| StartError::Io(e.to_string()))?;
    eprintln!("elab: listening on http://{addr}");
    let ticker = spawn_ticker(app.clone());
    let closer = app.clone();
    let r = axum::serve(listener, router(app))
        .with_graceful_shutdown(async move {
            shutdown.await;
            closer.close_streams();
        })
        .await
        .map_err(|e| StartError::Io(e.to_string()));
    if let Some(t) = ticker {
        t.abort();
    }
    r
}

/// Starts a service on the configured address (port 0 picks a free one).
pub async fn spawn(config: ServiceConfig) -> Result<Running, StartError> {
    let listener = bind(&config).await?;
    let app = App::open(config)?;
    let addr = listener.local_addr().map_err(|e| StartError::Io(e.to_string()))?;
    let (tx, rx) = oneshot::channel::<()>();
    let ticker = spawn_ticker(app.clone());
    let router = router(app.clone());
    let closer = app.clone();
    let task = tokio::spawn(async move {
        let _ = axum::serve(listener, router)
            .with_graceful_shutdown(async move {
                let _ = rx.await;
                closer.close_streams();
            })
            .await;
        if let Some(t) = ticker {
            t.abort();
        }
    });
    Ok(Running {
        addr,
        app,
        stop: Some(tx),
        task,
    })
}
