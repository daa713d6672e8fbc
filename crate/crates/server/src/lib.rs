//! HTTP service over one loaded dataset.
//!
//! JSON bodies are wrapped as `{"dataset_digest": ..., "data": ...}` and
//! every response, images included, carries an `X-Dataset-Digest` header.
//! Runs are queued and executed one at a time on a background thread.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, CorsLayer};

use cfx_core::artifact::{read_run, write_run};
use cfx_core::cohort::{apply_filters, histogram, value_counts, FilterClause};
use cfx_core::engine::{self, RunArtifact, RunOptions, RunRequest};
use cfx_core::gateway::Gateway;
use cfx_core::io::{Dataset, VariableKind};
use cfx_core::render::frame_png;
use cfx_core::SegmentSelection;

pub const DIGEST_HEADER: &str = "x-dataset-digest";
pub const PAGE_LIMIT: usize = 50;
/// Environment variable that supplies the dataset path when none is given.
pub const DATASET_ENV: &str = "CFX_DATASET";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Queued,
    Running,
    Complete,
    Failed,
}

struct RunEntry {
    status: RunStatus,
    error: Option<String>,
    created_at: String,
    artifact: Option<Arc<RunArtifact>>,
}

struct QueuedRun {
    id: String,
    request: RunRequest,
    created_at: String,
}

pub struct AppState {
    dataset: Dataset,
    gateway: Gateway,
    jobs: usize,
    runs_dir: Option<PathBuf>,
    runs: RwLock<BTreeMap<String, RunEntry>>,
    queue: Mutex<Option<mpsc::Sender<QueuedRun>>>,
}

impl AppState {
    /// Loads runs already present in `runs_dir` for this dataset and starts
    /// the run worker.
    pub fn new(dataset: Dataset, gateway: Gateway, jobs: usize, runs_dir: Option<PathBuf>) -> Arc<Self> {
        let mut runs = BTreeMap::new();
        if let Some(dir) = &runs_dir {
            for entry in std::fs::read_dir(dir).into_iter().flatten().flatten() {
                if let Ok(a) = read_run(&entry.path()) {
                    if a.dataset_digest == dataset.digest && a.model == gateway.model_id() {
                        runs.insert(
                            a.run_id.clone(),
                            RunEntry {
                                status: RunStatus::Complete,
                                error: None,
                                created_at: a.created_at.clone(),
                                artifact: Some(Arc::new(a)),
                            },
                        );
                    }
                }
            }
        }
        let state = Arc::new(Self {
            dataset,
            gateway,
            jobs,
            runs_dir,
            runs: RwLock::new(runs),
            queue: Mutex::new(None),
        });
        let (tx, rx) = mpsc::channel::<QueuedRun>();
        *state.queue.lock().unwrap() = Some(tx);
        let worker = Arc::downgrade(&state);
        std::thread::spawn(move || {
            while let Ok(job) = rx.recv() {
                let Some(state) = worker.upgrade() else { break };
                state.execute(job);
            }
        });
        state
    }

    pub fn digest(&self) -> &str {
        &self.dataset.digest
    }

    fn set_status(&self, id: &str, status: RunStatus, error: Option<String>, artifact: Option<Arc<RunArtifact>>) {
        let mut runs = self.runs.write().unwrap_or_else(|p| p.into_inner());
        if let Some(e) = runs.get_mut(id) {
            e.status = status;
            e.error = error;
            e.artifact = artifact;
        }
    }

    fn execute(&self, job: QueuedRun) {
        self.set_status(&job.id, RunStatus::Running, None, None);
        let options = RunOptions {
            jobs: self.jobs,
            store_volumes: false,
            created_at: Some(job.created_at),
        };
        let outcome = engine::run(&self.dataset, &self.gateway, &job.request, &options)
            .map_err(|e| e.to_string())
            .and_then(|a| match &self.runs_dir {
                Some(dir) => write_run(&a, &dir.join(&a.run_id)).map(|()| a).map_err(|e| e.to_string()),
                None => Ok(a),
            });
        match outcome {
            Ok(a) => self.set_status(&job.id, RunStatus::Complete, None, Some(Arc::new(a))),
            Err(e) => self.set_status(&job.id, RunStatus::Failed, Some(e), None),
        }
    }

    fn artifact(&self, id: &str) -> Result<Arc<RunArtifact>, ApiError> {
        let runs = self.runs.read().unwrap_or_else(|p| p.into_inner());
        let entry = runs.get(id).ok_or_else(|| ApiError::not_found(format!("run {id}")))?;
        entry
            .artifact
            .clone()
            .ok_or_else(|| ApiError::conflict(format!("run {id} is {:?}", entry.status).to_lowercase()))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    fields: Vec<FieldError>,
}

impl ApiError {
    fn not_found(what: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            code: "not_found",
            message: format!("{} not found", what.into()),
            fields: Vec::new(),
        }
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::CONFLICT,
            code: "conflict",
            message: message.into(),
            fields: Vec::new(),
        }
    }

    fn invalid(fields: Vec<FieldError>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "validation",
            message: fields
                .iter()
                .map(|f| format!("{}: {}", f.field, f.message))
                .collect::<Vec<_>>()
                .join("; "),
            fields,
        }
    }

    fn field(field: &str, message: impl Into<String>) -> Self {
        Self::invalid(vec![FieldError {
            field: field.into(),
            message: message.into(),
        }])
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: message.into(),
            fields: Vec::new(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "error": { "code": self.code, "message": self.message, "fields": self.fields }
        });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn envelope<T: Serialize>(state: &AppState, data: T) -> ApiResult {
    let body = json!({ "dataset_digest": state.digest(), "data": data });
    Ok(Json(body).into_response())
}

fn png(bytes: Vec<u8>) -> ApiResult {
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn schema(State(s): State<Arc<AppState>>) -> ApiResult {
    envelope(&s, s.dataset.schema())
}

async fn variables(State(s): State<Arc<AppState>>) -> ApiResult {
    envelope(&s, &s.dataset.manifest.variables)
}

async fn subjects(State(s): State<Arc<AppState>>) -> ApiResult {
    envelope(&s, &s.dataset.records)
}

#[derive(Deserialize)]
struct FrameQuery {
    #[serde(default)]
    overlay: u8,
}

async fn subject_frame(
    State(s): State<Arc<AppState>>,
    Path((id, f)): Path<(String, usize)>,
    Query(q): Query<FrameQuery>,
) -> ApiResult {
    let subject = s.dataset.subject(&id).ok_or_else(|| ApiError::not_found(format!("subject {id}")))?;
    let bytes = frame_png(subject.volume(), Some(subject.segmap()), f, q.overlay != 0)
        .ok_or_else(|| ApiError::not_found(format!("frame {f} of {id}")))?;
    png(bytes)
}

#[derive(Deserialize)]
struct HistogramQuery {
    variable: String,
    #[serde(default = "default_bins")]
    bins: usize,
}

fn default_bins() -> usize {
    20
}

async fn distribution(State(s): State<Arc<AppState>>, Query(q): Query<HistogramQuery>) -> ApiResult {
    let vars = &s.dataset.manifest.variables;
    let decl = vars
        .iter()
        .find(|v| v.name == q.variable)
        .ok_or_else(|| ApiError::field("variable", format!("unknown variable '{}'", q.variable)))?;
    match decl.kind {
        VariableKind::Numeric => {
            let h = histogram(&s.dataset.records, vars, &q.variable, q.bins)
                .map_err(|e| ApiError::field("bins", e.to_string()))?;
            envelope(&s, h)
        }
        VariableKind::Categorical => {
            let (counts, missing) = value_counts(&s.dataset.records, vars, &q.variable)
                .map_err(|e| ApiError::field("variable", e.to_string()))?;
            envelope(&s, json!({ "variable": q.variable, "counts": counts, "missing": missing }))
        }
    }
}

#[derive(Deserialize)]
struct FilterBody {
    #[serde(default)]
    clauses: Vec<FilterClause>,
}

async fn filters(State(s): State<Arc<AppState>>, body: Json<Value>) -> ApiResult {
    let body: FilterBody =
        serde_json::from_value(body.0).map_err(|e| ApiError::field("clauses", e.to_string()))?;
    let mut errors = Vec::new();
    for (i, c) in body.clauses.iter().enumerate() {
        if let Err(e) = c.check().and_then(|()| c.validate(&s.dataset.manifest.variables)) {
            errors.push(FieldError {
                field: format!("clauses[{i}]"),
                message: e.to_string(),
            });
        }
    }
    if !errors.is_empty() {
        return Err(ApiError::invalid(errors));
    }
    let state = apply_filters(&s.dataset.records, &s.dataset.manifest.variables, &body.clauses)
        .map_err(|e| ApiError::field("clauses", e.to_string()))?;
    envelope(&s, state)
}

/// A selection as a bitmask or a list of segment names.
#[derive(Deserialize)]
#[serde(untagged)]
enum SelectionInput {
    Mask(u64),
    Names(Vec<String>),
}

#[derive(Deserialize)]
struct RunBody {
    targets: Vec<String>,
    sources: Vec<String>,
    /// Explicit selections.
    #[serde(default)]
    selections: Option<Vec<SelectionInput>>,
    /// `"all"` or a list of names; expands to every nonempty subset.
    #[serde(default)]
    segments: Option<Value>,
}

fn parse_selections(s: &AppState, body: &RunBody) -> Result<Vec<SegmentSelection>, FieldError> {
    let schema = s.dataset.schema();
    let err = |field: &str, message: String| FieldError {
        field: field.into(),
        message,
    };
    match (&body.selections, &body.segments) {
        (Some(_), Some(_)) => Err(err("segments", "give either selections or segments, not both".into())),
        (None, None) => Err(err("selections", "required".into())),
        (Some(list), None) => {
            if list.is_empty() {
                return Err(err("selections", "must be nonempty".into()));
            }
            list.iter()
                .enumerate()
                .map(|(i, x)| {
                    match x {
                        SelectionInput::Mask(m) => SegmentSelection::from_mask(*m, schema),
                        SelectionInput::Names(n) => SegmentSelection::from_names(n, schema),
                    }
                    .map_err(|e| err(&format!("selections[{i}]"), e.to_string()))
                })
                .collect()
        }
        (None, Some(v)) => {
            let text = match v {
                Value::String(t) => t.clone(),
                Value::Array(items) => items
                    .iter()
                    .map(|x| x.as_str().map(str::to_string))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| err("segments", "expected segment names".into()))?
                    .join(","),
                _ => return Err(err("segments", "expected \"all\" or a list of names".into())),
            };
            SegmentSelection::parse_list(&text, schema)
                .map(|sel| sel.subsets())
                .map_err(|e| err("segments", e.to_string()))
        }
    }
}

fn validate_run(s: &AppState, body: &RunBody) -> Result<RunRequest, ApiError> {
    let mut errors = Vec::new();
    let mut push = |field: &str, message: String| {
        errors.push(FieldError {
            field: field.into(),
            message,
        })
    };
    for (field, ids) in [("targets", &body.targets), ("sources", &body.sources)] {
        if ids.is_empty() {
            push(field, "must be nonempty".into());
        }
        let unknown: Vec<&str> = ids
            .iter()
            .filter(|id| s.dataset.subject(id).is_none())
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            push(field, format!("unknown ids: {}", unknown.join(", ")));
        }
    }
    let overlap: Vec<&str> = body
        .sources
        .iter()
        .filter(|id| body.targets.contains(id))
        .map(String::as_str)
        .collect();
    if !overlap.is_empty() {
        push("sources", format!("overlaps targets: {}", overlap.join(", ")));
    }
    let selections = match parse_selections(s, body) {
        Ok(sel) => sel,
        Err(e) => {
            errors.push(e);
            Vec::new()
        }
    };
    if !errors.is_empty() {
        return Err(ApiError::invalid(errors));
    }
    Ok(RunRequest {
        targets: body.targets.clone(),
        sources: body.sources.clone(),
        selections,
    })
}

async fn create_run(State(s): State<Arc<AppState>>, body: Json<Value>) -> ApiResult {
    let body: RunBody = serde_json::from_value(body.0).map_err(|e| ApiError::field("body", e.to_string()))?;
    let request = validate_run(&s, &body)?;
    let (targets, sources, selections) =
        engine::validate_request(&s.dataset, &request).map_err(|e| ApiError::field("sources", e.to_string()))?;
    let created_at = engine::wall_clock();
    let id = engine::run_id(&s.dataset.digest, s.gateway.model_id(), &targets, &sources, &selections, &created_at);
    {
        let mut runs = s.runs.write().unwrap_or_else(|p| p.into_inner());
        if runs.contains_key(&id) {
            return Err(ApiError::conflict(format!("run {id} already exists")));
        }
        runs.insert(
            id.clone(),
            RunEntry {
                status: RunStatus::Queued,
                error: None,
                created_at: created_at.clone(),
                artifact: None,
            },
        );
    }
    let queue = s.queue.lock().unwrap_or_else(|p| p.into_inner());
    queue
        .as_ref()
        .and_then(|tx| {
            tx.send(QueuedRun {
                id: id.clone(),
                request,
                created_at,
            })
            .ok()
        })
        .ok_or_else(|| ApiError::internal("run worker stopped"))?;
    let mut resp = envelope(&s, json!({ "run_id": id, "status": RunStatus::Queued }))?;
    *resp.status_mut() = StatusCode::ACCEPTED;
    Ok(resp)
}

fn run_status_json(id: &str, e: &RunEntry) -> Value {
    let (results, counterfactuals, skipped) = match &e.artifact {
        Some(a) => (
            Some(a.results.len()),
            Some(a.results.iter().filter(|r| r.is_counterfactual).count()),
            Some(a.skipped()),
        ),
        None => (None, None, None),
    };
    json!({
        "run_id": id,
        "status": e.status,
        "created_at": e.created_at,
        "error": e.error,
        "results": results,
        "counterfactuals": counterfactuals,
        "skipped": skipped,
    })
}

async fn list_runs(State(s): State<Arc<AppState>>) -> ApiResult {
    let runs = s.runs.read().unwrap_or_else(|p| p.into_inner());
    let list: Vec<Value> = runs.iter().map(|(id, e)| run_status_json(id, e)).collect();
    drop(runs);
    envelope(&s, list)
}

async fn get_run(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let status = {
        let runs = s.runs.read().unwrap_or_else(|p| p.into_inner());
        let e = runs.get(&id).ok_or_else(|| ApiError::not_found(format!("run {id}")))?;
        run_status_json(&id, e)
    };
    envelope(&s, status)
}

async fn run_summary(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let a = s.artifact(&id)?;
    envelope(&s, engine::summarize(&a))
}

#[derive(Deserialize)]
struct PageQuery {
    #[serde(default)]
    offset: usize,
    #[serde(default = "default_limit")]
    limit: usize,
}

fn default_limit() -> usize {
    PAGE_LIMIT
}

async fn run_results(State(s): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<PageQuery>) -> ApiResult {
    let a = s.artifact(&id)?;
    let limit = q.limit.min(PAGE_LIMIT);
    let start = q.offset.min(a.results.len());
    let end = (start + limit).min(a.results.len());
    envelope(
        &s,
        json!({
            "offset": start,
            "limit": limit,
            "total": a.results.len(),
            "items": &a.results[start..end],
        }),
    )
}

async fn recombined_frame(
    State(s): State<Arc<AppState>>,
    Path((id, index, f)): Path<(String, usize, usize)>,
    Query(q): Query<FrameQuery>,
) -> ApiResult {
    let a = s.artifact(&id)?;
    let spec = a
        .results
        .get(index)
        .map(|r| r.spec.clone())
        .ok_or_else(|| ApiError::not_found(format!("result {index} of run {id}")))?;
    let state = s.clone();
    let bytes = tokio::task::spawn_blocking(move || {
        let image = engine::recompute(&state.dataset, &spec).map_err(|e| ApiError::internal(e.to_string()))?;
        frame_png(&image.volume, Some(&image.expected_segmap), f, q.overlay != 0)
            .ok_or_else(|| ApiError::not_found(format!("frame {f}")))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    png(bytes)
}

async fn health(State(s): State<Arc<AppState>>) -> ApiResult {
    envelope(&s, json!({ "model": s.gateway.model_id(), "subjects": s.dataset.records.len() }))
}

/// Routes with CORS for `origin` (any origin when `None`).
pub fn router(state: Arc<AppState>, origin: Option<&str>) -> Router {
    let cors = match origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(o) => CorsLayer::new().allow_origin(AllowOrigin::exact(o)),
        None => CorsLayer::new().allow_origin(AllowOrigin::any()),
    }
    .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
    .allow_headers([header::CONTENT_TYPE])
    .expose_headers([HeaderName::from_static(DIGEST_HEADER)]);
    let digest = HeaderValue::from_str(state.digest()).expect("hex digest");
    Router::new()
        .route("/api/health", get(health))
        .route("/api/schema", get(schema))
        .route("/api/variables", get(variables))
        .route("/api/distribution", get(distribution))
        .route("/api/subjects", get(subjects))
        .route("/api/subjects/{id}/frames/{f}", get(subject_frame))
        .route("/api/filters", post(filters))
        .route("/api/runs", post(create_run).get(list_runs))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/runs/{id}/summary", get(run_summary))
        .route("/api/runs/{id}/results", get(run_results))
        .route("/api/runs/{id}/recombined/{index}/frames/{f}", get(recombined_frame))
        .with_state(state)
        .layer(axum::middleware::map_response(move |mut r: Response| {
            let digest = digest.clone();
            async move {
                r.headers_mut().insert(DIGEST_HEADER, digest);
                r
            }
        }))
        .layer(cors)
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub dataset: PathBuf,
    pub port: u16,
    pub model: String,
    pub jobs: usize,
    pub runs_dir: Option<PathBuf>,
    pub cors_origin: Option<String>,
}

/// Loads the dataset and serves until the process is stopped.
pub fn serve(config: ServerConfig) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let dataset = Dataset::load(&config.dataset)?;
    let spec = config.model.parse()?;
    let gateway = Gateway::from_spec(&spec, dataset.manifest.synthetic.as_ref())?;
    if let Some(dir) = &config.runs_dir {
        std::fs::create_dir_all(dir)?;
    }
    let state = AppState::new(dataset, gateway, config.jobs, config.runs_dir.clone());
    let app = router(state, config.cors_origin.as_deref());
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let addr = SocketAddr::from(([127, 0, 0, 1], config.port));
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app).await?;
        Ok(())
    })
}
