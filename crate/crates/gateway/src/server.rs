//! HTTP JSON service over one immutable gallery snapshot.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::{Query, State};
use axum::routing::{any, get, post};
use axum::{Json, Router};
use qcqc_core::completer::{
    CompletionCandidate, CompletionError, CompletionSource, Completer, ExternalCompleter,
    HttpEmbedder, MockEmbedder, QualityCondition, TextEmbedder,
};
use qcqc_core::evalharness::{
    build_completer, gallery_histograms, rerank_baseline, run_grid, default_prefixes,
    EvalConfig, EvalReport, GalleryHistograms, Method,
};
use qcqc_core::gallery::{self, Gallery, SchemePair};
use qcqc_core::search::retrieve;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::services::ServeDir;

use crate::config::Config;
use crate::error::{ApiError, ApiJson};

pub const DEFAULT_COMPLETE_K: usize = 5;
pub const DEFAULT_PIPELINE_K: usize = 1;
pub const DEFAULT_ETA: usize = 10;
pub const DEFAULT_BINS: usize = 20;
pub const MAX_BINS: usize = 1000;

/// Everything a request reads. Never mutated once built.
pub struct Snapshot {
    pub gallery: Gallery,
    pub embedder: Box<dyn TextEmbedder>,
    /// Shared so its in-flight limit spans all requests.
    pub external: Option<ExternalCompleter>,
    /// Directory the gallery was loaded from, used by reload.
    pub source: Option<PathBuf>,
}

pub fn make_embedder(config: &Config, dim: usize) -> Box<dyn TextEmbedder> {
    match &config.embed_url {
        Some(url) => Box::new(HttpEmbedder::new(url.clone(), dim, config.endpoint_timeout_secs)),
        None => Box::new(MockEmbedder::new(dim, config.embed_seed)),
    }
}

struct SharedExternal<'a>(&'a ExternalCompleter);

impl Completer for SharedExternal<'_> {
    fn source(&self) -> CompletionSource {
        CompletionSource::External
    }

    fn complete(
        &self,
        prefix: &str,
        condition: &QualityCondition,
        k: usize,
    ) -> Result<Vec<CompletionCandidate>, CompletionError> {
        self.0.complete(prefix, condition, k)
    }
}

impl Snapshot {
    pub fn new(gallery: Gallery, config: &Config, source: Option<PathBuf>) -> Snapshot {
        let embedder = make_embedder(config, gallery.dim());
        Snapshot {
            gallery,
            embedder,
            external: config.endpoint().map(ExternalCompleter::new),
            source,
        }
    }

    pub fn completer(&self, method: Method, seed: u64) -> Result<Box<dyn Completer + '_>, ApiError> {
        match method {
            Method::External => match &self.external {
                Some(ext) => Ok(Box::new(SharedExternal(ext))),
                None => Err(ApiError::invalid("no completion endpoint is configured")),
            },
            Method::Rerank => Err(ApiError::invalid("rerank is not a completion method")),
            other => Ok(build_completer(other, &self.gallery, seed, None)?),
        }
    }

    pub fn complete(&self, req: &CompleteRequest) -> Result<Vec<CompletionCandidate>, ApiError> {
        if req.k == 0 {
            return Err(ApiError::invalid("k must be at least 1"));
        }
        let completer = self.completer(req.method, req.seed)?;
        let condition = QualityCondition::new(req.rel.clone(), req.aes.clone());
        Ok(completer.complete(&req.prefix, &condition, req.k)?)
    }

    /// Top-η hits for each text, annotated with captions, scores and levels.
    pub fn hits(&self, texts: &[String], eta: usize) -> Result<Vec<Vec<ApiHit>>, ApiError> {
        if eta == 0 {
            return Err(ApiError::invalid("eta must be at least 1"));
        }
        let result = retrieve(texts, self.embedder.as_ref(), &self.gallery, eta)?;
        let level_name = |scheme: Option<&qcqc_core::LevelScheme>, level: Option<usize>| {
            scheme.zip(level).map(|(s, l)| s.name(l).to_string())
        };
        Ok(result
            .queries
            .into_iter()
            .map(|q| {
                q.hits
                    .into_iter()
                    .map(|hit| {
                        let record = self.gallery.record(hit.index);
                        ApiHit {
                            id: hit.id,
                            score: hit.score,
                            caption: record.caption.clone(),
                            aes: record.aes_score,
                            rel: record.rel_score,
                            rel_level: level_name(self.gallery.rel_scheme(), record.rel_level),
                            aes_level: level_name(self.gallery.aes_scheme(), record.aes_level),
                        }
                    })
                    .collect()
            })
            .collect())
    }

    pub fn pipeline(&self, req: &PipelineRequest) -> Result<PipelineResponse, ApiError> {
        let candidates = self.complete(&CompleteRequest {
            prefix: req.prefix.clone(),
            rel: req.rel.clone(),
            aes: req.aes.clone(),
            method: req.method,
            k: req.k,
            seed: req.seed,
        })?;
        let texts: Vec<String> = candidates.iter().map(|c| c.text.clone()).collect();
        let hits_per_candidate = self.hits(&texts, req.eta)?;
        Ok(PipelineResponse {
            candidates,
            hits_per_candidate,
        })
    }

    pub fn eval(&self, grid: GridConfig) -> Result<EvalReport, ApiError> {
        let method = grid.method.unwrap_or(Method::Corpus);
        let prefixes = grid.prefixes.unwrap_or_else(default_prefixes);
        let k = grid.k.unwrap_or(1);
        if method == Method::Rerank {
            return Ok(rerank_baseline(
                &self.gallery,
                &prefixes,
                self.embedder.as_ref(),
                k,
            )?);
        }
        let conditions = match grid.conditions {
            Some(c) => c,
            None => {
                let (rel, aes) = self
                    .gallery
                    .schemes()
                    .ok_or_else(|| ApiError::from(CompletionError::LevelsNotAssigned))?;
                QualityCondition::grid(rel.names(), aes.names())
            }
        };
        let config = EvalConfig {
            prefixes,
            conditions,
            eta: grid.eta.unwrap_or(1),
            method,
            seed: grid.seed.unwrap_or(0),
            k,
        };
        if config.k == 0 {
            return Err(ApiError::invalid("k must be at least 1"));
        }
        config.validate()?;
        for condition in &config.conditions {
            condition.resolve(&self.gallery)?;
        }
        let completer = self.completer(method, config.seed)?;
        Ok(run_grid(&config, &self.gallery, completer.as_ref(), self.embedder.as_ref())?)
    }
}

pub struct AppState {
    snapshot: RwLock<Arc<Snapshot>>,
    config: Config,
    eval_permits: Arc<Semaphore>,
}

impl AppState {
    pub fn new(snapshot: Snapshot, config: Config) -> Arc<AppState> {
        let workers = config.eval_workers.max(1);
        Arc::new(AppState {
            snapshot: RwLock::new(Arc::new(snapshot)),
            config,
            eval_permits: Arc::new(Semaphore::new(workers)),
        })
    }

    /// The current snapshot; a request holds this one handle throughout.
    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }

    pub fn swap(&self, next: Snapshot) {
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(next);
    }

    pub fn config(&self) -> &Config {
        &self.config
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiHit {
    pub id: String,
    pub score: f64,
    pub caption: String,
    pub aes: Option<f64>,
    pub rel: Option<f64>,
    pub rel_level: Option<String>,
    pub aes_level: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub gallery_n: usize,
    pub dim: usize,
    /// Levels per axis; `None` before levels are assigned.
    pub levels: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemeResponse {
    pub rel: Option<qcqc_core::LevelScheme>,
    pub aes: Option<qcqc_core::LevelScheme>,
}

fn default_method() -> Method {
    Method::Corpus
}

fn default_complete_k() -> usize {
    DEFAULT_COMPLETE_K
}

fn default_pipeline_k() -> usize {
    DEFAULT_PIPELINE_K
}

fn default_eta() -> usize {
    DEFAULT_ETA
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompleteRequest {
    pub prefix: String,
    pub rel: String,
    pub aes: String,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_complete_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompleteResponse {
    pub candidates: Vec<CompletionCandidate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrieveRequest {
    pub query_text: String,
    #[serde(default = "default_eta")]
    pub eta: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub hits: Vec<ApiHit>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineRequest {
    pub prefix: String,
    pub rel: String,
    pub aes: String,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_eta")]
    pub eta: usize,
    #[serde(default = "default_pipeline_k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineResponse {
    pub candidates: Vec<CompletionCandidate>,
    pub hits_per_candidate: Vec<Vec<ApiHit>>,
}

/// Grid settings; anything omitted falls back to the evaluation defaults and
/// the gallery's own level names.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub prefixes: Option<Vec<String>>,
    pub conditions: Option<Vec<QualityCondition>>,
    pub eta: Option<usize>,
    pub method: Option<Method>,
    pub seed: Option<u64>,
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GridRequest {
    #[serde(default)]
    pub config: GridConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsQuery {
    pub bins: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsResponse {
    pub gallery_n: usize,
    pub bins: usize,
    #[serde(flatten)]
    pub histograms: GalleryHistograms,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReloadRequest {
    pub gallery: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReloadResponse {
    pub status: String,
    pub gallery_n: usize,
    pub gallery_hash: String,
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    let snap = state.snapshot();
    Json(Health {
        status: "ok".to_string(),
        gallery_n: snap.gallery.len(),
        dim: snap.gallery.dim(),
        levels: snap.gallery.rel_scheme().map(|s| s.len()),
    })
}

async fn scheme(State(state): State<Arc<AppState>>) -> Json<SchemeResponse> {
    let snap = state.snapshot();
    Json(SchemeResponse {
        rel: snap.gallery.rel_scheme().cloned(),
        aes: snap.gallery.aes_scheme().cloned(),
    })
}

async fn complete(
    State(state): State<Arc<AppState>>,
    ApiJson(req): ApiJson<CompleteRequest>,
) -> ApiResult<CompleteResponse> {
    let snap = state.snapshot();
    let candidates = blocking(move || snap.complete(&req)).await?;
    Ok(Json(CompleteResponse { candidates }))
}

async fn retrieve_handler(
    State(state): State<Arc<AppState>>,
    ApiJson(req): ApiJson<RetrieveRequest>,
) -> ApiResult<RetrieveResponse> {
    let snap = state.snapshot();
    let mut hits = blocking(move || snap.hits(&[req.query_text], req.eta)).await?;
    Ok(Json(RetrieveResponse {
        hits: hits.pop().unwrap_or_default(),
    }))
}

async fn pipeline(
    State(state): State<Arc<AppState>>,
    ApiJson(req): ApiJson<PipelineRequest>,
) -> ApiResult<PipelineResponse> {
    let snap = state.snapshot();
    Ok(Json(blocking(move || snap.pipeline(&req)).await?))
}

async fn eval_grid(
    State(state): State<Arc<AppState>>,
    ApiJson(req): ApiJson<GridRequest>,
) -> ApiResult<EvalReport> {
    let permit = state
        .eval_permits
        .clone()
        .acquire_owned()
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let snap = state.snapshot();
    let report = blocking(move || {
        let _permit = permit;
        snap.eval(req.config)
    })
    .await?;
    Ok(Json(report))
}

async fn gallery_stats(
    State(state): State<Arc<AppState>>,
    query: Result<Query<StatsQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<StatsResponse> {
    let Query(query) = query?;
    let bins = query.bins.unwrap_or(DEFAULT_BINS);
    if bins == 0 || bins > MAX_BINS {
        return Err(ApiError::invalid(format!("bins must be in 1..={MAX_BINS}")));
    }
    let snap = state.snapshot();
    Ok(Json(StatsResponse {
        gallery_n: snap.gallery.len(),
        bins,
        histograms: gallery_histograms(&snap.gallery, bins),
    }))
}

async fn reload(
    State(state): State<Arc<AppState>>,
    body: axum::body::Bytes,
) -> ApiResult<ReloadResponse> {
    if !state.config().admin {
        return Err(ApiError::not_found("no such route"));
    }
    let req: ReloadRequest = if body.iter().all(u8::is_ascii_whitespace) {
        ReloadRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::invalid(e.to_string()))?
    };
    let dir = req
        .gallery
        .or_else(|| state.snapshot().source.clone())
        .ok_or_else(|| ApiError::invalid("no gallery directory to reload from"))?;
    let config = state.config().clone();
    let next = blocking(move || {
        let gallery = gallery::load(&dir)?;
        Ok(Snapshot::new(gallery, &config, Some(dir)))
    })
    .await?;
    let response = ReloadResponse {
        status: "ok".to_string(),
        gallery_n: next.gallery.len(),
        gallery_hash: next.gallery.content_hash(),
    };
    state.swap(next);
    tracing::info!(gallery_n = response.gallery_n, "snapshot swapped");
    Ok(Json(response))
}

async fn api_not_found() -> ApiError {
    ApiError::not_found("no such route")
}

pub fn router(state: Arc<AppState>) -> Router {
    let static_dir = state.config().static_dir.clone();
    let router = Router::new()
        .route("/api/health", get(health))
        .route("/api/scheme", get(scheme))
        .route("/api/complete", post(complete))
        .route("/api/retrieve", post(retrieve_handler))
        .route("/api/pipeline", post(pipeline))
        .route("/api/eval/grid", post(eval_grid))
        .route("/api/gallery/stats", get(gallery_stats))
        .route("/api/admin/reload", post(reload))
        .route("/api", any(api_not_found))
        .route("/api/{*rest}", any(api_not_found));
    let router = match static_dir {
        Some(dir) => router.fallback_service(ServeDir::new(dir)),
        None => router.fallback(api_not_found),
    };
    router.with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}

/// Writes the current scheme pair, if any, as the schemes file would hold it.
pub fn scheme_pair(gallery: &Gallery) -> Option<SchemePair> {
    gallery.schemes().map(|(rel, aes)| SchemePair {
        rel: rel.clone(),
        aes: aes.clone(),
    })
}
