// SPDX-License-Identifier: MIT OR Apache-2.0

//! Read-only HTTP service over one loaded model, dataset and index.

use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use lru::LruCache;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crp_core::attribute::ConditionSet;
use crp_core::concepts::{MaximizationTarget, DEFAULT_DISPLAY_K};
use crp_core::evaluate::FlipOrder;
use crp_core::graphs::GraphParams;
use crp_core::localize::{grid_partition, PartitionSource, RegionPartition};
use crp_core::tensor::BooleanMask;
use crp_core::CrpError;

use crate::analysis::{Donor, Engine, RulesSpec};

/// OpenAPI description of every route.
pub const OPENAPI: &str = include_str!("openapi.json");

/// Address used when no flags are given.
pub const DEFAULT_ADDR: &str = "127.0.0.1:8760";

/// Failure of one request, mapped to a status code.
#[derive(Debug)]
pub enum ApiError {
    Malformed(String),
    Core(CrpError),
}

impl From<CrpError> for ApiError {
    fn from(e: CrpError) -> Self {
        ApiError::Core(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::Malformed(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::Malformed(e.body_text())
    }
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::Malformed(_) => StatusCode::BAD_REQUEST,
            ApiError::Core(e) => match e {
                CrpError::NotFound(_) => StatusCode::NOT_FOUND,
                CrpError::FingerprintMismatch(_) => StatusCode::CONFLICT,
                CrpError::Condition(_) | CrpError::Rule(_) => StatusCode::UNPROCESSABLE_ENTITY,
                CrpError::InvalidArgument(_)
                | CrpError::Shape(_)
                | CrpError::Parse { .. }
                | CrpError::Json(_)
                | CrpError::Image(_) => StatusCode::BAD_REQUEST,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        let message = match &self {
            ApiError::Malformed(m) => m.clone(),
            ApiError::Core(e) => e.to_string(),
        };
        let body = json!({"error": {"status": status.as_u16(), "message": message}});
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// Serialized response bodies keyed by route and canonical request.
type Cache = Mutex<LruCache<String, Arc<Vec<u8>>>>;

#[derive(Clone)]
pub struct AppState {
    engine: Arc<Engine>,
    cache: Option<Arc<Cache>>,
}

impl AppState {
    pub fn new(engine: Engine, cache_size: usize) -> Self {
        Self {
            engine: Arc::new(engine),
            cache: NonZeroUsize::new(cache_size).map(|n| Arc::new(Mutex::new(LruCache::new(n)))),
        }
    }

    /// Computes on the blocking pool, reusing a cached body when present.
    async fn respond<F>(&self, key: String, compute: F) -> ApiResult<Response>
    where
        F: FnOnce(&Engine) -> ApiResult<Value> + Send + 'static,
    {
        if let Some(hit) = self
            .cache
            .as_ref()
            .and_then(|c| c.lock().expect("cache lock").get(&key).cloned())
        {
            return Ok(json_body(hit));
        }
        let engine = Arc::clone(&self.engine);
        let value = tokio::task::spawn_blocking(move || compute(&engine))
            .await
            .map_err(|e| ApiError::Core(CrpError::Numeric(format!("worker failed: {e}"))))??;
        let body = Arc::new(serde_json::to_vec(&value).map_err(CrpError::from)?);
        if let Some(c) = &self.cache {
            c.lock().expect("cache lock").put(key, Arc::clone(&body));
        }
        Ok(json_body(body))
    }

    pub fn cached(&self) -> usize {
        self.cache.as_ref().map_or(0, |c| c.lock().expect("cache lock").len())
    }
}

/// Cache key of one request: route plus its canonical JSON form.
fn key(route: &str, request: &impl Serialize) -> ApiResult<String> {
    Ok(format!(
        "{route} {}",
        serde_json::to_string(request).map_err(CrpError::from)?
    ))
}

fn json_body(body: Arc<Vec<u8>>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body.as_ref().clone()).into_response()
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/predict", post(predict))
        .route("/attribute", post(attribute))
        .route("/concepts/{layer}", get(concepts))
        .route("/references/{layer}/{channel}", get(references))
        .route("/region", post(region))
        .route("/atlas", post(atlas))
        .route("/graph", post(graph))
        .route("/flip", post(flip))
        .route("/blend", post(blend))
        .route("/meta", get(meta))
        .route("/openapi.json", get(openapi))
        .with_state(state)
}

/// Serves until interrupted.
pub fn serve_blocking(engine: Engine, addr: &str, cache_size: usize) -> std::result::Result<(), CrpError> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        tracing::info!("listening on http://{}", listener.local_addr()?);
        let app = router(AppState::new(engine, cache_size));
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictRequest {
    sample: usize,
}

async fn predict(State(s): State<AppState>, body: Result<Json<PredictRequest>, JsonRejection>) -> ApiResult<Response> {
    let Json(req) = body?;
    let k = key("predict", &req)?;
    s.respond(k, move |e| {
        let p = e.predict(e.sample(req.sample)?)?;
        Ok(json!({"sample": req.sample, "prediction": p}))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttributeRequest {
    sample: usize,
    class: Option<usize>,
    #[serde(default)]
    conditions: ConditionSet,
    rules: Option<RulesSpec>,
}

async fn attribute(
    State(s): State<AppState>,
    body: Result<Json<AttributeRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body?;
    let k = key("attribute", &req)?;
    s.respond(k, move |e| {
        let rules = match &req.rules {
            Some(r) => r.resolve()?,
            None => e.rules.clone(),
        };
        let a = e.attribute_with(e.sample(req.sample)?, req.class, &req.conditions, &rules)?;
        Ok(json!({
            "sample": req.sample,
            "class": a.class,
            "logit": a.logit,
            "conditions": a.conditions,
            "rules": rules,
            "layer_sums": a.layer_sums,
            "channel_relevance": a.channel_relevance,
            "heatmap": {"shape": a.heatmap.shape(), "data": a.heatmap.data()},
            "heatmap_crpw": B64.encode(a.crpw()?),
            "heatmap_png": B64.encode(a.png()?),
        }))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConceptsQuery {
    sample: usize,
    class: Option<usize>,
    top_n: Option<usize>,
}

fn truncate<T>(mut v: Vec<T>, n: Option<usize>) -> Vec<T> {
    if let Some(n) = n {
        v.truncate(n);
    }
    v
}

async fn concepts(
    State(s): State<AppState>,
    Path(layer): Path<String>,
    query: Result<Query<ConceptsQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(q) = query?;
    let k = key("concepts", &(&layer, &q))?;
    s.respond(k, move |e| {
        let ranking = e.concepts(e.sample(q.sample)?, &layer, q.class, &ConditionSet::new())?;
        Ok(json!({"sample": q.sample, "layer": layer, "class": q.class, "ranking": truncate(ranking, q.top_n)}))
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferencesQuery {
    target: Option<String>,
    class: Option<usize>,
    k: Option<usize>,
    thumbnails: Option<bool>,
}

async fn references(
    State(s): State<AppState>,
    Path((layer, channel)): Path<(String, String)>,
    query: Result<Query<ReferencesQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let Query(q) = query?;
    let channel: usize = channel
        .parse()
        .map_err(|_| ApiError::Core(CrpError::NotFound(format!("channel {channel:?}"))))?;
    let target: MaximizationTarget = q.target.as_deref().unwrap_or("rel_sum").parse()?;
    let k = key("references", &(&layer, channel, &q))?;
    s.respond(k, move |e| {
        let k = q.k.unwrap_or(DEFAULT_DISPLAY_K);
        let refs = e.references(&layer, channel, &target, q.class, k, q.thumbnails.unwrap_or(true))?;
        let list: Vec<Value> = refs
            .references
            .iter()
            .map(|r| {
                json!({
                    "sample": r.entry.sample,
                    "score": r.entry.score,
                    "class": r.class,
                    "thumbnail_png": r.thumbnail.as_ref().map(|p| B64.encode(p)),
                })
            })
            .collect();
        Ok(json!({
            "layer": refs.layer,
            "channel": refs.channel,
            "target": refs.target,
            "class": refs.class,
            "references": list,
        }))
    })
    .await
}

/// Rectangle `[top, left, height, width]` or a row-major boolean mask.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionRequest {
    sample: usize,
    layer: String,
    class: Option<usize>,
    #[serde(default)]
    conditions: ConditionSet,
    rect: Option<[usize; 4]>,
    mask: Option<Vec<bool>>,
    top_n: Option<usize>,
}

/// Mask over an `(h, w)` plane from either a rectangle or explicit bits.
fn plane_mask(h: usize, w: usize, rect: Option<[usize; 4]>, bits: Option<Vec<bool>>) -> ApiResult<Option<BooleanMask>> {
    match (rect, bits) {
        (Some(_), Some(_)) => Err(ApiError::Malformed("give either rect or mask, not both".into())),
        (Some([t, l, rh, rw]), None) => Ok(Some(BooleanMask::rect(h, w, t, l, rh, rw)?)),
        (None, Some(b)) => Ok(Some(BooleanMask::new(vec![h, w], b)?)),
        (None, None) => Ok(None),
    }
}

async fn region(State(s): State<AppState>, body: Result<Json<RegionRequest>, JsonRejection>) -> ApiResult<Response> {
    let Json(req) = body?;
    let k = key("region", &req)?;
    s.respond(k, move |e| {
        let (_, h, w) = crp_core::tensor::chw(e.graph.input_shape())?;
        let mask = plane_mask(h, w, req.rect, req.mask)?
            .ok_or_else(|| ApiError::Malformed("rect or mask is required".into()))?;
        let ranking = e.region(e.sample(req.sample)?, &req.layer, req.class, &req.conditions, &mask)?;
        Ok(json!({
            "sample": req.sample,
            "layer": req.layer,
            "class": req.class,
            "region_pixels": mask.count(),
            "ranking": truncate(ranking, req.top_n),
        }))
    })
    .await
}

/// Either a `[rows, cols]` grid or a row-major label map over the input.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AtlasRequest {
    sample: usize,
    layer: String,
    class: Option<usize>,
    #[serde(default)]
    conditions: ConditionSet,
    grid: Option<[usize; 2]>,
    mask_ref: Option<Vec<i64>>,
    top_n: Option<usize>,
    density_threshold: Option<bool>,
}

async fn atlas(State(s): State<AppState>, body: Result<Json<AtlasRequest>, JsonRejection>) -> ApiResult<Response> {
    let Json(req) = body?;
    let k = key("atlas", &req)?;
    s.respond(k, move |e| {
        let shape = e.graph.input_shape();
        let partition = match (req.grid, req.mask_ref) {
            (Some([r, c]), None) => grid_partition(shape, r, c)?,
            (None, Some(labels)) => {
                let (_, h, w) = crp_core::tensor::chw(shape)?;
                RegionPartition::from_labels(
                    h,
                    w,
                    labels,
                    PartitionSource::External {
                        path: "mask_ref".into(),
                    },
                )?
            }
            _ => return Err(ApiError::Malformed("give exactly one of grid or mask_ref".into())),
        };
        let a = e.atlas(
            e.sample(req.sample)?,
            &req.layer,
            req.class,
            &req.conditions,
            &partition,
            req.top_n.unwrap_or(5),
            req.density_threshold.unwrap_or(true),
        )?;
        let mut v = serde_json::to_value(&a).map_err(CrpError::from)?;
        v["sample"] = json!(req.sample);
        v["png"] = json!(B64.encode(a.to_png()?));
        Ok(v)
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRoot {
    layer: String,
    channel: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRequest {
    sample: usize,
    root: GraphRoot,
    class: Option<usize>,
    #[serde(default)]
    conditions: ConditionSet,
    /// Levels below the root.
    layers: Option<usize>,
    /// Children per node.
    k: Option<usize>,
    ascending: Option<bool>,
}

async fn graph(State(s): State<AppState>, body: Result<Json<GraphRequest>, JsonRejection>) -> ApiResult<Response> {
    let Json(req) = body?;
    let k = key("graph", &req)?;
    s.respond(k, move |e| {
        let d = GraphParams::default();
        let params = GraphParams {
            depth: req.layers.unwrap_or(d.depth),
            children: req.k.unwrap_or(d.children),
            ascending: req.ascending.unwrap_or(d.ascending),
        };
        let g = e.graph(
            e.sample(req.sample)?,
            &req.root.layer,
            req.root.channel,
            req.class,
            &req.conditions,
            params,
        )?;
        let mut v = serde_json::to_value(&g).map_err(CrpError::from)?;
        v["sample"] = json!(req.sample);
        Ok(v)
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlipRequest {
    sample: usize,
    layer: String,
    class: Option<usize>,
    #[serde(default)]
    conditions: ConditionSet,
    order: Option<FlipOrder>,
    steps: Option<usize>,
}

async fn flip(State(s): State<AppState>, body: Result<Json<FlipRequest>, JsonRejection>) -> ApiResult<Response> {
    let Json(req) = body?;
    let k = key("flip", &req)?;
    s.respond(k, move |e| {
        let order = req.order.unwrap_or(FlipOrder::RelevanceDesc);
        let curve = e.flip(
            e.sample(req.sample)?,
            &req.layer,
            req.class,
            &req.conditions,
            order,
            req.steps,
        )?;
        Ok(serde_json::to_value(&curve).map_err(CrpError::from)?)
    })
    .await
}

/// A dataset sample id or the string `"mean"`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum DonorSpec {
    Sample(usize),
    Named(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlendRequest {
    sample: usize,
    layer: String,
    donor: DonorSpec,
    class: Option<usize>,
    #[serde(default)]
    conditions: ConditionSet,
    rect: Option<[usize; 4]>,
    mask: Option<Vec<bool>>,
    alphas: Vec<f64>,
    #[serde(default)]
    tracked: Vec<(String, usize)>,
}

async fn blend(State(s): State<AppState>, body: Result<Json<BlendRequest>, JsonRejection>) -> ApiResult<Response> {
    let Json(req) = body?;
    let k = key("blend", &req)?;
    s.respond(k, move |e| {
        let donor = match &req.donor {
            DonorSpec::Sample(id) => Donor::Sample(e.sample(*id)?.clone()),
            DonorSpec::Named(n) if n == "mean" => Donor::Mean,
            DonorSpec::Named(n) => {
                return Err(ApiError::Malformed(format!(
                    "donor must be a sample id or \"mean\", got {n:?}"
                )))
            }
        };
        let li = e.graph.node_index(&req.layer)?;
        let (_, h, w) = crp_core::tensor::chw(&e.graph.node(li).output_shape)?;
        let mask = plane_mask(h, w, req.rect, req.mask)?;
        let sweep = e.blend(
            e.sample(req.sample)?,
            &req.layer,
            &donor,
            mask,
            &req.alphas,
            &req.tracked,
            req.class,
            &req.conditions,
        )?;
        Ok(serde_json::to_value(&sweep).map_err(CrpError::from)?)
    })
    .await
}

async fn meta(State(s): State<AppState>) -> ApiResult<Response> {
    s.respond(key("meta", &())?, |e| {
        Ok(serde_json::to_value(e.meta()).map_err(CrpError::from)?)
    })
    .await
}

async fn openapi() -> Response {
    ([(header::CONTENT_TYPE, "application/json")], OPENAPI).into_response()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_classes() {
        let cases = [
            (CrpError::NotFound("x".into()), 404),
            (CrpError::FingerprintMismatch("x".into()), 409),
            (CrpError::Condition("x".into()), 422),
            (CrpError::InvalidArgument("x".into()), 400),
            (CrpError::Numeric("x".into()), 500),
        ];
        for (e, code) in cases {
            assert_eq!(ApiError::Core(e).status().as_u16(), code);
        }
        assert_eq!(ApiError::Malformed("x".into()).status(), StatusCode::BAD_REQUEST);
    }

    #[test]
    fn openapi_parses() {
        let v: Value = serde_json::from_str(OPENAPI).unwrap();
        assert!(v["openapi"].as_str().unwrap().starts_with("3."));
    }

    #[test]
    fn plane_masks() {
        assert!(plane_mask(2, 2, None, None).unwrap().is_none());
        assert_eq!(plane_mask(2, 2, Some([0, 0, 1, 2]), None).unwrap().unwrap().count(), 2);
        assert!(plane_mask(2, 2, None, Some(vec![true; 3])).is_err());
        assert!(plane_mask(2, 2, Some([0, 0, 1, 1]), Some(vec![true; 4])).is_err());
    }
}
