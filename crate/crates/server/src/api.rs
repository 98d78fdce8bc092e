//! `/v1` routes. Each handler decodes its input, calls the owning module
//! through [`Platform`] on the blocking pool and encodes the result.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use entropy_core::analytics::{AnalysisTemplate, QueryAst, TimeRange};
use entropy_core::broker::{AttributePredicate, AttributeValue, EntityFilter, EntityRecord, EntityType, NodeRegistration, Subscription};
use entropy_core::composite::CompositeSpec;
use entropy_core::fusion::DocumentQuery;
use entropy_core::platform::{CampaignSpec, Platform};
use entropy_core::recommender::{Feedback, GroupDefinition, PreferenceTaxonomy, RecommendationRule, RecommendationState, UserProfile};
use entropy_core::stream::{ConditionSpec, PatternSpec, SensorDataStream};
use entropy_core::timeseries::{AggFn, SeriesKey, SeriesQuery};
use entropy_core::{Quality, Span, Timestamp};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::ApiError;

#[derive(Clone)]
pub struct AppState {
    pub platform: Arc<Platform>,
    pub token: Arc<str>,
}

type ApiResult<T = Response> = Result<T, ApiError>;
type Params = Query<HashMap<String, String>>;

async fn blocking<T, F>(state: &AppState, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Platform) -> ApiResult<T> + Send + 'static,
{
    let p = state.platform.clone();
    tokio::task::spawn_blocking(move || f(&p))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn decode<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed-body", e.to_string()))
}

fn ok<T: Serialize>(v: T) -> ApiResult {
    Ok(Json(v).into_response())
}

fn created<T: Serialize>(v: T) -> ApiResult {
    Ok((StatusCode::CREATED, Json(v)).into_response())
}

fn enum_param<T: DeserializeOwned>(name: &str, raw: &str) -> ApiResult<T> {
    let candidates = [raw.to_owned(), capitalize(raw), raw.to_lowercase()];
    candidates
        .iter()
        .find_map(|c| serde_json::from_value(Value::String(c.clone())).ok())
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "bad-parameter", format!("invalid {name} `{raw}`")))
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

fn time_param(params: &HashMap<String, String>, name: &str) -> ApiResult<Option<Timestamp>> {
    params
        .get(name)
        .map(|raw| Timestamp::parse_rfc3339(raw).ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "bad-parameter", format!("{name} must be RFC 3339"))))
        .transpose()
}

fn required<'a>(params: &'a HashMap<String, String>, name: &str) -> ApiResult<&'a str> {
    params.get(name).map(String::as_str).ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing-parameter", format!("`{name}` is required")))
}

// -- auth --

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if req.method() == Method::GET || req.method() == Method::HEAD {
        return next.run(req).await;
    }
    let presented = req.headers().get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer "));
    if presented != Some(&*state.token) {
        return ApiError::unauthorized().into_response();
    }
    next.run(req).await
}

pub fn router(state: AppState) -> Router {
    let v1 = Router::new()
        .route("/health", get(health))
        .route("/context", get(context))
        .route("/entities", post(upsert_entity).get(list_entities))
        .route("/entities/{id}", get(get_entity).delete(delete_entity))
        .route("/entities/{id}/attrs", axum::routing::patch(patch_attrs))
        .route("/nodes", post(register_node))
        .route("/nodes/{id}", get(get_node))
        .route("/subscriptions", post(subscribe).get(list_subscriptions))
        .route("/composites", post(define_composite).get(list_composites))
        .route("/ingest", post(ingest))
        .route("/streams", post(register_stream).get(list_streams))
        .route("/streams/{id}", get(get_stream))
        .route("/streams/{id}/activate", post(activate_stream))
        .route("/streams/{id}/deactivate", post(deactivate_stream))
        .route("/streams/{id}/events", get(stream_events))
        .route("/conditions", post(register_condition))
        .route("/patterns", post(register_pattern))
        .route("/series", get(list_series))
        .route("/series/raw", get(series_raw))
        .route("/series/agg", get(series_agg))
        .route("/groups", post(register_group).get(list_groups))
        .route("/taxonomy", axum::routing::put(set_taxonomy))
        .route("/users", post(upsert_user).get(list_users))
        .route("/users/{id}", get(get_user))
        .route("/users/{id}/recommendations", get(user_recommendations))
        .route("/rules", post(register_rule).get(list_rules))
        .route("/rules/{id}", get(get_rule))
        .route("/recommendations/{id}", get(get_recommendation))
        .route("/recommendations/{id}/feedback", post(feedback))
        .route("/recommendations/{id}/events", get(recommendation_events))
        .route("/queries", post(run_query))
        .route("/analysis-templates", post(register_template).get(list_templates))
        .route("/analyses", post(run_analysis))
        .route("/analyses/{id}", get(get_analysis))
        .route("/documents", get(find_documents))
        .route("/documents/{*id}", get(get_document))
        .route("/campaigns", post(create_campaign).get(list_campaigns))
        .route("/campaigns/{id}", get(get_campaign))
        .route("/campaigns/{id}/activate", post(activate_campaign))
        .route("/campaigns/{id}/end", post(end_campaign))
        .route("/campaigns/{id}/dashboard", get(dashboard))
        .route("/admin/clock", get(get_clock).post(set_clock))
        .route("/admin/flush", post(flush))
        .fallback(|req: Request| async move { ApiError::not_found(&format!("{} {}", req.method(), req.uri().path())) })
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state);
    Router::new().nest("/v1", v1).fallback(|req: Request| async move { ApiError::not_found(req.uri().path()) })
}

async fn health(State(s): State<AppState>) -> ApiResult {
    ok(json!({ "status": "ok", "now": s.platform.now(), "simulated": s.platform.is_simulated() }))
}

async fn context(State(s): State<AppState>) -> ApiResult {
    ok(s.platform.fusion().vocabulary().context_document())
}

// -- entities --

async fn upsert_entity(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let record: EntityRecord = decode(&body)?;
    created(blocking(&s, move |p| Ok(p.upsert_entity(record)?)).await?)
}

async fn list_entities(State(s): State<AppState>, Query(q): Params) -> ApiResult {
    let mut filter = EntityFilter::default();
    if let Some(t) = q.get("type") {
        filter.entity_type = Some(enum_param::<EntityType>("type", t)?);
    }
    if let Some(expr) = q.get("q") {
        filter.predicate = Some(expr.parse::<AttributePredicate>().map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad-parameter", e))?);
    }
    if let Some(ids) = q.get("ids") {
        filter.ids = Some(ids.split(',').map(str::to_owned).collect());
    }
    ok(s.platform.broker().query_entities(&filter))
}

async fn get_entity(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    ok(s.platform.broker().get_entity(&id)?)
}

async fn delete_entity(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    blocking(&s, move |p| Ok(p.delete_entity(&id)?)).await?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn patch_attrs(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let attrs: BTreeMap<String, AttributeValue> = decode(&body)?;
    ok(blocking(&s, move |p| Ok(p.update_attributes(&id, attrs)?)).await?)
}

async fn register_node(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let reg: NodeRegistration = decode(&body)?;
    created(blocking(&s, move |p| Ok(p.register_node(reg)?)).await?)
}

async fn get_node(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    match s.platform.broker().lifecycle(&id) {
        Some(lc) => ok(lc),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "unknown-entity", format!("node `{id}` is not registered"))),
    }
}

async fn subscribe(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let sub: Subscription = decode(&body)?;
    let id = blocking(&s, move |p| Ok(p.subscribe(sub)?)).await?;
    created(json!({ "id": id }))
}

async fn list_subscriptions(State(s): State<AppState>) -> ApiResult {
    ok(s.platform.broker().subscriptions())
}

async fn define_composite(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let spec: CompositeSpec = decode(&body)?;
    created(blocking(&s, move |p| Ok(p.define_composite(spec)?)).await?)
}

async fn list_composites(State(s): State<AppState>) -> ApiResult {
    ok(s.platform.composites().composites())
}

// -- ingestion --

#[derive(Deserialize)]
#[serde(untagged)]
enum IngestBody {
    Items(Vec<Value>),
    Wrapped { measurements: Vec<Value> },
}

async fn ingest(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let items = match decode::<IngestBody>(&body)? {
        IngestBody::Items(v) | IngestBody::Wrapped { measurements: v } => v,
    };
    let key = headers.get("idempotency-key").and_then(|v| v.to_str().ok()).map(str::to_owned);
    ok(blocking(&s, move |p| Ok(p.ingest_json(items, key.as_deref())?)).await?)
}

// -- streams --

async fn register_stream(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let spec: SensorDataStream = decode(&body)?;
    created(blocking(&s, move |p| {
        let id = p.register_stream(spec)?;
        Ok(p.streams().stream(&id)?)
    })
    .await?)
}

async fn list_streams(State(s): State<AppState>) -> ApiResult {
    ok(s.platform.streams().streams())
}

async fn get_stream(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    ok(s.platform.streams().stream(&id)?)
}

async fn activate_stream(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    ok(blocking(&s, move |p| Ok(p.activate_stream(&id)?)).await?)
}

async fn deactivate_stream(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    ok(blocking(&s, move |p| {
        p.deactivate_stream(&id)?;
        Ok(p.streams().stream(&id)?)
    })
    .await?)
}

async fn stream_events(State(s): State<AppState>, Path(id): Path<String>, Query(q): Params) -> ApiResult {
    let since = match q.get("since") {
        Some(v) => v.parse::<u64>().map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "bad-parameter", "since must be a sequence number"))?,
        None => 0,
    };
    ok(s.platform.streams().events_since(&id, since)?)
}

async fn register_condition(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let spec: ConditionSpec = decode(&body)?;
    let id = blocking(&s, move |p| Ok(p.register_condition(spec)?)).await?;
    created(json!({ "id": id }))
}

async fn register_pattern(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let spec: PatternSpec = decode(&body)?;
    let id = blocking(&s, move |p| Ok(p.register_pattern(spec)?)).await?;
    created(json!({ "id": id }))
}

// -- series --

#[derive(Serialize)]
struct SeriesInfo {
    sensor_id: String,
    attribute: String,
    unit: Option<String>,
    samples: usize,
}

async fn list_series(State(s): State<AppState>) -> ApiResult {
    let store = s.platform.store();
    let mut keys = store.series_keys();
    keys.sort();
    ok(keys
        .into_iter()
        .map(|k| SeriesInfo { unit: store.series_unit(&k), samples: store.len(&k), sensor_id: k.sensor_id, attribute: k.attribute })
        .collect::<Vec<_>>())
}

fn series_query(q: &HashMap<String, String>) -> ApiResult<SeriesQuery> {
    let key = SeriesKey::new(required(q, "sensor_id")?, required(q, "attribute")?);
    let from = time_param(q, "from")?.unwrap_or(Timestamp::from_millis(0));
    let to = time_param(q, "to")?.unwrap_or(Timestamp::from_millis(253_402_300_800_000));
    let mut query = SeriesQuery::raw(&key, from, to);
    if let Some(quality) = q.get("quality") {
        query = query.with_quality(enum_param::<Quality>("quality", quality)?);
    }
    Ok(query)
}

async fn series_raw(State(s): State<AppState>, Query(q): Params) -> ApiResult {
    let query = series_query(&q)?;
    ok(s.platform.store().query_raw(&query)?)
}

async fn series_agg(State(s): State<AppState>, Query(q): Params) -> ApiResult {
    let mut query = series_query(&q)?;
    if !q.contains_key("from") || !q.contains_key("to") {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "missing-parameter", "`from` and `to` are required"));
    }
    query.func = Some(enum_param::<AggFn>("fn", required(&q, "fn")?)?);
    query.bucket = Some(enum_param::<Span>("bucket", required(&q, "bucket")?)?);
    ok(s.platform.store().query_aggregate(&query)?)
}

// -- recommender --

async fn register_group(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let def: GroupDefinition = decode(&body)?;
    blocking(&s, move |p| Ok(p.register_group(def.clone()).map(|_| def)?)).await.and_then(created)
}

async fn list_groups(State(s): State<AppState>) -> ApiResult {
    ok(s.platform.recommender().groups())
}

async fn set_taxonomy(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let t: PreferenceTaxonomy = decode(&body)?;
    blocking(&s, move |p| Ok(p.set_taxonomy(t.clone()).map(|_| t)?)).await.and_then(ok)
}

async fn upsert_user(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let profile: UserProfile = decode(&body)?;
    ok(blocking(&s, move |p| Ok(p.upsert_user(profile)?)).await?)
}

async fn list_users(State(s): State<AppState>) -> ApiResult {
    ok(s.platform.recommender().users())
}

async fn get_user(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    ok(s.platform.recommender().user(&id)?)
}

async fn user_recommendations(State(s): State<AppState>, Path(id): Path<String>, Query(q): Params) -> ApiResult {
    let state = q.get("state").map(|v| enum_param::<RecommendationState>("state", v)).transpose()?;
    let rec = s.platform.recommender();
    rec.user(&id)?;
    ok(rec.recommendations_for(&id, state))
}

async fn register_rule(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let rule: RecommendationRule = decode(&body)?;
    created(blocking(&s, move |p| {
        let id = p.register_rule(rule)?;
        Ok(p.recommender().rule(&id)?)
    })
    .await?)
}

async fn list_rules(State(s): State<AppState>) -> ApiResult {
    ok(s.platform.recommender().rules())
}

async fn get_rule(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    ok(s.platform.recommender().rule(&id)?)
}

async fn get_recommendation(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    ok(s.platform.recommender().recommendation(&id)?)
}

async fn recommendation_events(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let rec = s.platform.recommender();
    rec.recommendation(&id)?;
    ok(rec.events().into_iter().filter(|e| e.recommendation_id == id).collect::<Vec<_>>())
}

async fn feedback(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let fb: Feedback = decode(&body)?;
    ok(blocking(&s, move |p| Ok(p.record_feedback(&id, fb)?)).await?)
}

// -- analytics --

async fn run_query(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let raw: Value = decode(&body)?;
    let ast = QueryAst::from_value(&raw)?;
    ok(blocking(&s, move |p| Ok(p.analytics().execute_query(&ast)?)).await?)
}

async fn register_template(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let t: AnalysisTemplate = decode(&body)?;
    created(blocking(&s, move |p| {
        let id = p.register_template(t)?;
        Ok(p.analytics().template(&id)?)
    })
    .await?)
}

async fn list_templates(State(s): State<AppState>) -> ApiResult {
    ok(s.platform.analytics().templates())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TemplateRef {
    Id(String),
    Inline(Box<AnalysisTemplate>),
}

#[derive(Deserialize)]
struct AnalysisRequest {
    template: TemplateRef,
    #[serde(default)]
    config: Map<String, Value>,
}

async fn run_analysis(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let req: AnalysisRequest = decode(&body)?;
    created(blocking(&s, move |p| {
        let id = match req.template {
            TemplateRef::Id(id) => id,
            TemplateRef::Inline(t) => p.register_template(*t)?,
        };
        Ok(p.run_analysis(&id, &req.config)?)
    })
    .await?)
}

async fn get_analysis(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    ok(s.platform.analytics().result(&id)?)
}

async fn find_documents(State(s): State<AppState>, Query(q): Params) -> ApiResult {
    let query = DocumentQuery { class: q.get("type").cloned(), filters: Vec::new(), from: time_param(&q, "from")?, to: time_param(&q, "to")? };
    let limit = q.get("limit").and_then(|v| v.parse::<usize>().ok()).unwrap_or(usize::MAX);
    ok(s.platform.fusion().find_documents(&query).into_iter().take(limit).map(|d| d.to_value()).collect::<Vec<_>>())
}

async fn get_document(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    match s.platform.fusion().store().get(&id) {
        Some(d) => ok(d.to_value()),
        None => Err(ApiError::new(StatusCode::NOT_FOUND, "unknown-document", format!("no document `{id}`"))),
    }
}

// -- campaigns --

async fn create_campaign(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let spec: CampaignSpec = decode(&body)?;
    created(blocking(&s, move |p| Ok(p.create_campaign(spec)?)).await?)
}

async fn list_campaigns(State(s): State<AppState>) -> ApiResult {
    ok(s.platform.campaigns())
}

async fn get_campaign(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    ok(s.platform.campaign(&id)?)
}

async fn activate_campaign(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    ok(blocking(&s, move |p| Ok(p.activate_campaign(&id)?)).await?)
}

async fn end_campaign(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    ok(blocking(&s, move |p| Ok(p.end_campaign(&id)?)).await?)
}

async fn dashboard(State(s): State<AppState>, Path(id): Path<String>, Query(q): Params) -> ApiResult {
    let period = match (time_param(&q, "from")?, time_param(&q, "to")?) {
        (Some(from), Some(to)) => Some(TimeRange::new(from, to)),
        (None, None) => None,
        _ => return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad-parameter", "give both `from` and `to` or neither")),
    };
    ok(blocking(&s, move |p| Ok(p.dashboard(&id, period)?)).await?)
}

// -- admin --

async fn get_clock(State(s): State<AppState>) -> ApiResult {
    ok(json!({ "now": s.platform.now(), "simulated": s.platform.is_simulated() }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClockRequest {
    #[serde(default)]
    now: Option<Timestamp>,
    #[serde(default)]
    advance: Option<Span>,
}

async fn set_clock(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let req: ClockRequest = decode(&body)?;
    ok(blocking(&s, move |p| {
        let target = match (req.now, req.advance) {
            (Some(t), None) => t,
            (None, Some(d)) => p.now() + d,
            _ => return Err(ApiError::new(StatusCode::BAD_REQUEST, "malformed-body", "give exactly one of `now` or `advance`")),
        };
        Ok(p.set_clock(target)?)
    })
    .await?)
}

async fn flush(State(s): State<AppState>) -> ApiResult {
    blocking(&s, |p| Ok(p.flush()?)).await?;
    Ok(StatusCode::NO_CONTENT.into_response())
}
