use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use attrsearch_core::engine::{self, QueryResult};
use attrsearch_core::localization::AamRecord;
use attrsearch_core::model::{Model, ModelConfig};
use attrsearch_core::service::{router, run_query, QueryRequest, ServiceState};
use attrsearch_core::synthgen::{self, to_rgb8, AttributeSchema, Dataset};
use attrsearch_core::trainer;

fn state() -> ServiceState {
    let schema = AttributeSchema::default();
    let images = synthgen::generate_dataset(&schema, 260, 5).unwrap();
    let split = synthgen::split(&images, 20, 120, 5).unwrap();
    let data = Dataset { schema: schema.clone(), images, split };
    let mut model = Model::init(schema, ModelConfig::default(), 5).unwrap();
    trainer::build_model_memory(&mut model, &data.subset(&data.split.train).unwrap()).unwrap();
    let index = engine::index_gallery(&model, &data.subset(&data.split.gallery).unwrap()).unwrap();
    ServiceState::new(model, index, data).unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Option<String>, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let ct = res.headers().get("content-type").map(|v| v.to_str().unwrap().to_string());
    let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, ct, body)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post_query(body: &str) -> Request<Body> {
    Request::post("/query").header("content-type", "application/json").body(Body::from(body.to_string())).unwrap()
}

fn query_json(id: &str, attribute: &str, value: &str, k: i64) -> String {
    serde_json::json!({ "query_id": id, "attribute": attribute, "value": value, "k": k }).to_string()
}

/// First query image and a value of `pattern` it does not have.
fn manipulation(state: &ServiceState) -> (String, String) {
    let q = state.data.get(&state.data.split.query[0]).unwrap();
    let a = state.model.schema.attribute_index("pattern").unwrap();
    let v = (q.labels[a] + 1) % state.model.schema.value_count(a);
    (q.id.clone(), state.model.schema.attributes[a].values[v].clone())
}

#[tokio::test]
async fn schema_is_canonical_json() {
    let st = state();
    let want = st.model.schema.to_canonical_json();
    let app = router(st);
    let (status, ct, body) = send(&app, get("/schema")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ct.as_deref(), Some("application/json"));
    assert_eq!(String::from_utf8(body).unwrap(), want);
}

#[tokio::test]
async fn query_matches_the_engine() {
    let st = state();
    let (id, value) = manipulation(&st);
    let a = st.model.schema.attribute_index("pattern").unwrap();
    let v = st.model.schema.value_index(a, &value).unwrap();
    let direct = engine::query(&st.model, &st.index, st.data.get(&id).unwrap(), a, v, 5).unwrap();
    let app = router(st);
    let (status, _, body) = send(&app, post_query(&query_json(&id, "pattern", &value, 5))).await;
    assert_eq!(status, StatusCode::OK);
    let got: QueryResult = serde_json::from_slice(&body).unwrap();
    assert_eq!(got, direct);
    assert_eq!(got.results.len(), 5);
    assert!(got.results.windows(2).all(|w| w[0].distance <= w[1].distance));

    // identical requests, identical bytes
    let (_, _, again) = send(&app, post_query(&query_json(&id, "pattern", &value, 5))).await;
    assert_eq!(body, again);
}

#[tokio::test]
async fn invalid_queries_are_rejected_with_a_field() {
    let st = state();
    let (id, value) = manipulation(&st);
    let q = st.data.get(&id).unwrap();
    let a = st.model.schema.attribute_index("pattern").unwrap();
    let current = st.model.schema.attributes[a].values[q.labels[a]].clone();
    let app = router(st);
    for (body, field) in [
        (query_json(&id, "hat", &value, 5), Some("attribute")),
        (query_json(&id, "pattern", "polka", 5), Some("value")),
        (query_json(&id, "pattern", &current, 5), Some("value")),
        (query_json(&id, "pattern", &value, 0), Some("k")),
        (query_json(&id, "pattern", &value, -3), None),
        ("{not json".to_string(), None),
    ] {
        let (status, _, bytes) = send(&app, post_query(&body)).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
        let err: Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(err["error"]["code"], "invalid_request");
        assert_eq!(err["error"]["field"].as_str(), field, "{body}");
    }
    let (status, _, bytes) = send(&app, post_query(&query_json("img999999", "pattern", &value, 5))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let err: Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(err["error"]["code"], "not_found");
}

#[test]
fn run_query_agrees_with_http_validation() {
    let st = state();
    let (id, value) = manipulation(&st);
    let req = QueryRequest { query_id: id, attribute: "pattern".into(), value, k: 3 };
    assert_eq!(run_query(&st, &req).unwrap().results.len(), 3);
    assert!(run_query(&st, &QueryRequest { k: 0, ..req }).is_err());
}

#[tokio::test]
async fn aam_box_matches_offline_recomputation() {
    let st = state();
    let id = st.data.split.gallery[0].clone();
    let img = st.data.get(&id).unwrap();
    let a = st.model.schema.attribute_index("top-shape").unwrap();
    let maps = st.model.features(&img.pixels).unwrap();
    let b = attrsearch_core::localization::threshold_bbox(&st.model.aam(&maps, a).unwrap());
    let (h, w) = (img.pixels.shape()[0] as u32, img.pixels.shape()[1] as u32);
    let app = router(st);

    let (status, _, body) = send(&app, get(&format!("/aam/{id}/top-shape/box"))).await;
    assert_eq!(status, StatusCode::OK);
    let record: AamRecord = serde_json::from_slice(&body).unwrap();
    assert_eq!(record.roi, [b.y1, b.x1, b.y2, b.x2]);

    let (status, ct, png) = send(&app, get(&format!("/aam/{id}/top-shape"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ct.as_deref(), Some("image/png"));
    let decoded = image::load_from_memory(&png).unwrap();
    assert_eq!((decoded.width(), decoded.height()), (w, h));

    assert_eq!(send(&app, get(&format!("/aam/{id}/hat"))).await.0, StatusCode::NOT_FOUND);
    assert_eq!(send(&app, get("/aam/img999999/top-shape/box")).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn thumbnail_round_trips_pixels() {
    let st = state();
    let id = st.data.split.gallery[3].clone();
    let want = to_rgb8(&st.data.get(&id).unwrap().pixels).unwrap();
    let app = router(st);
    let (status, ct, png) = send(&app, get(&format!("/gallery/{id}/thumbnail"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ct.as_deref(), Some("image/png"));
    assert_eq!(image::load_from_memory(&png).unwrap().to_rgb8(), want);
    let (_, _, again) = send(&app, get(&format!("/gallery/{id}/thumbnail"))).await;
    assert_eq!(png, again);
    assert_eq!(send(&app, get("/gallery/nope/thumbnail")).await.0, StatusCode::NOT_FOUND);
}

#[test]
fn state_rejects_a_foreign_index() {
    let st = state();
    let other = Model::init(st.model.schema.clone(), ModelConfig::default(), 99).unwrap();
    let ServiceState { index, data, .. } = st;
    assert!(ServiceState::new(other, index, data).is_err());
}
