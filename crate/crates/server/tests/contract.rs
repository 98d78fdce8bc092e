mod common;

use common::{error_code, t0, TestServer, TOKEN};
use entropy_core::recommender::{air_quality_templates, RecommendationKind, RecommendationRule, ValidationSpec};
use entropy_core::stream::ConditionSpec;
use entropy_core::{Comparator, Span};
use serde_json::{json, Value};

fn at(mins: i64) -> String {
    (t0() + Span::from_mins(mins)).to_rfc3339()
}

fn provision(s: &TestServer) {
    s.ok_post("/entities", &json!({ "id": "office-12", "entity_type": "Room" }));
    for (id, ty) in [("co2-12", "SensorNode"), ("meter-12", "SensorNode"), ("door-12", "Door")] {
        s.ok_post(
            "/entities",
            &json!({ "id": id, "entity_type": ty, "attributes": { "locatedIn": { "value": "office-12", "observed_at": at(0) } } }),
        );
    }
    s.ok_post("/users", &json!({ "user_id": "ana", "gamer_type": "Humanitarian", "activity_locations": ["office-12"] }));
    s.ok_post("/users", &json!({ "user_id": "ben", "gamer_type": "Socialiser", "activity_locations": ["office-12"] }));
}

fn co2(mins: i64, v: f64) -> Value {
    json!({ "sensor_id": "co2-12", "attribute": "co2", "value": v, "unit": "ppm", "observed_at": at(mins) })
}

#[test]
fn health_and_context_are_public() {
    let s = TestServer::simulated();
    let h = s.ok_get("/health");
    assert_eq!(h["status"], "ok");
    assert_eq!(h["simulated"], true);
    assert_eq!(h["now"], t0().to_rfc3339());
    let ctx = s.ok_get("/context");
    assert!(ctx["@context"].is_object(), "{ctx}");
}

#[test]
fn mutations_require_the_bearer_token() {
    let s = TestServer::simulated();
    let body = json!({ "id": "office-1", "entity_type": "Room" });
    let anon = s.client.post(s.url("/entities")).json(&body).send().unwrap();
    assert_eq!(error_code(anon, 401), "unauthorized");
    let wrong = s.client.post(s.url("/entities")).bearer_auth("nope").json(&body).send().unwrap();
    assert_eq!(error_code(wrong, 401), "unauthorized");
    let basic = s.client.delete(s.url("/entities/office-1")).header("Authorization", format!("Basic {TOKEN}")).send().unwrap();
    assert_eq!(error_code(basic, 401), "unauthorized");
    assert_eq!(s.ok_get("/entities"), json!([]));
    s.ok_post("/entities", &body);
}

#[test]
fn errors_use_one_envelope() {
    let s = TestServer::simulated();
    assert_eq!(error_code(s.get("/nothing-here"), 404), "not-found");
    assert_eq!(error_code(s.client.get(format!("{}/../elsewhere", s.base)).send().unwrap(), 404), "not-found");
    let garbled = s.client.post(s.url("/entities")).bearer_auth(TOKEN).body("{not json").send().unwrap();
    assert_eq!(error_code(garbled, 400), "malformed-body");
    assert_eq!(error_code(s.get("/entities/ghost"), 404), "unknown-entity");
    assert_eq!(error_code(s.get("/entities?type=Spaceship"), 400), "bad-parameter");
    assert_eq!(error_code(s.post("/entities", &json!({ "id": "bad id!", "entity_type": "Room" })), 422), "malformed-id");
}

#[test]
fn entity_crud() {
    let s = TestServer::simulated();
    provision(&s);
    let e = s.ok_get("/entities/co2-12");
    assert_eq!(e["entity_type"], "SensorNode");
    assert_eq!(e["attributes"]["locatedIn"]["value"], "office-12");

    let rooms = s.ok_get("/entities?type=Room");
    assert_eq!(rooms.as_array().unwrap().len(), 1);
    let located = s.ok_get("/entities?q=locatedIn%3Doffice-12");
    assert_eq!(located.as_array().unwrap().len(), 3);
    let by_id = s.ok_get("/entities?ids=door-12,meter-12");
    assert_eq!(by_id.as_array().unwrap().len(), 2);

    let patched = TestServer::expect(s.patch("/entities/office-12/attrs", &json!({ "occupancy": { "value": 3.0, "observed_at": at(1) } })), 200);
    assert_eq!(patched["attributes"]["occupancy"]["value"], 3.0);
    assert_eq!(error_code(s.patch("/entities/ghost/attrs", &json!({})), 404), "unknown-entity");

    TestServer::expect(s.delete("/entities/door-12"), 204);
    assert_eq!(error_code(s.get("/entities/door-12"), 404), "unknown-entity");
}

#[test]
fn nodes_subscriptions_and_composites() {
    let s = TestServer::simulated();
    provision(&s);
    let node = TestServer::expect(s.post("/nodes", &json!({ "node_id": "co2-12", "reporting_period": "1m" })), 201);
    assert_eq!(node["node_id"], "co2-12");
    assert_eq!(s.ok_get("/nodes/co2-12")["node_id"], "co2-12");
    assert_eq!(error_code(s.get("/nodes/meter-12"), 404), "unknown-entity");

    let sub = TestServer::expect(
        s.post("/subscriptions", &json!({ "selector": { "entity_type": "Room" }, "sink": { "kind": "webhook", "url": "http://127.0.0.1:9/hook" } })),
        201,
    );
    let id = sub["id"].as_str().unwrap();
    let subs = s.ok_get("/subscriptions");
    assert!(subs.as_array().unwrap().iter().any(|x| x["id"] == id));

    let comp = TestServer::expect(
        s.post(
            "/composites",
            &json!({ "composite_id": "floor-1", "entity_type": "BuildingSpace", "members": { "by": "ids", "ids": ["co2-12"] }, "aggregations": { "co2": "Avg" } }),
        ),
        201,
    );
    assert_eq!(comp["members"], json!(["co2-12"]));
    s.ok_post("/ingest", &json!([co2(1, 600.0)]));
    assert_eq!(s.ok_get("/entities/floor-1")["attributes"]["co2"]["value"], 600.0);
    assert_eq!(s.ok_get("/composites").as_array().unwrap().len(), 1);
}

#[test]
fn ingest_reports_items_and_honours_idempotency_keys() {
    let s = TestServer::simulated();
    provision(&s);
    let mut batch: Vec<Value> = (0..20).map(|i| co2(i, 500.0 + i as f64)).collect();
    batch.push(co2(21, -5.0));
    batch.push(json!({ "sensor_id": "ghost", "attribute": "co2", "value": 1.0, "observed_at": at(22) }));
    batch.push(json!({ "sensor_id": "co2-12" }));
    batch.push(co2(3, 503.0));
    let req = || s.client.post(s.url("/ingest")).bearer_auth(TOKEN).header("Idempotency-Key", "batch-1");
    let r: Value = TestServer::expect(req().json(&batch).send().unwrap(), 200);
    assert_eq!((r["accepted"].as_u64(), r["dropped"].as_u64(), r["errors"].as_u64(), r["duplicates"].as_u64()), (Some(20), Some(1), Some(2), Some(1)));
    let items = r["items"].as_array().unwrap();
    assert_eq!(items.len(), 24);
    assert_eq!(items[20]["status"], "dropped-as-outlier");
    assert_eq!(items[21]["code"], "unknown-sensor");
    assert_eq!(items[22]["code"], "malformed-measurement");
    assert_eq!(items[23]["status"], "duplicate");

    let again: Value = TestServer::expect(req().json(&batch).send().unwrap(), 200);
    assert_eq!(again, r);
    assert_eq!(error_code(req().json(&json!([co2(30, 1.0)])).send().unwrap(), 409), "idempotency-conflict");

    let wrapped = s.ok_post("/ingest", &json!({ "measurements": [co2(40, 512.0)] }));
    assert_eq!(wrapped["accepted"], 1);
    assert_eq!(error_code(s.post("/ingest", &json!({ "rows": [] })), 400), "malformed-body");
}

#[test]
fn series_listing_raw_and_aggregates() {
    let s = TestServer::simulated();
    provision(&s);
    let batch: Vec<Value> = (0..60).map(|i| co2(i, 400.0 + (i % 10) as f64)).collect();
    s.ok_post("/ingest", &Value::Array(batch));
    let series = s.ok_get("/series");
    assert_eq!(series, json!([{ "sensor_id": "co2-12", "attribute": "co2", "unit": "ppm", "samples": 60 }]));

    let raw = s.ok_get(&format!("/series/raw?sensor_id=co2-12&attribute=co2&from={}&to={}", at(10), at(20)));
    let raw = raw.as_array().unwrap();
    assert_eq!(raw.len(), 10);
    assert_eq!(raw[0]["observed_at"], at(10));
    assert_eq!(raw[0]["quality"], "Cleaned");
    assert_eq!(s.ok_get("/series/raw?sensor_id=co2-12&attribute=co2").as_array().unwrap().len(), 60);

    let agg = s.ok_get(&format!("/series/agg?sensor_id=co2-12&attribute=co2&fn=avg&bucket=10m&from={}&to={}", at(0), at(60)));
    let buckets = agg.as_array().unwrap();
    assert_eq!(buckets.len(), 6);
    for b in buckets {
        assert_eq!(b["value"], 404.5, "{b}");
        assert_eq!(b["sample_count"], 10);
    }
    assert_eq!(error_code(s.get("/series/agg?sensor_id=co2-12&attribute=co2&fn=avg&bucket=10m"), 400), "missing-parameter");
    assert_eq!(error_code(s.get("/series/raw?attribute=co2"), 400), "missing-parameter");
    assert_eq!(error_code(s.get("/series/raw?sensor_id=co2-12&attribute=co2&from=yesterday"), 400), "bad-parameter");
}

#[test]
fn stream_lifecycle_and_events() {
    let s = TestServer::simulated();
    provision(&s);
    let stream = TestServer::expect(
        s.post("/streams", &json!({ "sensor_id": "co2-12", "attribute": "co2", "frequency": "10m", "measurement_type": "LastValue" })),
        201,
    );
    let id = stream["id"].as_str().unwrap().to_owned();
    assert_eq!(stream["active"], false);
    assert_eq!(s.ok_post(&format!("/streams/{id}/activate"), &json!({}))["active"], true);
    let cond = TestServer::expect(s.post("/conditions", &json!({ "stream_id": id, "comparator": ">", "threshold": 900.0 })), 201);
    assert!(cond["id"].is_string());
    let pat = TestServer::expect(s.post("/patterns", &json!({ "members": [cond["id"]], "within": "1h" })), 201);
    assert!(pat["id"].is_string());
    assert_eq!(error_code(s.post("/conditions", &json!({ "stream_id": "nope", "comparator": ">", "threshold": 1.0 })), 404), "unknown-stream");

    s.ok_post("/ingest", &json!([co2(5, 950.0), co2(15, 960.0), co2(25, 970.0)]));
    s.ok_post("/admin/clock", &json!({ "advance": "10m" }));
    let events = s.ok_get(&format!("/streams/{id}/events"));
    let events = events.as_array().unwrap();
    let ticks: Vec<&Value> = events.iter().filter(|e| e["payload"]["type"] == "tick").collect();
    let values: Vec<f64> = ticks.iter().map(|e| e["payload"]["value"].as_f64().unwrap()).collect();
    assert_eq!(values, vec![950.0, 960.0, 970.0]);
    let last = events.last().unwrap()["seq"].as_u64().unwrap();
    let later = s.ok_get(&format!("/streams/{id}/events?since={}", last - 1));
    assert_eq!(later.as_array().unwrap().len(), 1);
    assert_eq!(later[0]["seq"], last);

    assert_eq!(s.ok_post(&format!("/streams/{id}/deactivate"), &json!({}))["active"], false);
    assert_eq!(s.ok_get("/streams").as_array().unwrap().len(), 1);
    assert_eq!(error_code(s.get("/streams/ghost"), 404), "unknown-stream");
}

fn co2_rule(stream: &str) -> Value {
    serde_json::to_value(RecommendationRule {
        id: String::new(),
        condition: ConditionSpec::new(stream, Comparator::Gt, 1000.0),
        condition_id: String::new(),
        space_id: None,
        target_groups: ["Humanitarian", "Socialiser"].into_iter().map(String::from).collect(),
        kind: RecommendationKind::Task,
        templates: air_quality_templates(),
        validation: Some(ValidationSpec::door("door-12")),
        involved_object: Some("door-12".into()),
        cooldown: None,
        n_required: 5,
        badge: Some("Refresher".into()),
        preference_theme: None,
        campaign_id: None,
    })
    .unwrap()
}

#[test]
fn recommendation_flow_over_http() {
    let s = TestServer::simulated();
    provision(&s);
    let group = TestServer::expect(s.post("/groups", &json!({ "name": "Player", "expression": "Person that hasPreference some Reward" })), 201);
    assert_eq!(group["name"], "Player");
    assert_eq!(s.ok_get("/groups").as_array().unwrap().len(), 1);
    TestServer::expect(s.put("/taxonomy", &json!({ "parents": { "Badge": "Reward" } })), 200);
    s.ok_post("/users", &json!({ "user_id": "cho", "preferences": ["Badge"], "activity_locations": ["office-12"] }));
    let cho = s.ok_get("/users/cho");
    assert!(cho["inferred_groups"].as_array().unwrap().contains(&json!("Player")), "{cho}");
    assert_eq!(s.ok_get("/users").as_array().unwrap().len(), 3);

    let stream = s.ok_post("/streams", &json!({ "sensor_id": "co2-12", "attribute": "co2", "frequency": "1h", "measurement_type": "LastValue" }));
    let sid = stream["id"].as_str().unwrap();
    s.ok_post(&format!("/streams/{sid}/activate"), &json!({}));
    let rule = TestServer::expect(s.post("/rules", &co2_rule(sid)), 201);
    let rule_id = rule["id"].as_str().unwrap();
    assert_eq!(s.ok_get(&format!("/rules/{rule_id}"))["id"], rule_id);
    assert_eq!(s.ok_get("/rules").as_array().unwrap().len(), 1);

    let batch: Vec<Value> = (0..=50).step_by(10).map(|m| co2(m, 900.0 + 30.0 * m as f64)).collect();
    s.ok_post("/ingest", &Value::Array(batch));
    s.ok_post("/admin/clock", &json!({ "now": at(60) }));

    let recs = s.ok_get("/users/ana/recommendations?state=Delivered");
    let recs = recs.as_array().unwrap();
    assert_eq!(recs.len(), 1, "{recs:?}");
    assert_eq!(recs[0]["content"], "The air quality can become better. Let's open the door for 2 minutes to freshen up and get closer to earning the Refresher Badge (after 5 times of action)");
    assert!(s.ok_get("/users/cho/recommendations").as_array().unwrap().is_empty());
    let rid = recs[0]["id"].as_str().unwrap();

    // a door task with a validation window waits for the sensor, not the answer
    let fb = s.ok_post(&format!("/recommendations/{rid}/feedback"), &json!({ "response": "accept" }));
    assert_eq!(fb["state"], "Delivered");
    assert_eq!(fb["feedback"]["response"], "accept");

    let ben = s.ok_get("/users/ben/recommendations?state=Delivered");
    let bid = ben[0]["id"].as_str().unwrap();
    assert_eq!(s.ok_post(&format!("/recommendations/{bid}/feedback"), &json!({ "response": "reject" }))["state"], "Rejected");
    assert_eq!(error_code(s.post(&format!("/recommendations/{bid}/feedback"), &json!({ "response": "accept" })), 409), "wrong-state");
    assert_eq!(s.ok_get(&format!("/recommendations/{bid}"))["state"], "Rejected");
    let events = s.ok_get(&format!("/recommendations/{bid}/events"));
    let states: Vec<&str> = events.as_array().unwrap().iter().map(|e| e["to"].as_str().unwrap()).collect();
    assert_eq!(states, ["Pending", "Delivered", "Rejected"]);
    assert_eq!(error_code(s.get("/recommendations/ghost"), 404), "unknown-recommendation");
    assert_eq!(error_code(s.get("/users/ghost/recommendations"), 404), "unknown-user");
    assert_eq!(error_code(s.get("/users/ana/recommendations?state=Sleeping"), 400), "bad-parameter");
}

#[test]
fn queries_templates_and_analyses() {
    let s = TestServer::simulated();
    provision(&s);
    let q = s.ok_post("/queries", &json!({ "target": "users", "predicate": { "field": "gamer_type", "op": "=", "value": "Socialiser" } }));
    assert_eq!(q, json!({ "target": "users", "user_ids": ["ben"] }));
    assert_eq!(error_code(s.post("/queries", &json!({ "target": "users", "predicate": { "field": "shoe", "op": "=", "value": 1 } })), 422), "unknown-field");

    let batch: Vec<Value> = (0..8).map(|i| json!({ "sensor_id": "meter-12", "attribute": "energy", "value": if i < 4 { 2.0 } else { 1.0 }, "unit": "kWh", "observed_at": at(i * 60) })).collect();
    s.ok_post("/ingest", &Value::Array(batch));
    let input = json!({ "target": "series", "predicate": { "field": "sensor_id", "op": "=", "value": "meter-12" }, "range": { "from": at(0), "to": at(480) } });
    let tpl = TestServer::expect(s.post("/analysis-templates", &json!({ "algorithm": "summary-stats", "input": input, "config": { "split_at": at(240) } })), 201);
    let tid = tpl["id"].as_str().unwrap();
    assert_eq!(s.ok_get("/analysis-templates").as_array().unwrap().len(), 1);

    let res = TestServer::expect(s.post("/analyses", &json!({ "template": tid })), 201);
    assert_eq!(res["template_id"], tid);
    let fetched = s.ok_get(&format!("/analyses/{}", res["id"].as_str().unwrap()));
    assert_eq!(fetched, res);

    let inline = TestServer::expect(s.post("/analyses", &json!({ "template": { "algorithm": "summary-stats", "input": input }, "config": {} })), 201);
    assert_ne!(inline["template_id"], tid);
    assert_eq!(error_code(s.post("/analyses", &json!({ "template": tid, "config": { "threshold": "high" } })), 422), "invalid-config");
    assert_eq!(error_code(s.post("/analyses", &json!({ "template": "ghost" })), 404), "unknown-template");
    assert_eq!(error_code(s.get("/analyses/ghost"), 404), "unknown-result");
}

#[test]
fn documents_are_fused_and_addressable() {
    let s = TestServer::simulated();
    provision(&s);
    let rooms = s.ok_get("/documents?type=entropy:Room");
    let rooms = rooms.as_array().unwrap();
    assert_eq!(rooms.len(), 1);
    let id = rooms[0]["@id"].as_str().unwrap();
    assert!(rooms[0]["@context"].is_object());
    let doc = s.ok_get(&format!("/documents/{id}"));
    assert_eq!(&doc, &rooms[0]);
    assert_eq!(s.ok_get("/documents?limit=2").as_array().unwrap().len(), 2);
    assert_eq!(error_code(s.get("/documents/ghost"), 404), "unknown-document");
}

#[test]
fn campaign_lifecycle_and_dashboard() {
    let s = TestServer::simulated();
    provision(&s);
    let c = TestServer::expect(s.post("/campaigns", &json!({ "name": "save energy", "spaces": ["office-12"] })), 201);
    let id = c["id"].as_str().unwrap().to_owned();
    assert_eq!(c["status"], "Draft");
    assert_eq!(error_code(s.get(&format!("/campaigns/{id}/dashboard")), 422), "invalid-period");
    assert_eq!(s.ok_post(&format!("/campaigns/{id}/activate"), &json!({}))["status"], "Active");
    assert_eq!(error_code(s.post(&format!("/campaigns/{id}/activate"), &json!({})), 409), "wrong-campaign-state");

    let batch: Vec<Value> = (0..10).map(|i| json!({ "sensor_id": "meter-12", "attribute": "energy", "value": 1.5, "unit": "kWh", "observed_at": at(i * 15) })).collect();
    s.ok_post("/ingest", &Value::Array(batch));
    let d = s.ok_get(&format!("/campaigns/{id}/dashboard"));
    assert_eq!(d["current_consumption"], 15.0);
    assert_eq!(d["unit"], "kWh");
    let window = s.ok_get(&format!("/campaigns/{id}/dashboard?from={}&to={}", at(0), at(60)));
    assert_eq!(window["current_consumption"], 6.0);
    assert_eq!(error_code(s.get(&format!("/campaigns/{id}/dashboard?from={}", at(0))), 400), "bad-parameter");

    s.ok_post("/admin/clock", &json!({ "advance": "1m" }));
    let ended = s.ok_post(&format!("/campaigns/{id}/end"), &json!({}));
    assert_eq!(ended["status"], "Ended");
    assert_eq!(ended["last_summary"]["current_consumption"], 15.0);
    assert_eq!(s.ok_get("/campaigns").as_array().unwrap().len(), 1);
    assert_eq!(s.ok_get(&format!("/campaigns/{id}"))["status"], "Ended");
    assert_eq!(error_code(s.get("/campaigns/ghost"), 404), "unknown-campaign");
    assert_eq!(error_code(s.post("/campaigns", &json!({ "name": "", "spaces": [] })), 422), "invalid-campaign");
}

#[test]
fn admin_clock_and_flush() {
    let s = TestServer::simulated();
    let c = s.ok_get("/admin/clock");
    assert_eq!(c, json!({ "now": t0().to_rfc3339(), "simulated": true }));
    let r = s.ok_post("/admin/clock", &json!({ "advance": "2h" }));
    assert_eq!(r["now"], at(120));
    assert_eq!(error_code(s.post("/admin/clock", &json!({ "now": at(0) })), 409), "clock-backwards");
    assert_eq!(error_code(s.post("/admin/clock", &json!({ "now": at(200), "advance": "1h" })), 400), "malformed-body");
    TestServer::expect(s.post("/admin/flush", &json!({})), 204);
}

#[test]
fn system_clock_rejects_manual_time() {
    let mut config = entropy_server::ServerConfig::default();
    config.server.token = TOKEN.into();
    let s = TestServer::start(config);
    assert_eq!(s.ok_get("/admin/clock")["simulated"], false);
    assert_eq!(error_code(s.post("/admin/clock", &json!({ "advance": "1h" })), 409), "clock-not-simulated");
}
