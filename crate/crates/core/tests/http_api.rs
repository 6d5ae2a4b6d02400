use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use mailburst::config::Config;
use mailburst::observe::{check_well_formed, TraceSegment};
use mailburst::sim::{Simulation, DEFAULT_START};
use mailburst::transport::RuleSet;

fn setup(config: Config) -> (Simulation, Router) {
    let sim = Simulation::new(config, RuleSet::default(), DEFAULT_START).unwrap();
    let app = mailburst::gateway::router(sim.gateway().clone());
    (sim, app)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn campaign(n: usize, domain: &str) -> Value {
    let recipients: Vec<Value> =
        (0..n).map(|i| json!({"address": format!("r{i}@{domain}"), "variables": {"name": format!("R{i}")}})).collect();
    json!({"from": "news@sender.example", "subject": "Hi {{name}}", "html_body": "<p>{{name}}</p>", "recipients": recipients})
}

fn metric(text: &str, line_prefix: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(line_prefix).map(|v| v.trim().parse().unwrap()))
        .unwrap_or_else(|| panic!("no {line_prefix} in\n{text}"))
}

#[tokio::test]
async fn submit_returns_before_sending_and_status_follows() {
    let (sim, app) = setup(Config::default());
    let (s, text) = call(&app, "GET", "/metrics", None).await;
    let text = String::from_utf8(text).unwrap();
    assert_eq!(s, StatusCode::OK);
    assert_eq!(metric(&text, "Send{} "), 0.0);
    assert_eq!(metric(&text, "bounce_rate{} "), 0.0);

    let (s, body) = call_json(&app, "POST", "/campaigns", Some(campaign(120, "example.com"))).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_eq!(body["accepted_count"], 120);
    assert_eq!(body["batch_count"], 3);
    assert!(sim.transport_calls().is_empty());
    let id = body["campaign_id"].as_str().unwrap().to_owned();

    let (s, view) = call_json(&app, "GET", &format!("/campaigns/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(view["state"], "Queued");

    sim.run_until_quiescent().unwrap();
    let (_, view) = call_json(&app, "GET", &format!("/campaigns/{id}"), None).await;
    assert_eq!(view["state"], "Complete");
    assert_eq!(view["counts"]["sent"], 120);

    let (_, text) = call(&app, "GET", "/metrics", None).await;
    assert_eq!(metric(&String::from_utf8(text).unwrap(), "Send{} "), 120.0);

    let (s, list) = call_json(&app, "GET", "/campaigns", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(list.as_array().unwrap().len(), 1);

    let (s, trace) = call_json(&app, "GET", &format!("/traces/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    let segs: Vec<TraceSegment> = serde_json::from_value(trace["segments"].clone()).unwrap();
    let names: Vec<&str> = segs.iter().map(|s| s.name.as_str()).collect();
    for n in ["campaign", "gateway", "preprocess", "batch-0", "batch-1", "batch-2"] {
        assert!(names.contains(&n), "{names:?}");
    }
    check_well_formed(trace["trace_id"].as_str().unwrap(), &segs).unwrap();

    let (s, h) = call_json(&app, "GET", "/health", None).await;
    assert_eq!((s, h["status"].as_str()), (StatusCode::OK, Some("ok")));
}

#[tokio::test]
async fn bounces_are_listed_per_campaign() {
    let (sim, app) = setup(Config::default());
    let mut body = campaign(8, "example.com");
    for i in 0..3 {
        body["recipients"]
            .as_array_mut()
            .unwrap()
            .push(json!({"address": format!("b{i}@bounce.sim"), "variables": {"name": "B"}}));
    }
    let (_, resp) = call_json(&app, "POST", "/campaigns", Some(body)).await;
    let id = resp["campaign_id"].as_str().unwrap();
    sim.run_until_quiescent().unwrap();
    let (s, bounces) = call_json(&app, "GET", &format!("/campaigns/{id}/bounces"), None).await;
    assert_eq!(s, StatusCode::OK);
    let bounces = bounces.as_array().unwrap();
    assert_eq!(bounces.len(), 3);
    assert!(bounces.iter().all(|b| b["bounce_type"] == "Permanent" && b["campaign_id"] == id));
}

#[tokio::test]
async fn duplicates_and_bad_addresses_are_reported() {
    let (_sim, app) = setup(Config::default());
    let body = json!({
        "from": "news@sender.example", "subject": "s", "html_body": "b",
        "recipients": ["a@example.com", "a@EXAMPLE.com", "not-an-address", "b@example.com"]
    });
    let (s, resp) = call_json(&app, "POST", "/campaigns", Some(body)).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    assert_eq!(resp["accepted_count"], 2);
    assert_eq!(resp["duplicates_removed"], 1);
    assert_eq!(resp["rejected"][0]["address"], "not-an-address");
}

#[tokio::test]
async fn error_statuses() {
    let mut config = Config::default();
    config.limits.daily_quota = 100;
    let (_sim, app) = setup(config);

    let (s, e) = call_json(&app, "POST", "/campaigns", Some(json!({"from": 1}))).await;
    assert_eq!((s, e["error"].as_str()), (StatusCode::BAD_REQUEST, Some("MalformedBody")));
    assert!(e["detail"].is_string());

    let mut bad_from = campaign(1, "example.com");
    bad_from["from"] = json!("nobody");
    let (s, e) = call_json(&app, "POST", "/campaigns", Some(bad_from)).await;
    assert_eq!((s, e["error"].as_str()), (StatusCode::BAD_REQUEST, Some("InvalidFrom")));

    let mut empty = campaign(1, "example.com");
    empty["recipients"] = json!(["junk"]);
    let (s, e) = call_json(&app, "POST", "/campaigns", Some(empty)).await;
    assert_eq!((s, e["error"].as_str()), (StatusCode::BAD_REQUEST, Some("EmptyCampaign")));

    let mut big = campaign(1, "example.com");
    big["html_body"] = json!("x".repeat(6000));
    let (s, e) = call_json(&app, "POST", "/campaigns", Some(big)).await;
    assert_eq!((s, e["error"].as_str()), (StatusCode::PAYLOAD_TOO_LARGE, Some("PayloadTooLarge")));

    let (s, e) = call_json(&app, "POST", "/campaigns", Some(campaign(101, "example.com"))).await;
    assert_eq!((s, e["error"].as_str()), (StatusCode::TOO_MANY_REQUESTS, Some("QuotaExceeded")));

    for uri in ["/campaigns/cmp-nope", "/campaigns/cmp-nope/bounces", "/traces/cmp-nope", "/nowhere"] {
        let (s, e) = call_json(&app, "GET", uri, None).await;
        assert_eq!((s, e["error"].as_str()), (StatusCode::NOT_FOUND, Some("NotFound")), "{uri}");
    }
}

#[tokio::test]
async fn store_outage_is_503() {
    let (sim, app) = setup(Config::default());
    sim.services().store.set_available(false);
    let (s, e) = call_json(&app, "POST", "/campaigns", Some(campaign(3, "example.com"))).await;
    assert_eq!((s, e["error"].as_str()), (StatusCode::SERVICE_UNAVAILABLE, Some("StoreUnavailable")));
}
