use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use seqgraph::{GsdBoundary, SpendingFunction};
use serde_json::{json, Value};
use std::sync::Arc;
use std::time::Duration;
use tower::ServiceExt;

use seqgraph_service::{router, AppState};

fn design() -> Value {
    json!({
        "alpha": 0.025,
        "hypotheses": ["H1", "H2", "H3", "H4"],
        "initial_weights": [1.0, 0.0, 0.0, 0.0],
        "transition": [[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 0.0]],
        "exhaustion_weights": [0.0, 0.0, 0.0, 1.0],
        "stages": 2,
        "spending": [{"kind": "pocock_like"}, {"kind": "pocock_like"}, {"kind": "pocock_like"}, {"kind": "pocock_like"}],
        "information_fractions": [0.5, 1.0],
        "q": 0.5
    })
}

/// Stage data whose repeated p-values are the given numbers.
fn stage_body(k: usize, p: [f64; 4]) -> Value {
    let b = GsdBoundary::new(SpendingFunction::PocockLike, vec![0.5, 1.0]).unwrap();
    let se = 0.2;
    let obs: Vec<Value> = p
        .iter()
        .enumerate()
        .map(|(j, &pj)| {
            let z = b.z_boundaries(pj).unwrap()[k - 1];
            json!({
                "hypothesis": format!("H{}", j + 1),
                "stage": k,
                "estimate": z * se,
                "std_error": se,
                "info_fraction": k as f64 / 2.0,
            })
        })
        .collect();
    json!({ "observations": obs })
}

const TABLE1: [[f64; 4]; 2] = [[0.02, 0.04, 0.02, 0.02], [0.03, 0.02, 0.03, 0.01]];

struct Harness {
    dir: tempfile::TempDir,
    app: Router,
}

impl Harness {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let app = app_for(dir.path());
        Harness { dir, app }
    }

    fn restart(&mut self) {
        self.app = app_for(self.dir.path());
    }

    async fn call(&self, method: &str, uri: &str, body: Option<Value>, key: Option<&str>) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(k) = key {
            req = req.header("Idempotency-Key", k);
        }
        let body = match body {
            Some(v) => {
                req = req.header("content-type", "application/json");
                Body::from(v.to_string())
            }
            None => Body::empty(),
        };
        let resp = self.app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
        let status = resp.status();
        let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
        let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
        (status, v)
    }

    async fn create(&self) -> String {
        let (s, v) = self.call("POST", "/sessions", Some(json!({ "design": design() })), None).await;
        assert_eq!(s, StatusCode::CREATED, "{v}");
        v["session_id"].as_str().unwrap().to_string()
    }
}

fn app_for(dir: &std::path::Path) -> Router {
    let state: Arc<AppState> = AppState::open(dir.to_path_buf(), Duration::from_secs(60)).unwrap();
    router(state)
}

#[tokio::test]
async fn create_and_read_session() {
    let h = Harness::new();
    let id = h.create().await;
    let (s, v) = h.call("GET", &format!("/sessions/{id}"), None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["hypotheses"], json!(["H1", "H2", "H3", "H4"]));
    assert_eq!(v["state"]["stage"], 0);
}

#[tokio::test]
async fn invalid_designs_are_unprocessable() {
    let h = Harness::new();
    let mut d = design();
    d["initial_weights"] = json!([0.6, 0.6, 0.0, 0.0]);
    let (s, v) = h.call("POST", "/sessions", Some(json!({ "design": d })), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    assert!(v["error"].is_string());

    let (s, _) = h.call("POST", "/sessions", None, None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = h.call("POST", "/sessions", Some(json!({ "design": 3 })), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn idempotency_key_returns_same_session() {
    let h = Harness::new();
    let body = json!({ "design": design() });
    let (s1, a) = h.call("POST", "/sessions", Some(body.clone()), Some("abc")).await;
    let (s2, b) = h.call("POST", "/sessions", Some(body.clone()), Some("abc")).await;
    let (s3, c) = h.call("POST", "/sessions", Some(body), Some("other")).await;
    assert_eq!((s1, s2, s3), (StatusCode::CREATED, StatusCode::OK, StatusCode::CREATED));
    assert_eq!(a["session_id"], b["session_id"]);
    assert_ne!(a["session_id"], c["session_id"]);
}

#[tokio::test]
async fn unknown_session_is_not_found() {
    let h = Harness::new();
    let (s, _) = h.call("GET", "/sessions/nope", None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = h.call("POST", "/sessions/nope/stages", Some(stage_body(1, TABLE1[0])), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn stage_one_of_worked_example_rejects_first_hypothesis() {
    let h = Harness::new();
    let id = h.create().await;
    let (s, r) = h.call("POST", &format!("/sessions/{id}/stages"), Some(stage_body(1, TABLE1[0])), None).await;
    assert_eq!(s, StatusCode::OK, "{r}");
    assert_eq!(r["stage"], 1);
    assert_eq!(r["rejected_r"], json!([1]));
    assert_eq!(r["rejected_s"], json!([1]));

    for lambda in ["r", "s"] {
        let (s, b) = h
            .call("GET", &format!("/sessions/{id}/bounds?kind=informative&lambda={lambda}"), None, None)
            .await;
        assert_eq!(s, StatusCode::OK, "{b}");
        assert_eq!(b["stage"], 1);
        assert_eq!(b["rejected"], json!([1]), "{b}");
        assert_eq!(b["lower"].as_array().unwrap().len(), 4);
        assert!(b["converged"].as_bool().unwrap());
        let l1 = b["lower"][0].as_f64().unwrap();
        assert!(l1 >= 0.0);
    }
    let (s, b) = h.call("GET", &format!("/sessions/{id}/bounds?stage=1&lambda=r"), None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b["kind"], "compatible");
    assert!(b["lower"][0].as_f64().unwrap() >= 0.0);
    assert!(b["lower"][1].as_f64().unwrap() < 0.0);

    let (s, _) = h.call("GET", &format!("/sessions/{id}/bounds?stage=2"), None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = h.call("GET", &format!("/sessions/{id}/bounds?lambda=x"), None, None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn out_of_order_and_stopped_submissions_conflict() {
    let h = Harness::new();
    let id = h.create().await;
    let stages = format!("/sessions/{id}/stages");
    let decisions = format!("/sessions/{id}/decisions");

    let (s, _) = h.call("POST", &stages, Some(stage_body(2, TABLE1[1])), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = h.call("POST", &decisions, Some(json!({ "stop": [] })), None).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, _) = h.call("POST", &stages, Some(stage_body(1, TABLE1[0])), None).await;
    assert_eq!(s, StatusCode::OK);
    // Decisions for stage 1 are still open.
    let (s, _) = h.call("POST", &stages, Some(stage_body(2, TABLE1[1])), None).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, d) = h.call("POST", &decisions, Some(json!({ "stop": ["H1"] })), None).await;
    assert_eq!(s, StatusCode::OK, "{d}");
    assert_eq!(d["stopped"], json!([1]));
    assert_eq!(d["collecting"], json!([false, true, true, true]));
    assert_eq!(d["next_stage"], 2);

    // H1 no longer collects data.
    let (s, v) = h.call("POST", &stages, Some(stage_body(2, TABLE1[1])), None).await;
    assert_eq!(s, StatusCode::CONFLICT, "{v}");

    let mut body = stage_body(2, TABLE1[1]);
    body["observations"].as_array_mut().unwrap().remove(0);
    let (s, r) = h.call("POST", &stages, Some(body), None).await;
    assert_eq!(s, StatusCode::OK, "{r}");
    assert_eq!(r["rejected_r"], json!([1, 2]));
    let (s, d) = h.call("POST", &decisions, None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(d["finished"], true);

    let (s, _) = h.call("POST", &stages, Some(stage_body(2, TABLE1[1])), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn malformed_stage_bodies_are_unprocessable() {
    let h = Harness::new();
    let id = h.create().await;
    let stages = format!("/sessions/{id}/stages");
    let (s, _) = h.call("POST", &stages, None, None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = h.call("POST", &stages, Some(json!({ "observations": [] })), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let mut body = stage_body(1, TABLE1[0]);
    body["observations"][0]["hypothesis"] = json!("H9");
    let (s, _) = h.call("POST", &stages, Some(body), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let mut body = stage_body(1, TABLE1[0]);
    body["observations"][0]["std_error"] = json!(-1.0);
    let (s, _) = h.call("POST", &stages, Some(body), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    // Failed submissions leave no trace.
    let (s, v) = h.call("GET", &format!("/sessions/{id}"), None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["state"]["stage"], 0);
    assert_eq!(v["reports"], json!([]));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_submissions_do_not_both_succeed() {
    let h = Harness::new();
    let id = h.create().await;
    let uri = format!("/sessions/{id}/stages");
    let (a, b) = tokio::join!(
        h.call("POST", &uri, Some(stage_body(1, TABLE1[0])), None),
        h.call("POST", &uri, Some(stage_body(1, TABLE1[0])), None)
    );
    let mut codes = [a.0, b.0];
    codes.sort();
    assert_eq!(codes, [StatusCode::OK, StatusCode::CONFLICT]);
    let (_, v) = h.call("GET", &format!("/sessions/{id}"), None, None).await;
    assert_eq!(v["reports"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn sessions_survive_restart() {
    let mut h = Harness::new();
    let id = h.create().await;
    let (s, _) = h
        .call("POST", "/sessions", Some(json!({ "design": design() })), Some("k1"))
        .await;
    assert_eq!(s, StatusCode::CREATED);
    let (_, first) = h.call("POST", &format!("/sessions/{id}/stages"), Some(stage_body(1, TABLE1[0])), None).await;
    let (s, _) = h.call("POST", &format!("/sessions/{id}/decisions"), Some(json!({ "stop": [] })), None).await;
    assert_eq!(s, StatusCode::OK);
    let (_, before) = h.call("GET", &format!("/sessions/{id}"), None, None).await;

    h.restart();
    let (s, after) = h.call("GET", &format!("/sessions/{id}"), None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(before, after);
    assert_eq!(after["reports"][0], first);
    let (s, _) = h
        .call("POST", "/sessions", Some(json!({ "design": design() })), Some("k1"))
        .await;
    assert_eq!(s, StatusCode::OK);

    let (s, r) = h.call("POST", &format!("/sessions/{id}/stages"), Some(stage_body(2, TABLE1[1])), None).await;
    assert_eq!(s, StatusCode::OK, "{r}");
    assert_eq!(r["stage"], 2);
}
