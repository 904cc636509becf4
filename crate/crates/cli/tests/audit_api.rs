use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use chrono::{Duration, TimeZone, Utc};
use curate_cli::server::{router, ErrorBody};
use curate_core::audit::{
    AgreementReport, AuditConfig, AuditStore, AuditTask, ManualClock, OcrBand, RiskClass, RouteClass,
    StratumKey, StratumStatus, TaskPayload, VerdictAck,
};
use curate_core::validate::SupportSpan;
use http_body_util::BodyExt;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tower::ServiceExt;

fn task(i: usize, ocr: OcrBand) -> AuditTask {
    AuditTask {
        task_id: format!("task-{i:05}"),
        item_id: format!("item-{i}"),
        stratum: StratumKey {
            route: RouteClass::Escalate,
            ocr,
            risk: RiskClass::Standard,
        },
        payload: TaskPayload {
            question: "What does vata govern?".into(),
            answer: "Movement.".into(),
            passage: "Vata governs movement in the body.".into(),
            spans: vec![SupportSpan {
                start: 0,
                end: 34,
                text: "Vata governs movement in the body.".into(),
            }],
        },
    }
}

struct Fixture {
    app: Router,
    clock: Arc<ManualClock>,
    store: Arc<AuditStore>,
    _dir: tempfile::TempDir,
}

fn fixture(tasks: &[AuditTask]) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::new(Utc.with_ymd_and_hms(2025, 1, 1, 9, 0, 0).unwrap()));
    let store = Arc::new(AuditStore::open(dir.path(), AuditConfig::default(), clock.clone()).unwrap());
    store.add_tasks(tasks).unwrap();
    Fixture {
        app: router(store.clone()),
        clock,
        store,
        _dir: dir,
    }
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post_verdict(task: &str, body: Value) -> Request<Body> {
    Request::post(format!("/audit/tasks/{task}/verdict"))
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn decode<T: DeserializeOwned>(b: &[u8]) -> T {
    serde_json::from_slice(b).unwrap()
}

#[tokio::test]
async fn lease_then_submit_then_agreement() {
    let f = fixture(&[task(1, OcrBand::Mid)]);
    let (s, body) = call(&f.app, get("/audit/tasks/next?annotator=ann-a")).await;
    assert_eq!(s, StatusCode::OK);
    let leased: Value = decode(&body);
    assert_eq!(leased["task"]["task_id"], "task-00001");
    assert_eq!(leased["lease"]["annotator"], "ann-a");
    assert_eq!(leased["task"]["payload"]["spans"][0]["text"], "Vata governs movement in the body.");

    let (s, body) = call(
        &f.app,
        post_verdict("task-00001", json!({"annotator_id": "ann-a", "label": "Grounded"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let ack: VerdictAck = decode(&body);
    assert!(!ack.replaced);

    let (s, body) = call(&f.app, get("/audit/agreement")).await;
    assert_eq!(s, StatusCode::OK);
    let report: AgreementReport = decode(&body);
    let stratum = &report.strata["escalate/mid/standard"];
    assert_eq!(stratum.verdicts, 1);
    assert!(stratum.not_applicable);
}

#[tokio::test]
async fn two_annotators_reach_done_and_kappa() {
    let f = fixture(&[task(1, OcrBand::Mid), task(2, OcrBand::Mid)]);
    for (ann, labels) in [("a", ["Grounded", "Unsafe"]), ("b", ["Grounded", "Unsafe"])] {
        for label in labels {
            let (s, body) = call(&f.app, get(&format!("/audit/tasks/next?annotator={ann}"))).await;
            assert_eq!(s, StatusCode::OK);
            let leased: Value = decode(&body);
            let id = leased["task"]["task_id"].as_str().unwrap().to_string();
            let (s, _) = call(&f.app, post_verdict(&id, json!({"annotator_id": ann, "label": label}))).await;
            assert_eq!(s, StatusCode::OK);
        }
    }
    let (s, _) = call(&f.app, get("/audit/tasks/next?annotator=a")).await;
    assert_eq!(s, StatusCode::NO_CONTENT);

    let (_, body) = call(&f.app, get("/audit/strata")).await;
    let strata: std::collections::BTreeMap<String, StratumStatus> = decode(&body);
    assert_eq!(strata["escalate/mid/standard"].done, 2);

    let (_, body) = call(&f.app, get("/audit/agreement")).await;
    let report: AgreementReport = decode(&body);
    let s = &report.strata["escalate/mid/standard"];
    assert_eq!(s.pairs.len(), 1);
    assert_eq!(s.pairs[0].kappa, Some(1.0));
    assert_eq!(s.mean_pairwise_kappa, Some(1.0));
}

#[tokio::test]
async fn empty_queue_is_no_content() {
    let f = fixture(&[]);
    let (s, body) = call(&f.app, get("/audit/tasks/next?annotator=a")).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    assert!(body.is_empty());
}

#[tokio::test]
async fn missing_annotator_is_client_error() {
    let f = fixture(&[task(1, OcrBand::High)]);
    let (s, _) = call(&f.app, get("/audit/tasks/next")).await;
    assert!(s.is_client_error());
}

#[tokio::test]
async fn unknown_task_is_not_found() {
    let f = fixture(&[task(1, OcrBand::High)]);
    let (s, body) = call(&f.app, post_verdict("task-99999", json!({"annotator_id": "a", "label": "Grounded"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(decode::<ErrorBody>(&body).error, "unknown_task");
}

#[tokio::test]
async fn invalid_label_is_unprocessable() {
    let f = fixture(&[task(1, OcrBand::High)]);
    call(&f.app, get("/audit/tasks/next?annotator=a")).await;
    let (s, body) = call(&f.app, post_verdict("task-00001", json!({"annotator_id": "a", "label": "Wrong"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(decode::<ErrorBody>(&body).error, "invalid_label");
    assert!(f.store.verdicts().is_empty());
}

#[tokio::test]
async fn expired_lease_conflicts_and_task_reopens() {
    let f = fixture(&[task(1, OcrBand::Low)]);
    let (s, _) = call(&f.app, get("/audit/tasks/next?annotator=a")).await;
    assert_eq!(s, StatusCode::OK);
    // a second annotator cannot take the leased task
    let (s, _) = call(&f.app, get("/audit/tasks/next?annotator=b")).await;
    assert_eq!(s, StatusCode::NO_CONTENT);

    f.clock.advance(Duration::minutes(31));
    let (s, body) = call(&f.app, post_verdict("task-00001", json!({"annotator_id": "a", "label": "Grounded"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(decode::<ErrorBody>(&body).error, "lease_expired");

    let (_, body) = call(&f.app, get("/audit/strata")).await;
    let strata: std::collections::BTreeMap<String, StratumStatus> = decode(&body);
    assert_eq!(strata["escalate/low/standard"].open, 1);

    let (s, body) = call(&f.app, get("/audit/tasks/next?annotator=b")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(decode::<Value>(&body)["lease"]["annotator"], "b");
}

#[tokio::test]
async fn resubmission_replaces_verdict() {
    let f = fixture(&[task(1, OcrBand::High)]);
    call(&f.app, get("/audit/tasks/next?annotator=a")).await;
    call(&f.app, post_verdict("task-00001", json!({"annotator_id": "a", "label": "Grounded"}))).await;
    let (s, body) = call(
        &f.app,
        post_verdict("task-00001", json!({"annotator_id": "a", "label": "OverGeneralization", "note": "too broad"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert!(decode::<VerdictAck>(&body).replaced);
    let v = f.store.verdicts();
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].note.as_deref(), Some("too broad"));
    assert_eq!(f.store.replacements(), 1);
}

#[tokio::test]
async fn concurrent_leases_never_share_a_task() {
    let tasks: Vec<_> = (1..=20).map(|i| task(i, OcrBand::Mid)).collect();
    let f = fixture(&tasks);
    let mut handles = Vec::new();
    for a in 0..20 {
        let app = f.app.clone();
        handles.push(tokio::spawn(async move {
            let (s, body) = call(&app, get(&format!("/audit/tasks/next?annotator=ann{a}"))).await;
            assert_eq!(s, StatusCode::OK);
            decode::<Value>(&body)["task"]["task_id"].as_str().unwrap().to_string()
        }));
    }
    let mut ids = Vec::new();
    for h in handles {
        ids.push(h.await.unwrap());
    }
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 20);
}
