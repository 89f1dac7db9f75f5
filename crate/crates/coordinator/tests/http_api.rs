use std::sync::Arc;
use std::time::Duration;

use eaas_coordinator::{
    spawn_server, Coordinator, CoordinatorApi, ErrorCode, GoalMode, HttpCoordinator, NewTransaction, PartyReport,
    TxState,
};
use eaas_core::sim::simulate_session;
use eaas_core::{BatteryState, DeviceProfile, EnergyAmount, Role, SimClock, TerminationGoal, TransferParams};

async fn start() -> (String, HttpCoordinator) {
    let coord = Arc::new(Coordinator::in_memory(SimClock::wall(1.0)));
    let addr = spawn_server("127.0.0.1:0".parse().unwrap(), coord).await.unwrap();
    let base = format!("http://{addr}");
    (base.clone(), HttpCoordinator::new(&base))
}

fn profile(id: &str) -> DeviceProfile {
    DeviceProfile {
        device_id: id.into(),
        display_name: id.into(),
        capacity_mwh: 10_000.0,
        microcell_id: "m1".into(),
    }
}

fn pct(p: i64) -> EnergyAmount {
    EnergyAmount::new(p).unwrap()
}

async fn status_of(resp: reqwest::Response) -> (u16, serde_json::Value) {
    let status = resp.status().as_u16();
    (status, resp.json().await.unwrap())
}

#[tokio::test]
async fn full_flow_over_http() {
    let (_, api) = start().await;
    assert_eq!(api.register_device(profile("alice")).await.unwrap(), "alice");
    api.register_device(profile("bob")).await.unwrap();
    api.post_listing("m1", "alice", Role::Provider, pct(10)).await.unwrap();
    api.post_listing("m1", "bob", Role::Consumer, pct(10)).await.unwrap();
    assert_eq!(api.list_open("m1", Some(Role::Provider)).await.unwrap().len(), 1);
    assert_eq!(api.list_open("m1", None).await.unwrap().len(), 2);

    let id = api
        .create_transaction(NewTransaction {
            consumer_id: "bob".into(),
            provider_id: "alice".into(),
            amount_percent: pct(10),
            goal_mode: GoalMode::DurationTarget,
            duration_s: Some(1800.0),
        })
        .await
        .unwrap();
    let out = simulate_session(
        BatteryState::at_level(10_000.0, 80.0).unwrap(),
        BatteryState::at_level(10_000.0, 30.0).unwrap(),
        TransferParams::default(),
        TerminationGoal::DurationTarget { duration_s: 1800.0 },
    )
    .unwrap();
    let r = out.totals.end_reason;
    let p = PartyReport::from_log("alice", 10_000.0, out.provider_log, r).unwrap();
    let c = PartyReport::from_log("bob", 10_000.0, out.consumer_log, r).unwrap();
    assert_eq!(
        api.loss_report(&id, 300.0).await.unwrap_err().code,
        ErrorCode::NotReconciled
    );
    assert_eq!(api.submit_report(&id, p.clone()).await.unwrap(), TxState::AwaitingReports);
    assert_eq!(api.submit_report(&id, c).await.unwrap(), TxState::Reconciled);
    assert_eq!(api.submit_report(&id, p).await.unwrap_err().code, ErrorCode::AlreadyReported);

    let rec = api.get_transaction(&id).await.unwrap();
    assert_eq!(rec.state, TxState::Reconciled);
    let lr = api.loss_report(&id, 300.0).await.unwrap();
    assert_eq!(lr.buckets.len(), 6);
    for b in &lr.buckets {
        assert!((b.loss_mwh - 100.0).abs() < 1e-6);
    }
    // the record travels over HTTP without losing a bit
    assert_eq!(rec, api.get_transaction(&id).await.unwrap());
    let text = api.get_transaction_text(&id).await.unwrap();
    assert_eq!(text, serde_json::to_string(&rec).unwrap());
}

#[tokio::test]
async fn error_bodies_and_statuses() {
    let (base, api) = start().await;
    let http = reqwest::Client::new();
    api.register_device(profile("alice")).await.unwrap();
    api.post_listing("m1", "alice", Role::Provider, pct(10)).await.unwrap();

    let (s, body) = status_of(
        http.post(format!("{base}/v1/microcells/m1/listings"))
            .header("content-type", "application/json")
            .body(r#"{"device_id":"alice","role":"provider","amount_percent":20}"#)
            .send()
            .await
            .unwrap(),
    )
    .await;
    assert_eq!(s, 409);
    assert_eq!(body["code"], "busy");
    assert!(body["message"].is_string() && body["detail"].is_string());

    let (s, body) = status_of(
        http.post(format!("{base}/v1/microcells/m1/listings"))
            .body(r#"{"device_id":"alice","role":"provider","amount_percent":0}"#)
            .send()
            .await
            .unwrap(),
    )
    .await;
    assert_eq!((s, body["code"].as_str()), (400, Some("validation")));

    let (s, body) = status_of(http.get(format!("{base}/v1/transactions/nope")).send().await.unwrap()).await;
    assert_eq!((s, body["code"].as_str()), (404, Some("not-found")));

    let (s, _) = status_of(
        http.get(format!("{base}/v1/microcells/m1/listings?role=wizard"))
            .send()
            .await
            .unwrap(),
    )
    .await;
    assert_eq!(s, 400);

    let (s, body) = status_of(http.get(format!("{base}/v1/microcells/empty/listings")).send().await.unwrap()).await;
    assert_eq!((s, body), (200, serde_json::json!([])));
}

#[tokio::test]
async fn forbidden_report() {
    let (base, api) = start().await;
    api.register_device(profile("alice")).await.unwrap();
    api.register_device(profile("bob")).await.unwrap();
    api.post_listing("m1", "alice", Role::Provider, pct(10)).await.unwrap();
    api.post_listing("m1", "bob", Role::Consumer, pct(10)).await.unwrap();
    let id = api
        .create_transaction(NewTransaction {
            consumer_id: "bob".into(),
            provider_id: "alice".into(),
            amount_percent: pct(10),
            goal_mode: GoalMode::AmountTarget,
            duration_s: None,
        })
        .await
        .unwrap();
    let body = r#"{"device_id":"eve","log":[{"t_s":0.0,"level_percent":10.0,"charge_mwh":1000.0}],
        "final_battery":{"capacity_mwh":10000.0,"charge_mwh":1000.0},"end_reason":"aborted"}"#;
    let resp = reqwest::Client::new()
        .put(format!("{base}/v1/transactions/{id}/reports"))
        .body(body)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status().as_u16(), 403);
}

#[tokio::test]
async fn event_stream_delivers_listing_events() {
    let (base, api) = start().await;
    let mut resp = reqwest::Client::new()
        .get(format!("{base}/v1/microcells/m1/events"))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    assert!(resp.headers()["content-type"]
        .to_str()
        .unwrap()
        .starts_with("text/event-stream"));
    api.register_device(profile("alice")).await.unwrap();
    api.post_listing("m1", "alice", Role::Provider, pct(10)).await.unwrap();

    let mut text = String::new();
    while !text.contains("listing-created") {
        let chunk = tokio::time::timeout(Duration::from_secs(5), resp.chunk())
            .await
            .expect("event within 5 s")
            .unwrap()
            .expect("stream open");
        text.push_str(&String::from_utf8_lossy(&chunk));
    }
    let data: Vec<&str> = text.lines().filter_map(|l| l.strip_prefix("data: ")).collect();
    assert_eq!(data.len(), 2);
    let ev: serde_json::Value = serde_json::from_str(data[1]).unwrap();
    assert_eq!(ev["kind"], "listing-created");
    assert_eq!(ev["data"]["device_id"], "alice");
    assert!(text.contains("event: device-registered"));
}

#[tokio::test]
async fn unreachable_coordinator() {
    let api = HttpCoordinator::new("http://127.0.0.1:9");
    let err = api.register_device(profile("alice")).await.unwrap_err();
    assert_eq!(err.code, ErrorCode::Unavailable);
}
