use std::sync::Arc;
use std::time::Duration;

use eaas_agent::{control, spawn_agent, AgentConfig, Connector, Mode, Neighborhood};
use eaas_coordinator::Coordinator;
use eaas_core::link::LinkParams;
use eaas_core::{DeviceProfile, SimClock, TransferParams};

#[tokio::test]
async fn control_api_round_trip() {
    let clock = SimClock::wall(1.0);
    let coord = Arc::new(Coordinator::in_memory(clock));
    let hood = Neighborhood::new(LinkParams::default(), clock);
    let config = AgentConfig {
        profile: DeviceProfile {
            device_id: "alice".into(),
            display_name: "Alice".into(),
            capacity_mwh: 10_000.0,
            microcell_id: "m1".into(),
        },
        initial_level_percent: 80.0,
        params: TransferParams::default(),
        mode: Mode::Interactive,
    };
    let h2 = hood.clone();
    let agent = spawn_agent(config, Arc::new(coord), Connector::Memory(hood), move |id| h2.join(id), clock)
        .await
        .unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(control::serve(listener, Arc::new(agent)));
    let http = reqwest::Client::new();

    let resp = http
        .post(format!("{base}/control/command"))
        .body(r#"{"type":"accept_pending"}"#)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status().as_u16(), 409);
    let body: serde_json::Value = resp.json().await.unwrap();
    assert_eq!(body["code"], "invalid-in-state");

    let resp = http
        .post(format!("{base}/control/command"))
        .body(r#"{"type":"dance"}"#)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status().as_u16(), 400);

    let mut events = http.get(format!("{base}/events")).send().await.unwrap();
    let resp = http
        .post(format!("{base}/control/command"))
        .body(r#"{"type":"offer","amount":10}"#)
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status().as_u16(), 200);

    let status: serde_json::Value = http.get(format!("{base}/status")).send().await.unwrap().json().await.unwrap();
    assert_eq!(status["device_id"], "alice");
    assert_eq!(status["protocol_state"], "idle");
    assert_eq!(status["offer"]["amount"], 10);

    let mut text = String::new();
    while text.matches("event: status").count() < 2 {
        let chunk = tokio::time::timeout(Duration::from_secs(5), events.chunk())
            .await
            .expect("event within 5 s")
            .unwrap()
            .expect("stream open");
        text.push_str(&String::from_utf8_lossy(&chunk));
    }
    assert!(text.contains(r#""amount":10"#));
}
