use std::sync::Arc;

use eaas_coordinator::{
    Coordinator, CoordinatorConfig, ErrorCode, GoalMode, NewListing, NewTransaction, PartyReport, TxState,
};
use eaas_core::sim::simulate_session;
use eaas_core::{
    BatteryState, DeviceProfile, EndReason, EnergyAmount, ListingState, Role, SimClock, TerminationGoal,
    TransferParams,
};

fn clock() -> SimClock {
    SimClock::wall(1.0)
}

fn profile(id: &str, cell: &str) -> DeviceProfile {
    DeviceProfile {
        device_id: id.into(),
        display_name: id.to_uppercase(),
        capacity_mwh: 10_000.0,
        microcell_id: cell.into(),
    }
}

fn pct(p: i64) -> EnergyAmount {
    EnergyAmount::new(p).unwrap()
}

fn listing(c: &Coordinator, cell: &str, dev: &str, role: Role, p: i64) -> Result<String, ErrorCode> {
    c.post_listing(
        cell,
        NewListing {
            device_id: dev.into(),
            role,
            amount_percent: pct(p),
        },
    )
    .map(|l| l.listing_id)
    .map_err(|e| e.code)
}

fn tx_req(p: i64, goal: GoalMode) -> NewTransaction {
    NewTransaction {
        consumer_id: "bob".into(),
        provider_id: "alice".into(),
        amount_percent: pct(p),
        goal_mode: goal,
        duration_s: (goal == GoalMode::DurationTarget).then_some(1800.0),
    }
}

fn matched_pair(c: &Coordinator, goal: GoalMode) -> String {
    c.register_device(profile("alice", "m1")).unwrap();
    c.register_device(profile("bob", "m1")).unwrap();
    listing(c, "m1", "alice", Role::Provider, 10).unwrap();
    listing(c, "m1", "bob", Role::Consumer, 10).unwrap();
    c.create_transaction(tx_req(10, goal)).unwrap()
}

fn sim_reports(duration_s: f64, reason: Option<EndReason>) -> (PartyReport, PartyReport) {
    let out = simulate_session(
        BatteryState::at_level(10_000.0, 80.0).unwrap(),
        BatteryState::at_level(10_000.0, 30.0).unwrap(),
        TransferParams::default(),
        TerminationGoal::DurationTarget { duration_s },
    )
    .unwrap();
    let r = reason.unwrap_or(out.totals.end_reason);
    (
        PartyReport::from_log("alice", 10_000.0, out.provider_log, r).unwrap(),
        PartyReport::from_log("bob", 10_000.0, out.consumer_log, r).unwrap(),
    )
}

#[test]
fn device_registration() {
    let c = Coordinator::in_memory(clock());
    assert_eq!(c.register_device(profile("alice", "m1")).unwrap(), "alice");
    assert_eq!(c.register_device(profile("alice", "m1")).unwrap(), "alice");
    let mut other = profile("alice", "m1");
    other.capacity_mwh = 5.0;
    assert_eq!(c.register_device(other).unwrap_err().code, ErrorCode::Conflict);

    let anon = DeviceProfile {
        device_id: String::new(),
        ..profile("x", "m1")
    };
    let id = c.register_device(anon.clone()).unwrap();
    assert!(!id.is_empty());
    assert_eq!(c.register_device(anon).unwrap(), id);

    let bad = DeviceProfile {
        capacity_mwh: 0.0,
        ..profile("y", "m1")
    };
    assert_eq!(c.register_device(bad).unwrap_err().code, ErrorCode::Validation);
}

#[test]
fn listing_rules() {
    let c = Coordinator::in_memory(clock());
    c.register_device(profile("alice", "m1")).unwrap();
    c.register_device(profile("bob", "m1")).unwrap();
    assert!(c.list_open("m1", None).is_empty());
    assert!(c.list_open("nowhere", None).is_empty());

    let a = listing(&c, "m1", "alice", Role::Provider, 10).unwrap();
    assert_eq!(listing(&c, "m1", "alice", Role::Provider, 20), Err(ErrorCode::Busy));
    assert_eq!(listing(&c, "m1", "ghost", Role::Provider, 20), Err(ErrorCode::NotFound));
    assert_eq!(listing(&c, "m2", "bob", Role::Consumer, 20), Err(ErrorCode::Locality));
    let b = listing(&c, "m1", "bob", Role::Consumer, 10).unwrap();

    let all: Vec<_> = c.list_open("m1", None).into_iter().map(|l| l.listing_id).collect();
    assert_eq!(all, vec![b.clone(), a.clone()]);
    let offers = c.list_open("m1", Some(Role::Provider));
    assert_eq!(offers.len(), 1);
    assert_eq!(offers[0].listing_id, a);

    let w = c.withdraw_listing(&a).unwrap();
    assert_eq!(w.state, ListingState::Withdrawn);
    assert_eq!(c.withdraw_listing(&a).unwrap_err().code, ErrorCode::Conflict);
    assert_eq!(c.withdraw_listing("nope").unwrap_err().code, ErrorCode::NotFound);
    // withdrawn frees the device for a new listing
    listing(&c, "m1", "alice", Role::Provider, 20).unwrap();
}

#[test]
fn transaction_rules() {
    let c = Coordinator::in_memory(clock());
    c.register_device(profile("alice", "m1")).unwrap();
    c.register_device(profile("bob", "m1")).unwrap();
    c.register_device(profile("carol", "m2")).unwrap();

    // nothing listed yet
    assert_eq!(
        c.create_transaction(tx_req(10, GoalMode::AmountTarget)).unwrap_err().code,
        ErrorCode::Busy
    );
    listing(&c, "m1", "alice", Role::Provider, 10).unwrap();
    listing(&c, "m1", "bob", Role::Consumer, 20).unwrap();
    assert_eq!(
        c.create_transaction(tx_req(10, GoalMode::AmountTarget)).unwrap_err().code,
        ErrorCode::EqualAmountViolation
    );
    let cross = NewTransaction {
        consumer_id: "carol".into(),
        ..tx_req(10, GoalMode::AmountTarget)
    };
    assert_eq!(c.create_transaction(cross).unwrap_err().code, ErrorCode::Locality);
    let ghost = NewTransaction {
        provider_id: "ghost".into(),
        ..tx_req(10, GoalMode::AmountTarget)
    };
    assert_eq!(c.create_transaction(ghost).unwrap_err().code, ErrorCode::NotFound);
    let no_duration = NewTransaction {
        duration_s: None,
        ..tx_req(10, GoalMode::DurationTarget)
    };
    assert_eq!(c.create_transaction(no_duration).unwrap_err().code, ErrorCode::Validation);
}

#[test]
fn matching_issues_hex_id_and_matches_listings() {
    let c = Coordinator::in_memory(clock());
    let id = matched_pair(&c, GoalMode::AmountTarget);
    assert_eq!(id.len(), 32);
    assert!(id.chars().all(|ch| ch.is_ascii_hexdigit() && !ch.is_ascii_uppercase()));
    assert!(c.list_open("m1", None).is_empty());
    let rec = c.get_transaction(&id).unwrap();
    assert_eq!(rec.state, TxState::Created);
    assert_eq!((rec.provider_id.as_str(), rec.consumer_id.as_str()), ("alice", "bob"));
    assert_eq!(c.get_transaction("feed").unwrap_err().code, ErrorCode::NotFound);
}

#[test]
fn report_flow() {
    let c = Coordinator::in_memory(clock());
    let id = matched_pair(&c, GoalMode::DurationTarget);
    let (p, cons) = sim_reports(1800.0, None);

    let stranger = PartyReport {
        device_id: "mallory".into(),
        ..p.clone()
    };
    assert_eq!(c.submit_report(&id, stranger).unwrap_err().code, ErrorCode::Forbidden);

    let mut broken = cons.clone();
    broken.log.swap(1, 2);
    let err = c.submit_report(&id, broken).unwrap_err();
    assert_eq!(err.code, ErrorCode::Validation);
    assert_eq!(err.message, "log timestamps must be strictly increasing");

    assert_eq!(c.loss_report(&id, 300.0).unwrap_err().code, ErrorCode::NotReconciled);
    assert_eq!(c.submit_report(&id, p.clone()).unwrap(), TxState::AwaitingReports);
    assert_eq!(c.submit_report(&id, p.clone()).unwrap_err().code, ErrorCode::AlreadyReported);
    assert_eq!(c.submit_report(&id, cons.clone()).unwrap(), TxState::Reconciled);
    assert_eq!(c.submit_report(&id, cons).unwrap_err().code, ErrorCode::AlreadyReported);

    let rec = c.get_transaction(&id).unwrap();
    let lr = rec.loss_report.unwrap();
    assert!((lr.loss_mwh - 600.0).abs() < 1e-6);
    assert_eq!(lr.buckets.len(), 6);
    let wide = c.loss_report(&id, 1e6).unwrap();
    assert_eq!(wide.buckets.len(), 1);
    assert!((wide.buckets[0].loss_mwh - 600.0).abs() < 1e-6);
}

#[test]
fn aborted_report_makes_partial() {
    let c = Coordinator::in_memory(clock());
    let id = matched_pair(&c, GoalMode::DurationTarget);
    let (p, cons) = sim_reports(900.0, Some(EndReason::Aborted));
    c.submit_report(&id, cons).unwrap();
    assert_eq!(c.submit_report(&id, p).unwrap(), TxState::ReconciledPartial);
}

#[test]
fn overdelivery_is_flagged_not_rejected() {
    let c = Coordinator::in_memory(clock());
    let id = matched_pair(&c, GoalMode::AmountTarget);
    // 1500 mWh spent against a 1000 mWh (10 %) offer
    let (p, cons) = sim_reports(1800.0, None);
    c.submit_report(&id, p).unwrap();
    assert_eq!(c.submit_report(&id, cons).unwrap(), TxState::Reconciled);
    let flags = c.get_transaction(&id).unwrap().loss_report.unwrap().flags;
    assert_eq!(flags.len(), 1);
    assert!(flags[0].starts_with("expended-exceeds-offer"));
}

#[test]
fn concurrent_matching_has_one_winner() {
    for round in 0..20 {
        let c = Arc::new(Coordinator::in_memory(clock()));
        c.register_device(profile("alice", "m1")).unwrap();
        listing(&c, "m1", "alice", Role::Provider, 10).unwrap();
        let consumers: Vec<String> = (0..16).map(|i| format!("c{round}-{i}")).collect();
        for id in &consumers {
            c.register_device(profile(id, "m1")).unwrap();
            listing(&c, "m1", id, Role::Consumer, 10).unwrap();
        }
        let barrier = Arc::new(std::sync::Barrier::new(consumers.len()));
        let handles: Vec<_> = consumers
            .iter()
            .cloned()
            .map(|id| {
                let (c, barrier) = (c.clone(), barrier.clone());
                std::thread::spawn(move || {
                    barrier.wait();
                    c.create_transaction(NewTransaction {
                        consumer_id: id,
                        ..tx_req(10, GoalMode::AmountTarget)
                    })
                })
            })
            .collect();
        let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 1);
        assert!(results
            .iter()
            .filter_map(|r| r.as_ref().err())
            .all(|e| e.code == ErrorCode::Busy));
    }
}

#[tokio::test]
async fn events_arrive_in_commit_order() {
    let c = Coordinator::in_memory(clock());
    let mut rx = c.subscribe("m1");
    let mut other = c.subscribe("m2");
    let id = matched_pair(&c, GoalMode::DurationTarget);
    let (p, cons) = sim_reports(1800.0, None);
    c.submit_report(&id, p).unwrap();
    c.submit_report(&id, cons).unwrap();

    let mut kinds = vec![];
    let mut last_seq = 0;
    while let Ok(ev) = rx.try_recv() {
        assert!(ev.seq > last_seq);
        last_seq = ev.seq;
        kinds.push(ev.kind);
    }
    assert_eq!(
        kinds,
        [
            "device-registered",
            "device-registered",
            "listing-created",
            "listing-created",
            "listing-matched",
            "listing-matched",
            "transaction-created",
            "report-submitted",
            "transaction-reconciled",
        ]
    );
    assert!(other.try_recv().is_err());
}

#[test]
fn slow_subscriber_is_dropped() {
    let config = CoordinatorConfig {
        event_buffer: 2,
        ..Default::default()
    };
    let c = Coordinator::open(config, clock()).unwrap();
    let mut rx = c.subscribe("m1");
    for i in 0..5 {
        c.register_device(profile(&format!("d{i}"), "m1")).unwrap();
    }
    assert!(matches!(
        rx.try_recv(),
        Err(tokio::sync::broadcast::error::TryRecvError::Lagged(_))
    ));
}

#[test]
fn restart_replays_ledger_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let config = CoordinatorConfig {
        data_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let (id, before, open_before) = {
        let c = Coordinator::open(config.clone(), clock()).unwrap();
        let id = matched_pair(&c, GoalMode::DurationTarget);
        let (p, cons) = sim_reports(1800.0, None);
        c.submit_report(&id, p).unwrap();
        c.submit_report(&id, cons).unwrap();
        c.register_device(profile("dave", "m1")).unwrap();
        listing(&c, "m1", "dave", Role::Provider, 5).unwrap();
        let rec = c.get_transaction(&id).unwrap();
        (id, rec, c.list_open("m1", None))
    };
    let c = Coordinator::open(config, clock()).unwrap();
    let after = c.get_transaction(&id).unwrap();
    assert_eq!(
        serde_json::to_string(&after).unwrap(),
        serde_json::to_string(&before).unwrap()
    );
    assert_eq!(after, before);
    assert_eq!(c.list_open("m1", None), open_before);
    assert_eq!(listing(&c, "m1", "dave", Role::Provider, 5), Err(ErrorCode::Busy));
    // sequence numbers keep growing after replay
    let mut rx = c.subscribe("m1");
    c.register_device(profile("erin", "m1")).unwrap();
    assert!(rx.try_recv().unwrap().seq > 8);
}
