//! Scripted end-to-end runs: a JSON scenario drives a set of agents through
//! timed commands, then the resulting transactions are summarized and
//! checked against expectations.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::net::SocketAddr;
use std::sync::Arc;

use eaas_agent::{accept_tcp, spawn_agent, AgentCommand, AgentConfig, AgentError, AgentHandle, Connector, Mode, Neighborhood};
use eaas_coordinator::{
    Coordinator, CoordinatorApi, CoordinatorConfig, GoalMode, HttpCoordinator, TransactionRecord, TxState,
};
use eaas_core::link::{LinkParams, TcpLinkListener};
use eaas_core::{DeviceProfile, SimClock, TransferParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated seconds per wall second for live runs unless the scenario's
/// params say otherwise.
pub const DEFAULT_LIVE_ACCELERATION: f64 = 60.0;

pub const BUNDLED: [(&str, &str); 3] = [
    ("demo_amount", include_str!("../scenarios/demo_amount.json")),
    ("demo_30min", include_str!("../scenarios/demo_30min.json")),
    ("demo_disconnect", include_str!("../scenarios/demo_disconnect.json")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    let name = name.strip_suffix(".json").unwrap_or(name);
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_microcell")]
    pub microcell: String,
    #[serde(default)]
    pub params: TransferParams,
    #[serde(default)]
    pub link: LinkParams,
    pub devices: Vec<ScenarioDevice>,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub expectations: Vec<Expectation>,
    /// Simulated time allowed for everything to settle after the last step.
    #[serde(default = "default_settle")]
    pub settle_limit_s: f64,
}

fn default_microcell() -> String {
    "m1".into()
}

fn default_settle() -> f64 {
    86_400.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDevice {
    pub device_id: String,
    #[serde(default)]
    pub display_name: Option<String>,
    pub capacity_mwh: f64,
    pub initial_level_percent: f64,
    #[serde(default)]
    pub mode: Mode,
    /// Overrides the scenario-wide params.
    #[serde(default)]
    pub params: Option<TransferParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub at_s: f64,
    pub device: String,
    pub command: AgentCommand,
    /// The command must fail with this code.
    #[serde(default)]
    pub expect_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    /// Index in creation order.
    pub transaction: usize,
    #[serde(default)]
    pub state: Option<TxState>,
    #[serde(default)]
    pub expended_mwh: Option<f64>,
    #[serde(default)]
    pub gained_mwh: Option<f64>,
    #[serde(default)]
    pub loss_mwh: Option<f64>,
    #[serde(default)]
    pub duration_s: Option<f64>,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default = "default_tolerance")]
    pub tolerance_mwh: f64,
}

fn default_tolerance() -> f64 {
    1e-6
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("{0}")]
    Run(String),
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        let mut ids = HashSet::new();
        for d in &self.devices {
            if d.device_id.is_empty() || !ids.insert(d.device_id.as_str()) {
                return bad(format!("device id {:?} is empty or repeated", d.device_id));
            }
            self.config(d).validate().map_err(|e| ScenarioError::Invalid(format!("{}: {e}", d.device_id)))?;
        }
        let mut last = 0.0;
        for (i, step) in self.steps.iter().enumerate() {
            if !(step.at_s >= last && step.at_s.is_finite()) {
                return bad(format!("step {i}: at_s {} goes back in time", step.at_s));
            }
            last = step.at_s;
            if !ids.contains(step.device.as_str()) {
                return bad(format!("step {i}: unknown device {:?}", step.device));
            }
        }
        self.link.validate().map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if !(self.settle_limit_s > 0.0) {
            return bad("settle_limit_s must be positive".into());
        }
        Ok(())
    }

    fn config(&self, d: &ScenarioDevice) -> AgentConfig {
        AgentConfig {
            profile: DeviceProfile {
                device_id: d.device_id.clone(),
                display_name: d.display_name.clone().unwrap_or_else(|| d.device_id.clone()),
                capacity_mwh: d.capacity_mwh,
                microcell_id: self.microcell.clone(),
            },
            initial_level_percent: d.initial_level_percent,
            params: d.params.unwrap_or(self.params),
            mode: d.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TxSummary {
    pub transaction_id: String,
    pub provider_id: String,
    pub consumer_id: String,
    pub goal: GoalMode,
    pub state: TxState,
    pub duration_s: f64,
    pub expended_mwh: f64,
    pub gained_mwh: f64,
    pub loss_mwh: f64,
    pub provider_samples: usize,
    pub consumer_samples: usize,
    pub flags: Vec<String>,
}

impl TxSummary {
    fn of(rec: &TransactionRecord) -> Self {
        let (duration_s, expended_mwh, gained_mwh, loss_mwh, flags) = match &rec.loss_report {
            Some(r) => (r.duration_s, r.provider_expended_mwh, r.consumer_gained_mwh, r.loss_mwh, r.flags.clone()),
            None => (0.0, 0.0, 0.0, 0.0, Vec::new()),
        };
        Self {
            transaction_id: rec.transaction_id.clone(),
            provider_id: rec.provider_id.clone(),
            consumer_id: rec.consumer_id.clone(),
            goal: rec.goal_mode,
            state: rec.state,
            duration_s,
            expended_mwh,
            gained_mwh,
            loss_mwh,
            provider_samples: rec.provider_report.as_ref().map_or(0, |r| r.log.len()),
            consumer_samples: rec.consumer_report.as_ref().map_or(0, |r| r.log.len()),
            flags,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutcome {
    pub name: String,
    pub transactions: Vec<TxSummary>,
    /// Full records, in the same order as `transactions`.
    pub records: Vec<TransactionRecord>,
    pub step_failures: Vec<String>,
}

fn state_name(s: TxState) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn goal_name(g: GoalMode) -> &'static str {
    match g {
        GoalMode::AmountTarget => "amount",
        GoalMode::DurationTarget => "duration",
    }
}

impl ScenarioOutcome {
    /// Per-transaction totals as an aligned table.
    pub fn table(&self) -> String {
        let header = [
            "#", "transaction", "provider", "consumer", "goal", "state", "duration_s", "expended_mwh", "gained_mwh",
            "loss_mwh", "samples", "flags",
        ];
        let rows: Vec<Vec<String>> = self
            .transactions
            .iter()
            .enumerate()
            .map(|(i, t)| {
                vec![
                    i.to_string(),
                    t.transaction_id.clone(),
                    t.provider_id.clone(),
                    t.consumer_id.clone(),
                    goal_name(t.goal).into(),
                    state_name(t.state),
                    format!("{:.3}", t.duration_s),
                    format!("{:.6}", t.expended_mwh),
                    format!("{:.6}", t.gained_mwh),
                    format!("{:.6}", t.loss_mwh),
                    format!("{}/{}", t.provider_samples, t.consumer_samples),
                    if t.flags.is_empty() { "-".into() } else { t.flags.join(",") },
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let mut out = format!("scenario {}\n", self.name);
        let mut line = |cells: Vec<&str>| {
            let mut l = String::new();
            for (c, cell) in cells.iter().enumerate() {
                if c > 0 {
                    l.push_str("  ");
                }
                // numbers right-aligned, text left-aligned
                if (6..=9).contains(&c) {
                    let _ = write!(l, "{cell:>w$}", w = widths[c]);
                } else {
                    let _ = write!(l, "{cell:<w$}", w = widths[c]);
                }
            }
            out.push_str(l.trim_end());
            out.push('\n');
        };
        line(header.to_vec());
        for r in &rows {
            line(r.iter().map(String::as_str).collect());
        }
        if self.transactions.is_empty() {
            out.push_str("(no transactions)\n");
        }
        out
    }

    /// Step failures and expectation misses, one line each.
    pub fn check(&self, expectations: &[Expectation]) -> Vec<String> {
        let mut misses = self.step_failures.clone();
        for e in expectations {
            let Some(t) = self.transactions.get(e.transaction) else {
                misses.push(format!(
                    "transaction {}: missing ({} recorded)",
                    e.transaction,
                    self.transactions.len()
                ));
                continue;
            };
            let tag = format!("transaction {}", e.transaction);
            if let Some(s) = e.state {
                if s != t.state {
                    misses.push(format!("{tag} state: expected {}, got {}", state_name(s), state_name(t.state)));
                }
            }
            let numbers = [
                ("expended_mwh", e.expended_mwh, t.expended_mwh, e.tolerance_mwh),
                ("gained_mwh", e.gained_mwh, t.gained_mwh, e.tolerance_mwh),
                ("loss_mwh", e.loss_mwh, t.loss_mwh, e.tolerance_mwh),
                ("duration_s", e.duration_s, t.duration_s, 1e-6),
            ];
            for (field, want, got, tol) in numbers {
                if let Some(want) = want {
                    let delta = got - want;
                    if !(delta.abs() <= tol) {
                        misses.push(format!(
                            "{tag} {field}: expected {want:.6}, got {got:.6} (delta {delta:+.6}, tolerance {tol:e})"
                        ));
                    }
                }
            }
            if let Some(n) = e.samples {
                if t.provider_samples != n || t.consumer_samples != n {
                    misses.push(format!(
                        "{tag} samples: expected {n}, got {}/{}",
                        t.provider_samples, t.consumer_samples
                    ));
                }
            }
        }
        misses
    }
}

fn error_matches(err: &AgentError, code: &str) -> bool {
    if err.code() == code {
        return true;
    }
    match err {
        AgentError::Coordinator(e) => serde_json::to_value(e.code).ok().and_then(|v| v.as_str().map(|s| s == code)) == Some(true),
        _ => false,
    }
}

/// Runs the steps against live agents, waits for every session to settle
/// and collects the transactions.
async fn drive(
    scn: &Scenario,
    agents: &BTreeMap<String, AgentHandle>,
    coord: &dyn CoordinatorApi,
    clock: SimClock,
) -> Result<ScenarioOutcome, ScenarioError> {
    let t0 = clock.now_s();
    let mut step_failures = Vec::new();
    for (i, step) in scn.steps.iter().enumerate() {
        clock.sleep_until(t0 + step.at_s).await;
        let agent = &agents[&step.device];
        let label = format!("step {i} ({} at {} s)", step.device, step.at_s);
        match (agent.command(step.command.clone()).await, &step.expect_error) {
            (Ok(()), None) => {}
            (Err(e), Some(code)) if error_matches(&e, code) => {}
            (Ok(()), Some(code)) => step_failures.push(format!("{label}: expected error {code}, command succeeded")),
            (Err(e), _) => step_failures.push(format!("{label}: {e}")),
        }
    }

    let settle = async {
        loop {
            for a in agents.values() {
                a.wait_for(|s| !s.busy()).await;
            }
            // Sessions may have started while we waited on another agent.
            if agents.values().all(|a| !a.status().busy()) {
                break;
            }
        }
    };
    tokio::time::timeout(clock.wall_duration(scn.settle_limit_s), settle)
        .await
        .map_err(|_| ScenarioError::Run(format!("sessions still running after {} s", scn.settle_limit_s)))?;

    let mut ids: Vec<String> = Vec::new();
    for a in agents.values() {
        for id in a.status().transaction_ids {
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
    }
    let mut records = Vec::new();
    for id in &ids {
        records.push(coord.get_transaction(id).await.map_err(|e| ScenarioError::Run(e.to_string()))?);
    }
    records.sort_by(|a, b| {
        a.created_at_s
            .total_cmp(&b.created_at_s)
            .then_with(|| a.transaction_id.cmp(&b.transaction_id))
    });
    for a in agents.values() {
        let _ = a.command(AgentCommand::Shutdown).await;
    }
    Ok(ScenarioOutcome {
        name: scn.name.clone(),
        transactions: records.iter().map(TxSummary::of).collect(),
        records,
        step_failures,
    })
}

/// Coordinator and agents in this process on a virtual clock with
/// in-memory links. Deterministic for a given scenario.
pub fn run_embedded(scn: &Scenario) -> Result<ScenarioOutcome, ScenarioError> {
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .start_paused(true)
        .build()
        .map_err(|e| ScenarioError::Run(e.to_string()))?;
    rt.block_on(async {
        let clock = SimClock::virtual_clock();
        let config = CoordinatorConfig {
            seed: Some(scn.seed),
            ..Default::default()
        };
        let coord = Arc::new(Coordinator::open(config, clock).map_err(|e| ScenarioError::Run(e.to_string()))?);
        let hood = Neighborhood::new(scn.link, clock);
        let mut agents = BTreeMap::new();
        for d in &scn.devices {
            let h = hood.clone();
            let agent = spawn_agent(
                scn.config(d),
                Arc::new(Arc::clone(&coord)),
                Connector::Memory(hood.clone()),
                move |id| h.join(id),
                clock,
            )
            .await
            .map_err(|e| ScenarioError::Run(format!("{}: {e}", d.device_id)))?;
            agents.insert(d.device_id.clone(), agent);
        }
        drive(scn, &agents, &coord, clock).await
    })
}

/// Agents in this process talking TCP to each other and HTTP to a running
/// coordinator, paced against accelerated wall time.
pub async fn run_live(scn: &Scenario, coordinator_url: &str) -> Result<ScenarioOutcome, ScenarioError> {
    let accel = scn.params.time_acceleration.unwrap_or(DEFAULT_LIVE_ACCELERATION);
    let clock = SimClock::wall(accel);
    let api = Arc::new(HttpCoordinator::new(coordinator_url));
    let mut listeners = Vec::new();
    let mut peers: std::collections::HashMap<String, SocketAddr> = Default::default();
    for d in &scn.devices {
        let l = TcpLinkListener::bind("127.0.0.1:0".parse().expect("valid address"), scn.link, clock)
            .await
            .map_err(|e| ScenarioError::Run(e.to_string()))?;
        peers.insert(d.device_id.clone(), l.local_addr().map_err(|e| ScenarioError::Run(e.to_string()))?);
        listeners.push(l);
    }
    let mut agents = BTreeMap::new();
    for (d, listener) in scn.devices.iter().zip(listeners) {
        let connector = Connector::Tcp {
            peers: peers.clone(),
            params: scn.link,
            clock,
        };
        let coord: Arc<dyn CoordinatorApi> = api.clone();
        let agent = spawn_agent(scn.config(d), coord, connector, move |_| accept_tcp(listener), clock)
            .await
            .map_err(|e| ScenarioError::Run(format!("{}: {e}", d.device_id)))?;
        agents.insert(d.device_id.clone(), agent);
    }
    drive(scn, &agents, api.as_ref(), clock).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_parse() {
        for (name, text) in BUNDLED {
            let s = Scenario::parse(text).unwrap();
            assert_eq!(s.name, name);
        }
        assert!(bundled("demo_30min.json").is_some());
        assert!(bundled("nope").is_none());
    }

    #[test]
    fn rejects_bad_scripts() {
        let base = serde_json::json!({
            "name": "x",
            "devices": [{"device_id": "a", "capacity_mwh": 1000.0, "initial_level_percent": 50.0}],
            "steps": [
                {"at_s": 5.0, "device": "a", "command": {"type": "offer", "amount": 10}},
                {"at_s": 1.0, "device": "a", "command": {"type": "abort"}}
            ]
        });
        assert!(matches!(Scenario::parse(&base.to_string()), Err(ScenarioError::Invalid(_))));
        let mut unknown = base.clone();
        unknown["steps"] = serde_json::json!([{"at_s": 0.0, "device": "z", "command": {"type": "abort"}}]);
        assert!(matches!(Scenario::parse(&unknown.to_string()), Err(ScenarioError::Invalid(_))));
        assert!(matches!(Scenario::parse("{"), Err(ScenarioError::Parse(_))));
        assert!(matches!(
            Scenario::parse(r#"{"name":"x","devices":[],"steps":[],"colour":1}"#),
            Err(ScenarioError::Parse(_))
        ));
    }

    #[test]
    fn expectation_deltas_are_listed() {
        let outcome = ScenarioOutcome {
            name: "x".into(),
            transactions: vec![TxSummary {
                transaction_id: "t".into(),
                provider_id: "a".into(),
                consumer_id: "b".into(),
                goal: GoalMode::DurationTarget,
                state: TxState::ReconciledPartial,
                duration_s: 600.0,
                expended_mwh: 500.0,
                gained_mwh: 300.0,
                loss_mwh: 200.0,
                provider_samples: 121,
                consumer_samples: 121,
                flags: vec![],
            }],
            records: vec![],
            step_failures: vec![],
        };
        let exp = Expectation {
            transaction: 0,
            state: Some(TxState::ReconciledPartial),
            expended_mwh: Some(750.0),
            gained_mwh: Some(300.0),
            loss_mwh: None,
            duration_s: None,
            samples: Some(121),
            tolerance_mwh: 1e-6,
        };
        let misses = outcome.check(&[exp.clone()]);
        assert_eq!(misses.len(), 1);
        assert!(misses[0].contains("expended_mwh: expected 750.000000, got 500.000000 (delta -250.000000"));
        let missing = outcome.check(&[Expectation { transaction: 3, ..exp }]);
        assert!(missing[0].contains("missing"));
        let table = outcome.table();
        assert!(table.contains("reconciled_partial"));
        assert!(table.contains("121/121"));
    }
}
