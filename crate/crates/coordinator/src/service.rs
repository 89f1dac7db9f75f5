//! The coordinator proper: registry, listings and the transaction ledger
//! behind one lock, so every state change is linearizable and published in
//! commit order.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Mutex;

use eaas_core::{DeviceProfile, EndReason, EnergyListing, ListingState, Role, SimClock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use tokio::sync::broadcast;

use crate::error::{CoordError, ErrorCode};
use crate::ledger::{Entity, Ledger, LedgerLine};
use crate::model::{
    CellEvent, GoalMode, LossReport, NewListing, NewTransaction, PartyReport, TransactionRecord, TxState,
};
use crate::reconcile::{reconcile, validate_report, DEFAULT_BUCKET_S};

const FLAG_TOLERANCE_MWH: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct CoordinatorConfig {
    /// Where `ledger.jsonl` lives; `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    /// Seeds id generation for reproducible runs.
    pub seed: Option<u64>,
    /// Per-subscriber event backlog before a slow subscriber is dropped.
    pub event_buffer: usize,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            seed: None,
            event_buffer: 1024,
        }
    }
}

struct State {
    devices: BTreeMap<String, DeviceProfile>,
    /// Creation order; `listing_index` maps ids into it.
    listings: Vec<EnergyListing>,
    listing_index: HashMap<String, usize>,
    transactions: BTreeMap<String, TransactionRecord>,
    ledger: Option<Ledger>,
    rng: ChaCha20Rng,
    seq: u64,
    cells: HashMap<String, broadcast::Sender<CellEvent>>,
}

pub struct Coordinator {
    state: Mutex<State>,
    clock: SimClock,
    event_buffer: usize,
}

impl std::fmt::Debug for Coordinator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Coordinator").finish_non_exhaustive()
    }
}

fn io_err(e: std::io::Error) -> CoordError {
    CoordError::internal("ledger write failed").with_detail(e.to_string())
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("record serializes")
}

impl State {
    fn fresh_id(&mut self, prefix: &str, bits128: bool, taken: impl Fn(&State, &str) -> bool) -> String {
        loop {
            let id = if bits128 {
                format!("{prefix}{:032x}", self.rng.random::<u128>())
            } else {
                format!("{prefix}{:016x}", self.rng.random::<u64>())
            };
            if !taken(self, &id) {
                return id;
            }
        }
    }

    fn persist(&mut self, entity: Entity) -> Result<u64, CoordError> {
        let seq = self.seq + 1;
        if let Some(ledger) = self.ledger.as_mut() {
            ledger.append(&LedgerLine { seq, entity }).map_err(io_err)?;
        }
        self.seq = seq;
        Ok(seq)
    }

    fn publish(&mut self, cell: &str, seq: u64, kind: &str, data: serde_json::Value) {
        if let Some(tx) = self.cells.get(cell) {
            if tx.send(CellEvent {
                seq,
                kind: kind.into(),
                data,
            })
            .is_err()
            {
                self.cells.remove(cell);
            }
        }
    }

    fn cell_of_device(&self, device_id: &str) -> Option<String> {
        self.devices.get(device_id).map(|d| d.microcell_id.clone())
    }

    fn open_listing_of(&self, device_id: &str) -> Option<usize> {
        self.listings
            .iter()
            .position(|l| l.device_id == device_id && l.state == ListingState::Open)
    }

    fn apply(&mut self, entity: Entity) {
        match entity {
            Entity::Device(d) => {
                self.devices.insert(d.device_id.clone(), d);
            }
            Entity::Listing(l) => match self.listing_index.get(&l.listing_id) {
                Some(&i) => self.listings[i] = l,
                None => {
                    self.listing_index.insert(l.listing_id.clone(), self.listings.len());
                    self.listings.push(l);
                }
            },
            Entity::Transaction(t) => {
                self.transactions.insert(t.transaction_id.clone(), t);
            }
        }
    }
}

impl Coordinator {
    /// Builds a coordinator, replaying the ledger when `data_dir` is set.
    pub fn open(config: CoordinatorConfig, clock: SimClock) -> Result<Self, CoordError> {
        let rng = match config.seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::seed_from_u64(rand::random()),
        };
        let mut state = State {
            devices: BTreeMap::new(),
            listings: Vec::new(),
            listing_index: HashMap::new(),
            transactions: BTreeMap::new(),
            ledger: None,
            rng,
            seq: 0,
            cells: HashMap::new(),
        };
        if let Some(dir) = &config.data_dir {
            let (ledger, lines) = Ledger::open(dir)
                .map_err(|e| CoordError::internal("cannot open ledger").with_detail(e.to_string()))?;
            for line in lines {
                state.seq = state.seq.max(line.seq);
                state.apply(line.entity);
            }
            state.ledger = Some(ledger);
        }
        Ok(Self {
            state: Mutex::new(state),
            clock,
            event_buffer: config.event_buffer.max(1),
        })
    }

    pub fn in_memory(clock: SimClock) -> Self {
        Self::open(CoordinatorConfig::default(), clock).expect("in-memory coordinator")
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn register_device(&self, mut profile: DeviceProfile) -> Result<String, CoordError> {
        if !(profile.capacity_mwh > 0.0 && profile.capacity_mwh.is_finite()) {
            return Err(CoordError::validation("capacity_mwh must be positive").with_detail(profile.capacity_mwh.to_string()));
        }
        if profile.microcell_id.is_empty() {
            return Err(CoordError::validation("microcell_id must be non-empty"));
        }
        let mut st = self.lock();
        if profile.device_id.is_empty() {
            let same = st.devices.values().find(|d| {
                d.display_name == profile.display_name
                    && d.capacity_mwh == profile.capacity_mwh
                    && d.microcell_id == profile.microcell_id
            });
            if let Some(d) = same {
                return Ok(d.device_id.clone());
            }
            profile.device_id = st.fresh_id("dev-", false, |s, id| s.devices.contains_key(id));
        } else if let Some(existing) = st.devices.get(&profile.device_id) {
            if *existing == profile {
                return Ok(profile.device_id);
            }
            return Err(CoordError::new(ErrorCode::Conflict, "device id already registered with a different profile")
                .with_detail(profile.device_id));
        }
        let seq = st.persist(Entity::Device(profile.clone()))?;
        st.apply(Entity::Device(profile.clone()));
        let cell = profile.microcell_id.clone();
        st.publish(&cell, seq, "device-registered", json(&profile));
        Ok(profile.device_id)
    }

    pub fn get_device(&self, device_id: &str) -> Result<DeviceProfile, CoordError> {
        self.lock()
            .devices
            .get(device_id)
            .cloned()
            .ok_or_else(|| CoordError::not_found("device", device_id))
    }

    pub fn post_listing(&self, microcell_id: &str, req: NewListing) -> Result<EnergyListing, CoordError> {
        let mut st = self.lock();
        let cell = st
            .cell_of_device(&req.device_id)
            .ok_or_else(|| CoordError::not_found("device", &req.device_id))?;
        if cell != microcell_id {
            return Err(CoordError::new(ErrorCode::Locality, "device belongs to another microcell")
                .with_detail(format!("{} is in {cell}", req.device_id)));
        }
        if let Some(i) = st.open_listing_of(&req.device_id) {
            return Err(CoordError::new(ErrorCode::Busy, "device already has an open listing")
                .with_detail(st.listings[i].listing_id.clone()));
        }
        let listing_id = st.fresh_id("lst-", false, |s, id| s.listing_index.contains_key(id));
        let listing = EnergyListing {
            listing_id,
            device_id: req.device_id,
            role: req.role,
            amount: req.amount_percent,
            created_at: self.clock.now_s(),
            state: ListingState::Open,
        };
        let seq = st.persist(Entity::Listing(listing.clone()))?;
        st.apply(Entity::Listing(listing.clone()));
        st.publish(&cell, seq, "listing-created", json(&listing));
        Ok(listing)
    }

    pub fn withdraw_listing(&self, listing_id: &str) -> Result<EnergyListing, CoordError> {
        let mut st = self.lock();
        let &i = st
            .listing_index
            .get(listing_id)
            .ok_or_else(|| CoordError::not_found("listing", listing_id))?;
        let mut listing = st.listings[i].clone();
        if !listing.state.can_transition_to(ListingState::Withdrawn) {
            return Err(CoordError::new(ErrorCode::Conflict, "listing is not open").with_detail(listing_id));
        }
        listing.state = ListingState::Withdrawn;
        let seq = st.persist(Entity::Listing(listing.clone()))?;
        st.apply(Entity::Listing(listing.clone()));
        let cell = st.cell_of_device(&listing.device_id).unwrap_or_default();
        st.publish(&cell, seq, "listing-withdrawn", json(&listing));
        Ok(listing)
    }

    /// Open listings in `microcell_id`, newest first.
    pub fn list_open(&self, microcell_id: &str, role: Option<Role>) -> Vec<EnergyListing> {
        let st = self.lock();
        st.listings
            .iter()
            .rev()
            .filter(|l| l.state == ListingState::Open)
            .filter(|l| role.is_none_or(|r| l.role == r))
            .filter(|l| st.devices.get(&l.device_id).is_some_and(|d| d.microcell_id == microcell_id))
            .cloned()
            .collect()
    }

    pub fn create_transaction(&self, req: NewTransaction) -> Result<String, CoordError> {
        match (req.goal_mode, req.duration_s) {
            (GoalMode::DurationTarget, Some(d)) if d > 0.0 && d.is_finite() => {}
            (GoalMode::DurationTarget, _) => {
                return Err(CoordError::validation("duration_target needs a positive duration_s"))
            }
            (GoalMode::AmountTarget, None) => {}
            (GoalMode::AmountTarget, Some(_)) => {
                return Err(CoordError::validation("duration_s is only valid with duration_target"))
            }
        }
        if req.consumer_id == req.provider_id {
            return Err(CoordError::validation("provider and consumer must differ").with_detail(req.consumer_id));
        }
        let mut st = self.lock();
        let c_cell = st
            .cell_of_device(&req.consumer_id)
            .ok_or_else(|| CoordError::not_found("device", &req.consumer_id))?;
        let p_cell = st
            .cell_of_device(&req.provider_id)
            .ok_or_else(|| CoordError::not_found("device", &req.provider_id))?;
        if c_cell != p_cell {
            return Err(CoordError::new(ErrorCode::Locality, "parties are in different microcells")
                .with_detail(format!("{c_cell} vs {p_cell}")));
        }
        let find = |st: &State, id: &str, role: Role| {
            st.open_listing_of(id)
                .filter(|&i| st.listings[i].role == role)
                .ok_or_else(|| CoordError::new(ErrorCode::Busy, format!("{role} has no open {role} listing")).with_detail(id))
        };
        let ci = find(&st, &req.consumer_id, Role::Consumer)?;
        let pi = find(&st, &req.provider_id, Role::Provider)?;
        let (ca, pa) = (st.listings[ci].amount, st.listings[pi].amount);
        if ca != pa || ca != req.amount_percent {
            return Err(
                CoordError::new(ErrorCode::EqualAmountViolation, "offer and request must be the same percentage")
                    .with_detail(format!("offer {pa}%, request {ca}%, transaction {}%", req.amount_percent)),
            );
        }
        let transaction_id = st.fresh_id("", true, |s, id| s.transactions.contains_key(id));
        let record = TransactionRecord {
            transaction_id: transaction_id.clone(),
            microcell_id: c_cell.clone(),
            provider_id: req.provider_id,
            consumer_id: req.consumer_id,
            amount: req.amount_percent,
            goal_mode: req.goal_mode,
            duration_s: req.duration_s,
            created_at_s: self.clock.now_s(),
            state: TxState::Created,
            provider_report: None,
            consumer_report: None,
            loss_report: None,
        };
        for i in [pi, ci] {
            let mut l = st.listings[i].clone();
            l.state = ListingState::Matched;
            let seq = st.persist(Entity::Listing(l.clone()))?;
            st.apply(Entity::Listing(l.clone()));
            st.publish(&c_cell, seq, "listing-matched", json(&l));
        }
        let seq = st.persist(Entity::Transaction(record.clone()))?;
        st.apply(Entity::Transaction(record.clone()));
        st.publish(&c_cell, seq, "transaction-created", json(&record));
        Ok(transaction_id)
    }

    pub fn submit_report(&self, transaction_id: &str, report: PartyReport) -> Result<TxState, CoordError> {
        let mut st = self.lock();
        let mut rec = st
            .transactions
            .get(transaction_id)
            .cloned()
            .ok_or_else(|| CoordError::not_found("transaction", transaction_id))?;
        let role = rec.role_of(&report.device_id).ok_or_else(|| {
            CoordError::new(ErrorCode::Forbidden, "device is not a party to this transaction").with_detail(&report.device_id)
        })?;
        let slot = match role {
            Role::Provider => &rec.provider_report,
            Role::Consumer => &rec.consumer_report,
        };
        if slot.is_some() || rec.state.is_reconciled() {
            return Err(CoordError::new(ErrorCode::AlreadyReported, format!("{role} already reported"))
                .with_detail(&report.device_id));
        }
        validate_report(&report, role)?;
        match role {
            Role::Provider => rec.provider_report = Some(report),
            Role::Consumer => rec.consumer_report = Some(report),
        }
        rec.state = TxState::AwaitingReports;
        if rec.provider_report.is_some() && rec.consumer_report.is_some() {
            rec.loss_report = Some(full_report(&rec, DEFAULT_BUCKET_S)?);
            let aborted = [&rec.provider_report, &rec.consumer_report]
                .into_iter()
                .flatten()
                .any(|r| r.end_reason == EndReason::Aborted);
            rec.state = if aborted {
                TxState::ReconciledPartial
            } else {
                TxState::Reconciled
            };
        }
        let seq = st.persist(Entity::Transaction(rec.clone()))?;
        st.apply(Entity::Transaction(rec.clone()));
        let kind = if rec.state.is_reconciled() {
            "transaction-reconciled"
        } else {
            "report-submitted"
        };
        let cell = rec.microcell_id.clone();
        st.publish(&cell, seq, kind, json(&rec));
        Ok(rec.state)
    }

    pub fn get_transaction(&self, transaction_id: &str) -> Result<TransactionRecord, CoordError> {
        self.lock()
            .transactions
            .get(transaction_id)
            .cloned()
            .ok_or_else(|| CoordError::not_found("transaction", transaction_id))
    }

    pub fn transactions(&self) -> Vec<TransactionRecord> {
        self.lock().transactions.values().cloned().collect()
    }

    /// Loss report re-bucketed at `bucket_s`.
    pub fn loss_report(&self, transaction_id: &str, bucket_s: f64) -> Result<LossReport, CoordError> {
        let rec = self.get_transaction(transaction_id)?;
        if !rec.state.is_reconciled() {
            return Err(CoordError::new(ErrorCode::NotReconciled, "transaction is not reconciled yet")
                .with_detail(format!("{transaction_id} is {:?}", rec.state)));
        }
        full_report(&rec, bucket_s)
    }

    pub fn subscribe(&self, microcell_id: &str) -> broadcast::Receiver<CellEvent> {
        let mut st = self.lock();
        let buffer = self.event_buffer;
        st.cells
            .entry(microcell_id.to_string())
            .or_insert_with(|| broadcast::channel(buffer).0)
            .subscribe()
    }
}

/// Reconciles a record's reports and flags totals that disagree with what
/// was agreed.
fn full_report(rec: &TransactionRecord, bucket_s: f64) -> Result<LossReport, CoordError> {
    let (Some(p), Some(c)) = (&rec.provider_report, &rec.consumer_report) else {
        return Err(CoordError::new(ErrorCode::NotReconciled, "both reports are required"));
    };
    let mut report = reconcile(p, c, bucket_s)?;
    let pct = f64::from(rec.amount.percent()) / 100.0;
    match rec.goal_mode {
        GoalMode::AmountTarget => {
            let offer = pct * p.final_battery.capacity_mwh();
            let target = pct * c.final_battery.capacity_mwh();
            if report.provider_expended_mwh > offer + FLAG_TOLERANCE_MWH {
                report.flags.push(format!(
                    "expended-exceeds-offer: {} mWh > {offer} mWh",
                    report.provider_expended_mwh
                ));
            }
            if report.consumer_gained_mwh > target + FLAG_TOLERANCE_MWH {
                report.flags.push(format!(
                    "gained-exceeds-request: {} mWh > {target} mWh",
                    report.consumer_gained_mwh
                ));
            }
        }
        GoalMode::DurationTarget => {
            let limit = rec.duration_s.unwrap_or(f64::INFINITY);
            if report.duration_s > limit + 1e-6 {
                report
                    .flags
                    .push(format!("duration-exceeded: {} s > {limit} s", report.duration_s));
            }
        }
    }
    Ok(report)
}
