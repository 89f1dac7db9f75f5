//! The agent event loop: one task per device owning its battery, its
//! protocol machine and the link to the current peer.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use eaas_coordinator::{CoordinatorApi, GoalMode, NewTransaction, PartyReport};
use eaas_core::link::{Endpoint, Frame};
use eaas_core::protocol::machine::reason;
use eaas_core::protocol::{
    consumer_handle, provider_handle, Action, ConsumerState, Event, LocalCommand, LocalInfo,
    ProtocolMessage, ProviderState, TimerId,
};
use eaas_core::sim::step_flow;
use eaas_core::{
    apply_delta, percent_to_energy, BatteryState, DeviceProfile, EndReason, EnergyAmount, EnergyListing, Role,
    SimClock, TelemetrySample, TerminationGoal, TransferParams, TransferRun,
};
use tokio::sync::{broadcast, mpsc, oneshot, watch};
use tokio::task::{AbortHandle, JoinHandle};
use tokio::time::Instant;

use crate::net::{Connector, Inbound};
use crate::types::{AgentCommand, AgentConfig, AgentError, AgentEvent, AgentStatus, Mode, PendingRequest};

/// How long a consumer keeps a finished link open so the provider can read
/// everything sent before it.
const CLOSE_GRACE_S: f64 = 1.0;
const EVENT_BUFFER: usize = 256;

enum Input {
    Command(AgentCommand, oneshot::Sender<Result<(), AgentError>>),
    Frame(u64, Frame),
    LinkDown(u64),
}

enum Machine {
    Idle,
    Consumer(ConsumerState),
    Provider(ProviderState),
}

impl Machine {
    fn tag(&self) -> &'static str {
        match self {
            Machine::Idle => "idle",
            Machine::Consumer(s) => s.tag(),
            Machine::Provider(s) => s.tag(),
        }
    }

    fn is_terminal(&self) -> bool {
        match self {
            Machine::Idle => false,
            Machine::Consumer(s) => s.is_terminal(),
            Machine::Provider(s) => s.is_terminal(),
        }
    }

    /// A session is in progress.
    fn active(&self) -> bool {
        !matches!(self, Machine::Idle) && !self.is_terminal()
    }
}

/// The consumer's view of the flow, rebuilt from the provider's heartbeats.
struct Mirror {
    params: TransferParams,
    battery: BatteryState,
    log: Vec<TelemetrySample>,
    last_t: f64,
}

impl Mirror {
    fn new(params: TransferParams, battery: BatteryState) -> Self {
        Self {
            params,
            battery,
            log: vec![TelemetrySample::of(0.0, &battery)],
            last_t: 0.0,
        }
    }

    fn advance_to(&mut self, t_s: f64) {
        if t_s <= self.last_t {
            return;
        }
        let gain = step_flow(&self.params, t_s - self.last_t).gain_mwh;
        let cap = self.battery.capacity_mwh();
        self.battery = apply_delta(self.battery, gain)
            .unwrap_or_else(|_| BatteryState::new(cap, cap).expect("full battery is valid"));
        self.last_t = t_s;
        self.log.push(TelemetrySample::of(t_s, &self.battery));
    }
}

struct Session {
    gen: u64,
    link: Arc<Endpoint>,
    peer_id: Option<String>,
    peer_capacity_mwh: Option<f64>,
    amount: EnergyAmount,
    duration_s: Option<f64>,
    /// The consumer's own listing.
    listing_id: Option<String>,
    transaction_id: Option<String>,
    start_s: f64,
    run: Option<TransferRun>,
    mirror: Option<Mirror>,
}

impl Session {
    fn new(gen: u64, link: Arc<Endpoint>, amount: EnergyAmount) -> Self {
        Self {
            gen,
            link,
            peer_id: None,
            peer_capacity_mwh: None,
            amount,
            duration_s: None,
            listing_id: None,
            transaction_id: None,
            start_s: 0.0,
            run: None,
            mirror: None,
        }
    }

    fn log(&self) -> Option<&[TelemetrySample]> {
        match (&self.run, &self.mirror) {
            (Some(run), _) => Some(run.provider_log()),
            (_, Some(m)) => Some(&m.log),
            _ => None,
        }
    }
}

/// Handle to a running agent. Dropping it stops the agent.
pub struct AgentHandle {
    device_id: String,
    tx: mpsc::UnboundedSender<Input>,
    status: watch::Receiver<AgentStatus>,
    events: broadcast::Sender<AgentEvent>,
    task: JoinHandle<()>,
}

impl AgentHandle {
    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub async fn command(&self, cmd: AgentCommand) -> Result<(), AgentError> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(Input::Command(cmd, reply))
            .map_err(|_| AgentError::Stopped)?;
        rx.await.map_err(|_| AgentError::Stopped)?
    }

    pub fn status(&self) -> AgentStatus {
        self.status.borrow().clone()
    }

    pub fn watch(&self) -> watch::Receiver<AgentStatus> {
        self.status.clone()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<AgentEvent> {
        self.events.subscribe()
    }

    /// Resolves with the first status satisfying `pred`, or the last one
    /// seen if the agent stops first.
    pub async fn wait_for(&self, pred: impl Fn(&AgentStatus) -> bool) -> AgentStatus {
        let mut rx = self.status.clone();
        loop {
            let current = rx.borrow_and_update().clone();
            if pred(&current) || rx.changed().await.is_err() {
                return current;
            }
        }
    }

    pub fn is_stopped(&self) -> bool {
        self.task.is_finished()
    }
}

impl Drop for AgentHandle {
    fn drop(&mut self) {
        self.task.abort();
    }
}

/// Registers the device and starts its event loop. `inbound` yields links
/// opened by other devices; `join` turns the assigned device id into it.
pub async fn spawn_agent(
    config: AgentConfig,
    coord: Arc<dyn CoordinatorApi>,
    connector: Connector,
    join: impl FnOnce(&str) -> Inbound,
    clock: SimClock,
) -> Result<AgentHandle, AgentError> {
    config.validate()?;
    let mut profile = config.profile.clone();
    profile.device_id = coord.register_device(profile.clone()).await?;
    let battery = BatteryState::at_level(profile.capacity_mwh, config.initial_level_percent)
        .map_err(|e| AgentError::Invalid(e.to_string()))?;
    let inbound = join(&profile.device_id);

    let (tx, rx) = mpsc::unbounded_channel();
    let (events, _) = broadcast::channel(EVENT_BUFFER);
    let (status_tx, status_rx) = watch::channel(placeholder_status());
    let agent = Agent {
        profile: profile.clone(),
        params: config.params,
        mode: config.mode,
        clock,
        coord,
        connector,
        battery,
        role: None,
        machine: Machine::Idle,
        session: None,
        offer: None,
        timers: HashMap::new(),
        next_gen: 0,
        readers: HashMap::new(),
        extra: HashMap::new(),
        mailbox: tx.clone(),
        events: events.clone(),
        pending: None,
        last_outcome: None,
        last_error: None,
        last_log: None,
        transaction_ids: Vec::new(),
        requests: 0,
        queue: VecDeque::new(),
        stop: false,
        status_tx,
    };
    agent.status_tx.send_replace(agent.snapshot());
    let task = tokio::spawn(agent.run(rx, inbound));
    Ok(AgentHandle {
        device_id: profile.device_id,
        tx,
        status: status_rx,
        events,
        task,
    })
}

fn placeholder_status() -> AgentStatus {
    AgentStatus {
        device_id: String::new(),
        role: None,
        protocol_state: "idle".into(),
        battery: BatteryState::new(1.0, 0.0).expect("valid"),
        active_transaction_id: None,
        last_sample: None,
        pending_request: None,
        offer: None,
        samples: 0,
        last_outcome: None,
        transaction_ids: Vec::new(),
        last_error: None,
    }
}

struct Agent {
    profile: DeviceProfile,
    params: TransferParams,
    mode: Mode,
    clock: SimClock,
    coord: Arc<dyn CoordinatorApi>,
    connector: Connector,
    battery: BatteryState,
    role: Option<Role>,
    machine: Machine,
    session: Option<Session>,
    offer: Option<EnergyListing>,
    timers: HashMap<TimerId, f64>,
    next_gen: u64,
    readers: HashMap<u64, AbortHandle>,
    /// Links we are not in a session on, kept only to turn requests away.
    extra: HashMap<u64, Arc<Endpoint>>,
    mailbox: mpsc::UnboundedSender<Input>,
    status_tx: watch::Sender<AgentStatus>,
    events: broadcast::Sender<AgentEvent>,
    pending: Option<PendingRequest>,
    last_outcome: Option<String>,
    last_error: Option<String>,
    /// Log of the last finished session, for status.
    last_log: Option<(usize, Option<TelemetrySample>)>,
    transaction_ids: Vec<String>,
    requests: u64,
    queue: VecDeque<Event>,
    stop: bool,
}

impl Agent {
    async fn run(mut self, mut rx: mpsc::UnboundedReceiver<Input>, mut inbound: Inbound) {
        let mut inbound_open = true;
        while !self.stop {
            let wake = self.next_wake();
            tokio::select! {
                biased;
                input = rx.recv() => match input {
                    Some(input) => self.on_input(input).await,
                    None => break,
                },
                ep = inbound.recv(), if inbound_open => match ep {
                    Some(ep) => self.on_inbound(ep).await,
                    None => inbound_open = false,
                },
                _ = sleep_opt(wake) => self.on_time().await,
            }
            self.publish();
        }
        for (_, r) in self.readers.drain() {
            r.abort();
        }
    }

    fn device_id(&self) -> &str {
        &self.profile.device_id
    }

    fn snapshot(&self) -> AgentStatus {
        let (samples, last_sample) = match self.session.as_ref().and_then(Session::log) {
            Some(log) => (log.len(), log.last().copied()),
            None => self.last_log.unwrap_or((0, None)),
        };
        AgentStatus {
            device_id: self.profile.device_id.clone(),
            role: self.role,
            protocol_state: self.machine.tag().into(),
            battery: self.battery,
            active_transaction_id: self.session.as_ref().and_then(|s| s.transaction_id.clone()),
            last_sample,
            pending_request: self.pending.clone(),
            offer: self.offer.clone(),
            samples,
            last_outcome: self.last_outcome.clone(),
            transaction_ids: self.transaction_ids.clone(),
            last_error: self.last_error.clone(),
        }
    }

    fn publish(&mut self) {
        let status = self.snapshot();
        if *self.status_tx.borrow() != status {
            self.status_tx.send_replace(status.clone());
            let _ = self.events.send(AgentEvent::Status(status));
        }
    }

    fn tick_deadline(&self) -> Option<f64> {
        if !matches!(self.machine, Machine::Provider(ProviderState::Transferring { .. })) {
            return None;
        }
        let s = self.session.as_ref()?;
        let run = s.run.as_ref()?;
        if run.end_reason().is_some() {
            return None;
        }
        Some(s.start_s + run.elapsed_s() + run.next_step().0)
    }

    fn next_wake(&self) -> Option<Instant> {
        self.timers
            .values()
            .copied()
            .chain(self.tick_deadline())
            .map(|t| self.clock.instant_at(t))
            .min()
    }

    fn due(&self, t_s: f64) -> bool {
        self.clock.instant_at(t_s) <= Instant::now()
    }

    async fn on_time(&mut self) {
        let mut due: Vec<TimerId> = self
            .timers
            .iter()
            .filter(|(_, &t)| self.due(t))
            .map(|(&id, _)| id)
            .collect();
        due.sort_by_key(|id| *id as u8);
        for id in due {
            if self.timers.remove(&id).is_some() {
                self.feed(Event::Timer(id)).await;
            }
        }
        if self.tick_deadline().is_some_and(|t| self.due(t)) {
            self.tick().await;
        }
    }

    async fn tick(&mut self) {
        let Some(s) = self.session.as_mut() else { return };
        let Some(run) = s.run.as_mut() else { return };
        match run.advance() {
            Ok(end) => {
                self.battery = *run.provider();
                let hb = ProtocolMessage::Heartbeat { t_s: run.elapsed_s() };
                let _ = s.link.send_message(&hb).await;
                if let Some(r) = end {
                    self.feed(Event::TransferEnded(r)).await;
                }
            }
            Err(e) => {
                self.last_error = Some(e.to_string());
                self.feed(Event::Local(LocalCommand::Abort)).await;
            }
        }
    }

    async fn on_input(&mut self, input: Input) {
        match input {
            Input::Command(cmd, reply) => {
                let result = self.on_command(cmd).await;
                // Callers reading status after the reply see the effect.
                self.publish();
                let _ = reply.send(result);
            }
            Input::Frame(gen, frame) => self.on_frame(gen, frame).await,
            Input::LinkDown(gen) => {
                self.readers.remove(&gen);
                if self.session.as_ref().is_some_and(|s| s.gen == gen) {
                    self.feed(Event::LinkDown).await;
                } else {
                    self.extra.remove(&gen);
                }
            }
        }
    }

    fn attach(&mut self, link: Arc<Endpoint>) -> u64 {
        self.next_gen += 1;
        let gen = self.next_gen;
        let mailbox = self.mailbox.clone();
        let reader = Arc::clone(&link);
        let task = tokio::spawn(async move {
            loop {
                match reader.recv_frame(None).await {
                    Ok(frame) => {
                        if mailbox.send(Input::Frame(gen, frame)).is_err() {
                            break;
                        }
                    }
                    Err(_) => {
                        let _ = mailbox.send(Input::LinkDown(gen));
                        break;
                    }
                }
            }
        });
        self.readers.insert(gen, task.abort_handle());
        gen
    }

    fn local_info(&self, amount: EnergyAmount) -> LocalInfo {
        LocalInfo {
            device_id: self.device_id().to_string(),
            amount,
            capacity_mwh: self.profile.capacity_mwh,
        }
    }

    async fn on_inbound(&mut self, ep: Endpoint) {
        let link = Arc::new(ep);
        let gen = self.attach(Arc::clone(&link));
        let adopt = self.session.is_none() && !self.machine.active();
        match (&self.offer, adopt) {
            (Some(offer), true) => {
                let amount = offer.amount;
                self.machine = Machine::Provider(ProviderState::Idle);
                self.role = Some(Role::Provider);
                self.last_log = None;
                self.session = Some(Session::new(gen, link, amount));
                self.feed(Event::LinkUp(self.local_info(amount))).await;
            }
            _ => {
                self.extra.insert(gen, link);
            }
        }
    }

    async fn on_frame(&mut self, gen: u64, frame: Frame) {
        let msg = match frame.to_message() {
            Ok(m) => m,
            Err(e) => {
                tracing::warn!(device = %self.device_id(), "undecodable frame: {e}");
                self.last_error = Some(e.to_string());
                return;
            }
        };
        let Some(s) = self.session.as_mut().filter(|s| s.gen == gen) else {
            // Not our session: turn requests away, ignore the rest.
            if let (Some(link), ProtocolMessage::EnergyRequest { request_id, .. }) = (self.extra.get(&gen), &msg) {
                let why = if self.machine.active() { reason::BUSY } else { "not-offering" };
                let reject = ProtocolMessage::Reject {
                    request_id: request_id.clone(),
                    reason: why.into(),
                };
                let _ = link.send_message(&reject).await;
            }
            return;
        };
        match &msg {
            ProtocolMessage::RoleAnnounce {
                device_id, capacity_mwh, ..
            } => {
                s.peer_id.get_or_insert_with(|| device_id.clone());
                s.peer_capacity_mwh = Some(*capacity_mwh);
            }
            ProtocolMessage::EnergyRequest { amount, .. }
                if matches!(self.machine, Machine::Provider(ProviderState::Connected)) =>
            {
                s.amount = *amount;
            }
            ProtocolMessage::Heartbeat { t_s } => {
                if let (Machine::Consumer(ConsumerState::Transferring { .. }), Some(m)) =
                    (&self.machine, s.mirror.as_mut())
                {
                    m.advance_to(*t_s);
                    self.battery = m.battery;
                }
            }
            _ => {}
        }
        self.feed(Event::Received(msg)).await;
    }

    async fn feed(&mut self, event: Event) {
        self.queue.push_back(event);
        while let Some(ev) = self.queue.pop_front() {
            let now = self.clock.now_s();
            let actions = match &self.machine {
                Machine::Idle => continue,
                Machine::Consumer(s) => {
                    let (next, actions) = consumer_handle(s, &ev, now);
                    self.machine = Machine::Consumer(next);
                    actions
                }
                Machine::Provider(s) => {
                    let (next, actions) = provider_handle(s, &ev, now);
                    self.machine = Machine::Provider(next);
                    actions
                }
            };
            for a in actions {
                self.execute(a).await;
            }
            self.after_transition().await;
        }
    }

    async fn execute(&mut self, action: Action) {
        match action {
            Action::SendMessage(msg) => {
                if let Some(s) = &self.session {
                    if let Err(e) = s.link.send_message(&msg).await {
                        tracing::debug!(device = %self.device_id(), "send {} failed: {e}", msg.type_name());
                    }
                }
            }
            Action::RegisterTransaction(_) => {
                let Some(s) = &self.session else { return };
                let req = NewTransaction {
                    consumer_id: self.device_id().to_string(),
                    provider_id: s.peer_id.clone().unwrap_or_default(),
                    amount_percent: s.amount,
                    goal_mode: if s.duration_s.is_some() {
                        GoalMode::DurationTarget
                    } else {
                        GoalMode::AmountTarget
                    },
                    duration_s: s.duration_s,
                };
                match self.coord.create_transaction(req).await {
                    Ok(transaction_id) => self.queue.push_back(Event::Registered { transaction_id }),
                    Err(e) => {
                        self.last_error = Some(e.to_string());
                        self.queue
                            .push_back(Event::RegistrationFailed { detail: e.to_string() });
                    }
                }
            }
            Action::StartSampling => self.start_sampling().await,
            Action::StopSampling => self.stop_sampling(),
            Action::SubmitReport { transaction_id } => {
                self.submit_report(&transaction_id).await;
                self.queue.push_back(Event::ReportSubmitted);
            }
            Action::SetTimer { id, deadline_s } => {
                self.timers.insert(id, deadline_s);
            }
            Action::CancelTimer(id) => {
                self.timers.remove(&id);
            }
            Action::RaiseProtocolError { detail } => {
                tracing::warn!(device = %self.device_id(), "{detail}");
                self.last_error = Some(detail);
            }
        }
    }

    async fn start_sampling(&mut self) {
        let (tid, started) = match &self.machine {
            Machine::Consumer(ConsumerState::Transferring {
                transaction_id,
                started_at_s,
            })
            | Machine::Provider(ProviderState::Transferring {
                transaction_id,
                started_at_s,
            }) => (transaction_id.clone(), *started_at_s),
            _ => return,
        };
        if !self.transaction_ids.contains(&tid) {
            self.transaction_ids.push(tid.clone());
        }
        let is_provider = matches!(self.machine, Machine::Provider(_));
        let battery = self.battery;
        let params = self.params;
        let own_cap = self.profile.capacity_mwh;
        let Some(s) = self.session.as_mut() else { return };
        s.start_s = started;
        s.transaction_id = Some(tid.clone());
        if !is_provider {
            s.mirror = Some(Mirror::new(params, battery));
            return;
        }
        let goal = match self.coord.get_transaction(&tid).await {
            Ok(rec) => match (rec.goal_mode, rec.duration_s) {
                (GoalMode::DurationTarget, Some(duration_s)) => Ok(TerminationGoal::DurationTarget { duration_s }),
                _ => {
                    let peer_cap = s.peer_capacity_mwh.unwrap_or(own_cap);
                    Ok(TerminationGoal::AmountTarget {
                        offer_cap_mwh: percent_to_energy(rec.amount, own_cap).unwrap_or(0.0),
                        request_target_mwh: percent_to_energy(rec.amount, peer_cap).unwrap_or(0.0),
                    })
                }
            },
            Err(e) => Err(e.to_string()),
        };
        // The provider cannot see the consumer's charge, so it tracks the
        // flow against an empty battery of the announced size.
        let shadow = BatteryState::new(s.peer_capacity_mwh.unwrap_or(own_cap), 0.0);
        let run = goal.and_then(|g| {
            let shadow = shadow.map_err(|e| e.to_string())?;
            TransferRun::start(battery, shadow, params, g).map_err(|e| e.to_string())
        });
        match run {
            Ok(run) => s.run = Some(run),
            Err(e) => {
                self.last_error = Some(e);
                self.queue.push_back(Event::Local(LocalCommand::Abort));
            }
        }
    }

    fn stop_sampling(&mut self) {
        let aborted = matches!(
            self.machine,
            Machine::Consumer(ConsumerState::Aborted { .. }) | Machine::Provider(ProviderState::Aborted { .. })
        );
        let now = self.clock.now_s();
        let Some(s) = self.session.as_mut() else { return };
        let t_abort = (now - s.start_s).max(0.0);
        if let Some(run) = s.run.as_mut() {
            if aborted {
                if let Err(e) = run.abort_at(t_abort) {
                    self.last_error = Some(e.to_string());
                }
            }
            self.battery = *run.provider();
        }
        if let Some(m) = s.mirror.as_mut() {
            if aborted {
                m.advance_to(t_abort);
            }
            self.battery = m.battery;
        }
    }

    async fn submit_report(&mut self, transaction_id: &str) {
        let end_reason = match &self.machine {
            Machine::Consumer(ConsumerState::Finalizing { end_reason, .. })
            | Machine::Provider(ProviderState::Finalizing { end_reason, .. }) => *end_reason,
            _ => EndReason::Aborted,
        };
        let log = self
            .session
            .as_ref()
            .and_then(Session::log)
            .map(<[_]>::to_vec)
            .unwrap_or_else(|| vec![TelemetrySample::of(0.0, &self.battery)]);
        let report = PartyReport::from_log(self.device_id(), self.profile.capacity_mwh, log, end_reason);
        let result = match report {
            Ok(r) => self.coord.submit_report(transaction_id, r).await.map_err(|e| e.to_string()),
            Err(e) => Err(e.to_string()),
        };
        if let Err(e) = result {
            tracing::warn!(device = %self.device_id(), "report for {transaction_id} failed: {e}");
            self.last_error = Some(e);
        }
    }

    async fn after_transition(&mut self) {
        let deciding = match &self.machine {
            Machine::Provider(ProviderState::Deciding { request_id }) => Some(request_id.clone()),
            _ => None,
        };
        match (deciding, &self.pending) {
            (Some(request_id), None) => {
                let s = self.session.as_ref();
                let pending = PendingRequest {
                    request_id,
                    amount: s.map_or(EnergyAmount::new(1).expect("valid"), |s| s.amount),
                    consumer_id: s.and_then(|s| s.peer_id.clone()),
                };
                let _ = self.events.send(AgentEvent::Prompt(pending.clone()));
                if self.mode == Mode::Scripted {
                    let offered = self.offer.as_ref().map(|o| o.amount);
                    let cmd = if offered == Some(pending.amount) {
                        LocalCommand::Accept
                    } else {
                        LocalCommand::Reject {
                            reason: "amount-mismatch".into(),
                        }
                    };
                    self.queue.push_back(Event::Local(cmd));
                }
                self.pending = Some(pending);
            }
            (None, Some(_)) => self.pending = None,
            _ => {}
        }
        if self.machine.is_terminal() && self.session.is_some() {
            self.finish_session().await;
        }
    }

    async fn finish_session(&mut self) {
        let Some(s) = self.session.take() else { return };
        self.timers.clear();
        self.last_log = s.log().map(|log| (log.len(), log.last().copied()));
        self.last_outcome = Some(match &self.machine {
            Machine::Consumer(ConsumerState::Done { end_reason })
            | Machine::Provider(ProviderState::Done { end_reason }) => end_reason.as_str().to_string(),
            Machine::Consumer(ConsumerState::Aborted { reason })
            | Machine::Provider(ProviderState::Aborted { reason }) => reason.clone(),
            _ => "unknown".into(),
        });
        if let Some(r) = self.readers.remove(&s.gen) {
            r.abort();
        }
        match self.role {
            Some(Role::Consumer) => {
                let link = Arc::clone(&s.link);
                let grace = self.clock.wall_duration(CLOSE_GRACE_S);
                tokio::spawn(async move {
                    tokio::time::sleep(grace).await;
                    link.inject_disconnect().await;
                });
                if s.transaction_id.is_none() {
                    if let Some(id) = &s.listing_id {
                        if let Err(e) = self.coord.withdraw_listing(id).await {
                            tracing::warn!(device = %self.device_id(), "withdraw {id} failed: {e}");
                        }
                    }
                }
            }
            Some(Role::Provider) => {
                // A registered transaction matched the offer.
                if s.transaction_id.is_some() {
                    self.offer = None;
                }
            }
            None => {}
        }
    }

    fn invalid_in_state(&self, detail: &str) -> AgentError {
        AgentError::InvalidInState {
            state: self.machine.tag().into(),
            detail: detail.into(),
        }
    }

    fn require_free(&self) -> Result<(), AgentError> {
        if self.machine.active() {
            return Err(self.invalid_in_state("a session is in progress"));
        }
        if self.offer.is_some() {
            return Err(self.invalid_in_state("an offer is open"));
        }
        Ok(())
    }

    fn abortable(&self) -> bool {
        self.machine.active()
            && !matches!(
                self.machine,
                Machine::Consumer(ConsumerState::Finalizing { .. })
                    | Machine::Provider(ProviderState::Finalizing { .. })
            )
    }

    async fn on_command(&mut self, cmd: AgentCommand) -> Result<(), AgentError> {
        match cmd {
            AgentCommand::Offer { amount } => {
                self.require_free()?;
                let floor = self.params.provider_floor_percent;
                if self.battery.level_percent() <= floor {
                    return Err(AgentError::Invalid(format!(
                        "battery at {:.2} % is not above the {floor} % floor",
                        self.battery.level_percent()
                    )));
                }
                let listing = self
                    .coord
                    .post_listing(&self.profile.microcell_id, self.device_id(), Role::Provider, amount)
                    .await?;
                self.offer = Some(listing);
                self.role = Some(Role::Provider);
                Ok(())
            }
            AgentCommand::Request {
                amount,
                duration_s,
                provider_id,
            } => self.request(amount, duration_s, provider_id).await,
            AgentCommand::AcceptPending => self.decide(LocalCommand::Accept).await,
            AgentCommand::RejectPending { reason } => self.decide(LocalCommand::Reject { reason }).await,
            AgentCommand::Abort => {
                if self.abortable() {
                    self.feed(Event::Local(LocalCommand::Abort)).await;
                    Ok(())
                } else if let (Some(offer), false) = (&self.offer, self.machine.active()) {
                    let id = offer.listing_id.clone();
                    self.coord.withdraw_listing(&id).await?;
                    self.offer = None;
                    Ok(())
                } else {
                    Err(self.invalid_in_state("nothing to abort"))
                }
            }
            AgentCommand::Shutdown => {
                if self.abortable() {
                    self.feed(Event::Local(LocalCommand::Abort)).await;
                }
                self.stop = true;
                Ok(())
            }
        }
    }

    async fn decide(&mut self, cmd: LocalCommand) -> Result<(), AgentError> {
        if !matches!(self.machine, Machine::Provider(ProviderState::Deciding { .. })) {
            return Err(self.invalid_in_state("no request is pending"));
        }
        self.feed(Event::Local(cmd)).await;
        Ok(())
    }

    async fn request(
        &mut self,
        amount: Option<EnergyAmount>,
        duration_s: Option<f64>,
        provider_id: Option<String>,
    ) -> Result<(), AgentError> {
        self.require_free()?;
        if amount.is_none() && duration_s.is_none() {
            return Err(AgentError::Invalid("request needs an amount or a duration".into()));
        }
        if let Some(d) = duration_s {
            if !(d > 0.0 && d.is_finite()) {
                return Err(AgentError::Invalid(format!("duration {d} s must be positive")));
            }
        }
        let cell = self.profile.microcell_id.clone();
        let offers = self.coord.list_open(&cell, Some(Role::Provider)).await?;
        let listing = match &provider_id {
            Some(p) => offers.iter().find(|l| &l.device_id == p),
            None => offers.first(),
        }
        .ok_or_else(|| self.invalid_in_state("no matching open offer in the microcell"))?
        .clone();
        let amount = amount.unwrap_or(listing.amount);
        let needed = match duration_s {
            Some(d) => step_flow(&self.params, d).gain_mwh,
            None => percent_to_energy(amount, self.profile.capacity_mwh).map_err(|e| AgentError::Invalid(e.to_string()))?,
        };
        if needed > self.battery.headroom_mwh() + 1e-9 {
            return Err(AgentError::Invalid(format!(
                "request for {needed:.3} mWh exceeds the {:.3} mWh headroom",
                self.battery.headroom_mwh()
            )));
        }

        let own = self
            .coord
            .post_listing(&cell, self.device_id(), Role::Consumer, amount)
            .await?;
        let link = match self.connector.connect(&listing.device_id).await {
            Ok(link) => Arc::new(link),
            Err(e) => {
                let _ = self.coord.withdraw_listing(&own.listing_id).await;
                return Err(e.into());
            }
        };
        let gen = self.attach(Arc::clone(&link));
        let mut session = Session::new(gen, link, amount);
        session.peer_id = Some(listing.device_id.clone());
        session.duration_s = duration_s;
        session.listing_id = Some(own.listing_id);
        self.session = Some(session);
        self.machine = Machine::Consumer(ConsumerState::Idle);
        self.role = Some(Role::Consumer);
        self.last_log = None;
        self.requests += 1;
        let request_id = format!("{}-req-{}", self.device_id(), self.requests);
        self.feed(Event::LinkUp(self.local_info(amount))).await;
        self.feed(Event::Local(LocalCommand::Request { request_id, amount }))
            .await;
        Ok(())
    }
}

async fn sleep_opt(at: Option<Instant>) {
    match at {
        Some(at) => tokio::time::sleep_until(at).await,
        None => std::future::pending().await,
    }
}
