//! Consumer and provider session state machines.
//!
//! Both are pure transition functions: `(state, event, now) -> (state,
//! actions)`. The caller performs the actions (I/O, timers, sampling) and
//! feeds results back as events. Any pair not listed in the transition table
//! leaves the state untouched and yields a single
//! [`Action::RaiseProtocolError`].
//!
//! Entering `Finalizing`, `Done` or `Aborted` implicitly cancels every
//! pending timer; the caller is expected to drop them.

use serde::{Deserialize, Serialize};

use super::message::{AbortTarget, ProtocolMessage};
use crate::energy::{EnergyAmount, Role};
use crate::sim::EndReason;

pub const ACCEPT_TIMEOUT_S: f64 = 30.0;
pub const START_TIMEOUT_S: f64 = 30.0;
/// Three missed heartbeats at the default 5 s sampling period.
pub const PEER_LOST_S: f64 = 15.0;

pub mod reason {
    pub const BUSY: &str = "busy";
    pub const TIMEOUT: &str = "timeout";
    pub const LINK_DOWN: &str = "link-down";
    pub const PEER_LOST: &str = "peer-lost";
    pub const PEER_ABORT: &str = "peer-abort";
    pub const USER_ABORT: &str = "user-abort";
    pub const REJECTED: &str = "rejected";
    pub const REGISTRATION_FAILED: &str = "registration-failed";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimerId {
    AcceptTimeout,
    StartTimeout,
    PeerLost,
}

/// What a device says about itself when the link comes up.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalInfo {
    pub device_id: String,
    pub amount: EnergyAmount,
    pub capacity_mwh: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LocalCommand {
    Request {
        request_id: String,
        amount: EnergyAmount,
    },
    Accept,
    Reject {
        reason: String,
    },
    Abort,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    LinkUp(LocalInfo),
    LinkDown,
    Received(ProtocolMessage),
    Timer(TimerId),
    Local(LocalCommand),
    Registered { transaction_id: String },
    RegistrationFailed { detail: String },
    /// Provider only: the energy flow reached a termination constraint.
    TransferEnded(EndReason),
    ReportSubmitted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationRequest {
    pub request_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    SendMessage(ProtocolMessage),
    RegisterTransaction(RegistrationRequest),
    StartSampling,
    StopSampling,
    SubmitReport { transaction_id: String },
    SetTimer { id: TimerId, deadline_s: f64 },
    CancelTimer(TimerId),
    RaiseProtocolError { detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConsumerState {
    Idle,
    Connected,
    AwaitingAccept { request_id: String, deadline_s: f64 },
    Registering { request_id: String },
    Transferring { transaction_id: String, started_at_s: f64 },
    Finalizing { transaction_id: String, end_reason: EndReason },
    Done { end_reason: EndReason },
    Aborted { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderState {
    Idle,
    Connected,
    Deciding { request_id: String },
    AwaitingStart { request_id: String },
    Transferring { transaction_id: String, started_at_s: f64 },
    Finalizing { transaction_id: String, end_reason: EndReason },
    Done { end_reason: EndReason },
    Aborted { reason: String },
}

impl ConsumerState {
    pub fn tag(&self) -> &'static str {
        match self {
            ConsumerState::Idle => "idle",
            ConsumerState::Connected => "connected",
            ConsumerState::AwaitingAccept { .. } => "awaiting_accept",
            ConsumerState::Registering { .. } => "registering",
            ConsumerState::Transferring { .. } => "transferring",
            ConsumerState::Finalizing { .. } => "finalizing",
            ConsumerState::Done { .. } => "done",
            ConsumerState::Aborted { .. } => "aborted",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, ConsumerState::Done { .. } | ConsumerState::Aborted { .. })
    }
}

impl ProviderState {
    pub fn tag(&self) -> &'static str {
        match self {
            ProviderState::Idle => "idle",
            ProviderState::Connected => "connected",
            ProviderState::Deciding { .. } => "deciding",
            ProviderState::AwaitingStart { .. } => "awaiting_start",
            ProviderState::Transferring { .. } => "transferring",
            ProviderState::Finalizing { .. } => "finalizing",
            ProviderState::Done { .. } => "done",
            ProviderState::Aborted { .. } => "aborted",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, ProviderState::Done { .. } | ProviderState::Aborted { .. })
    }
}

fn announce(info: &LocalInfo, role: Role) -> Action {
    Action::SendMessage(ProtocolMessage::RoleAnnounce {
        device_id: info.device_id.clone(),
        role,
        amount: info.amount,
        capacity_mwh: info.capacity_mwh,
    })
}

fn abort_msg(target: AbortTarget, reason: &str) -> Action {
    Action::SendMessage(ProtocolMessage::Abort {
        target,
        reason: reason.to_string(),
    })
}

fn peer_timer(now_s: f64) -> Action {
    Action::SetTimer {
        id: TimerId::PeerLost,
        deadline_s: now_s + PEER_LOST_S,
    }
}

fn aborted_reporting(transaction_id: &str) -> Vec<Action> {
    vec![
        Action::StopSampling,
        Action::SubmitReport {
            transaction_id: transaction_id.to_string(),
        },
    ]
}

fn protocol_error<S: Clone>(state: &S, tag: &str, event: &Event) -> (S, Vec<Action>) {
    (
        state.clone(),
        vec![Action::RaiseProtocolError {
            detail: format!("unexpected {} in state {tag}", describe(event)),
        }],
    )
}

fn describe(event: &Event) -> String {
    match event {
        Event::LinkUp(_) => "link-up".into(),
        Event::LinkDown => "link-down".into(),
        Event::Received(m) => format!("message {}", m.type_name()),
        Event::Timer(t) => format!("timer {t:?}"),
        Event::Local(c) => format!("local command {c:?}"),
        Event::Registered { .. } => "registration result".into(),
        Event::RegistrationFailed { .. } => "registration failure".into(),
        Event::TransferEnded(_) => "transfer end".into(),
        Event::ReportSubmitted => "report submission".into(),
    }
}

pub fn consumer_handle(
    state: &ConsumerState,
    event: &Event,
    now_s: f64,
) -> (ConsumerState, Vec<Action>) {
    use ConsumerState as S;
    use Event as E;
    use ProtocolMessage as M;

    let aborted = |reason: &str| S::Aborted {
        reason: reason.to_string(),
    };

    match (state, event) {
        (S::Idle, E::LinkUp(info)) => (S::Connected, vec![announce(info, Role::Consumer)]),

        // The peer's announcement may overtake our request.
        (
            S::Connected | S::AwaitingAccept { .. } | S::Registering { .. },
            E::Received(M::RoleAnnounce { .. }),
        ) => (state.clone(), vec![]),

        (S::Connected, E::Local(LocalCommand::Request { request_id, amount })) => {
            let deadline_s = now_s + ACCEPT_TIMEOUT_S;
            (
                S::AwaitingAccept {
                    request_id: request_id.clone(),
                    deadline_s,
                },
                vec![
                    Action::SendMessage(M::EnergyRequest {
                        request_id: request_id.clone(),
                        amount: *amount,
                    }),
                    Action::SetTimer {
                        id: TimerId::AcceptTimeout,
                        deadline_s,
                    },
                ],
            )
        }
        (S::Connected, E::LinkDown) => (aborted(reason::LINK_DOWN), vec![]),
        (S::Connected, E::Local(LocalCommand::Abort)) => (aborted(reason::USER_ABORT), vec![]),

        (S::AwaitingAccept { request_id, .. }, E::Received(M::Accept { request_id: rid }))
            if rid == request_id =>
        {
            (
                S::Registering {
                    request_id: request_id.clone(),
                },
                vec![
                    Action::CancelTimer(TimerId::AcceptTimeout),
                    Action::RegisterTransaction(RegistrationRequest {
                        request_id: request_id.clone(),
                    }),
                ],
            )
        }
        (
            S::AwaitingAccept { request_id, .. },
            E::Received(M::Reject {
                request_id: rid,
                reason: why,
            }),
        ) if rid == request_id => (aborted(&format!("{}: {why}", reason::REJECTED)), vec![]),
        (S::AwaitingAccept { request_id, .. }, E::Timer(TimerId::AcceptTimeout)) => (
            aborted(reason::TIMEOUT),
            vec![abort_msg(
                AbortTarget::RequestId(request_id.clone()),
                reason::TIMEOUT,
            )],
        ),
        (S::AwaitingAccept { request_id, .. } | S::Registering { request_id }, E::Local(LocalCommand::Abort)) => (
            aborted(reason::USER_ABORT),
            vec![abort_msg(
                AbortTarget::RequestId(request_id.clone()),
                reason::USER_ABORT,
            )],
        ),
        (S::AwaitingAccept { .. } | S::Registering { .. }, E::Received(M::Abort { .. })) => {
            (aborted(reason::PEER_ABORT), vec![])
        }
        (S::AwaitingAccept { .. } | S::Registering { .. }, E::LinkDown) => {
            (aborted(reason::LINK_DOWN), vec![])
        }

        (S::Registering { .. }, E::Registered { transaction_id }) => (
            S::Transferring {
                transaction_id: transaction_id.clone(),
                started_at_s: now_s,
            },
            vec![
                Action::SendMessage(M::TransferStart {
                    transaction_id: transaction_id.clone(),
                    start_time_s: now_s,
                }),
                Action::StartSampling,
                peer_timer(now_s),
            ],
        ),
        (S::Registering { request_id }, E::RegistrationFailed { .. }) => (
            aborted(reason::REGISTRATION_FAILED),
            vec![abort_msg(
                AbortTarget::RequestId(request_id.clone()),
                reason::REGISTRATION_FAILED,
            )],
        ),

        (S::Transferring { .. }, E::Received(M::Heartbeat { t_s })) => (
            state.clone(),
            vec![
                Action::SendMessage(M::Heartbeat { t_s: *t_s }),
                peer_timer(now_s),
            ],
        ),
        (
            S::Transferring { transaction_id, .. },
            E::Received(M::TransferComplete {
                transaction_id: tid,
                end_reason,
            }),
        ) if tid == transaction_id => (
            S::Finalizing {
                transaction_id: transaction_id.clone(),
                end_reason: *end_reason,
            },
            vec![
                Action::StopSampling,
                Action::SubmitReport {
                    transaction_id: transaction_id.clone(),
                },
            ],
        ),
        (
            S::Transferring { transaction_id, .. },
            E::Received(M::Abort {
                target: AbortTarget::TransactionId(tid),
                ..
            }),
        ) if tid == transaction_id => (
            aborted(reason::PEER_ABORT),
            aborted_reporting(transaction_id),
        ),
        (S::Transferring { transaction_id, .. }, E::LinkDown) => (
            aborted(reason::LINK_DOWN),
            aborted_reporting(transaction_id),
        ),
        (S::Transferring { transaction_id, .. }, E::Timer(TimerId::PeerLost)) => (
            aborted(reason::PEER_LOST),
            aborted_reporting(transaction_id),
        ),
        (S::Transferring { transaction_id, .. }, E::Local(LocalCommand::Abort)) => {
            let mut actions = vec![abort_msg(
                AbortTarget::TransactionId(transaction_id.clone()),
                reason::USER_ABORT,
            )];
            actions.extend(aborted_reporting(transaction_id));
            (aborted(reason::USER_ABORT), actions)
        }

        (S::Finalizing { end_reason, .. }, E::ReportSubmitted) => (
            S::Done {
                end_reason: *end_reason,
            },
            vec![],
        ),

        // Late traffic after the session is wound down is dropped.
        (
            S::Finalizing { .. } | S::Done { .. } | S::Aborted { .. },
            E::LinkDown | E::Received(_) | E::Timer(_),
        ) => (state.clone(), vec![]),
        (S::Aborted { .. }, E::ReportSubmitted) => (state.clone(), vec![]),

        _ => protocol_error(state, state.tag(), event),
    }
}

pub fn provider_handle(
    state: &ProviderState,
    event: &Event,
    now_s: f64,
) -> (ProviderState, Vec<Action>) {
    use Event as E;
    use ProtocolMessage as M;
    use ProviderState as S;

    let aborted = |reason: &str| S::Aborted {
        reason: reason.to_string(),
    };

    match (state, event) {
        (S::Idle, E::LinkUp(info)) => (S::Connected, vec![announce(info, Role::Provider)]),

        (S::Connected, E::Received(M::EnergyRequest { request_id, .. })) => (
            S::Deciding {
                request_id: request_id.clone(),
            },
            vec![],
        ),
        // One-to-one: only a connected, undecided provider takes a request.
        (_, E::Received(M::EnergyRequest { request_id, .. })) => (
            state.clone(),
            vec![Action::SendMessage(M::Reject {
                request_id: request_id.clone(),
                reason: reason::BUSY.to_string(),
            })],
        ),

        (
            S::Connected | S::Deciding { .. } | S::AwaitingStart { .. },
            E::Received(M::RoleAnnounce { .. }),
        ) => (state.clone(), vec![]),
        (S::Connected, E::LinkDown) => (aborted(reason::LINK_DOWN), vec![]),
        (S::Connected, E::Local(LocalCommand::Abort)) => (aborted(reason::USER_ABORT), vec![]),

        (S::Deciding { request_id }, E::Local(LocalCommand::Accept)) => {
            let deadline_s = now_s + START_TIMEOUT_S;
            (
                S::AwaitingStart {
                    request_id: request_id.clone(),
                },
                vec![
                    Action::SendMessage(M::Accept {
                        request_id: request_id.clone(),
                    }),
                    Action::SetTimer {
                        id: TimerId::StartTimeout,
                        deadline_s,
                    },
                ],
            )
        }
        (S::Deciding { request_id }, E::Local(LocalCommand::Reject { reason: why })) => (
            S::Connected,
            vec![Action::SendMessage(M::Reject {
                request_id: request_id.clone(),
                reason: why.clone(),
            })],
        ),
        (S::Deciding { request_id } | S::AwaitingStart { request_id }, E::Local(LocalCommand::Abort)) => (
            aborted(reason::USER_ABORT),
            vec![abort_msg(
                AbortTarget::RequestId(request_id.clone()),
                reason::USER_ABORT,
            )],
        ),
        (S::Deciding { .. } | S::AwaitingStart { .. }, E::Received(M::Abort { .. })) => {
            (aborted(reason::PEER_ABORT), vec![])
        }
        (S::Deciding { .. } | S::AwaitingStart { .. }, E::LinkDown) => {
            (aborted(reason::LINK_DOWN), vec![])
        }

        (
            S::AwaitingStart { .. },
            E::Received(M::TransferStart {
                transaction_id,
                start_time_s,
            }),
        ) => (
            S::Transferring {
                transaction_id: transaction_id.clone(),
                started_at_s: *start_time_s,
            },
            vec![
                Action::CancelTimer(TimerId::StartTimeout),
                Action::StartSampling,
                peer_timer(now_s),
            ],
        ),
        (S::AwaitingStart { request_id }, E::Timer(TimerId::StartTimeout)) => (
            aborted(reason::TIMEOUT),
            vec![abort_msg(
                AbortTarget::RequestId(request_id.clone()),
                reason::TIMEOUT,
            )],
        ),

        (S::Transferring { .. }, E::Received(M::Heartbeat { .. })) => {
            (state.clone(), vec![peer_timer(now_s)])
        }
        (S::Transferring { transaction_id, .. }, E::TransferEnded(end_reason)) => (
            S::Finalizing {
                transaction_id: transaction_id.clone(),
                end_reason: *end_reason,
            },
            vec![
                Action::StopSampling,
                Action::SendMessage(M::TransferComplete {
                    transaction_id: transaction_id.clone(),
                    end_reason: *end_reason,
                }),
                Action::SubmitReport {
                    transaction_id: transaction_id.clone(),
                },
            ],
        ),
        (
            S::Transferring { transaction_id, .. },
            E::Received(M::Abort {
                target: AbortTarget::TransactionId(tid),
                ..
            }),
        ) if tid == transaction_id => (
            aborted(reason::PEER_ABORT),
            aborted_reporting(transaction_id),
        ),
        (S::Transferring { transaction_id, .. }, E::LinkDown) => (
            aborted(reason::LINK_DOWN),
            aborted_reporting(transaction_id),
        ),
        (S::Transferring { transaction_id, .. }, E::Timer(TimerId::PeerLost)) => {
            let mut actions = vec![abort_msg(
                AbortTarget::TransactionId(transaction_id.clone()),
                reason::PEER_LOST,
            )];
            actions.extend(aborted_reporting(transaction_id));
            (aborted(reason::PEER_LOST), actions)
        }
        (S::Transferring { transaction_id, .. }, E::Local(LocalCommand::Abort)) => {
            let mut actions = vec![abort_msg(
                AbortTarget::TransactionId(transaction_id.clone()),
                reason::USER_ABORT,
            )];
            actions.extend(aborted_reporting(transaction_id));
            (aborted(reason::USER_ABORT), actions)
        }

        (S::Finalizing { end_reason, .. }, E::ReportSubmitted) => (
            S::Done {
                end_reason: *end_reason,
            },
            vec![],
        ),

        (
            S::Finalizing { .. } | S::Done { .. } | S::Aborted { .. },
            E::LinkDown | E::Received(_) | E::Timer(_),
        ) => (state.clone(), vec![]),
        (S::Aborted { .. }, E::ReportSubmitted) => (state.clone(), vec![]),

        _ => protocol_error(state, state.tag(), event),
    }
}
