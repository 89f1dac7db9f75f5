//! A device agent: holds one battery, negotiates transfers with nearby
//! devices over a proximity link and reports telemetry to the coordinator.

pub mod control;
pub mod net;
pub mod runtime;
pub mod types;

pub use net::{accept_tcp, Connector, Inbound, Neighborhood};
pub use runtime::{spawn_agent, AgentHandle};
pub use types::{AgentCommand, AgentConfig, AgentError, AgentEvent, AgentStatus, Mode, PendingRequest};
