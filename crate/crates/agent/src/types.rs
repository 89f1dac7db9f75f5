//! Configuration, commands and observable status of a device agent.

use eaas_coordinator::CoordError;
use eaas_core::link::LinkError;
use eaas_core::{BatteryState, DeviceProfile, EnergyAmount, EnergyListing, Role, TelemetrySample, TransferParams};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Incoming requests are accepted without asking.
    #[default]
    Scripted,
    /// Incoming requests wait for an explicit accept or reject.
    Interactive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub profile: DeviceProfile,
    pub initial_level_percent: f64,
    #[serde(default)]
    pub params: TransferParams,
    #[serde(default)]
    pub mode: Mode,
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if !(0.0..=100.0).contains(&self.initial_level_percent) {
            return Err(AgentError::Invalid(format!(
                "initial level {} % outside 0..=100",
                self.initial_level_percent
            )));
        }
        self.params
            .validate()
            .map_err(|e| AgentError::Invalid(e.to_string()))?;
        BatteryState::at_level(self.profile.capacity_mwh, self.initial_level_percent)
            .map_err(|e| AgentError::Invalid(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AgentCommand {
    Offer {
        amount: EnergyAmount,
    },
    /// Either `amount`, `duration_s`, or both. Without `amount` the
    /// provider's offered percentage is requested. Without `provider_id`
    /// the newest open offer in the microcell is picked.
    Request {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        amount: Option<EnergyAmount>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration_s: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        provider_id: Option<String>,
    },
    AcceptPending,
    RejectPending {
        #[serde(default = "default_reject_reason")]
        reason: String,
    },
    Abort,
    Shutdown,
}

fn default_reject_reason() -> String {
    "declined".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingRequest {
    pub request_id: String,
    pub amount: EnergyAmount,
    pub consumer_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentStatus {
    pub device_id: String,
    pub role: Option<Role>,
    pub protocol_state: String,
    pub battery: BatteryState,
    pub active_transaction_id: Option<String>,
    pub last_sample: Option<TelemetrySample>,
    pub pending_request: Option<PendingRequest>,
    pub offer: Option<EnergyListing>,
    /// Samples in the current (or last) session's log.
    pub samples: usize,
    /// End reason of the last finished session, or its abort reason.
    pub last_outcome: Option<String>,
    pub transaction_ids: Vec<String>,
    pub last_error: Option<String>,
}

impl AgentStatus {
    /// True while a session is under way.
    pub fn busy(&self) -> bool {
        !matches!(self.protocol_state.as_str(), "idle" | "done" | "aborted")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", content = "data", rename_all = "snake_case")]
pub enum AgentEvent {
    Status(AgentStatus),
    Prompt(PendingRequest),
}

impl AgentEvent {
    pub fn name(&self) -> &'static str {
        match self {
            AgentEvent::Status(_) => "status",
            AgentEvent::Prompt(_) => "prompt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("invalid in state {state}: {detail}")]
    InvalidInState { state: String, detail: String },
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("coordinator: {0}")]
    Coordinator(#[from] CoordError),
    #[error("link: {0}")]
    Link(#[from] LinkError),
    #[error("agent stopped")]
    Stopped,
}

impl AgentError {
    pub fn code(&self) -> &'static str {
        match self {
            AgentError::InvalidInState { .. } => "invalid-in-state",
            AgentError::Invalid(_) => "invalid-command",
            AgentError::Coordinator(_) => "coordinator",
            AgentError::Link(_) => "link",
            AgentError::Stopped => "stopped",
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            AgentError::InvalidInState { .. } => 409,
            AgentError::Invalid(_) => 400,
            AgentError::Coordinator(_) | AgentError::Link(_) => 502,
            AgentError::Stopped => 503,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_encoding() {
        let cases = [
            (
                AgentCommand::Offer {
                    amount: EnergyAmount::new(10).unwrap(),
                },
                r#"{"type":"offer","amount":10}"#,
            ),
            (
                AgentCommand::Request {
                    amount: None,
                    duration_s: Some(1800.0),
                    provider_id: Some("alice".into()),
                },
                r#"{"type":"request","duration_s":1800.0,"provider_id":"alice"}"#,
            ),
            (AgentCommand::AcceptPending, r#"{"type":"accept_pending"}"#),
            (AgentCommand::Abort, r#"{"type":"abort"}"#),
        ];
        for (cmd, text) in cases {
            assert_eq!(serde_json::to_string(&cmd).unwrap(), text);
            assert_eq!(serde_json::from_str::<AgentCommand>(text).unwrap(), cmd);
        }
        let reject: AgentCommand = serde_json::from_str(r#"{"type":"reject_pending"}"#).unwrap();
        assert_eq!(
            reject,
            AgentCommand::RejectPending {
                reason: "declined".into()
            }
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = AgentConfig {
            profile: DeviceProfile {
                device_id: "a".into(),
                display_name: "A".into(),
                capacity_mwh: 1000.0,
                microcell_id: "m1".into(),
            },
            initial_level_percent: 80.0,
            params: TransferParams::default(),
            mode: Mode::Scripted,
        };
        assert!(cfg.validate().is_ok());
        cfg.initial_level_percent = 101.0;
        assert!(cfg.validate().is_err());
    }
}
