//! Records kept by the coordinator and the bodies exchanged over its API.

use eaas_core::{BatteryState, EndReason, EnergyAmount, EnergyError, Role, TelemetrySample};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalMode {
    AmountTarget,
    DurationTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxState {
    Created,
    AwaitingReports,
    Reconciled,
    ReconciledPartial,
}

impl TxState {
    pub fn is_reconciled(self) -> bool {
        matches!(self, TxState::Reconciled | TxState::ReconciledPartial)
    }
}

/// One party's account of a transfer: its battery log and where it ended up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartyReport {
    pub device_id: String,
    pub log: Vec<TelemetrySample>,
    pub final_battery: BatteryState,
    pub end_reason: EndReason,
}

impl PartyReport {
    /// A report whose final battery is the last sample of `log`.
    pub fn from_log(
        device_id: impl Into<String>,
        capacity_mwh: f64,
        log: Vec<TelemetrySample>,
        end_reason: EndReason,
    ) -> Result<Self, EnergyError> {
        let charge = log.last().map_or(0.0, |s| s.charge_mwh);
        Ok(Self {
            device_id: device_id.into(),
            final_battery: BatteryState::new(capacity_mwh, charge)?,
            log,
            end_reason,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub start_s: f64,
    pub end_s: f64,
    pub expended_mwh: f64,
    pub gained_mwh: f64,
    pub loss_mwh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub provider_expended_mwh: f64,
    pub consumer_gained_mwh: f64,
    pub loss_mwh: f64,
    pub duration_s: f64,
    pub bucket_width_s: f64,
    pub buckets: Vec<Bucket>,
    /// Inconsistencies noticed while reconciling. Recorded, never rejected.
    #[serde(default)]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionRecord {
    pub transaction_id: String,
    pub microcell_id: String,
    pub provider_id: String,
    pub consumer_id: String,
    pub amount: EnergyAmount,
    pub goal_mode: GoalMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    pub created_at_s: f64,
    pub state: TxState,
    pub provider_report: Option<PartyReport>,
    pub consumer_report: Option<PartyReport>,
    pub loss_report: Option<LossReport>,
}

impl TransactionRecord {
    pub fn role_of(&self, device_id: &str) -> Option<Role> {
        if device_id == self.provider_id {
            Some(Role::Provider)
        } else if device_id == self.consumer_id {
            Some(Role::Consumer)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewListing {
    pub device_id: String,
    pub role: Role,
    pub amount_percent: EnergyAmount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewTransaction {
    pub consumer_id: String,
    pub provider_id: String,
    pub amount_percent: EnergyAmount,
    pub goal_mode: GoalMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceIdBody {
    pub device_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransactionIdBody {
    pub transaction_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBody {
    pub state: TxState,
}

/// A change in one microcell, published in commit order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEvent {
    pub seq: u64,
    pub kind: String,
    pub data: serde_json::Value,
}
