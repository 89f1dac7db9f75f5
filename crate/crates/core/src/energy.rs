//! Energy value types and the unit bridge between battery percentages and
//! milliwatt-hours.
//!
//! Percent amounts are always relative to the owning device's own capacity.
//! Internal bookkeeping is real-valued mWh.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute slack (mWh) under which a result that lands just outside
/// `[0, capacity]` is treated as landing on the bound. Covers float noise
/// from exact-landing steps only; real overshoots still error.
pub const BOUND_SLACK_MWH: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnergyError {
    #[error("percent amount must be in 1..=100, got {0}")]
    InvalidPercent(i64),
    #[error("capacity must be positive, got {0} mWh")]
    InvalidCapacity(f64),
    #[error("energy must be non-negative, got {0} mWh")]
    InvalidEnergy(f64),
    #[error("charge {charge} mWh outside [0, {capacity}] mWh")]
    InvalidCharge { charge: f64, capacity: f64 },
    #[error("battery depleted: {charge} mWh + {delta} mWh < 0")]
    Depleted { charge: f64, delta: f64 },
    #[error("battery overfull: {charge} mWh + {delta} mWh > {capacity} mWh")]
    Overfull { charge: f64, delta: f64, capacity: f64 },
}

/// An offered or requested amount, as an integer percentage of a battery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub struct EnergyAmount(u8);

impl EnergyAmount {
    pub fn new(percent: i64) -> Result<Self, EnergyError> {
        if (1..=100).contains(&percent) {
            Ok(Self(percent as u8))
        } else {
            Err(EnergyError::InvalidPercent(percent))
        }
    }

    pub fn percent(self) -> u8 {
        self.0
    }
}

impl TryFrom<i64> for EnergyAmount {
    type Error = EnergyError;

    fn try_from(value: i64) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<EnergyAmount> for u8 {
    fn from(value: EnergyAmount) -> Self {
        value.0
    }
}

impl fmt::Display for EnergyAmount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}%", self.0)
    }
}

/// A battery's capacity and stored energy at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBattery")]
pub struct BatteryState {
    capacity_mwh: f64,
    charge_mwh: f64,
}

#[derive(Deserialize)]
struct RawBattery {
    capacity_mwh: f64,
    charge_mwh: f64,
}

impl TryFrom<RawBattery> for BatteryState {
    type Error = EnergyError;

    fn try_from(raw: RawBattery) -> Result<Self, Self::Error> {
        Self::new(raw.capacity_mwh, raw.charge_mwh)
    }
}

impl BatteryState {
    pub fn new(capacity_mwh: f64, charge_mwh: f64) -> Result<Self, EnergyError> {
        if !(capacity_mwh > 0.0 && capacity_mwh.is_finite()) {
            return Err(EnergyError::InvalidCapacity(capacity_mwh));
        }
        if !(0.0..=capacity_mwh).contains(&charge_mwh) {
            return Err(EnergyError::InvalidCharge {
                charge: charge_mwh,
                capacity: capacity_mwh,
            });
        }
        Ok(Self {
            capacity_mwh,
            charge_mwh,
        })
    }

    /// Battery at `level_percent` of `capacity_mwh`.
    pub fn at_level(capacity_mwh: f64, level_percent: f64) -> Result<Self, EnergyError> {
        if !(capacity_mwh > 0.0 && capacity_mwh.is_finite()) {
            return Err(EnergyError::InvalidCapacity(capacity_mwh));
        }
        Self::new(capacity_mwh, capacity_mwh * level_percent / 100.0)
    }

    pub fn capacity_mwh(&self) -> f64 {
        self.capacity_mwh
    }

    pub fn charge_mwh(&self) -> f64 {
        self.charge_mwh
    }

    pub fn headroom_mwh(&self) -> f64 {
        self.capacity_mwh - self.charge_mwh
    }

    pub fn level_percent(&self) -> f64 {
        100.0 * self.charge_mwh / self.capacity_mwh
    }
}

/// A device as known to the coordinator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    /// Left empty to let the coordinator assign one.
    #[serde(default)]
    pub device_id: String,
    pub display_name: String,
    pub capacity_mwh: f64,
    pub microcell_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Provider,
    Consumer,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Provider => "provider",
            Role::Consumer => "consumer",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ListingState {
    Open,
    Matched,
    Withdrawn,
}

impl ListingState {
    /// Only `Open -> Matched` and `Open -> Withdrawn` exist.
    pub fn can_transition_to(self, next: ListingState) -> bool {
        matches!(
            (self, next),
            (ListingState::Open, ListingState::Matched) | (ListingState::Open, ListingState::Withdrawn)
        )
    }
}

/// An offer (provider) or request (consumer) posted in a microcell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyListing {
    pub listing_id: String,
    pub device_id: String,
    pub role: Role,
    pub amount: EnergyAmount,
    pub created_at: f64,
    pub state: ListingState,
}

pub fn percent_to_energy(amount: EnergyAmount, capacity_mwh: f64) -> Result<f64, EnergyError> {
    if !(capacity_mwh > 0.0) {
        return Err(EnergyError::InvalidCapacity(capacity_mwh));
    }
    Ok(capacity_mwh * f64::from(amount.percent()) / 100.0)
}

/// Real-valued, never rounded.
pub fn energy_to_percent(energy_mwh: f64, capacity_mwh: f64) -> Result<f64, EnergyError> {
    if !(capacity_mwh > 0.0) {
        return Err(EnergyError::InvalidCapacity(capacity_mwh));
    }
    if !(energy_mwh >= 0.0) {
        return Err(EnergyError::InvalidEnergy(energy_mwh));
    }
    Ok(100.0 * energy_mwh / capacity_mwh)
}

/// Adds `delta_mwh` to the stored charge. Leaving `[0, capacity]` is an
/// error, never a silent clamp; callers are expected to size steps so the
/// bounds hold.
pub fn apply_delta(batt: BatteryState, delta_mwh: f64) -> Result<BatteryState, EnergyError> {
    let next = batt.charge_mwh + delta_mwh;
    let charge_mwh = if next < 0.0 {
        if next < -BOUND_SLACK_MWH {
            return Err(EnergyError::Depleted {
                charge: batt.charge_mwh,
                delta: delta_mwh,
            });
        }
        0.0
    } else if next > batt.capacity_mwh {
        if next > batt.capacity_mwh + BOUND_SLACK_MWH {
            return Err(EnergyError::Overfull {
                charge: batt.charge_mwh,
                delta: delta_mwh,
                capacity: batt.capacity_mwh,
            });
        }
        batt.capacity_mwh
    } else {
        next
    };
    Ok(BatteryState {
        capacity_mwh: batt.capacity_mwh,
        charge_mwh,
    })
}
