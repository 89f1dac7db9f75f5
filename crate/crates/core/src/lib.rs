//! Core building blocks for peer-to-peer wireless energy sharing: energy
//! arithmetic, the transfer simulator, the proximity link and the session
//! protocol between a provider and a consumer device.

pub mod clock;
pub mod energy;
pub mod link;
pub mod protocol;
pub mod sim;
pub mod telemetry;

pub use clock::SimClock;
pub use energy::{
    apply_delta, energy_to_percent, percent_to_energy, BatteryState, DeviceProfile, EnergyAmount,
    EnergyError, EnergyListing, ListingState, Role,
};
pub use sim::{
    clamp_final_dt, should_terminate, simulate_session, step_transfer, EndReason, SessionTotals,
    SimError, TerminationGoal, TransferParams, TransferRun,
};
pub use telemetry::TelemetrySample;
