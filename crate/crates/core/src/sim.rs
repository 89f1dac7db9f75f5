//! Discrete-time model of wireless energy transfer between one provider and
//! one consumer battery.
//!
//! The provider drains at a constant power; the consumer receives a constant
//! fraction of it and the remainder is lost to the wireless link. Samples
//! are taken every sampling period, and the final step is shortened so the
//! first binding termination constraint is hit exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::energy::{apply_delta, BatteryState, EnergyError};
use crate::telemetry::TelemetrySample;

/// Joules in one milliwatt-hour.
const JOULES_PER_MWH: f64 = 3.6;

/// Relative tolerance used when deciding whether a constraint binds.
const BIND_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid transfer parameters: {0}")]
    InvalidParams(String),
    #[error("invalid termination goal: {0}")]
    InvalidGoal(String),
    #[error("provider at {level:.3}% is at or below its {floor:.3}% floor")]
    ProviderAtFloor { level: f64, floor: f64 },
    #[error(transparent)]
    Energy(#[from] EnergyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferParams {
    pub drain_power_w: f64,
    pub efficiency: f64,
    pub sampling_period_s: f64,
    pub provider_floor_percent: f64,
    /// Simulated seconds per wall second. `None` runs on a pure virtual clock.
    pub time_acceleration: Option<f64>,
}

impl Default for TransferParams {
    fn default() -> Self {
        Self {
            drain_power_w: 3.0,
            efficiency: 0.6,
            sampling_period_s: 5.0,
            provider_floor_percent: 20.0,
            time_acceleration: None,
        }
    }
}

impl TransferParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidParams(m.to_string()));
        if !(self.drain_power_w > 0.0 && self.drain_power_w.is_finite()) {
            return bad("drain_power_w must be > 0");
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return bad("efficiency must be in (0, 1]");
        }
        if !(self.sampling_period_s > 0.0 && self.sampling_period_s.is_finite()) {
            return bad("sampling_period_s must be > 0");
        }
        if !(0.0..100.0).contains(&self.provider_floor_percent) {
            return bad("provider_floor_percent must be in [0, 100)");
        }
        if let Some(a) = self.time_acceleration {
            if !(a >= 1.0 && a.is_finite()) {
                return bad("time_acceleration must be >= 1");
            }
        }
        Ok(())
    }

    /// Provider-side drain in mWh per second.
    fn drop_rate(&self) -> f64 {
        self.drain_power_w / JOULES_PER_MWH
    }

    fn gain_rate(&self) -> f64 {
        self.efficiency * self.drop_rate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TerminationGoal {
    /// Stop when the provider has spent `offer_cap_mwh` or the consumer has
    /// gained `request_target_mwh`, whichever binds first.
    AmountTarget {
        offer_cap_mwh: f64,
        request_target_mwh: f64,
    },
    DurationTarget { duration_s: f64 },
}

impl TerminationGoal {
    pub fn validate(&self) -> Result<(), SimError> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        match *self {
            TerminationGoal::AmountTarget {
                offer_cap_mwh,
                request_target_mwh,
            } if ok(offer_cap_mwh) && ok(request_target_mwh) => Ok(()),
            TerminationGoal::DurationTarget { duration_s } if ok(duration_s) => Ok(()),
            _ => Err(SimError::InvalidGoal("targets must be positive".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    ConsumerTarget,
    ProviderCap,
    ProviderFloor,
    ConsumerFull,
    DurationElapsed,
    Aborted,
}

impl EndReason {
    pub fn as_str(self) -> &'static str {
        match self {
            EndReason::ConsumerTarget => "consumer_target",
            EndReason::ProviderCap => "provider_cap",
            EndReason::ProviderFloor => "provider_floor",
            EndReason::ConsumerFull => "consumer_full",
            EndReason::DurationElapsed => "duration_elapsed",
            EndReason::Aborted => "aborted",
        }
    }
}

impl std::fmt::Display for EndReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionTotals {
    pub provider_expended_mwh: f64,
    pub consumer_gained_mwh: f64,
    pub loss_mwh: f64,
    pub duration_s: f64,
    pub end_reason: EndReason,
}

/// Energy moved by one step of `dt_s` seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepFlow {
    pub drop_mwh: f64,
    pub gain_mwh: f64,
    pub loss_mwh: f64,
}

pub fn step_flow(params: &TransferParams, dt_s: f64) -> StepFlow {
    let drop_mwh = params.drain_power_w * dt_s / JOULES_PER_MWH;
    let gain_mwh = params.efficiency * drop_mwh;
    StepFlow {
        drop_mwh,
        gain_mwh,
        loss_mwh: drop_mwh - gain_mwh,
    }
}

pub fn step_transfer(
    provider: BatteryState,
    consumer: BatteryState,
    params: &TransferParams,
    dt_s: f64,
) -> Result<(BatteryState, BatteryState, f64), SimError> {
    if !(dt_s >= 0.0) {
        return Err(SimError::InvalidParams(format!("dt must be >= 0, got {dt_s}")));
    }
    let flow = step_flow(params, dt_s);
    let provider = apply_delta(provider, -flow.drop_mwh)?;
    let consumer = apply_delta(consumer, flow.gain_mwh)?;
    Ok((provider, consumer, flow.loss_mwh))
}

fn floor_mwh(provider: &BatteryState, params: &TransferParams) -> f64 {
    provider.capacity_mwh() * params.provider_floor_percent / 100.0
}

fn tol(scale: f64) -> f64 {
    BIND_RTOL * scale.abs().max(1.0)
}

/// Remaining headroom of every constraint, in priority order, as
/// `(reason, remaining quantity, tolerance, rate per second)`.
#[allow(clippy::too_many_arguments)]
fn constraints(
    expended_mwh: f64,
    gained_mwh: f64,
    provider: &BatteryState,
    consumer: &BatteryState,
    goal: &TerminationGoal,
    params: &TransferParams,
    elapsed_s: f64,
) -> Vec<(EndReason, f64, f64, f64)> {
    let mut out = Vec::with_capacity(4);
    match *goal {
        TerminationGoal::DurationTarget { duration_s } => {
            out.push((EndReason::DurationElapsed, duration_s - elapsed_s, tol(duration_s), 1.0));
        }
        TerminationGoal::AmountTarget {
            offer_cap_mwh,
            request_target_mwh,
        } => {
            out.push((
                EndReason::ConsumerTarget,
                request_target_mwh - gained_mwh,
                tol(request_target_mwh),
                params.gain_rate(),
            ));
            out.push((
                EndReason::ProviderCap,
                offer_cap_mwh - expended_mwh,
                tol(offer_cap_mwh),
                params.drop_rate(),
            ));
        }
    }
    out.push((
        EndReason::ProviderFloor,
        provider.charge_mwh() - floor_mwh(provider, params),
        tol(provider.capacity_mwh()),
        params.drop_rate(),
    ));
    out.push((
        EndReason::ConsumerFull,
        consumer.headroom_mwh(),
        tol(consumer.capacity_mwh()),
        params.gain_rate(),
    ));
    out
}

/// First binding reason in priority order
/// `DurationElapsed > ConsumerTarget > ProviderCap > ProviderFloor > ConsumerFull`.
pub fn should_terminate(
    expended_mwh: f64,
    gained_mwh: f64,
    provider: &BatteryState,
    consumer: &BatteryState,
    goal: &TerminationGoal,
    params: &TransferParams,
    elapsed_s: f64,
) -> Option<EndReason> {
    constraints(expended_mwh, gained_mwh, provider, consumer, goal, params, elapsed_s)
        .into_iter()
        .find(|&(_, remaining, tol, _)| remaining <= tol)
        .map(|(reason, ..)| reason)
}

/// Largest step (at most one sampling period) that exceeds no constraint,
/// plus the reason if a constraint becomes exactly binding at that step.
pub fn clamp_final_dt(
    provider: &BatteryState,
    consumer: &BatteryState,
    params: &TransferParams,
    goal: &TerminationGoal,
    expended_so_far_mwh: f64,
    gained_so_far_mwh: f64,
    elapsed_s: f64,
) -> (f64, Option<EndReason>) {
    if let Some(reason) = should_terminate(
        expended_so_far_mwh,
        gained_so_far_mwh,
        provider,
        consumer,
        goal,
        params,
        elapsed_s,
    ) {
        return (0.0, Some(reason));
    }
    let period = params.sampling_period_s;
    let time_tol = tol(period);
    let times: Vec<(EndReason, f64)> = constraints(
        expended_so_far_mwh,
        gained_so_far_mwh,
        provider,
        consumer,
        goal,
        params,
        elapsed_s,
    )
    .into_iter()
    .map(|(reason, remaining, _, rate)| (reason, remaining / rate))
    .collect();

    let earliest = times.iter().map(|&(_, t)| t).fold(f64::INFINITY, f64::min);
    if earliest > period + time_tol {
        return (period, None);
    }
    let reason = times
        .iter()
        .find(|&&(_, t)| t <= earliest + time_tol)
        .map(|&(r, _)| r);
    // Snap onto the sampling grid when the binding lands within float noise of it.
    let dt = if (earliest - period).abs() <= time_tol {
        period
    } else {
        earliest.max(0.0)
    };
    (dt, reason)
}

/// Stepwise state of one transfer. Both the pure simulator and the provider
/// agent drive the energy flow through this type.
#[derive(Debug, Clone)]
pub struct TransferRun {
    params: TransferParams,
    goal: TerminationGoal,
    provider: BatteryState,
    consumer: BatteryState,
    expended_mwh: f64,
    gained_mwh: f64,
    elapsed_s: f64,
    provider_log: Vec<TelemetrySample>,
    consumer_log: Vec<TelemetrySample>,
    end: Option<EndReason>,
}

impl TransferRun {
    pub fn start(
        provider: BatteryState,
        consumer: BatteryState,
        params: TransferParams,
        goal: TerminationGoal,
    ) -> Result<Self, SimError> {
        params.validate()?;
        goal.validate()?;
        let floor = params.provider_floor_percent;
        if provider.level_percent() <= floor {
            return Err(SimError::ProviderAtFloor {
                level: provider.level_percent(),
                floor,
            });
        }
        Ok(Self {
            params,
            goal,
            provider,
            consumer,
            expended_mwh: 0.0,
            gained_mwh: 0.0,
            elapsed_s: 0.0,
            provider_log: vec![TelemetrySample::of(0.0, &provider)],
            consumer_log: vec![TelemetrySample::of(0.0, &consumer)],
            end: None,
        })
    }

    pub fn elapsed_s(&self) -> f64 {
        self.elapsed_s
    }

    pub fn provider(&self) -> &BatteryState {
        &self.provider
    }

    pub fn consumer(&self) -> &BatteryState {
        &self.consumer
    }

    pub fn expended_mwh(&self) -> f64 {
        self.expended_mwh
    }

    pub fn gained_mwh(&self) -> f64 {
        self.gained_mwh
    }

    pub fn end_reason(&self) -> Option<EndReason> {
        self.end
    }

    pub fn provider_log(&self) -> &[TelemetrySample] {
        &self.provider_log
    }

    pub fn consumer_log(&self) -> &[TelemetrySample] {
        &self.consumer_log
    }

    /// The step the next call to [`advance`](Self::advance) will take.
    pub fn next_step(&self) -> (f64, Option<EndReason>) {
        if let Some(r) = self.end {
            return (0.0, Some(r));
        }
        clamp_final_dt(
            &self.provider,
            &self.consumer,
            &self.params,
            &self.goal,
            self.expended_mwh,
            self.gained_mwh,
            self.elapsed_s,
        )
    }

    fn step(&mut self, dt: f64) -> Result<(), SimError> {
        if dt <= 0.0 {
            return Ok(());
        }
        let flow = step_flow(&self.params, dt);
        self.provider = apply_delta(self.provider, -flow.drop_mwh)?;
        self.consumer = apply_delta(self.consumer, flow.gain_mwh)?;
        self.expended_mwh += flow.drop_mwh;
        self.gained_mwh += flow.gain_mwh;
        self.elapsed_s += dt;
        self.provider_log
            .push(TelemetrySample::of(self.elapsed_s, &self.provider));
        self.consumer_log
            .push(TelemetrySample::of(self.elapsed_s, &self.consumer));
        Ok(())
    }

    /// Takes one sampling step. Returns the end reason once the run is over.
    pub fn advance(&mut self) -> Result<Option<EndReason>, SimError> {
        if self.end.is_some() {
            return Ok(self.end);
        }
        let (dt, reason) = self.next_step();
        self.step(dt)?;
        self.end = reason;
        Ok(reason)
    }

    /// Ends the run early at `t_s` (clamped to the constraints), taking a final
    /// partial step and sample so the logs cover the flow up to the abort.
    pub fn abort_at(&mut self, t_s: f64) -> Result<EndReason, SimError> {
        while self.end.is_none() {
            let remaining = t_s - self.elapsed_s;
            let (dt, reason) = self.next_step();
            if dt <= remaining {
                self.step(dt)?;
                self.end = reason;
                if reason.is_none() && dt >= remaining {
                    break;
                }
            } else {
                self.step(remaining.max(0.0))?;
                break;
            }
        }
        let reason = *self.end.get_or_insert(EndReason::Aborted);
        Ok(reason)
    }

    pub fn totals(&self) -> SessionTotals {
        SessionTotals {
            provider_expended_mwh: self.expended_mwh,
            consumer_gained_mwh: self.gained_mwh,
            loss_mwh: self.expended_mwh - self.gained_mwh,
            duration_s: self.elapsed_s,
            end_reason: self.end.unwrap_or(EndReason::Aborted),
        }
    }

    pub fn into_logs(self) -> (Vec<TelemetrySample>, Vec<TelemetrySample>) {
        (self.provider_log, self.consumer_log)
    }
}

pub struct SessionOutcome {
    pub provider_log: Vec<TelemetrySample>,
    pub consumer_log: Vec<TelemetrySample>,
    pub totals: SessionTotals,
}

/// Runs a transfer to completion on a virtual clock.
pub fn simulate_session(
    provider0: BatteryState,
    consumer0: BatteryState,
    params: TransferParams,
    goal: TerminationGoal,
) -> Result<SessionOutcome, SimError> {
    let mut run = TransferRun::start(provider0, consumer0, params, goal)?;
    while run.advance()?.is_none() {}
    let totals = run.totals();
    let (provider_log, consumer_log) = run.into_logs();
    Ok(SessionOutcome {
        provider_log,
        consumer_log,
        totals,
    })
}
