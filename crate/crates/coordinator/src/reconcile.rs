//! Report validation and dual-log reconciliation.

use eaas_core::{Role, TelemetrySample};

use crate::error::CoordError;
use crate::model::{Bucket, LossReport, PartyReport};

pub const DEFAULT_BUCKET_S: f64 = 300.0;
/// Final battery vs. last sample agreement, mWh.
pub const FINAL_TOLERANCE_MWH: f64 = 1e-6;
const LOSS_TOLERANCE_MWH: f64 = 1e-6;

/// Checks a report against the rules every party report must satisfy, plus
/// the direction its charge may move in for `role`.
pub fn validate_report(report: &PartyReport, role: Role) -> Result<(), CoordError> {
    let log = &report.log;
    let Some(last) = log.last() else {
        return Err(CoordError::validation("log must be non-empty").with_detail(&report.device_id));
    };
    if let Some(s) = log
        .iter()
        .find(|s| !s.t_s.is_finite() || !s.charge_mwh.is_finite() || !s.level_percent.is_finite())
    {
        return Err(CoordError::validation("log values must be finite").with_detail(format!("t_s={}", s.t_s)));
    }
    if let Some(i) = log.windows(2).position(|w| w[1].t_s <= w[0].t_s) {
        return Err(
            CoordError::validation("log timestamps must be strictly increasing")
                .with_detail(format!("sample {} at t_s={}", i + 1, log[i + 1].t_s)),
        );
    }
    let final_charge = report.final_battery.charge_mwh();
    if (final_charge - last.charge_mwh).abs() > FINAL_TOLERANCE_MWH {
        return Err(
            CoordError::validation("final_battery must match the last sample").with_detail(format!(
                "final {final_charge} mWh vs last sample {} mWh",
                last.charge_mwh
            )),
        );
    }
    let bad_step = match role {
        Role::Provider => log.windows(2).position(|w| w[1].charge_mwh > w[0].charge_mwh),
        Role::Consumer => log.windows(2).position(|w| w[1].charge_mwh < w[0].charge_mwh),
    };
    if let Some(i) = bad_step {
        let rule = match role {
            Role::Provider => "provider log must be non-increasing",
            Role::Consumer => "consumer log must be non-decreasing",
        };
        return Err(CoordError::validation(rule).with_detail(format!("sample {} at t_s={}", i + 1, log[i + 1].t_s)));
    }
    Ok(())
}

/// Charge at `t`, interpolated linearly between samples and held constant
/// outside the logged range. Exact at sample times.
pub fn charge_at(log: &[TelemetrySample], t: f64) -> f64 {
    let first = &log[0];
    let last = &log[log.len() - 1];
    if t <= first.t_s {
        return first.charge_mwh;
    }
    if t >= last.t_s {
        return last.charge_mwh;
    }
    let i = log.partition_point(|s| s.t_s <= t);
    let (a, b) = (&log[i - 1], &log[i]);
    if a.t_s == t {
        return a.charge_mwh;
    }
    a.charge_mwh + (b.charge_mwh - a.charge_mwh) * (t - a.t_s) / (b.t_s - a.t_s)
}

pub fn reconcile(
    provider: &PartyReport,
    consumer: &PartyReport,
    bucket_width_s: f64,
) -> Result<LossReport, CoordError> {
    if !(bucket_width_s > 0.0 && bucket_width_s.is_finite()) {
        return Err(CoordError::validation("bucket width must be positive").with_detail(bucket_width_s.to_string()));
    }
    validate_report(provider, Role::Provider)?;
    validate_report(consumer, Role::Consumer)?;
    let (p, c) = (&provider.log, &consumer.log);

    let expended = p[0].charge_mwh - p[p.len() - 1].charge_mwh;
    let gained = c[c.len() - 1].charge_mwh - c[0].charge_mwh;
    let loss = expended - gained;

    let t0 = p[0].t_s.min(c[0].t_s);
    let t1 = p[p.len() - 1].t_s.max(c[c.len() - 1].t_s);
    let span = t1 - t0;
    let n = ((span / bucket_width_s - 1e-9).ceil() as usize).max(1);
    let buckets = (0..n)
        .map(|i| {
            let start_s = t0 + i as f64 * bucket_width_s;
            let end_s = if i + 1 == n {
                t1
            } else {
                t0 + (i + 1) as f64 * bucket_width_s
            };
            let expended_mwh = charge_at(p, start_s) - charge_at(p, end_s);
            let gained_mwh = charge_at(c, end_s) - charge_at(c, start_s);
            Bucket {
                start_s,
                end_s,
                expended_mwh,
                gained_mwh,
                loss_mwh: expended_mwh - gained_mwh,
            }
        })
        .collect();

    let mut flags = Vec::new();
    if loss < -LOSS_TOLERANCE_MWH {
        flags.push(format!("negative-loss: consumer gained {gained} mWh, provider spent {expended} mWh"));
    }
    let (pe, ce) = (p[p.len() - 1].t_s, c[c.len() - 1].t_s);
    if (pe - ce).abs() > 1e-6 {
        flags.push(format!("log-end-mismatch: provider {pe} s, consumer {ce} s"));
    }
    Ok(LossReport {
        provider_expended_mwh: expended,
        consumer_gained_mwh: gained,
        loss_mwh: loss,
        duration_s: span,
        bucket_width_s,
        buckets,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use eaas_core::{BatteryState, EndReason};

    fn report(id: &str, cap: f64, points: &[(f64, f64)]) -> PartyReport {
        let log: Vec<_> = points
            .iter()
            .map(|&(t, c)| TelemetrySample {
                t_s: t,
                level_percent: 100.0 * c / cap,
                charge_mwh: c,
            })
            .collect();
        PartyReport {
            device_id: id.into(),
            final_battery: BatteryState::new(cap, points.last().unwrap().1).unwrap(),
            log,
            end_reason: EndReason::DurationElapsed,
        }
    }

    #[test]
    fn interpolation() {
        let r = report("p", 100.0, &[(0.0, 80.0), (10.0, 70.0), (20.0, 50.0)]);
        assert_eq!(charge_at(&r.log, -1.0), 80.0);
        assert_eq!(charge_at(&r.log, 10.0), 70.0);
        assert_eq!(charge_at(&r.log, 15.0), 60.0);
        assert_eq!(charge_at(&r.log, 25.0), 50.0);
    }

    #[test]
    fn buckets_split_at_edges() {
        let p = report("p", 100.0, &[(0.0, 80.0), (10.0, 70.0), (20.0, 60.0)]);
        let c = report("c", 100.0, &[(0.0, 10.0), (10.0, 15.0), (20.0, 20.0)]);
        let r = reconcile(&p, &c, 15.0).unwrap();
        assert_eq!(r.buckets.len(), 2);
        assert_eq!(r.buckets[0].expended_mwh, 15.0);
        assert_eq!(r.buckets[0].gained_mwh, 7.5);
        assert_eq!(r.buckets[1].end_s, 20.0);
        assert_eq!(r.loss_mwh, 10.0);
        assert!(r.flags.is_empty());
    }

    #[test]
    fn wide_bucket_is_single() {
        let p = report("p", 100.0, &[(0.0, 80.0), (10.0, 70.0)]);
        let c = report("c", 100.0, &[(0.0, 10.0), (10.0, 16.0)]);
        let r = reconcile(&p, &c, 1e6).unwrap();
        assert_eq!(r.buckets.len(), 1);
        assert_eq!(r.buckets[0].loss_mwh, r.loss_mwh);
    }

    #[test]
    fn single_sample_logs() {
        let p = report("p", 100.0, &[(0.0, 80.0)]);
        let c = report("c", 100.0, &[(0.0, 10.0)]);
        let r = reconcile(&p, &c, 300.0).unwrap();
        assert_eq!(r.buckets.len(), 1);
        assert_eq!((r.provider_expended_mwh, r.consumer_gained_mwh, r.loss_mwh), (0.0, 0.0, 0.0));
    }

    #[test]
    fn same_log_for_both_parties_is_rejected() {
        let p = report("p", 100.0, &[(0.0, 80.0), (5.0, 79.0)]);
        let err = reconcile(&p, &p, 300.0).unwrap_err();
        assert_eq!(err.message, "consumer log must be non-decreasing");
    }

    #[test]
    fn validation_rules() {
        let empty = PartyReport {
            log: vec![],
            ..report("p", 100.0, &[(0.0, 80.0)])
        };
        assert_eq!(validate_report(&empty, Role::Provider).unwrap_err().message, "log must be non-empty");

        let dup = report("p", 100.0, &[(0.0, 80.0), (0.0, 79.0)]);
        assert_eq!(
            validate_report(&dup, Role::Provider).unwrap_err().message,
            "log timestamps must be strictly increasing"
        );

        let mut off = report("p", 100.0, &[(0.0, 80.0), (5.0, 79.0)]);
        off.final_battery = BatteryState::new(100.0, 78.0).unwrap();
        assert_eq!(
            validate_report(&off, Role::Provider).unwrap_err().message,
            "final_battery must match the last sample"
        );

        let rising = report("p", 100.0, &[(0.0, 80.0), (5.0, 81.0)]);
        assert!(validate_report(&rising, Role::Provider).is_err());
        assert!(validate_report(&rising, Role::Consumer).is_ok());
    }

    #[test]
    fn lossless_buckets_are_zero() {
        let p = report("p", 100.0, &[(0.0, 80.0), (5.0, 75.0), (10.0, 70.0), (12.0, 68.0)]);
        let c = report("c", 100.0, &[(0.0, 10.0), (5.0, 15.0), (10.0, 20.0), (12.0, 22.0)]);
        let r = reconcile(&p, &c, 4.0).unwrap();
        assert!(r.buckets.iter().all(|b| b.loss_mwh.abs() < 1e-12));
    }

    #[test]
    fn bad_bucket_width() {
        let p = report("p", 100.0, &[(0.0, 80.0)]);
        let c = report("c", 100.0, &[(0.0, 10.0)]);
        assert!(reconcile(&p, &c, 0.0).is_err());
        assert!(reconcile(&p, &c, f64::NAN).is_err());
    }
}
