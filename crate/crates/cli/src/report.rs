//! Loss report rendering: CSV for machines, a bar chart for people.

use std::fmt::Write as _;

use eaas_coordinator::LossReport;

pub const CSV_HEADER: &str = "start_s,end_s,expended_mwh,gained_mwh,loss_mwh";
const BAR_WIDTH: usize = 30;

/// Rounds `values` to whole micro-units so that they add up to `total`
/// rounded the same way: floors first, then the remaining units go to the
/// largest fractional parts.
fn apportion(values: &[f64], total: f64) -> Vec<i64> {
    let scaled: Vec<f64> = values.iter().map(|v| v * 1e6).collect();
    let mut units: Vec<i64> = scaled.iter().map(|v| v.floor() as i64).collect();
    let target = (total * 1e6).round() as i64;
    let mut remaining = target - units.iter().sum::<i64>();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = scaled[a] - scaled[a].floor();
        let fb = scaled[b] - scaled[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut i = 0;
    while remaining != 0 && !order.is_empty() {
        let k = order[i % order.len()];
        units[k] += remaining.signum();
        remaining -= remaining.signum();
        i += 1;
    }
    units
}

fn micro(units: i64) -> String {
    let sign = if units < 0 { "-" } else { "" };
    let u = units.unsigned_abs();
    format!("{sign}{}.{:06}", u / 1_000_000, u % 1_000_000)
}

/// Bucket columns rounded to 6 decimals; each column sums exactly to the
/// printed total.
fn columns(r: &LossReport) -> [Vec<i64>; 3] {
    let col = |f: fn(&eaas_coordinator::Bucket) -> f64| r.buckets.iter().map(f).collect::<Vec<_>>();
    [
        apportion(&col(|b| b.expended_mwh), r.provider_expended_mwh),
        apportion(&col(|b| b.gained_mwh), r.consumer_gained_mwh),
        apportion(&col(|b| b.loss_mwh), r.loss_mwh),
    ]
}

pub fn to_csv(r: &LossReport) -> String {
    let [e, g, l] = columns(r);
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (i, b) in r.buckets.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:.6},{:.6},{},{},{}",
            b.start_s,
            b.end_s,
            micro(e[i]),
            micro(g[i]),
            micro(l[i])
        );
    }
    out
}

fn bar(value: f64, max: f64, ch: char) -> String {
    let n = if max > 0.0 {
        ((value / max) * BAR_WIDTH as f64).round().clamp(0.0, BAR_WIDTH as f64) as usize
    } else {
        0
    };
    std::iter::repeat_n(ch, n).collect()
}

/// One row per bucket with expended (`#`), gained (`=`) and loss (`!`)
/// bars on a shared scale, then the totals.
pub fn to_text(transaction_id: &str, r: &LossReport) -> String {
    let [e, g, l] = columns(r);
    let max = r
        .buckets
        .iter()
        .map(|b| b.expended_mwh.max(b.gained_mwh).max(b.loss_mwh))
        .fold(0.0, f64::max);
    let mut out = format!(
        "transaction {transaction_id}  bucket {} s  duration {:.3} s\n",
        r.bucket_width_s, r.duration_s
    );
    let _ = writeln!(
        out,
        "{:>10} {:>10}  {:>14} {:>14} {:>14}  chart (# expended, = gained, ! loss)",
        "start_s", "end_s", "expended_mwh", "gained_mwh", "loss_mwh"
    );
    for (i, b) in r.buckets.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:>10.1} {:>10.1}  {:>14} {:>14} {:>14}  {:<w$} | {:<w$} | {}",
            b.start_s,
            b.end_s,
            micro(e[i]),
            micro(g[i]),
            micro(l[i]),
            bar(b.expended_mwh, max, '#'),
            bar(b.gained_mwh, max, '='),
            bar(b.loss_mwh, max, '!'),
            w = BAR_WIDTH,
        );
    }
    let _ = writeln!(
        out,
        "{:>21}  {:>14} {:>14} {:>14}",
        "total",
        micro((r.provider_expended_mwh * 1e6).round() as i64),
        micro((r.consumer_gained_mwh * 1e6).round() as i64),
        micro((r.loss_mwh * 1e6).round() as i64),
    );
    if !r.flags.is_empty() {
        let _ = writeln!(out, "flags: {}", r.flags.join(", "));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use eaas_coordinator::Bucket;

    fn report(buckets: Vec<(f64, f64, f64, f64)>) -> LossReport {
        let buckets: Vec<Bucket> = buckets
            .into_iter()
            .map(|(s, e, x, g)| Bucket {
                start_s: s,
                end_s: e,
                expended_mwh: x,
                gained_mwh: g,
                loss_mwh: x - g,
            })
            .collect();
        let x: f64 = buckets.iter().map(|b| b.expended_mwh).sum();
        let g: f64 = buckets.iter().map(|b| b.gained_mwh).sum();
        LossReport {
            provider_expended_mwh: x,
            consumer_gained_mwh: g,
            loss_mwh: x - g,
            duration_s: buckets.last().map_or(0.0, |b| b.end_s),
            bucket_width_s: 300.0,
            buckets,
            flags: vec![],
        }
    }

    #[test]
    fn csv_rows() {
        let r = report(vec![(0.0, 300.0, 250.0, 150.0), (300.0, 450.0, 125.0, 75.0)]);
        assert_eq!(
            to_csv(&r),
            "start_s,end_s,expended_mwh,gained_mwh,loss_mwh\n\
             0.000000,300.000000,250.000000,150.000000,100.000000\n\
             300.000000,450.000000,125.000000,75.000000,50.000000\n"
        );
    }

    #[test]
    fn printed_columns_sum_to_printed_totals() {
        let third = 1000.0 / 3.0;
        let r = report(vec![(0.0, 1.0, third, third * 0.6); 7]);
        let csv = to_csv(&r);
        let mut sums = [0i64; 3];
        for line in csv.lines().skip(1) {
            let cells: Vec<&str> = line.split(',').collect();
            for c in 0..3 {
                sums[c] += cells[c + 2].replace('.', "").parse::<i64>().unwrap();
            }
        }
        assert_eq!(sums[0], (r.provider_expended_mwh * 1e6).round() as i64);
        assert_eq!(sums[1], (r.consumer_gained_mwh * 1e6).round() as i64);
        assert_eq!(sums[2], (r.loss_mwh * 1e6).round() as i64);
    }

    #[test]
    fn text_chart_has_a_loss_column() {
        let r = report(vec![(0.0, 300.0, 250.0, 150.0)]);
        let text = to_text("tx", &r);
        assert!(text.contains(&"#".repeat(30)));
        assert!(text.contains(&format!("| {}", "!".repeat(12))));
        assert!(text.contains("100.000000"));
    }

    #[test]
    fn micro_formatting() {
        assert_eq!(micro(1), "0.000001");
        assert_eq!(micro(-1_500_000), "-1.500000");
    }
}
