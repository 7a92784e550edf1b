//! Text outputs: per-epoch CSVs, the membership-inference table and report.

use std::fmt::Write as _;

use crate::mia::{GroupReport, MiaReport};
use crate::trainer::{EpochRecord, RegimeKind};

pub const EPOCH_HEADER: &str = "epoch,regime,train_acc,test_acc,adv_acc,train_loss,test_loss,epsilon";
pub const MIA_HEADER: &str = "regime,scope,class,n_members,n_nonmembers,accuracy,precision,recall,f1,threshold";

/// Trailing moving average. Entry `i` averages the last `window` values up
/// to and including `i`, or all of them while fewer are available.
pub fn smooth(series: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..series.len())
        .map(|i| {
            // incremental mean: exact on constant stretches
            let lo = (i + 1).saturating_sub(w);
            series[lo..=i]
                .iter()
                .enumerate()
                .fold(0.0, |m, (k, &x)| m + (x - m) / (k + 1) as f64)
        })
        .collect()
}

fn fixed(x: f64) -> String {
    if x.is_infinite() {
        if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{x:.6}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(fixed).unwrap_or_default()
}

pub fn epoch_rows(regime: RegimeKind, records: &[EpochRecord], out: &mut String) {
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            regime.name(),
            fixed(r.train_acc),
            fixed(r.test_acc),
            opt(r.adv_acc),
            fixed(r.mean_train_loss),
            fixed(r.mean_test_loss),
            opt(r.epsilon_so_far),
        );
    }
}

pub fn epoch_csv(regime: RegimeKind, records: &[EpochRecord]) -> String {
    let mut s = format!("{EPOCH_HEADER}\n");
    epoch_rows(regime, records, &mut s);
    s
}

/// Records with accuracies and losses smoothed; epochs and ε unchanged.
pub fn smooth_records(records: &[EpochRecord], window: usize) -> Vec<EpochRecord> {
    let col = |f: fn(&EpochRecord) -> f64| smooth(&records.iter().map(f).collect::<Vec<_>>(), window);
    let train_acc = col(|r| r.train_acc);
    let test_acc = col(|r| r.test_acc);
    let train_loss = col(|r| r.mean_train_loss);
    let test_loss = col(|r| r.mean_test_loss);
    let adv = records
        .iter()
        .all(|r| r.adv_acc.is_some())
        .then(|| col(|r| r.adv_acc.unwrap_or(0.0)));
    records
        .iter()
        .enumerate()
        .map(|(i, r)| EpochRecord {
            epoch: r.epoch,
            train_acc: train_acc[i],
            test_acc: test_acc[i],
            adv_acc: adv.as_ref().map(|a| a[i]),
            mean_train_loss: train_loss[i],
            mean_test_loss: test_loss[i],
            epsilon_so_far: r.epsilon_so_far,
        })
        .collect()
}

/// Membership-inference results of one regime.
#[derive(Debug, Clone, PartialEq)]
pub struct MiaResults {
    /// Regime name, or any label for an audited checkpoint.
    pub label: String,
    pub individual: MiaReport,
    pub groups: Option<GroupReport>,
    pub perturbed_groups: Option<GroupReport>,
}

fn mia_row(out: &mut String, label: &str, scope: &str, class: Option<usize>, r: &MiaReport) {
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},{},{},{}",
        label,
        scope,
        class.map(|c| c.to_string()).unwrap_or_default(),
        r.n_members,
        r.n_nonmembers,
        fixed(r.accuracy),
        fixed(r.precision),
        fixed(r.recall),
        fixed(r.f1),
        if r.threshold.is_finite() {
            format!("{:.9e}", r.threshold)
        } else {
            fixed(r.threshold)
        },
    );
}

pub fn mia_csv(results: &[MiaResults]) -> String {
    let mut s = format!("{MIA_HEADER}\n");
    for m in results {
        mia_row(&mut s, &m.label, "individual", None, &m.individual);
        for (scope, g) in [("group", &m.groups), ("perturbed_group", &m.perturbed_groups)] {
            if let Some(g) = g {
                for (&c, r) in &g.per_class {
                    mia_row(&mut s, &m.label, scope, Some(c), r);
                }
            }
        }
    }
    s
}

fn group_summary(out: &mut String, label: &str, g: &GroupReport) {
    let _ = writeln!(out, "  {label} (weighted accuracy {:.4})", g.weighted_accuracy());
    for (c, r) in &g.per_class {
        let _ = writeln!(
            out,
            "    class {c:>3}: accuracy {:.4}  f1 {:.4}  n = {}",
            r.accuracy,
            r.f1,
            r.n_members + r.n_nonmembers
        );
    }
    if !g.absent.is_empty() {
        let names: Vec<String> = g.absent.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "    too few examples: {}", names.join(", "));
    }
}

/// Human-readable summary; the CSV carries the same numbers.
pub fn mia_text(results: &[MiaResults]) -> String {
    let mut s = String::from("Membership inference audit\n\n");
    for m in results {
        let r = &m.individual;
        let _ = writeln!(s, "[{}]", m.label);
        let _ = writeln!(
            s,
            "  individual: accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}  ({} members, {} non-members)",
            r.accuracy, r.precision, r.recall, r.f1, r.n_members, r.n_nonmembers
        );
        if let Some(g) = &m.groups {
            group_summary(&mut s, "groups", g);
        }
        if let Some(g) = &m.perturbed_groups {
            group_summary(&mut s, "perturbed groups", g);
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_is_a_trailing_mean() {
        assert_eq!(smooth(&[1.0, 2.0, 3.0, 4.0, 5.0], 2), vec![1.0, 1.5, 2.5, 3.5, 4.5]);
        assert_eq!(smooth(&[2.0, 4.0, 6.0], 10), vec![2.0, 3.0, 4.0]);
        assert_eq!(smooth(&[7.0, 1.0], 1), vec![7.0, 1.0]);
        assert!(smooth(&[], 3).is_empty());
    }

    #[test]
    fn smoothing_examples() {
        let xs: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(smooth(&xs, 10)[19], 15.5);
        assert_eq!(smooth(&xs, 1), xs);
        assert_eq!(smooth(&[0.3; 25], 10), vec![0.3; 25]);
    }

    #[test]
    fn smoothing_matches_naive_window() {
        let xs: Vec<f64> = (0..40).map(|i| ((i * 37) % 11) as f64 * 0.25).collect();
        let got = smooth(&xs, 10);
        for i in 0..xs.len() {
            let lo = (i + 1).saturating_sub(10);
            let naive = xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64;
            assert!((got[i] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn epoch_csv_columns() {
        let r = EpochRecord {
            epoch: 1,
            train_acc: 0.5,
            test_acc: 0.25,
            adv_acc: None,
            mean_train_loss: 1.0,
            mean_test_loss: 2.0,
            epsilon_so_far: Some(f64::INFINITY),
        };
        let csv = epoch_csv(RegimeKind::Dp, &[r]);
        assert_eq!(
            csv,
            format!("{EPOCH_HEADER}\n1,dp,0.500000,0.250000,,1.000000,2.000000,inf\n")
        );
    }
}
