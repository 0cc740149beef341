//! Ranking metrics for a single held-out target and the seed-level report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub const REPORT_KS: [usize; 3] = [1, 5, 10];

/// 1-based rank of `target` in `ranked`.
fn rank(ranked: &[usize], target: usize) -> Option<usize> {
    ranked.iter().position(|&c| c == target).map(|p| p + 1)
}

pub fn hr_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    match rank(ranked, target) {
        Some(r) if r <= k => 1.0,
        _ => 0.0,
    }
}

/// Single-relevant-item NDCG: the ideal DCG is 1.
pub fn ndcg_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    match rank(ranked, target) {
        Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

pub fn mrr_at_k(ranked: &[usize], target: usize, k: usize) -> f64 {
    match rank(ranked, target) {
        Some(r) if r <= k => 1.0 / r as f64,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "HR")]
    Hr,
    #[serde(rename = "NDCG")]
    Ndcg,
    #[serde(rename = "MRR")]
    Mrr,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Hr, Metric::Ndcg, Metric::Mrr];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Hr => "HR",
            Metric::Ndcg => "NDCG",
            Metric::Mrr => "MRR",
        }
    }

    pub fn at(self, ranked: &[usize], target: usize, k: usize) -> f64 {
        match self {
            Metric::Hr => hr_at_k(ranked, target, k),
            Metric::Ndcg => ndcg_at_k(ranked, target, k),
            Metric::Mrr => mrr_at_k(ranked, target, k),
        }
    }
}

/// One ranked list and the item it should have surfaced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingOutcome {
    pub target: usize,
    pub ranked: Vec<usize>,
}

/// Mean of `metric@k` over outcomes (0 for none).
pub fn mean_metric(outcomes: &[RankingOutcome], metric: Metric, k: usize) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes
        .iter()
        .map(|o| metric.at(&o.ranked, o.target, k))
        .sum::<f64>()
        / outcomes.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Seed as text, or `mean` for the across-seed average.
    pub seed: String,
    pub mode: String,
    pub metric: Metric,
    pub k: usize,
    pub value: f64,
}

/// Per-seed means over test targets plus their mean over seeds.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<ReportRow>,
}

impl MetricReport {
    /// Add one seed's outcomes for `mode`.
    pub fn add_seed(&mut self, seed: u64, mode: &str, outcomes: &[RankingOutcome]) {
        for metric in Metric::ALL {
            for k in REPORT_KS {
                self.rows.push(ReportRow {
                    seed: seed.to_string(),
                    mode: mode.to_string(),
                    metric,
                    k,
                    value: mean_metric(outcomes, metric, k),
                });
            }
        }
    }

    /// Append `mean` rows averaging each (mode, metric, K) over seeds.
    pub fn finish(&mut self) {
        let mut acc: BTreeMap<(String, Metric, usize), (f64, usize)> = BTreeMap::new();
        let mut order = Vec::new();
        for r in self.rows.iter().filter(|r| r.seed != "mean") {
            let key = (r.mode.clone(), r.metric, r.k);
            if !acc.contains_key(&key) {
                order.push(key.clone());
            }
            let e = acc.entry(key).or_insert((0.0, 0));
            e.0 += r.value;
            e.1 += 1;
        }
        for key in order {
            let (sum, n) = acc[&key];
            self.rows.push(ReportRow {
                seed: "mean".into(),
                mode: key.0,
                metric: key.1,
                k: key.2,
                value: sum / n as f64,
            });
        }
    }

    pub fn value(&self, seed: &str, mode: &str, metric: Metric, k: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.seed == seed && r.mode == mode && r.metric == metric && r.k == k)
            .map(|r| r.value)
    }

    /// CSV with header `seed,mode,metric,K,value`; values printed to 6 decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,mode,metric,K,value\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6}",
                r.seed,
                r.mode,
                r.metric.name(),
                r.k,
                r.value
            );
        }
        out
    }

    /// Fixed-width table of the `mean` rows.
    pub fn summary(&self) -> String {
        let mut modes: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !modes.contains(&r.mode.as_str()) {
                modes.push(&r.mode);
            }
        }
        let mut out = format!("{:<22}", "mode");
        for m in Metric::ALL {
            for k in REPORT_KS {
                let _ = write!(out, "{:>9}", format!("{}@{k}", m.name()));
            }
        }
        out.push('\n');
        for mode in modes {
            let _ = write!(out, "{mode:<22}");
            for m in Metric::ALL {
                for k in REPORT_KS {
                    match self.value("mean", mode, m, k) {
                        Some(v) => {
                            let _ = write!(out, "{v:>9.4}");
                        }
                        None => out.push_str(&format!("{:>9}", "-")),
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let r = [4, 7, 9, 1, 2, 3];
        assert_eq!(hr_at_k(&r, 4, 1), 1.0);
        assert_eq!(hr_at_k(&r, 7, 1), 0.0);
        assert_eq!(hr_at_k(&r, 42, 5), 0.0);
        assert_eq!(ndcg_at_k(&r, 4, 5), 1.0);
        assert!((ndcg_at_k(&r, 7, 5) - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&r, 3, 5), 0.0);
        assert!((mrr_at_k(&r, 9, 5) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mrr_at_k(&r, 4, 5), 1.0);
        assert_eq!(mrr_at_k(&r, 3, 5), 0.0);
    }

    #[test]
    fn report_has_per_seed_and_mean_rows() {
        let mut rep = MetricReport::default();
        let hit = vec![RankingOutcome {
            target: 1,
            ranked: vec![1, 2],
        }];
        let miss = vec![RankingOutcome {
            target: 1,
            ranked: vec![2, 1],
        }];
        for seed in 0..5 {
            rep.add_seed(
                seed,
                "pref-coarse",
                if seed % 2 == 0 { &hit } else { &miss },
            );
        }
        rep.finish();
        let hr1: Vec<&ReportRow> = rep
            .rows
            .iter()
            .filter(|r| r.metric == Metric::Hr && r.k == 1)
            .collect();
        assert_eq!(hr1.len(), 6);
        assert_eq!(rep.value("mean", "pref-coarse", Metric::Hr, 1), Some(0.6));
        let csv = rep.to_csv();
        assert!(csv.starts_with("seed,mode,metric,K,value\n0,pref-coarse,HR,1,1.000000\n"));
        assert!(rep.summary().contains("pref-coarse"));
    }
}
