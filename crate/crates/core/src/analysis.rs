//! Routing histograms, experiment reports and report comparison.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Default cumulative-probability cutoff for dominant classes.
pub const DOMINANT_CUTOFF: f64 = 0.85;

/// Class-by-unit sample counts of one routed block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingHistogram {
    /// Block index the counted units belong to.
    pub block: usize,
    /// `counts[class][unit]`.
    pub counts: Vec<Vec<u64>>,
}

impl RoutingHistogram {
    pub fn new(block: usize, classes: usize, units: usize) -> Self {
        RoutingHistogram { block, counts: vec![vec![0; units]; classes] }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn units(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn record(&mut self, class: usize, unit: usize) {
        self.counts[class][unit] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn class_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn unit_totals(&self) -> Vec<u64> {
        (0..self.units()).map(|k| self.counts.iter().map(|r| r[k]).sum()).collect()
    }

    /// Row-normalised frequencies: where each class goes. Empty classes give zero rows.
    pub fn class_frequencies(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n: u64 = row.iter().sum();
                row.iter().map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect()
            })
            .collect()
    }

    /// Class distribution inside one unit, `p(y | Z = unit)`.
    pub fn unit_class_distribution(&self, unit: usize) -> Vec<f64> {
        let n: u64 = self.counts.iter().map(|r| r[unit]).sum();
        self.counts.iter().map(|r| if n == 0 { 0.0 } else { r[unit] as f64 / n as f64 }).collect()
    }

    /// Smallest set of classes, most frequent first, whose share of the unit's
    /// samples reaches `cutoff`.
    pub fn dominant_classes(&self, unit: usize, cutoff: f64) -> Vec<usize> {
        let dist = self.unit_class_distribution(unit);
        let mut order: Vec<usize> = (0..dist.len()).filter(|&c| dist[c] > 0.0).collect();
        order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
        let mut acc = 0.0;
        let mut out = Vec::new();
        for c in order {
            if acc >= cutoff {
                break;
            }
            acc += dist[c];
            out.push(c);
        }
        out
    }

    /// Share of a unit's samples that belong to its `k` most frequent classes.
    pub fn top_k_share(&self, unit: usize, k: usize) -> f64 {
        let mut dist = self.unit_class_distribution(unit);
        dist.sort_by(|a, b| b.total_cmp(a));
        dist.iter().take(k).sum()
    }

    /// CSV with header `class,unit_0,...,unit_{K-1}` and one row per class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class");
        for k in 0..self.units() {
            let _ = write!(s, ",unit_{k}");
        }
        s.push('\n');
        for (c, row) in self.counts.iter().enumerate() {
            let _ = write!(s, "{c}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Pearson chi-square test of independence between class and unit.
    pub fn independence_test(&self) -> ChiSquareTest {
        chi_square_independence(&self.counts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Chi-square independence test on a contingency table. Empty rows and columns are dropped.
pub fn chi_square_independence(table: &[Vec<u64>]) -> ChiSquareTest {
    let rows: Vec<&Vec<u64>> = table.iter().filter(|r| r.iter().sum::<u64>() > 0).collect();
    let width = rows.first().map_or(0, |r| r.len());
    let cols: Vec<usize> = (0..width).filter(|&k| rows.iter().map(|r| r[k]).sum::<u64>() > 0).collect();
    if rows.len() < 2 || cols.len() < 2 {
        return ChiSquareTest { statistic: 0.0, dof: 0, p_value: 1.0 };
    }
    let row_tot: Vec<f64> = rows.iter().map(|r| cols.iter().map(|&k| r[k] as f64).sum()).collect();
    let col_tot: Vec<f64> = cols.iter().map(|&k| rows.iter().map(|r| r[k] as f64).sum()).collect();
    let n: f64 = row_tot.iter().sum();
    let mut stat = 0.0;
    for (i, r) in rows.iter().enumerate() {
        for (j, &k) in cols.iter().enumerate() {
            let e = row_tot[i] * col_tot[j] / n;
            stat += (r[k] as f64 - e).powi(2) / e;
        }
    }
    let dof = (rows.len() - 1) * (cols.len() - 1);
    let p_value = ChiSquared::new(dof as f64).map_or(f64::NAN, |d| 1.0 - d.cdf(stat));
    ChiSquareTest { statistic: stat, dof, p_value }
}

/// Hex SHA-256 of a serialisable configuration's canonical JSON.
pub fn config_digest<S: Serialize>(value: &S) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let hash = Sha256::digest(&bytes);
    Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
}

/// Everything needed to audit and compare a finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub dataset: String,
    pub config_digest: String,
    /// Full configuration (model and training) the run used.
    pub config: serde_json::Value,
    pub seed: u64,
    pub epochs: usize,
    pub steps: u64,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: f64,
    pub eval_routing: String,
    pub params: u64,
    pub macs_per_sample: f64,
    pub histograms: Vec<RoutingHistogram>,
    pub wall_clock_secs: f64,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn render(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ExperimentReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "run            {}", self.name)?;
        writeln!(f, "dataset        {}", self.dataset)?;
        writeln!(f, "config digest  {}", self.config_digest)?;
        writeln!(f, "seed           {}", self.seed)?;
        writeln!(f, "epochs/steps   {}/{}", self.epochs, self.steps)?;
        if let Some(a) = self.train_accuracy {
            writeln!(f, "train accuracy {:.4}", a)?;
        }
        writeln!(f, "test accuracy  {:.4} ({} routing)", self.test_accuracy, self.eval_routing)?;
        writeln!(f, "parameters     {}", self.params)?;
        writeln!(f, "MACs/sample    {:.0}", self.macs_per_sample)?;
        writeln!(f, "wall clock     {:.1} s", self.wall_clock_secs)?;
        for h in &self.histograms {
            writeln!(f, "block {} routing (samples per unit: {:?})", h.block, h.unit_totals())?;
            for k in 0..h.units() {
                writeln!(f, "  unit {k}: dominant classes {:?}", h.dominant_classes(k, DOMINANT_CUTOFF))?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    /// `(b − a) / |a|`, absent when `a` is zero.
    pub relative: Option<f64>,
}

/// Side-by-side accuracy, parameter and MAC figures of two runs on the same dataset.
pub fn compare(a: &ExperimentReport, b: &ExperimentReport) -> Result<Vec<ComparisonRow>> {
    if a.dataset != b.dataset {
        return Err(Error::Config(format!(
            "cannot compare runs on different datasets ({} vs {})",
            a.dataset, b.dataset
        )));
    }
    let row = |metric: &str, x: f64, y: f64| ComparisonRow {
        metric: metric.to_string(),
        a: x,
        b: y,
        delta: y - x,
        relative: if x == 0.0 { None } else { Some((y - x) / x.abs()) },
    };
    Ok(vec![
        row("test_accuracy", a.test_accuracy, b.test_accuracy),
        row("params", a.params as f64, b.params as f64),
        row("macs_per_sample", a.macs_per_sample, b.macs_per_sample),
    ])
}

pub fn render_comparison(a: &ExperimentReport, b: &ExperimentReport, rows: &[ComparisonRow]) -> String {
    let mut s = format!("{:<16} {:>14} {:>14} {:>14} {:>9}\n", "metric", a.name, b.name, "delta", "rel");
    for r in rows {
        let rel = r.relative.map_or("-".to_string(), |v| format!("{:+.2}%", v * 100.0));
        let _ = writeln!(s, "{:<16} {:>14.6} {:>14.6} {:>+14.6} {:>9}", r.metric, r.a, r.b, r.delta, rel);
    }
    s
}
