use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Headline numbers of one run. Field order is the JSON key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Pseudo-label argmax agreement with the hidden truth.
    pub assignment_recovery: Option<f64>,
    /// Step probe on `f(x)` of downstream segments.
    pub probe_accuracy: Option<f64>,
    /// The same probe on raw segment features.
    pub raw_probe_accuracy: Option<f64>,
    /// Transformer accuracy on downstream activity classes.
    pub task_accuracy: f64,
    /// Next-step accuracy.
    pub forecast_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub mode: String,
    pub assignment_recovery: Option<f64>,
    pub probe_accuracy: Option<f64>,
    pub task_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub digest: String,
    pub cache_hit: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
    pub metrics: Metrics,
    /// One row per supervision mode, all with basic transformer input.
    pub comparison: Vec<ComparisonRow>,
    /// Modes by descending task accuracy; ties keep comparison order.
    pub ranking: Vec<String>,
    pub stages: Vec<StageRecord>,
    pub wall_clock_s: f64,
}

/// The run-independent part of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
    pub metrics: Metrics,
    pub comparison: Vec<ComparisonRow>,
    pub ranking: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::Config(format!("unknown report format {s:?}; expected table or json"))),
        }
    }
}

pub fn rank_modes(rows: &[ComparisonRow]) -> Vec<String> {
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.sort_by(|&a, &b| rows[b].task_accuracy.total_cmp(&rows[a].task_accuracy).then(a.cmp(&b)));
    idx.into_iter().map(|i| rows[i].mode.clone()).collect()
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.1}%", 100.0 * x))
}

impl ExperimentReport {
    pub fn summary(&self) -> MetricSummary {
        MetricSummary {
            config_digest: self.config_digest.clone(),
            seeds: self.seeds.clone(),
            metrics: self.metrics.clone(),
            comparison: self.comparison.clone(),
            ranking: self.ranking.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Table => Ok(self.to_table()),
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let m = &self.metrics;
        let _ = writeln!(s, "config {}", &self.config_digest[..self.config_digest.len().min(16)]);
        let seeds: Vec<String> = self.seeds.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(s, "seeds  {}", seeds.join(" "));
        let _ = writeln!(s);
        for (name, v) in [
            ("assignment recovery", m.assignment_recovery),
            ("probe accuracy f(x)", m.probe_accuracy),
            ("probe accuracy raw", m.raw_probe_accuracy),
            ("task accuracy", Some(m.task_accuracy)),
            ("forecast accuracy", m.forecast_accuracy),
        ] {
            let _ = writeln!(s, "{name:<22}{:>8}", pct(v));
        }
        if !self.comparison.is_empty() {
            let _ = writeln!(s);
            let _ = writeln!(s, "{:<18}{:>10}{:>10}{:>10}", "mode", "recovery", "probe", "task");
            for r in &self.comparison {
                let _ = writeln!(
                    s,
                    "{:<18}{:>10}{:>10}{:>10}",
                    r.mode,
                    pct(r.assignment_recovery),
                    pct(r.probe_accuracy),
                    pct(Some(r.task_accuracy))
                );
            }
            let _ = writeln!(s, "ranking: {}", self.ranking.join(" > "));
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<22}{:>8}{:>10}  digest", "stage", "cached", "seconds");
        for st in &self.stages {
            let _ = writeln!(
                s,
                "{:<22}{:>8}{:>10.3}  {}",
                st.stage,
                if st.cache_hit { "yes" } else { "no" },
                st.seconds,
                &st.digest[..st.digest.len().min(12)]
            );
        }
        let _ = writeln!(s, "wall clock {:.2} s", self.wall_clock_s);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(mode: &str, task: f64) -> ComparisonRow {
        ComparisonRow {
            mode: mode.into(),
            assignment_recovery: None,
            probe_accuracy: None,
            task_accuracy: task,
        }
    }

    #[test]
    fn ranking_is_stable() {
        let rows = [row("full", 0.9), row("task_id", 0.5), row("kmeans", 0.9)];
        assert_eq!(rank_modes(&rows), ["full", "kmeans", "task_id"]);
    }

    #[test]
    fn json_key_order_is_fixed() {
        let r = ExperimentReport {
            config_digest: "ab".repeat(32),
            seeds: [("z".to_string(), 1), ("a".to_string(), 2)].into(),
            metrics: Metrics {
                assignment_recovery: Some(0.5),
                probe_accuracy: None,
                raw_probe_accuracy: None,
                task_accuracy: 1.0,
                forecast_accuracy: None,
            },
            comparison: vec![row("full", 1.0)],
            ranking: vec!["full".into()],
            stages: vec![],
            wall_clock_s: 0.1,
        };
        let json = r.to_json().unwrap();
        let pos = |k: &str| json.find(k).unwrap();
        assert!(pos("config_digest") < pos("seeds") && pos("seeds") < pos("metrics"));
        assert!(pos("\"a\"") < pos("\"z\""));
        assert_eq!(ExperimentReport::from_json(&json).unwrap(), r);
        assert!(r.to_table().contains("ranking: full"));
    }
}
