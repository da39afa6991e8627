//! JSON reports: config echo, per-method metrics, speedups and a
//! machine-independent environment stamp.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::session::{compute_speedup, Method, Metrics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    pub baseline: Method,
    pub candidate: Method,
    pub forward_ratio: f64,
    pub wall_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub n_experts: usize,
    pub k_active: usize,
    pub method: Method,
    pub tau: f64,
    pub target_forwards: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    pub package: String,
    pub version: String,
    pub arch: String,
    pub os: String,
    pub float: String,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            package: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            arch: std::env::consts::ARCH.to_string(),
            os: std::env::consts::OS.to_string(),
            float: "f64".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: RunConfig,
    pub metrics: Vec<Metrics>,
    pub speedups: Vec<Speedup>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepCell>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_trend: Option<String>,
    pub environment: Environment,
}

impl Report {
    /// Speedups are taken against vanilla when it is present, otherwise
    /// against the first method.
    pub fn new(config: RunConfig, metrics: Vec<Metrics>) -> Result<Self> {
        let base = metrics
            .iter()
            .find(|m| m.method == Method::Vanilla)
            .or(metrics.first());
        let speedups = match base {
            Some(b) => metrics
                .iter()
                .map(|m| {
                    let (forward_ratio, wall_ratio) = compute_speedup(b, m)?;
                    Ok(Speedup {
                        baseline: b.method,
                        candidate: m.method,
                        forward_ratio,
                        wall_ratio,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        Ok(Self {
            config,
            metrics,
            speedups,
            sweep: Vec::new(),
            sweep_trend: None,
            environment: Environment::current(),
        })
    }

    pub fn sweep(config: RunConfig, cells: Vec<SweepCell>) -> Self {
        let trend = sweep_trend(&cells);
        Self {
            config,
            metrics: Vec::new(),
            speedups: Vec::new(),
            sweep: cells,
            sweep_trend: Some(trend),
            environment: Environment::current(),
        }
    }

    /// Copy with every wall-clock field zeroed, for byte comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        for m in &mut r.metrics {
            m.wall_ms = 0.0;
        }
        for s in &mut r.speedups {
            s.wall_ratio = 0.0;
        }
        r
    }

    pub fn to_json(&self) -> Result<String> {
        if self.metrics.is_empty() && self.sweep.is_empty() {
            return Err(Error::InvalidArgument("report has no metrics".into()));
        }
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Report = serde_json::from_str(text)?;
        if r.metrics.is_empty() && r.sweep.is_empty() {
            return Err(Error::Format("report has no metrics".into()));
        }
        Ok(r)
    }
}

/// Direction of tau as the number of experts shrinks.
pub fn sweep_trend(cells: &[SweepCell]) -> String {
    let taus: Vec<f64> = cells.iter().map(|c| c.tau).collect();
    if taus.len() < 2 {
        return "flat".into();
    }
    let up = taus.windows(2).all(|w| w[1] >= w[0]);
    let down = taus.windows(2).all(|w| w[1] <= w[0]);
    match (up, down) {
        (true, true) => "flat",
        (true, false) => "increasing as n_experts decreases",
        (false, true) => "decreasing as n_experts decreases",
        (false, false) => "mixed",
    }
    .into()
}

pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_json()?)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Report> {
    Report::from_json(&std::fs::read_to_string(path)?)
}
