//! Run trace (JSON) and metrics table (CSV) files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::{BudgetPlan, HeadType};
use crate::compression::CompressionEvent;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::runner::RunMetrics;

pub const METRICS_HEADER: [&str; 9] = [
    "config_hash",
    "rho",
    "policy",
    "flops",
    "overhead_flops",
    "peak_entries",
    "max_abs",
    "mean_abs",
    "cosine",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub k: usize,
    pub tokens: usize,
    /// `[layer][head]` rows after compression.
    pub cache_rows: Vec<Vec<usize>>,
    /// `[layer][head]` retained origin positions after compression.
    pub retained_positions: Vec<Vec<Vec<usize>>>,
    pub score_products: u64,
    pub overhead_products: u64,
    pub value_products: u64,
    pub events: Vec<CompressionEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<Vec<Vec<Vec<f64>>>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub config: RunConfig,
    pub config_hash: String,
    pub n_init: usize,
    pub budgets: Option<BudgetPlan>,
    pub head_types: Option<Vec<Vec<HeadType>>>,
    pub steps: Vec<TraceStep>,
    pub metrics: RunMetrics,
}

impl Trace {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Trace::parse(&std::fs::read_to_string(path)?)
    }
}

fn metrics_record(m: &RunMetrics) -> Vec<String> {
    let (max_abs, mean_abs, cos) = match &m.divergence {
        Some(d) => (
            d.max_abs.to_string(),
            d.mean_abs.to_string(),
            d.cosine.to_string(),
        ),
        None => (String::new(), String::new(), String::new()),
    };
    vec![
        m.config_hash.clone(),
        m.rho.to_string(),
        m.policy.clone(),
        m.flops.to_string(),
        m.overhead_flops.to_string(),
        m.peak_entries.to_string(),
        max_abs,
        mean_abs,
        cos,
    ]
}

/// CSV text with the fixed header and one row per run, LF line endings.
pub fn metrics_csv(rows: &[RunMetrics]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::State(format!("csv: {e}"));
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for m in rows {
        w.write_record(metrics_record(m)).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::State(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::State(e.to_string()))
}

pub fn write_metrics_csv(path: &Path, rows: &[RunMetrics]) -> Result<()> {
    write_file(path, &metrics_csv(rows)?)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("writing {}: {e}", path.display()),
        ))
    })
}
