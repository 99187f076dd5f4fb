//! Experiment driver: expands an [`ExperimentSpec`] into policy x sweep x
//! repetition cells, runs them, and writes CSV or JSON reports.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::append_event_log;
use crate::error::{Error, Result};
use crate::policy::{run_policy, MetricsRecord, PolicySpec, RunOptions, SweepPoint, DEFAULT_BYTES_PER_ENTRY};
use crate::sim::{generate_trace, GeneratedTrace, StreamConfig};

/// CSV report header, in column order.
pub const CSV_HEADER: [&str; 8] = [
    "policy",
    "seed",
    "retained",
    "evicted",
    "cache_bytes",
    "loss",
    "wall_ms",
    "overlap_mean",
];

/// Environment variable overriding the stream seed of a spec.
pub const SEED_ENV: &str = "KVEVICT_SEED";

/// Parameters a sweep can vary.
pub const SWEEPABLE: [&str; 9] = [
    "r",
    "alpha",
    "k",
    "buffer",
    "budget",
    "recent_window",
    "rho",
    "seed",
    "decode_steps",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: String,
    /// JSON-lines decode event log of layer 0 for every cell.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<PathBuf>,
}

fn default_format() -> String {
    "csv".into()
}

fn default_repetitions() -> usize {
    1
}

fn default_bytes_per_entry() -> u64 {
    DEFAULT_BYTES_PER_ENTRY
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub stream: StreamConfig,
    pub policies: Vec<PolicySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Sweep>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputSpec>,
    #[serde(default = "default_bytes_per_entry")]
    pub bytes_per_entry: u64,
    /// Wall-clock times make reports differ between runs; off by default.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Run cells on the rayon pool.
    #[serde(default)]
    pub parallel: bool,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Spec {
            path: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Applies `KVEVICT_SEED` when it is set.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.stream.seed = v.trim().parse().map_err(|_| Error::Spec {
                path: SEED_ENV.into(),
                message: format!("not an unsigned integer: {v:?}"),
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let spec_err = |path: String, message: String| Err(Error::Spec { path, message });
        if self.repetitions == 0 {
            return spec_err("repetitions".into(), "must be >= 1".into());
        }
        if self.policies.is_empty() {
            return spec_err("policies".into(), "at least one policy is required".into());
        }
        if let Err(e) = self.stream.validate() {
            return spec_err("stream".into(), e.to_string());
        }
        for (i, p) in self.policies.iter().enumerate() {
            if let Err(e) = p.validate() {
                return spec_err(format!("policies[{i}]"), e.to_string());
            }
        }
        if let Some(sweep) = &self.sweep {
            if !SWEEPABLE.contains(&sweep.name.as_str()) {
                return spec_err(
                    "sweep.name".into(),
                    format!("unknown parameter {:?}, expected one of {SWEEPABLE:?}", sweep.name),
                );
            }
            if sweep.values.is_empty() {
                return spec_err("sweep.values".into(), "must not be empty".into());
            }
            for (i, &v) in sweep.values.iter().enumerate() {
                let integral = matches!(
                    sweep.name.as_str(),
                    "k" | "buffer" | "budget" | "recent_window" | "seed" | "decode_steps"
                );
                if !v.is_finite() || (integral && (v < 0.0 || v.fract() != 0.0)) {
                    return spec_err(format!("sweep.values[{i}]"), format!("invalid value {v}"));
                }
                for (j, p) in self.policies.iter().enumerate() {
                    let (stream, policy) = apply_sweep(&self.stream, p, &sweep.name, v);
                    if let Err(e) = stream.validate().and_then(|_| policy.validate()) {
                        return spec_err(format!("sweep.values[{i}] (policies[{j}])"), e.to_string());
                    }
                }
            }
        }
        Ok(())
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            bytes_per_entry: self.bytes_per_entry,
            record_wall_time: self.record_wall_time,
        }
    }
}

/// Stream and policy with one swept parameter substituted. Parameters that do
/// not apply to a policy leave it unchanged.
fn apply_sweep(stream: &StreamConfig, policy: &PolicySpec, name: &str, value: f64) -> (StreamConfig, PolicySpec) {
    let mut stream = stream.clone();
    let mut policy = policy.clone();
    let count = value as usize;
    match name {
        "r" => policy.dap.iter_mut().for_each(|d| d.r = value),
        "alpha" => policy.dap.iter_mut().for_each(|d| d.alpha = value),
        "k" => policy.ddes.iter_mut().for_each(|d| d.k = count),
        "buffer" => policy.ddes.iter_mut().for_each(|d| d.buffer = count),
        "budget" => {
            if policy.budget.is_some() || policy.recent_window.is_some() {
                policy.budget = Some(count);
            }
        }
        "recent_window" => {
            if policy.recent_window.is_some() {
                policy.recent_window = Some(count);
            }
        }
        "rho" => stream.rho = value,
        "seed" => stream.seed = value as u64,
        "decode_steps" => stream.decode_steps = count,
        _ => unreachable!("validated sweep name"),
    }
    (stream, policy)
}

struct Cell {
    policy: PolicySpec,
    trace: usize,
    point: Option<SweepPoint>,
}

/// Runs every cell of `spec`, writes the report (and event log) when an
/// output is configured, and returns records in declaration order:
/// policy-major, then sweep value, then repetition.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<MetricsRecord>> {
    spec.validate()?;
    let points: Vec<Option<f64>> = match &spec.sweep {
        Some(s) => s.values.iter().copied().map(Some).collect(),
        None => vec![None],
    };

    // One trace per distinct stream configuration.
    let mut streams: Vec<StreamConfig> = Vec::new();
    let mut cells = Vec::new();
    for policy in &spec.policies {
        for &point in &points {
            let (stream, policy) = match (&spec.sweep, point) {
                (Some(s), Some(v)) => apply_sweep(&spec.stream, policy, &s.name, v),
                _ => (spec.stream.clone(), policy.clone()),
            };
            let trace = match streams.iter().position(|s| *s == stream) {
                Some(i) => i,
                None => {
                    streams.push(stream);
                    streams.len() - 1
                }
            };
            let point = spec.sweep.as_ref().zip(point).map(|(s, value)| SweepPoint {
                name: s.name.clone(),
                value,
            });
            for _ in 0..spec.repetitions {
                cells.push(Cell {
                    policy: policy.clone(),
                    trace,
                    point: point.clone(),
                });
            }
        }
    }

    let traces: Vec<GeneratedTrace> = if spec.parallel {
        streams.par_iter().map(generate_trace).collect::<Result<_>>()?
    } else {
        streams.iter().map(generate_trace).collect::<Result<_>>()?
    };

    let opts = spec.options();
    let run_cell = |cell: &Cell| {
        run_policy(&traces[cell.trace], &cell.policy, &opts).map(|mut run| {
            run.record.param = cell.point.clone();
            let events = run.layers.swap_remove(0).events;
            (run.record, events)
        })
    };
    let results: Vec<_> = if spec.parallel {
        cells.par_iter().map(run_cell).collect::<Result<_>>()?
    } else {
        cells.iter().map(run_cell).collect::<Result<_>>()?
    };

    if let Some(out) = &spec.output {
        let records: Vec<MetricsRecord> = results.iter().map(|(r, _)| r.clone()).collect();
        emit_report(&records, &out.format, &out.path)?;
        if let Some(events_path) = &out.events {
            std::fs::write(events_path, b"").map_err(|e| Error::io(events_path, e))?;
            for (_, events) in &results {
                append_event_log(events_path, events)?;
            }
        }
    }
    Ok(results.into_iter().map(|(r, _)| r).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Format(format!("unknown report format {other:?}"))),
        }
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Report body for `records`.
pub fn render_report(records: &[MetricsRecord], format: ReportFormat) -> Result<String> {
    if records.is_empty() {
        return Err(Error::EmptyReport);
    }
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(records)?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER).map_err(csv_error)?;
            for r in records {
                w.write_record([
                    r.policy.clone(),
                    r.seed.to_string(),
                    r.retained_entries.to_string(),
                    r.evicted_entries.to_string(),
                    r.cache_bytes.to_string(),
                    r.eviction_loss.to_string(),
                    r.wall_ms.to_string(),
                    r.overlap_mean().map(|m| m.to_string()).unwrap_or_default(),
                ])
                .map_err(csv_error)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
        }
    }
}

/// Writes the report for `records` to `path`. Nothing is created when the
/// records are empty or the format is unknown.
pub fn emit_report(records: &[MetricsRecord], format: &str, path: &Path) -> Result<()> {
    let body = render_report(records, format.parse()?)?;
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Reads records back from a JSON report.
pub fn read_json_report(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
