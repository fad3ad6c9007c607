//! Subcommand implementations behind the `pqc` binary.
//!
//! Each command takes an already-parsed [`ConfigSource`] and an output
//! directory, writes its files there and returns a short text summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use thiserror::Error;
use toml::Value;

use crate::config::{emit_config, parse_scalar, ConfigError, ConfigSource};
use crate::harness::{
    compare, compute_metrics, run_batch, run_experiment, write_trace, HarnessError, MetricsReport,
    Mode,
};
use crate::sysid::{estimate_order, run_impulse, SysidError};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Sysid(#[from] SysidError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Harness(HarnessError::InvalidConfig(_)) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn prepare_out(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(io_err(out))
}

/// Runs the configured experiment; writes `trace.csv`, `metrics.json` and
/// the effective `config.toml`.
pub fn simulate_cmd(source: &ConfigSource, out: &Path) -> Result<String, CliError> {
    let config = source.build()?;
    let records = run_experiment(&config)?;
    let metrics = compute_metrics(&records, &config.objective)?;

    prepare_out(out)?;
    let trace_path = out.join("trace.csv");
    write_trace(&records, create(&trace_path)?).map_err(io_err(&trace_path))?;
    write_text(&out.join("metrics.json"), &(metrics.to_json() + "\n"))?;
    write_text(&out.join("config.toml"), &emit_config(&config))?;

    Ok(format!(
        "{} frames ({:?}) -> {}\n{}\n",
        records.len(),
        config.mode,
        trace_path.display(),
        metrics.to_json()
    ))
}

/// Impulse identification of the configured plant over `frames` frames.
pub fn identify_cmd(source: &ConfigSource, out: &Path, frames: usize) -> Result<String, CliError> {
    let config = source.build()?;
    let experiment = run_impulse(&config.plant, &config.range, frames)?;
    let estimate = estimate_order(&experiment.response)?;

    let mut report = String::new();
    let _ = writeln!(report, "order: {}", estimate.order);
    match estimate.pole {
        Some(p) => {
            let _ = writeln!(report, "pole: {p:.6}");
        }
        None => {
            let _ = writeln!(report, "pole: none");
        }
    }
    let _ = writeln!(report, "residual: {:.6}", estimate.fit_residual);
    let _ = writeln!(report);
    let mut csv = String::from("frame,error_db\n");
    for (t, e) in experiment.response.iter().enumerate() {
        let _ = writeln!(csv, "{t},{e:.6}");
    }
    report.push_str(&csv);

    prepare_out(out)?;
    write_text(&out.join("identify_report.txt"), &report)?;
    write_text(&out.join("impulse_response.csv"), &csv)?;
    Ok(report)
}

/// Controlled run against the fixed-QP baseline on the same plant and seed.
pub fn compare_cmd(source: &ConfigSource, out: &Path) -> Result<String, CliError> {
    let config = source.build()?;
    let controlled_cfg = config.clone().with_mode(Mode::Controlled);
    let fixed_cfg = config.with_mode(Mode::FixedQp);

    let controlled = run_experiment(&controlled_cfg)?;
    let fixed = run_experiment(&fixed_cfg)?;
    let objective = &controlled_cfg.objective;
    let cm = compute_metrics(&controlled, objective)?;
    let fm = compute_metrics(&fixed, objective)?;
    let table = compare(&cm, &fm).render_table();

    prepare_out(out)?;
    for (name, records) in [
        ("trace_controlled.csv", &controlled),
        ("trace_fixed.csv", &fixed),
    ] {
        let path = out.join(name);
        write_trace(records, create(&path)?).map_err(io_err(&path))?;
    }
    write_text(&out.join("metrics_controlled.json"), &(cm.to_json() + "\n"))?;
    write_text(&out.join("metrics_fixed.json"), &(fm.to_json() + "\n"))?;
    write_text(&out.join("comparison.txt"), &table)?;
    Ok(table)
}

/// One sweep axis: a config key and its distinct values, in first-seen order.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<Value>,
}

fn same_value(a: &Value, b: &Value) -> bool {
    let num = |v: &Value| match v {
        Value::Integer(i) => Some(*i as f64),
        Value::Float(f) => Some(*f),
        _ => None,
    };
    match (num(a), num(b)) {
        (Some(x), Some(y)) => x == y,
        _ => a == b,
    }
}

/// Parses `key=v1,v2,...` specs into axes. Repeated keys merge and repeated
/// values are dropped.
pub fn parse_grid(specs: &[String]) -> Result<Vec<GridAxis>, CliError> {
    let mut axes: Vec<GridAxis> = Vec::new();
    for spec in specs {
        let (key, values) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("bad grid `{spec}`: expected key=v1,v2,...")))?;
        let key = key.trim();
        let idx = match axes.iter().position(|a| a.key == key) {
            Some(i) => i,
            None => {
                axes.push(GridAxis {
                    key: key.to_string(),
                    values: Vec::new(),
                });
                axes.len() - 1
            }
        };
        for raw in values.split(',').map(str::trim).filter(|v| !v.is_empty()) {
            let v = parse_scalar(raw);
            if !axes[idx].values.iter().any(|seen| same_value(seen, &v)) {
                axes[idx].values.push(v);
            }
        }
    }
    axes.retain(|a| !a.values.is_empty());
    if axes.is_empty() {
        return Err(CliError::Usage("sweep needs a non-empty --grid".into()));
    }
    Ok(axes)
}

fn cartesian(axes: &[GridAxis]) -> Vec<Vec<Value>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut point = prefix.clone();
                    point.push(v.clone());
                    point
                })
            })
            .collect()
    })
}

fn grid_cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Float(f) => format!("{f:?}"),
        other => other.to_string(),
    }
}

/// One row of a sweep: the grid point and its metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: BTreeMap<String, String>,
    pub metrics: MetricsReport,
}

/// Runs every grid point (in parallel) and writes `sweep.csv`.
pub fn sweep_cmd(source: &ConfigSource, out: &Path, grid: &[String]) -> Result<String, CliError> {
    let axes = parse_grid(grid)?;
    let points = cartesian(&axes);
    let configs = points
        .iter()
        .map(|point| {
            let mut src = source.clone();
            for (axis, v) in axes.iter().zip(point) {
                src.set(&axis.key, v.clone());
            }
            src.build()
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut csv = String::new();
    let header: Vec<&str> = axes
        .iter()
        .map(|a| a.key.as_str())
        .chain(MetricsReport::FIELDS)
        .collect();
    let _ = writeln!(csv, "{}", header.join(","));
    for ((point, config), records) in points.iter().zip(&configs).zip(run_batch(&configs)) {
        let metrics = compute_metrics(&records?, &config.objective)?;
        let cells: Vec<String> = point
            .iter()
            .map(grid_cell)
            .chain(metrics.values().iter().map(|v| format!("{v:.6}")))
            .collect();
        let _ = writeln!(csv, "{}", cells.join(","));
    }

    prepare_out(out)?;
    write_text(&out.join("sweep.csv"), &csv)?;
    Ok(csv)
}
