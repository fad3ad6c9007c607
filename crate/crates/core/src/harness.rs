//! Closed-loop and fixed-QP runs over a plant, plus the summary metrics.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{
    clamp_round_qp, compute_error, ControlError, ControlObjective, FrameKind, PidGains, QpRange,
    QualityController, WindupMode,
};
use crate::plant::{DisturbanceSpec, PlantError, PlantModel};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    InvalidConfig(String),
    #[error("{called} called on a config in {mode:?} mode")]
    ModeMismatch { called: &'static str, mode: Mode },
    #[error("cannot compute metrics over an empty trace")]
    EmptyTrace,
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    Controlled,
    FixedQp,
}

/// Which frames are coded intra.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FrameSchedule {
    #[default]
    AllInter,
    AllIntra,
    /// Frames `0, n, 2n, ...` are intra, the rest inter.
    IntraEvery(usize),
}

impl FrameSchedule {
    pub fn kind_at(&self, frame: usize) -> FrameKind {
        match *self {
            FrameSchedule::AllInter => FrameKind::Inter,
            FrameSchedule::AllIntra => FrameKind::Intra,
            FrameSchedule::IntraEvery(n) if frame.is_multiple_of(n) => FrameKind::Intra,
            FrameSchedule::IntraEvery(_) => FrameKind::Inter,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub plant: PlantModel,
    pub gains: PidGains,
    pub objective: ControlObjective,
    pub range: QpRange,
    /// Nominal QP the controller is anchored at; the fixed-QP baseline uses it
    /// for every frame.
    pub qp_offset: f64,
    pub schedule: FrameSchedule,
    pub n_frames: usize,
    /// Seeds any noise disturbance on the plant.
    pub seed: u64,
    pub mode: Mode,
    pub windup: WindupMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            plant: PlantModel::default(),
            gains: PidGains::default(),
            objective: ControlObjective::default(),
            range: QpRange::default(),
            qp_offset: 32.0,
            schedule: FrameSchedule::AllInter,
            n_frames: 300,
            seed: 0,
            mode: Mode::Controlled,
            windup: WindupMode::Accumulate,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.plant.validate()?;
        self.gains.validate()?;
        self.objective.validate()?;
        self.range.validate()?;
        if !self.qp_offset.is_finite() {
            return Err(HarnessError::InvalidConfig(
                "qp_offset must be finite".into(),
            ));
        }
        if self.n_frames == 0 {
            return Err(HarnessError::InvalidConfig("n_frames must be >= 1".into()));
        }
        if self.schedule == FrameSchedule::IntraEvery(0) {
            return Err(HarnessError::InvalidConfig(
                "intra period must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    /// The plant as it should start a run: reset, noise reseeded from `seed`.
    fn fresh_plant(&self) -> PlantModel {
        let mut plant = self.plant.clone();
        if let DisturbanceSpec::SeededNoise { amplitude, .. } = plant.disturbance {
            plant.disturbance = DisturbanceSpec::SeededNoise {
                amplitude,
                seed: self.seed,
            };
        }
        plant.reset();
        plant
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub qp: i32,
    pub psnr: f64,
    pub bits: f64,
    /// Error of this frame's PSNR (setpoint and fluctuation terms combined).
    pub error: f64,
    /// Control variable that produced this frame's QP.
    pub o: f64,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<FrameRecord>, HarnessError> {
    match config.mode {
        Mode::Controlled => run_closed_loop(config),
        Mode::FixedQp => run_fixed_qp(config),
    }
}

/// Runs independent experiments in parallel; results keep the input order.
pub fn run_batch(configs: &[ExperimentConfig]) -> Vec<Result<Vec<FrameRecord>, HarnessError>> {
    configs.par_iter().map(run_experiment).collect()
}

pub fn run_closed_loop(config: &ExperimentConfig) -> Result<Vec<FrameRecord>, HarnessError> {
    if config.mode != Mode::Controlled {
        return Err(HarnessError::ModeMismatch {
            called: "run_closed_loop",
            mode: config.mode,
        });
    }
    config.validate()?;
    let mut controller = QualityController::new(
        config.gains,
        config.objective,
        config.range,
        config.qp_offset,
    )?
    .with_windup(config.windup);
    let mut plant = config.fresh_plant();

    let mut records = Vec::with_capacity(config.n_frames);
    let mut prev_psnr = None;
    for frame in 0..config.n_frames {
        let decision = controller.next_qp(config.schedule.kind_at(frame), prev_psnr)?;
        let outcome = plant.step(decision.qp, frame)?;
        records.push(FrameRecord {
            frame,
            qp: decision.qp,
            psnr: outcome.psnr,
            bits: outcome.bits,
            error: compute_error(outcome.psnr, prev_psnr, &config.objective)?,
            o: decision.o,
        });
        prev_psnr = Some(outcome.psnr);
    }
    Ok(records)
}

pub fn run_fixed_qp(config: &ExperimentConfig) -> Result<Vec<FrameRecord>, HarnessError> {
    if config.mode != Mode::FixedQp {
        return Err(HarnessError::ModeMismatch {
            called: "run_fixed_qp",
            mode: config.mode,
        });
    }
    config.validate()?;
    let qp = clamp_round_qp(config.qp_offset, &config.range)?;
    let mut plant = config.fresh_plant();

    let mut records = Vec::with_capacity(config.n_frames);
    let mut prev_psnr = None;
    for frame in 0..config.n_frames {
        let outcome = plant.step(qp, frame)?;
        records.push(FrameRecord {
            frame,
            qp,
            psnr: outcome.psnr,
            bits: outcome.bits,
            error: compute_error(outcome.psnr, prev_psnr, &config.objective)?,
            o: 0.0,
        });
        prev_psnr = Some(outcome.psnr);
    }
    Ok(records)
}

/// `frame,qp,psnr_db,bits,error,o`, reals with six decimals.
pub fn write_trace<W: Write>(records: &[FrameRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "frame,qp,psnr_db,bits,error,o")?;
    for r in records {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.frame, r.qp, r.psnr, r.bits, r.error, r.o
        )?;
    }
    out.flush()
}

/// Summary columns. Fluctuations are population standard deviations, bits
/// are per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub avg_psnr: f64,
    pub control_error_db: f64,
    pub control_error_pct: f64,
    pub quality_fluc_db: f64,
    pub bitrate_mean: f64,
    pub bit_fluc: f64,
}

impl MetricsReport {
    pub const FIELDS: [&'static str; 6] = [
        "avg_psnr",
        "control_error_db",
        "control_error_pct",
        "quality_fluc_db",
        "bitrate_mean",
        "bit_fluc",
    ];

    pub fn values(&self) -> [f64; 6] {
        [
            self.avg_psnr,
            self.control_error_db,
            self.control_error_pct,
            self.quality_fluc_db,
            self.bitrate_mean,
            self.bit_fluc,
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics are plain floats")
    }
}

fn mean_and_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn compute_metrics(
    records: &[FrameRecord],
    objective: &ControlObjective,
) -> Result<MetricsReport, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::EmptyTrace);
    }
    let (avg_psnr, quality_fluc_db) = mean_and_std(records.iter().map(|r| r.psnr));
    let (bitrate_mean, bit_fluc) = mean_and_std(records.iter().map(|r| r.bits));
    let control_error_db = (avg_psnr - objective.target_psnr).abs();
    Ok(MetricsReport {
        avg_psnr,
        control_error_db,
        control_error_pct: 100.0 * control_error_db / objective.target_psnr,
        quality_fluc_db,
        bitrate_mean,
        bit_fluc,
    })
}

/// Percentage by which `controlled` fluctuation undercuts `baseline`.
///
/// Negative when the controlled run fluctuates more. `None` when the baseline
/// is perfectly flat but the controlled run is not.
pub fn fluctuation_reduction_pct(controlled: f64, baseline: f64) -> Option<f64> {
    if baseline == controlled {
        Some(0.0)
    } else if baseline == 0.0 {
        None
    } else {
        Some(100.0 * (baseline - controlled) / baseline)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub fluc_reduction_pct: Option<f64>,
}

pub fn compare(controlled: &MetricsReport, baseline: &MetricsReport) -> Comparison {
    Comparison {
        rows: vec![
            ComparisonRow {
                method: "fixed-qp".into(),
                metrics: *baseline,
            },
            ComparisonRow {
                method: "pqc".into(),
                metrics: *controlled,
            },
        ],
        fluc_reduction_pct: fluctuation_reduction_pct(
            controlled.quality_fluc_db,
            baseline.quality_fluc_db,
        ),
    }
}

impl Comparison {
    /// Plain-text table: method, avg PSNR, control error (dB, %), quality
    /// fluctuation, bit rate, bit fluctuation.
    pub fn render_table(&self) -> String {
        let header = [
            "Method",
            "Avg. PSNR (dB)",
            "Control Error (dB)",
            "Control Error (%)",
            "Quality Fluc. (dB)",
            "Bit Rate (bits/frame)",
            "Bit Fluc. (bits/frame)",
        ];
        let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for row in &self.rows {
            let m = &row.metrics;
            cells.push(vec![
                row.method.clone(),
                format!("{:.2}", m.avg_psnr),
                format!("{:.4}", m.control_error_db),
                format!("{:.2}", m.control_error_pct),
                format!("{:.2}", m.quality_fluc_db),
                format!("{:.1}", m.bitrate_mean),
                format!("{:.1}", m.bit_fluc),
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();

        let mut out = String::new();
        for (i, row) in cells.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (cell, &w))| {
                    if c == 0 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join(" | "));
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
                let _ = writeln!(out, "{}", rule.join("-+-"));
            }
        }
        match self.fluc_reduction_pct {
            Some(p) => {
                let _ = writeln!(out, "quality fluctuation reduction: {p:.1}%");
            }
            None => {
                let _ = writeln!(out, "quality fluctuation reduction: n/a (flat baseline)");
            }
        }
        out
    }
}
