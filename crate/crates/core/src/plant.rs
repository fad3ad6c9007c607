//! Synthetic encoder stand-ins mapping a per-frame QP to PSNR and bits.
//!
//! The synthetic plants share an affine core `f(qp) = c0 - c1 * qp`. The
//! zero-order plant returns it directly; the first-order plant mixes it with
//! the previous output, `psnr_t = a * psnr_{t-1} + (1 - a) * f(qp_t) + w_t`,
//! which puts one discrete pole at `a`. A trace-driven plant replays
//! per-frame measurements recorded at a few QPs.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("invalid plant parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("trace has no data for frame {frame} at qp {qp}")]
    TraceDomain { frame: usize, qp: i32 },
    #[error("malformed trace table: {0}")]
    TraceFormat(String),
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Additive PSNR disturbance standing in for changing content.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum DisturbanceSpec {
    #[default]
    None,
    Constant {
        amplitude: f64,
    },
    /// `amplitude` from `step_frame` onward, zero before.
    Step {
        amplitude: f64,
        step_frame: usize,
    },
    Sinusoid {
        amplitude: f64,
        period: f64,
    },
    /// Uniform in `[-amplitude, amplitude]`, a pure function of `(seed, frame)`.
    SeededNoise {
        amplitude: f64,
        seed: u64,
    },
}

impl DisturbanceSpec {
    pub fn validate(&self) -> Result<(), PlantError> {
        let amplitude = match *self {
            DisturbanceSpec::None => return Ok(()),
            DisturbanceSpec::Constant { amplitude }
            | DisturbanceSpec::Step { amplitude, .. }
            | DisturbanceSpec::SeededNoise { amplitude, .. } => amplitude,
            DisturbanceSpec::Sinusoid { amplitude, period } => {
                if !(period.is_finite() && period > 0.0) {
                    return Err(PlantError::InvalidParameter {
                        name: "disturbance.period",
                        reason: format!("must be finite and > 0, got {period}"),
                    });
                }
                amplitude
            }
        };
        if !amplitude.is_finite() {
            return Err(PlantError::InvalidParameter {
                name: "disturbance.amplitude",
                reason: "must be finite".into(),
            });
        }
        Ok(())
    }
}

pub fn disturbance_at(spec: &DisturbanceSpec, frame_index: usize) -> f64 {
    match *spec {
        DisturbanceSpec::None => 0.0,
        DisturbanceSpec::Constant { amplitude } => amplitude,
        DisturbanceSpec::Step {
            amplitude,
            step_frame,
        } => {
            if frame_index >= step_frame {
                amplitude
            } else {
                0.0
            }
        }
        DisturbanceSpec::Sinusoid { amplitude, period } => {
            amplitude * (std::f64::consts::TAU * frame_index as f64 / period).sin()
        }
        DisturbanceSpec::SeededNoise { amplitude, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(frame_index as u64);
            amplitude * rng.random_range(-1.0..=1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameOutcome {
    pub psnr: f64,
    pub bits: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct TraceRow {
    frame: usize,
    qp: i32,
    psnr_db: f64,
    bits: f64,
}

/// Per-frame `(qp, psnr, bits)` samples, QPs ascending within each frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTable {
    frames: Vec<Vec<(i32, f64, f64)>>,
    /// File the table was read from, if any.
    pub origin: Option<PathBuf>,
}

impl TraceTable {
    /// Builds a table from `(qp, psnr, bits)` samples per frame.
    pub fn from_frames(frames: Vec<Vec<(i32, f64, f64)>>) -> Result<Self, PlantError> {
        if frames.is_empty() {
            return Err(PlantError::TraceFormat("no rows".into()));
        }
        for (f, samples) in frames.iter().enumerate() {
            if samples.is_empty() {
                return Err(PlantError::TraceFormat(format!("frame {f} has no rows")));
            }
            if samples.windows(2).any(|w| w[0].0 >= w[1].0) {
                return Err(PlantError::TraceFormat(format!(
                    "frame {f}: qp values must be strictly increasing"
                )));
            }
            for &(qp, psnr, bits) in samples {
                if !psnr.is_finite() || !bits.is_finite() || bits < 0.0 {
                    return Err(PlantError::TraceFormat(format!(
                        "frame {f} qp {qp}: psnr must be finite and bits finite and >= 0"
                    )));
                }
            }
        }
        Ok(Self {
            frames,
            origin: None,
        })
    }

    /// Reads `frame,qp,psnr_db,bits` CSV, rows sorted by `(frame, qp)` and
    /// frames contiguous from 0.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, PlantError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["frame", "qp", "psnr_db", "bits"] {
            return Err(PlantError::TraceFormat(format!(
                "expected header `frame,qp,psnr_db,bits`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut frames: Vec<Vec<(i32, f64, f64)>> = Vec::new();
        for row in rdr.deserialize() {
            let row: TraceRow = row?;
            if row.frame == frames.len() {
                frames.push(Vec::new());
            } else if row.frame + 1 != frames.len() {
                return Err(PlantError::TraceFormat(format!(
                    "frame {} out of order (frames must be sorted and contiguous from 0)",
                    row.frame
                )));
            }
            frames[row.frame].push((row.qp, row.psnr_db, row.bits));
        }
        Self::from_frames(frames)
    }

    pub fn load(path: &Path) -> Result<Self, PlantError> {
        let file = std::fs::File::open(path)?;
        let mut table = Self::read_csv(std::io::BufReader::new(file))?;
        table.origin = Some(path.to_path_buf());
        Ok(table)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), PlantError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["frame", "qp", "psnr_db", "bits"])?;
        for (frame, samples) in self.frames.iter().enumerate() {
            for &(qp, psnr, bits) in samples {
                w.write_record([
                    frame.to_string(),
                    qp.to_string(),
                    format!("{psnr:.6}"),
                    format!("{bits:.6}"),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Linear interpolation between the tabulated QPs bracketing `qp`.
    pub fn lookup(&self, frame: usize, qp: i32) -> Result<FrameOutcome, PlantError> {
        let out_of_domain = PlantError::TraceDomain { frame, qp };
        let samples = self.frames.get(frame).ok_or(out_of_domain)?;
        let upper = samples.partition_point(|s| s.0 < qp);
        match samples.get(upper) {
            Some(&(q, psnr, bits)) if q == qp => Ok(FrameOutcome { psnr, bits }),
            Some(&(q1, p1, b1)) if upper > 0 => {
                let (q0, p0, b0) = samples[upper - 1];
                let w = f64::from(qp - q0) / f64::from(q1 - q0);
                Ok(FrameOutcome {
                    psnr: p0 + w * (p1 - p0),
                    bits: b0 + w * (b1 - b0),
                })
            }
            _ => Err(PlantError::TraceDomain { frame, qp }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlantKind {
    ZeroOrder,
    FirstOrder { inertia: f64 },
    TraceDriven(TraceTable),
}

/// One encoder stand-in for one stream. Stateful; step it once per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub kind: PlantKind,
    /// `c0`, PSNR at QP 0 in dB.
    pub psnr_intercept: f64,
    /// `c1`, dB lost per QP step. Must be positive.
    pub psnr_slope: f64,
    pub rate_ref_bits: f64,
    pub rate_ref_qp: i32,
    pub disturbance: DisturbanceSpec,
    /// Output before frame 0 for the first-order plant. `None` starts at rest
    /// at the first frame's QP.
    pub initial_psnr: Option<f64>,
    prev_psnr: Option<f64>,
}

impl Default for PlantModel {
    fn default() -> Self {
        Self::first_order(0.5)
    }
}

impl PlantModel {
    pub fn new(kind: PlantKind) -> Self {
        Self {
            kind,
            psnr_intercept: 50.0,
            psnr_slope: 0.4,
            rate_ref_bits: 100_000.0,
            rate_ref_qp: 32,
            disturbance: DisturbanceSpec::None,
            initial_psnr: None,
            prev_psnr: None,
        }
    }

    pub fn zero_order() -> Self {
        Self::new(PlantKind::ZeroOrder)
    }

    pub fn first_order(inertia: f64) -> Self {
        Self::new(PlantKind::FirstOrder { inertia })
    }

    pub fn trace_driven(table: TraceTable) -> Self {
        Self::new(PlantKind::TraceDriven(table))
    }

    pub fn with_affine(mut self, intercept: f64, slope: f64) -> Self {
        self.psnr_intercept = intercept;
        self.psnr_slope = slope;
        self
    }

    pub fn with_rate(mut self, ref_bits: f64, ref_qp: i32) -> Self {
        self.rate_ref_bits = ref_bits;
        self.rate_ref_qp = ref_qp;
        self
    }

    pub fn with_disturbance(mut self, disturbance: DisturbanceSpec) -> Self {
        self.disturbance = disturbance;
        self
    }

    pub fn with_initial_psnr(mut self, psnr: f64) -> Self {
        self.initial_psnr = Some(psnr);
        self.prev_psnr = Some(psnr);
        self
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let bad = |name, reason: String| Err(PlantError::InvalidParameter { name, reason });
        if !self.psnr_intercept.is_finite() {
            return bad("plant.psnr_intercept", "must be finite".into());
        }
        if !(self.psnr_slope.is_finite() && self.psnr_slope > 0.0) {
            return bad(
                "plant.psnr_slope",
                format!("must be finite and > 0, got {}", self.psnr_slope),
            );
        }
        if let PlantKind::FirstOrder { inertia } = self.kind {
            if !(0.0..1.0).contains(&inertia) {
                return bad(
                    "plant.inertia",
                    format!("must lie in [0, 1), got {inertia}"),
                );
            }
        }
        if !(self.rate_ref_bits.is_finite() && self.rate_ref_bits >= 0.0) {
            return bad(
                "plant.rate_ref_bits",
                format!("must be finite and >= 0, got {}", self.rate_ref_bits),
            );
        }
        if let Some(p) = self.initial_psnr {
            if !p.is_finite() {
                return bad("plant.initial_psnr", "must be finite".into());
            }
        }
        self.disturbance.validate()
    }

    /// Returns the plant to its state before frame 0.
    pub fn reset(&mut self) {
        self.prev_psnr = self.initial_psnr;
    }

    pub fn prev_psnr(&self) -> Option<f64> {
        self.prev_psnr
    }

    /// The affine PSNR core `c0 - c1 * qp`.
    pub fn static_psnr(&self, qp: i32) -> f64 {
        self.psnr_intercept - self.psnr_slope * f64::from(qp)
    }

    /// `R0 * 2^(-(qp - qp_ref) / 6)`: six QP steps halve the bits.
    pub fn rate_model(&self, qp: i32) -> f64 {
        self.rate_ref_bits * (-f64::from(qp - self.rate_ref_qp) / 6.0).exp2()
    }

    pub fn step(&mut self, qp: i32, frame_index: usize) -> Result<FrameOutcome, PlantError> {
        let outcome = match &self.kind {
            PlantKind::TraceDriven(table) => table.lookup(frame_index, qp)?,
            PlantKind::ZeroOrder => FrameOutcome {
                psnr: self.static_psnr(qp) + disturbance_at(&self.disturbance, frame_index),
                bits: self.rate_model(qp),
            },
            PlantKind::FirstOrder { inertia } => {
                let target = self.static_psnr(qp);
                let prev = self.prev_psnr.unwrap_or(target);
                FrameOutcome {
                    psnr: inertia * prev
                        + (1.0 - inertia) * target
                        + disturbance_at(&self.disturbance, frame_index),
                    bits: self.rate_model(qp),
                }
            }
        };
        self.prev_psnr = Some(outcome.psnr);
        Ok(outcome)
    }
}
