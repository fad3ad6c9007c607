//! Impulse-response identification of a plant's order.
//!
//! The plant is driven with `qp_min` on frame 0 and `qp_max` afterwards.
//! The recorded error (target = settled PSNR, setpoint weight 1) is
//! de-trended and fitted with a one-parameter recursion `d[t+1] = r * d[t]`.
//! A good fit with a non-negligible `r` means one pole at `r`; a response
//! that collapses after one frame means no pole.

use thiserror::Error;

use crate::controller::QpRange;
use crate::plant::{DisturbanceSpec, PlantError, PlantModel};

pub const MIN_RESPONSE_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum SysidError {
    #[error("response needs at least {MIN_RESPONSE_LEN} frames, got {0}")]
    TooShort(usize),
    #[error("response has no transient; order is undefined")]
    Degenerate,
    #[error("non-finite value in response at frame {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Plant(#[from] PlantError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImpulseExperiment {
    pub qp_sequence: Vec<i32>,
    /// Per-frame error in dB against the settled PSNR.
    pub response: Vec<f64>,
}

impl ImpulseExperiment {
    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderEstimate {
    pub order: u8,
    /// Present iff `order == 1`.
    pub pole: Option<f64>,
    /// Relative RMS residual of the one-pole fit.
    pub fit_residual: f64,
}

/// Classification thresholds for [`estimate_order`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderThresholds {
    /// Smallest `|r|` still counted as a pole.
    pub min_pole: f64,
    /// Largest relative RMS residual accepted for a one-pole fit.
    pub max_residual: f64,
    /// Transient samples must exceed this multiple of the settled-window RMS.
    pub noise_margin: f64,
}

impl Default for OrderThresholds {
    fn default() -> Self {
        Self {
            min_pole: 0.05,
            max_residual: 0.1,
            noise_margin: 3.0,
        }
    }
}

/// Drives a copy of `plant` (disturbance removed, state reset) with the
/// impulse QP sequence and records the error against the settled value.
pub fn run_impulse(
    plant: &PlantModel,
    range: &QpRange,
    n: usize,
) -> Result<ImpulseExperiment, SysidError> {
    if n < MIN_RESPONSE_LEN {
        return Err(SysidError::TooShort(n));
    }
    let mut plant = plant.clone().with_disturbance(DisturbanceSpec::None);
    plant.reset();

    let qp_sequence: Vec<i32> = (0..n)
        .map(|t| if t == 0 { range.min } else { range.max })
        .collect();
    let mut psnr = Vec::with_capacity(n);
    for (t, &qp) in qp_sequence.iter().enumerate() {
        psnr.push(plant.step(qp, t)?.psnr);
    }
    let settled = settled_value(&psnr);
    let response = psnr.iter().map(|p| p - settled).collect();
    Ok(ImpulseExperiment {
        qp_sequence,
        response,
    })
}

/// Mean of the last quarter of the samples.
fn settled_value(samples: &[f64]) -> f64 {
    let tail = &samples[samples.len() - samples.len() / 4..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

pub fn estimate_order(response: &[f64]) -> Result<OrderEstimate, SysidError> {
    estimate_order_with(response, &OrderThresholds::default())
}

pub fn estimate_order_with(
    response: &[f64],
    thresholds: &OrderThresholds,
) -> Result<OrderEstimate, SysidError> {
    let n = response.len();
    if n < MIN_RESPONSE_LEN {
        return Err(SysidError::TooShort(n));
    }
    if let Some(i) = response.iter().position(|v| !v.is_finite()) {
        return Err(SysidError::NonFinite(i));
    }

    let settled = settled_value(response);
    let d: Vec<f64> = response.iter().map(|v| v - settled).collect();
    let peak = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = response.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 || peak <= 1e-12 * scale {
        return Err(SysidError::Degenerate);
    }

    // Samples standing clear of the settled window's noise, and of its
    // largest excursion, form the transient.
    let settle_start = n - n / 4;
    let tail = &d[settle_start..];
    let floor = (tail.iter().map(|v| v * v).sum::<f64>() / tail.len() as f64).sqrt();
    let tail_peak = tail.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cutoff = (thresholds.noise_margin * floor)
        .max(tail_peak)
        .max(1e-9 * peak);
    // Once the response enters the noise band it has settled; later
    // excursions are noise.
    let transient: Vec<usize> = (0..settle_start.min(n - 1))
        .take_while(|&t| d[t].abs() > cutoff)
        .collect();

    // Everything after the transient is settled, which gives a better-sampled
    // noise estimate than the tail alone.
    let rest = &d[transient.len()..];
    let floor = floor.max((rest.iter().map(|v| v * v).sum::<f64>() / rest.len() as f64).sqrt());

    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &t in &transient {
        sxy += d[t] * d[t + 1];
        sxx += d[t] * d[t];
    }
    let pole = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let sse: f64 = transient
        .iter()
        .map(|&t| (d[t + 1] - pole * d[t]).powi(2))
        .sum();
    let fit_residual = if sxx > 0.0 { (sse / sxx).sqrt() } else { 0.0 };
    // Noise on both samples of a pair adds about (1 + pole^2) * floor^2 to
    // each squared residual. Residual energy within the noise margin of that
    // is not held against the fit.
    let noise_sse = transient.len() as f64 * (1.0 + pole * pole) * floor * floor;
    let excess = sse - thresholds.noise_margin.powi(2) * noise_sse;
    let mismatch = if sxx > 0.0 {
        (excess.max(0.0) / sxx).sqrt()
    } else {
        0.0
    };

    // Spread of the pole estimate caused by the noise floor alone.
    let pole_stderr = if sxx > 0.0 {
        floor * (1.0 + pole * pole).sqrt() / sxx.sqrt()
    } else {
        0.0
    };

    // One transient sample means the response settled after a single frame.
    let is_first_order = transient.len() >= 2
        && pole.abs() >= thresholds.min_pole
        && pole.abs() > thresholds.noise_margin * pole_stderr
        && pole.abs() < 1.0
        && mismatch <= thresholds.max_residual;
    Ok(OrderEstimate {
        order: u8::from(is_first_order),
        pole: is_first_order.then_some(pole),
        fit_residual,
    })
}
