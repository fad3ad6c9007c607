//! Per-frame quality controller.
//!
//! Each frame the controller turns the measured PSNR of the previous frame
//! into a combined error signal (distance to target blended with
//! frame-to-frame change), runs it through a discrete PID law to get a
//! control variable `o`, and accumulates `o` once (inter frames) or twice
//! (intra frames) on top of a nominal QP anchor.
//!
//! All integrals are running sums and all derivatives are backward
//! differences over one frame. The work per frame is a fixed handful of
//! additions and multiplications no matter how long the stream runs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("non-finite value for `{0}`")]
    NonFinite(&'static str),
    #[error("invalid `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("out of sequence: controller expects frame {expected}, got frame {got}")]
    Sequencing { expected: u64, got: u64 },
    #[error("frame {0} needs the measured PSNR of the previous frame")]
    MissingMeasurement(u64),
    #[error("frame 0 has no previous frame, but a measurement was supplied")]
    UnexpectedMeasurement,
    #[error("malformed controller state: {0}")]
    MalformedState(String),
}

fn finite(name: &'static str, v: f64) -> Result<f64, ControlError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(ControlError::NonFinite(name))
    }
}

/// Proportional, integral and derivative weights. All must be `>= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl PidGains {
    pub fn new(kp: f64, ki: f64, kd: f64) -> Result<Self, ControlError> {
        let g = Self { kp, ki, kd };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        for (name, v) in [("kp", self.kp), ("ki", self.ki), ("kd", self.kd)] {
            finite(name, v)?;
            if v < 0.0 {
                return Err(ControlError::InvalidParameter {
                    name,
                    reason: format!("must be >= 0, got {v}"),
                });
            }
        }
        Ok(())
    }
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            kp: 2.12,
            ki: 0.10,
            kd: 0.60,
        }
    }
}

/// Target quality and the weight between "hit the target" and "stay smooth".
///
/// `lambda = 1` regulates purely on distance to target, `lambda = 0` purely
/// on frame-to-frame PSNR change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlObjective {
    pub target_psnr: f64,
    pub lambda: f64,
}

impl ControlObjective {
    pub fn new(target_psnr: f64, lambda: f64) -> Result<Self, ControlError> {
        let o = Self {
            target_psnr,
            lambda,
        };
        o.validate()?;
        Ok(o)
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        finite("target_psnr", self.target_psnr)?;
        if self.target_psnr <= 0.0 {
            return Err(ControlError::InvalidParameter {
                name: "target_psnr",
                reason: format!("must be > 0, got {}", self.target_psnr),
            });
        }
        finite("lambda", self.lambda)?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ControlError::InvalidParameter {
                name: "lambda",
                reason: format!("must lie in [0, 1], got {}", self.lambda),
            });
        }
        Ok(())
    }
}

impl Default for ControlObjective {
    fn default() -> Self {
        Self {
            target_psnr: 37.2,
            lambda: 0.8,
        }
    }
}

/// Inclusive range of QP values the encoder accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QpRange {
    pub min: i32,
    pub max: i32,
}

impl QpRange {
    pub fn new(min: i32, max: i32) -> Result<Self, ControlError> {
        let r = Self { min, max };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if self.min > self.max {
            return Err(ControlError::InvalidParameter {
                name: "qp_range",
                reason: format!("qp_min {} exceeds qp_max {}", self.min, self.max),
            });
        }
        Ok(())
    }

    pub fn contains(&self, qp: i32) -> bool {
        (self.min..=self.max).contains(&qp)
    }
}

impl Default for QpRange {
    fn default() -> Self {
        Self { min: 0, max: 51 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameKind {
    Inter,
    Intra,
}

/// What happens to the `o` accumulators while the QP clamp is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum WindupMode {
    /// Always accumulate, even when saturated.
    #[default]
    Accumulate,
    /// Skip the accumulation when the frame saturates and `o` pushes further
    /// past the violated bound.
    Freeze,
}

/// Combined error signal for one frame.
///
/// `lambda * (psnr - T) + (1 - lambda) * (psnr - prev_psnr)`. With no previous
/// frame the fluctuation term is zero.
pub fn compute_error(
    psnr: f64,
    prev_psnr: Option<f64>,
    objective: &ControlObjective,
) -> Result<f64, ControlError> {
    let psnr = finite("psnr", psnr)?;
    let fluctuation = match prev_psnr {
        Some(p) => psnr - finite("prev_psnr", p)?,
        None => 0.0,
    };
    let lambda = objective.lambda;
    Ok(lambda * (psnr - objective.target_psnr) + (1.0 - lambda) * fluctuation)
}

/// Nearest integer (ties away from zero), then clamped into `range`.
pub fn clamp_round_qp(raw_qp: f64, range: &QpRange) -> Result<i32, ControlError> {
    let raw_qp = finite("raw_qp", raw_qp)?;
    Ok(raw_qp.round().clamp(range.min as f64, range.max as f64) as i32)
}

/// QP chosen for one frame, before and after clamp/round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpDecision {
    pub raw_qp: f64,
    pub qp: i32,
}

/// Incremental memory of one controller.
///
/// Fixed size; nothing here grows with the number of frames seen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerState {
    /// e_{t-1}, the newest error fed to [`pid_step`](Self::pid_step).
    pub prev_error: Option<f64>,
    /// Running sum of all errors fed so far.
    pub error_integral: f64,
    /// e_{t-2}, the error preceding `prev_error`.
    pub prev_derivative_src: Option<f64>,
    /// Running sum of the emitted `o` values.
    pub o_integral: f64,
    /// Running sum of the successive `o_integral` values.
    pub o_double_integral: f64,
    /// Measured PSNR of the frame before the last one fed in.
    pub prev_psnr: Option<f64>,
    pub qp_offset: f64,
    /// Number of QP decisions emitted so far.
    pub frame_index: u64,
}

impl ControllerState {
    pub fn new(qp_offset: f64) -> Self {
        Self {
            prev_error: None,
            error_integral: 0.0,
            prev_derivative_src: None,
            o_integral: 0.0,
            o_double_integral: 0.0,
            prev_psnr: None,
            qp_offset,
            frame_index: 0,
        }
    }

    /// Clears all history and re-anchors at `qp_offset`.
    pub fn reset(&mut self, qp_offset: f64) {
        *self = Self::new(qp_offset);
    }

    /// Feeds the newest error `e_{t-1}` and returns the control variable
    ///
    /// `o_t = kp*e_{t-1} + ki*sum(e_0..=e_{t-1}) - kd*(e_{t-1} - e_{t-2})`.
    ///
    /// The derivative term is subtracted and is zero until two errors have
    /// been seen.
    pub fn pid_step(&mut self, e_prev: f64, gains: &PidGains) -> Result<f64, ControlError> {
        let e = finite("e_prev", e_prev)?;
        let derivative = self.prev_error.map_or(0.0, |p| e - p);
        self.error_integral += e;
        self.prev_derivative_src = self.prev_error;
        self.prev_error = Some(e);
        Ok(gains.kp * e + gains.ki * self.error_integral - gains.kd * derivative)
    }

    /// Advances the `o` accumulators for `frame` and returns its QP.
    ///
    /// Inter frames use the single sum of `o`, intra frames the double sum.
    /// `frame` must equal [`frame_index`](Self::frame_index); each frame can
    /// be decided only once.
    pub fn policy_qp(
        &mut self,
        frame: u64,
        o: f64,
        kind: FrameKind,
        range: &QpRange,
        windup: WindupMode,
    ) -> Result<QpDecision, ControlError> {
        if frame != self.frame_index {
            return Err(ControlError::Sequencing {
                expected: self.frame_index,
                got: frame,
            });
        }
        let o = finite("o", o)?;
        let o_integral = self.o_integral + o;
        let o_double_integral = self.o_double_integral + o_integral;
        let raw_qp = self.qp_offset
            + match kind {
                FrameKind::Inter => o_integral,
                FrameKind::Intra => o_double_integral,
            };
        let qp = clamp_round_qp(raw_qp, range)?;

        let winding_up =
            (raw_qp > range.max as f64 && o > 0.0) || (raw_qp < range.min as f64 && o < 0.0);
        if !(windup == WindupMode::Freeze && winding_up) {
            self.o_integral = o_integral;
            self.o_double_integral = o_double_integral;
        }
        self.frame_index += 1;
        Ok(QpDecision { raw_qp, qp })
    }

    /// `name=value` lines, one per field. `none` marks an absent history value.
    pub fn to_kv(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map_or_else(|| "none".to_string(), |x| x.to_string())
        }
        format!(
            "prev_error={}\nerror_integral={}\nprev_derivative_src={}\no_integral={}\n\
             o_double_integral={}\nprev_psnr={}\nqp_offset={}\nframe_index={}\n",
            opt(self.prev_error),
            self.error_integral,
            opt(self.prev_derivative_src),
            self.o_integral,
            self.o_double_integral,
            opt(self.prev_psnr),
            self.qp_offset,
            self.frame_index,
        )
    }

    pub fn from_kv(text: &str) -> Result<Self, ControlError> {
        fn bad(msg: String) -> ControlError {
            ControlError::MalformedState(msg)
        }
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, ControlError> {
            v.parse()
                .map_err(|_| bad(format!("`{key}` has unparsable value `{v}`")))
        }
        fn opt(key: &str, v: &str) -> Result<Option<f64>, ControlError> {
            if v == "none" {
                Ok(None)
            } else {
                num(key, v).map(Some)
            }
        }

        let mut state = Self::new(0.0);
        let mut seen = [false; 8];
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line `{line}` is not key=value")))?;
            let (key, value) = (key.trim(), value.trim());
            let slot = match key {
                "prev_error" => {
                    state.prev_error = opt(key, value)?;
                    0
                }
                "error_integral" => {
                    state.error_integral = num(key, value)?;
                    1
                }
                "prev_derivative_src" => {
                    state.prev_derivative_src = opt(key, value)?;
                    2
                }
                "o_integral" => {
                    state.o_integral = num(key, value)?;
                    3
                }
                "o_double_integral" => {
                    state.o_double_integral = num(key, value)?;
                    4
                }
                "prev_psnr" => {
                    state.prev_psnr = opt(key, value)?;
                    5
                }
                "qp_offset" => {
                    state.qp_offset = num(key, value)?;
                    6
                }
                "frame_index" => {
                    state.frame_index = num(key, value)?;
                    7
                }
                other => return Err(bad(format!("unknown field `{other}`"))),
            };
            seen[slot] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(bad("missing fields".to_string()));
        }
        Ok(state)
    }
}

impl fmt::Display for ControllerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_kv())
    }
}

/// Everything the harness needs to log about one controller decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameDecision {
    pub qp: i32,
    pub raw_qp: f64,
    /// Error computed from the previous frame, absent on frame 0.
    pub error: Option<f64>,
    pub o: f64,
}

/// A controller bound to one stream: gains, objective and range plus state.
#[derive(Debug, Clone)]
pub struct QualityController {
    gains: PidGains,
    objective: ControlObjective,
    range: QpRange,
    windup: WindupMode,
    state: ControllerState,
}

impl QualityController {
    pub fn new(
        gains: PidGains,
        objective: ControlObjective,
        range: QpRange,
        qp_offset: f64,
    ) -> Result<Self, ControlError> {
        gains.validate()?;
        objective.validate()?;
        range.validate()?;
        finite("qp_offset", qp_offset)?;
        Ok(Self {
            gains,
            objective,
            range,
            windup: WindupMode::default(),
            state: ControllerState::new(qp_offset),
        })
    }

    pub fn with_windup(mut self, windup: WindupMode) -> Self {
        self.windup = windup;
        self
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn gains(&self) -> &PidGains {
        &self.gains
    }

    pub fn objective(&self) -> &ControlObjective {
        &self.objective
    }

    pub fn range(&self) -> &QpRange {
        &self.range
    }

    pub fn reset(&mut self, qp_offset: f64) {
        self.state.reset(qp_offset);
    }

    /// Decides the QP of the next frame.
    ///
    /// `prev_frame_psnr` is the measured PSNR of the frame just encoded; it
    /// must be `None` for frame 0 and `Some` afterwards. Frame 0 gets the
    /// rounded anchor.
    pub fn next_qp(
        &mut self,
        kind: FrameKind,
        prev_frame_psnr: Option<f64>,
    ) -> Result<FrameDecision, ControlError> {
        let frame = self.state.frame_index;
        if frame == 0 {
            if prev_frame_psnr.is_some() {
                return Err(ControlError::UnexpectedMeasurement);
            }
            let qp = clamp_round_qp(self.state.qp_offset, &self.range)?;
            self.state.frame_index = 1;
            return Ok(FrameDecision {
                qp,
                raw_qp: self.state.qp_offset,
                error: None,
                o: 0.0,
            });
        }

        let psnr = prev_frame_psnr.ok_or(ControlError::MissingMeasurement(frame))?;
        let e = compute_error(psnr, self.state.prev_psnr, &self.objective)?;
        self.state.prev_psnr = Some(psnr);
        let o = self.state.pid_step(e, &self.gains)?;
        let decision = self
            .state
            .policy_qp(frame, o, kind, &self.range, self.windup)?;
        Ok(FrameDecision {
            qp: decision.qp,
            raw_qp: decision.raw_qp,
            error: Some(e),
            o,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const RANGE: QpRange = QpRange { min: 0, max: 51 };

    /// Direct evaluation of the PID law over a complete error history.
    fn pid_from_history(history: &[f64], g: &PidGains) -> f64 {
        let n = history.len();
        let last = history[n - 1];
        let sum: f64 = history.iter().sum();
        let derivative = if n >= 2 { last - history[n - 2] } else { 0.0 };
        g.kp * last + g.ki * sum - g.kd * derivative
    }

    fn feed(history: &[f64], g: &PidGains) -> f64 {
        let mut s = ControllerState::new(0.0);
        let mut o = 0.0;
        for &e in history {
            o = s.pid_step(e, g).unwrap();
        }
        o
    }

    #[test]
    fn error_examples() {
        let obj = ControlObjective::new(29.2, 0.8).unwrap();
        assert_eq!(compute_error(29.2, Some(29.2), &obj).unwrap(), 0.0);

        let obj1 = ControlObjective::new(29.2, 1.0).unwrap();
        let e = compute_error(30.0, Some(30.0), &obj1).unwrap();
        assert!((e - 0.8).abs() < 1e-12);

        let e = compute_error(30.0, Some(31.0), &obj).unwrap();
        assert!((e - 0.44).abs() < 1e-12, "{e}");
    }

    #[test]
    fn error_first_frame_has_no_fluctuation_term() {
        let obj = ControlObjective::new(30.0, 0.5).unwrap();
        assert_eq!(compute_error(32.0, None, &obj).unwrap(), 1.0);
    }

    #[test]
    fn error_rejects_non_finite() {
        let obj = ControlObjective::default();
        assert_eq!(
            compute_error(f64::NAN, None, &obj),
            Err(ControlError::NonFinite("psnr"))
        );
        assert_eq!(
            compute_error(30.0, Some(f64::INFINITY), &obj),
            Err(ControlError::NonFinite("prev_psnr"))
        );
    }

    #[test]
    fn parameter_validation() {
        assert!(PidGains::new(-0.1, 0.0, 0.0).is_err());
        assert!(PidGains::new(0.0, 0.0, f64::NAN).is_err());
        assert!(ControlObjective::new(30.0, 1.2).is_err());
        assert!(ControlObjective::new(-1.0, 0.5).is_err());
        assert!(QpRange::new(10, 9).is_err());
        assert!(QpRange::new(22, 22).is_ok());
    }

    #[test]
    fn pid_examples() {
        let mut s = ControllerState::new(0.0);
        assert_eq!(s.pid_step(0.0, &PidGains::default()).unwrap(), 0.0);

        let p_only = PidGains::new(1.0, 0.0, 0.0).unwrap();
        assert_eq!(feed(&[-7.0, 2.0], &p_only), 2.0);

        let g = PidGains::default();
        let history = [1.0, 0.5];
        let oracle = pid_from_history(&history, &g);
        assert!((oracle - 1.51).abs() < 1e-12);
        assert!((feed(&history, &g) - oracle).abs() < 1e-12);
    }

    #[test]
    fn pid_tracks_history_fields() {
        let mut s = ControllerState::new(0.0);
        let g = PidGains::default();
        s.pid_step(1.0, &g).unwrap();
        s.pid_step(0.5, &g).unwrap();
        assert_eq!(s.prev_error, Some(0.5));
        assert_eq!(s.prev_derivative_src, Some(1.0));
        assert_eq!(s.error_integral, 1.5);
    }

    #[test]
    fn clamp_round_examples() {
        assert_eq!(clamp_round_qp(54.3, &RANGE).unwrap(), 51);
        assert_eq!(clamp_round_qp(-3.0, &RANGE).unwrap(), 0);
        assert_eq!(clamp_round_qp(32.4, &RANGE).unwrap(), 32);
        assert_eq!(clamp_round_qp(32.5, &RANGE).unwrap(), 33);
        let wide = QpRange::new(-10, 10).unwrap();
        assert_eq!(clamp_round_qp(-2.5, &wide).unwrap(), -3);
        assert_eq!(clamp_round_qp(1e300, &RANGE).unwrap(), 51);
        assert!(clamp_round_qp(f64::NAN, &RANGE).is_err());
    }

    #[test]
    fn policy_zero_action_holds_anchor() {
        let mut s = ControllerState::new(32.0);
        for f in 0..50 {
            let d = s
                .policy_qp(f, 0.0, FrameKind::Inter, &RANGE, WindupMode::Accumulate)
                .unwrap();
            assert_eq!(d.qp, 32);
        }
    }

    #[test]
    fn policy_inter_and_intra_accumulate() {
        let mut inter = ControllerState::new(32.0);
        let mut intra = ControllerState::new(32.0);
        let mut last = (0.0, 0.0);
        for f in 0..2 {
            last.0 = inter
                .policy_qp(f, 1.0, FrameKind::Inter, &RANGE, WindupMode::Accumulate)
                .unwrap()
                .raw_qp;
            last.1 = intra
                .policy_qp(f, 1.0, FrameKind::Intra, &RANGE, WindupMode::Accumulate)
                .unwrap()
                .raw_qp;
        }
        assert_eq!(last, (34.0, 35.0));
    }

    #[test]
    fn policy_rejects_repeated_frame() {
        let mut s = ControllerState::new(32.0);
        s.policy_qp(0, 1.0, FrameKind::Inter, &RANGE, WindupMode::Accumulate)
            .unwrap();
        let err = s
            .policy_qp(0, 1.0, FrameKind::Inter, &RANGE, WindupMode::Accumulate)
            .unwrap_err();
        assert_eq!(
            err,
            ControlError::Sequencing {
                expected: 1,
                got: 0
            }
        );
        assert_eq!(s.o_integral, 1.0);
    }

    #[test]
    fn windup_accumulates_by_default() {
        let mut s = ControllerState::new(50.0);
        for f in 0..5 {
            let d = s
                .policy_qp(f, 2.0, FrameKind::Inter, &RANGE, WindupMode::Accumulate)
                .unwrap();
            assert_eq!(d.qp, 51);
        }
        assert_eq!(s.o_integral, 10.0);
        // Unwinding takes as many frames of negative action as were wound up.
        let d = s
            .policy_qp(5, -2.0, FrameKind::Inter, &RANGE, WindupMode::Accumulate)
            .unwrap();
        assert_eq!(d.qp, 51);
    }

    #[test]
    fn windup_freeze_stops_at_the_bound() {
        let mut s = ControllerState::new(50.0);
        for f in 0..5 {
            s.policy_qp(f, 2.0, FrameKind::Inter, &RANGE, WindupMode::Freeze)
                .unwrap();
        }
        assert_eq!(s.o_integral, 0.0);
        assert_eq!(s.frame_index, 5);
        let d = s
            .policy_qp(5, -2.0, FrameKind::Inter, &RANGE, WindupMode::Freeze)
            .unwrap();
        assert_eq!(d.qp, 48);
    }

    #[test]
    fn first_frame_uses_rounded_anchor() {
        let mut c = QualityController::new(
            PidGains::default(),
            ControlObjective::default(),
            RANGE,
            31.6,
        )
        .unwrap();
        let d = c.next_qp(FrameKind::Inter, None).unwrap();
        assert_eq!(d.qp, 32);
        assert_eq!(d.error, None);
        assert_eq!(d.o, 0.0);
    }

    #[test]
    fn measurement_sequencing() {
        let mut c = QualityController::new(
            PidGains::default(),
            ControlObjective::default(),
            RANGE,
            32.0,
        )
        .unwrap();
        assert_eq!(
            c.next_qp(FrameKind::Inter, Some(37.0)),
            Err(ControlError::UnexpectedMeasurement)
        );
        c.next_qp(FrameKind::Inter, None).unwrap();
        assert_eq!(
            c.next_qp(FrameKind::Inter, None),
            Err(ControlError::MissingMeasurement(1))
        );
    }

    #[test]
    fn on_target_plant_holds_qp() {
        let obj = ControlObjective::default();
        let mut c = QualityController::new(PidGains::default(), obj, RANGE, 32.0).unwrap();
        let mut psnr = None;
        for _ in 0..1000 {
            let d = c.next_qp(FrameKind::Inter, psnr).unwrap();
            assert_eq!(d.qp, 32);
            psnr = Some(obj.target_psnr);
        }
    }

    #[test]
    fn reset_semantics() {
        let make = || {
            QualityController::new(
                PidGains::default(),
                ControlObjective::default(),
                RANGE,
                30.0,
            )
            .unwrap()
        };
        let feed_stream = |c: &mut QualityController, values: &[f64]| -> Vec<i32> {
            let mut out = vec![c.next_qp(FrameKind::Inter, None).unwrap().qp];
            for &v in values {
                out.push(c.next_qp(FrameKind::Inter, Some(v)).unwrap().qp);
            }
            out
        };

        let mut c = make();
        feed_stream(&mut c, &[39.0, 38.0, 36.5, 40.1]);
        c.reset(30.0);
        let once = *c.state();
        c.reset(30.0);
        assert_eq!(once, *c.state());
        assert_eq!(*c.state(), ControllerState::new(30.0));

        let stream = [37.0, 36.0, 38.5, 37.2, 37.2];
        let mut fresh = make();
        assert_eq!(
            feed_stream(&mut c, &stream),
            feed_stream(&mut fresh, &stream)
        );

        c.reset(32.4);
        assert_eq!(c.next_qp(FrameKind::Inter, None).unwrap().qp, 32);
        let target = c.objective().target_psnr;
        assert_eq!(c.next_qp(FrameKind::Inter, Some(target)).unwrap().qp, 32);
    }

    #[test]
    fn positive_error_raises_qp() {
        let mut c = QualityController::new(
            PidGains::default(),
            ControlObjective::default(),
            RANGE,
            32.0,
        )
        .unwrap();
        c.next_qp(FrameKind::Inter, None).unwrap();
        let mut qp = 32;
        for _ in 0..5 {
            let d = c.next_qp(FrameKind::Inter, Some(38.0)).unwrap();
            assert!(d.o > 0.0);
            assert!(d.qp >= qp);
            qp = d.qp;
        }
        assert!(qp > 32);
    }

    #[test]
    fn state_kv_roundtrip() {
        let mut c = QualityController::new(
            PidGains::default(),
            ControlObjective::default(),
            RANGE,
            32.0,
        )
        .unwrap();
        let fresh = c.state().to_kv();
        assert!(fresh.contains("prev_error=none\n"));
        assert_eq!(ControllerState::from_kv(&fresh).unwrap(), *c.state());

        c.next_qp(FrameKind::Inter, None).unwrap();
        for v in [38.1, 36.93, 37.0001] {
            c.next_qp(FrameKind::Intra, Some(v)).unwrap();
        }
        let kv = c.state().to_string();
        assert_eq!(ControllerState::from_kv(&kv).unwrap(), *c.state());
        assert!(ControllerState::from_kv("prev_error=1\n").is_err());
        assert!(ControllerState::from_kv(&format!("{kv}bogus=1\n")).is_err());
    }

    fn history() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, 1..64)
    }

    proptest! {
        #[test]
        fn pid_is_linear(h in history(), c in -8.0f64..8.0) {
            let g = PidGains::default();
            let base = feed(&h, &g);
            let scaled: Vec<f64> = h.iter().map(|e| c * e).collect();
            let tol = 1e-9 * (1.0 + base.abs() * c.abs());
            prop_assert!((feed(&scaled, &g) - c * base).abs() <= tol);
        }

        #[test]
        fn pid_matches_direct_summation(h in history()) {
            let g = PidGains::default();
            let direct = pid_from_history(&h, &g);
            prop_assert!((feed(&h, &g) - direct).abs() <= 1e-9 * (1.0 + direct.abs()));
        }

        #[test]
        fn emitted_qp_always_in_range(
            values in prop::collection::vec(0.0f64..80.0, 1..200),
            intra_every in 0usize..5,
            lo in 0i32..20,
            span in 0i32..40,
        ) {
            let range = QpRange::new(lo, lo + span).unwrap();
            let mut c = QualityController::new(
                PidGains::default(), ControlObjective::default(), range, 32.0,
            ).unwrap();
            let mut prev = None;
            for (i, v) in values.iter().enumerate() {
                let kind = if intra_every > 0 && i % intra_every == 0 {
                    FrameKind::Intra
                } else {
                    FrameKind::Inter
                };
                let d = c.next_qp(kind, prev).unwrap();
                prop_assert!(range.contains(d.qp));
                prev = Some(*v);
            }
        }

        #[test]
        fn lambda_endpoints(psnr in 10.0f64..60.0, prev in 10.0f64..60.0, t in 10.0f64..60.0) {
            let setpoint_only = ControlObjective::new(t, 1.0).unwrap();
            let smooth_only = ControlObjective::new(t, 0.0).unwrap();
            prop_assert_eq!(compute_error(psnr, Some(prev), &setpoint_only).unwrap(), psnr - t);
            prop_assert_eq!(compute_error(psnr, Some(prev), &smooth_only).unwrap(), psnr - prev);
        }
    }
}
