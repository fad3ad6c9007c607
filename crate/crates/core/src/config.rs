//! Experiment configuration files.
//!
//! A config is TOML whose keys are read as dotted paths, so these two are
//! equivalent:
//!
//! ```toml
//! gains.kp = 2.12
//!
//! [gains]
//! kp = 2.12
//! ```
//!
//! Every key is optional; absent keys take their defaults. Unknown keys are
//! an error. `--set key=value` overrides use the same paths and are applied
//! after the file, in order. The recognized keys are:
//!
//! | key | default |
//! |---|---|
//! | `n_frames` | 300 |
//! | `seed` | 0 |
//! | `mode` | `controlled` (or `fixed`) |
//! | `qp_offset` | 32.0 |
//! | `windup` | `accumulate` (or `freeze`) |
//! | `schedule.intra_period` | 0 (all inter; 1 = all intra; n = every n-th frame intra) |
//! | `gains.kp`, `gains.ki`, `gains.kd` | 2.12, 0.10, 0.60 |
//! | `objective.target_psnr`, `objective.lambda` | 37.2, 0.8 |
//! | `range.qp_min`, `range.qp_max` | 0, 51 |
//! | `plant.kind` | `first_order` (or `zero_order`, `trace`) |
//! | `plant.inertia` | 0.5 |
//! | `plant.psnr_intercept`, `plant.psnr_slope` | 50.0, 0.4 |
//! | `plant.rate_ref_bits`, `plant.rate_ref_qp` | 100000.0, 32 |
//! | `plant.initial_psnr` | unset |
//! | `plant.trace_path` | unset, required for `trace` |
//! | `disturbance.kind` | `none` (or `constant`, `step`, `sinusoid`, `noise`) |
//! | `disturbance.amplitude` | 1.0 |
//! | `disturbance.period` | 30.0 |
//! | `disturbance.step_frame` | 0 |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;
use toml::Value;

use crate::controller::{ControlError, ControlObjective, PidGains, QpRange, WindupMode};
use crate::harness::{ExperimentConfig, FrameSchedule, HarnessError, Mode};
use crate::plant::{DisturbanceSpec, PlantError, PlantKind, PlantModel, TraceTable};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file `{0}` not found")]
    MissingFile(PathBuf),
    #[error("cannot read config `{path}`: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected key=value")]
    BadOverride(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("`{key}`: expected {expected}, got `{got}`")]
    InvalidValue {
        key: String,
        expected: &'static str,
        got: String,
    },
    #[error("`{key}`: {reason}")]
    Invariant { key: String, reason: String },
    #[error("`plant.trace_path`: {0}")]
    Trace(PlantError),
}

/// Flat `dotted.key -> value` view of a config plus overrides.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigSource {
    entries: BTreeMap<String, Value>,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Reads an override value: a TOML scalar if it parses as one, else a bare string.
pub fn parse_scalar(raw: &str) -> Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => match t.remove("v") {
            Some(Value::Table(_)) | None => Value::String(raw.to_string()),
            Some(v) => v,
        },
        Err(_) => Value::String(raw.to_string()),
    }
}

impl ConfigSource {
    /// Parses config text. Relative `plant.trace_path` values are resolved
    /// against `base_dir` when given.
    pub fn from_str(text: &str, base_dir: Option<&Path>) -> Result<Self, ConfigError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let mut entries = BTreeMap::new();
        flatten("", &table, &mut entries);
        if let (Some(base), Some(Value::String(p))) =
            (base_dir, entries.get_mut("plant.trace_path"))
        {
            if Path::new(p.as_str()).is_relative() {
                *p = base.join(&*p).to_string_lossy().into_owned();
            }
        }
        Ok(Self { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ConfigError::MissingFile(path.to_path_buf()),
            _ => ConfigError::Read {
                path: path.to_path_buf(),
                source: e,
            },
        })?;
        Self::from_str(&text, path.parent())
    }

    pub fn set(&mut self, key: &str, value: Value) {
        self.entries.insert(key.to_string(), value);
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::BadOverride(spec.to_string()));
        }
        self.set(key, parse_scalar(value));
        Ok(())
    }

    pub fn build(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut reader = Reader {
            entries: self.entries.clone(),
        };
        let config = reader.read()?;
        if let Some(key) = reader.entries.keys().next() {
            return Err(ConfigError::UnknownKey(key.clone()));
        }
        Ok(config)
    }
}

/// Loads `path`, applies `overrides` in order and validates the result.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut source = ConfigSource::from_file(path)?;
    for o in overrides {
        source.apply_override(o)?;
    }
    source.build()
}

fn describe(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

struct Reader {
    entries: BTreeMap<String, Value>,
}

impl Reader {
    fn take(&mut self, key: &str) -> Option<Value> {
        self.entries.remove(key)
    }

    fn invalid(key: &str, expected: &'static str, v: &Value) -> ConfigError {
        ConfigError::InvalidValue {
            key: key.to_string(),
            expected,
            got: describe(v),
        }
    }

    fn float(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        Ok(self.opt_float(key)?.unwrap_or(default))
    }

    fn opt_float(&mut self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Float(f)) => Ok(Some(f)),
            Some(Value::Integer(i)) => Ok(Some(i as f64)),
            Some(v) => Err(Self::invalid(key, "a number", &v)),
        }
    }

    fn int(&mut self, key: &str, default: i64) -> Result<i64, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Integer(i)) => Ok(i),
            Some(v) => Err(Self::invalid(key, "an integer", &v)),
        }
    }

    fn int_in<T: TryFrom<i64>>(
        &mut self,
        key: &str,
        default: T,
        expected: &'static str,
    ) -> Result<T, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some(Value::Integer(i)) => {
                T::try_from(i).map_err(|_| Self::invalid(key, expected, &Value::Integer(i)))
            }
            Some(v) => Err(Self::invalid(key, expected, &v)),
        }
    }

    fn word(&mut self, key: &str, default: &str) -> Result<String, ConfigError> {
        match self.take(key) {
            None => Ok(default.to_string()),
            Some(Value::String(s)) => Ok(s),
            Some(v) => Err(Self::invalid(key, "a string", &v)),
        }
    }

    fn read(&mut self) -> Result<ExperimentConfig, ConfigError> {
        let defaults = ExperimentConfig::default();

        let n_frames = self.int_in("n_frames", defaults.n_frames, "a frame count >= 1")?;
        if n_frames == 0 {
            return Err(invariant("n_frames", "must be >= 1"));
        }
        let seed = match self.take("seed") {
            None => defaults.seed,
            Some(Value::Integer(i)) if i >= 0 => i as u64,
            Some(Value::String(s)) => s.parse().map_err(|_| {
                Self::invalid("seed", "a 64-bit unsigned integer", &Value::String(s))
            })?,
            Some(v) => return Err(Self::invalid("seed", "a 64-bit unsigned integer", &v)),
        };
        let mode = match self.word("mode", "controlled")?.as_str() {
            "controlled" => Mode::Controlled,
            "fixed" | "fixed_qp" => Mode::FixedQp,
            other => {
                return Err(Self::invalid(
                    "mode",
                    "`controlled` or `fixed`",
                    &Value::String(other.into()),
                ))
            }
        };
        let windup = match self.word("windup", "accumulate")?.as_str() {
            "accumulate" => WindupMode::Accumulate,
            "freeze" => WindupMode::Freeze,
            other => {
                return Err(Self::invalid(
                    "windup",
                    "`accumulate` or `freeze`",
                    &Value::String(other.into()),
                ))
            }
        };
        let qp_offset = self.float("qp_offset", defaults.qp_offset)?;
        if !qp_offset.is_finite() {
            return Err(invariant("qp_offset", "must be finite"));
        }
        let schedule = match self.int_in::<usize>("schedule.intra_period", 0, "a period >= 0")? {
            0 => FrameSchedule::AllInter,
            1 => FrameSchedule::AllIntra,
            n => FrameSchedule::IntraEvery(n),
        };

        let gains = PidGains {
            kp: self.float("gains.kp", defaults.gains.kp)?,
            ki: self.float("gains.ki", defaults.gains.ki)?,
            kd: self.float("gains.kd", defaults.gains.kd)?,
        };
        gains
            .validate()
            .map_err(|e| control_invariant("gains", e))?;

        let objective = ControlObjective {
            target_psnr: self.float("objective.target_psnr", defaults.objective.target_psnr)?,
            lambda: self.float("objective.lambda", defaults.objective.lambda)?,
        };
        objective
            .validate()
            .map_err(|e| control_invariant("objective", e))?;

        let qp_key = |k| move |v: i64| i32::try_from(v).map_err(|_| invariant(k, "out of range"));
        let range = QpRange {
            min: qp_key("range.qp_min")(self.int("range.qp_min", defaults.range.min.into())?)?,
            max: qp_key("range.qp_max")(self.int("range.qp_max", defaults.range.max.into())?)?,
        };
        range.validate().map_err(|e| match e {
            ControlError::InvalidParameter { reason, .. } => ConfigError::Invariant {
                key: "range.qp_min".into(),
                reason,
            },
            other => invariant("range", &other.to_string()),
        })?;

        let plant = self.read_plant(seed)?;

        let config = ExperimentConfig {
            plant,
            gains,
            objective,
            range,
            qp_offset,
            schedule,
            n_frames,
            seed,
            mode,
            windup,
        };
        config.validate().map_err(|e| match e {
            HarnessError::Plant(PlantError::InvalidParameter { name, reason }) => {
                ConfigError::Invariant {
                    key: name.to_string(),
                    reason,
                }
            }
            other => invariant("config", &other.to_string()),
        })?;
        Ok(config)
    }

    fn read_plant(&mut self, seed: u64) -> Result<PlantModel, ConfigError> {
        let base = PlantModel::default();
        let kind_word = self.word("plant.kind", "first_order")?;
        let inertia = self.float("plant.inertia", 0.5)?;
        let trace_path = match self.take("plant.trace_path") {
            None => None,
            Some(Value::String(s)) => Some(PathBuf::from(s)),
            Some(v) => return Err(Self::invalid("plant.trace_path", "a path string", &v)),
        };
        let kind = match kind_word.as_str() {
            "zero_order" => PlantKind::ZeroOrder,
            "first_order" => PlantKind::FirstOrder { inertia },
            "trace" => {
                let path = trace_path.ok_or_else(|| {
                    invariant("plant.trace_path", "required when plant.kind = trace")
                })?;
                PlantKind::TraceDriven(TraceTable::load(&path).map_err(ConfigError::Trace)?)
            }
            other => {
                return Err(Self::invalid(
                    "plant.kind",
                    "`zero_order`, `first_order` or `trace`",
                    &Value::String(other.into()),
                ))
            }
        };

        let amplitude = self.float("disturbance.amplitude", 1.0)?;
        let period = self.float("disturbance.period", 30.0)?;
        let step_frame = self.int_in::<usize>("disturbance.step_frame", 0, "a frame index >= 0")?;
        let disturbance = match self.word("disturbance.kind", "none")?.as_str() {
            "none" => DisturbanceSpec::None,
            "constant" => DisturbanceSpec::Constant { amplitude },
            "step" => DisturbanceSpec::Step {
                amplitude,
                step_frame,
            },
            "sinusoid" => DisturbanceSpec::Sinusoid { amplitude, period },
            "noise" => DisturbanceSpec::SeededNoise { amplitude, seed },
            other => {
                return Err(Self::invalid(
                    "disturbance.kind",
                    "`none`, `constant`, `step`, `sinusoid` or `noise`",
                    &Value::String(other.into()),
                ))
            }
        };

        let rate_ref_qp = i32::try_from(self.int("plant.rate_ref_qp", base.rate_ref_qp.into())?)
            .map_err(|_| invariant("plant.rate_ref_qp", "out of range"))?;
        let mut plant = PlantModel::new(kind)
            .with_affine(
                self.float("plant.psnr_intercept", base.psnr_intercept)?,
                self.float("plant.psnr_slope", base.psnr_slope)?,
            )
            .with_rate(
                self.float("plant.rate_ref_bits", base.rate_ref_bits)?,
                rate_ref_qp,
            )
            .with_disturbance(disturbance);
        if let Some(p) = self.opt_float("plant.initial_psnr")? {
            plant = plant.with_initial_psnr(p);
        }
        Ok(plant)
    }
}

fn invariant(key: &str, reason: &str) -> ConfigError {
    ConfigError::Invariant {
        key: key.to_string(),
        reason: reason.to_string(),
    }
}

fn control_invariant(section: &str, e: ControlError) -> ConfigError {
    match e {
        ControlError::InvalidParameter { name, reason } => ConfigError::Invariant {
            key: format!("{section}.{name}"),
            reason,
        },
        ControlError::NonFinite(name) => ConfigError::Invariant {
            key: format!("{section}.{name}"),
            reason: "must be finite".into(),
        },
        other => invariant(section, &other.to_string()),
    }
}

/// Writes `config` as dotted-key TOML that [`ConfigSource::from_str`] reads
/// back to an equal config.
pub fn emit_config(config: &ExperimentConfig) -> String {
    let mut out = String::new();
    let mut line = |k: &str, v: String| {
        let _ = writeln!(out, "{k} = {v}");
    };
    let f = |x: f64| format!("{x:?}");
    let s = |x: &str| Value::String(x.to_string()).to_string();

    line("n_frames", config.n_frames.to_string());
    line(
        "seed",
        match i64::try_from(config.seed) {
            Ok(i) => i.to_string(),
            Err(_) => s(&config.seed.to_string()),
        },
    );
    line(
        "mode",
        s(match config.mode {
            Mode::Controlled => "controlled",
            Mode::FixedQp => "fixed",
        }),
    );
    line("qp_offset", f(config.qp_offset));
    line(
        "windup",
        s(match config.windup {
            WindupMode::Accumulate => "accumulate",
            WindupMode::Freeze => "freeze",
        }),
    );
    line(
        "schedule.intra_period",
        match config.schedule {
            FrameSchedule::AllInter => 0,
            FrameSchedule::AllIntra => 1,
            FrameSchedule::IntraEvery(n) => n,
        }
        .to_string(),
    );
    line("gains.kp", f(config.gains.kp));
    line("gains.ki", f(config.gains.ki));
    line("gains.kd", f(config.gains.kd));
    line("objective.target_psnr", f(config.objective.target_psnr));
    line("objective.lambda", f(config.objective.lambda));
    line("range.qp_min", config.range.min.to_string());
    line("range.qp_max", config.range.max.to_string());

    let p = &config.plant;
    match &p.kind {
        PlantKind::ZeroOrder => line("plant.kind", s("zero_order")),
        PlantKind::FirstOrder { inertia } => {
            line("plant.kind", s("first_order"));
            line("plant.inertia", f(*inertia));
        }
        PlantKind::TraceDriven(table) => {
            line("plant.kind", s("trace"));
            if let Some(origin) = &table.origin {
                line("plant.trace_path", s(&origin.to_string_lossy()));
            }
        }
    }
    line("plant.psnr_intercept", f(p.psnr_intercept));
    line("plant.psnr_slope", f(p.psnr_slope));
    line("plant.rate_ref_bits", f(p.rate_ref_bits));
    line("plant.rate_ref_qp", p.rate_ref_qp.to_string());
    if let Some(init) = p.initial_psnr {
        line("plant.initial_psnr", f(init));
    }
    match p.disturbance {
        DisturbanceSpec::None => line("disturbance.kind", s("none")),
        DisturbanceSpec::Constant { amplitude } => {
            line("disturbance.kind", s("constant"));
            line("disturbance.amplitude", f(amplitude));
        }
        DisturbanceSpec::Step {
            amplitude,
            step_frame,
        } => {
            line("disturbance.kind", s("step"));
            line("disturbance.amplitude", f(amplitude));
            line("disturbance.step_frame", step_frame.to_string());
        }
        DisturbanceSpec::Sinusoid { amplitude, period } => {
            line("disturbance.kind", s("sinusoid"));
            line("disturbance.amplitude", f(amplitude));
            line("disturbance.period", f(period));
        }
        DisturbanceSpec::SeededNoise { amplitude, .. } => {
            line("disturbance.kind", s("noise"));
            line("disturbance.amplitude", f(amplitude));
        }
    }
    out
}
