//! Pipeline assembly and execution.
//!
//! [`run`] wires playback through calibration-applied IK tracking, the fixed
//! sync delay, insole demultiplexing and filtering, nearest-timestamp
//! matching, inverse dynamics, the multi-worker static optimization stage
//! and the deadline sequencer, then writes `q.csv`, `tau.csv`, `act.csv`,
//! the latency report, the event log and the discards log.
//!
//! Two executors share all stage logic: the logical one runs a
//! discrete-event loop on a virtual clock (bit-identical outputs across
//! runs), the realtime one paces releases against the wall clock and fans
//! the optimization out to real worker threads.

mod engine;
mod logical;
mod realtime;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::analysis::Table;
use crate::calib::{CalibError, CalibrationOptions, CalibrationSet, HeadingMode};
use crate::filter::{FilterError, SplineWindow};
use crate::ik::IkError;
use crate::model::{load_model, ChainModel, ModelError};
use crate::so::SoError;
use crate::streams::{Session, StreamError};
use crate::sync::{DEFAULT_DELAY_S, DEFAULT_TOL_S};
use crate::telemetry::{LatencyReport, PipelineLog};

pub use engine::EmittedResult;

#[derive(Debug, Clone, PartialEq)]
pub enum PipelineError {
    /// Bad or inconsistent configuration (missing files, invalid values).
    Config(String),
    /// A stage failed while running.
    Stage(String),
    Io(String),
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Config(m) => write!(f, "config error: {m}"),
            PipelineError::Stage(m) => write!(f, "pipeline stage error: {m}"),
            PipelineError::Io(m) => write!(f, "pipeline io error: {m}"),
        }
    }
}

impl std::error::Error for PipelineError {}

macro_rules! stage_error_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for PipelineError {
            fn from(e: $ty) -> Self {
                PipelineError::Stage(e.to_string())
            }
        })*
    };
}

stage_error_from!(IkError, FilterError, SoError, crate::id::IdError, crate::telemetry::TelemetryError);

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl From<StreamError> for PipelineError {
    fn from(e: StreamError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl From<CalibError> for PipelineError {
    fn from(e: CalibError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Logical,
    Realtime,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformCfg {
    #[serde(default)]
    pub translation: Option<[f64; 3]>,
    /// w x y z.
    #[serde(default)]
    pub rotation: Option<[f64; 4]>,
}

impl TransformCfg {
    pub fn to_isometry(&self) -> Result<Isometry3<f64>, PipelineError> {
        let t = self.translation.unwrap_or([0.0; 3]);
        let rot = match self.rotation {
            Some([w, x, y, z]) => {
                let q = Quaternion::new(w, x, y, z);
                if (q.norm() - 1.0).abs() > 1e-9 {
                    return Err(PipelineError::Config(format!(
                        "mount rotation norm {:.9} not unit",
                        q.norm()
                    )));
                }
                UnitQuaternion::from_quaternion(q)
            }
            None => UnitQuaternion::identity(),
        };
        Ok(Isometry3::from_parts(Translation3::new(t[0], t[1], t[2]), rot))
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        let q = iso.rotation.quaternion();
        TransformCfg {
            translation: Some([iso.translation.x, iso.translation.y, iso.translation.z]),
            rotation: Some([q.w, q.i, q.j, q.k]),
        }
    }
}

fn default_rate() -> f64 {
    100.0
}
fn default_threshold() -> f64 {
    crate::id::DEFAULT_FORCE_THRESHOLD_N
}
fn default_left_segment() -> String {
    "foot_l".into()
}
fn default_right_segment() -> String {
    "foot_r".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncCfg {
    pub delay_s: f64,
    pub tol_s: f64,
}

impl Default for SyncCfg {
    fn default() -> Self {
        SyncCfg { delay_s: DEFAULT_DELAY_S, tol_s: DEFAULT_TOL_S }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoCfg {
    pub workers: usize,
    pub deadline_s: f64,
    pub residual_weight: f64,
    /// Inject an artificial solver delay into every n-th message (0 = off);
    /// diagnostic knob for deadline accounting.
    #[serde(default)]
    pub inject_delay_every: usize,
    #[serde(default)]
    pub inject_delay_s: f64,
}

impl Default for SoCfg {
    fn default() -> Self {
        SoCfg {
            workers: crate::so::DEFAULT_WORKERS,
            deadline_s: crate::so::DEFAULT_DEADLINE_S,
            residual_weight: crate::so::DEFAULT_RESIDUAL_WEIGHT,
            inject_delay_every: 0,
            inject_delay_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterCfg {
    pub window: usize,
    pub smoothing: f64,
    pub delay: usize,
}

impl Default for FilterCfg {
    fn default() -> Self {
        FilterCfg { window: 50, smoothing: 0.0, delay: 25 }
    }
}

impl FilterCfg {
    pub fn to_window(self) -> Result<SplineWindow, PipelineError> {
        SplineWindow::new(self.window, self.smoothing, self.delay)
            .map_err(|e| PipelineError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InsoleCfg {
    #[serde(default = "default_rate")]
    pub rate_hz: f64,
    #[serde(default = "default_threshold")]
    pub threshold_n: f64,
    #[serde(default = "default_left_segment")]
    pub left_segment: String,
    #[serde(default = "default_right_segment")]
    pub right_segment: String,
    #[serde(default)]
    pub mount_left: Option<TransformCfg>,
    #[serde(default)]
    pub mount_right: Option<TransformCfg>,
}

impl Default for InsoleCfg {
    fn default() -> Self {
        InsoleCfg {
            rate_hz: default_rate(),
            threshold_n: default_threshold(),
            left_segment: default_left_segment(),
            right_segment: default_right_segment(),
            mount_left: None,
            mount_right: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibCfg {
    pub reference_frame: String,
    pub heading_mode: HeadingMode,
}

impl Default for CalibCfg {
    fn default() -> Self {
        CalibCfg { reference_frame: "pelvis_imu".into(), heading_mode: HeadingMode::Global }
    }
}

impl CalibCfg {
    pub fn to_options(&self) -> CalibrationOptions {
        CalibrationOptions {
            heading_mode: self.heading_mode,
            reference_frame: self.reference_frame.clone(),
            frames: 10,
        }
    }
}

/// Full pipeline configuration; the on-disk form is TOML with these keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: PathBuf,
    pub session: PathBuf,
    #[serde(default)]
    pub calibration: Option<PathBuf>,
    pub mode: Mode,
    pub output_dir: PathBuf,
    pub body_weight_n: f64,
    #[serde(default)]
    pub sync: SyncCfg,
    #[serde(default)]
    pub so: SoCfg,
    #[serde(default)]
    pub filter_ik: FilterCfg,
    #[serde(default)]
    pub filter_insole: FilterCfg,
    #[serde(default)]
    pub insole: InsoleCfg,
    #[serde(default)]
    pub calib: CalibCfg,
}

impl PipelineConfig {
    /// Load a config file; relative paths resolve against the file's
    /// directory.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<PipelineConfig, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &PathBuf| if p.is_relative() { base.join(p) } else { p.clone() };
        cfg.model = resolve(&cfg.model);
        cfg.session = resolve(&cfg.session);
        cfg.calibration = cfg.calibration.as_ref().map(|p| resolve(p));
        cfg.output_dir = resolve(&cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), PipelineError> {
        let text =
            toml::to_string_pretty(self).map_err(|e| PipelineError::Config(e.to_string()))?;
        std::fs::write(path.as_ref(), text)
            .map_err(|e| PipelineError::Io(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        for (what, p) in [("model", &self.model), ("session", &self.session)] {
            if !p.exists() {
                return Err(PipelineError::Config(format!(
                    "{what} file '{}' does not exist",
                    p.display()
                )));
            }
        }
        if let Some(c) = &self.calibration {
            if !c.exists() {
                return Err(PipelineError::Config(format!(
                    "calibration file '{}' does not exist",
                    c.display()
                )));
            }
        }
        if self.so.workers < 1 {
            return Err(PipelineError::Config("so.workers must be >= 1".into()));
        }
        if !(self.so.deadline_s > 0.0) {
            return Err(PipelineError::Config("so.deadline_s must be > 0".into()));
        }
        if !(self.body_weight_n > 0.0) {
            return Err(PipelineError::Config("body_weight_n must be > 0".into()));
        }
        if self.sync.delay_s < 0.0 {
            return Err(PipelineError::Config("sync.delay_s must be >= 0".into()));
        }
        self.filter_ik.to_window()?;
        self.filter_insole.to_window()?;
        Ok(())
    }
}

/// Everything a run produced, beyond the files on disk.
#[derive(Debug)]
pub struct RunSummary {
    pub mode: Mode,
    pub orientation_samples: u64,
    pub joint_states: u64,
    pub matched: u64,
    pub match_dropped: u64,
    pub so_received: u64,
    pub emitted: u64,
    pub discarded_late: u64,
    pub discarded_order: u64,
    pub logs: Vec<PipelineLog>,
    /// Sequencer-emitted results in emission order.
    pub emitted_results: Vec<EmittedResult>,
    pub report: LatencyReport,
    pub output_dir: PathBuf,
}

/// Run a configured session end to end and write the output artifacts.
pub fn run(config: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    config.validate()?;
    let model = Arc::new(load_model(&config.model)?);
    let session = Session::load(&config.session)?;
    let calibration = match &config.calibration {
        Some(p) => CalibrationSet::load(p)?,
        None => CalibrationSet::identity(model.mapping.frames().map(|s| s.to_string())),
    };
    for seg in [&config.insole.left_segment, &config.insole.right_segment] {
        if model.segment_index(seg).is_none() {
            return Err(PipelineError::Config(format!("insole segment '{seg}' not in model")));
        }
    }

    let mut engine = engine::Engine::new(model.clone(), calibration, config)?;
    let outcome = match config.mode {
        Mode::Logical => logical::execute(&mut engine, &session, config)?,
        Mode::Realtime => realtime::execute(&mut engine, &session, config)?,
    };

    write_outputs(config, &model, &engine, &outcome)?;

    let report = LatencyReport::build(&outcome.logs, config.so.deadline_s, config.so.workers);
    Ok(RunSummary {
        mode: config.mode,
        orientation_samples: engine.orientation_samples,
        joint_states: engine.joint_states,
        matched: engine.matched,
        match_dropped: engine.match_dropped,
        so_received: outcome.so_received,
        emitted: outcome.sequencer_emitted,
        discarded_late: outcome.discarded_late,
        discarded_order: outcome.discarded_order,
        logs: outcome.logs,
        emitted_results: outcome.emitted_results,
        report,
        output_dir: config.output_dir.clone(),
    })
}

pub(crate) struct ExecOutcome {
    pub q_table: Table,
    pub tau_table: Table,
    pub act_table: Table,
    pub logs: Vec<PipelineLog>,
    pub emitted_results: Vec<EmittedResult>,
    pub so_received: u64,
    pub sequencer_emitted: u64,
    pub discarded_late: u64,
    pub discarded_order: u64,
    pub discard_lines: Vec<String>,
}

fn write_outputs(
    config: &PipelineConfig,
    model: &ChainModel,
    engine: &engine::Engine,
    out: &ExecOutcome,
) -> Result<(), PipelineError> {
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", dir.display())))?;
    out.q_table.save(dir.join("q.csv")).map_err(|e| PipelineError::Io(e.to_string()))?;
    out.tau_table.save(dir.join("tau.csv")).map_err(|e| PipelineError::Io(e.to_string()))?;
    out.act_table.save(dir.join("act.csv")).map_err(|e| PipelineError::Io(e.to_string()))?;

    let report = LatencyReport::build(&out.logs, config.so.deadline_s, config.so.workers);
    std::fs::write(dir.join("latency_report.txt"), report.render_text())
        .map_err(|e| PipelineError::Io(e.to_string()))?;
    std::fs::write(dir.join("latency_report.csv"), report.render_csv())
        .map_err(|e| PipelineError::Io(e.to_string()))?;

    let mut events = String::new();
    for log in &out.logs {
        events.push_str(&format!("events {}", if log.discarded { 1 } else { 0 }));
        for &(id, t) in log.events.entries() {
            events.push_str(&format!(" {id}:{t:.9}"));
        }
        events.push('\n');
    }
    std::fs::write(dir.join("events.log"), events)
        .map_err(|e| PipelineError::Io(e.to_string()))?;

    let mut discards = format!(
        "so_discards {}\nmatch_drops {}\n",
        out.discarded_late + out.discarded_order,
        engine.match_dropped
    );
    for line in &out.discard_lines {
        discards.push_str(line);
        discards.push('\n');
    }
    std::fs::write(dir.join("discards.txt"), discards)
        .map_err(|e| PipelineError::Io(e.to_string()))?;

    // Column sanity: model names drive the tables.
    debug_assert_eq!(out.q_table.channels.len(), model.dof());
    Ok(())
}

/// Rebuild a latency report from a previously written `events.log`.
pub fn report_from_log_dir<P: AsRef<Path>>(
    dir: P,
    deadline_s: f64,
    n_workers: usize,
) -> Result<LatencyReport, PipelineError> {
    let path = dir.as_ref().join("events.log");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    let mut logs = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        if parts.next() != Some("events") {
            return Err(PipelineError::Io(format!("{}: bad line {}", path.display(), ln + 1)));
        }
        let discarded = parts.next() == Some("1");
        let mut events = crate::telemetry::EventLog::new();
        for tok in parts {
            let (id, t) = tok
                .split_once(':')
                .ok_or_else(|| PipelineError::Io(format!("bad event token '{tok}'")))?;
            let id: u8 =
                id.parse().map_err(|_| PipelineError::Io(format!("bad event id '{id}'")))?;
            let t: f64 =
                t.parse().map_err(|_| PipelineError::Io(format!("bad event time '{t}'")))?;
            events = events.record(id, t)?;
        }
        logs.push(PipelineLog { events, discarded });
    }
    Ok(LatencyReport::build(&logs, deadline_s, n_workers))
}
