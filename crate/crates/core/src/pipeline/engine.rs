//! Stage logic shared by both executors: IK tracking, the insole path
//! (bursts -> sync -> demux -> spline filters -> match buffers), and the
//! match + inverse-dynamics step. Scheduling and the SO fan-out live in the
//! executors.

use std::sync::Arc;

use nalgebra::{DVector, Isometry3, Vector2};

use crate::analysis::Table;
use crate::calib::CalibrationSet;
use crate::id::{build_wrench, inverse_dynamics, transform_cop, TorqueState};
use crate::ik::{broadcast_transforms, IkOptions, JointState, Tracker};
use crate::filter::SlidingSpline;
use crate::model::ChainModel;
use crate::so::SoProblem;
use crate::streams::{
    BurstAssembler, Demux, InsoleBurst, InsoleRecord, InsoleSample, OrientationSample, Side,
    SyncEvent,
};
use crate::sync::{MatchDecision, Matcher};
use crate::telemetry::{Clock, EV_JOINTS_READ, EV_WRENCH_FOUND};

use super::{PipelineConfig, PipelineError};

/// Sequencer-emitted result, emission order.
#[derive(Debug, Clone)]
pub struct EmittedResult {
    pub t: f64,
    pub worker: usize,
    pub converged: bool,
    pub kkt_residual: f64,
}

/// Per-side insole filter bank: force and both COP components share the
/// window timestamps.
struct InsoleFilters {
    force: SlidingSpline,
    cop_x: SlidingSpline,
    cop_y: SlidingSpline,
}

impl InsoleFilters {
    fn push(&mut self, s: &InsoleSample) -> Result<Option<InsoleSample>, PipelineError> {
        let f = self.force.push(s.t, s.normal_force)?;
        let x = self.cop_x.push(s.t, s.cop.x)?;
        let y = self.cop_y.push(s.t, s.cop.y)?;
        Ok(match (f, x, y) {
            (Some(f), Some(x), Some(y)) => Some(InsoleSample {
                t: f.t,
                side: s.side,
                // Interpolating splines can undershoot near transients;
                // forces stay physical.
                normal_force: f.value.max(0.0),
                cop: Vector2::new(x.value, y.value),
            }),
            _ => None,
        })
    }
}

pub(crate) struct Engine {
    pub model: Arc<ChainModel>,
    tracker: Tracker,
    assembler: BurstAssembler,
    sync: Option<SyncEvent>,
    demux: Option<Demux>,
    stashed: Vec<InsoleBurst>,
    filters: [InsoleFilters; 2],
    matcher: Matcher<InsoleSample>,
    pending_js: std::collections::VecDeque<JointState>,
    insole_rate: f64,
    threshold_n: f64,
    foot_segment: [String; 2],
    foot_frame: [String; 2],
    mount: [Isometry3<f64>; 2],
    residual_weight: f64,

    pub q_table: Table,
    pub tau_table: Table,

    pub orientation_samples: u64,
    pub joint_states: u64,
    pub matched: u64,
    pub match_dropped: u64,
}

impl Engine {
    pub fn new(
        model: Arc<ChainModel>,
        calibration: CalibrationSet,
        config: &PipelineConfig,
    ) -> Result<Engine, PipelineError> {
        let ik_window = config.filter_ik.to_window()?;
        let insole_window = config.filter_insole.to_window()?;
        let tracker = Tracker::new(model.clone(), calibration, ik_window, IkOptions::default());
        let mk_filters = || InsoleFilters {
            force: SlidingSpline::new(insole_window),
            cop_x: SlidingSpline::new(insole_window),
            cop_y: SlidingSpline::new(insole_window),
        };
        let coord_names: Vec<&str> = model.coordinates.iter().map(|s| s.as_str()).collect();
        let muscle_names: Vec<&str> = model.muscles.iter().map(|m| m.name.as_str()).collect();
        let foot_segment =
            [config.insole.left_segment.clone(), config.insole.right_segment.clone()];
        let foot_frame = [
            model
                .mapping
                .frame_for(&foot_segment[0])
                .ok_or_else(|| {
                    PipelineError::Config(format!("segment '{}' unmapped", foot_segment[0]))
                })?
                .to_string(),
            model
                .mapping
                .frame_for(&foot_segment[1])
                .ok_or_else(|| {
                    PipelineError::Config(format!("segment '{}' unmapped", foot_segment[1]))
                })?
                .to_string(),
        ];
        let mount_left = match &config.insole.mount_left {
            Some(t) => t.to_isometry()?,
            None => crate::synth::demo_insole_mount(),
        };
        let mount_right = match &config.insole.mount_right {
            Some(t) => t.to_isometry()?,
            None => crate::synth::demo_insole_mount(),
        };
        Ok(Engine {
            model,
            tracker,
            assembler: BurstAssembler::new(),
            sync: None,
            demux: None,
            stashed: Vec::new(),
            filters: [mk_filters(), mk_filters()],
            matcher: Matcher::with_defaults(config.sync.tol_s),
            pending_js: std::collections::VecDeque::new(),
            insole_rate: config.insole.rate_hz,
            threshold_n: config.insole.threshold_n,
            foot_segment,
            foot_frame,
            mount: [mount_left, mount_right],
            residual_weight: config.so.residual_weight,
            q_table: Table::new(&coord_names),
            tau_table: Table::new(&coord_names),
            orientation_samples: 0,
            joint_states: 0,
            matched: 0,
            match_dropped: 0,
        })
    }

    pub fn muscle_names(&self) -> Vec<String> {
        self.model.muscles.iter().map(|m| m.name.clone()).collect()
    }

    /// IK input. A completed frame that fills the filter window produces a
    /// joint state (event 0 recorded at `now`), already logged to `q.csv`.
    pub fn on_orient(
        &mut self,
        now: f64,
        sample: &OrientationSample,
    ) -> Result<Option<JointState>, PipelineError> {
        self.orientation_samples += 1;
        let out = self.tracker.push(now, sample)?;
        if let Some(js) = &out {
            self.joint_states += 1;
            let row: Vec<f64> = js.q.iter().copied().collect();
            self.q_table.push_row(js.t, &row);
        }
        Ok(out)
    }

    /// Insole input: burst assembly, sync establishment, demux, filtering,
    /// and match-buffer insertion. Returns true if new filtered samples
    /// reached the match buffers (pending joint states may now be
    /// decidable).
    pub fn on_insole(&mut self, arrival_t: f64, rec: InsoleRecord) -> Result<bool, PipelineError> {
        let burst = self.assembler.push(arrival_t, rec);
        match burst {
            Some(b) => self.process_burst(b),
            None => Ok(false),
        }
    }

    fn process_burst(&mut self, burst: InsoleBurst) -> Result<bool, PipelineError> {
        if self.sync.is_none() {
            match SyncEvent::from_burst(&burst, self.insole_rate) {
                Some(sync) => {
                    self.sync = Some(sync);
                    self.demux = Some(Demux::new(sync));
                    let stashed = std::mem::take(&mut self.stashed);
                    let mut any = false;
                    for b in stashed {
                        any |= self.demux_and_filter(&b)?;
                    }
                    any |= self.demux_and_filter(&burst)?;
                    return Ok(any);
                }
                None => {
                    self.stashed.push(burst);
                    return Ok(false);
                }
            }
        }
        self.demux_and_filter(&burst)
    }

    fn demux_and_filter(&mut self, burst: &InsoleBurst) -> Result<bool, PipelineError> {
        let samples = self.demux.as_mut().expect("sync established").push_burst(burst);
        let mut any = false;
        for s in samples {
            if let Some(filtered) = self.filters[s.side.index()].push(&s)? {
                self.matcher.push(filtered.side, filtered.t, filtered);
                any = true;
            }
        }
        Ok(any)
    }

    /// A delayed joint state reached the matching stage (event 1 at `now`).
    pub fn on_js_released(&mut self, now: f64, js: JointState) -> Result<(), PipelineError> {
        let events = js.events.record(EV_JOINTS_READ, now)?;
        self.pending_js.push_back(JointState { events, ..js });
        Ok(())
    }

    /// End of all input streams: flush the burst assembler and finalize
    /// matching decisions.
    pub fn finish_streams(&mut self) -> Result<(), PipelineError> {
        if let Some(b) = self.assembler.flush() {
            self.process_burst(b)?;
        }
        self.matcher.close();
        Ok(())
    }

    /// Drain pending joint states in FIFO order while their matches are
    /// decidable; each match runs inverse dynamics (events 3, 5, 6) and
    /// yields the torque-state message for the SO stage.
    pub fn drain_matches(
        &mut self,
        now: f64,
        clock: &dyn Clock,
    ) -> Result<Vec<TorqueState>, PipelineError> {
        let mut out = Vec::new();
        while let Some(js) = self.pending_js.front() {
            match self.matcher.decide(js.t) {
                MatchDecision::Defer => break,
                MatchDecision::Drop => {
                    self.match_dropped += 1;
                    self.pending_js.pop_front();
                }
                MatchDecision::Matched { left, right } => {
                    let js = self.pending_js.pop_front().unwrap();
                    let events = js.events.record(EV_WRENCH_FOUND, now)?;
                    let js = JointState { events, ..js };
                    let ts = self.run_id(&js, &left.1, &right.1, clock)?;
                    self.matched += 1;
                    let row: Vec<f64> = ts.tau.iter().copied().collect();
                    self.tau_table.push_row(ts.t, &row);
                    out.push(ts);
                }
            }
        }
        Ok(out)
    }

    fn run_id(
        &self,
        js: &JointState,
        left: &InsoleSample,
        right: &InsoleSample,
        clock: &dyn Clock,
    ) -> Result<TorqueState, PipelineError> {
        // COP geometry through the broadcast transforms at the matched time.
        let transforms = broadcast_transforms(&self.model, js)?;
        let mut wrenches = Vec::with_capacity(2);
        for (side, sample) in [(Side::Left, left), (Side::Right, right)] {
            let idx = side.index();
            let foot_tf = transforms.get(&self.foot_frame[idx]).ok_or_else(|| {
                PipelineError::Stage(format!("no transform for '{}'", self.foot_frame[idx]))
            })?;
            let p = transform_cop(sample, foot_tf, &self.mount[idx]);
            wrenches.push(build_wrench(sample, &self.foot_segment[idx], p, self.threshold_n));
        }
        Ok(inverse_dynamics(&self.model, js, &wrenches, clock)?)
    }

    /// Build the static-optimization problem for one torque state.
    pub fn so_problem(&self, ts: &TorqueState) -> SoProblem {
        SoProblem {
            moment_arms: self.model.moment_arms(&ts.joint_state.q),
            f_max: self.model.f_max_vector(),
            tau_target: ts.tau.clone(),
            residual_weight: self.residual_weight,
        }
    }

    pub fn tracker_unconverged(&self) -> u64 {
        self.tracker.unconverged
    }
}
