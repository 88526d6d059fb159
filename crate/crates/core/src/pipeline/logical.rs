//! Deterministic single-threaded executor: a discrete-event loop over a
//! virtual clock. Message release interleaving reproduces the realtime
//! topology (sync delay, per-worker busy times, sequencer order) while two
//! runs of the same session produce byte-identical outputs.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::analysis::Table;
use crate::ik::JointState;
use crate::so::{dispatch, ActivationResult, SeqOutcome, Sequencer, WorkerState};
use crate::streams::{Record, Session};
use crate::telemetry::{LogicalClock, PipelineLog, EV_BEFORE_SO, EV_SO_DONE, EV_SO_RECEIVED};

use super::engine::{EmittedResult, Engine};
use super::{ExecOutcome, PipelineConfig, PipelineError};

enum EvKind {
    JsRelease(JointState),
    SoDone(ActivationResult),
}

struct Ev {
    t: f64,
    seq: u64,
    kind: EvKind,
}

impl PartialEq for Ev {
    fn eq(&self, other: &Self) -> bool {
        self.t == other.t && self.seq == other.seq
    }
}
impl Eq for Ev {}
impl PartialOrd for Ev {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ev {
    // Reversed: BinaryHeap is a max-heap, we want earliest first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then(other.seq.cmp(&self.seq))
    }
}

/// Simulated SO worker pool: per-worker warm starts and busy-until times on
/// the virtual clock. Solves eagerly (results are time-stamped, not
/// time-consuming).
struct SoSim {
    workers: Vec<WorkerState>,
    busy_until: Vec<f64>,
    counter: usize,
    inject_every: usize,
    inject_s: f64,
}

impl SoSim {
    fn new(n: usize, n_muscles: usize, inject_every: usize, inject_s: f64) -> Self {
        SoSim {
            workers: (0..n).map(|_| WorkerState::new(n_muscles)).collect(),
            busy_until: vec![f64::NEG_INFINITY; n],
            counter: 0,
            inject_every,
            inject_s,
        }
    }

    fn inject_for(&self, idx: usize) -> f64 {
        if self.inject_every > 0 && (idx + 1) % self.inject_every == 0 {
            self.inject_s
        } else {
            0.0
        }
    }
}

pub(crate) fn execute(
    engine: &mut Engine,
    session: &Session,
    config: &PipelineConfig,
) -> Result<ExecOutcome, PipelineError> {
    let clock = LogicalClock::new();
    let schedule = session.logical_schedule();
    let mut heap: BinaryHeap<Ev> = BinaryHeap::new();
    let mut seq_counter = 0u64;
    let mut push = |heap: &mut BinaryHeap<Ev>, t: f64, kind: EvKind| {
        heap.push(Ev { t, seq: seq_counter, kind });
        seq_counter += 1;
    };

    let mut so = SoSim::new(
        config.so.workers,
        engine.model.muscles.len(),
        config.so.inject_delay_every,
        config.so.inject_delay_s,
    );
    let mut sequencer = Sequencer::new(config.so.deadline_s);
    let muscle_names = engine.muscle_names();
    let mut act_table =
        Table::new(&muscle_names.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    let mut logs: Vec<PipelineLog> = Vec::new();
    let mut emitted_results: Vec<EmittedResult> = Vec::new();
    let mut discard_lines: Vec<String> = Vec::new();
    let mut so_received = 0u64;
    let mut last_now = 0.0f64;

    macro_rules! handle_sequencer {
        ($result:expr) => {{
            let outcome = sequencer.offer($result);
            match outcome {
                SeqOutcome::Emit(r) => {
                    let row: Vec<f64> = r.activations.iter().copied().collect();
                    act_table.push_row(r.t, &row);
                    emitted_results.push(EmittedResult {
                        t: r.t,
                        worker: r.worker,
                        converged: r.converged,
                        kkt_residual: r.kkt_residual,
                    });
                    logs.push(PipelineLog { events: r.events, discarded: false });
                }
                SeqOutcome::DiscardLate(r) => {
                    discard_lines.push(format!("t={:.9} reason=late", r.t));
                    logs.push(PipelineLog { events: r.events, discarded: true });
                }
                SeqOutcome::DiscardOrder(r) => {
                    discard_lines.push(format!("t={:.9} reason=order", r.t));
                    logs.push(PipelineLog { events: r.events, discarded: true });
                }
            }
        }};
    }

    macro_rules! dispatch_ready {
        ($now:expr) => {{
            let now = $now;
            for ts in engine.drain_matches(now, &clock)? {
                let events = ts.events.record(EV_SO_RECEIVED, now)?;
                let idx = so.counter;
                so.counter += 1;
                so_received += 1;
                let w = dispatch(idx, so.workers.len());
                let start = now.max(so.busy_until[w]);
                let done = start + so.inject_for(idx);
                so.busy_until[w] = done;
                let problem = engine.so_problem(&ts);
                let solved = so.workers[w].solve(&problem)?;
                let events = events.record(EV_BEFORE_SO, start)?.record(EV_SO_DONE, done)?;
                let result = ActivationResult {
                    t: ts.t,
                    activations: solved.activations,
                    residuals: solved.residuals,
                    converged: solved.converged,
                    kkt_residual: solved.kkt_residual,
                    worker: w,
                    events,
                };
                push(&mut heap, done, EvKind::SoDone(result));
            }
        }};
    }

    let mut rec_idx = 0usize;
    loop {
        // Records win ties so the matcher sees data before decisions fire.
        let next_rec_t = schedule.get(rec_idx).map(|&(t, _)| t);
        let next_ev_t = heap.peek().map(|e| e.t);
        let take_event = match (next_rec_t, next_ev_t) {
            (Some(rt), Some(et)) => et < rt,
            (None, Some(_)) => true,
            (Some(_), None) => false,
            (None, None) => break,
        };

        if take_event {
            let ev = heap.pop().unwrap();
            let now = ev.t;
            last_now = now.max(last_now);
            clock.set(now);
            match ev.kind {
                EvKind::JsRelease(js) => {
                    engine.on_js_released(now, js)?;
                    dispatch_ready!(now);
                }
                EvKind::SoDone(result) => handle_sequencer!(result),
            }
        } else {
            let (t, rec) = schedule[rec_idx];
            rec_idx += 1;
            let now = t;
            last_now = now.max(last_now);
            clock.set(now);
            match rec {
                Record::Orient(s) => {
                    if let Some(js) = engine.on_orient(now, s)? {
                        push(&mut heap, now + config.sync.delay_s, EvKind::JsRelease(js));
                    }
                }
                Record::Insole { arrival_t, rec } => {
                    if engine.on_insole(*arrival_t, *rec)? {
                        dispatch_ready!(now);
                    }
                }
                Record::RefQ { .. } | Record::RefTau { .. } => {}
            }
        }
    }

    // All inputs consumed and all releases processed: settle the matcher.
    clock.set(last_now);
    engine.finish_streams()?;
    dispatch_ready!(last_now);
    while let Some(ev) = heap.pop() {
        clock.set(ev.t);
        match ev.kind {
            EvKind::SoDone(result) => handle_sequencer!(result),
            EvKind::JsRelease(js) => {
                engine.on_js_released(ev.t, js)?;
                dispatch_ready!(ev.t);
            }
        }
    }

    Ok(ExecOutcome {
        q_table: std::mem::take(&mut engine.q_table),
        tau_table: std::mem::take(&mut engine.tau_table),
        act_table,
        logs,
        emitted_results,
        so_received,
        sequencer_emitted: sequencer.emitted,
        discarded_late: sequencer.discarded_late,
        discarded_order: sequencer.discarded_order,
        discard_lines,
    })
}
