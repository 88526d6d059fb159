//! Event-timestamp logging along the pipeline's critical path and latency
//! statistics derived from collected logs.
//!
//! Every message travelling down the main path carries an [`EventLog`].
//! Events are identified by the ids below; ids 2 and 4 (filtering of IK and
//! ground reaction data) are never recorded because those signals are already
//! spline-filtered upstream.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

/// Joint angles produced (IK output).
pub const EV_IK_PRODUCED: u8 = 0;
/// Read joint angles from buffer (after the sync delay).
pub const EV_JOINTS_READ: u8 = 1;
/// Found wrenches in buffer (nearest-timestamp match succeeded).
pub const EV_WRENCH_FOUND: u8 = 3;
/// Immediately before inverse dynamics.
pub const EV_BEFORE_ID: u8 = 5;
/// Joint torques calculated.
pub const EV_TORQUES_DONE: u8 = 6;
/// Received synchronized joint angles and torques (SO dispatcher).
pub const EV_SO_RECEIVED: u8 = 7;
/// Immediately before the SO computation (inside a worker).
pub const EV_BEFORE_SO: u8 = 8;
/// Muscle activations calculated.
pub const EV_SO_DONE: u8 = 9;

/// The ids that may legally appear in a log, in order.
pub const EVENT_IDS: [u8; 8] = [0, 1, 3, 5, 6, 7, 8, 9];

/// Adjacent event pairs reported in the latency table, plus the total span.
pub const REPORT_PAIRS: [(u8, u8); 5] = [(0, 1), (5, 6), (6, 7), (7, 8), (8, 9)];

#[derive(Debug, Clone, PartialEq)]
pub enum TelemetryError {
    /// Recording an id that is not greater than the last recorded one.
    OutOfOrderEvent { last: u8, new: u8 },
    /// Recording an id outside the known event table.
    UnknownEvent(u8),
    /// A statistic was requested over an empty sample set.
    EmptySamples,
    /// Quantile probability outside (0, 1).
    BadProbability(f64),
}

impl fmt::Display for TelemetryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TelemetryError::OutOfOrderEvent { last, new } => {
                write!(f, "event id {new} not greater than last recorded id {last}")
            }
            TelemetryError::UnknownEvent(id) => write!(f, "unknown event id {id}"),
            TelemetryError::EmptySamples => write!(f, "empty sample set"),
            TelemetryError::BadProbability(p) => write!(f, "probability {p} outside (0, 1)"),
        }
    }
}

impl std::error::Error for TelemetryError {}

/// Monotonic pipeline clock, seconds. One clock domain per process: the
/// logical executor drives a virtual clock, the realtime executor an
/// `Instant`-based one.
pub trait Clock {
    fn now(&self) -> f64;
}

/// Wall clock measured from an origin instant.
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        MonotonicClock { origin: Instant::now() }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }
}

/// Virtual clock set by the logical executor before each stage invocation.
pub struct LogicalClock {
    now: Cell<f64>,
}

impl LogicalClock {
    pub fn new() -> Self {
        LogicalClock { now: Cell::new(0.0) }
    }

    pub fn set(&self, t: f64) {
        self.now.set(t);
    }
}

impl Default for LogicalClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for LogicalClock {
    fn now(&self) -> f64 {
        self.now.get()
    }
}

/// Fixed clock for unit tests.
pub struct FixedClock(pub f64);

impl Clock for FixedClock {
    fn now(&self) -> f64 {
        self.0
    }
}

/// Ordered list of `(event id, timestamp)` pairs carried inside a message.
///
/// Ids must strictly increase within one log; recording returns a new log
/// (messages own their history, stages never mutate a shared one).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    entries: Vec<(u8, f64)>,
}

impl EventLog {
    pub fn new() -> Self {
        EventLog { entries: Vec::new() }
    }

    /// Append `(id, t)`, returning the extended copy.
    pub fn record(&self, id: u8, t: f64) -> Result<EventLog, TelemetryError> {
        if !EVENT_IDS.contains(&id) {
            return Err(TelemetryError::UnknownEvent(id));
        }
        if let Some(&(last, _)) = self.entries.last() {
            if id <= last {
                return Err(TelemetryError::OutOfOrderEvent { last, new: id });
            }
        }
        let mut out = self.clone();
        out.entries.push((id, t));
        Ok(out)
    }

    pub fn entries(&self) -> &[(u8, f64)] {
        &self.entries
    }

    pub fn get(&self, id: u8) -> Option<f64> {
        self.entries.iter().find(|(e, _)| *e == id).map(|&(_, t)| t)
    }

    /// Duration between two recorded events, seconds.
    pub fn span(&self, from: u8, to: u8) -> Option<f64> {
        Some(self.get(to)? - self.get(from)?)
    }

    /// Total critical-path latency (event 0 to event 9), seconds.
    pub fn total(&self) -> Option<f64> {
        self.span(EV_IK_PRODUCED, EV_SO_DONE)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A completed log together with the sequencer's verdict on its message.
#[derive(Debug, Clone)]
pub struct PipelineLog {
    pub events: EventLog,
    pub discarded: bool,
}

/// Arithmetic mean duration in milliseconds for each adjacent recorded pair
/// and for the total span (0, 9). Pairs absent from every log are omitted.
pub fn summarize(logs: &[EventLog]) -> BTreeMap<(u8, u8), f64> {
    let mut acc: BTreeMap<(u8, u8), (f64, u64)> = BTreeMap::new();
    for log in logs {
        for &(a, b) in REPORT_PAIRS.iter().chain(std::iter::once(&(0u8, 9u8))) {
            if let Some(d) = log.span(a, b) {
                let e = acc.entry((a, b)).or_insert((0.0, 0));
                e.0 += d * 1e3;
                e.1 += 1;
            }
        }
    }
    acc.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect()
}

/// Quantile of a latency sample set via an empirical cumulative distribution
/// built from an equal-width histogram over `[min, max]`.
///
/// Returns the lower edge of the first bin whose cumulative count reaches
/// `p * n`; the error versus the exact order statistic is at most one bin
/// width.
pub fn ecdf_quantile(samples: &[f64], p: f64, bins: usize) -> Result<f64, TelemetryError> {
    if samples.is_empty() {
        return Err(TelemetryError::EmptySamples);
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(TelemetryError::BadProbability(p));
    }
    let bins = bins.max(1);
    let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        // Degenerate distribution: single bin.
        return Ok(min);
    }
    let width = (max - min) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &s in samples {
        let mut k = ((s - min) / width) as usize;
        if k >= bins {
            k = bins - 1;
        }
        counts[k] += 1;
    }
    let target = p * samples.len() as f64;
    let mut cum = 0u64;
    for (k, &c) in counts.iter().enumerate() {
        cum += c;
        if cum as f64 >= target {
            return Ok(min + k as f64 * width);
        }
    }
    Ok(min + (bins - 1) as f64 * width)
}

/// Fraction of messages delivered within `deadline` seconds end to end.
/// Discarded messages count as late regardless of their recorded total.
pub fn on_time_rate(logs: &[PipelineLog], deadline: f64) -> f64 {
    if logs.is_empty() {
        return 0.0;
    }
    let on_time = logs
        .iter()
        .filter(|l| !l.discarded && l.events.total().map_or(false, |t| t <= deadline))
        .count();
    on_time as f64 / logs.len() as f64
}

/// Latency report mirroring the per-pair timing table: rows 0-1, 5-6, 6-7,
/// 7-8, 8-9, All and 95% Latency, plus a quantile table and the on-time rate.
#[derive(Debug, Clone)]
pub struct LatencyReport {
    pub n_workers: usize,
    pub deadline_s: f64,
    pub messages: usize,
    pub discarded: usize,
    pub pair_means_ms: BTreeMap<(u8, u8), f64>,
    pub total_mean_ms: Option<f64>,
    pub quantiles_ms: Vec<(f64, f64)>,
    pub on_time_rate: f64,
}

pub const ECDF_BINS: usize = 1000;

impl LatencyReport {
    pub fn build(logs: &[PipelineLog], deadline_s: f64, n_workers: usize) -> LatencyReport {
        let events: Vec<EventLog> = logs.iter().map(|l| l.events.clone()).collect();
        let mut means = summarize(&events);
        let total_mean_ms = means.remove(&(0, 9));
        let totals: Vec<f64> = events.iter().filter_map(|l| l.total()).collect();
        let quantiles_ms = [0.50, 0.90, 0.95, 0.99]
            .iter()
            .filter_map(|&p| ecdf_quantile(&totals, p, ECDF_BINS).ok().map(|q| (p, q * 1e3)))
            .collect();
        LatencyReport {
            n_workers,
            deadline_s,
            messages: logs.len(),
            discarded: logs.iter().filter(|l| l.discarded).count(),
            pair_means_ms: means,
            total_mean_ms,
            quantiles_ms,
            on_time_rate: on_time_rate(logs, deadline_s),
        }
    }

    fn p95_ms(&self) -> Option<f64> {
        self.quantiles_ms
            .iter()
            .find(|(p, _)| (*p - 0.95).abs() < 1e-12)
            .map(|&(_, q)| q)
    }

    /// Plain-text table.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "Latency report (N = {} workers, deadline {:.3} s)\n",
            self.n_workers, self.deadline_s
        ));
        out.push_str(&format!(
            "messages: {}   discarded: {}   on-time rate: {:.4}\n\n",
            self.messages, self.discarded, self.on_time_rate
        ));
        out.push_str("Events      Mean latency (ms)\n");
        for &(a, b) in REPORT_PAIRS.iter() {
            let v = self
                .pair_means_ms
                .get(&(a, b))
                .map(|m| format!("{m:.6}"))
                .unwrap_or_else(|| "n/a".to_string());
            out.push_str(&format!("{a}-{b}         {v}\n"));
        }
        let all = self
            .total_mean_ms
            .map(|m| format!("{m:.6}"))
            .unwrap_or_else(|| "n/a".to_string());
        out.push_str(&format!("All         {all}\n"));
        let p95 = self.p95_ms().map(|m| format!("{m:.6}")).unwrap_or_else(|| "n/a".to_string());
        out.push_str(&format!("95% Latency {p95}\n"));
        out.push_str("\nQuantiles (ms):\n");
        for &(p, q) in &self.quantiles_ms {
            out.push_str(&format!("  p{:02.0}: {q:.6}\n", p * 100.0));
        }
        out
    }

    /// Machine-readable CSV with the same rows as the text table.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("row,mean_ms\n");
        for &(a, b) in REPORT_PAIRS.iter() {
            let v = self
                .pair_means_ms
                .get(&(a, b))
                .map(|m| format!("{m:.6}"))
                .unwrap_or_default();
            out.push_str(&format!("{a}-{b},{v}\n"));
        }
        let all = self.total_mean_ms.map(|m| format!("{m:.6}")).unwrap_or_default();
        out.push_str(&format!("All,{all}\n"));
        let p95 = self.p95_ms().map(|m| format!("{m:.6}")).unwrap_or_default();
        out.push_str(&format!("95% Latency,{p95}\n"));
        out.push_str(&format!("on_time_rate,{:.6}\n", self.on_time_rate));
        out
    }
}
