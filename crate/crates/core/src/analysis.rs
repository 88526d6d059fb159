//! Offline comparison utilities: CSV channel tables, per-channel RMSE with
//! resampling, gait-cycle normalization and the EMG envelope reference
//! chain.

use std::fmt;
use std::path::Path;

use crate::filter::Cascade;

#[derive(Debug, Clone, PartialEq)]
pub enum AnalysisError {
    Io(String),
    Parse { line: usize, msg: String },
    NoOverlap,
    NoCommonChannels,
    NoCompleteCycle,
    EmptyInput,
    BadRate(f64),
}

impl fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalysisError::Io(m) => write!(f, "csv io error: {m}"),
            AnalysisError::Parse { line, msg } => write!(f, "csv line {line}: {msg}"),
            AnalysisError::NoOverlap => write!(f, "time ranges do not overlap"),
            AnalysisError::NoCommonChannels => write!(f, "no common channels"),
            AnalysisError::NoCompleteCycle => write!(f, "no complete gait cycle"),
            AnalysisError::EmptyInput => write!(f, "empty input"),
            AnalysisError::BadRate(r) => write!(f, "unsupported sample rate {r}"),
        }
    }
}

impl std::error::Error for AnalysisError {}

/// A time-indexed channel table: first CSV column `t` (seconds), one named
/// column per channel.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub t: Vec<f64>,
    pub channels: Vec<(String, Vec<f64>)>,
}

impl Table {
    pub fn new(names: &[&str]) -> Table {
        Table {
            t: Vec::new(),
            channels: names.iter().map(|n| (n.to_string(), Vec::new())).collect(),
        }
    }

    pub fn push_row(&mut self, t: f64, values: &[f64]) {
        assert_eq!(values.len(), self.channels.len(), "row width mismatch");
        self.t.push(t);
        for (c, &v) in self.channels.iter_mut().zip(values) {
            c.1.push(v);
        }
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.channels.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from("t");
        for (name, _) in &self.channels {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, &t) in self.t.iter().enumerate() {
            out.push_str(&format!("{t:.9}"));
            for (_, v) in &self.channels {
                out.push_str(&format!(",{:.9}", v[i]));
            }
            out.push('\n');
        }
        out
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), AnalysisError> {
        std::fs::write(path.as_ref(), self.render_csv())
            .map_err(|e| AnalysisError::Io(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Table, AnalysisError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| AnalysisError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Table, AnalysisError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(AnalysisError::EmptyInput)?;
        let mut cols = header.split(',');
        if cols.next().map(str::trim) != Some("t") {
            return Err(AnalysisError::Parse { line: 1, msg: "first column must be 't'".into() });
        }
        let names: Vec<String> = cols.map(|c| c.trim().to_string()).collect();
        let mut table = Table {
            t: Vec::new(),
            channels: names.into_iter().map(|n| (n, Vec::new())).collect(),
        };
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let parse = |s: Option<&str>, ln: usize| -> Result<f64, AnalysisError> {
                s.ok_or(AnalysisError::Parse { line: ln + 1, msg: "short row".into() })?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| AnalysisError::Parse { line: ln + 1, msg: e.to_string() })
            };
            let t = parse(fields.next(), ln)?;
            table.t.push(t);
            for c in table.channels.iter_mut() {
                c.1.push(parse(fields.next(), ln)?);
            }
        }
        Ok(table)
    }
}

/// Linear interpolation of `(ts, ys)` at `t`; `None` outside the range.
fn interp(ts: &[f64], ys: &[f64], t: f64) -> Option<f64> {
    if ts.is_empty() || t < ts[0] || t > ts[ts.len() - 1] {
        return None;
    }
    let k = ts.partition_point(|&x| x < t);
    if k == 0 {
        return Some(ys[0]);
    }
    if k >= ts.len() {
        return Some(ys[ts.len() - 1]);
    }
    let (t0, t1) = (ts[k - 1], ts[k]);
    let (y0, y1) = (ys[k - 1], ys[k]);
    if t1 <= t0 {
        return Some(y0);
    }
    Some(y0 + (y1 - y0) * (t - t0) / (t1 - t0))
}

/// Per-channel RMSE between two tables over their common channels, with `b`
/// resampled onto `a`'s timestamps by linear interpolation inside the
/// overlap.
pub fn rmse(a: &Table, b: &Table) -> Result<Vec<(String, f64)>, AnalysisError> {
    let mut out = Vec::new();
    for (name, ya) in &a.channels {
        let Some(yb) = b.channel(name) else { continue };
        let mut sum = 0.0;
        let mut n = 0u64;
        for (i, &t) in a.t.iter().enumerate() {
            if let Some(vb) = interp(&b.t, yb, t) {
                let d = ya[i] - vb;
                sum += d * d;
                n += 1;
            }
        }
        if n == 0 {
            return Err(AnalysisError::NoOverlap);
        }
        out.push((name.clone(), (sum / n as f64).sqrt()));
    }
    if out.is_empty() {
        return Err(AnalysisError::NoCommonChannels);
    }
    Ok(out)
}

pub const GAIT_POINTS: usize = 101;

/// Gait cycles of one channel resampled to 101 points (0..100% of the
/// cycle), plus the pointwise mean and standard deviation across cycles.
#[derive(Debug, Clone)]
pub struct GaitCycles {
    pub cycles: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

/// Normalize a channel into gait cycles. A cycle spans one stance onset to
/// the next same-side onset; `onsets` are the stance start times.
pub fn gait_normalize(ts: &[f64], ys: &[f64], onsets: &[f64]) -> Result<GaitCycles, AnalysisError> {
    if onsets.len() < 2 {
        return Err(AnalysisError::NoCompleteCycle);
    }
    let mut cycles = Vec::new();
    for w in onsets.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        if t1 <= t0 {
            continue;
        }
        let mut cycle = Vec::with_capacity(GAIT_POINTS);
        let mut complete = true;
        for k in 0..GAIT_POINTS {
            let phase = k as f64 / (GAIT_POINTS - 1) as f64;
            match interp(ts, ys, t0 + phase * (t1 - t0)) {
                Some(v) => cycle.push(v),
                None => {
                    complete = false;
                    break;
                }
            }
        }
        if complete {
            cycles.push(cycle);
        }
    }
    if cycles.is_empty() {
        return Err(AnalysisError::NoCompleteCycle);
    }
    let n = cycles.len() as f64;
    let mut mean = vec![0.0; GAIT_POINTS];
    for c in &cycles {
        for (m, v) in mean.iter_mut().zip(c) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; GAIT_POINTS];
    if cycles.len() > 1 {
        for c in &cycles {
            for ((s, m), v) in sd.iter_mut().zip(&mean).zip(c) {
                *s += (v - m) * (v - m) / (n - 1.0);
            }
        }
        for s in sd.iter_mut() {
            *s = s.sqrt();
        }
    }
    Ok(GaitCycles { cycles, mean, sd })
}

pub const EMG_INPUT_RATE_HZ: f64 = 1000.0;
pub const EMG_OUTPUT_RATE_HZ: f64 = 100.0;

/// EMG envelope reference chain at 1000 Hz input:
/// high-pass 20 Hz -> low-pass 450 Hz -> notch 50 Hz -> rectify -> low-pass
/// 5 Hz -> normalize to the session max -> decimate to 100 Hz.
///
/// All filters are zero-phase (forward-backward) 4th-order Butterworth
/// cascades except the notch; this is an offline reference utility.
pub fn emg_envelope(raw: &[f64], rate: f64) -> Result<Vec<f64>, AnalysisError> {
    if raw.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    if (rate - EMG_INPUT_RATE_HZ).abs() > 1e-9 {
        return Err(AnalysisError::BadRate(rate));
    }
    let hp = Cascade::butterworth_highpass(4, 20.0, rate);
    let lp450 = Cascade::butterworth_lowpass(4, 450.0, rate);
    let notch = Cascade::notch(50.0, rate, 30.0);
    let lp5 = Cascade::butterworth_lowpass(4, 5.0, rate);

    let x = hp.filtfilt(raw);
    let x = lp450.filtfilt(&x);
    let x = notch.filtfilt(&x);
    let rectified: Vec<f64> = x.iter().map(|v| v.abs()).collect();
    let mut env = lp5.filtfilt(&rectified);

    let peak = env.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    if peak > 1e-12 {
        for v in env.iter_mut() {
            *v /= peak;
        }
    }
    let stride = (rate / EMG_OUTPUT_RATE_HZ).round() as usize;
    Ok(env.into_iter().step_by(stride.max(1)).collect())
}
