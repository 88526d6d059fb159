//! Windowed smoothing-spline filtering with analytic first and second
//! derivatives, evaluated at a delayed interior point of the window, plus the
//! Butterworth biquads used for insole step segmentation and the EMG
//! reference chain.
//!
//! The spline is a natural cubic smoothing spline (Reinsch form): minimize
//! `sum (y_i - f(t_i))^2 + lambda * integral f''^2`. With `lambda = 0` the
//! spline interpolates the window, so values at the knots pass through
//! exactly and derivative accuracy at the (interior) evaluation point is
//! limited only by the knot spacing.

use std::collections::VecDeque;
use std::fmt;

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub enum FilterError {
    WindowTooSmall(usize),
    BadDelay { delay: usize, window: usize },
    /// Timestamp not strictly greater than the previous one.
    DuplicateTimestamp(f64),
    WindowNotFull { have: usize, need: usize },
    EmptyInput,
}

impl fmt::Display for FilterError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterError::WindowTooSmall(w) => write!(f, "window size {w} < 4"),
            FilterError::BadDelay { delay, window } => {
                write!(f, "eval delay {delay} outside window of {window}")
            }
            FilterError::DuplicateTimestamp(t) => {
                write!(f, "timestamp {t} not strictly increasing")
            }
            FilterError::WindowNotFull { have, need } => {
                write!(f, "window holds {have} of {need} samples")
            }
            FilterError::EmptyInput => write!(f, "empty input"),
        }
    }
}

impl std::error::Error for FilterError {}

/// Sliding-window spline configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplineWindow {
    /// Samples per fit.
    pub window: usize,
    /// Roughness penalty, >= 0; 0 interpolates.
    pub smoothing: f64,
    /// Evaluation point, samples back from the window end. The filter's
    /// group delay is exactly `delay / rate`.
    pub delay: usize,
}

impl SplineWindow {
    pub fn new(window: usize, smoothing: f64, delay: usize) -> Result<Self, FilterError> {
        if window < 4 {
            return Err(FilterError::WindowTooSmall(window));
        }
        if delay >= window {
            return Err(FilterError::BadDelay { delay, window });
        }
        Ok(SplineWindow { window, smoothing, delay })
    }

    /// Half-window delay, the default.
    pub fn centered(window: usize, smoothing: f64) -> Result<Self, FilterError> {
        Self::new(window, smoothing, window / 2)
    }
}

impl Default for SplineWindow {
    fn default() -> Self {
        SplineWindow { window: 50, smoothing: 0.0, delay: 25 }
    }
}

/// Smoothed value and derivatives at the delayed evaluation time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplineSample {
    pub t: f64,
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

/// A fitted natural cubic spline over one window.
#[derive(Debug, Clone)]
pub struct SplineFit {
    ts: Vec<f64>,
    values: DVector<f64>,
    /// Second derivatives at the knots; zero at both ends (natural).
    gamma: DVector<f64>,
}

impl SplineFit {
    /// Spline value, first and second derivative at `t` (clamped to the knot
    /// range).
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let n = self.ts.len();
        let t = t.clamp(self.ts[0], self.ts[n - 1]);
        let k = match self.ts.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        };
        let h = self.ts[k + 1] - self.ts[k];
        let a = (self.ts[k + 1] - t) / h;
        let b = (t - self.ts[k]) / h;
        let (fk, fk1) = (self.values[k], self.values[k + 1]);
        let (gk, gk1) = (self.gamma[k], self.gamma[k + 1]);
        let value =
            a * fk + b * fk1 + ((a * a * a - a) * gk + (b * b * b - b) * gk1) * h * h / 6.0;
        let d1 = (fk1 - fk) / h + h / 6.0 * (-(3.0 * a * a - 1.0) * gk + (3.0 * b * b - 1.0) * gk1);
        let d2 = a * gk + b * gk1;
        (value, d1, d2)
    }
}

/// Solve a symmetric positive-definite tridiagonal system in place (Thomas
/// algorithm). `diag` length n, `off` length n-1.
fn solve_tridiag(diag: &[f64], off: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = off.first().copied().unwrap_or(0.0) / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - off[i - 1] * c[i - 1];
        if i < n - 1 {
            c[i] = off[i] / m;
        }
        d[i] = (rhs[i] - off[i - 1] * d[i - 1]) / m;
    }
    rhs[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        rhs[i] = d[i] - c[i] * rhs[i + 1];
    }
}

/// Fit a natural cubic smoothing spline to one window.
pub fn fit_spline(ts: &[f64], ys: &[f64], smoothing: f64) -> Result<SplineFit, FilterError> {
    let n = ts.len();
    if n < 4 {
        return Err(FilterError::WindowTooSmall(n));
    }
    for w in ts.windows(2) {
        if w[1] <= w[0] {
            return Err(FilterError::DuplicateTimestamp(w[1]));
        }
    }
    let h: Vec<f64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
    let m = n - 2;
    // W: Gram matrix of the natural-spline curvature basis (symmetric
    // tridiagonal); Delta: second-difference operator.
    let w_diag: Vec<f64> = (0..m).map(|i| (h[i] + h[i + 1]) / 3.0).collect();
    let w_off: Vec<f64> = (0..m - 1).map(|i| h[i + 1] / 6.0).collect();

    let delta_row = |i: usize| (1.0 / h[i], -1.0 / h[i] - 1.0 / h[i + 1], 1.0 / h[i + 1]);

    let y = DVector::from_column_slice(ys);
    let f = if smoothing > 0.0 {
        // K = Delta^T W^-1 Delta; solve (I + lambda K) f = y.
        let mut delta = DMatrix::zeros(m, n);
        for i in 0..m {
            let (a, b, c) = delta_row(i);
            delta[(i, i)] = a;
            delta[(i, i + 1)] = b;
            delta[(i, i + 2)] = c;
        }
        let mut z = DMatrix::zeros(m, n);
        for j in 0..n {
            let mut col: Vec<f64> = (0..m).map(|i| delta[(i, j)]).collect();
            solve_tridiag(&w_diag, &w_off, &mut col);
            for i in 0..m {
                z[(i, j)] = col[i];
            }
        }
        let k = delta.transpose() * z;
        let a = DMatrix::identity(n, n) + k * smoothing;
        let chol = a.cholesky().expect("I + lambda K is positive definite");
        chol.solve(&y)
    } else {
        y
    };

    // Second derivatives at interior knots: gamma = W^-1 (Delta f).
    let mut g: Vec<f64> = (0..m)
        .map(|i| {
            let (a, b, c) = delta_row(i);
            a * f[i] + b * f[i + 1] + c * f[i + 2]
        })
        .collect();
    solve_tridiag(&w_diag, &w_off, &mut g);
    let mut gamma = DVector::zeros(n);
    for i in 0..m {
        gamma[i + 1] = g[i];
    }

    Ok(SplineFit { ts: ts.to_vec(), values: f, gamma })
}

/// Streaming per-signal filter: push samples, receive the smoothed value and
/// derivatives at the delayed evaluation point once the window is full.
#[derive(Debug, Clone)]
pub struct SlidingSpline {
    cfg: SplineWindow,
    ts: VecDeque<f64>,
    ys: VecDeque<f64>,
}

impl SlidingSpline {
    pub fn new(cfg: SplineWindow) -> Self {
        SlidingSpline { cfg, ts: VecDeque::new(), ys: VecDeque::new() }
    }

    pub fn config(&self) -> &SplineWindow {
        &self.cfg
    }

    /// Push one sample. Returns the delayed output once `window` samples are
    /// buffered; before that the sample is absorbed and `None` returned.
    pub fn push(&mut self, t: f64, y: f64) -> Result<Option<SplineSample>, FilterError> {
        if let Some(&last) = self.ts.back() {
            if t <= last {
                return Err(FilterError::DuplicateTimestamp(t));
            }
        }
        self.ts.push_back(t);
        self.ys.push_back(y);
        if self.ts.len() > self.cfg.window {
            self.ts.pop_front();
            self.ys.pop_front();
        }
        if self.ts.len() < self.cfg.window {
            return Ok(None);
        }
        Ok(Some(self.emit()?))
    }

    /// Fit the current full window and evaluate at the delayed point.
    pub fn emit(&self) -> Result<SplineSample, FilterError> {
        if self.ts.len() < self.cfg.window {
            return Err(FilterError::WindowNotFull { have: self.ts.len(), need: self.cfg.window });
        }
        let ts: Vec<f64> = self.ts.iter().copied().collect();
        let ys: Vec<f64> = self.ys.iter().copied().collect();
        let fit = fit_spline(&ts, &ys, self.cfg.smoothing)?;
        let t_eval = ts[ts.len() - 1 - self.cfg.delay];
        let (value, d1, d2) = fit.eval(t_eval);
        Ok(SplineSample { t: t_eval, value, d1, d2 })
    }
}

// ---------------------------------------------------------------------------
// Biquad IIR sections (RBJ cookbook, bilinear transform).
// ---------------------------------------------------------------------------

/// One second-order IIR section, transposed direct form II.
#[derive(Debug, Clone, Copy)]
pub struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
    s1: f64,
    s2: f64,
}

impl Biquad {
    fn from_coeffs(b0: f64, b1: f64, b2: f64, a0: f64, a1: f64, a2: f64) -> Self {
        Biquad { b0: b0 / a0, b1: b1 / a0, b2: b2 / a0, a1: a1 / a0, a2: a2 / a0, s1: 0.0, s2: 0.0 }
    }

    pub fn lowpass(fc: f64, fs: f64, q: f64) -> Self {
        let w0 = std::f64::consts::TAU * fc / fs;
        let alpha = w0.sin() / (2.0 * q);
        let c = w0.cos();
        Self::from_coeffs(
            (1.0 - c) / 2.0,
            1.0 - c,
            (1.0 - c) / 2.0,
            1.0 + alpha,
            -2.0 * c,
            1.0 - alpha,
        )
    }

    pub fn highpass(fc: f64, fs: f64, q: f64) -> Self {
        let w0 = std::f64::consts::TAU * fc / fs;
        let alpha = w0.sin() / (2.0 * q);
        let c = w0.cos();
        Self::from_coeffs(
            (1.0 + c) / 2.0,
            -(1.0 + c),
            (1.0 + c) / 2.0,
            1.0 + alpha,
            -2.0 * c,
            1.0 - alpha,
        )
    }

    pub fn notch(fc: f64, fs: f64, q: f64) -> Self {
        let w0 = std::f64::consts::TAU * fc / fs;
        let alpha = w0.sin() / (2.0 * q);
        let c = w0.cos();
        Self::from_coeffs(1.0, -2.0 * c, 1.0, 1.0 + alpha, -2.0 * c, 1.0 - alpha)
    }

    pub fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    /// Prime the state as if the input had been `x0` forever. Avoids startup
    /// transients on signals with a DC offset (insole forces).
    pub fn prime(&mut self, x0: f64) {
        let y0 = x0 * self.dc_gain();
        self.s2 = self.b2 * x0 - self.a2 * y0;
        self.s1 = self.b1 * x0 - self.a1 * y0 + self.s2;
    }

    pub fn process(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.s1;
        self.s1 = self.b1 * x - self.a1 * y + self.s2;
        self.s2 = self.b2 * x - self.a2 * y;
        y
    }

    pub fn reset(&mut self) {
        self.s1 = 0.0;
        self.s2 = 0.0;
    }
}

/// Cascade of biquad sections.
#[derive(Debug, Clone)]
pub struct Cascade {
    sections: Vec<Biquad>,
}

// Butterworth pole-pair Q values.
const BUTTER2_Q: [f64; 1] = [std::f64::consts::FRAC_1_SQRT_2];
const BUTTER4_Q: [f64; 2] = [0.541_196_100_146_197, 1.306_562_964_876_377];

impl Cascade {
    pub fn butterworth_lowpass(order: usize, fc: f64, fs: f64) -> Self {
        let qs: &[f64] = match order {
            2 => &BUTTER2_Q,
            4 => &BUTTER4_Q,
            _ => panic!("supported Butterworth orders: 2, 4"),
        };
        Cascade { sections: qs.iter().map(|&q| Biquad::lowpass(fc, fs, q)).collect() }
    }

    pub fn butterworth_highpass(order: usize, fc: f64, fs: f64) -> Self {
        let qs: &[f64] = match order {
            2 => &BUTTER2_Q,
            4 => &BUTTER4_Q,
            _ => panic!("supported Butterworth orders: 2, 4"),
        };
        Cascade { sections: qs.iter().map(|&q| Biquad::highpass(fc, fs, q)).collect() }
    }

    pub fn notch(fc: f64, fs: f64, q: f64) -> Self {
        Cascade { sections: vec![Biquad::notch(fc, fs, q)] }
    }

    pub fn process(&mut self, x: f64) -> f64 {
        self.sections.iter_mut().fold(x, |acc, s| s.process(acc))
    }

    pub fn reset(&mut self) {
        for s in &mut self.sections {
            s.reset();
        }
    }

    /// Prime every section as if the cascade input had been `x0` forever.
    pub fn prime(&mut self, x0: f64) {
        let mut level = x0;
        for s in &mut self.sections {
            s.prime(level);
            level *= s.dc_gain();
        }
    }

    /// Zero-phase filtering: run forward, then backward, each pass primed at
    /// the steady state of its first sample to suppress edge transients.
    /// Offline use only.
    pub fn filtfilt(&self, xs: &[f64]) -> Vec<f64> {
        if xs.is_empty() {
            return Vec::new();
        }
        let mut fwd = self.clone();
        fwd.reset();
        fwd.prime(xs[0]);
        let y: Vec<f64> = xs.iter().map(|&x| fwd.process(x)).collect();
        let mut bwd = self.clone();
        bwd.reset();
        bwd.prime(y[y.len() - 1]);
        let mut rev: Vec<f64> = y.iter().rev().map(|&x| bwd.process(x)).collect();
        rev.reverse();
        rev
    }
}
