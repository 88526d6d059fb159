//! Temporal alignment between the joint-state stream and the external force
//! stream: a fixed buffering delay plus nearest-timestamp matching with
//! defer/drop semantics.

use std::collections::VecDeque;

use crate::streams::Side;

/// Default buffering delay added to the IK stream, seconds.
pub const DEFAULT_DELAY_S: f64 = 0.26;
/// Default matching tolerance: 1.5 sample periods at 100 Hz.
pub const DEFAULT_TOL_S: f64 = 0.015;
pub const DEFAULT_BUFFER_CAPACITY: usize = 512;
pub const DEFAULT_MAX_AGE_S: f64 = 5.0;

/// Time-ordered bounded buffer with age-based eviction.
#[derive(Debug, Clone)]
pub struct TimedBuffer<T> {
    capacity: usize,
    max_age: f64,
    entries: VecDeque<(f64, T)>,
}

impl<T> TimedBuffer<T> {
    pub fn new(capacity: usize, max_age: f64) -> Self {
        TimedBuffer { capacity, max_age, entries: VecDeque::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn newest_t(&self) -> Option<f64> {
        self.entries.back().map(|&(t, _)| t)
    }

    pub fn oldest_t(&self) -> Option<f64> {
        self.entries.front().map(|&(t, _)| t)
    }

    /// Insert keeping time order; evicts entries older than
    /// `newest - max_age` and beyond capacity (oldest first).
    pub fn push(&mut self, t: f64, payload: T) {
        let pos = self.entries.partition_point(|&(et, _)| et <= t);
        self.entries.insert(pos, (t, payload));
        let newest = self.entries.back().map(|&(t, _)| t).unwrap();
        while let Some(&(t0, _)) = self.entries.front() {
            if newest - t0 > self.max_age || self.entries.len() > self.capacity {
                self.entries.pop_front();
            } else {
                break;
            }
        }
    }

    /// Entry with minimum |t_entry - t|; earlier entry wins ties.
    pub fn nearest(&self, t: f64) -> Option<(f64, &T)> {
        if self.entries.is_empty() {
            return None;
        }
        let pos = self.entries.partition_point(|&(et, _)| et < t);
        let mut best: Option<(f64, &T)> = None;
        for idx in [pos.checked_sub(1), Some(pos)].into_iter().flatten() {
            if let Some((et, v)) = self.entries.get(idx) {
                let better = match best {
                    None => true,
                    Some((bt, _)) => (et - t).abs() < (bt - t).abs() - 1e-15,
                };
                if better {
                    best = Some((*et, v));
                }
            }
        }
        best
    }
}

/// Fixed-delay release queue. Arrival order is preserved; stamps are not
/// modified. The executor decides when `now` has advanced far enough.
#[derive(Debug, Clone)]
pub struct DelayQueue<T> {
    delay: f64,
    entries: VecDeque<(f64, T)>,
}

impl<T> DelayQueue<T> {
    pub fn new(delay: f64) -> Self {
        assert!(delay >= 0.0, "delay must be >= 0");
        DelayQueue { delay, entries: VecDeque::new() }
    }

    pub fn delay(&self) -> f64 {
        self.delay
    }

    /// Queue a message arriving at `arrival`; it becomes due at
    /// `arrival + delay`.
    pub fn push(&mut self, arrival: f64, payload: T) {
        self.entries.push_back((arrival + self.delay, payload));
    }

    pub fn next_release(&self) -> Option<f64> {
        self.entries.front().map(|&(t, _)| t)
    }

    /// Release the next message if due at `now`.
    pub fn pop_due(&mut self, now: f64) -> Option<T> {
        if self.entries.front().map_or(false, |&(due, _)| due <= now + 1e-12) {
            self.entries.pop_front().map(|(_, v)| v)
        } else {
            None
        }
    }

    pub fn drain(&mut self) -> impl Iterator<Item = T> + '_ {
        self.entries.drain(..).map(|(_, v)| v)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Per-side matching decision for one joint-state timestamp.
#[derive(Debug, Clone, PartialEq)]
pub enum MatchDecision<T> {
    /// Nearest in-tolerance candidate per side, `(t, payload)`.
    Matched { left: (f64, T), right: (f64, T) },
    /// A better candidate may still arrive; wait for more data.
    Defer,
    /// No candidate within tolerance and newer data rules one out.
    Drop,
}

/// Owns the per-side wrench-source buffers and applies the nearest-timestamp
/// rule with tolerance `tol`.
#[derive(Debug, Clone)]
pub struct Matcher<T: Clone> {
    left: TimedBuffer<T>,
    right: TimedBuffer<T>,
    tol: f64,
    closed: bool,
}

impl<T: Clone> Matcher<T> {
    pub fn new(tol: f64, capacity: usize, max_age: f64) -> Self {
        Matcher {
            left: TimedBuffer::new(capacity, max_age),
            right: TimedBuffer::new(capacity, max_age),
            tol,
            closed: false,
        }
    }

    pub fn with_defaults(tol: f64) -> Self {
        Self::new(tol, DEFAULT_BUFFER_CAPACITY, DEFAULT_MAX_AGE_S)
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn push(&mut self, side: Side, t: f64, payload: T) {
        match side {
            Side::Left => self.left.push(t, payload),
            Side::Right => self.right.push(t, payload),
        }
    }

    /// No more data will arrive; pending decisions become final.
    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    fn decide_side(&self, buf: &TimedBuffer<T>, t: f64) -> MatchDecision<T> {
        let settled = self.closed || buf.newest_t().map_or(false, |n| n >= t + self.tol);
        match buf.nearest(t) {
            Some((bt, v)) if (bt - t).abs() <= self.tol => {
                if settled || bt >= t {
                    // A candidate at/after t can't be beaten by later data
                    // closer than |bt - t|.
                    MatchDecision::Matched { left: (bt, v.clone()), right: (bt, v.clone()) }
                } else {
                    MatchDecision::Defer
                }
            }
            _ if settled => MatchDecision::Drop,
            _ => MatchDecision::Defer,
        }
    }

    /// Decide the match for a joint state stamped `t`.
    pub fn decide(&self, t: f64) -> MatchDecision<T> {
        let l = self.decide_side(&self.left, t);
        let r = self.decide_side(&self.right, t);
        match (l, r) {
            (MatchDecision::Matched { left, .. }, MatchDecision::Matched { right, .. }) => {
                MatchDecision::Matched { left, right }
            }
            (MatchDecision::Drop, _) | (_, MatchDecision::Drop) => MatchDecision::Drop,
            _ => MatchDecision::Defer,
        }
    }
}
