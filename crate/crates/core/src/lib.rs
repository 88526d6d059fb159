//! Real-time musculoskeletal estimation pipeline.
//!
//! Streams of body-segment orientations and pressure-insole forces go in;
//! joint angles, joint torques and muscle activations come out, every stage
//! instrumented with event timestamps for latency analysis.
//!
//! The crate is organised around the pipeline stages:
//!
//! * [`model`] — kinematic/dynamic/muscular chain model, forward kinematics
//!   and moment-arm evaluation.
//! * [`calib`] — sensor-to-segment calibration with quaternion averaging and
//!   heading-offset removal.
//! * [`streams`] — session recording/replay, insole burst demultiplexing and
//!   step segmentation.
//! * [`filter`] — windowed smoothing-spline filtering with analytic first and
//!   second derivatives.
//! * [`ik`] — orientation-tracking inverse kinematics.
//! * [`sync`] — fixed buffering delay and nearest-timestamp matching.
//! * [`id`] — external wrench construction and recursive Newton-Euler inverse
//!   dynamics.
//! * [`so`] — static optimization of muscle activations with a deterministic
//!   modulo scheduler and deadline-aware sequencer.
//! * [`telemetry`] — event logs, latency statistics and ECDF quantiles.
//! * [`pipeline`] — configuration and the logical/realtime executors wiring
//!   everything together.
//! * [`analysis`] — offline utilities: RMSE, gait-cycle normalization, EMG
//!   envelopes.
//! * [`synth`] — synthetic session generation for demos and validation.

pub mod analysis;
pub mod calib;
pub mod filter;
pub mod id;
pub mod ik;
pub mod model;
pub mod pipeline;
pub mod so;
pub mod streams;
pub mod sync;
pub mod synth;
pub mod telemetry;
