//! Event-camera pupil tracking toolkit.
//!
//! The pipeline runs in five stages, one module each:
//!
//! - [`event_io`] parses raw `t,x,y,p` event streams and synthesizes ground-truthed ones,
//! - [`framegen`] slices a stream into fixed-duration windows and rasterizes each window
//!   that carries enough events into an 8-bit frame,
//! - [`dataset`] samples frames per subject and eye, splits subjects into train/val/test
//!   and reads/writes YOLO label files,
//! - [`detect`] runs the centroid baseline and loads detections produced elsewhere,
//! - [`metrics`] scores detections (IoU, greedy matching, P/R/F1, AP),
//! - [`track`] turns per-frame detections into a trajectory with velocities and
//!   saccade candidates.

pub mod bbox;
pub mod dataset;
pub mod detect;
pub mod event_io;
pub mod framegen;
pub mod metrics;
pub mod track;

pub use bbox::BBox;
pub use event_io::{Event, EventStream, Polarity, SensorGeometry};
pub use framegen::{Frame, FrameGenConfig, WindowPlan};
