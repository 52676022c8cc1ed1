//! Pupil trajectories from per-frame detections.
//!
//! Each detected frame contributes one point at its window midpoint. Missing frames are
//! gaps; short gaps can be filled by linear interpolation in time. Speeds come from
//! central differences (one-sided at the ends) and are converted to °/s only when a
//! px-per-degree calibration is supplied.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::Detection;
use crate::framegen::WindowPlan;

#[derive(Debug, Error, PartialEq)]
pub enum TrackError {
    #[error("detection references unknown window {0}")]
    UnknownWindow(u64),
    #[error("velocity needs at least 2 trajectory points, got {0}")]
    TooFewPoints(usize),
    #[error("px_per_degree must be positive and finite, got {0}")]
    InvalidCalibration(f64),
    #[error("saccade flagging needs angular speeds; supply a px_per_degree calibration")]
    MissingCalibration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    Detected,
    Interpolated,
}

impl fmt::Display for PointSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PointSource::Detected => "detected",
            PointSource::Interpolated => "interpolated",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub frame_index: u64,
    /// Window midpoint, microseconds.
    pub t_mid: f64,
    pub cx: f64,
    pub cy: f64,
    pub source: PointSource,
    /// Detector confidence; interpolated points carry 0.
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gap {
    /// Frame index of the point before the gap.
    pub after: u64,
    /// Frame index of the point after the gap.
    pub before: u64,
}

impl Gap {
    pub fn missing_frames(&self) -> u64 {
        self.before - self.after - 1
    }
}

/// Points strictly increasing in frame index (and therefore time).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn gaps(&self) -> Vec<Gap> {
        self.points
            .windows(2)
            .filter(|w| w[1].frame_index > w[0].frame_index + 1)
            .map(|w| Gap {
                after: w[0].frame_index,
                before: w[1].frame_index,
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DuplicateDetection {
    pub frame_index: u64,
    pub kept_confidence: f64,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutcome {
    pub trajectory: Trajectory,
    pub duplicates: Vec<DuplicateDetection>,
}

/// One point per window that has a detection. Frames with several detections keep the
/// most confident one (first on ties) and report the rest as duplicates.
pub fn build_trajectory(
    windows: &[WindowPlan],
    detections: &[(u64, Detection)],
) -> Result<BuildOutcome, TrackError> {
    let by_index: BTreeMap<u64, &WindowPlan> = windows.iter().map(|w| (w.index, w)).collect();
    let mut best: BTreeMap<u64, (&Detection, usize)> = BTreeMap::new();
    for (idx, det) in detections {
        if !by_index.contains_key(idx) {
            return Err(TrackError::UnknownWindow(*idx));
        }
        best.entry(*idx)
            .and_modify(|(kept, n)| {
                *n += 1;
                if det.confidence > kept.confidence {
                    *kept = det;
                }
            })
            .or_insert((det, 0));
    }
    let mut duplicates = Vec::new();
    let points = best
        .into_iter()
        .map(|(idx, (det, dropped))| {
            if dropped > 0 {
                duplicates.push(DuplicateDetection {
                    frame_index: idx,
                    kept_confidence: det.confidence,
                    dropped,
                });
            }
            let (cx, cy) = det.center();
            TrajectoryPoint {
                frame_index: idx,
                t_mid: by_index[&idx].t_mid(),
                cx,
                cy,
                source: PointSource::Detected,
                confidence: det.confidence,
            }
        })
        .collect();
    Ok(BuildOutcome {
        trajectory: Trajectory { points },
        duplicates,
    })
}

/// Fills gaps of at most `max_gap_frames` missing frames by linear interpolation in time
/// between the bracketing points. Longer gaps stay open.
pub fn interpolate_gaps(trajectory: &Trajectory, max_gap_frames: u64) -> Trajectory {
    let mut points = Vec::with_capacity(trajectory.points.len());
    for (i, &p) in trajectory.points.iter().enumerate() {
        if let Some(prev) = i.checked_sub(1).map(|j| trajectory.points[j]) {
            let span = p.frame_index - prev.frame_index;
            if span > 1 && span - 1 <= max_gap_frames {
                for k in 1..span {
                    let s = k as f64 / span as f64;
                    points.push(TrajectoryPoint {
                        frame_index: prev.frame_index + k,
                        t_mid: prev.t_mid + (p.t_mid - prev.t_mid) * s,
                        cx: prev.cx + (p.cx - prev.cx) * s,
                        cy: prev.cy + (p.cy - prev.cy) * s,
                        source: PointSource::Interpolated,
                        confidence: 0.0,
                    });
                }
            }
        }
        points.push(p);
    }
    Trajectory { points }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocitySample {
    pub t_mid: f64,
    pub speed_px_s: f64,
    pub speed_deg_s: Option<f64>,
}

/// Speed at every point: central differences inside, one-sided at both ends.
pub fn velocity(
    trajectory: &Trajectory,
    px_per_degree: Option<f64>,
) -> Result<Vec<VelocitySample>, TrackError> {
    let pts = &trajectory.points;
    if pts.len() < 2 {
        return Err(TrackError::TooFewPoints(pts.len()));
    }
    if let Some(c) = px_per_degree {
        if !(c.is_finite() && c > 0.0) {
            return Err(TrackError::InvalidCalibration(c));
        }
    }
    let last = pts.len() - 1;
    Ok((0..pts.len())
        .map(|i| {
            let (a, b) = (pts[i.saturating_sub(1)], pts[(i + 1).min(last)]);
            let dt_s = (b.t_mid - a.t_mid) * 1e-6;
            let speed = ((b.cx - a.cx) / dt_s).hypot((b.cy - a.cy) / dt_s);
            VelocitySample {
                t_mid: pts[i].t_mid,
                speed_px_s: speed,
                speed_deg_s: px_per_degree.map(|c| speed / c),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaccadeInterval {
    pub onset_us: f64,
    pub offset_us: f64,
    pub peak_deg_s: f64,
}

impl SaccadeInterval {
    pub fn duration_ms(&self) -> f64 {
        (self.offset_us - self.onset_us) / 1000.0
    }
}

/// Maximal runs of consecutive samples at or above `threshold_deg_s` whose span from
/// first to last sample is at least `min_duration_ms`.
pub fn flag_saccade_candidates(
    velocities: &[VelocitySample],
    threshold_deg_s: f64,
    min_duration_ms: f64,
) -> Result<Vec<SaccadeInterval>, TrackError> {
    let speeds: Vec<f64> = velocities
        .iter()
        .map(|v| v.speed_deg_s.ok_or(TrackError::MissingCalibration))
        .collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    let mut run: Option<SaccadeInterval> = None;
    for (v, &s) in velocities.iter().zip(&speeds) {
        if s >= threshold_deg_s {
            let r = run.get_or_insert(SaccadeInterval {
                onset_us: v.t_mid,
                offset_us: v.t_mid,
                peak_deg_s: s,
            });
            r.offset_us = v.t_mid;
            r.peak_deg_s = r.peak_deg_s.max(s);
        } else if let Some(r) = run.take() {
            out.push(r);
        }
    }
    out.extend(run);
    out.retain(|r| r.duration_ms() >= min_duration_ms);
    Ok(out)
}

/// `t_us,cx,cy,source,confidence,speed_px_s[,speed_deg_s]`
pub fn write_trajectory_csv<W: Write>(
    trajectory: &Trajectory,
    velocities: &[VelocitySample],
    sink: W,
) -> io::Result<()> {
    let mut out = io::BufWriter::new(sink);
    let angular = velocities.first().is_some_and(|v| v.speed_deg_s.is_some());
    write!(out, "t_us,cx,cy,source,confidence,speed_px_s")?;
    writeln!(out, "{}", if angular { ",speed_deg_s" } else { "" })?;
    for (i, p) in trajectory.points.iter().enumerate() {
        write!(out, "{},{},{},{},{}", p.t_mid, p.cx, p.cy, p.source, p.confidence)?;
        match velocities.get(i) {
            Some(v) => write!(out, ",{}", v.speed_px_s)?,
            None => write!(out, ",")?,
        }
        if angular {
            match velocities.get(i).and_then(|v| v.speed_deg_s) {
                Some(d) => write!(out, ",{d}")?,
                None => write!(out, ",")?,
            }
        }
        writeln!(out)?;
    }
    out.flush()
}

/// `onset_us,offset_us,peak_deg_s`
pub fn write_saccades_csv<W: Write>(intervals: &[SaccadeInterval], sink: W) -> io::Result<()> {
    let mut out = io::BufWriter::new(sink);
    writeln!(out, "onset_us,offset_us,peak_deg_s")?;
    for s in intervals {
        writeln!(out, "{},{},{}", s.onset_us, s.offset_us, s.peak_deg_s)?;
    }
    out.flush()
}
