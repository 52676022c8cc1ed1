//! Synthetic moving-disc streams with known center trajectories.
//!
//! Events are drawn on the disc boundary. A boundary point whose outward normal has a
//! positive component along the disc velocity is on the leading edge and emits ON; the
//! trailing edge emits OFF. Where the normal component of the velocity is below
//! `edge_speed_floor` (a still disc, or the flanks of a moving one) the polarity is a
//! fair coin flip.

use std::f64::consts::{PI, TAU};
use std::io::{self, BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Event, EventIoError, EventStream, Polarity, SensorGeometry};

/// Parametric disc-center path. Times are milliseconds from the stream origin,
/// positions are pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiscPath {
    Stationary {
        center: (f64, f64),
    },
    /// Constant velocity from `from` to `to` over `duration_ms`, then holds at `to`.
    Linear {
        from: (f64, f64),
        to: (f64, f64),
        duration_ms: f64,
    },
    /// `center + amplitude * sin(2π t / period + phase)` per axis.
    Sine {
        center: (f64, f64),
        amplitude: (f64, f64),
        period_ms: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Raised-cosine step from `from` to `to` during `[start_ms, start_ms + duration_ms]`.
    Step {
        from: (f64, f64),
        to: (f64, f64),
        start_ms: f64,
        duration_ms: f64,
    },
}

impl DiscPath {
    pub fn center(&self, t_ms: f64) -> (f64, f64) {
        match *self {
            DiscPath::Stationary { center } => center,
            DiscPath::Linear {
                from,
                to,
                duration_ms,
            } => {
                let s = (t_ms / duration_ms).clamp(0.0, 1.0);
                lerp(from, to, s)
            }
            DiscPath::Sine {
                center,
                amplitude,
                period_ms,
                phase,
            } => {
                let s = (TAU * t_ms / period_ms + phase).sin();
                (center.0 + amplitude.0 * s, center.1 + amplitude.1 * s)
            }
            DiscPath::Step {
                from,
                to,
                start_ms,
                duration_ms,
            } => {
                let u = ((t_ms - start_ms) / duration_ms).clamp(0.0, 1.0);
                lerp(from, to, 0.5 - 0.5 * (PI * u).cos())
            }
        }
    }

    /// Center velocity in px/ms.
    pub fn velocity(&self, t_ms: f64) -> (f64, f64) {
        match *self {
            DiscPath::Stationary { .. } => (0.0, 0.0),
            DiscPath::Linear {
                from,
                to,
                duration_ms,
            } => {
                if (0.0..duration_ms).contains(&t_ms) {
                    ((to.0 - from.0) / duration_ms, (to.1 - from.1) / duration_ms)
                } else {
                    (0.0, 0.0)
                }
            }
            DiscPath::Sine {
                amplitude,
                period_ms,
                phase,
                ..
            } => {
                let w = TAU / period_ms;
                let c = w * (w * t_ms + phase).cos();
                (amplitude.0 * c, amplitude.1 * c)
            }
            DiscPath::Step {
                from,
                to,
                start_ms,
                duration_ms,
            } => {
                let u = (t_ms - start_ms) / duration_ms;
                if (0.0..1.0).contains(&u) {
                    let k = 0.5 * PI * (PI * u).sin() / duration_ms;
                    ((to.0 - from.0) * k, (to.1 - from.1) * k)
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }

    fn validate(&self) -> Result<(), EventIoError> {
        let bad = |m: &str| Err(EventIoError::InvalidSynth(m.to_string()));
        match *self {
            DiscPath::Linear { duration_ms, .. } | DiscPath::Step { duration_ms, .. }
                if !(duration_ms > 0.0) =>
            {
                bad("path duration must be positive")
            }
            DiscPath::Sine { period_ms, .. } if !(period_ms > 0.0) => {
                bad("sine period must be positive")
            }
            _ => Ok(()),
        }
    }
}

fn lerp(a: (f64, f64), b: (f64, f64), s: f64) -> (f64, f64) {
    (a.0 + (b.0 - a.0) * s, a.1 + (b.1 - a.1) * s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub geometry: SensorGeometry,
    pub path: DiscPath,
    /// Disc radius in pixels.
    pub radius: f64,
    /// Events per millisecond.
    pub event_rate: f64,
    pub duration_ms: u64,
    pub seed: u64,
    /// Normal speed (px/ms) below which an edge event gets a random polarity.
    #[serde(default = "default_edge_speed_floor")]
    pub edge_speed_floor: f64,
}

fn default_edge_speed_floor() -> f64 {
    0.02
}

impl SynthConfig {
    pub fn new(
        geometry: SensorGeometry,
        path: DiscPath,
        radius: f64,
        event_rate: f64,
        duration_ms: u64,
        seed: u64,
    ) -> Self {
        Self {
            geometry,
            path,
            radius,
            event_rate,
            duration_ms,
            seed,
            edge_speed_floor: default_edge_speed_floor(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSample {
    pub t_us: u64,
    pub cx: f64,
    pub cy: f64,
}

/// True disc centers sampled every millisecond, `0..=duration_ms`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthTrack {
    pub radius: f64,
    pub samples: Vec<TruthSample>,
}

impl GroundTruthTrack {
    /// Center at `t_us`, linearly interpolated between millisecond samples and held
    /// constant outside the sampled range.
    pub fn center_at(&self, t_us: f64) -> Option<(f64, f64)> {
        let first = self.samples.first()?;
        let last = self.samples.last()?;
        if t_us <= first.t_us as f64 {
            return Some((first.cx, first.cy));
        }
        if t_us >= last.t_us as f64 {
            return Some((last.cx, last.cy));
        }
        let i = self.samples.partition_point(|s| (s.t_us as f64) <= t_us);
        let (a, b) = (self.samples[i - 1], self.samples[i]);
        let s = (t_us - a.t_us as f64) / (b.t_us - a.t_us) as f64;
        Some(lerp((a.cx, a.cy), (b.cx, b.cy), s))
    }

    /// Writes `t_us,cx,cy,radius` rows.
    pub fn write_csv<W: Write>(&self, sink: W) -> io::Result<()> {
        let mut out = io::BufWriter::new(sink);
        writeln!(out, "t_us,cx,cy,radius")?;
        for s in &self.samples {
            writeln!(out, "{},{},{},{}", s.t_us, s.cx, s.cy, self.radius)?;
        }
        out.flush()
    }

    pub fn read_csv<R: BufRead>(source: R) -> Result<Self, EventIoError> {
        let mut samples = Vec::new();
        let mut radius = None;
        for (i, line) in source.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with('t')) {
                continue;
            }
            let lineno = i as u64 + 1;
            let malformed = |message: String| EventIoError::MalformedLine {
                line: lineno,
                message,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(malformed(format!("expected 4 fields, found {}", fields.len())));
            }
            let t_us = fields[0].parse::<u64>().map_err(|e| malformed(e.to_string()))?;
            let nums: Vec<f64> = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| malformed(e.to_string())))
                .collect::<Result<_, _>>()?;
            radius = Some(nums[2]);
            samples.push(TruthSample {
                t_us,
                cx: nums[0],
                cy: nums[1],
            });
        }
        Ok(Self {
            radius: radius.ok_or(EventIoError::EmptyStream)?,
            samples,
        })
    }
}

/// Generates a moving-disc event stream and its true center track.
///
/// Each millisecond `m` receives `floor((m+1)·rate) − floor(m·rate)` events at uniform
/// random offsets within the millisecond, so the total is `floor(duration·rate)`.
pub fn synth_moving_disc(
    config: &SynthConfig,
) -> Result<(EventStream, GroundTruthTrack), EventIoError> {
    let SynthConfig {
        geometry,
        ref path,
        radius,
        event_rate,
        duration_ms,
        seed,
        edge_speed_floor,
    } = *config;
    if !(radius > 0.0) {
        return Err(EventIoError::InvalidSynth("radius must be positive".into()));
    }
    if !(event_rate > 0.0) {
        return Err(EventIoError::InvalidSynth("event rate must be positive".into()));
    }
    if duration_ms == 0 {
        return Err(EventIoError::InvalidSynth("duration must be positive".into()));
    }
    path.validate()?;

    let max_x = f64::from(geometry.width - 1);
    let max_y = f64::from(geometry.height - 1);
    let check = |t_ms: u64, (cx, cy): (f64, f64)| {
        let inside = cx - radius >= 0.0
            && cy - radius >= 0.0
            && cx + radius <= max_x
            && cy + radius <= max_y;
        if inside {
            Ok(())
        } else {
            Err(EventIoError::PathOutOfBounds {
                t_ms,
                cx,
                cy,
                radius,
            })
        }
    };

    let mut samples = Vec::with_capacity(duration_ms as usize + 1);
    for ms in 0..=duration_ms {
        let c = path.center(ms as f64);
        check(ms, c)?;
        samples.push(TruthSample {
            t_us: ms * 1000,
            cx: c.0,
            cy: c.1,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::with_capacity((duration_ms as f64 * event_rate) as usize + 1);
    let mut offsets = Vec::new();
    for ms in 0..duration_ms {
        let n = ((ms + 1) as f64 * event_rate).floor() as u64 - (ms as f64 * event_rate).floor() as u64;
        offsets.clear();
        offsets.extend((0..n).map(|_| rng.gen_range(0..1000u64)));
        offsets.sort_unstable();
        for &off in &offsets {
            let t_us = ms * 1000 + off;
            let t_ms = t_us as f64 / 1000.0;
            let (cx, cy) = path.center(t_ms);
            check(ms, (cx, cy))?;
            let (vx, vy) = path.velocity(t_ms);
            let theta = rng.gen_range(0.0..TAU);
            let (nx, ny) = (theta.cos(), theta.sin());
            let normal_speed = vx * nx + vy * ny;
            let coin: bool = rng.gen();
            let p = if normal_speed > edge_speed_floor {
                Polarity::On
            } else if normal_speed < -edge_speed_floor {
                Polarity::Off
            } else if coin {
                Polarity::On
            } else {
                Polarity::Off
            };
            let x = (cx + radius * nx).round() as u16;
            let y = (cy + radius * ny).round() as u16;
            events.push(Event::new(t_us, x, y, p));
        }
    }

    let stream = EventStream::new(geometry, events)?;
    Ok((stream, GroundTruthTrack { radius, samples }))
}
