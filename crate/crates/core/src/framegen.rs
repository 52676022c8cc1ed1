//! Fixed-duration window accumulation.
//!
//! The stream span `[t_min, t_max]` is tiled by `ceil((t_max - t_min) / duration)`
//! half-open windows anchored at `t_min` (at least one). A window becomes a frame only
//! when its event count is strictly greater than `event_threshold`. The frame starts at
//! `background_intensity`; ON events paint 255, OFF events paint 0, later events
//! overwriting earlier ones.
//!
//! When the span is an exact multiple of the duration, events stamped exactly `t_max`
//! sit on the right edge of the last window. They are assigned to that window so every
//! event lands in exactly one window.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_io::{Event, EventStream, Polarity, SensorGeometry};

pub const ON_INTENSITY: u8 = 255;
pub const OFF_INTENSITY: u8 = 0;
pub const SIDECAR_FILE: &str = "frames.csv";

#[derive(Debug, Error)]
pub enum FrameGenError {
    #[error("window duration must be positive")]
    ZeroDuration,
    #[error("t_max {t_max} precedes t_min {t_min}")]
    InvertedRange { t_min: u64, t_max: u64 },
    #[error("empty stream")]
    EmptyStream,
    #[error("invalid frame configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed sidecar line {line}: {message}")]
    MalformedSidecar { line: usize, message: String },
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("PNG encoding failed: {0}")]
    Image(#[from] image::ImageError),
}

/// One accumulation window `[t_start, t_end)` in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowPlan {
    pub index: u64,
    pub t_start: u64,
    pub t_end: u64,
}

impl WindowPlan {
    pub fn duration_us(&self) -> u64 {
        self.t_end - self.t_start
    }

    /// Window midpoint in microseconds.
    pub fn t_mid(&self) -> f64 {
        (self.t_start as f64 + self.t_end as f64) / 2.0
    }

    pub fn contains(&self, t: u64) -> bool {
        (self.t_start..self.t_end).contains(&t)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionRule {
    /// The event with the latest timestamp decides the pixel; equal timestamps resolve
    /// in stream order.
    #[default]
    LastWriteWins,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameGenConfig {
    pub duration_ms: u64,
    /// A window emits a frame only if it holds more than this many events.
    pub event_threshold: u64,
    pub background_intensity: u8,
    pub collision_rule: CollisionRule,
}

impl Default for FrameGenConfig {
    fn default() -> Self {
        Self {
            duration_ms: 10,
            event_threshold: 2000,
            background_intensity: 128,
            collision_rule: CollisionRule::LastWriteWins,
        }
    }
}

impl FrameGenConfig {
    /// Background must differ from both polarity intensities or frames become ambiguous.
    pub fn validate(&self) -> Result<(), FrameGenError> {
        if self.duration_ms == 0 {
            return Err(FrameGenError::ZeroDuration);
        }
        if self.background_intensity == ON_INTENSITY || self.background_intensity == OFF_INTENSITY
        {
            return Err(FrameGenError::InvalidConfig(format!(
                "background intensity {} collides with a polarity intensity",
                self.background_intensity
            )));
        }
        Ok(())
    }

    pub fn duration_us(&self) -> u64 {
        self.duration_ms * 1000
    }
}

/// An accumulated 8-bit frame, row-major `height × width`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub window: WindowPlan,
    pub event_count: u64,
    pub geometry: SensorGeometry,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn from_pixels(
        window: WindowPlan,
        event_count: u64,
        geometry: SensorGeometry,
        pixels: Vec<u8>,
    ) -> Self {
        assert_eq!(pixels.len(), geometry.pixel_count(), "pixel buffer size mismatch");
        Self {
            window,
            event_count,
            geometry,
            pixels,
        }
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> u8 {
        self.pixels[y as usize * self.geometry.width as usize + x as usize]
    }

    pub fn index(&self) -> u64 {
        self.window.index
    }

    /// `frame_{index:06}.png`
    pub fn file_name(&self) -> String {
        frame_file_name(self.window.index)
    }

    pub fn to_png(&self) -> Result<Vec<u8>, FrameGenError> {
        encode_png(self.geometry, &self.pixels)
    }
}

pub fn frame_file_name(index: u64) -> String {
    format!("frame_{index:06}.png")
}

/// Inverse of [`frame_file_name`]; accepts any `frame_<digits>` stem, with or without an
/// extension.
pub fn parse_frame_index(name: &str) -> Option<u64> {
    let stem = name.rsplit('/').next()?;
    let stem = stem.split_once('.').map_or(stem, |(s, _)| s);
    stem.strip_prefix("frame_")?.parse().ok()
}

pub fn encode_png(geometry: SensorGeometry, pixels: &[u8]) -> Result<Vec<u8>, FrameGenError> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf).write_image(
        pixels,
        geometry.width,
        geometry.height,
        ExtendedColorType::L8,
    )?;
    Ok(buf)
}

/// Tiles `[t_min, t_max]` with `ceil((t_max - t_min) / duration)` windows, minimum one.
pub fn plan_windows(
    t_min: u64,
    t_max: u64,
    duration_ms: u64,
) -> Result<Vec<WindowPlan>, FrameGenError> {
    if duration_ms == 0 {
        return Err(FrameGenError::ZeroDuration);
    }
    if t_max < t_min {
        return Err(FrameGenError::InvertedRange { t_min, t_max });
    }
    let dur = duration_ms * 1000;
    let n = (t_max - t_min).div_ceil(dur).max(1);
    Ok((0..n)
        .map(|i| WindowPlan {
            index: i,
            t_start: t_min + i * dur,
            t_end: t_min + (i + 1) * dur,
        })
        .collect())
}

/// Splits time-sorted events into per-window slices. Events before the first window are
/// dropped; events at or past the end of the last window go to the last window.
pub fn window_slices<'a>(events: &'a [Event], plans: &[WindowPlan]) -> Vec<&'a [Event]> {
    let mut out = Vec::with_capacity(plans.len());
    let mut lo = match plans.first() {
        Some(p) => events.partition_point(|e| e.t < p.t_start),
        None => return out,
    };
    for (i, plan) in plans.iter().enumerate() {
        let hi = if i + 1 == plans.len() {
            events.len()
        } else {
            lo + events[lo..].partition_point(|e| e.t < plan.t_end)
        };
        out.push(&events[lo..hi]);
        lo = hi;
    }
    out
}

/// Rasterizes one window, or returns `None` if it holds too few events.
pub fn accumulate(
    events: &[Event],
    window: WindowPlan,
    geometry: SensorGeometry,
    config: &FrameGenConfig,
) -> Option<Frame> {
    let count = events.len() as u64;
    if count <= config.event_threshold {
        return None;
    }
    let width = geometry.width as usize;
    let mut pixels = vec![config.background_intensity; geometry.pixel_count()];
    match config.collision_rule {
        CollisionRule::LastWriteWins => {
            for e in events {
                pixels[e.y as usize * width + e.x as usize] = match e.p {
                    Polarity::On => ON_INTENSITY,
                    Polarity::Off => OFF_INTENSITY,
                };
            }
        }
    }
    Some(Frame {
        window,
        event_count: count,
        geometry,
        pixels,
    })
}

/// Plans windows over the whole stream and accumulates them in parallel on the current
/// rayon pool. Output is in window order and independent of the pool size.
pub fn generate_frames(
    stream: &EventStream,
    config: &FrameGenConfig,
) -> Result<Vec<Frame>, FrameGenError> {
    config.validate()?;
    let (t_min, t_max) = match (stream.t_min(), stream.t_max()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(FrameGenError::EmptyStream),
    };
    let plans = plan_windows(t_min, t_max, config.duration_ms)?;
    let slices = window_slices(stream.events(), &plans);
    let geometry = stream.geometry();
    Ok(plans
        .par_iter()
        .zip(slices.par_iter())
        .filter_map(|(plan, events)| accumulate(events, *plan, geometry, config))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SidecarRow {
    pub window: WindowPlan,
    pub event_count: u64,
}

pub fn write_sidecar<W: Write>(frames: &[Frame], sink: W) -> io::Result<()> {
    let mut out = io::BufWriter::new(sink);
    writeln!(out, "index,t_start_us,t_end_us,event_count")?;
    for f in frames {
        writeln!(
            out,
            "{},{},{},{}",
            f.window.index, f.window.t_start, f.window.t_end, f.event_count
        )?;
    }
    out.flush()
}

pub fn read_sidecar<R: BufRead>(source: R) -> Result<Vec<SidecarRow>, FrameGenError> {
    let mut rows = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("index")) {
            continue;
        }
        let malformed = |message: String| FrameGenError::MalformedSidecar {
            line: i + 1,
            message,
        };
        let v: Vec<u64> = line
            .split(',')
            .map(|f| f.trim().parse::<u64>().map_err(|e| malformed(e.to_string())))
            .collect::<Result<_, _>>()?;
        if v.len() != 4 {
            return Err(malformed(format!("expected 4 fields, found {}", v.len())));
        }
        if v[2] <= v[1] {
            return Err(malformed("t_end_us must exceed t_start_us".into()));
        }
        rows.push(SidecarRow {
            window: WindowPlan {
                index: v[0],
                t_start: v[1],
                t_end: v[2],
            },
            event_count: v[3],
        });
    }
    Ok(rows)
}

/// Writes `frame_{index:06}.png` for every frame plus the `frames.csv` sidecar.
pub fn write_frames(dir: &Path, frames: &[Frame]) -> Result<(), FrameGenError> {
    fs::create_dir_all(dir)?;
    frames.par_iter().try_for_each(|f| -> Result<(), FrameGenError> {
        fs::write(dir.join(f.file_name()), f.to_png()?)?;
        Ok(())
    })?;
    write_sidecar(frames, fs::File::create(dir.join(SIDECAR_FILE))?)?;
    Ok(())
}
