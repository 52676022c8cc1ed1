//! Event stream types, parsers and writers.
//!
//! Two on-disk forms are supported:
//!
//! - CSV: optional header, rows `t,x,y,p` with `t` in microseconds, `x` the pixel
//!   column and `y` the pixel row. LF or CRLF line endings.
//! - Binary: fixed 13-byte little-endian records `u64 t, u16 x, u16 y, i8 p`.
//!
//! Polarity may be encoded as `0/1` or `-1/+1`; both normalize to [`Polarity`].
//! Rows are sorted by timestamp on ingest (stable), never rejected for ordering.

mod synth;

pub use synth::{synth_moving_disc, DiscPath, GroundTruthTrack, SynthConfig, TruthSample};

use std::fmt;
use std::io::{self, BufWriter, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Size in bytes of one binary event record.
pub const BINARY_RECORD_LEN: usize = 13;

#[derive(Debug, Error)]
pub enum EventIoError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed record at line {line}: {message}")]
    MalformedLine { line: u64, message: String },
    #[error("malformed binary record at byte offset {offset}: {message}")]
    MalformedBinary { offset: u64, message: String },
    #[error("empty stream")]
    EmptyStream,
    #[error("event {record} out of sensor bounds: x={x}, y={y} for a {width}x{height} sensor")]
    OutOfBounds {
        record: u64,
        x: u64,
        y: u64,
        width: u32,
        height: u32,
    },
    #[error("invalid sensor geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid synthesis parameters: {0}")]
    InvalidSynth(String),
    #[error("disc path leaves the sensor at t={t_ms} ms: center ({cx:.2}, {cy:.2}), radius {radius}")]
    PathOutOfBounds {
        t_ms: u64,
        cx: f64,
        cy: f64,
        radius: f64,
    },
}

/// Event polarity. `On` is a brightness increase (+1), `Off` a decrease (-1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Off,
    On,
}

impl Polarity {
    /// Normalizes a raw encoding. Accepts `1`/`+1` (ON) and `0`/`-1` (OFF).
    pub fn from_raw(raw: i64) -> Option<Self> {
        match raw {
            1 => Some(Polarity::On),
            0 | -1 => Some(Polarity::Off),
            _ => None,
        }
    }

    pub fn sign(self) -> i8 {
        match self {
            Polarity::On => 1,
            Polarity::Off => -1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::On => Polarity::Off,
            Polarity::Off => Polarity::On,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    /// Microseconds since the stream origin.
    pub t: u64,
    /// Pixel column.
    pub x: u16,
    /// Pixel row.
    pub y: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: Polarity) -> Self {
        Self { t, x, y, p }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SensorGeometry {
    pub width: u32,
    pub height: u32,
}

impl SensorGeometry {
    pub fn new(width: u32, height: u32) -> Result<Self, EventIoError> {
        if width == 0 || height == 0 {
            return Err(EventIoError::InvalidGeometry(format!(
                "{width}x{height} has a zero dimension"
            )));
        }
        if width > u32::from(u16::MAX) + 1 || height > u32::from(u16::MAX) + 1 {
            return Err(EventIoError::InvalidGeometry(format!(
                "{width}x{height} exceeds the 16-bit coordinate range"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn contains(&self, x: u64, y: u64) -> bool {
        x < u64::from(self.width) && y < u64::from(self.height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// DAVIS 346 resolution.
impl Default for SensorGeometry {
    fn default() -> Self {
        Self {
            width: 346,
            height: 260,
        }
    }
}

impl fmt::Display for SensorGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl FromStr for SensorGeometry {
    type Err = EventIoError;

    /// Parses `WxH`, e.g. `346x260`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (w, h) = s
            .trim()
            .split_once(['x', 'X'])
            .ok_or_else(|| EventIoError::InvalidGeometry(format!("expected WxH, got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<u32>()
                .map_err(|e| EventIoError::InvalidGeometry(format!("{s:?}: {e}")))
        };
        SensorGeometry::new(parse(w)?, parse(h)?)
    }
}

/// A validated, time-sorted event stream. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    geometry: SensorGeometry,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates coordinates and sorts by timestamp (stable, so equal timestamps keep
    /// their input order).
    pub fn new(geometry: SensorGeometry, mut events: Vec<Event>) -> Result<Self, EventIoError> {
        if let Some((i, e)) = events
            .iter()
            .enumerate()
            .find(|(_, e)| !geometry.contains(e.x.into(), e.y.into()))
        {
            return Err(EventIoError::OutOfBounds {
                record: i as u64,
                x: e.x.into(),
                y: e.y.into(),
                width: geometry.width,
                height: geometry.height,
            });
        }
        if !events.windows(2).all(|w| w[0].t <= w[1].t) {
            events.sort_by_key(|e| e.t);
        }
        Ok(Self { geometry, events })
    }

    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn t_min(&self) -> Option<u64> {
        self.events.first().map(|e| e.t)
    }

    pub fn t_max(&self) -> Option<u64> {
        self.events.last().map(|e| e.t)
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventFormat {
    Csv,
    BinaryLe,
}

impl EventFormat {
    /// Guesses the format from a file extension: `bin`/`raw` are binary, anything else CSV.
    pub fn from_extension(ext: &str) -> Self {
        match ext.to_ascii_lowercase().as_str() {
            "bin" | "raw" | "dat" => EventFormat::BinaryLe,
            _ => EventFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Treat the second column as the row and the third as the column, for dumps that
    /// store events as `(t, y, x, p)`.
    pub swap_xy: bool,
}

/// Parses and validates an event stream.
pub fn parse_events<R: Read>(
    source: R,
    format: EventFormat,
    geometry: SensorGeometry,
    options: ParseOptions,
) -> Result<EventStream, EventIoError> {
    let events = match format {
        EventFormat::Csv => parse_csv(source, geometry, options)?,
        EventFormat::BinaryLe => parse_binary(source, geometry, options)?,
    };
    if events.is_empty() {
        return Err(EventIoError::EmptyStream);
    }
    EventStream::new(geometry, events)
}

fn parse_csv<R: Read>(
    source: R,
    geometry: SensorGeometry,
    options: ParseOptions,
) -> Result<Vec<Event>, EventIoError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);

    let mut events = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut first = true;
    loop {
        let more = reader.read_record(&mut record).map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            match e.into_kind() {
                csv::ErrorKind::Io(io) => EventIoError::Io(io),
                kind => EventIoError::MalformedLine {
                    line,
                    message: format!("{kind:?}"),
                },
            }
        })?;
        if !more {
            break;
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let is_header = first && record.get(0).is_some_and(|f| f.parse::<i64>().is_err());
        first = false;
        if is_header {
            continue;
        }
        if record.len() != 4 {
            return Err(EventIoError::MalformedLine {
                line,
                message: format!("expected 4 fields t,x,y,p, found {}", record.len()),
            });
        }
        let field = |i: usize, name: &str| -> Result<i64, EventIoError> {
            record[i]
                .parse::<i64>()
                .map_err(|e| EventIoError::MalformedLine {
                    line,
                    message: format!("field {name}={:?}: {e}", &record[i]),
                })
        };
        let t = field(0, "t")?;
        let (mut x, mut y) = (field(1, "x")?, field(2, "y")?);
        let p = field(3, "p")?;
        if options.swap_xy {
            std::mem::swap(&mut x, &mut y);
        }
        if t < 0 || x < 0 || y < 0 {
            return Err(EventIoError::MalformedLine {
                line,
                message: "negative timestamp or coordinate".into(),
            });
        }
        let p = Polarity::from_raw(p).ok_or_else(|| EventIoError::MalformedLine {
            line,
            message: format!("polarity {p} is not one of 0, 1, -1, +1"),
        })?;
        if !geometry.contains(x as u64, y as u64) {
            return Err(EventIoError::OutOfBounds {
                record: line,
                x: x as u64,
                y: y as u64,
                width: geometry.width,
                height: geometry.height,
            });
        }
        events.push(Event::new(t as u64, x as u16, y as u16, p));
    }
    Ok(events)
}

fn parse_binary<R: Read>(
    mut source: R,
    geometry: SensorGeometry,
    options: ParseOptions,
) -> Result<Vec<Event>, EventIoError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    if bytes.len() % BINARY_RECORD_LEN != 0 {
        let offset = (bytes.len() / BINARY_RECORD_LEN * BINARY_RECORD_LEN) as u64;
        return Err(EventIoError::MalformedBinary {
            offset,
            message: format!(
                "truncated record: {} trailing bytes",
                bytes.len() % BINARY_RECORD_LEN
            ),
        });
    }
    let mut events = Vec::with_capacity(bytes.len() / BINARY_RECORD_LEN);
    for (i, rec) in bytes.chunks_exact(BINARY_RECORD_LEN).enumerate() {
        let offset = (i * BINARY_RECORD_LEN) as u64;
        let t = u64::from_le_bytes(rec[0..8].try_into().expect("8-byte slice"));
        let mut x = u16::from_le_bytes([rec[8], rec[9]]);
        let mut y = u16::from_le_bytes([rec[10], rec[11]]);
        if options.swap_xy {
            std::mem::swap(&mut x, &mut y);
        }
        let raw_p = rec[12] as i8;
        let p = Polarity::from_raw(raw_p.into()).ok_or_else(|| EventIoError::MalformedBinary {
            offset,
            message: format!("polarity {raw_p} is not one of 0, 1, -1"),
        })?;
        if !geometry.contains(x.into(), y.into()) {
            return Err(EventIoError::OutOfBounds {
                record: i as u64,
                x: x.into(),
                y: y.into(),
                width: geometry.width,
                height: geometry.height,
            });
        }
        events.push(Event::new(t, x, y, p));
    }
    Ok(events)
}

/// Writes the canonical CSV form (`t,x,y,p` header, polarity as `1`/`-1`).
pub fn write_events_csv<W: Write>(stream: &EventStream, sink: W) -> io::Result<()> {
    let mut out = BufWriter::new(sink);
    writeln!(out, "t,x,y,p")?;
    for e in stream.events() {
        writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.p.sign())?;
    }
    out.flush()
}

pub fn write_events_binary<W: Write>(stream: &EventStream, sink: W) -> io::Result<()> {
    let mut out = BufWriter::new(sink);
    for e in stream.events() {
        let mut rec = [0u8; BINARY_RECORD_LEN];
        rec[0..8].copy_from_slice(&e.t.to_le_bytes());
        rec[8..10].copy_from_slice(&e.x.to_le_bytes());
        rec[10..12].copy_from_slice(&e.y.to_le_bytes());
        rec[12] = e.p.sign() as u8;
        out.write_all(&rec)?;
    }
    out.flush()
}
