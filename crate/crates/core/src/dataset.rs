//! YOLO datasets: frame sampling per subject and eye, subject-level splits, label files
//! and on-disk emission.
//!
//! Layout written by [`emit_dataset`]:
//!
//! ```text
//! images/{train,val,test}/<subject>_<eye>_frame_<index>.png
//! labels/{train,val,test}/<subject>_<eye>_frame_<index>.txt
//! manifest.json
//! ```
//!
//! Every image gets a label file; frames without a visible pupil get an empty one.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;
use crate::event_io::SensorGeometry;
use crate::framegen::{Frame, FrameGenError};

/// Slack allowed when checking that a normalized box stays inside the unit square.
pub const UNIT_BOX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("label line {line}: {message}")]
    MalformedLabel { line: usize, message: String },
    #[error("label line {line}: {message}")]
    LabelOutOfRange { line: usize, message: String },
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("subject {subject} ({eye}) has no emitted frames")]
    NoFrames { subject: String, eye: Eye },
    #[error("frames per eye must be at least 1")]
    ZeroSampleSize,
    #[error("invalid split ratios {0:?}: need non-negative values summing to 1")]
    InvalidRatios([f64; 3]),
    #[error("{subjects} subjects cannot fill {partitions} non-empty partitions")]
    TooFewSubjects { subjects: usize, partitions: usize },
    #[error("subject id {0:?} must be non-empty and use only ASCII letters, digits, '-' or '_'")]
    InvalidSubjectId(String),
    #[error("subject {0} is not assigned to any partition")]
    UnassignedSubject(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Frame(#[from] FrameGenError),
    #[error("manifest serialization failed: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// Normalized YOLO box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub frame_ref: String,
}

impl Annotation {
    pub fn new(
        frame_ref: impl Into<String>,
        class_id: u32,
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
    ) -> Result<Self, DatasetError> {
        check_normalized(cx, cy, w, h).map_err(DatasetError::InvalidAnnotation)?;
        Ok(Self {
            class_id,
            cx,
            cy,
            w,
            h,
            frame_ref: frame_ref.into(),
        })
    }

    /// Normalizes a pixel box, clipping it to the sensor first.
    pub fn from_pixel_box(
        frame_ref: impl Into<String>,
        class_id: u32,
        bbox: &BBox,
        geometry: SensorGeometry,
    ) -> Result<Self, DatasetError> {
        let (w, h) = (f64::from(geometry.width), f64::from(geometry.height));
        let x0 = bbox.x_min().clamp(0.0, w);
        let x1 = bbox.x_max().clamp(0.0, w);
        let y0 = bbox.y_min().clamp(0.0, h);
        let y1 = bbox.y_max().clamp(0.0, h);
        Self::new(
            frame_ref,
            class_id,
            (x0 + x1) / 2.0 / w,
            (y0 + y1) / 2.0 / h,
            (x1 - x0) / w,
            (y1 - y0) / h,
        )
    }

    pub fn to_pixel_box(&self, geometry: SensorGeometry) -> BBox {
        let (w, h) = (f64::from(geometry.width), f64::from(geometry.height));
        BBox::from_center(self.cx * w, self.cy * h, self.w * w, self.h * h)
            .expect("validated annotation has positive extent")
    }
}

fn check_normalized(cx: f64, cy: f64, w: f64, h: f64) -> Result<(), String> {
    if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
        return Err(format!("center ({cx}, {cy}) outside [0, 1]"));
    }
    if !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0) {
        return Err(format!("extent {w}x{h} outside (0, 1]"));
    }
    let tol = UNIT_BOX_TOLERANCE;
    if cx - w / 2.0 < -tol || cx + w / 2.0 > 1.0 + tol || cy - h / 2.0 < -tol || cy + h / 2.0 > 1.0 + tol
    {
        return Err(format!("box ({cx}, {cy}, {w}, {h}) leaves the unit square"));
    }
    Ok(())
}

/// One `class cx cy w h` line per box with six decimals; no boxes gives an empty string.
pub fn write_yolo_label(annotations: &[Annotation]) -> String {
    annotations
        .iter()
        .map(|a| {
            format!(
                "{} {:.6} {:.6} {:.6} {:.6}\n",
                a.class_id, a.cx, a.cy, a.w, a.h
            )
        })
        .collect()
}

pub fn read_yolo_label(text: &str, frame_ref: &str) -> Result<Vec<Annotation>, DatasetError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(DatasetError::MalformedLabel {
                line,
                message: format!("expected `class cx cy w h`, found {} fields", fields.len()),
            });
        }
        let class_id = fields[0].parse::<u32>().map_err(|e| DatasetError::MalformedLabel {
            line,
            message: format!("class {:?}: {e}", fields[0]),
        })?;
        let mut v = [0.0f64; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse::<f64>().map_err(|e| DatasetError::MalformedLabel {
                line,
                message: format!("{f:?}: {e}"),
            })?;
        }
        check_normalized(v[0], v[1], v[2], v[3])
            .map_err(|message| DatasetError::LabelOutOfRange { line, message })?;
        out.push(Annotation {
            class_id,
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
            frame_ref: frame_ref.to_string(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eye {
    Left,
    Right,
}

impl fmt::Display for Eye {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Eye::Left => "left",
            Eye::Right => "right",
        })
    }
}

impl FromStr for Eye {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "left" | "l" => Ok(Eye::Left),
            "right" | "r" => Ok(Eye::Right),
            other => Err(format!("unknown eye {other:?}")),
        }
    }
}

pub fn validate_subject_id(id: &str) -> Result<(), DatasetError> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(DatasetError::InvalidSubjectId(id.to_string()))
    }
}

/// All emitted frames of one subject's eye recording.
#[derive(Debug, Clone)]
pub struct FrameSource {
    pub subject: String,
    pub eye: Eye,
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone)]
pub struct SampledFrame {
    pub subject: String,
    pub eye: Eye,
    pub frame: Frame,
}

impl SampledFrame {
    pub fn stem(&self) -> String {
        format!("{}_{}_frame_{:06}", self.subject, self.eye, self.frame.index())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub subject: String,
    pub eye: Eye,
    pub available: usize,
    pub requested: usize,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub frames: Vec<SampledFrame>,
    pub shortfalls: Vec<Shortfall>,
}

/// Draws `n_per_eye` frames uniformly without replacement from every source, keeping
/// window order within a source. Sources with fewer frames contribute all of them and a
/// [`Shortfall`].
pub fn sample_frames(
    sources: &[FrameSource],
    n_per_eye: usize,
    seed: u64,
) -> Result<Sample, DatasetError> {
    if n_per_eye == 0 {
        return Err(DatasetError::ZeroSampleSize);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::new();
    let mut shortfalls = Vec::new();
    for src in sources {
        validate_subject_id(&src.subject)?;
        let available = src.frames.len();
        if available == 0 {
            return Err(DatasetError::NoFrames {
                subject: src.subject.clone(),
                eye: src.eye,
            });
        }
        let mut picked: Vec<usize> = if available <= n_per_eye {
            if available < n_per_eye {
                shortfalls.push(Shortfall {
                    subject: src.subject.clone(),
                    eye: src.eye,
                    available,
                    requested: n_per_eye,
                });
            }
            (0..available).collect()
        } else {
            index::sample(&mut rng, available, n_per_eye).into_vec()
        };
        picked.sort_unstable();
        frames.extend(picked.into_iter().map(|i| SampledFrame {
            subject: src.subject.clone(),
            eye: src.eye,
            frame: src.frames[i].clone(),
        }));
    }
    Ok(Sample { frames, shortfalls })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let r = self.as_array();
        let finite = r.iter().all(|v| v.is_finite() && *v >= 0.0);
        if !finite || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DatasetError::InvalidRatios(r));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SubjectSplit {
    pub fn partition_of(&self, subject: &str) -> Option<Partition> {
        Partition::ALL
            .into_iter()
            .find(|&p| self.subjects(p).iter().any(|s| s == subject))
    }

    pub fn subjects(&self, p: Partition) -> &[String] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }
}

/// Largest-remainder apportionment of `n` items, then at least one item for every
/// partition with a non-zero ratio (taken from the largest partition).
fn apportion(n: usize, ratios: [f64; 3]) -> Result<[usize; 3], DatasetError> {
    let nonzero = ratios.iter().filter(|r| **r > 0.0).count();
    if n < nonzero {
        return Err(DatasetError::TooFewSubjects {
            subjects: n,
            partitions: nonzero,
        });
    }
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        // guard against 37.99999 style rounding of exact products
        *c = (q + 1e-9).floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - counts[a] as f64;
        let fb = quotas[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>().min(n);
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    Ok(counts)
}

/// Shuffles the distinct subjects (sorted first, so input order does not matter) and
/// deals them into train/val/test.
pub fn split_by_subject(
    subjects: &[String],
    ratios: SplitRatios,
    seed: u64,
) -> Result<SubjectSplit, DatasetError> {
    ratios.validate()?;
    let unique: BTreeSet<&String> = subjects.iter().collect();
    let mut pool: Vec<String> = unique.into_iter().cloned().collect();
    let counts = apportion(pool.len(), ratios.as_array())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    pool.shuffle(&mut rng);
    let mut rest = pool.into_iter();
    let mut take = |k: usize| -> Vec<String> {
        let mut v: Vec<String> = rest.by_ref().take(k).collect();
        v.sort();
        v
    };
    Ok(SubjectSplit {
        train: take(counts[0]),
        val: take(counts[1]),
        test: take(counts[2]),
    })
}

#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub sample: SampledFrame,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject: String,
    pub eye: Eye,
    pub window_index: u64,
    pub t_start_us: u64,
    pub t_end_us: u64,
    pub event_count: u64,
    pub image: String,
    pub label: String,
    pub boxes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub frames_per_eye: usize,
    pub ratios: SplitRatios,
    pub subjects: SubjectSplit,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
    pub shortfalls: Vec<Shortfall>,
}

impl SplitManifest {
    pub fn entries(&self, p: Partition) -> &[ManifestEntry] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmitOptions {
    pub seed: u64,
    pub frames_per_eye: usize,
    pub ratios: SplitRatios,
}

/// Writes images, label files (empty when a frame has no annotation) and
/// `manifest.json`. Files are written in parallel; the manifest is sorted by subject,
/// eye and window.
pub fn emit_dataset(
    out_dir: &Path,
    items: &[DatasetItem],
    split: &SubjectSplit,
    shortfalls: &[Shortfall],
    options: EmitOptions,
) -> Result<SplitManifest, DatasetError> {
    for p in Partition::ALL {
        fs::create_dir_all(out_dir.join("images").join(p.dir_name()))?;
        fs::create_dir_all(out_dir.join("labels").join(p.dir_name()))?;
    }
    let placed: Vec<(Partition, &DatasetItem)> = items
        .iter()
        .map(|it| {
            split
                .partition_of(&it.sample.subject)
                .map(|p| (p, it))
                .ok_or_else(|| DatasetError::UnassignedSubject(it.sample.subject.clone()))
        })
        .collect::<Result<_, _>>()?;

    let mut entries: Vec<(Partition, ManifestEntry)> = placed
        .par_iter()
        .map(|&(p, it)| -> Result<_, DatasetError> {
            let stem = it.sample.stem();
            let image = format!("images/{}/{stem}.png", p.dir_name());
            let label = format!("labels/{}/{stem}.txt", p.dir_name());
            fs::write(out_dir.join(&image), it.sample.frame.to_png()?)?;
            fs::write(out_dir.join(&label), write_yolo_label(&it.annotations))?;
            let f = &it.sample.frame;
            Ok((
                p,
                ManifestEntry {
                    subject: it.sample.subject.clone(),
                    eye: it.sample.eye,
                    window_index: f.window.index,
                    t_start_us: f.window.t_start,
                    t_end_us: f.window.t_end,
                    event_count: f.event_count,
                    image,
                    label,
                    boxes: it.annotations.len(),
                },
            ))
        })
        .collect::<Result<_, _>>()?;
    entries.sort_by(|a, b| {
        (&a.1.subject, a.1.eye, a.1.window_index).cmp(&(&b.1.subject, b.1.eye, b.1.window_index))
    });

    let mut manifest = SplitManifest {
        seed: options.seed,
        frames_per_eye: options.frames_per_eye,
        ratios: options.ratios,
        subjects: split.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        shortfalls: shortfalls.to_vec(),
    };
    for (p, e) in entries {
        match p {
            Partition::Train => manifest.train.push(e),
            Partition::Val => manifest.val.push(e),
            Partition::Test => manifest.test.push(e),
        }
    }
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}
