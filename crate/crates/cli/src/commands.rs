use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;

use evpupil::bbox::BBox;
use evpupil::dataset::{
    emit_dataset, read_yolo_label, sample_frames, split_by_subject, validate_subject_id,
    write_yolo_label, Annotation, DatasetItem, EmitOptions, Eye, FrameSource,
};
use evpupil::detect::{centroid_detect, load_detections, write_detections, Detection, PUPIL_CLASS};
use evpupil::event_io::{
    parse_events, synth_moving_disc, write_events_binary, write_events_csv, EventFormat,
    EventStream, GroundTruthTrack, ParseOptions, SensorGeometry, SynthConfig,
};
use evpupil::framegen::{
    generate_frames, parse_frame_index, read_sidecar, write_frames, Frame, SIDECAR_FILE,
};
use evpupil::metrics::{evaluate, pr_curve, write_pr_csv, GroundTruth};
use evpupil::track::{
    build_trajectory, flag_saccade_candidates, interpolate_gaps, velocity, write_saccades_csv,
    write_trajectory_csv,
};

use crate::config::PipelineConfig;
use crate::{Baseline, ConvertArgs, DatasetArgs, DetectArgs, EvalArgs, SynthArgs, TrackArgs};

fn format_for(path: &Path) -> EventFormat {
    EventFormat::from_extension(path.extension().and_then(|e| e.to_str()).unwrap_or(""))
}

fn read_stream(path: &Path, geometry: SensorGeometry, swap_xy: bool) -> Result<EventStream> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    parse_events(
        BufReader::new(file),
        format_for(path),
        geometry,
        ParseOptions { swap_xy },
    )
    .with_context(|| format!("reading events from {}", path.display()))
}

fn read_truth(path: &Path) -> Result<GroundTruthTrack> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    GroundTruthTrack::read_csv(BufReader::new(file))
        .with_context(|| format!("reading ground truth from {}", path.display()))
}

/// The disc's bounding box at the frame's window midpoint, normalized. None when the
/// truth track does not cover the window or the box falls outside the sensor.
fn truth_annotation(
    truth: &GroundTruthTrack,
    frame: &Frame,
    frame_ref: String,
    geometry: SensorGeometry,
) -> Option<Annotation> {
    let (cx, cy) = truth.center_at(frame.window.t_mid())?;
    let d = 2.0 * truth.radius;
    let bbox = BBox::from_center(cx, cy, d, d).ok()?;
    Annotation::from_pixel_box(frame_ref, PUPIL_CLASS, &bbox, geometry).ok()
}

/// Last path component without its extension: the key that ties images, labels and
/// detections together.
fn frame_key(frame_ref: &str) -> &str {
    let name = frame_ref.rsplit(['/', '\\']).next().unwrap_or(frame_ref);
    name.rsplit_once('.').map_or(name, |(stem, _)| stem)
}

fn files_with_extension(root: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))?;
        for entry in entries {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new("")).join(name)
}

pub fn convert(args: &ConvertArgs, cfg: &PipelineConfig) -> Result<()> {
    let stream = read_stream(&args.input, cfg.geometry, args.framegen.swap_xy)?;
    let frames = generate_frames(&stream, &cfg.framegen)?;
    write_frames(&args.out, &frames)?;
    if frames.is_empty() {
        eprintln!(
            "warning: no window exceeded {} events; wrote an empty {}",
            cfg.framegen.event_threshold, SIDECAR_FILE
        );
    }
    if let Some(truth_path) = &args.truth {
        let truth = read_truth(truth_path)?;
        let labels = args.out.join("labels");
        fs::create_dir_all(&labels)?;
        frames.par_iter().try_for_each(|f| -> Result<()> {
            let stem = frame_key(&f.file_name()).to_string();
            let ann = truth_annotation(&truth, f, stem.clone(), cfg.geometry);
            let text = write_yolo_label(ann.as_slice());
            fs::write(labels.join(format!("{stem}.txt")), text)?;
            Ok(())
        })?;
    }
    eprintln!(
        "{} events -> {} frames in {}",
        stream.len(),
        frames.len(),
        args.out.display()
    );
    Ok(())
}

/// Splits `<subject>_<eye>` into its parts.
fn subject_and_eye(path: &Path) -> Result<(String, Eye)> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| anyhow!("unreadable file name {}", path.display()))?;
    let (subject, eye) = stem
        .rsplit_once('_')
        .ok_or_else(|| anyhow!("{}: expected <subject>_<left|right>", path.display()))?;
    let eye: Eye = eye
        .parse()
        .map_err(|e| anyhow!("{}: {e}", path.display()))?;
    validate_subject_id(subject)?;
    Ok((subject.to_string(), eye))
}

pub fn dataset(args: &DatasetArgs, cfg: &PipelineConfig) -> Result<()> {
    let mut inputs: Vec<(String, Eye, &PathBuf)> = args
        .inputs
        .iter()
        .map(|p| subject_and_eye(p).map(|(s, e)| (s, e, p)))
        .collect::<Result<_>>()?;
    inputs.sort();
    for pair in inputs.windows(2) {
        if (&pair[0].0, pair[0].1) == (&pair[1].0, pair[1].1) {
            bail!("two inputs for {} {}", pair[0].0, pair[0].1);
        }
    }

    let loaded: Vec<(FrameSource, Option<GroundTruthTrack>)> = inputs
        .par_iter()
        .map(|(subject, eye, path)| -> Result<_> {
            let stream = read_stream(path, cfg.geometry, args.framegen.swap_xy)?;
            let frames = generate_frames(&stream, &cfg.framegen)?;
            let truth_path = sibling(path, &format!("{subject}_{eye}.truth.csv"));
            let truth = if truth_path.exists() {
                Some(read_truth(&truth_path)?)
            } else {
                None
            };
            Ok((
                FrameSource {
                    subject: subject.clone(),
                    eye: *eye,
                    frames,
                },
                truth,
            ))
        })
        .collect::<Result<_>>()?;
    let (sources, truths): (Vec<FrameSource>, Vec<Option<GroundTruthTrack>>) =
        loaded.into_iter().unzip();
    let truth_of: BTreeMap<(&str, Eye), &GroundTruthTrack> = sources
        .iter()
        .zip(&truths)
        .filter_map(|(s, t)| t.as_ref().map(|t| ((s.subject.as_str(), s.eye), t)))
        .collect();

    let sample = sample_frames(&sources, cfg.dataset.frames_per_eye, cfg.seed)?;
    for s in &sample.shortfalls {
        eprintln!(
            "warning: {} {} has {} frames, {} requested",
            s.subject, s.eye, s.available, s.requested
        );
    }
    let subjects: Vec<String> = sources
        .iter()
        .map(|s| s.subject.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let split = split_by_subject(&subjects, cfg.dataset.ratios, cfg.seed)?;
    let items: Vec<DatasetItem> = sample
        .frames
        .into_iter()
        .map(|s| {
            let annotations = truth_of
                .get(&(s.subject.as_str(), s.eye))
                .and_then(|t| truth_annotation(t, &s.frame, s.stem(), cfg.geometry))
                .into_iter()
                .collect();
            DatasetItem {
                sample: s,
                annotations,
            }
        })
        .collect();
    let manifest = emit_dataset(
        &args.out,
        &items,
        &split,
        &sample.shortfalls,
        EmitOptions {
            seed: cfg.seed,
            frames_per_eye: cfg.dataset.frames_per_eye,
            ratios: cfg.dataset.ratios,
        },
    )?;
    eprintln!(
        "{} images: {} train, {} val, {} test",
        items.len(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len()
    );
    Ok(())
}

fn detect_png(path: &Path, cfg: &PipelineConfig) -> Result<Option<Detection>> {
    let img = image::open(path)
        .with_context(|| format!("decoding {}", path.display()))?
        .into_luma8();
    let geometry = SensorGeometry::new(img.width(), img.height())?;
    if geometry != cfg.geometry {
        bail!(
            "{} is {geometry}, expected {}",
            path.display(),
            cfg.geometry
        );
    }
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    Ok(centroid_detect(name, geometry, img.as_raw(), &cfg.detect))
}

pub fn detect(args: &DetectArgs, cfg: &PipelineConfig) -> Result<()> {
    let detections: Vec<Detection> = match (&args.baseline, &args.frames, &args.from_json) {
        (Some(Baseline::Centroid), Some(dir), None) => {
            let pngs = files_with_extension(dir, "png")?;
            let per_frame: Vec<Option<Detection>> = pngs
                .par_iter()
                .map(|p| detect_png(p, cfg))
                .collect::<Result<_>>()?;
            eprintln!("{} frames scanned", pngs.len());
            per_frame.into_iter().flatten().collect()
        }
        (None, _, Some(json)) => {
            let file = File::open(json).with_context(|| format!("opening {}", json.display()))?;
            load_detections(BufReader::new(file), Some(cfg.geometry))
                .with_context(|| format!("validating {}", json.display()))?
        }
        _ => bail!("use either --baseline centroid --frames DIR or --from-json FILE"),
    };
    let mut out = create(&args.out)?;
    write_detections(&detections, &mut out)?;
    out.flush()?;
    eprintln!("{} detections -> {}", detections.len(), args.out.display());
    Ok(())
}

fn load_detections_file(path: &Path, geometry: SensorGeometry) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    load_detections(text.as_bytes(), Some(geometry))
        .with_context(|| format!("validating {}", path.display()))
}

pub fn eval(args: &EvalArgs, cfg: &PipelineConfig) -> Result<()> {
    let mut detections = load_detections_file(&args.detections, cfg.geometry)?;
    let mut truths = Vec::new();
    let mut frames = BTreeSet::new();
    for path in files_with_extension(&args.labels, "txt")? {
        let key = frame_key(path.to_str().unwrap_or_default()).to_string();
        if !frames.insert(key.clone()) {
            bail!("label file for frame {key} appears twice under {}", args.labels.display());
        }
        let text = fs::read_to_string(&path)?;
        for a in read_yolo_label(&text, &key).with_context(|| format!("parsing {}", path.display()))? {
            truths.push(GroundTruth {
                frame_ref: key.clone(),
                class_id: a.class_id,
                bbox: a.to_pixel_box(cfg.geometry),
            });
        }
    }
    let unknown: Vec<&str> = detections
        .iter()
        .map(|d| frame_key(&d.frame_ref))
        .filter(|k| !frames.contains(*k))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if !unknown.is_empty() {
        bail!(
            "frame reference mismatch: {} detection frame(s) have no label file, e.g. {}",
            unknown.len(),
            unknown.iter().take(3).copied().collect::<Vec<_>>().join(", ")
        );
    }
    for d in &mut detections {
        d.frame_ref = frame_key(&d.frame_ref).to_string();
    }

    let report = evaluate(&detections, &truths, &cfg.metrics)?;
    let mut out = create(&args.out)?;
    serde_json::to_writer_pretty(&mut out, &report)?;
    out.write_all(b"\n")?;
    out.flush()?;
    let pr_path = args.pr.clone().unwrap_or_else(|| sibling(&args.out, "pr.csv"));
    write_pr_csv(
        &pr_curve(&detections, &truths, cfg.metrics.iou_threshold),
        create(&pr_path)?,
    )?;
    eprintln!(
        "P {:.3}  R {:.3}  F1 {:.3}  mAP@{} {:.3}",
        report.precision, report.recall, report.f1, cfg.metrics.iou_threshold, report.map
    );
    Ok(())
}

pub fn track(args: &TrackArgs, cfg: &PipelineConfig) -> Result<()> {
    let sidecar = match (&args.sidecar, &args.frames) {
        (Some(s), _) => s.clone(),
        (None, Some(dir)) => dir.join(SIDECAR_FILE),
        (None, None) => bail!("need --frames or --sidecar"),
    };
    let file = File::open(&sidecar).with_context(|| format!("opening {}", sidecar.display()))?;
    let windows: Vec<_> = read_sidecar(BufReader::new(file))?
        .into_iter()
        .map(|r| r.window)
        .collect();
    let detections = load_detections_file(&args.detections, cfg.geometry)?
        .into_iter()
        .map(|d| {
            parse_frame_index(&d.frame_ref)
                .map(|i| (i, d.clone()))
                .ok_or_else(|| anyhow!("frame reference {:?} has no frame index", d.frame_ref))
        })
        .collect::<Result<Vec<_>>>()?;
    let built = build_trajectory(&windows, &detections)?;
    for d in &built.duplicates {
        eprintln!(
            "warning: frame {} had {} extra detection(s); kept confidence {}",
            d.frame_index, d.dropped, d.kept_confidence
        );
    }
    let traj = interpolate_gaps(&built.trajectory, cfg.track.max_gap_frames);
    let vels = velocity(&traj, cfg.track.px_per_degree)?;
    write_trajectory_csv(&traj, &vels, create(&args.out)?)?;
    if cfg.track.px_per_degree.is_some() {
        let intervals = flag_saccade_candidates(
            &vels,
            cfg.track.saccade_threshold_deg_s,
            cfg.track.min_saccade_ms,
        )?;
        let path = args
            .saccades
            .clone()
            .unwrap_or_else(|| sibling(&args.out, "saccades.csv"));
        write_saccades_csv(&intervals, create(&path)?)?;
        eprintln!("{} saccade candidate(s) -> {}", intervals.len(), path.display());
    } else if args.saccades.is_some() {
        bail!("saccade flagging needs --px-per-degree or track.px_per_degree");
    }
    eprintln!("{} trajectory points -> {}", traj.len(), args.out.display());
    Ok(())
}

pub fn synth(args: &SynthArgs, cfg: &PipelineConfig) -> Result<()> {
    let s = &cfg.synth;
    let synth_cfg = SynthConfig {
        geometry: cfg.geometry,
        path: s.path.clone(),
        radius: s.radius,
        event_rate: s.event_rate,
        duration_ms: s.duration_ms,
        seed: cfg.seed,
        edge_speed_floor: s.edge_speed_floor,
    };
    let (stream, truth) = synth_moving_disc(&synth_cfg)?;
    let mut out = create(&args.out)?;
    match format_for(&args.out) {
        EventFormat::Csv => write_events_csv(&stream, &mut out)?,
        EventFormat::BinaryLe => write_events_binary(&stream, &mut out)?,
    }
    out.flush()?;
    if let Some(p) = &args.truth {
        let mut t = create(p)?;
        truth.write_csv(&mut t)?;
        t.flush()?;
    }
    eprintln!("{} events -> {}", stream.len(), args.out.display());
    Ok(())
}
