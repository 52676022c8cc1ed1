//! Acceptance suite. Run with `--nocapture` to see one PASS/FAIL line per criterion.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use evpupil::bbox::BBox;
use evpupil::dataset::{
    emit_dataset, sample_frames, split_by_subject, Annotation, DatasetItem, EmitOptions, Eye,
    FrameSource, SplitRatios,
};
use evpupil::detect::{centroid_detect_frame, write_detections, CentroidConfig, Detection};
use evpupil::event_io::{
    parse_events, synth_moving_disc, write_events_csv, DiscPath, Event, EventFormat, EventStream,
    ParseOptions, Polarity, SensorGeometry, SynthConfig,
};
use evpupil::framegen::{
    accumulate, generate_frames, plan_windows, write_sidecar, FrameGenConfig, WindowPlan,
};
use evpupil::metrics::{
    evaluate, f1_score, iou, match_detections, pr_curve, write_pr_csv, EvalParams, GroundTruth,
    Scored,
};
use evpupil::track::{
    build_trajectory, interpolate_gaps, velocity, write_trajectory_csv, Trajectory,
};

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn window_count_formula() -> Outcome {
    let cases = [(0u64, 25_000u64, 10u64, 3usize), (0, 20_000, 10, 2), (5_000, 5_000, 10, 1)];
    let start = Instant::now();
    let counts: Vec<usize> = cases
        .iter()
        .map(|&(a, b, d, _)| plan_windows(a, b, d).map(|p| p.len()).unwrap_or(usize::MAX))
        .collect();
    let elapsed = start.elapsed();
    let want: Vec<usize> = cases.iter().map(|c| c.3).collect();
    check(
        counts == want && elapsed < Duration::from_millis(1),
        format!("counts {counts:?} in {elapsed:?}"),
        format!("counts {counts:?} (want {want:?}) in {elapsed:?} (budget 1 ms)"),
    )
}

fn threshold_gate() -> Outcome {
    let g = SensorGeometry::default();
    let cfg = FrameGenConfig::default();
    let w = WindowPlan {
        index: 0,
        t_start: 0,
        t_end: 10_000,
    };
    let start = Instant::now();
    let events = |n: u64| -> Vec<Event> {
        (0..n)
            .map(|i| Event::new(i * 4, (i % 346) as u16, (i / 346) as u16, Polarity::On))
            .collect()
    };
    let at = accumulate(&events(2000), w, g, &cfg).is_some();
    let above = accumulate(&events(2001), w, g, &cfg).is_some();
    let elapsed = start.elapsed();
    check(
        !at && above && elapsed < Duration::from_secs(1),
        format!("2000 -> no frame, 2001 -> frame, {elapsed:?}"),
        format!("2000 -> {at}, 2001 -> {above}, {elapsed:?}"),
    )
}

fn polarity_golden_image() -> Outcome {
    let g = SensorGeometry::new(6, 4).unwrap();
    let cfg = FrameGenConfig {
        event_threshold: 9,
        ..FrameGenConfig::default()
    };
    let (on, off) = (Polarity::On, Polarity::Off);
    let events = [
        Event::new(100, 0, 0, on),
        Event::new(200, 5, 0, off),
        Event::new(300, 2, 1, on),
        Event::new(400, 3, 1, on),
        Event::new(500, 2, 1, off),
        Event::new(600, 4, 2, off),
        Event::new(700, 1, 3, on),
        Event::new(800, 4, 2, on),
        Event::new(900, 5, 3, off),
        Event::new(950, 0, 3, off),
    ];
    #[rustfmt::skip]
    let expected: [u8; 24] = [
        255, 128, 128, 128, 128,   0,
        128, 128,   0, 255, 128, 128,
        128, 128, 128, 128, 255, 128,
          0, 255, 128, 128, 128,   0,
    ];
    let w = WindowPlan {
        index: 0,
        t_start: 0,
        t_end: 10_000,
    };
    let frame = accumulate(&events, w, g, &cfg).ok_or("window gated out")?;
    let png = frame.to_png().map_err(|e| e.to_string())?;
    let decoded = image::load_from_memory(&png).map_err(|e| e.to_string())?.to_luma8();
    check(
        decoded.as_raw().as_slice() == expected && decoded.dimensions() == (6, 4),
        "decoded PNG equals the hand raster".into(),
        format!("decoded {:?}", decoded.as_raw()),
    )
}

fn frame_rate_claim() -> Outcome {
    let cfg = SynthConfig::new(
        SensorGeometry::default(),
        DiscPath::Sine {
            center: (173.0, 130.0),
            amplitude: (40.0, 20.0),
            period_ms: 700.0,
            phase: 0.0,
        },
        8.0,
        300.0,
        6_500,
        7,
    );
    let (stream, _) = synth_moving_disc(&cfg).map_err(|e| e.to_string())?;
    let span = stream.t_max().unwrap() - stream.t_min().unwrap();
    let expected_windows = ((span as f64) / 10_000.0).ceil() as usize;
    let planned = plan_windows(stream.t_min().unwrap(), stream.t_max().unwrap(), 10)
        .map_err(|e| e.to_string())?
        .len();
    let start = Instant::now();
    let frames = generate_frames(&stream, &FrameGenConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();
    let throughput = stream.len() as f64 / elapsed;
    check(
        span >= 6_499_000 && frames.len() >= 600 && planned == expected_windows && throughput >= 1e6,
        format!(
            "{} events over {span} us -> {planned} windows, {} frames, {:.1} M ev/s",
            stream.len(),
            frames.len(),
            throughput / 1e6
        ),
        format!(
            "span {span}, planned {planned} (want {expected_windows}), frames {}, {:.2} M ev/s",
            frames.len(),
            throughput / 1e6
        ),
    )
}

fn table_consistency() -> Outcome {
    // (precision, recall, reported F1)
    let rows = [
        ("n", 0.965, 0.919, "0.94"),
        ("s", 0.950, 0.920, "0.93"),
        ("m", 0.949, 0.927, "0.93"),
        ("l", 0.944, 0.938, "0.94"),
    ];
    let got: Vec<String> = rows
        .iter()
        .map(|&(_, p, r, _)| format!("{:.2}", f1_score(p, r)))
        .collect();
    let bad: Vec<String> = rows
        .iter()
        .zip(&got)
        .filter(|(row, g)| row.3 != g.as_str())
        .map(|(row, _)| format!("{}: {:.4} vs reported {}", row.0, f1_score(row.1, row.2), row.3))
        .collect();
    check(
        bad.is_empty(),
        format!("F1 {got:?}"),
        format!("F1 {got:?}; mismatched rows [{}]", bad.join(", ")),
    )
}

/// Lexicographically best partial assignment: detections in descending confidence, each
/// scoring its matched IoU (or -1 when unmatched). With distinct confidences and IoUs this
/// is exactly what a greedy matcher must produce.
fn brute_force_counts(dets: &[Scored], truths: &[BBox], thr: f64) -> (u64, u64, u64) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // selection sort on confidence, independent of the library ordering code
    for i in 0..order.len() {
        let mut best = i;
        for j in i + 1..order.len() {
            if dets[order[j]].confidence > dets[order[best]].confidence {
                best = j;
            }
        }
        order.swap(i, best);
    }
    fn overlap(a: &BBox, b: &BBox) -> f64 {
        let w = (a.x_max().min(b.x_max()) - a.x_min().max(b.x_min())).max(0.0);
        let h = (a.y_max().min(b.y_max()) - a.y_min().max(b.y_min())).max(0.0);
        let inter = w * h;
        inter / (a.width() * a.height() + b.width() * b.height() - inter)
    }
    fn search(
        k: usize,
        order: &[usize],
        dets: &[Scored],
        truths: &[BBox],
        thr: f64,
        used: &mut Vec<bool>,
        current: &mut Vec<f64>,
        best: &mut Option<Vec<f64>>,
    ) {
        if k == order.len() {
            let better = match best {
                None => true,
                Some(b) => current.iter().zip(b.iter()).find(|(x, y)| x != y).is_some_and(|(x, y)| x > y),
            };
            if better {
                *best = Some(current.clone());
            }
            return;
        }
        current.push(-1.0);
        search(k + 1, order, dets, truths, thr, used, current, best);
        current.pop();
        for t in 0..truths.len() {
            let v = overlap(&dets[order[k]].bbox, &truths[t]);
            if !used[t] && v >= thr {
                used[t] = true;
                current.push(v);
                search(k + 1, order, dets, truths, thr, used, current, best);
                current.pop();
                used[t] = false;
            }
        }
    }
    let mut best = None;
    search(0, &order, dets, truths, thr, &mut vec![false; truths.len()], &mut Vec::new(), &mut best);
    let scores = best.unwrap_or_default();
    let tp = scores.iter().filter(|&&s| s >= 0.0).count() as u64;
    (tp, dets.len() as u64 - tp, truths.len() as u64 - tp)
}

fn matching_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut agree = 0;
    let mut matched_any = 0;
    let n = 500;
    for _ in 0..n {
        let n_truth = rng.gen_range(0..=5usize);
        let n_det = rng.gen_range(0..=(10 - n_truth).min(5));
        let anchors: Vec<(f64, f64)> = (0..3)
            .map(|_| (rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0)))
            .collect();
        let jitter_box = |rng: &mut ChaCha8Rng| {
            let (ax, ay) = anchors[rng.gen_range(0..anchors.len())];
            let x = ax + rng.gen_range(-4.0..4.0);
            let y = ay + rng.gen_range(-4.0..4.0);
            let w = rng.gen_range(8.0..14.0);
            let h = rng.gen_range(8.0..14.0);
            BBox::new(x, y, x + w, y + h).unwrap()
        };
        let truths: Vec<BBox> = (0..n_truth).map(|_| jitter_box(&mut rng)).collect();
        let dets: Vec<Scored> = (0..n_det)
            .map(|_| Scored {
                bbox: jitter_box(&mut rng),
                confidence: rng.gen_range(0.0..1.0),
            })
            .collect();
        let m = match_detections(&dets, &truths, 0.5, 0.0).counts();
        let oracle = brute_force_counts(&dets, &truths, 0.5);
        if (m.tp, m.fp, m.fn_) == oracle {
            agree += 1;
        }
        if oracle.0 > 0 {
            matched_any += 1;
        }
    }
    check(
        agree == n,
        format!("{agree}/{n} instances agree ({matched_any} with at least one TP)"),
        format!("{agree}/{n} instances agree"),
    )
}

fn iou_properties() -> Outcome {
    let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let b = BBox::new(5.0, 0.0, 15.0, 10.0).unwrap();
    let c = BBox::new(3.0, 4.0, 9.5, 12.0).unwrap();
    let far = BBox::new(20.0, 20.0, 30.0, 30.0).unwrap();
    let tol = 1e-9;
    let checks = [
        ("symmetry", (iou(&a, &c) - iou(&c, &a)).abs() < tol && (iou(&b, &c) - iou(&c, &b)).abs() < tol),
        ("identity", (iou(&c, &c) - 1.0).abs() < tol),
        ("disjoint", iou(&a, &far).abs() < tol),
        ("one third", (iou(&a, &b) - 1.0 / 3.0).abs() < tol),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    check(failed.is_empty(), "symmetry, identity, disjoint, 1/3".into(), format!("failed {failed:?}"))
}

struct E2eRun {
    mean_error_px: f64,
    peak_px_s: f64,
    analytic_peak_px_s: f64,
    points: usize,
}

fn e2e_pipeline() -> Result<E2eRun, String> {
    let amplitude = 60.0;
    let period_ms = 400.0;
    let cfg = SynthConfig::new(
        SensorGeometry::default(),
        DiscPath::Sine {
            center: (173.0, 130.0),
            amplitude: (amplitude, 0.0),
            period_ms,
            phase: 0.0,
        },
        2.0,
        300.0,
        1_000,
        42,
    );
    let (stream, truth) = synth_moving_disc(&cfg).map_err(|e| e.to_string())?;
    // through the on-disk CSV form, as the converter sees it
    let mut csv = Vec::new();
    write_events_csv(&stream, &mut csv).map_err(|e| e.to_string())?;
    let stream = parse_events(&csv[..], EventFormat::Csv, stream.geometry(), ParseOptions::default())
        .map_err(|e| e.to_string())?;
    let fcfg = FrameGenConfig::default();
    let frames = generate_frames(&stream, &fcfg).map_err(|e| e.to_string())?;
    let plans = plan_windows(stream.t_min().unwrap(), stream.t_max().unwrap(), fcfg.duration_ms)
        .map_err(|e| e.to_string())?;
    let dets: Vec<(u64, Detection)> = frames
        .par_iter()
        .filter_map(|f| centroid_detect_frame(f, &CentroidConfig::default()).map(|d| (f.index(), d)))
        .collect();
    let traj = build_trajectory(&plans, &dets).map_err(|e| e.to_string())?.trajectory;
    let traj = interpolate_gaps(&traj, 2);
    let err_sum: f64 = traj
        .points
        .iter()
        .map(|p| {
            let (x, y) = truth.center_at(p.t_mid).unwrap();
            (p.cx - x).hypot(p.cy - y)
        })
        .sum();
    let v = velocity(&traj, None).map_err(|e| e.to_string())?;
    Ok(E2eRun {
        mean_error_px: err_sum / traj.points.len() as f64,
        peak_px_s: v.iter().map(|s| s.speed_px_s).fold(0.0, f64::max),
        // d/dt of A sin(2πt/T) peaks at 2πA/T
        analytic_peak_px_s: TAU * amplitude / (period_ms / 1000.0),
        points: traj.points.len(),
    })
}

fn e2e_tracking() -> Outcome {
    let start = Instant::now();
    let r = e2e_pipeline()?;
    let elapsed = start.elapsed();
    let rel = (r.peak_px_s - r.analytic_peak_px_s).abs() / r.analytic_peak_px_s;
    check(
        r.mean_error_px <= 2.0 && rel <= 0.10 && elapsed < Duration::from_secs(60),
        format!(
            "{} points, mean error {:.3} px, peak {:.1} vs {:.1} px/s ({:.1}%), {elapsed:?}",
            r.points,
            r.mean_error_px,
            r.peak_px_s,
            r.analytic_peak_px_s,
            rel * 100.0
        ),
        format!(
            "mean error {:.3} px, peak {:.1} vs {:.1} px/s, {elapsed:?}",
            r.mean_error_px, r.peak_px_s, r.analytic_peak_px_s
        ),
    )
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Runs every stage and returns its serialized outputs keyed by stage/file.
fn pipeline_artifacts(seed: u64, threads: usize) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| e.to_string())?;
    pool.install(|| {
        let e = |x: &dyn std::fmt::Display| x.to_string();
        let mut out = BTreeMap::new();
        let g = SensorGeometry::default();
        let fcfg = FrameGenConfig::default();
        let mut sources = Vec::new();
        let mut truths = Vec::new();
        let mut all_dets = Vec::new();
        for (k, subject) in ["s01", "s02", "s03", "s04"].iter().enumerate() {
            for (j, eye) in [Eye::Left, Eye::Right].into_iter().enumerate() {
                let cfg = SynthConfig::new(
                    g,
                    DiscPath::Sine {
                        center: (173.0, 130.0),
                        amplitude: (30.0 + 5.0 * k as f64, 10.0 * j as f64),
                        period_ms: 500.0,
                        phase: k as f64,
                    },
                    4.0,
                    250.0,
                    400,
                    seed.wrapping_add((2 * k + j) as u64),
                );
                let (stream, truth) = synth_moving_disc(&cfg).map_err(|x| e(&x))?;
                let tag = format!("{subject}_{eye}");
                let mut buf = Vec::new();
                write_events_csv(&stream, &mut buf).map_err(|x| e(&x))?;
                out.insert(format!("synth/{tag}.csv"), buf);

                let frames = generate_frames(&stream, &fcfg).map_err(|x| e(&x))?;
                for f in &frames {
                    out.insert(format!("convert/{tag}/{}", f.file_name()), f.to_png().map_err(|x| e(&x))?);
                }
                let mut side = Vec::new();
                write_sidecar(&frames, &mut side).map_err(|x| e(&x))?;
                out.insert(format!("convert/{tag}/frames.csv"), side);

                let dets: Vec<Detection> = frames
                    .par_iter()
                    .filter_map(|f| centroid_detect_frame(f, &CentroidConfig::default()))
                    .map(|mut d| {
                        d.frame_ref = format!("{tag}_{}", d.frame_ref);
                        d
                    })
                    .collect();
                for f in &frames {
                    let (cx, cy) = truth.center_at(f.window.t_mid()).unwrap();
                    let r = truth.radius;
                    truths.push(GroundTruth {
                        frame_ref: format!("{tag}_{}", f.file_name()),
                        class_id: 0,
                        bbox: BBox::new(cx - r, cy - r, cx + r, cy + r).map_err(|x| e(&x))?,
                    });
                }
                let plans = plan_windows(stream.t_min().unwrap(), stream.t_max().unwrap(), 10)
                    .map_err(|x| e(&x))?;
                let indexed: Vec<(u64, Detection)> = frames
                    .iter()
                    .zip(&dets)
                    .map(|(f, d)| (f.index(), d.clone()))
                    .collect();
                let traj: Trajectory = interpolate_gaps(
                    &build_trajectory(&plans, &indexed).map_err(|x| e(&x))?.trajectory,
                    2,
                );
                let v = velocity(&traj, Some(5.0)).map_err(|x| e(&x))?;
                let mut tbuf = Vec::new();
                write_trajectory_csv(&traj, &v, &mut tbuf).map_err(|x| e(&x))?;
                out.insert(format!("track/{tag}.csv"), tbuf);

                all_dets.extend(dets);
                sources.push(FrameSource {
                    subject: subject.to_string(),
                    eye,
                    frames,
                });
            }
        }

        let mut dbuf = Vec::new();
        write_detections(&all_dets, &mut dbuf).map_err(|x| e(&x))?;
        out.insert("detect/detections.json".into(), dbuf);
        let report = evaluate(&all_dets, &truths, &EvalParams::default()).map_err(|x| e(&x))?;
        out.insert("eval/report.json".into(), serde_json::to_vec(&report).map_err(|x| e(&x))?);
        let mut pr = Vec::new();
        write_pr_csv(&pr_curve(&all_dets, &truths, 0.5), &mut pr).map_err(|x| e(&x))?;
        out.insert("eval/pr.csv".into(), pr);

        let sample = sample_frames(&sources, 5, seed).map_err(|x| e(&x))?;
        let subjects: Vec<String> = sources.iter().map(|s| s.subject.clone()).collect();
        let ratios = SplitRatios {
            train: 0.5,
            val: 0.25,
            test: 0.25,
        };
        let split = split_by_subject(&subjects, ratios, seed).map_err(|x| e(&x))?;
        let items: Vec<DatasetItem> = sample
            .frames
            .into_iter()
            .map(|s| {
                let ann = truths
                    .iter()
                    .find(|t| t.frame_ref == format!("{}_{}_{}", s.subject, s.eye, s.frame.file_name()))
                    .map(|t| Annotation::from_pixel_box(s.stem(), 0, &t.bbox, g))
                    .transpose()?;
                Ok(DatasetItem {
                    annotations: ann.into_iter().collect(),
                    sample: s,
                })
            })
            .collect::<Result<_, evpupil::dataset::DatasetError>>()
            .map_err(|x| e(&x))?;
        let dir = tempfile::tempdir().map_err(|x| e(&x))?;
        emit_dataset(
            dir.path(),
            &items,
            &split,
            &sample.shortfalls,
            EmitOptions {
                seed,
                frames_per_eye: 5,
                ratios,
            },
        )
        .map_err(|x| e(&x))?;
        for (k, v) in read_tree(dir.path()) {
            out.insert(format!("dataset/{k}"), v);
        }
        Ok(out)
    })
}

fn determinism() -> Outcome {
    let reference = pipeline_artifacts(77, 1)?;
    let mut mismatches = Vec::new();
    for threads in [1, 2, 8] {
        let other = pipeline_artifacts(77, threads)?;
        if other.keys().ne(reference.keys()) {
            mismatches.push(format!("file set differs at {threads} threads"));
            continue;
        }
        for (k, v) in &reference {
            if other[k] != *v {
                mismatches.push(format!("{k} differs at {threads} threads"));
            }
        }
    }
    let stages: std::collections::BTreeSet<&str> =
        reference.keys().filter_map(|k| k.split('/').next()).collect();
    check(
        mismatches.is_empty(),
        format!("{} artifacts across stages {stages:?} identical at 1/2/8 threads", reference.len()),
        mismatches.join("; "),
    )
}

#[test]
fn acceptance_suite() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("window-count formula", window_count_formula),
        ("threshold gate", threshold_gate),
        ("polarity mapping golden image", polarity_golden_image),
        ("frame-rate claim and throughput", frame_rate_claim),
        ("F1 table internal consistency", table_consistency),
        ("matching oracle (500 instances)", matching_oracle),
        ("IoU properties", iou_properties),
        ("end-to-end synthetic tracking", e2e_tracking),
        ("determinism across thread counts", determinism),
    ];
    let mut failures = 0;
    for (name, run) in criteria {
        match run() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    assert_eq!(failures, 0, "{failures} acceptance criteria failed");
}

#[test]
fn stream_survives_csv_round_trip() {
    let (stream, _) = synth_moving_disc(&SynthConfig::new(
        SensorGeometry::default(),
        DiscPath::Stationary {
            center: (100.0, 100.0),
        },
        5.0,
        10.0,
        20,
        1,
    ))
    .unwrap();
    let mut csv = Vec::new();
    write_events_csv(&stream, &mut csv).unwrap();
    let back: EventStream =
        parse_events(&csv[..], EventFormat::Csv, stream.geometry(), ParseOptions::default()).unwrap();
    assert_eq!(back, stream);
}
