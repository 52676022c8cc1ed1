//! Pupil detections: the centroid baseline and the detections-JSON interchange format.
//!
//! The baseline takes whichever polarity has more painted pixels (ties go to ON),
//! averages its pixel coordinates, and turns the per-axis spread into a box of
//! `center ± box_sigma · std` (at least half a pixel each way), clipped to the sensor.
//! Pixel coordinates are column/row indices. Confidence is the dominant polarity's share
//! of all painted pixels.
//!
//! Interchange JSON is an array of `{"frame", "class", "box": [x_min, y_min, x_max, y_max], "conf"}`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;
use crate::event_io::SensorGeometry;
use crate::framegen::{Frame, OFF_INTENSITY, ON_INTENSITY};

pub const PUPIL_CLASS: u32 = 0;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("detections JSON does not match the schema: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("detection {index} ({frame}): confidence {conf} outside [0, 1]")]
    ConfidenceOutOfRange { index: usize, frame: String, conf: f64 },
    #[error("detection {index} ({frame}): degenerate box {bbox:?}")]
    DegenerateBox {
        index: usize,
        frame: String,
        bbox: [f64; 4],
    },
    #[error("detection {index} ({frame}): box {bbox:?} exceeds the {geometry} sensor")]
    OutOfBounds {
        index: usize,
        frame: String,
        bbox: [f64; 4],
        geometry: SensorGeometry,
    },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame_ref: String,
    pub class_id: u32,
    pub bbox: BBox,
    pub confidence: f64,
}

impl Detection {
    pub fn center(&self) -> (f64, f64) {
        self.bbox.center()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CentroidConfig {
    /// Minimum number of painted (ON or OFF) pixels for a detection.
    pub min_events: usize,
    pub box_sigma: f64,
}

impl Default for CentroidConfig {
    fn default() -> Self {
        Self {
            min_events: 10,
            box_sigma: 2.0,
        }
    }
}

#[derive(Default, Clone, Copy)]
struct Moments {
    n: u64,
    sx: f64,
    sy: f64,
    sxx: f64,
    syy: f64,
}

impl Moments {
    fn push(&mut self, x: f64, y: f64) {
        self.n += 1;
        self.sx += x;
        self.sy += y;
        self.sxx += x * x;
        self.syy += y * y;
    }
}

/// Centroid baseline on a raw row-major 8-bit raster.
pub fn centroid_detect(
    frame_ref: &str,
    geometry: SensorGeometry,
    pixels: &[u8],
    config: &CentroidConfig,
) -> Option<Detection> {
    let width = geometry.width as usize;
    let (mut on, mut off) = (Moments::default(), Moments::default());
    for (i, &v) in pixels.iter().enumerate() {
        let (x, y) = ((i % width) as f64, (i / width) as f64);
        match v {
            ON_INTENSITY => on.push(x, y),
            OFF_INTENSITY => off.push(x, y),
            _ => {}
        }
    }
    let total = on.n + off.n;
    if total == 0 || (total as usize) < config.min_events {
        return None;
    }
    let m = if on.n >= off.n { on } else { off };
    let n = m.n as f64;
    let (cx, cy) = (m.sx / n, m.sy / n);
    let var_x = (m.sxx / n - cx * cx).max(0.0);
    let var_y = (m.syy / n - cy * cy).max(0.0);
    let hx = (config.box_sigma * var_x.sqrt()).max(0.5);
    let hy = (config.box_sigma * var_y.sqrt()).max(0.5);
    let (w, h) = (f64::from(geometry.width), f64::from(geometry.height));
    let bbox = BBox::new(
        (cx - hx).max(0.0),
        (cy - hy).max(0.0),
        (cx + hx).min(w),
        (cy + hy).min(h),
    )
    .ok()?;
    Some(Detection {
        frame_ref: frame_ref.to_string(),
        class_id: PUPIL_CLASS,
        bbox,
        confidence: m.n as f64 / total as f64,
    })
}

/// Runs the baseline on an accumulated frame, using its file name as the frame reference.
pub fn centroid_detect_frame(frame: &Frame, config: &CentroidConfig) -> Option<Detection> {
    centroid_detect(&frame.file_name(), frame.geometry, frame.pixels(), config)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    frame: String,
    class: u32,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    conf: f64,
}

/// Parses and validates detections JSON. Boxes are also checked against `geometry` when
/// given. Output preserves file order.
pub fn load_detections<R: Read>(
    source: R,
    geometry: Option<SensorGeometry>,
) -> Result<Vec<Detection>, DetectError> {
    let records: Vec<DetectionRecord> = serde_json::from_reader(source)?;
    records
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            if !(0.0..=1.0).contains(&r.conf) {
                return Err(DetectError::ConfidenceOutOfRange {
                    index,
                    frame: r.frame,
                    conf: r.conf,
                });
            }
            let [x0, y0, x1, y1] = r.bbox;
            let bbox = BBox::new(x0, y0, x1, y1).map_err(|_| DetectError::DegenerateBox {
                index,
                frame: r.frame.clone(),
                bbox: r.bbox,
            })?;
            if let Some(g) = geometry {
                if x0 < 0.0 || y0 < 0.0 || x1 > f64::from(g.width) || y1 > f64::from(g.height) {
                    return Err(DetectError::OutOfBounds {
                        index,
                        frame: r.frame,
                        bbox: r.bbox,
                        geometry: g,
                    });
                }
            }
            Ok(Detection {
                frame_ref: r.frame,
                class_id: r.class,
                bbox,
                confidence: r.conf,
            })
        })
        .collect()
}

pub fn write_detections<W: Write>(detections: &[Detection], sink: W) -> Result<(), DetectError> {
    let records: Vec<DetectionRecord> = detections
        .iter()
        .map(|d| DetectionRecord {
            frame: d.frame_ref.clone(),
            class: d.class_id,
            bbox: d.bbox.to_array(),
            conf: d.confidence,
        })
        .collect();
    let mut sink = sink;
    serde_json::to_writer_pretty(&mut sink, &records)?;
    sink.write_all(b"\n")?;
    Ok(())
}

pub fn group_by_frame(detections: &[Detection]) -> BTreeMap<&str, Vec<&Detection>> {
    let mut out: BTreeMap<&str, Vec<&Detection>> = BTreeMap::new();
    for d in detections {
        out.entry(d.frame_ref.as_str()).or_default().push(d);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom() -> SensorGeometry {
        SensorGeometry::new(40, 30).unwrap()
    }

    fn raster(on: &[(u32, u32)], off: &[(u32, u32)]) -> Vec<u8> {
        let g = geom();
        let mut px = vec![128u8; g.pixel_count()];
        for &(x, y) in on {
            px[(y * g.width + x) as usize] = 255;
        }
        for &(x, y) in off {
            px[(y * g.width + x) as usize] = 0;
        }
        px
    }

    fn any_cfg() -> CentroidConfig {
        CentroidConfig {
            min_events: 1,
            box_sigma: 2.0,
        }
    }

    #[test]
    fn symmetric_on_points() {
        let px = raster(&[(10, 10), (12, 10), (10, 12), (12, 12)], &[]);
        let d = centroid_detect("f", geom(), &px, &any_cfg()).unwrap();
        assert_eq!(d.center(), (11.0, 11.0));
        assert_eq!(d.confidence, 1.0);
        // std is 1 on each axis, so the box spans ±2
        assert_eq!(d.bbox.to_array(), [9.0, 9.0, 13.0, 13.0]);
    }

    #[test]
    fn background_only_and_min_events_gate() {
        assert!(centroid_detect("f", geom(), &raster(&[], &[]), &any_cfg()).is_none());
        let px = raster(&[(1, 1), (2, 2)], &[]);
        assert!(centroid_detect("f", geom(), &px, &CentroidConfig::default()).is_none());
    }

    #[test]
    fn dominant_polarity_and_tie() {
        let px = raster(&[(30, 20)], &[(5, 5), (7, 5)]);
        let d = centroid_detect("f", geom(), &px, &any_cfg()).unwrap();
        assert_eq!(d.center(), (6.0, 5.0));
        assert!((d.confidence - 2.0 / 3.0).abs() < 1e-12);
        let px = raster(&[(30, 20)], &[(5, 5)]);
        assert_eq!(centroid_detect("f", geom(), &px, &any_cfg()).unwrap().center(), (30.0, 20.0));
    }

    #[test]
    fn box_is_clipped() {
        let px = raster(&[(0, 0), (0, 29), (39, 0), (39, 29)], &[]);
        let d = centroid_detect("f", geom(), &px, &any_cfg()).unwrap();
        assert_eq!(d.bbox.to_array(), [0.0, 0.0, 40.0, 30.0]);
    }

    #[test]
    fn load_valid_and_invalid() {
        let ok = r#"[{"frame":"frame_000001.png","class":0,"box":[10,10,50,40],"conf":0.9}]"#;
        let d = load_detections(ok.as_bytes(), None).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].bbox.to_array(), [10.0, 10.0, 50.0, 40.0]);

        let hot = r#"[{"frame":"a","class":0,"box":[10,10,50,40],"conf":1.2}]"#;
        assert!(matches!(
            load_detections(hot.as_bytes(), None),
            Err(DetectError::ConfidenceOutOfRange { .. })
        ));
        let flat = r#"[{"frame":"a","class":0,"box":[50,10,10,40],"conf":0.5}]"#;
        assert!(matches!(
            load_detections(flat.as_bytes(), None),
            Err(DetectError::DegenerateBox { .. })
        ));
        let missing = r#"[{"frame":"a","box":[1,1,2,2],"conf":0.5}]"#;
        assert!(matches!(load_detections(missing.as_bytes(), None), Err(DetectError::Schema(_))));
        let wide = r#"[{"frame":"a","class":0,"box":[1,1,400,2],"conf":0.5}]"#;
        assert!(load_detections(wide.as_bytes(), None).is_ok());
        assert!(matches!(
            load_detections(wide.as_bytes(), Some(SensorGeometry::default())),
            Err(DetectError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn write_then_load() {
        let d = vec![Detection {
            frame_ref: "frame_000003.png".into(),
            class_id: 0,
            bbox: BBox::new(1.5, 2.0, 3.25, 4.0).unwrap(),
            confidence: 0.75,
        }];
        let mut buf = Vec::new();
        write_detections(&d, &mut buf).unwrap();
        assert_eq!(load_detections(&buf[..], Some(geom())).unwrap(), d);
        assert_eq!(group_by_frame(&d).len(), 1);
    }

    fn arb_cluster() -> impl Strategy<Value = (Vec<(u32, u32)>, Vec<(u32, u32)>)> {
        (
            prop::collection::btree_set((5u32..15, 5u32..12), 3..20),
            prop::collection::btree_set((5u32..15, 5u32..12), 0..20),
        )
            .prop_map(|(on, off)| {
                let off: Vec<_> = off.into_iter().filter(|p| !on.contains(p)).collect();
                (on.into_iter().collect(), off)
            })
    }

    proptest! {
        #[test]
        fn translation_equivariance((on, off) in arb_cluster(), dx in 0u32..20, dy in 0u32..15) {
            let cfg = CentroidConfig { min_events: 1, box_sigma: 0.5 };
            let a = centroid_detect("f", geom(), &raster(&on, &off), &cfg).unwrap();
            let shift = |v: &[(u32, u32)]| v.iter().map(|&(x, y)| (x + dx, y + dy)).collect::<Vec<_>>();
            let b = centroid_detect("f", geom(), &raster(&shift(&on), &shift(&off)), &cfg).unwrap();
            let (ca, cb) = (a.center(), b.center());
            prop_assert!((cb.0 - ca.0 - f64::from(dx)).abs() < 1e-9);
            prop_assert!((cb.1 - ca.1 - f64::from(dy)).abs() < 1e-9);
        }

        #[test]
        fn polarity_swap_keeps_center((on, off) in arb_cluster()) {
            prop_assume!(on.len() != off.len());
            let cfg = CentroidConfig { min_events: 1, box_sigma: 2.0 };
            let a = centroid_detect("f", geom(), &raster(&on, &off), &cfg).unwrap();
            let b = centroid_detect("f", geom(), &raster(&off, &on), &cfg).unwrap();
            prop_assert_eq!(a.bbox, b.bbox);
            prop_assert_eq!(a.confidence, b.confidence);
        }

        #[test]
        fn boxes_stay_on_sensor(on in prop::collection::btree_set((0u32..40, 0u32..30), 1..60), sigma in 0.1f64..6.0) {
            let on: Vec<_> = on.into_iter().collect();
            let cfg = CentroidConfig { min_events: 1, box_sigma: sigma };
            let d = centroid_detect("f", geom(), &raster(&on, &[]), &cfg).unwrap();
            prop_assert!(d.bbox.x_min() >= 0.0 && d.bbox.y_min() >= 0.0);
            prop_assert!(d.bbox.x_max() <= 40.0 && d.bbox.y_max() <= 30.0);
        }
    }
}
