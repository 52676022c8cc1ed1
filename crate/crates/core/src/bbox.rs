//! Axis-aligned pixel-space boxes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("degenerate box [{x_min}, {y_min}, {x_max}, {y_max}]: needs finite x_min < x_max and y_min < y_max")]
pub struct DegenerateBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

/// `(x_min, y_min, x_max, y_max)` in pixels, with strictly positive width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, DegenerateBox> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if finite && x_min < x_max && y_min < y_max {
            Ok(Self {
                x_min,
                y_min,
                x_max,
                y_max,
            })
        } else {
            Err(DegenerateBox {
                x_min,
                y_min,
                x_max,
                y_max,
            })
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, DegenerateBox> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self, DegenerateBox> {
        Self::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = DegenerateBox;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}
