use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use evpupil::dataset::SplitRatios;
use evpupil::detect::CentroidConfig;
use evpupil::event_io::{DiscPath, SensorGeometry};
use evpupil::framegen::FrameGenConfig;
use evpupil::metrics::EvalParams;

/// Everything a pipeline run depends on. Loaded from TOML; command-line flags override
/// individual fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub geometry: SensorGeometry,
    pub framegen: FrameGenConfig,
    pub dataset: DatasetKnobs,
    pub detect: CentroidConfig,
    pub metrics: EvalParams,
    pub track: TrackKnobs,
    pub synth: SynthKnobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetKnobs {
    pub frames_per_eye: usize,
    pub ratios: SplitRatios,
}

impl Default for DatasetKnobs {
    fn default() -> Self {
        Self {
            frames_per_eye: 20,
            ratios: SplitRatios::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackKnobs {
    pub max_gap_frames: u64,
    /// Pixels per degree of visual angle. Angular speeds and saccade flagging need it.
    pub px_per_degree: Option<f64>,
    pub saccade_threshold_deg_s: f64,
    pub min_saccade_ms: f64,
}

impl Default for TrackKnobs {
    fn default() -> Self {
        Self {
            max_gap_frames: 2,
            px_per_degree: None,
            saccade_threshold_deg_s: 300.0,
            min_saccade_ms: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthKnobs {
    pub path: DiscPath,
    pub radius: f64,
    pub event_rate: f64,
    pub duration_ms: u64,
    pub edge_speed_floor: f64,
}

impl Default for SynthKnobs {
    fn default() -> Self {
        Self {
            path: DiscPath::Sine {
                center: (173.0, 130.0),
                amplitude: (60.0, 0.0),
                period_ms: 400.0,
                phase: 0.0,
            },
            radius: 4.0,
            event_rate: 300.0,
            duration_ms: 1000,
            edge_speed_floor: 0.02,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        SensorGeometry::new(self.geometry.width, self.geometry.height)?;
        self.framegen.validate()?;
        self.metrics.validate()?;
        self.dataset.ratios.validate()?;
        if self.dataset.frames_per_eye == 0 {
            anyhow::bail!("dataset.frames_per_eye must be at least 1");
        }
        if self.detect.box_sigma.is_nan() || self.detect.box_sigma <= 0.0 {
            anyhow::bail!("detect.box_sigma must be positive");
        }
        if let Some(c) = self.track.px_per_degree {
            if !(c.is_finite() && c > 0.0) {
                anyhow::bail!("track.px_per_degree must be positive, got {c}");
            }
        }
        if self.threads == Some(0) {
            anyhow::bail!("threads must be at least 1");
        }
        Ok(())
    }
}
