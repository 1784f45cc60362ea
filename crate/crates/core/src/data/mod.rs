//! Trajectory data: domain types, CSV ingestion, preprocessing, synthetic
//! scenarios and dataset splits.

mod ingest;
mod manifest;
mod preprocess;
mod split;
mod synthetic;

pub use ingest::{ingest, ingest_reader, write_csv, IngestReport};
pub use manifest::DatasetManifest;
pub use preprocess::{denormalize, filter_frames, normalize, resample, window, NormalizationSpec};
pub use split::{hash_bucket, split_by_hash, split_by_index, Split, SplitAssignment};
pub use synthetic::{generate_synthetic, leader_follower_targets, Scenario, SyntheticSpec};

use crate::error::{Error, Result};

/// Position of one agent in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &AgentState) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// All agents at one instant, in storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSnapshot {
    pub states: Vec<AgentState>,
}

impl FrameSnapshot {
    pub fn new(states: Vec<AgentState>) -> Self {
        Self { states }
    }

    pub fn from_xy(points: &[[f64; 2]]) -> Self {
        Self::new(points.iter().map(|p| AgentState::new(p[0], p[1])).collect())
    }

    pub fn num_agents(&self) -> usize {
        self.states.len()
    }

    /// Row-major `[K, 2]` coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.states.iter().flat_map(|s| [s.x, s.y]).collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        Self::new(
            flat.chunks_exact(2)
                .map(|c| AgentState::new(c[0], c[1]))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentRole {
    Offense,
    Defense,
    Ball,
}

/// One game segment: `T` frames of `K` agents.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub id: String,
    pub frames: Vec<FrameSnapshot>,
    pub sample_rate_hz: f64,
    pub roles: Option<Vec<AgentRole>>,
}

impl Demonstration {
    pub fn new(id: impl Into<String>, frames: Vec<FrameSnapshot>, sample_rate_hz: f64) -> Self {
        Self {
            id: id.into(),
            frames,
            sample_rate_hz,
            roles: None,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn num_agents(&self) -> usize {
        self.frames.first().map_or(0, |f| f.num_agents())
    }

    /// Checks constant K >= 1, finite positions and at least `min_len` frames.
    pub fn validate(&self, min_len: usize) -> Result<()> {
        if self.frames.len() < min_len {
            return Err(Error::data(format!(
                "demo {} has {} frames, need at least {min_len}",
                self.id,
                self.frames.len()
            )));
        }
        let k = self.num_agents();
        if k == 0 {
            return Err(Error::EmptyFrame);
        }
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.num_agents() != k {
                return Err(Error::data(format!(
                    "demo {} frame {t} has {} agents, expected {k}",
                    self.id,
                    frame.num_agents()
                )));
            }
            if frame.states.iter().any(|s| !s.x.is_finite() || !s.y.is_finite()) {
                return Err(Error::data(format!(
                    "demo {} frame {t} has a non-finite position",
                    self.id
                )));
            }
        }
        Ok(())
    }
}
