use super::{AgentState, Demonstration, FrameSnapshot};
use crate::error::{Error, Result};

/// Keeps every `source/target`-th frame starting at frame 0.
pub fn resample(demo: &Demonstration, target_hz: f64) -> Result<Demonstration> {
    if !(target_hz > 0.0) || !(demo.sample_rate_hz > 0.0) {
        return Err(Error::param("sample rates must be positive"));
    }
    let ratio = demo.sample_rate_hz / target_hz;
    let factor = ratio.round();
    if factor < 1.0 || (ratio - factor).abs() > 1e-9 {
        return Err(Error::param(format!(
            "cannot resample {} Hz to {target_hz} Hz: factor {ratio} is not a positive integer",
            demo.sample_rate_hz
        )));
    }
    let step = factor as usize;
    Ok(Demonstration {
        id: demo.id.clone(),
        frames: demo.frames.iter().step_by(step).cloned().collect(),
        sample_rate_hz: target_hz,
        roles: demo.roles.clone(),
    })
}

/// Drops frames rejected by `keep`, e.g. frames where play is not confined
/// to one half of the court.
pub fn filter_frames(demo: &Demonstration, keep: impl Fn(&FrameSnapshot) -> bool) -> Demonstration {
    Demonstration {
        frames: demo.frames.iter().filter(|f| keep(f)).cloned().collect(),
        ..demo.clone()
    }
}

/// Cuts fixed-length windows with stride `length * (1 - overlap)`. Windows
/// lie entirely inside their source; shorter demos contribute nothing.
/// Window ids are `<source id>#<offset>`.
pub fn window(demos: &[Demonstration], length: usize, overlap: f64) -> Result<Vec<Demonstration>> {
    if length < 2 {
        return Err(Error::param("window length must be at least 2"));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::param(format!("overlap {overlap} outside [0, 1)")));
    }
    let stride = ((length as f64 * (1.0 - overlap)).round() as usize).max(1);
    let mut out = Vec::new();
    for demo in demos {
        let mut start = 0;
        while start + length <= demo.len() {
            out.push(Demonstration {
                id: format!("{}#{start}", demo.id),
                frames: demo.frames[start..start + length].to_vec(),
                sample_rate_hz: demo.sample_rate_hz,
                roles: demo.roles.clone(),
            });
            start += stride;
        }
    }
    Ok(out)
}

/// Per-axis bounds of the raw coordinate frame (feet for a court, metres
/// for a pitch).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl NormalizationSpec {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let spec = Self {
            x_min,
            x_max,
            y_min,
            y_max,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// NBA court, feet.
    pub fn basketball() -> Self {
        Self::new(0.0, 94.0, 0.0, 50.0).unwrap()
    }

    /// Football pitch, metres.
    pub fn soccer() -> Self {
        Self::new(0.0, 105.0, 0.0, 68.0).unwrap()
    }

    /// Maps `[-1, 1]` onto itself.
    pub fn unit() -> Self {
        Self::new(-1.0, 1.0, -1.0, 1.0).unwrap()
    }

    /// Tightest bounds covering every position, padded when an axis is flat.
    pub fn fit(demos: &[Demonstration]) -> Result<Self> {
        let mut b = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
        for s in demos.iter().flat_map(|d| &d.frames).flat_map(|f| &f.states) {
            b[0] = b[0].min(s.x);
            b[1] = b[1].max(s.x);
            b[2] = b[2].min(s.y);
            b[3] = b[3].max(s.y);
        }
        if !b.iter().all(|v| v.is_finite()) {
            return Err(Error::data("no positions to fit normalization bounds"));
        }
        for axis in [0, 2] {
            if b[axis + 1] <= b[axis] {
                b[axis] -= 1.0;
                b[axis + 1] += 1.0;
            }
        }
        Self::new(b[0], b[1], b[2], b[3])
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_max > self.x_min
            && self.y_max > self.y_min;
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("degenerate normalization bounds {self:?}")))
        }
    }

    pub fn normalize_point(&self, s: AgentState) -> AgentState {
        AgentState::new(
            to_unit(s.x, self.x_min, self.x_max),
            to_unit(s.y, self.y_min, self.y_max),
        )
    }

    pub fn denormalize_point(&self, s: AgentState) -> AgentState {
        AgentState::new(
            from_unit(s.x, self.x_min, self.x_max),
            from_unit(s.y, self.y_min, self.y_max),
        )
    }

    pub fn denormalize_frame(&self, frame: &FrameSnapshot) -> FrameSnapshot {
        FrameSnapshot::new(frame.states.iter().map(|&s| self.denormalize_point(s)).collect())
    }
}

fn to_unit(v: f64, lo: f64, hi: f64) -> f64 {
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    (v - mid) / half
}

fn from_unit(v: f64, lo: f64, hi: f64) -> f64 {
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    v * half + mid
}

fn map_demo(demo: &Demonstration, f: impl Fn(AgentState) -> AgentState) -> Demonstration {
    Demonstration {
        frames: demo
            .frames
            .iter()
            .map(|fr| FrameSnapshot::new(fr.states.iter().map(|&s| f(s)).collect()))
            .collect(),
        ..demo.clone()
    }
}

/// Affine map of each axis from `[min, max]` to `[-1, 1]`.
pub fn normalize(demo: &Demonstration, spec: &NormalizationSpec) -> Result<Demonstration> {
    spec.validate()?;
    Ok(map_demo(demo, |s| spec.normalize_point(s)))
}

pub fn denormalize(demo: &Demonstration, spec: &NormalizationSpec) -> Result<Demonstration> {
    spec.validate()?;
    Ok(map_demo(demo, |s| spec.denormalize_point(s)))
}
