use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Fps, Frame, VideoSource};
use crate::error::{Error, Result};
use crate::rng::{stream, streams};

pub const BACKGROUND: u8 = 16;
pub const FOREGROUND: u8 = 240;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    MovingDot,
    MovingSquare,
    Static,
}

impl std::str::FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moving-dot" => Ok(Pattern::MovingDot),
            "moving-square" => Ok(Pattern::MovingSquare),
            "static" => Ok(Pattern::Static),
            other => Err(Error::BadSpec(format!("unknown pattern {other:?}"))),
        }
    }
}

/// Parameters of a generated video: one bright object over a dark field,
/// moving with constant velocity and wrapping at the frame edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub pattern: Pattern,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    /// Pixels per frame, `[dx, dy]`.
    pub velocity: [f64; 2],
    pub object_size: usize,
    pub seed: u64,
    /// Object centre at frame 0; drawn from `seed` when absent.
    #[serde(default)]
    pub origin: Option<[f64; 2]>,
    /// Distance between I-frames when written as a frames directory.
    #[serde(default = "one")]
    pub iframe_interval: usize,
    #[serde(default)]
    pub fps: Fps,
}

fn one() -> usize {
    1
}

impl SynthSpec {
    pub fn new(pattern: Pattern, frame_count: usize, width: usize, height: usize) -> Self {
        Self {
            pattern,
            frame_count,
            width,
            height,
            velocity: [0.0, 0.0],
            object_size: (width.min(height) / 8).max(1),
            seed: 0,
            origin: None,
            iframe_interval: 1,
            fps: Fps::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frame_count == 0 {
            return Err(Error::BadSpec("width, height and frame_count must be positive".into()));
        }
        if self.object_size == 0 || self.object_size > self.width.min(self.height) {
            return Err(Error::BadSpec(format!(
                "object_size {} must be in [1, {}]",
                self.object_size,
                self.width.min(self.height)
            )));
        }
        if !self.velocity.iter().all(|v| v.is_finite()) {
            return Err(Error::BadSpec("velocity must be finite".into()));
        }
        if let Some(o) = self.origin {
            if !o.iter().all(|v| v.is_finite()) {
                return Err(Error::BadSpec("origin must be finite".into()));
            }
        }
        if self.iframe_interval == 0 {
            return Err(Error::BadSpec("iframe_interval must be >= 1".into()));
        }
        self.fps.validate().map_err(|e| Error::BadSpec(e.to_string()))?;
        Ok(())
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin.unwrap_or_else(|| {
            let mut rng = stream(self.seed, streams::SYNTH, 0);
            [rng.random_range(0.0..self.width as f64), rng.random_range(0.0..self.height as f64)]
        })
    }

    /// Object centre at frame `t`, wrapped into the frame.
    pub fn position(&self, t: usize) -> [f64; 2] {
        let [x0, y0] = self.origin();
        let (vx, vy) = match self.pattern {
            Pattern::Static => (0.0, 0.0),
            _ => (self.velocity[0], self.velocity[1]),
        };
        [
            (x0 + t as f64 * vx).rem_euclid(self.width as f64),
            (y0 + t as f64 * vy).rem_euclid(self.height as f64),
        ]
    }

    /// Does pixel `(x, y)` belong to the object at frame `t`?
    pub fn covers(&self, t: usize, x: usize, y: usize) -> bool {
        let [cx, cy] = self.position(t);
        let dx = wrapped_offset(x as f64 - cx, self.width as f64);
        let dy = wrapped_offset(y as f64 - cy, self.height as f64);
        let half = self.object_size as f64 / 2.0;
        match self.pattern {
            Pattern::MovingSquare => dx >= -half && dx < half && dy >= -half && dy < half,
            Pattern::MovingDot | Pattern::Static => dx * dx + dy * dy <= half * half,
        }
    }

    pub fn iframes(&self) -> Vec<usize> {
        (0..self.frame_count).step_by(self.iframe_interval).collect()
    }
}

/// Signed offset on a ring of circumference `len`, in `[-len/2, len/2)`.
fn wrapped_offset(d: f64, len: f64) -> f64 {
    (d + len / 2.0).rem_euclid(len) - len / 2.0
}

pub fn synth_video(spec: SynthSpec) -> Result<VideoSource> {
    spec.validate()?;
    Ok(VideoSource::Synthetic(spec))
}

/// Render frame `t`.
pub fn synth_frame(spec: &SynthSpec, t: usize) -> Frame {
    let (w, h) = (spec.width as u32, spec.height as u32);
    Frame::from_fn(w, h, |x, y| {
        let v = if spec.covers(t, x as usize, y as usize) { FOREGROUND } else { BACKGROUND };
        image::Rgb([v, v, v])
    })
}
