//! Synthetic classification tasks built from moving-dot clips.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{Fusion, Sample, VisualInput};
use crate::compose::{augment_group, build_dynimg, patchify, plan_layout, to_common_size, AugConfig, DynImgLayout, LayoutConfig};
use crate::error::{Error, Result};
use crate::media::{decode_frames, plan_groups, probe, synth_video, FrameGroup, Pattern, SynthSpec};
use crate::rng::{self, streams};
use crate::rope::prompt_times;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Which way the dot moves: right, left, down, up.
    #[default]
    #[serde(rename = "direction-4way")]
    Direction4way,
    /// Label 1 when the dot moves at all.
    StaticVsMoving,
}

impl Task {
    pub fn classes(self) -> usize {
        match self {
            Task::Direction4way => 4,
            Task::StaticVsMoving => 2,
        }
    }

    /// Question token ids from [`super::model::VOCAB`].
    pub fn question(self) -> Vec<usize> {
        match self {
            Task::Direction4way => vec![1, 2, 4],
            Task::StaticVsMoving => vec![1, 3, 4],
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direction-4way" => Ok(Task::Direction4way),
            "static-vs-moving" => Ok(Task::StaticVsMoving),
            other => Err(Error::InvalidConfig(format!("unknown task {other:?}"))),
        }
    }
}

/// Shape of the generated clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipConfig {
    pub frame_count: usize,
    /// Square frame side in pixels.
    pub size: usize,
    /// Pixels per frame, drawn uniformly from this range.
    pub speed: [f64; 2],
    /// Dot diameter, drawn uniformly from this inclusive range.
    pub object_size: [usize; 2],
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { frame_count: 16, size: 56, speed: [1.5, 2.5], object_size: [6, 10] }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.speed;
        let [smin, smax] = self.object_size;
        if !(lo > 0.0 && lo <= hi) || smin == 0 || smin > smax || self.frame_count < 2 {
            return Err(Error::InvalidConfig(format!("bad clip config {self:?}")));
        }
        let travel = hi * (self.frame_count - 1) as f64;
        if travel + smax as f64 + 2.0 > self.size as f64 {
            return Err(Error::InvalidConfig(format!(
                "a dot moving {travel:.1}px does not fit inside {}px without wrapping",
                self.size
            )));
        }
        Ok(())
    }
}

/// Fold a per-item index into a run seed.
pub fn mix(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ index
}

pub const DIRECTIONS: [[f64; 2]; 4] = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];

#[derive(Debug, Clone)]
pub struct Clip {
    pub spec: SynthSpec,
    pub label: usize,
}

/// Clip `index` of a task; the trajectory never wraps around the frame.
pub fn sample_clip(task: Task, cfg: &ClipConfig, seed: u64, index: u64) -> Result<Clip> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, streams::DATA, index);
    let (label, moving) = match task {
        Task::Direction4way => (rng.random_range(0..4), true),
        Task::StaticVsMoving => {
            let moving = rng.random_bool(0.5);
            (moving as usize, moving)
        }
    };
    let dir = DIRECTIONS[if task == Task::Direction4way { label } else { rng.random_range(0..4) }];
    let [lo, hi] = cfg.speed;
    let speed = if moving { if lo < hi { rng.random_range(lo..=hi) } else { lo } } else { 0.0 };
    let size = rng.random_range(cfg.object_size[0]..=cfg.object_size[1]);
    let margin = size as f64 / 2.0 + 1.0;
    let travel = speed * (cfg.frame_count - 1) as f64;
    let side = cfg.size as f64;
    // start far enough from the leading edge that the whole path stays inside
    let axis = |d: f64, rng: &mut rng::StreamRng| {
        let (lo, hi) = match d {
            d if d > 0.0 => (margin, side - margin - travel),
            d if d < 0.0 => (margin + travel, side - margin),
            _ => (margin, side - margin),
        };
        rng.random_range(lo..=hi)
    };
    let origin = [axis(dir[0], &mut rng), axis(dir[1], &mut rng)];
    let mut spec = SynthSpec::new(Pattern::MovingDot, cfg.frame_count, cfg.size, cfg.size);
    spec.velocity = [dir[0] * speed, dir[1] * speed];
    spec.object_size = size;
    spec.origin = Some(origin);
    spec.seed = mix(seed, index);
    Ok(Clip { spec, label })
}

/// The same dot parked where the moving one sits at `keyframe`.
pub fn static_control(clip: &Clip, keyframe: usize) -> Clip {
    let mut spec = clip.spec.clone();
    spec.origin = Some(clip.spec.position(keyframe));
    spec.velocity = [0.0, 0.0];
    Clip { spec, label: clip.label }
}

/// Everything needed to turn clips into model inputs.
#[derive(Debug, Clone)]
pub struct SampleBuilder {
    pub layout: DynImgLayout,
    pub frame_layout: DynImgLayout,
    pub fusion: Fusion,
    pub aug: AugConfig,
    pub num_dynimg: usize,
    pub seed: u64,
}

impl SampleBuilder {
    pub fn new(layout: &LayoutConfig, fusion: Fusion, aug: &AugConfig, num_dynimg: usize, seed: u64) -> Result<Self> {
        aug.validate()?;
        let frame_layout = plan_layout(&LayoutConfig { n_prompts: 0, prompt_strip_height: None, ..layout.clone() })?;
        Ok(Self { layout: plan_layout(layout)?, frame_layout, fusion, aug: aug.clone(), num_dynimg, seed })
    }

    pub fn groups(&self, clip: &Clip, index: u64) -> Result<Vec<FrameGroup>> {
        let video = synth_video(clip.spec.clone())?;
        plan_groups(&probe(&video)?, self.num_dynimg, self.layout.n_prompts(), mix(self.seed, index))
    }

    /// Model input for one clip; `index` keys the prompt and augmentation draws.
    pub fn build(&self, clip: &Clip, task: Task, index: u64) -> Result<(Sample, Vec<FrameGroup>)> {
        let video = synth_video(clip.spec.clone())?;
        let meta = probe(&video)?;
        let groups = plan_groups(&meta, self.num_dynimg, self.layout.n_prompts(), mix(self.seed, index))?;
        let mut images = Vec::with_capacity(groups.len());
        let mut times = Vec::with_capacity(groups.len());
        for (g, group) in groups.iter().enumerate() {
            let mut rng = rng::stream(self.seed, streams::AUGMENT, index.wrapping_mul(64) + g as u64);
            images.push(match self.fusion {
                Fusion::BeforeEncoder => {
                    let (img, _) = build_dynimg(&video, group, &self.layout, &self.aug, &mut rng)?;
                    VisualInput::Composed(patchify(&img.raster, &self.layout)?)
                }
                Fusion::AfterEncoder => {
                    let mut order = group.frame_order();
                    order.truncate(1 + self.layout.n_prompts());
                    let frames = to_common_size(&decode_frames(&video, &order)?, self.layout.config.keyframe_size);
                    let aug = augment_group(&frames, &self.aug, &mut rng)?;
                    VisualInput::Frames(aug.frames.iter().map(|f| patchify(f, &self.frame_layout)).collect::<Result<_>>()?)
                }
            });
            times.push(prompt_times(group, meta.fps));
        }
        Ok((Sample { images, prompt_times: times, text: task.question(), label: clip.label }, groups))
    }
}
