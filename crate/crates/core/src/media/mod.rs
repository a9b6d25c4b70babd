//! Frame inventory, keyframe selection and temporal-prompt sampling.
//!
//! A video is reduced to a [`VideoMeta`]: frame count, frame rate and the
//! indices of its intra-coded frames. Keyframes are picked evenly from the
//! I-frames and each keyframe collects `n` prompt frames, half from the gap
//! before it and half from the gap after it.

mod source;
mod synth;

pub use source::{decode_frames, decode_png_frame, probe, write_frames_dir, ExternalVideo, FramesDir, IndexFile, VideoSource};
pub use synth::{synth_frame, synth_video, Pattern, SynthSpec};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw decoded frame, 8-bit RGB.
pub type Frame = image::RgbImage;

/// Frame rate as a `[num, den]` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fps(pub u32, pub u32);

impl Fps {
    pub fn as_f64(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }

    pub fn validate(self) -> Result<Self> {
        if self.0 == 0 || self.1 == 0 {
            return Err(Error::Format(format!("fps must be positive, got {}/{}", self.0, self.1)));
        }
        Ok(self)
    }
}

impl Default for Fps {
    fn default() -> Self {
        Fps(25, 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub frame_count: usize,
    pub fps: Fps,
    pub iframe_indices: Vec<usize>,
    pub source_id: String,
}

impl VideoMeta {
    pub fn new(frame_count: usize, fps: Fps, iframe_indices: Vec<usize>, source_id: impl Into<String>) -> Result<Self> {
        let source_id = source_id.into();
        if frame_count == 0 {
            return Err(Error::EmptyVideo(source_id));
        }
        if let Some(bad) = iframe_indices.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Format(format!(
                "iframes must be strictly increasing, found {} before {}",
                bad[0], bad[1]
            )));
        }
        if let Some(&last) = iframe_indices.last() {
            if last >= frame_count {
                return Err(Error::IndexOutOfRange { index: last, frame_count });
            }
        }
        Ok(Self { frame_count, fps: fps.validate()?, iframe_indices, source_id })
    }

    /// Every frame is intra-coded; the fallback when no index is known.
    pub fn all_iframes(frame_count: usize, fps: Fps, source_id: impl Into<String>) -> Result<Self> {
        Self::new(frame_count, fps, (0..frame_count).collect(), source_id)
    }
}

/// One keyframe plus its chronologically ordered prompt frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameGroup {
    pub keyframe_index: usize,
    pub prompt_indices: Vec<usize>,
    pub group_rank: usize,
    /// Set when a side of the keyframe had too few frames and indices were
    /// duplicated or borrowed from a neighbour.
    pub boundary_clamped: bool,
}

impl FrameGroup {
    /// Keyframe followed by prompts, the order `compose` expects.
    pub fn frame_order(&self) -> Vec<usize> {
        std::iter::once(self.keyframe_index).chain(self.prompt_indices.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyframeSelection {
    pub indices: Vec<usize>,
    /// True when there were fewer I-frames than requested and the selection
    /// was taken uniformly over all frames instead.
    pub uniform_fallback: bool,
}

/// Endpoint-inclusive even spacing over `len` items: `round(j*(len-1)/(k-1))`.
fn even_positions(len: usize, k: usize) -> Vec<usize> {
    if k == 1 {
        return vec![len / 2];
    }
    let span = (len - 1) as u64;
    let denom = (k - 1) as u64;
    (0..k as u64).map(|j| ((2 * j * span + denom) / (2 * denom)) as usize).collect()
}

pub fn select_keyframes(meta: &VideoMeta, k: usize) -> Result<KeyframeSelection> {
    if k == 0 {
        return Err(Error::InvalidConfig("keyframe count must be >= 1".into()));
    }
    let m = meta.iframe_indices.len();
    if m >= k {
        let indices = even_positions(m, k).into_iter().map(|p| meta.iframe_indices[p]).collect();
        return Ok(KeyframeSelection { indices, uniform_fallback: false });
    }
    log::warn!(
        "{}: only {} I-frames for {} keyframes, sampling uniformly over {} frames",
        meta.source_id,
        m,
        k,
        meta.frame_count
    );
    let mut indices = even_positions(meta.frame_count, k);
    indices.dedup();
    Ok(KeyframeSelection { indices, uniform_fallback: true })
}

/// Half-open frame range `[start, end)`.
#[derive(Debug, Clone, Copy)]
struct Span {
    start: usize,
    end: usize,
}

impl Span {
    fn len(self) -> usize {
        self.end.saturating_sub(self.start)
    }
}

/// Draw `want` frames from `span`, preferring I-frames.
///
/// Returns the picks and whether duplication was needed.
fn fill_side<R: Rng + ?Sized>(
    meta: &VideoMeta,
    span: Span,
    want: usize,
    fallback: Option<usize>,
    rng: &mut R,
) -> (Vec<usize>, bool) {
    let iframes: Vec<usize> = meta
        .iframe_indices
        .iter()
        .copied()
        .filter(|&f| f >= span.start && f < span.end)
        .collect();

    if iframes.len() >= want {
        let mut picks: Vec<usize> =
            rand::seq::index::sample(rng, iframes.len(), want).into_iter().map(|p| iframes[p]).collect();
        picks.sort_unstable();
        return (picks, false);
    }

    let mut picks = iframes.clone();
    let others: Vec<usize> = (span.start..span.end).filter(|f| !iframes.contains(f)).collect();
    let needed = want - picks.len();
    let take = needed.min(others.len());
    picks.extend(rand::seq::index::sample(rng, others.len(), take).into_iter().map(|p| others[p]));
    picks.sort_unstable();

    if picks.len() == want {
        return (picks, false);
    }
    if picks.is_empty() {
        let nearest = fallback.expect("a video always has at least one frame");
        return (vec![nearest; want], true);
    }
    // Fewer distinct frames than slots: cycle through what exists.
    let distinct = picks.clone();
    for j in 0..want - distinct.len() {
        picks.push(distinct[j % distinct.len()]);
    }
    picks.sort_unstable();
    (picks, true)
}

/// Sample the `n` temporal-prompt frames of keyframe `i`.
pub fn select_prompts<R: Rng + ?Sized>(
    meta: &VideoMeta,
    keyframes: &[usize],
    i: usize,
    n: usize,
    rng: &mut R,
) -> Result<FrameGroup> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::BadArity(n));
    }
    let key = *keyframes
        .get(i)
        .ok_or_else(|| Error::InvalidConfig(format!("keyframe rank {i} out of {} keyframes", keyframes.len())))?;
    if key >= meta.frame_count {
        return Err(Error::IndexOutOfRange { index: key, frame_count: meta.frame_count });
    }

    let before = Span { start: if i == 0 { 0 } else { keyframes[i - 1] + 1 }, end: key };
    let after = Span {
        start: key + 1,
        end: if i + 1 == keyframes.len() { meta.frame_count } else { keyframes[i + 1] },
    };

    let left_neighbour = key.checked_sub(1);
    let right_neighbour = (key + 1 < meta.frame_count).then_some(key + 1);
    let nearest_before = left_neighbour.or(right_neighbour).or(Some(key));
    let nearest_after = right_neighbour.or(left_neighbour).or(Some(key));

    let half = n / 2;
    let (mut prompts, clamped_before) = fill_side(meta, before, half, nearest_before, rng);
    let (after_picks, clamped_after) = fill_side(meta, after, half, nearest_after, rng);
    prompts.extend(after_picks);
    prompts.sort_unstable();

    let clamped = clamped_before || clamped_after || before.len() == 0 || after.len() == 0;
    Ok(FrameGroup { keyframe_index: key, prompt_indices: prompts, group_rank: i, boundary_clamped: clamped })
}

/// Keyframes plus one prompt group per keyframe, each group drawing from its
/// own stream of `seed`.
pub fn plan_groups(meta: &VideoMeta, num_dynimg: usize, n_prompts: usize, seed: u64) -> Result<Vec<FrameGroup>> {
    let keys = select_keyframes(meta, num_dynimg)?;
    (0..keys.indices.len())
        .map(|i| {
            let mut rng = crate::rng::stream(seed, crate::rng::streams::PROMPTS, i as u64);
            select_prompts(meta, &keys.indices, i, n_prompts, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn meta(frames: usize, iframes: Vec<usize>) -> VideoMeta {
        VideoMeta::new(frames, Fps::default(), iframes, "test").unwrap()
    }

    #[test]
    fn keyframes_evenly_spaced_over_iframes() {
        let m = meta(300, (0..10).map(|j| j * 30).collect());
        let sel = select_keyframes(&m, 4).unwrap();
        assert_eq!(sel.indices, vec![0, 90, 180, 270]);
        assert!(!sel.uniform_fallback);
    }

    #[test]
    fn keyframes_equal_count() {
        let m = meta(30, vec![5, 10, 15, 20]);
        assert_eq!(select_keyframes(&m, 4).unwrap().indices, vec![5, 10, 15, 20]);
    }

    #[test]
    fn keyframes_fall_back_to_uniform() {
        let m = meta(40, vec![7]);
        let sel = select_keyframes(&m, 4).unwrap();
        assert_eq!(sel.indices, vec![0, 13, 26, 39]);
        assert!(sel.uniform_fallback);
    }

    #[test]
    fn single_keyframe_is_middle_iframe() {
        let m = meta(100, vec![0, 10, 20, 30, 40]);
        assert_eq!(select_keyframes(&m, 1).unwrap().indices, vec![20]);
    }

    #[test]
    fn prompts_forced_choice() {
        let m = meta(300, (0..10).map(|j| j * 30).collect());
        let keys = [0, 90, 180, 270];
        let g = select_prompts(&m, &keys, 1, 4, &mut stream(7, 0, 0)).unwrap();
        assert_eq!(g.prompt_indices, vec![30, 60, 120, 150]);
        assert_eq!(g.keyframe_index, 90);
        assert!(!g.boundary_clamped);
    }

    #[test]
    fn prompts_clamp_at_video_start() {
        let m = meta(300, (0..10).map(|j| j * 30).collect());
        let keys = [0, 90, 180, 270];
        let g = select_prompts(&m, &keys, 0, 4, &mut stream(7, 0, 0)).unwrap();
        assert!(g.boundary_clamped);
        assert_eq!(g.prompt_indices.len(), 4);
        assert!(!g.prompt_indices.contains(&0));
        assert_eq!(&g.prompt_indices[..2], &[1, 1]);
        assert!(g.prompt_indices[2..].iter().all(|&p| p == 30 || p == 60));
    }

    #[test]
    fn prompts_top_up_with_plain_frames() {
        let m = meta(100, vec![0, 40, 50, 99]);
        let keys = [40, 99];
        let g = select_prompts(&m, &keys, 0, 4, &mut stream(3, 0, 0)).unwrap();
        // before (0..40): only I-frame 0, topped up with one other frame
        assert!(g.prompt_indices[..2].contains(&0));
        assert!(g.prompt_indices[..2].iter().all(|&p| p < 40));
        assert!(g.prompt_indices[2..].iter().all(|&p| p > 40 && p < 99));
        assert!(!g.boundary_clamped);
    }

    #[test]
    fn odd_prompt_count_rejected() {
        let m = meta(10, vec![]);
        assert!(matches!(select_prompts(&m, &[5], 0, 3, &mut stream(0, 0, 0)), Err(Error::BadArity(3))));
        assert!(matches!(select_prompts(&m, &[5], 0, 0, &mut stream(0, 0, 0)), Err(Error::BadArity(0))));
    }

    #[test]
    fn meta_rejects_bad_index() {
        assert!(matches!(VideoMeta::new(0, Fps::default(), vec![], "x"), Err(Error::EmptyVideo(_))));
        assert!(VideoMeta::new(10, Fps::default(), vec![3, 3], "x").is_err());
        assert!(VideoMeta::new(10, Fps::default(), vec![10], "x").is_err());
    }
}
