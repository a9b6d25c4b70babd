use serde::{Deserialize, Serialize};

use crate::compose::{DynImgLayout, Region};
use crate::dtns;
use crate::error::{Error, Result};
use crate::tensor::TokenKind;

/// How prompt patches get their `(h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialMode {
    /// Prompt grids are stretched onto the keyframe's coordinate range.
    #[default]
    Interpolated,
    /// The composed image is one big grid; prompt rows continue below the
    /// keyframe rows.
    WholeImage,
}

/// How prompt frames get their `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TCoord {
    /// `-n/2 .. -1, +1 .. +n/2` by chronological rank.
    #[default]
    Rank,
    /// Signed frame distance to the keyframe divided by the frame rate.
    FrameOffset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CoordOptions {
    pub spatial: SpatialMode,
    pub t_coord: TCoord,
}

/// One entry of an input sequence.
#[derive(Debug, Clone)]
pub enum Segment<'a> {
    Text(usize),
    DynImg {
        layout: &'a DynImgLayout,
        /// Seconds from the keyframe to each prompt frame; required for
        /// [`TCoord::FrameOffset`].
        prompt_times: Option<Vec<f64>>,
    },
}

impl<'a> Segment<'a> {
    pub fn image(layout: &'a DynImgLayout) -> Self {
        Segment::DynImg { layout, prompt_times: None }
    }
}

/// Per-token `(h, w, t, s)` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordGrid {
    pub coords: Vec<[f64; 4]>,
    pub kinds: Vec<TokenKind>,
    /// Which image (in sequence order) a visual token came from.
    pub image: Vec<Option<usize>>,
    pub spatial: SpatialMode,
}

pub const H: usize = 0;
pub const W: usize = 1;
pub const T: usize = 2;
pub const S: usize = 3;

/// Temporal coordinate of prompt `j` out of `n` by rank.
pub fn rank_time(j: usize, n: usize) -> f64 {
    let half = (n / 2) as f64;
    let j = j as f64;
    if j < half {
        j - half
    } else {
        j - half + 1.0
    }
}

/// Map index `i` of a grid with `len` cells onto `[0, target - 1]`.
fn stretch(i: usize, len: usize, target: usize) -> f64 {
    if len <= 1 {
        (target as f64 - 1.0) / 2.0
    } else {
        i as f64 * (target as f64 - 1.0) / (len as f64 - 1.0)
    }
}

impl CoordGrid {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn text(len: usize) -> Self {
        Self {
            coords: (0..len).map(|p| [p as f64; 4]).collect(),
            kinds: vec![TokenKind::Text; len],
            image: vec![None; len],
            spatial: SpatialMode::Interpolated,
        }
    }

    pub fn check_tokens(&self, tokens: usize) -> Result<()> {
        if tokens != self.len() {
            return Err(Error::GridMismatch(format!("{} coordinates for {tokens} tokens", self.len())));
        }
        Ok(())
    }

    /// Select tokens by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> CoordGrid {
        CoordGrid {
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            kinds: idx.iter().map(|&i| self.kinds[i]).collect(),
            image: idx.iter().map(|&i| self.image[i]).collect(),
            spatial: self.spatial,
        }
    }

    pub fn concat(parts: &[CoordGrid]) -> CoordGrid {
        let spatial = parts.iter().find(|g| g.image.iter().any(Option::is_some)).map(|g| g.spatial).unwrap_or_default();
        CoordGrid {
            coords: parts.iter().flat_map(|g| g.coords.iter().copied()).collect(),
            kinds: parts.iter().flat_map(|g| g.kinds.iter().copied()).collect(),
            image: parts.iter().flat_map(|g| g.image.iter().copied()).collect(),
            spatial,
        }
    }

    pub fn to_dtns(&self, meta: serde_json::Value) -> Result<dtns::Tensor> {
        let flat = self.coords.iter().flatten().copied().collect();
        let kinds: Vec<f32> = self.kinds.iter().map(|k| k.code()).collect();
        let mut meta = meta;
        if let Some(obj) = meta.as_object_mut() {
            obj.insert("kinds".into(), serde_json::json!(kinds));
            obj.insert("spatial".into(), serde_json::to_value(self.spatial)?);
        }
        Ok(dtns::Tensor::f64(&[self.len(), 4], &["token", "hwts"], flat)?.with_meta(meta))
    }
}

fn image_coords(layout: &DynImgLayout, s: f64, times: &[f64], opts: CoordOptions, index: usize) -> Result<CoordGrid> {
    let (rows, cols) = layout.patch_grid;
    let (kr, kc) = layout.keyframe_grid();
    let prompt_grid = layout.prompt_grid();
    if layout.prompt_regions.iter().any(|r| Some((r.height / layout.patch(), r.width / layout.patch())) != prompt_grid) {
        return Err(Error::GridMismatch("prompt regions differ in size".into()));
    }

    let mut coords = Vec::with_capacity(rows * cols);
    let mut kinds = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let region = layout.region_of_patch(r, c).ok_or_else(|| Error::GridMismatch(format!("patch ({r},{c}) outside layout")))?;
            let xyz = match region {
                Region::Keyframe => [r as f64, c as f64, 0.0, s],
                Region::Prompt(j) => {
                    let t = times[j];
                    match opts.spatial {
                        SpatialMode::WholeImage => [r as f64, c as f64, t, s],
                        SpatialMode::Interpolated => {
                            let rect = layout.prompt_regions[j].in_patches(layout.patch());
                            let (pr, pc) = prompt_grid.expect("prompt exists");
                            [stretch(r - rect.y, pr, kr), stretch(c - rect.x, pc, kc), t, s]
                        }
                    }
                }
            };
            coords.push(xyz);
            kinds.push(region.into());
        }
    }
    let n = coords.len();
    Ok(CoordGrid { coords, kinds, image: vec![Some(index); n], spatial: opts.spatial })
}

/// Coordinates for a mixed text/image sequence.
///
/// Text tokens take `(p, p, p, p)` for a running position `p`; an image
/// consumes a single position shared by all of its patches.
pub fn build_coords(segments: &[Segment<'_>], opts: CoordOptions) -> Result<CoordGrid> {
    let mut parts = Vec::with_capacity(segments.len());
    let mut pos = 0usize;
    let mut images = 0usize;
    for seg in segments {
        match seg {
            Segment::Text(n) => {
                let mut g = CoordGrid::text(*n);
                g.coords.iter_mut().for_each(|c| *c = [(pos + c[0] as usize) as f64; 4]);
                parts.push(g);
                pos += n;
            }
            Segment::DynImg { layout, prompt_times } => {
                let n = layout.n_prompts();
                let times: Vec<f64> = match (opts.t_coord, prompt_times) {
                    (TCoord::Rank, _) => (0..n).map(|j| rank_time(j, n)).collect(),
                    (TCoord::FrameOffset, Some(t)) if t.len() == n => t.clone(),
                    (TCoord::FrameOffset, _) => {
                        return Err(Error::GridMismatch(format!("frame-offset time needs {n} prompt times")))
                    }
                };
                parts.push(image_coords(layout, pos as f64, &times, opts, images)?);
                pos += 1;
                images += 1;
            }
        }
    }
    let mut grid = CoordGrid::concat(&parts);
    grid.spatial = opts.spatial;
    Ok(grid)
}

/// Seconds between the keyframe and each prompt frame.
pub fn prompt_times(group: &crate::media::FrameGroup, fps: crate::media::Fps) -> Vec<f64> {
    let rate = fps.as_f64();
    group.prompt_indices.iter().map(|&p| (p as f64 - group.keyframe_index as f64) / rate).collect()
}
