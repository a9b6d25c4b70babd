//! Dynamic-image composition.
//!
//! A frame group becomes one raster: the keyframe fills the top square and
//! the prompt frames, shrunk, sit in a row beneath it in time order. Every
//! region edge falls on a patch boundary so a patch never mixes two frames.

mod augment;
mod layout;
mod raster;

pub use augment::{apply as apply_augmentation, augment_group, sample_params, AugConfig, AugParams, AugmentedGroup};
pub use layout::{plan_layout, DynImgLayout, LayoutConfig, Rect, Region};
pub use raster::Raster;

use rand::Rng;

use crate::error::{Error, Result};
use crate::media::{decode_frames, Frame, FrameGroup, VideoSource};
use crate::tensor::TokenBlock;

/// A composed raster plus the geometry it was built with.
#[derive(Debug, Clone)]
pub struct DynImg {
    pub raster: Raster,
    pub layout: DynImgLayout,
}

/// Place the keyframe and `n` prompt frames into `layout`.
pub fn compose(frames: &[Raster], layout: &DynImgLayout) -> Result<DynImg> {
    let expected = 1 + layout.n_prompts();
    if frames.len() != expected {
        return Err(Error::ArityMismatch { expected, got: frames.len() });
    }
    let (h, w) = layout.total_size;
    let mut raster = Raster::new(w, h);
    let regions = std::iter::once(layout.keyframe_region).chain(layout.prompt_regions.iter().copied());
    for (frame, rect) in frames.iter().zip(regions) {
        raster.blit(&frame.resize(rect.width, rect.height), rect.x, rect.y);
    }
    Ok(DynImg { raster, layout: layout.clone() })
}

/// Split the raster into row-major patches of `patch * patch * 3` values.
pub fn patchify(raster: &Raster, layout: &DynImgLayout) -> Result<TokenBlock> {
    let (h, w) = layout.total_size;
    if raster.width != w || raster.height != h {
        return Err(Error::SizeMismatch(format!("raster {}x{} vs layout {w}x{h}", raster.width, raster.height)));
    }
    let p = layout.patch();
    let (rows, cols) = layout.patch_grid;
    let dim = p * p * 3;
    let mut values = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for dy in 0..p {
                let start = ((r * p + dy) * w + c * p) * 3;
                values.extend_from_slice(&raster.data[start..start + p * 3]);
            }
        }
    }
    TokenBlock::new(rows * cols, dim, values, layout.labels())?.with_grid([1, rows, cols])
}

/// Inverse of [`patchify`].
pub fn reassemble(block: &TokenBlock, layout: &DynImgLayout) -> Result<Raster> {
    let p = layout.patch();
    let (rows, cols) = layout.patch_grid;
    if block.tokens != rows * cols || block.dim != p * p * 3 {
        return Err(Error::SizeMismatch(format!(
            "block {}x{} does not match {rows}x{cols} patches of {p}px",
            block.tokens, block.dim
        )));
    }
    let (h, w) = layout.total_size;
    let mut raster = Raster::new(w, h);
    for r in 0..rows {
        for c in 0..cols {
            let patch = block.row(r * cols + c);
            for dy in 0..p {
                let dst = ((r * p + dy) * w + c * p) * 3;
                raster.data[dst..dst + p * 3].copy_from_slice(&patch[dy * p * 3..(dy + 1) * p * 3]);
            }
        }
    }
    Ok(raster)
}

/// Resize every frame to the keyframe's square so a group shares one size.
pub fn to_common_size(frames: &[Frame], side: usize) -> Vec<Frame> {
    frames
        .iter()
        .map(|f| {
            if f.width() as usize == side && f.height() as usize == side {
                f.clone()
            } else {
                Raster::from_frame(f).resize(side, side).to_frame()
            }
        })
        .collect()
}

/// Decode a group, augment it jointly and compose it.
pub fn build_dynimg<R: Rng + ?Sized>(
    source: &VideoSource,
    group: &FrameGroup,
    layout: &DynImgLayout,
    aug: &AugConfig,
    rng: &mut R,
) -> Result<(DynImg, AugParams)> {
    let mut order = group.frame_order();
    order.truncate(1 + layout.n_prompts());
    if order.len() != 1 + layout.n_prompts() {
        return Err(Error::ArityMismatch { expected: 1 + layout.n_prompts(), got: order.len() });
    }
    let frames = to_common_size(&decode_frames(source, &order)?, layout.config.keyframe_size);
    let augmented = augment_group(&frames, aug, rng)?;
    Ok((compose(&augmented.frames, layout)?, augmented.params))
}
