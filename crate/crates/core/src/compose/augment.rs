use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layout::Rect;
use super::raster::Raster;
use crate::error::{Error, Result};
use crate::media::Frame;

/// Group augmentation: one random resized crop, one flip decision and one
/// normalisation shared by every frame of a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    /// Range of the crop's area fraction.
    pub crop_scale: [f64; 2],
    pub hflip_prob: f64,
    /// Per-channel statistics on the `[0, 1]` intensity scale.
    pub normalize_mean: [f32; 3],
    pub normalize_std: [f32; 3],
    pub enabled: bool,
    /// Smallest admissible crop side in pixels (one patch).
    pub min_crop: usize,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            crop_scale: [0.7, 1.0],
            hflip_prob: 0.5,
            normalize_mean: [0.5; 3],
            normalize_std: [0.5; 3],
            enabled: false,
            min_crop: 14,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidConfig(format!("crop_scale [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1")));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::InvalidConfig(format!("hflip_prob {} not a probability", self.hflip_prob)));
        }
        if self.normalize_std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidConfig("normalize_std must be > 0".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn normalize(&self, v: f32, c: usize) -> f32 {
        (v / 255.0 - self.normalize_mean[c]) / self.normalize_std[c]
    }

    #[inline]
    pub fn denormalize(&self, v: f32, c: usize) -> f32 {
        (v * self.normalize_std[c] + self.normalize_mean[c]) * 255.0
    }

    pub fn to_frame(&self, raster: &Raster) -> Frame {
        let mut r = raster.clone();
        r.data.iter_mut().enumerate().for_each(|(i, v)| *v = self.denormalize(*v, i % 3));
        r.to_frame()
    }
}

/// Geometric parameters drawn for one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugParams {
    pub crop: Option<Rect>,
    pub flip: bool,
}

#[derive(Debug, Clone)]
pub struct AugmentedGroup {
    pub frames: Vec<Raster>,
    pub params: AugParams,
}

pub fn sample_params<R: Rng + ?Sized>(width: usize, height: usize, aug: &AugConfig, rng: &mut R) -> Result<AugParams> {
    if !aug.enabled {
        return Ok(AugParams { crop: None, flip: false });
    }
    let [lo, hi] = aug.crop_scale;
    let scale = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let side = scale.sqrt();
    let cw = ((width as f64 * side).round() as usize).clamp(1, width);
    let ch = ((height as f64 * side).round() as usize).clamp(1, height);
    if cw < aug.min_crop || ch < aug.min_crop {
        return Err(Error::DegenerateCrop { width: cw, height: ch, min: aug.min_crop });
    }
    let x = rng.random_range(0..=width - cw);
    let y = rng.random_range(0..=height - ch);
    let flip = rng.random_bool(aug.hflip_prob);
    Ok(AugParams { crop: Some(Rect { x, y, width: cw, height: ch }), flip })
}

/// Apply already-drawn parameters to one frame; output stays `width x height`.
pub fn apply(frame: &Frame, params: AugParams, aug: &AugConfig) -> Raster {
    let mut r = Raster::from_frame(frame);
    let (w, h) = (r.width, r.height);
    if let Some(rect) = params.crop {
        r = Raster::from_frame(&r.crop(rect).resize(w, h).to_frame());
    }
    if params.flip {
        r = r.hflip();
    }
    r.data.iter_mut().enumerate().for_each(|(i, v)| *v = aug.normalize(*v, i % 3));
    r
}

pub fn augment_group<R: Rng + ?Sized>(frames: &[Frame], aug: &AugConfig, rng: &mut R) -> Result<AugmentedGroup> {
    aug.validate()?;
    let Some(first) = frames.first() else {
        return Ok(AugmentedGroup { frames: vec![], params: AugParams { crop: None, flip: false } });
    };
    let dims = first.dimensions();
    if let Some(f) = frames.iter().find(|f| f.dimensions() != dims) {
        return Err(Error::SizeMismatch(format!("group frames differ: {:?} vs {:?}", dims, f.dimensions())));
    }
    let params = sample_params(dims.0 as usize, dims.1 as usize, aug, rng)?;
    Ok(AugmentedGroup { frames: frames.iter().map(|f| apply(f, params, aug)).collect(), params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn gradient_frame(w: u32, h: u32, salt: u32) -> Frame {
        Frame::from_fn(w, h, |x, y| image::Rgb([(x * 7 + salt) as u8, (y * 5) as u8, ((x + y + salt) % 256) as u8]))
    }

    #[test]
    fn disabled_is_plain_normalisation() {
        let aug = AugConfig { normalize_mean: [0.1, 0.2, 0.3], normalize_std: [0.5, 0.25, 2.0], ..Default::default() };
        let f = gradient_frame(9, 6, 3);
        let g = augment_group(std::slice::from_ref(&f), &aug, &mut stream(1, 0, 0)).unwrap();
        for (i, (&raw, &out)) in f.as_raw().iter().zip(&g.frames[0].data).enumerate() {
            let c = i % 3;
            assert_eq!(out, (raw as f32 / 255.0 - aug.normalize_mean[c]) / aug.normalize_std[c]);
        }
    }

    #[test]
    fn forced_flip_mirrors_columns() {
        let aug = AugConfig { enabled: true, crop_scale: [1.0, 1.0], hflip_prob: 1.0, min_crop: 1, ..Default::default() };
        let frames: Vec<Frame> = (0..3).map(|s| gradient_frame(8, 5, s)).collect();
        let g = augment_group(&frames, &aug, &mut stream(2, 0, 0)).unwrap();
        assert!(g.params.flip);
        for (src, out) in frames.iter().zip(&g.frames) {
            for y in 0..5 {
                for x in 0..8usize {
                    let p = src.get_pixel(x as u32, y as u32).0;
                    let q = out.pixel(7 - x, y as usize);
                    for c in 0..3 {
                        assert_eq!(q[c], aug.normalize(p[c] as f32, c));
                    }
                }
            }
        }
    }

    #[test]
    fn crop_smaller_than_patch_rejected() {
        let aug = AugConfig { enabled: true, crop_scale: [0.01, 0.01], min_crop: 14, ..Default::default() };
        let frames = vec![gradient_frame(56, 56, 0)];
        assert!(matches!(augment_group(&frames, &aug, &mut stream(0, 0, 0)), Err(Error::DegenerateCrop { .. })));
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let frames = vec![gradient_frame(8, 8, 0), gradient_frame(8, 9, 0)];
        assert!(matches!(
            augment_group(&frames, &AugConfig::default(), &mut stream(0, 0, 0)),
            Err(Error::SizeMismatch(_))
        ));
    }

    #[test]
    fn identical_frames_stay_identical() {
        let aug = AugConfig { enabled: true, ..Default::default() };
        let f = gradient_frame(64, 48, 9);
        let frames = vec![f.clone(); 5];
        for seed in 0..10 {
            let g = augment_group(&frames, &aug, &mut stream(seed, 0, 0)).unwrap();
            assert!(g.frames.windows(2).all(|w| w[0] == w[1]));
        }
    }
}
