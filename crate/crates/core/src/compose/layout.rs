use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TokenKind;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    /// Side of the square keyframe region in pixels.
    pub keyframe_size: usize,
    pub patch: usize,
    pub n_prompts: usize,
    /// Height of the prompt strip; `None` means `keyframe_size / n_prompts`
    /// rounded down to a patch multiple, which keeps prompt frames square.
    pub prompt_strip_height: Option<usize>,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self { keyframe_size: 336, patch: 14, n_prompts: 4, prompt_strip_height: None }
    }
}

impl LayoutConfig {
    pub fn new(keyframe_size: usize, patch: usize, n_prompts: usize) -> Self {
        Self { keyframe_size, patch, n_prompts, prompt_strip_height: None }
    }
}

/// Pixel rectangle; `x`, `y` are the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    /// The same rectangle in patch units; exact only for aligned rects.
    pub fn in_patches(&self, patch: usize) -> Rect {
        Rect { x: self.x / patch, y: self.y / patch, width: self.width / patch, height: self.height / patch }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Keyframe,
    Prompt(usize),
}

impl From<Region> for TokenKind {
    fn from(r: Region) -> Self {
        match r {
            Region::Keyframe => TokenKind::Keyframe,
            Region::Prompt(j) => TokenKind::Prompt(j),
        }
    }
}

/// Geometry of one composed image: the keyframe on top, `n` equal prompt
/// frames in a single row beneath it, left to right in time order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DynImgLayout {
    pub config: LayoutConfig,
    /// `(height, width)` in pixels.
    pub total_size: (usize, usize),
    pub keyframe_region: Rect,
    pub prompt_regions: Vec<Rect>,
    /// `(rows, cols)` in patches.
    pub patch_grid: (usize, usize),
}

fn violation(dimension: &'static str, detail: String) -> Error {
    Error::PatchBoundaryViolation { dimension, detail }
}

pub fn plan_layout(config: &LayoutConfig) -> Result<DynImgLayout> {
    let LayoutConfig { keyframe_size: k, patch: p, n_prompts: n, .. } = *config;
    if p == 0 {
        return Err(violation("patch", "patch size must be positive".into()));
    }
    if k == 0 || k % p != 0 {
        return Err(violation("keyframe_size", format!("{k} is not a positive multiple of patch {p}")));
    }
    let keyframe_region = Rect { x: 0, y: 0, width: k, height: k };

    let mut prompt_regions = Vec::with_capacity(n);
    let mut strip = 0;
    if n > 0 {
        if k % n != 0 {
            return Err(violation("n_prompts", format!("keyframe width {k} does not split into {n} equal frames")));
        }
        let width = k / n;
        if width % p != 0 {
            return Err(violation("prompt_width", format!("prompt width {width} is not a multiple of patch {p}")));
        }
        strip = config.prompt_strip_height.unwrap_or(width / p * p);
        if strip < p || strip % p != 0 {
            return Err(violation(
                "prompt_strip_height",
                format!("strip height {strip} must be a positive multiple of patch {p}"),
            ));
        }
        prompt_regions.extend((0..n).map(|j| Rect { x: j * width, y: k, width, height: strip }));
    }

    let total = (k + strip, k);
    Ok(DynImgLayout {
        config: config.clone(),
        total_size: total,
        keyframe_region,
        prompt_regions,
        patch_grid: (total.0 / p, total.1 / p),
    })
}

impl DynImgLayout {
    pub fn patch(&self) -> usize {
        self.config.patch
    }

    pub fn n_prompts(&self) -> usize {
        self.prompt_regions.len()
    }

    pub fn num_patches(&self) -> usize {
        self.patch_grid.0 * self.patch_grid.1
    }

    /// `(rows, cols)` of the keyframe in patches.
    pub fn keyframe_grid(&self) -> (usize, usize) {
        let r = self.keyframe_region.in_patches(self.patch());
        (r.height, r.width)
    }

    /// `(rows, cols)` of each prompt frame in patches.
    pub fn prompt_grid(&self) -> Option<(usize, usize)> {
        self.prompt_regions.first().map(|r| {
            let r = r.in_patches(self.patch());
            (r.height, r.width)
        })
    }

    pub fn region_at_pixel(&self, x: usize, y: usize) -> Option<Region> {
        if self.keyframe_region.contains(x, y) {
            return Some(Region::Keyframe);
        }
        self.prompt_regions.iter().position(|r| r.contains(x, y)).map(Region::Prompt)
    }

    pub fn region_of_patch(&self, row: usize, col: usize) -> Option<Region> {
        let p = self.patch();
        self.region_at_pixel(col * p, row * p)
    }

    pub fn region_rect(&self, region: Region) -> Rect {
        match region {
            Region::Keyframe => self.keyframe_region,
            Region::Prompt(j) => self.prompt_regions[j],
        }
    }

    /// Row-major labels over the full patch grid.
    pub fn labels(&self) -> Vec<TokenKind> {
        let (rows, cols) = self.patch_grid;
        (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .map(|(r, c)| self.region_of_patch(r, c).expect("layout tiles the image").into())
            .collect()
    }

    /// Token indices (row-major) belonging to `region`.
    pub fn tokens_of(&self, region: Region) -> Vec<usize> {
        let want: TokenKind = region.into();
        self.labels().iter().enumerate().filter(|(_, &k)| k == want).map(|(i, _)| i).collect()
    }

    /// Patches whose pixels fall in more than one region. Always empty for a
    /// planned layout; exposed for audits.
    pub fn straddling_patches(&self) -> Vec<(usize, usize)> {
        let p = self.patch();
        let (rows, cols) = self.patch_grid;
        let mut out = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let first = self.region_at_pixel(c * p, r * p);
                let uniform = (0..p).all(|dy| (0..p).all(|dx| self.region_at_pixel(c * p + dx, r * p + dy) == first));
                if first.is_none() || !uniform {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// Pixels not covered by exactly one region.
    pub fn tiling_defects(&self) -> usize {
        let (h, w) = self.total_size;
        let regions: Vec<Rect> = std::iter::once(self.keyframe_region).chain(self.prompt_regions.iter().copied()).collect();
        let mut defects = 0;
        for y in 0..h {
            for x in 0..w {
                if regions.iter().filter(|r| r.contains(x, y)).count() != 1 {
                    defects += 1;
                }
            }
        }
        defects + regions.iter().filter(|r| r.x + r.width > w || r.y + r.height > h).count()
    }

    /// JSON description with regions in both pixel and patch units.
    pub fn describe(&self) -> serde_json::Value {
        let p = self.patch();
        serde_json::json!({
            "total_size": { "height": self.total_size.0, "width": self.total_size.1 },
            "patch_grid": { "rows": self.patch_grid.0, "cols": self.patch_grid.1 },
            "keyframe": { "pixels": self.keyframe_region, "patches": self.keyframe_region.in_patches(p) },
            "prompts": self.prompt_regions.iter().map(|r| serde_json::json!({
                "pixels": r, "patches": r.in_patches(p)
            })).collect::<Vec<_>>(),
            "config": self.config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout() {
        let l = plan_layout(&LayoutConfig::new(336, 14, 4)).unwrap();
        assert_eq!(l.total_size, (420, 336));
        assert_eq!(l.keyframe_grid(), (24, 24));
        assert_eq!(l.prompt_grid(), Some((6, 6)));
        assert_eq!(l.patch_grid, (30, 24));
    }

    #[test]
    fn six_prompts() {
        let l = plan_layout(&LayoutConfig::new(336, 14, 6)).unwrap();
        assert_eq!(l.prompt_regions[0].width, 56);
        assert_eq!(l.prompt_grid(), Some((4, 4)));
        assert_eq!(l.patch_grid, (28, 24));
    }

    #[test]
    fn five_prompts_violate() {
        let err = plan_layout(&LayoutConfig::new(336, 14, 5)).unwrap_err();
        assert!(matches!(err, Error::PatchBoundaryViolation { dimension: "n_prompts", .. }));
    }

    #[test]
    fn other_violations_name_dimension() {
        let e = plan_layout(&LayoutConfig::new(330, 14, 4)).unwrap_err();
        assert!(matches!(e, Error::PatchBoundaryViolation { dimension: "keyframe_size", .. }));
        let e = plan_layout(&LayoutConfig::new(336, 14, 16)).unwrap_err();
        assert!(matches!(e, Error::PatchBoundaryViolation { dimension: "prompt_width", .. }));
        let mut c = LayoutConfig::new(336, 14, 4);
        c.prompt_strip_height = Some(20);
        let e = plan_layout(&c).unwrap_err();
        assert!(matches!(e, Error::PatchBoundaryViolation { dimension: "prompt_strip_height", .. }));
    }

    #[test]
    fn explicit_strip_height() {
        let mut c = LayoutConfig::new(336, 14, 4);
        c.prompt_strip_height = Some(28);
        let l = plan_layout(&c).unwrap();
        assert_eq!(l.total_size, (364, 336));
        assert_eq!(l.prompt_grid(), Some((2, 6)));
        assert!(l.straddling_patches().is_empty());
    }

    #[test]
    fn patch_labels() {
        let l = plan_layout(&LayoutConfig::new(336, 14, 4)).unwrap();
        assert_eq!(l.region_of_patch(25, 3), Some(Region::Prompt(0)));
        assert_eq!(l.region_of_patch(29, 23), Some(Region::Prompt(3)));
        assert_eq!(l.region_of_patch(23, 23), Some(Region::Keyframe));
        let labels = l.labels();
        assert_eq!(labels.len(), 720);
        assert_eq!(labels.iter().filter(|k| **k == TokenKind::Keyframe).count(), 576);
    }

    #[test]
    fn no_prompts_is_keyframe_only() {
        let l = plan_layout(&LayoutConfig::new(56, 7, 0)).unwrap();
        assert_eq!(l.total_size, (56, 56));
        assert!(l.prompt_grid().is_none());
    }
}
