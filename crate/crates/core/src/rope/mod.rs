//! Rotary position embedding over `(h, w, t, s)` coordinates.
//!
//! Each feature pair `(q1, q2)` is rotated by an angle built from the token's
//! coordinates. In the *merge* variant the angle of pair `i` is the weighted
//! sum `h*θh[i] + w*θw[i] + t*θt[i] + s*θs[i]`; in the *split* variant pairs
//! are dealt round-robin to one coordinate each. `θs[i] = base^(-2i/d)` is
//! fixed. `θh`, `θw`, `θt` are either copies of `θs` or trainable vectors that
//! start at exactly zero, in which case the embedding starts out identical to
//! ordinary 1D rotary embedding over `s`.

mod coords;

pub use coords::{
    build_coords, prompt_times, rank_time, CoordGrid, CoordOptions, Segment, SpatialMode, TCoord, H, S, T, W,
};

use serde::{Deserialize, Serialize};

use crate::dtns;
use crate::error::{Error, Result};
use crate::tensor::TokenBlock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoordMode {
    #[serde(rename = "1d")]
    OneD,
    #[serde(rename = "3d")]
    ThreeD,
    #[serde(rename = "4d")]
    FourD,
}

impl CoordMode {
    /// Coordinate axes in use, in `(h, w, t, s)` order.
    pub fn dims(self) -> &'static [usize] {
        match self {
            CoordMode::OneD => &[S],
            CoordMode::ThreeD => &[H, W, S],
            CoordMode::FourD => &[H, W, T, S],
        }
    }

    pub fn spatial(self) -> SpatialMode {
        match self {
            CoordMode::ThreeD => SpatialMode::WholeImage,
            _ => SpatialMode::Interpolated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Merge,
    Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThetaMode {
    Fixed,
    Trainable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RopeConfig {
    pub coord_mode: CoordMode,
    pub variant: Variant,
    pub theta_mode: ThetaMode,
    pub t_coord: TCoord,
    pub base: f64,
}

impl Default for RopeConfig {
    fn default() -> Self {
        Self {
            coord_mode: CoordMode::FourD,
            variant: Variant::Merge,
            theta_mode: ThetaMode::Trainable,
            t_coord: TCoord::Rank,
            base: 10000.0,
        }
    }
}

impl RopeConfig {
    pub fn one_d() -> Self {
        Self { coord_mode: CoordMode::OneD, theta_mode: ThetaMode::Fixed, ..Default::default() }
    }

    /// The seven position-embedding settings compared in the ablation table,
    /// top to bottom.
    pub fn ablation_rows() -> Vec<(&'static str, RopeConfig)> {
        use CoordMode::*;
        use ThetaMode::*;
        use Variant::*;
        let row = |coord_mode, variant, theta_mode| RopeConfig { coord_mode, variant, theta_mode, ..Default::default() };
        vec![
            ("1D (S)", RopeConfig::one_d()),
            ("3D (H,W,S) split fixed", row(ThreeD, Split, Fixed)),
            ("3D (H,W,S) split trainable", row(ThreeD, Split, Trainable)),
            ("3D (H,W,S) merge trainable", row(ThreeD, Merge, Trainable)),
            ("4D (H,W,T,S) split fixed", row(FourD, Split, Fixed)),
            ("4D (H,W,T,S) split trainable", row(FourD, Split, Trainable)),
            ("4D (H,W,T,S) merge trainable", row(FourD, Merge, Trainable)),
        ]
    }

    pub fn coord_options(&self) -> CoordOptions {
        CoordOptions { spatial: self.coord_mode.spatial(), t_coord: self.t_coord }
    }

    pub fn describe(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("plain data")
    }
}

/// Per-pair rotation frequencies for one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaSchedule {
    pub head_dim: usize,
    pub config: RopeConfig,
    pub theta_s: Vec<f64>,
    /// `[θh, θw, θt]`, each one value per pair.
    pub trainable: [Vec<f64>; 3],
}

impl ThetaSchedule {
    pub fn new(head_dim: usize, config: RopeConfig) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::DimMismatch(format!("head_dim {head_dim} must be even and positive")));
        }
        let pairs = head_dim / 2;
        if config.variant == Variant::Split && config.coord_mode == CoordMode::FourD && !head_dim.is_multiple_of(8) {
            return Err(Error::DimMismatch(format!("split 4D needs head_dim divisible by 8, got {head_dim}")));
        }
        if config.variant == Variant::Split && pairs < config.coord_mode.dims().len() {
            return Err(Error::DimMismatch(format!("{pairs} pairs cannot cover {:?}", config.coord_mode)));
        }
        if !(config.base > 1.0) {
            return Err(Error::InvalidConfig(format!("rope base {} must exceed 1", config.base)));
        }
        let theta_s: Vec<f64> =
            (0..pairs).map(|i| config.base.powf(-2.0 * i as f64 / head_dim as f64)).collect();
        let init = match config.theta_mode {
            ThetaMode::Fixed => theta_s.clone(),
            ThetaMode::Trainable => vec![0.0; pairs],
        };
        Ok(Self { head_dim, config, theta_s, trainable: [init.clone(), init.clone(), init] })
    }

    pub fn pairs(&self) -> usize {
        self.head_dim / 2
    }

    pub fn is_trainable(&self) -> bool {
        self.config.theta_mode == ThetaMode::Trainable
    }

    /// Frequency vector for coordinate axis `dim` (`H`, `W`, `T` or `S`).
    pub fn theta(&self, dim: usize) -> &[f64] {
        match dim {
            S => &self.theta_s,
            d => &self.trainable[d],
        }
    }

    /// Which axis drives pair `i`; `None` in the merge variant (all do).
    pub fn split_owner(&self, i: usize) -> Option<usize> {
        match self.config.variant {
            Variant::Merge => None,
            Variant::Split => {
                let dims = self.config.coord_mode.dims();
                Some(dims[i % dims.len()])
            }
        }
    }

    /// `[‖θh‖, ‖θw‖, ‖θt‖]`.
    pub fn norms(&self) -> [f64; 3] {
        self.trainable.clone().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    /// New schedule with `θ -= lr * grad` on the trainable axes.
    pub fn descend(&self, grads: &[Vec<f64>; 3], lr: f64) -> Result<Self> {
        if !self.is_trainable() {
            return Err(Error::NotTrainable);
        }
        let mut next = self.clone();
        for (theta, g) in next.trainable.iter_mut().zip(grads) {
            if g.len() != theta.len() {
                return Err(Error::ShapeMismatch(format!("{} gradients for {} pairs", g.len(), theta.len())));
            }
            theta.iter_mut().zip(g).for_each(|(t, g)| *t -= lr * g);
        }
        Ok(next)
    }
}

/// Rotation angle for every `(token, pair)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationAngles {
    pub tokens: usize,
    pub pairs: usize,
    pub values: Vec<f64>,
}

impl RotationAngles {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.pairs..(t + 1) * self.pairs]
    }

    pub fn to_dtns(&self, meta: serde_json::Value) -> Result<dtns::Tensor> {
        Ok(dtns::Tensor::f64(&[self.tokens, self.pairs], &["token", "pair"], self.values.clone())?.with_meta(meta))
    }
}

pub fn angles(grid: &CoordGrid, sched: &ThetaSchedule) -> Result<RotationAngles> {
    let mode = sched.config.coord_mode;
    let has_images = grid.image.iter().any(Option::is_some);
    if mode != CoordMode::OneD && has_images && grid.spatial != mode.spatial() {
        return Err(Error::DimMismatch(format!("{:?} coordinates on a {:?} grid", mode, grid.spatial)));
    }
    let dims = mode.dims();
    let pairs = sched.pairs();
    let mut values = Vec::with_capacity(grid.len() * pairs);
    for x in &grid.coords {
        for i in 0..pairs {
            let a = match sched.split_owner(i) {
                Some(d) => x[d] * sched.theta(d)[i],
                None => dims.iter().map(|&d| x[d] * sched.theta(d)[i]).sum(),
            };
            values.push(a);
        }
    }
    Ok(RotationAngles { tokens: grid.len(), pairs, values })
}

fn check_shape(len: usize, dim: usize, a: &RotationAngles) -> Result<usize> {
    if a.pairs == 0 || !dim.is_multiple_of(2 * a.pairs) {
        return Err(Error::ShapeMismatch(format!("feature dim {dim} is not a multiple of {} (2 x pairs)", 2 * a.pairs)));
    }
    if len != a.tokens * dim {
        return Err(Error::ShapeMismatch(format!("{len} values for {} tokens of width {dim}", a.tokens)));
    }
    Ok(dim / (2 * a.pairs))
}

/// Rotate `[tokens x dim]` row-major values in place. `dim` may hold several
/// heads of `2 * pairs` features each; every head uses the same angles.
pub fn rotate_in_place(values: &mut [f64], dim: usize, a: &RotationAngles) -> Result<()> {
    let heads = check_shape(values.len(), dim, a)?;
    let hd = 2 * a.pairs;
    for t in 0..a.tokens {
        let angles = a.row(t);
        for h in 0..heads {
            let base = t * dim + h * hd;
            for (i, &ang) in angles.iter().enumerate() {
                let (sin, cos) = ang.sin_cos();
                let q1 = values[base + 2 * i];
                let q2 = values[base + 2 * i + 1];
                values[base + 2 * i] = q1 * cos - q2 * sin;
                values[base + 2 * i + 1] = q1 * sin + q2 * cos;
            }
        }
    }
    Ok(())
}

pub fn rotate_values(values: &[f64], dim: usize, a: &RotationAngles) -> Result<Vec<f64>> {
    let mut out = values.to_vec();
    rotate_in_place(&mut out, dim, a)?;
    Ok(out)
}

/// Rotate a token block; the arithmetic is done in `f64`.
pub fn rotate(q: &TokenBlock, a: &RotationAngles) -> Result<TokenBlock> {
    let out = rotate_values(&q.to_f64(), q.dim, a)?;
    let mut block = q.clone();
    block.values = out.into_iter().map(|v| v as f32).collect();
    Ok(block)
}

/// Gradients through a rotation given the upstream gradient of its output.
///
/// Returns `(d_input, d_angles)`.
pub fn rotate_backward(q: &[f64], dim: usize, a: &RotationAngles, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let heads = check_shape(q.len(), dim, a)?;
    if upstream.len() != q.len() {
        return Err(Error::ShapeMismatch(format!("upstream has {} values, input {}", upstream.len(), q.len())));
    }
    let hd = 2 * a.pairs;
    let mut dq = vec![0.0; q.len()];
    let mut da = vec![0.0; a.values.len()];
    for t in 0..a.tokens {
        for h in 0..heads {
            let base = t * dim + h * hd;
            for i in 0..a.pairs {
                let (sin, cos) = a.values[t * a.pairs + i].sin_cos();
                let (q1, q2) = (q[base + 2 * i], q[base + 2 * i + 1]);
                let (g1, g2) = (upstream[base + 2 * i], upstream[base + 2 * i + 1]);
                // transpose of the rotation
                dq[base + 2 * i] = g1 * cos + g2 * sin;
                dq[base + 2 * i + 1] = -g1 * sin + g2 * cos;
                let o1 = q1 * cos - q2 * sin;
                let o2 = q1 * sin + q2 * cos;
                da[t * a.pairs + i] += -g1 * o2 + g2 * o1;
            }
        }
    }
    Ok((dq, da))
}

/// Chain angle gradients onto `[θh, θw, θt]`.
pub fn theta_gradients(grid: &CoordGrid, sched: &ThetaSchedule, d_angles: &[f64]) -> [Vec<f64>; 3] {
    let pairs = sched.pairs();
    let dims = sched.config.coord_mode.dims();
    let mut out = [vec![0.0; pairs], vec![0.0; pairs], vec![0.0; pairs]];
    for (t, x) in grid.coords.iter().enumerate() {
        for i in 0..pairs {
            let g = d_angles[t * pairs + i];
            if g == 0.0 {
                continue;
            }
            match sched.split_owner(i) {
                Some(S) => {}
                Some(d) => out[d][i] += x[d] * g,
                None => {
                    for &d in dims.iter().filter(|&&d| d != S) {
                        out[d][i] += x[d] * g;
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RopeGrads {
    pub d_q: Vec<f64>,
    /// `[∂/∂θh, ∂/∂θw, ∂/∂θt]`.
    pub d_theta: [Vec<f64>; 3],
}

/// Analytic gradients of `Σ upstream ⊙ rotate(q)` w.r.t. `q` and the
/// trainable frequencies.
pub fn rope_backward(q: &[f64], dim: usize, grid: &CoordGrid, sched: &ThetaSchedule, upstream: &[f64]) -> Result<RopeGrads> {
    if !sched.is_trainable() {
        return Err(Error::NotTrainable);
    }
    let a = angles(grid, sched)?;
    let (d_q, d_a) = rotate_backward(q, dim, &a, upstream)?;
    Ok(RopeGrads { d_q, d_theta: theta_gradients(grid, sched, &d_a) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn grid(coords: Vec<[f64; 4]>) -> CoordGrid {
        let n = coords.len();
        CoordGrid { coords, kinds: vec![crate::TokenKind::Keyframe; n], image: vec![Some(0); n], spatial: SpatialMode::Interpolated }
    }

    #[test]
    fn theta_s_schedule() {
        let s = ThetaSchedule::new(8, RopeConfig::default()).unwrap();
        assert_eq!(s.theta_s[0], 1.0);
        assert!((s.theta_s[1] - 10000f64.powf(-0.25)).abs() < 1e-15);
        assert!(s.trainable.iter().all(|v| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn trainable_init_uses_only_s() {
        let s = ThetaSchedule::new(8, RopeConfig::default()).unwrap();
        let g = grid(vec![[3.0, -2.0, 1.0, 7.0]]);
        let a = angles(&g, &s).unwrap();
        for i in 0..4 {
            assert_eq!(a.values[i], 7.0 * s.theta_s[i]);
        }
    }

    #[test]
    fn fixed_merge_sums_shared_theta() {
        let cfg = RopeConfig { theta_mode: ThetaMode::Fixed, ..Default::default() };
        let s = ThetaSchedule::new(8, cfg).unwrap();
        let a = angles(&grid(vec![[1.0; 4]]), &s).unwrap();
        for i in 0..4 {
            assert!((a.values[i] - 4.0 * s.theta_s[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn split_assigns_round_robin() {
        let cfg = RopeConfig { variant: Variant::Split, theta_mode: ThetaMode::Fixed, ..Default::default() };
        let s = ThetaSchedule::new(16, cfg).unwrap();
        let a = angles(&grid(vec![[1.0, 2.0, 3.0, 4.0]]), &s).unwrap();
        for i in 0..8 {
            assert_eq!(a.values[i], [1.0, 2.0, 3.0, 4.0][i % 4] * s.theta_s[i]);
        }
        let bad = ThetaSchedule::new(12, cfg);
        assert!(matches!(bad, Err(Error::DimMismatch(_))));
    }

    #[test]
    fn quarter_turn() {
        let a = RotationAngles { tokens: 1, pairs: 1, values: vec![FRAC_PI_2] };
        let out = rotate_values(&[1.0, 0.0], 2, &a).unwrap();
        assert!(out[0].abs() < 1e-12 && (out[1] - 1.0).abs() < 1e-12);
        let id = RotationAngles { tokens: 1, pairs: 1, values: vec![0.0] };
        assert_eq!(rotate_values(&[0.3, -0.7], 2, &id).unwrap(), vec![0.3, -0.7]);
    }

    #[test]
    fn shape_errors() {
        let a = RotationAngles { tokens: 2, pairs: 2, values: vec![0.0; 4] };
        assert!(matches!(rotate_values(&[0.0; 6], 3, &a), Err(Error::ShapeMismatch(_))));
        assert!(matches!(rotate_values(&[0.0; 4], 4, &a), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn backward_needs_trainable() {
        let s = ThetaSchedule::new(4, RopeConfig::one_d()).unwrap();
        let g = grid(vec![[0.0; 4]]);
        assert!(matches!(rope_backward(&[0.0; 4], 4, &g, &s, &[0.0; 4]), Err(Error::NotTrainable)));
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let s = ThetaSchedule::new(4, RopeConfig::default()).unwrap();
        let g = grid(vec![[1.0, 2.0, 3.0, 4.0]]);
        let r = rope_backward(&[0.5, 0.1, -0.3, 0.9], 4, &g, &s, &[0.0; 4]).unwrap();
        assert!(r.d_q.iter().all(|&v| v == 0.0));
        assert!(r.d_theta.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_time_coordinate_gives_zero_theta_t_gradient() {
        let s = ThetaSchedule::new(8, RopeConfig::default()).unwrap();
        let g = grid(vec![[1.0, 2.0, 0.0, 4.0], [3.0, 1.0, 0.0, 5.0]]);
        let q: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let up: Vec<f64> = (0..16).map(|i| (i as f64 * 0.11).cos()).collect();
        let r = rope_backward(&q, 8, &g, &s, &up).unwrap();
        assert!(r.d_theta[T].iter().all(|&v| v == 0.0));
        assert!(r.d_theta[H].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn descend_is_functional() {
        let s = ThetaSchedule::new(4, RopeConfig::default()).unwrap();
        let next = s.descend(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, -2.0]], 0.5).unwrap();
        assert_eq!(s.norms(), [0.0; 3]);
        assert_eq!(next.trainable[H], vec![-0.5, 0.0]);
        assert_eq!(next.trainable[T], vec![0.0, 1.0]);
    }
}
