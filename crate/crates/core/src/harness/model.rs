use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::pool::{pool_bins, pool_coords, structure_pool};
use super::tape::{Mat, RopeSpec, Tape, Var};
use crate::compose::{DynImgLayout, Region};
use crate::error::{Error, Result};
use crate::rng;
use crate::rope::{build_coords, rank_time, CoordGrid, RopeConfig, Segment, ThetaSchedule, SpatialMode};
use crate::tensor::{TokenBlock, TokenKind};

/// Where temporal prompts join the keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Compose pixels first, encode the composed image.
    #[default]
    BeforeEncoder,
    /// Encode every frame alone, then shrink and stack the prompt features.
    AfterEncoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    pub fusion: Fusion,
    pub rope: RopeConfig,
    pub pool_shape: [usize; 3],
    /// Rotate encoder queries/keys too (positions stay learned either way).
    pub encoder_rope: bool,
    pub classes: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 4,
            decoder_layers: 1,
            fusion: Fusion::BeforeEncoder,
            rope: RopeConfig::default(),
            pool_shape: [4, 12, 12],
            encoder_rope: false,
            classes: 4,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim == 0 || !self.dim.is_multiple_of(8) {
            return bad(format!("dim {} must be a positive multiple of 8", self.dim));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) || !self.head_dim().is_multiple_of(2) {
            return bad(format!("dim {} must split into {} heads of even width", self.dim, self.heads));
        }
        if self.layers == 0 || self.decoder_layers == 0 {
            return bad("encoder and decoder need at least one layer".into());
        }
        if self.classes < 2 {
            return bad(format!("{} classes", self.classes));
        }
        if self.pool_shape.contains(&0) {
            return bad(format!("pool_shape {:?} has an empty axis", self.pool_shape));
        }
        ThetaSchedule::new(self.head_dim(), self.rope).map(|_| ())
    }
}

/// Fixed toy vocabulary for the question tokens.
pub const VOCAB: &[&str] = &["<pad>", "what", "direction", "moving", "?"];

/// One image's worth of encoder input.
#[derive(Debug, Clone)]
pub enum VisualInput {
    /// Patches of a composed image, grid `[1, rows, cols]`.
    Composed(TokenBlock),
    /// Keyframe then prompt frames, each patchified at keyframe size.
    Frames(Vec<TokenBlock>),
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub images: Vec<VisualInput>,
    /// Seconds from keyframe to each prompt, per image.
    pub prompt_times: Vec<Vec<f64>>,
    pub text: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockSlots {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Slots {
    pe_w: usize,
    pe_b: usize,
    pos_row: usize,
    pos_col: usize,
    enc: Vec<BlockSlots>,
    proj_w: usize,
    proj_b: usize,
    text: usize,
    dec: Vec<BlockSlots>,
    cls_w: usize,
    cls_b: usize,
}

struct Init<R> {
    mats: Vec<Mat>,
    names: Vec<String>,
    rng: R,
}

impl<R: Rng> Init<R> {
    fn add(&mut self, name: String, rows: usize, cols: usize, bound: f64) -> usize {
        let data = (0..rows * cols).map(|_| if bound > 0.0 { self.rng.random_range(-bound..bound) } else { 0.0 }).collect();
        self.mats.push(Mat::from_vec(rows, cols, data));
        self.names.push(name);
        self.mats.len() - 1
    }

    fn block(&mut self, prefix: &str, dim: usize) -> BlockSlots {
        let fan = |n: usize| (3.0 / n as f64).sqrt();
        let hidden = 2 * dim;
        BlockSlots {
            wq: self.add(format!("{prefix}.wq"), dim, dim, fan(dim)),
            wk: self.add(format!("{prefix}.wk"), dim, dim, fan(dim)),
            wv: self.add(format!("{prefix}.wv"), dim, dim, fan(dim)),
            wo: self.add(format!("{prefix}.wo"), dim, dim, 0.5 * fan(dim)),
            w1: self.add(format!("{prefix}.w1"), dim, hidden, fan(dim)),
            b1: self.add(format!("{prefix}.b1"), 1, hidden, 0.0),
            w2: self.add(format!("{prefix}.w2"), hidden, dim, 0.5 * fan(hidden)),
            b2: self.add(format!("{prefix}.b2"), 1, dim, 0.0),
        }
    }
}

/// Gradients matching [`ToyModel::params`] and the trainable frequencies.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<Mat>,
    pub theta: Option<[Vec<f64>; 3]>,
}

impl Gradients {
    pub fn zeros_like(model: &ToyModel) -> Self {
        Self {
            params: model.params.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect(),
            theta: model.schedule.is_trainable().then(|| model.schedule.trainable.clone().map(|v| vec![0.0; v.len()])),
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
        if let (Some(a), Some(b)) = (&mut self.theta, &other.theta) {
            for (x, y) in a.iter_mut().zip(b) {
                x.iter_mut().zip(y).for_each(|(x, y)| *x += y);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.params.iter_mut().for_each(|m| m.data.iter_mut().for_each(|x| *x *= s));
        if let Some(t) = &mut self.theta {
            t.iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x *= s));
        }
    }
}

/// Output of a standalone encoder pass.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub features: TokenBlock,
    /// `layers * heads` maps of `tokens x tokens`, layer-major.
    pub attn: Vec<Mat>,
    pub layers: usize,
    pub heads: usize,
}

impl Encoded {
    pub fn attn_map(&self, layer: usize, head: usize) -> &Mat {
        &self.attn[layer * self.heads + head]
    }
}

/// Logits plus the encoder attention of every image.
#[derive(Debug, Clone)]
pub struct Output {
    pub logits: Vec<f64>,
    pub loss: f64,
    /// Per image: `layers * heads` attention maps over that image's tokens.
    /// Empty unless requested; only before-encoder fusion records them.
    pub enc_attn: Vec<Vec<Mat>>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub config: ToyModelConfig,
    pub layout: DynImgLayout,
    pub params: Vec<Mat>,
    pub names: Vec<String>,
    pub schedule: ThetaSchedule,
    slots: Slots,
}

fn block_to_mat(b: &TokenBlock) -> Mat {
    Mat::from_vec(b.tokens, b.dim, b.to_f64())
}

/// For every token of `layout`, its row in `[keyframe; prompt 0; prompt 1; ...]`
/// where each prompt has been pooled to the layout's prompt grid.
fn fusion_order(layout: &DynImgLayout) -> Vec<usize> {
    let (rows, cols) = layout.patch_grid;
    let (kr, kc) = layout.keyframe_grid();
    let (pr, pc) = layout.prompt_grid().unwrap_or((0, 0));
    let p = layout.patch();
    let mut order = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let i = match layout.region_of_patch(r, c).expect("layout tiles its grid") {
                Region::Keyframe => r * kc + c,
                Region::Prompt(j) => {
                    let rect = layout.prompt_regions[j].in_patches(p);
                    kr * kc + j * pr * pc + (r - rect.y) * pc + (c - rect.x)
                }
            };
            order.push(i);
        }
    }
    order
}

/// Shrink each prompt's features to its region and place them below the
/// keyframe features, in the composed layout's token order.
pub fn fuse_after_encoder(keyframe: &TokenBlock, prompts: &[TokenBlock], layout: &DynImgLayout) -> Result<TokenBlock> {
    let (kr, kc) = layout.keyframe_grid();
    if keyframe.tokens != kr * kc {
        return Err(Error::ShapeMismatch(format!("keyframe has {} tokens, layout wants {kr}x{kc}", keyframe.tokens)));
    }
    if prompts.len() != layout.n_prompts() {
        return Err(Error::ShapeMismatch(format!("{} prompt feature sets for {} prompts", prompts.len(), layout.n_prompts())));
    }
    let mut stacked = keyframe.values.clone();
    if let Some((pr, pc)) = layout.prompt_grid() {
        for p in prompts {
            if p.dim != keyframe.dim || p.grid.is_none() {
                return Err(Error::ShapeMismatch("prompt features must share width and carry a grid".into()));
            }
            stacked.extend(structure_pool(p, [1, pr, pc])?.values);
        }
    }
    let order = fusion_order(layout);
    let dim = keyframe.dim;
    let values = order.iter().flat_map(|&i| stacked[i * dim..(i + 1) * dim].iter().copied()).collect();
    let (rows, cols) = layout.patch_grid;
    TokenBlock::new(rows * cols, dim, values, layout.labels())?.with_grid([1, rows, cols])
}

struct Fwd<'m> {
    m: &'m ToyModel,
    tape: Tape,
    p: Vec<Var>,
    theta: Option<[Var; 3]>,
    sched: Rc<ThetaSchedule>,
    keep_attn: bool,
    attn: Vec<Var>,
}

impl<'m> Fwd<'m> {
    fn new(m: &'m ToyModel, keep_attn: bool) -> Self {
        let mut tape = Tape::new();
        let p = m.params.iter().map(|x| tape.leaf(x.clone())).collect();
        let theta = m.schedule.is_trainable().then(|| {
            m.schedule.trainable.clone().map(|v| {
                let n = v.len();
                tape.leaf(Mat::from_vec(1, n, v))
            })
        });
        Self { m, tape, p, theta, sched: Rc::new(m.schedule.clone()), keep_attn, attn: Vec::new() }
    }

    fn affine(&mut self, x: Var, w: usize, b: usize) -> Var {
        let y = self.tape.matmul(x, self.p[w]);
        self.tape.add_row(y, self.p[b])
    }

    fn rope(&mut self, x: Var, grid: &Rc<CoordGrid>) -> Var {
        let spec = RopeSpec { grid: grid.clone(), schedule: self.sched.clone(), thetas: self.theta };
        self.tape.rope(x, spec)
    }

    fn block(&mut self, x: Var, s: BlockSlots, rope: Option<&Rc<CoordGrid>>, mask: Option<Var>) -> Var {
        let heads = self.m.config.heads;
        let hd = self.m.config.head_dim();
        let h = self.tape.layer_norm(x);
        let mut q = self.tape.matmul(h, self.p[s.wq]);
        let mut k = self.tape.matmul(h, self.p[s.wk]);
        let v = self.tape.matmul(h, self.p[s.wv]);
        if let Some(grid) = rope {
            q = self.rope(q, grid);
            k = self.rope(k, grid);
        }
        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let qh = self.tape.slice_cols(q, i * hd, hd);
            let kh = self.tape.slice_cols(k, i * hd, hd);
            let vh = self.tape.slice_cols(v, i * hd, hd);
            let scores = self.tape.matmul_t(qh, kh);
            let mut scores = self.tape.scale(scores, 1.0 / (hd as f64).sqrt());
            if let Some(mask) = mask {
                scores = self.tape.add(scores, mask);
            }
            let a = self.tape.softmax(scores);
            if self.keep_attn {
                self.attn.push(a);
            }
            outs.push(self.tape.matmul(a, vh));
        }
        let o = self.tape.concat_cols(&outs);
        let o = self.tape.matmul(o, self.p[s.wo]);
        let x = self.tape.add(x, o);
        let h = self.tape.layer_norm(x);
        let f = self.affine(h, s.w1, s.b1);
        let f = self.tape.silu(f);
        let f = self.affine(f, s.w2, s.b2);
        self.tape.add(x, f)
    }

    /// Encoder over one patch grid; `times` gives each token's `t` when the
    /// encoder also rotates.
    fn encode(&mut self, patches: &TokenBlock, enc_coords: Option<CoordGrid>) -> Result<Var> {
        let m = self.m;
        let [_, rows, cols] = patches.grid.ok_or_else(|| Error::ShapeMismatch("patches carry no grid".into()))?;
        let (max_r, max_c) = m.layout.patch_grid;
        let patch_dim = m.params[m.slots.pe_w].rows;
        if patches.dim != patch_dim || rows > max_r || cols > max_c || patches.tokens != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} patches of width {} on a {rows}x{cols} grid; model takes width {patch_dim} up to {max_r}x{max_c}",
                patches.tokens, patches.dim
            )));
        }
        let x = self.tape.leaf(block_to_mat(patches));
        let x = self.affine(x, m.slots.pe_w, m.slots.pe_b);
        let pr = self.tape.gather(self.p[m.slots.pos_row], Rc::new((0..rows * cols).map(|i| i / cols).collect()));
        let pc = self.tape.gather(self.p[m.slots.pos_col], Rc::new((0..rows * cols).map(|i| i % cols).collect()));
        let x = self.tape.add(x, pr);
        let mut x = self.tape.add(x, pc);
        let grid = match enc_coords {
            Some(g) if m.config.encoder_rope => Some(Rc::new(g)),
            _ => None,
        };
        for s in m.slots.enc.clone() {
            x = self.block(x, s, grid.as_ref(), None);
        }
        Ok(x)
    }

    /// Encoder features for one image in composed-layout order.
    fn image_features(&mut self, input: &VisualInput) -> Result<Var> {
        let m = self.m;
        let layout = &m.layout;
        match (input, m.config.fusion) {
            (VisualInput::Composed(patches), Fusion::BeforeEncoder) => {
                let coords = m.encoder_coords_composed()?;
                self.encode(patches, Some(coords))
            }
            (VisualInput::Frames(frames), Fusion::AfterEncoder) => {
                let n = layout.n_prompts();
                if frames.len() != n + 1 {
                    return Err(Error::ShapeMismatch(format!("{} frames for 1 keyframe + {n} prompts", frames.len())));
                }
                let (kr, kc) = layout.keyframe_grid();
                let mut parts = Vec::with_capacity(n + 1);
                for (j, f) in frames.iter().enumerate() {
                    if f.grid != Some([1, kr, kc]) {
                        return Err(Error::ShapeMismatch(format!("frame {j} grid {:?}, expected [1, {kr}, {kc}]", f.grid)));
                    }
                    let t = if j == 0 { 0.0 } else { rank_time(j - 1, n) };
                    let feats = self.encode(f, Some(m.frame_coords(t)))?;
                    parts.push(if j == 0 {
                        feats
                    } else {
                        let (pr, pc) = layout.prompt_grid().expect("prompts exist");
                        let bins = pool_bins([1, kr, kc], [1, pr, pc])?;
                        self.tape.pool(feats, Rc::new(bins))
                    });
                }
                let stacked = self.tape.concat_rows(&parts);
                Ok(self.tape.gather(stacked, Rc::new(fusion_order(layout))))
            }
            (VisualInput::Composed(_), Fusion::AfterEncoder) => {
                Err(Error::ShapeMismatch("after-encoder fusion needs separate frames".into()))
            }
            (VisualInput::Frames(_), Fusion::BeforeEncoder) => {
                Err(Error::ShapeMismatch("before-encoder fusion needs a composed image".into()))
            }
        }
    }

    fn decode(&mut self, visual: Var, text: &[usize], coords: CoordGrid) -> Result<Var> {
        let m = self.m;
        if text.is_empty() {
            return Err(Error::EmptyText);
        }
        if let Some(&bad) = text.iter().find(|&&t| t >= VOCAB.len()) {
            return Err(Error::ShapeMismatch(format!("token id {bad} outside the {}-word vocabulary", VOCAB.len())));
        }
        let nv = self.tape.value(visual).rows;
        if self.tape.value(visual).cols != m.config.dim {
            return Err(Error::ShapeMismatch(format!("visual width {} vs model dim {}", self.tape.value(visual).cols, m.config.dim)));
        }
        let len = nv + text.len();
        coords.check_tokens(len)?;
        let t = self.tape.gather(self.p[m.slots.text], Rc::new(text.to_vec()));
        let mut x = self.tape.concat_rows(&[visual, t]);
        let mut mask = Mat::zeros(len, len);
        for i in 0..len {
            for j in 0..len {
                let blocked = if i < nv { j >= nv } else { j > i };
                if blocked {
                    mask.data[i * len + j] = f64::NEG_INFINITY;
                }
            }
        }
        let mask = self.tape.leaf(mask);
        let grid = Rc::new(coords);
        let keep = std::mem::replace(&mut self.keep_attn, false);
        for s in m.slots.dec.clone() {
            x = self.block(x, s, Some(&grid), Some(mask));
        }
        self.keep_attn = keep;
        let x = self.tape.layer_norm(x);
        let last = self.tape.gather(x, Rc::new(vec![len - 1]));
        Ok(self.affine(last, m.slots.cls_w, m.slots.cls_b))
    }

    /// Pooled, projected visual tokens and the full decoder coordinates.
    fn sample_logits(&mut self, sample: &Sample) -> Result<Var> {
        let m = self.m;
        let k = sample.images.len();
        if k == 0 {
            return Err(Error::ShapeMismatch("sample has no images".into()));
        }
        let mut feats = Vec::with_capacity(k);
        for img in &sample.images {
            feats.push(self.image_features(img)?);
        }
        let all = self.tape.concat_rows(&feats);
        let (rows, cols) = m.layout.patch_grid;
        let input = [k, rows, cols];
        let pooled = self.tape.pool(all, Rc::new(pool_bins(input, m.config.pool_shape)?));
        let visual = self.affine(pooled, m.slots.proj_w, m.slots.proj_b);
        let coords = m.decoder_coords(k, &sample.prompt_times, sample.text.len())?;
        self.decode(visual, &sample.text, coords)
    }
}

impl ToyModel {
    pub fn new(config: ToyModelConfig, layout: &DynImgLayout) -> Result<Self> {
        config.validate()?;
        let schedule = ThetaSchedule::new(config.head_dim(), config.rope)?;
        let dim = config.dim;
        let p = layout.patch();
        let patch_dim = p * p * 3;
        let (rows, cols) = layout.patch_grid;
        let fan = |n: usize| (3.0 / n as f64).sqrt();
        let mut init = Init { mats: Vec::new(), names: Vec::new(), rng: rng::stream(config.seed, rng::streams::PARAMS, 0) };
        let pe_w = init.add("patch_embed.w".into(), patch_dim, dim, fan(patch_dim));
        let pe_b = init.add("patch_embed.b".into(), 1, dim, 0.0);
        let pos_row = init.add("pos.row".into(), rows, dim, 0.5);
        let pos_col = init.add("pos.col".into(), cols, dim, 0.5);
        let enc = (0..config.layers).map(|l| init.block(&format!("enc{l}"), dim)).collect();
        let proj_w = init.add("proj.w".into(), dim, dim, fan(dim));
        let proj_b = init.add("proj.b".into(), 1, dim, 0.0);
        let text = init.add("text_embed".into(), VOCAB.len(), dim, 1.0);
        let dec = (0..config.decoder_layers).map(|l| init.block(&format!("dec{l}"), dim)).collect();
        let cls_w = init.add("head.w".into(), dim, config.classes, fan(dim));
        let cls_b = init.add("head.b".into(), 1, config.classes, 0.0);
        let slots = Slots { pe_w, pe_b, pos_row, pos_col, enc, proj_w, proj_b, text, dec, cls_w, cls_b };
        Ok(Self { config, layout: layout.clone(), params: init.mats, names: init.names, schedule, slots })
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|m| m.data.len()).sum::<usize>() + if self.schedule.is_trainable() { 3 * self.schedule.pairs() } else { 0 }
    }

    fn encoder_coords_composed(&self) -> Result<CoordGrid> {
        let mut opts = self.config.rope.coord_options();
        opts.t_coord = crate::rope::TCoord::Rank;
        build_coords(&[Segment::image(&self.layout)], opts)
    }

    fn frame_coords(&self, t: f64) -> CoordGrid {
        let (kr, kc) = self.layout.keyframe_grid();
        let n = kr * kc;
        CoordGrid {
            coords: (0..n).map(|i| [(i / kc) as f64, (i % kc) as f64, t, 0.0]).collect(),
            kinds: vec![TokenKind::Keyframe; n],
            image: vec![Some(0); n],
            spatial: self.config.rope.coord_mode.spatial(),
        }
    }

    /// Coordinates for `images` pooled images followed by `text` tokens.
    pub fn decoder_coords(&self, images: usize, prompt_times: &[Vec<f64>], text: usize) -> Result<CoordGrid> {
        let opts = self.config.rope.coord_options();
        let mut segs: Vec<Segment<'_>> = (0..images)
            .map(|i| Segment::DynImg { layout: &self.layout, prompt_times: prompt_times.get(i).cloned() })
            .collect();
        segs.push(Segment::Text(text));
        let full = build_coords(&segs, opts)?;
        let (rows, cols) = self.layout.patch_grid;
        let nv = images * rows * cols;
        let visual = full.select(&(0..nv).collect::<Vec<_>>());
        let pooled = pool_coords(&visual, [images, rows, cols], self.config.pool_shape)?;
        let text = full.select(&(nv..full.len()).collect::<Vec<_>>());
        let mut grid = CoordGrid::concat(&[pooled, text]);
        grid.spatial = opts.spatial;
        Ok(grid)
    }

    /// Encoder pass over one patch grid (a composed image or a single frame).
    pub fn encode(&self, patches: &TokenBlock) -> Result<Encoded> {
        let mut f = Fwd::new(self, true);
        let coords = match patches.grid {
            Some([_, r, c]) if (r, c) == self.layout.patch_grid => Some(self.encoder_coords_composed()?),
            Some([_, r, c]) if (r, c) == self.layout.keyframe_grid() => Some(self.frame_coords(0.0)),
            _ => None,
        };
        let x = f.encode(patches, coords)?;
        let v = f.tape.value(x);
        let features = TokenBlock::new(v.rows, v.cols, v.data.iter().map(|&x| x as f32).collect(), patches.labels.clone())?;
        let features = match patches.grid {
            Some(g) => features.with_grid(g)?,
            None => features,
        };
        let attn = f.attn.iter().map(|&a| f.tape.value(a).clone()).collect();
        Ok(Encoded { features, attn, layers: self.config.layers, heads: self.config.heads })
    }

    /// Decoder pass over already-projected visual tokens followed by `text`.
    pub fn decode_step(&self, visual: &TokenBlock, text: &[usize], coords: &CoordGrid) -> Result<Vec<f64>> {
        let mut f = Fwd::new(self, false);
        let v = f.tape.leaf(block_to_mat(visual));
        let logits = f.decode(v, text, coords.clone())?;
        Ok(f.tape.value(logits).data.clone())
    }

    /// Project pooled encoder features into decoder width.
    pub fn project(&self, pooled: &TokenBlock) -> Result<TokenBlock> {
        let w = &self.params[self.slots.proj_w];
        if pooled.dim != w.rows {
            return Err(Error::ShapeMismatch(format!("pooled width {} vs {}", pooled.dim, w.rows)));
        }
        let mut y = super::tape::matmul(&block_to_mat(pooled), w);
        let b = &self.params[self.slots.proj_b];
        y.data.chunks_exact_mut(y.cols).for_each(|r| r.iter_mut().zip(&b.data).for_each(|(x, b)| *x += b));
        let block = TokenBlock::new(y.rows, y.cols, y.data.iter().map(|&v| v as f32).collect(), pooled.labels.clone())?;
        match pooled.grid {
            Some(g) => block.with_grid(g),
            None => Ok(block),
        }
    }

    fn run(&self, sample: &Sample, keep_attn: bool) -> Result<(Fwd<'_>, Var, Var)> {
        if sample.label >= self.config.classes {
            return Err(Error::ShapeMismatch(format!("label {} outside {} classes", sample.label, self.config.classes)));
        }
        let mut f = Fwd::new(self, keep_attn);
        let logits = f.sample_logits(sample)?;
        let loss = f.tape.cross_entropy(logits, sample.label);
        Ok((f, logits, loss))
    }

    pub fn forward(&self, sample: &Sample, keep_attn: bool) -> Result<Output> {
        let (f, logits, loss) = self.run(sample, keep_attn)?;
        let per = self.config.layers * self.config.heads;
        let enc_attn = if keep_attn && self.config.fusion == Fusion::BeforeEncoder {
            f.attn.chunks(per).map(|c| c.iter().map(|&a| f.tape.value(a).clone()).collect()).collect()
        } else {
            Vec::new()
        };
        Ok(Output { logits: f.tape.value(logits).data.clone(), loss: f.tape.value(loss).data[0], enc_attn })
    }

    pub fn loss_and_grad(&self, sample: &Sample) -> Result<(Output, Gradients)> {
        let (f, logits, loss) = self.run(sample, false)?;
        let grads = f.tape.backward(loss);
        let take = |v: Var, rows: usize, cols: usize| grads[v.0].clone().unwrap_or_else(|| Mat::zeros(rows, cols));
        let params = f.p.iter().zip(&self.params).map(|(&v, m)| take(v, m.rows, m.cols)).collect();
        let theta = f.theta.map(|th| th.map(|v| take(v, 1, self.schedule.pairs()).data));
        let out = Output { logits: f.tape.value(logits).data.clone(), loss: f.tape.value(loss).data[0], enc_attn: Vec::new() };
        Ok((out, Gradients { params, theta }))
    }

    /// Plain gradient step.
    pub fn descend(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        for (p, g) in self.params.iter_mut().zip(&grads.params) {
            p.data.iter_mut().zip(&g.data).for_each(|(p, g)| *p -= lr * g);
        }
        if let Some(t) = &grads.theta {
            self.schedule = self.schedule.descend(t, lr)?;
        }
        Ok(())
    }

    /// Flat view used by gradient checks: `(tensor, index)` with tensor
    /// `params.len() + d` addressing `θ[d]`.
    pub fn scalar(&self, tensor: usize, index: usize) -> f64 {
        match tensor.checked_sub(self.params.len()) {
            None => self.params[tensor].data[index],
            Some(d) => self.schedule.trainable[d][index],
        }
    }

    pub fn set_scalar(&mut self, tensor: usize, index: usize, value: f64) {
        match tensor.checked_sub(self.params.len()) {
            None => self.params[tensor].data[index] = value,
            Some(d) => self.schedule.trainable[d][index] = value,
        }
    }

    pub fn scalar_name(&self, tensor: usize, index: usize) -> String {
        match tensor.checked_sub(self.params.len()) {
            None => format!("{}[{index}]", self.names[tensor]),
            Some(d) => format!("theta_{}[{index}]", ["h", "w", "t"][d]),
        }
    }

    /// All addressable scalars, θ last.
    pub fn scalar_shapes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.params.iter().map(|m| m.data.len()).collect();
        if self.schedule.is_trainable() {
            sizes.extend(self.schedule.trainable.iter().map(Vec::len));
        }
        sizes
    }

    pub fn spatial(&self) -> SpatialMode {
        self.config.rope.coord_mode.spatial()
    }
}

/// One entry of a finite-difference comparison.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compare analytic loss gradients at `count` randomly chosen scalars
/// against central differences.
pub fn grad_check(model: &ToyModel, sample: &Sample, count: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let (_, grads) = model.loss_and_grad(sample)?;
    let sizes = model.scalar_shapes();
    let total: usize = sizes.iter().sum();
    let mut rng = rng::stream(seed, rng::streams::PROBE, 0);
    let h = 1e-5;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut flat = rng.random_range(0..total);
        let mut tensor = 0;
        while flat >= sizes[tensor] {
            flat -= sizes[tensor];
            tensor += 1;
        }
        let analytic = match tensor.checked_sub(model.params.len()) {
            None => grads.params[tensor].data[flat],
            Some(d) => grads.theta.as_ref().expect("θ addressed only when trainable")[d][flat],
        };
        let mut probe = model.clone();
        let x = model.scalar(tensor, flat);
        probe.set_scalar(tensor, flat, x + h);
        let plus = probe.forward(sample, false)?.loss;
        probe.set_scalar(tensor, flat, x - h);
        let minus = probe.forward(sample, false)?.loss;
        let numeric = (plus - minus) / (2.0 * h);
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        out.push(GradCheck { name: model.scalar_name(tensor, flat), analytic, numeric, rel_err });
    }
    Ok(out)
}
