use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dynimg::harness::{Fusion, Task};
use dynimg::media::{Fps, Pattern};
use dynimg::rope::{CoordMode, RopeConfig, TCoord, ThetaMode, Variant};

#[derive(Debug, Parser)]
#[command(name = "dynimg", version, about = "Compose video keyframes and temporal prompts into dynamic images")]
pub struct Cli {
    /// JSON run configuration; flags win over its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print a video's metadata as JSON.
    Probe(ProbeArgs),
    /// Write a synthetic frames directory.
    Synth(SynthArgs),
    /// Build dynamic images from a video.
    Compose(ComposeArgs),
    /// Dump position coordinates and rotation angles.
    Coords(CoordsArgs),
    /// Report the visual-token budget.
    Tokens(TokensArgs),
    /// Train the toy model and write its trace.
    Train(TrainArgs),
    /// Dump attention-mass tables for the toy model.
    Attn(AttnArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Default)]
pub enum Format {
    #[default]
    Json,
    Compact,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    pub path: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

/// Two comma-separated numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair(pub [f64; 2]);

impl FromStr for Pair {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let num = |t: &str| t.parse::<f64>().map_err(|e| format!("{t:?}: {e}"));
        match parts.as_slice() {
            [v] => Ok(Pair([num(v)?, 0.0])),
            [x, y] => Ok(Pair([num(x)?, num(y)?])),
            _ => Err(format!("expected X or X,Y, got {s:?}")),
        }
    }
}

/// `F,R,C` pooling shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape3(pub [usize; 3]);

impl FromStr for Shape3 {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let v: Vec<usize> = s.split(',').map(|t| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"))).collect::<Result<_, _>>()?;
        match v.as_slice() {
            &[f, r, c] => Ok(Shape3([f, r, c])),
            _ => Err(format!("expected FRAMES,ROWS,COLS, got {s:?}")),
        }
    }
}

pub fn parse_fps(s: &str) -> Result<Fps, String> {
    let (n, d) = s.split_once('/').unwrap_or((s, "1"));
    let n = n.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
    let d = d.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
    Ok(Fps(n, d))
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_parser = parse_pattern, default_value = "moving-dot")]
    pub pattern: Pattern,
    #[arg(long, default_value_t = 64)]
    pub frames: usize,
    #[arg(long, default_value_t = 336)]
    pub width: usize,
    #[arg(long, default_value_t = 336)]
    pub height: usize,
    /// Pixels per frame as `VX,VY` (a single number moves along x).
    #[arg(long, default_value = "2,0", allow_hyphen_values = true)]
    pub velocity: Pair,
    /// Object diameter or side in pixels.
    #[arg(long, default_value_t = 24)]
    pub size: usize,
    /// Starting centre `X,Y`; drawn from the seed when absent.
    #[arg(long)]
    pub origin: Option<Pair>,
    #[arg(long, default_value_t = 1)]
    pub iframe_interval: usize,
    #[arg(long, value_parser = parse_fps, default_value = "25/1")]
    pub fps: Fps,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_pattern(s: &str) -> Result<Pattern, String> {
    s.parse::<Pattern>().map_err(|e| e.to_string())
}

/// Flags that override the layout, augmentation and rope sections.
#[derive(Debug, Args, Default)]
pub struct PipelineFlags {
    #[arg(long)]
    pub keyframe_size: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub n_prompts: Option<usize>,
    #[arg(long)]
    pub num_dynimg: Option<usize>,
    /// Enable the shared crop/flip augmentation.
    #[arg(long)]
    pub augment: bool,
    #[command(flatten)]
    pub rope: RopeFlags,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RopeDims {
    #[value(name = "1d")]
    One,
    #[value(name = "3d")]
    Three,
    #[value(name = "4d")]
    Four,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TimeCoord {
    Rank,
    FrameOffset,
}

#[derive(Debug, Args, Default)]
pub struct RopeFlags {
    /// Coordinate axes used by the rotary embedding.
    #[arg(long, value_enum)]
    pub rope: Option<RopeDims>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantFlag>,
    #[arg(long, value_enum)]
    pub theta: Option<ThetaFlag>,
    #[arg(long, value_enum)]
    pub t_coord: Option<TimeCoord>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantFlag {
    Merge,
    Split,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ThetaFlag {
    Fixed,
    Trainable,
}

impl RopeFlags {
    pub fn apply(&self, mut rope: RopeConfig) -> RopeConfig {
        match self.rope {
            Some(RopeDims::One) => rope = RopeConfig { base: rope.base, t_coord: rope.t_coord, ..RopeConfig::one_d() },
            Some(RopeDims::Three) => rope.coord_mode = CoordMode::ThreeD,
            Some(RopeDims::Four) => rope.coord_mode = CoordMode::FourD,
            None => {}
        }
        if let Some(v) = self.variant {
            rope.variant = match v {
                VariantFlag::Merge => Variant::Merge,
                VariantFlag::Split => Variant::Split,
            };
        }
        if let Some(t) = self.theta {
            rope.theta_mode = match t {
                ThetaFlag::Fixed => ThetaMode::Fixed,
                ThetaFlag::Trainable => ThetaMode::Trainable,
            };
        }
        if let Some(t) = self.t_coord {
            rope.t_coord = match t {
                TimeCoord::Rank => TCoord::Rank,
                TimeCoord::FrameOffset => TCoord::FrameOffset,
            };
        }
        rope
    }
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    /// Frames directory or video file.
    pub video: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
}

#[derive(Debug, Args)]
pub struct CoordsArgs {
    /// Take prompt times from this video's frame groups.
    #[arg(long)]
    pub video: Option<PathBuf>,
    /// Text tokens before the images.
    #[arg(long, default_value_t = 0)]
    pub text_before: usize,
    /// Text tokens after the images.
    #[arg(long, default_value_t = 1)]
    pub text_after: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
}

#[derive(Debug, Args)]
pub struct TokensArgs {
    #[arg(long)]
    pub num_dynimg: Option<usize>,
    /// Raw frames fed when dynamic images are off.
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    /// Count tokens for plain frames instead of dynamic images.
    #[arg(long)]
    pub no_dynimg: bool,
    /// Explicit `FRAMES,ROWS,COLS` pooling shape.
    #[arg(long)]
    pub pool: Option<Shape3>,
}

#[derive(Debug, Args)]
pub struct ToyFlags {
    #[arg(long, value_parser = parse_task)]
    pub task: Option<Task>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionFlag>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[command(flatten)]
    pub rope: RopeFlags,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse::<Task>().map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FusionFlag {
    BeforeEncoder,
    AfterEncoder,
}

impl From<FusionFlag> for Fusion {
    fn from(f: FusionFlag) -> Self {
        match f {
            FusionFlag::BeforeEncoder => Fusion::BeforeEncoder,
            FusionFlag::AfterEncoder => Fusion::AfterEncoder,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub toy: ToyFlags,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub toy: ToyFlags,
}
