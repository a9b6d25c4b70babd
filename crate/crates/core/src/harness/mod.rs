//! Toy encoder/decoder stack for exercising composed inputs end to end.

mod attention;
mod budget;
mod model;
mod pool;
pub mod tape;
mod task;
mod train;

pub use attention::{attention_mass, prompt_tokens, region_mass};
pub use budget::{token_budget, TokenBudget};
pub use model::{fuse_after_encoder, grad_check, Encoded, Fusion, GradCheck, Gradients, Output, Sample, ToyModel, ToyModelConfig, VisualInput, VOCAB};
pub use pool::{adaptive_bin, pool_bins, pool_coords, structure_pool};
pub use task::{mix, sample_clip, static_control, Clip, ClipConfig, SampleBuilder, Task, DIRECTIONS};
pub use train::{
    attention_probe, evaluate, make_split, object_patches, object_prompt_masses, sample_attention_mass, toy_train, AttentionProbe, Experiment, Split,
    StepRecord, TrainConfig, TrainRun, TrainSummary, TrainTrace, HELD_OUT,
};
