use serde::{Deserialize, Serialize};

/// Visual-token accounting for one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub visual_tokens: usize,
    pub per_dynimg: usize,
    /// Tokens a plain 16-frame model would spend at the same pooled size.
    pub baseline_16frame: usize,
    pub pool_shape: [usize; 3],
}

/// Tokens handed to the language model after pooling to `pool_shape`.
///
/// The count depends on the pool alone: prompt frames are absorbed into the
/// composed image before pooling.
pub fn token_budget(pool_shape: [usize; 3], num_images: usize) -> TokenBudget {
    let [frames, rows, cols] = pool_shape;
    let visual_tokens = frames * rows * cols;
    TokenBudget {
        visual_tokens,
        per_dynimg: visual_tokens / num_images.max(1),
        baseline_16frame: 16 * rows * cols,
        pool_shape,
    }
}
