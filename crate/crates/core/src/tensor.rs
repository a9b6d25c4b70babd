use serde::{Deserialize, Serialize};

use crate::dtns;
use crate::error::{Error, Result};

/// What a token in a sequence stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenKind {
    Text,
    Keyframe,
    /// Patch of the j-th prompt frame, chronological.
    Prompt(usize),
    /// Output of structure pooling; may mix regions.
    Pooled,
}

impl TokenKind {
    pub fn is_visual(self) -> bool {
        !matches!(self, TokenKind::Text)
    }

    pub fn code(self) -> f32 {
        match self {
            TokenKind::Text => -1.0,
            TokenKind::Keyframe => 0.0,
            TokenKind::Prompt(j) => (j + 1) as f32,
            TokenKind::Pooled => -2.0,
        }
    }
}

/// Dense `[tokens x dim]` values with one label per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBlock {
    pub tokens: usize,
    pub dim: usize,
    pub values: Vec<f32>,
    pub labels: Vec<TokenKind>,
    /// `(frames, rows, cols)` when the tokens are a row-major 3D grid.
    pub grid: Option<[usize; 3]>,
}

impl TokenBlock {
    pub fn new(tokens: usize, dim: usize, values: Vec<f32>, labels: Vec<TokenKind>) -> Result<Self> {
        if values.len() != tokens * dim {
            return Err(Error::ShapeMismatch(format!("{} values for {tokens}x{dim}", values.len())));
        }
        if labels.len() != tokens {
            return Err(Error::ShapeMismatch(format!("{} labels for {tokens} tokens", labels.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("token values must be finite".into()));
        }
        Ok(Self { tokens, dim, values, labels, grid: None })
    }

    pub fn with_grid(mut self, grid: [usize; 3]) -> Result<Self> {
        if grid.iter().product::<usize>() != self.tokens {
            return Err(Error::ShapeMismatch(format!("grid {grid:?} does not hold {} tokens", self.tokens)));
        }
        self.grid = Some(grid);
        Ok(self)
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// Values as `[tokens, dim]`; labels go into the header meta.
    pub fn to_dtns(&self) -> Result<dtns::Tensor> {
        let labels: Vec<f32> = self.labels.iter().map(|k| k.code()).collect();
        Ok(dtns::Tensor::f32(&[self.tokens, self.dim], &["token", "feature"], self.values.clone())?
            .with_meta(serde_json::json!({ "labels": labels, "grid": self.grid })))
    }
}
