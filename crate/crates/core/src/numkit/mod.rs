//! Numeric substrate: dense f64 tensors on a reverse-mode tape, transformer
//! encoder blocks, optimizers, seeded RNG streams, and binary checkpoints.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use graph::{grad_check, pack_tensors, split_flat, Gradients, Graph, PairSet, Var};
pub use layers::{
    encoder_layer_forward, encoder_stack_forward, position_embeddings, AttentionMask,
    EncoderLayerParams, EncoderLayerVars,
};
pub use optim::{sgd_step, AdamW, Sgd};
pub use rng::Rng;
pub use tensor::{mat_mul, mat_mul_nt, mat_mul_tn, Tensor};

use serde::{Deserialize, Serialize};

/// Patch-feature grid standing in for encoded image features: `grid_size^2`
/// cells in row-major order, each with a `feature_dim`-dimensional vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub grid_size: usize,
    pub feature_dim: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(grid_size: usize, feature_dim: usize) -> FeatureGrid {
        FeatureGrid { grid_size, feature_dim, data: vec![0.0; grid_size * grid_size * feature_dim] }
    }

    /// Number of patches (sequence length of the visual stream).
    pub fn patches(&self) -> usize {
        self.grid_size * self.grid_size
    }

    /// View as a `[patches, feature_dim]` tensor.
    pub fn tensor(&self) -> Tensor {
        Tensor::new(vec![self.patches(), self.feature_dim], self.data.clone())
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let idx = (row * self.grid_size + col) * self.feature_dim;
        &self.data[idx..idx + self.feature_dim]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let idx = (row * self.grid_size + col) * self.feature_dim;
        &mut self.data[idx..idx + self.feature_dim]
    }

    /// Center of a cell in normalized image coordinates (x, y).
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let g = self.grid_size as f64;
        ((col as f64 + 0.5) / g, (row as f64 + 0.5) / g)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
