//! A small differentiable encoder-decoder translation model with global,
//! group, and gate-combined attention, usable in both the augmentation (da)
//! and translation (mt) roles.

pub mod attention;
pub mod checkpoint;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;

pub use attention::{
    attention_weights, causal_mask, combined_attention, gate_sum, global_attention,
    group_attention, group_mask, MASK_NEG,
};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{
    batch_loss, encode_states, forward_log_probs, next_token_log_probs, nll_loss_and_grads,
    positional_encoding, sequence_log_prob, token_accuracy,
};
pub use optim::{train, TrainConfig, TrainReport};
pub use params::{AttentionMode, Layout, ModelConfig, ModelParams, ModelRole, ParamGrads};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("non-finite activations at {site}")]
    NonFinite { site: String },
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One training example: an (extended) input with group tags and the target
/// sequence it should produce. The end-of-sequence id is appended by the
/// model, not stored here.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub input_ids: Vec<u32>,
    pub input_tags: Vec<u32>,
    pub target_ids: Vec<u32>,
    pub target_tags: Vec<u32>,
}

/// A padded mini-batch. Pad positions are excluded from attention and loss:
/// rows are stored padded to the batch width, and consumers walk each row's
/// true length from the padding masks.
#[derive(Clone, Debug)]
pub struct Batch {
    size: usize,
    input_width: usize,
    target_width: usize,
    input_ids: Vec<u32>,
    input_tags: Vec<u32>,
    input_mask: Vec<bool>,
    target_ids: Vec<u32>,
    target_tags: Vec<u32>,
    target_mask: Vec<bool>,
}

impl Batch {
    pub fn from_examples(examples: &[&TrainExample]) -> Batch {
        let size = examples.len();
        let input_width = examples.iter().map(|e| e.input_ids.len()).max().unwrap_or(0);
        let target_width = examples.iter().map(|e| e.target_ids.len()).max().unwrap_or(0);
        let mut batch = Batch {
            size,
            input_width,
            target_width,
            input_ids: vec![crate::special::PAD; size * input_width],
            input_tags: vec![0; size * input_width],
            input_mask: vec![false; size * input_width],
            target_ids: vec![crate::special::PAD; size * target_width],
            target_tags: vec![0; size * target_width],
            target_mask: vec![false; size * target_width],
        };
        for (r, ex) in examples.iter().enumerate() {
            let ib = r * input_width;
            batch.input_ids[ib..ib + ex.input_ids.len()].copy_from_slice(&ex.input_ids);
            batch.input_tags[ib..ib + ex.input_tags.len()].copy_from_slice(&ex.input_tags);
            batch.input_mask[ib..ib + ex.input_ids.len()].fill(true);
            let tb = r * target_width;
            batch.target_ids[tb..tb + ex.target_ids.len()].copy_from_slice(&ex.target_ids);
            batch.target_tags[tb..tb + ex.target_tags.len()].copy_from_slice(&ex.target_tags);
            batch.target_mask[tb..tb + ex.target_ids.len()].fill(true);
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    fn row_len(mask: &[bool], base: usize, width: usize) -> usize {
        mask[base..base + width].iter().filter(|&&m| m).count()
    }

    /// Unpadded input ids and tags of row `r`.
    pub fn row_input(&self, r: usize) -> (&[u32], &[u32]) {
        let base = r * self.input_width;
        let len = Self::row_len(&self.input_mask, base, self.input_width);
        (&self.input_ids[base..base + len], &self.input_tags[base..base + len])
    }

    /// Unpadded target ids and tags of row `r`.
    pub fn row_target(&self, r: usize) -> (&[u32], &[u32]) {
        let base = r * self.target_width;
        let len = Self::row_len(&self.target_mask, base, self.target_width);
        (&self.target_ids[base..base + len], &self.target_tags[base..base + len])
    }

    /// Non-pad target tokens including one end-of-sequence per row.
    pub fn total_target_tokens(&self) -> usize {
        self.target_mask.iter().filter(|&&m| m).count() + self.size
    }
}
