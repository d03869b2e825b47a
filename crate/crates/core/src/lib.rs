//! Target-side data augmentation for document-level machine translation.
//!
//! The crate is organized around the stages of the augmentation workflow:
//!
//! * [`corpus`] — load and validate document-aligned parallel JSONL corpora,
//!   build vocabularies, and turn documents into model-ready instances with
//!   per-sentence group tags.
//! * [`latent`] — sample observed-ratio/n-gram latent values from a target
//!   sequence and render them into extended model inputs.
//! * [`neural`] — a small trainable encoder-decoder with global, group, and
//!   gate-combined attention, plus Adam training and checkpoint I/O.
//! * [`decode`] — beam-search generation.
//! * [`pipeline`] — build the augmentation training set, train the
//!   augmentation and translation models, and produce augmented corpora.
//! * [`metrics`] — s-BLEU/d-BLEU, deviation, diversity, and Monte-Carlo
//!   posterior perplexity.
//! * [`synth`] — a synthetic synonym-pair corpus generator used by the
//!   end-to-end tests and the `make-synth` CLI command.

pub mod corpus;
pub mod decode;
pub mod latent;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;

/// Reserved token ids shared by every vocabulary.
pub mod special {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const UNK: u32 = 3;
    pub const SEP: u32 = 4;
    pub const COUNT: usize = 5;

    pub const SURFACES: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];
}

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}
