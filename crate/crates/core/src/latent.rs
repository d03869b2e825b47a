//! Latent values: n-gram spans sampled from an observed target sequence.
//!
//! A latent value exposes a fraction of the target (the observed ratio,
//! drawn from a Beta distribution) as non-overlapping n-gram spans. Rendered
//! as extra tokens after the source, it conditions the augmentation model on
//! part of the translation it should stay consistent with.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::special;

/// Whether generation conditions on latent spans or on the source alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Posterior,
    Prior,
}

/// Which side of the corpus receives generated sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Target,
    Source,
    Both,
}

/// Knobs for latent sampling and augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub beta_a: f64,
    pub beta_b: f64,
    pub ngram_min: usize,
    pub ngram_max: usize,
    /// Number of generated translations per instance (M).
    pub num_samples: usize,
    pub beam_size: usize,
    pub seed: u64,
    pub mode: Mode,
    pub direction: Direction,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            beta_a: 2.0,
            beta_b: 3.0,
            ngram_min: 1,
            ngram_max: 3,
            num_samples: 4,
            beam_size: 5,
            seed: 0,
            mode: Mode::Posterior,
            direction: Direction::Target,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.beta_a <= 0.0 || self.beta_b <= 0.0 {
            return Err("beta parameters must be positive".into());
        }
        if self.ngram_min < 1 || self.ngram_min > self.ngram_max {
            return Err("require 1 <= ngram_min <= ngram_max".into());
        }
        if self.num_samples < 1 {
            return Err("num_samples must be at least 1".into());
        }
        if self.beam_size < 1 {
            return Err("beam_size must be at least 1".into());
        }
        Ok(())
    }
}

/// Sampled spans over a target sequence. Spans are sorted by start and
/// pairwise non-overlapping; `tokens_covered` is the sum of span lengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentValue {
    /// (start, length) pairs, 0-based over the target.
    pub spans: Vec<(usize, usize)>,
    /// The requested observed ratio (alpha).
    pub observed_ratio_requested: f64,
    pub tokens_covered: usize,
}

impl LatentValue {
    pub fn empty() -> Self {
        LatentValue { spans: Vec::new(), observed_ratio_requested: 0.0, tokens_covered: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Check structural validity against a target of the given length.
    pub fn validate(&self, target_len: usize, ngram_max: usize) -> Result<(), String> {
        let mut covered = 0usize;
        let mut prev_end = 0usize;
        for (idx, &(start, len)) in self.spans.iter().enumerate() {
            if len == 0 {
                return Err(format!("span {idx} has zero length"));
            }
            if len > ngram_max {
                return Err(format!("span {idx} longer than ngram_max"));
            }
            if idx > 0 && start < prev_end {
                return Err(format!("span {idx} overlaps or is out of order"));
            }
            if start + len > target_len {
                return Err(format!("span {idx} exceeds target bounds"));
            }
            prev_end = start + len;
            covered += len;
        }
        if covered != self.tokens_covered {
            return Err("tokens_covered does not match span lengths".into());
        }
        Ok(())
    }
}

/// Source tokens extended with rendered latent spans.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedInput {
    pub tokens: Vec<u32>,
    pub group_tags: Vec<u32>,
    /// Absent in prior mode.
    pub latent_origin: Option<LatentValue>,
}

/// One draw of the observed ratio from Beta(a, b).
pub fn sample_observed_ratio(config: &AugmentConfig, rng: &mut ChaCha8Rng) -> f64 {
    let beta = Beta::new(config.beta_a, config.beta_b).expect("validated beta parameters");
    beta.sample(rng)
}

/// Sample non-overlapping n-gram spans covering round(alpha * |target|)
/// tokens (capped at the target length).
///
/// Each span length is drawn uniformly from [ngram_min, ngram_max] and
/// truncated to the remaining budget; its start is drawn uniformly over the
/// positions where it fits without overlap, shrinking the length when no gap
/// fits. Adjacent spans are allowed.
pub fn sample_latent(
    target: &[u32],
    alpha: f64,
    config: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> LatentValue {
    assert!(!target.is_empty(), "target must be non-empty");
    assert!((0.0..=1.0).contains(&alpha), "alpha must lie in [0,1]");
    let len = target.len();
    let budget = ((alpha * len as f64).round() as usize).min(len);
    let mut occupied = vec![false; len];
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut remaining = budget;
    while remaining > 0 {
        let mut span_len = rng.gen_range(config.ngram_min..=config.ngram_max).min(remaining);
        let start = loop {
            let feasible: Vec<usize> = (0..=len.saturating_sub(span_len))
                .filter(|&p| occupied[p..p + span_len].iter().all(|&o| !o))
                .collect();
            if !feasible.is_empty() {
                break feasible[rng.gen_range(0..feasible.len())];
            }
            // no gap fits: shrink; a 1-token gap always exists while budget remains
            span_len -= 1;
            assert!(span_len >= 1, "no feasible start with budget remaining");
        };
        occupied[start..start + span_len].iter_mut().for_each(|o| *o = true);
        spans.push((start, span_len));
        remaining -= span_len;
    }
    spans.sort_unstable();
    LatentValue { spans, observed_ratio_requested: alpha, tokens_covered: budget }
}

/// Fraction of the target exposed by the latent value.
pub fn latent_coverage(latent: &LatentValue, target_len: usize) -> f64 {
    assert!(target_len >= 1);
    latent.tokens_covered as f64 / target_len as f64
}

/// Concatenate the source with rendered latent spans.
///
/// Single-group inputs get `source ++ [sep] ++ span1 ++ [sep] ++ span2 ...`
/// with spans in ascending target position. For document-unit inputs each
/// span is appended after the source sentence whose group matches the target
/// sentence containing the span start, carrying that group's tag.
pub fn render_extended_input(
    source: &[u32],
    src_group_tags: &[u32],
    latent: &LatentValue,
    target: &[u32],
    tgt_group_tags: &[u32],
) -> ExtendedInput {
    debug_assert_eq!(source.len(), src_group_tags.len());
    debug_assert_eq!(target.len(), tgt_group_tags.len());
    let groups = src_group_tags.iter().copied().max().unwrap_or(1);
    let mut tokens = Vec::with_capacity(source.len() + 2 * latent.tokens_covered);
    let mut tags = Vec::with_capacity(tokens.capacity());
    for g in 1..=groups {
        for (tok, &tag) in source.iter().zip(src_group_tags) {
            if tag == g {
                tokens.push(*tok);
                tags.push(g);
            }
        }
        for &(start, len) in &latent.spans {
            let span_group = tgt_group_tags.get(start).copied().unwrap_or(1);
            if span_group == g {
                tokens.push(special::SEP);
                tags.push(g);
                for &tok in &target[start..start + len] {
                    tokens.push(tok);
                    tags.push(g);
                }
            }
        }
    }
    ExtendedInput { tokens, group_tags: tags, latent_origin: Some(latent.clone()) }
}

/// The prior-mode input: the source unchanged, no latent.
pub fn prior_input(source: &[u32], src_group_tags: &[u32]) -> ExtendedInput {
    ExtendedInput {
        tokens: source.to_vec(),
        group_tags: src_group_tags.to_vec(),
        latent_origin: None,
    }
}
