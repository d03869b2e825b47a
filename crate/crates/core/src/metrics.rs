//! Evaluation: corpus BLEU over sentences or documents, deviation and
//! diversity of generated translation sets, and Monte-Carlo posterior
//! perplexity on multi-reference data.

use std::collections::HashMap;

use serde::Serialize;
use thiserror::Error;

use crate::latent::{
    prior_input, render_extended_input, sample_latent, sample_observed_ratio, AugmentConfig, Mode,
};
use crate::neural::{sequence_log_prob, ModelParams, NeuralError};
use crate::rng::{child_rng, Stream};

pub const BLEU_MAX_N: usize = 4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("alignment error: {hyps} hypotheses vs {refs} references")]
    Alignment { hyps: usize, refs: usize },
    #[error("diversity needs at least 2 translations, got {got}")]
    TooFewTranslations { got: usize },
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 with brevity penalty, scaled to [0, 100].
///
/// Smoothing adds one to the numerator and denominator of any n >= 2
/// precision whose raw match count is zero; unigram precision is never
/// smoothed, so fully disjoint corpora score exactly zero either way.
pub fn corpus_bleu(pairs: &[(&[String], &[String])], smoothed: bool) -> f64 {
    let mut matches = [0u64; BLEU_MAX_N];
    let mut totals = [0u64; BLEU_MAX_N];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (hyp, reference) in pairs {
        hyp_len += hyp.len() as u64;
        ref_len += reference.len() as u64;
        for n in 1..=BLEU_MAX_N {
            let ref_counts = ngram_counts(reference, n);
            let mut hyp_counts: HashMap<&[String], u64> = HashMap::new();
            if hyp.len() >= n {
                for w in hyp.windows(n) {
                    *hyp_counts.entry(w).or_insert(0) += 1;
                }
                totals[n - 1] += (hyp.len() - n + 1) as u64;
            }
            for (gram, count) in hyp_counts {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matches[n - 1] += count.min(clip);
            }
        }
    }
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_precision_sum = 0.0;
    for n in 1..=BLEU_MAX_N {
        let (mut m, mut t) = (matches[n - 1] as f64, totals[n - 1] as f64);
        if smoothed && n >= 2 && matches[n - 1] == 0 {
            m += 1.0;
            t += 1.0;
        }
        if m == 0.0 || t == 0.0 {
            return 0.0;
        }
        log_precision_sum += (m / t).ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * (log_precision_sum / BLEU_MAX_N as f64).exp() * 100.0
}

/// BLEU of a single pair with the standard smoothing.
pub fn sentence_bleu(hyp: &[String], reference: &[String]) -> f64 {
    corpus_bleu(&[(hyp, reference)], true)
}

/// Corpus BLEU over aligned sentence pairs.
pub fn s_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64, MetricsError> {
    s_bleu_with(hyps, refs, true)
}

pub fn s_bleu_with(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
    smoothed: bool,
) -> Result<f64, MetricsError> {
    if hyps.len() != refs.len() {
        return Err(MetricsError::Alignment { hyps: hyps.len(), refs: refs.len() });
    }
    let pairs: Vec<(&[String], &[String])> =
        hyps.iter().zip(refs).map(|(h, r)| (h.as_slice(), r.as_slice())).collect();
    Ok(corpus_bleu(&pairs, smoothed))
}

/// Corpus BLEU over aligned documents, each document one whole sequence.
pub fn d_bleu(hyp_docs: &[Vec<String>], ref_docs: &[Vec<String>]) -> Result<f64, MetricsError> {
    if hyp_docs.len() != ref_docs.len() {
        return Err(MetricsError::Alignment { hyps: hyp_docs.len(), refs: ref_docs.len() });
    }
    let pairs: Vec<(&[String], &[String])> =
        hyp_docs.iter().zip(ref_docs).map(|(h, r)| (h.as_slice(), r.as_slice())).collect();
    Ok(corpus_bleu(&pairs, true))
}

/// Distance to the perfect score: `100 - BLEU(hyp, ref)` for one pair.
pub fn deviation(hyp: &[String], reference: &[String]) -> f64 {
    100.0 - sentence_bleu(hyp, reference)
}

/// Mean pairwise deviation among a set of generated translations.
///
/// Deviation is asymmetric when lengths differ (brevity penalty), so each
/// unordered pair contributes the mean of both directions; this keeps the
/// metric invariant to input order and coincides with the one-direction sum
/// whenever the translations share a length.
pub fn diversity(translations: &[Vec<String>]) -> Result<f64, MetricsError> {
    let m = translations.len();
    if m < 2 {
        return Err(MetricsError::TooFewTranslations { got: m });
    }
    let mut sum = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            sum += 0.5
                * (deviation(&translations[i], &translations[j])
                    + deviation(&translations[j], &translations[i]));
        }
    }
    Ok(sum / (m * (m - 1) / 2) as f64)
}

/// One generated set: the gold sequence plus its generated alternatives.
pub struct GenGroup {
    pub gold: Vec<String>,
    pub generated: Vec<Vec<String>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GenQuality {
    /// Mean per-pair deviation of generated vs gold.
    pub deviation_mean: f64,
    /// 100 minus corpus-level BLEU of all generated sequences vs their golds.
    pub deviation_corpus: f64,
    /// Mean per-instance diversity over instances with at least two
    /// generated translations.
    pub diversity: Option<f64>,
    pub generated_pairs: usize,
}

pub fn generation_quality(groups: &[GenGroup]) -> GenQuality {
    let mut corpus_pairs: Vec<(&[String], &[String])> = Vec::new();
    let mut dev_sum = 0.0;
    let mut dev_count = 0usize;
    let mut div_sum = 0.0;
    let mut div_count = 0usize;
    for group in groups {
        for gen in &group.generated {
            corpus_pairs.push((gen.as_slice(), group.gold.as_slice()));
            dev_sum += deviation(gen, &group.gold);
            dev_count += 1;
        }
        if group.generated.len() >= 2 {
            div_sum += diversity(&group.generated).expect("len checked");
            div_count += 1;
        }
    }
    GenQuality {
        deviation_mean: if dev_count == 0 { 0.0 } else { dev_sum / dev_count as f64 },
        deviation_corpus: 100.0 - corpus_bleu(&corpus_pairs, true),
        diversity: if div_count == 0 { None } else { Some(div_sum / div_count as f64) },
        generated_pairs: dev_count,
    }
}

/// Flag-selectable metric report emitted as one JSON document.
#[derive(Clone, Debug, Default, Serialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_bleu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_bleu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deviation_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deviation_corpus: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diversity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl: Option<f64>,
    pub counts: MetricCounts,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct MetricCounts {
    pub sentences: usize,
    pub documents: usize,
    pub tokens: usize,
}

/// Source and reference set for one perplexity item. References must all
/// translate the same source.
pub struct PplItem {
    pub source_ids: Vec<u32>,
    pub source_tags: Vec<u32>,
    pub refs: Vec<(Vec<u32>, Vec<u32>)>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PplAccumulator {
    pub total_log_prob: f64,
    pub total_tokens: usize,
}

impl PplAccumulator {
    pub fn merge(&mut self, other: PplAccumulator) {
        self.total_log_prob += other.total_log_prob;
        self.total_tokens += other.total_tokens;
    }

    pub fn ppl(&self) -> f64 {
        (-self.total_log_prob / self.total_tokens.max(1) as f64).exp()
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Monte-Carlo posterior probability of each test reference given the
/// source and latent samples drawn from the observed reference:
/// `P(y) = (1/S) * sum_s P(y | x, z_s)`. Returns summed per-reference log
/// probabilities and token counts; `PplAccumulator::ppl` exponentiates the
/// per-token mean.
///
/// In prior mode the latent is empty and a single model evaluation per
/// reference suffices.
#[allow(clippy::too_many_arguments)]
pub fn mc_posterior_ppl(
    da_params: &ModelParams,
    source_ids: &[u32],
    source_tags: &[u32],
    observed_ref: (&[u32], &[u32]),
    test_refs: &[(Vec<u32>, Vec<u32>)],
    samples: usize,
    config: &AugmentConfig,
    seed: u64,
    cell_base: &[u64],
) -> Result<PplAccumulator, MetricsError> {
    assert!(samples >= 1, "need at least one sample");
    let mut acc = PplAccumulator::default();
    let inputs: Vec<crate::latent::ExtendedInput> = if config.mode == Mode::Prior {
        vec![prior_input(source_ids, source_tags)]
    } else {
        (0..samples)
            .map(|s| {
                let mut indices = cell_base.to_vec();
                indices.push(s as u64);
                let mut rng = child_rng(seed, Stream::PplLatent, &indices);
                let alpha = sample_observed_ratio(config, &mut rng);
                let latent = sample_latent(observed_ref.0, alpha, config, &mut rng);
                render_extended_input(
                    source_ids,
                    source_tags,
                    &latent,
                    observed_ref.0,
                    observed_ref.1,
                )
            })
            .collect()
    };
    for (ref_ids, ref_tags) in test_refs {
        let mut log_probs = Vec::with_capacity(inputs.len());
        for input in &inputs {
            log_probs.push(sequence_log_prob(
                da_params,
                &input.tokens,
                &input.group_tags,
                ref_ids,
                ref_tags,
            )?);
        }
        let log_mean = log_sum_exp(&log_probs) - (log_probs.len() as f64).ln();
        acc.total_log_prob += log_mean;
        acc.total_tokens += ref_ids.len() + 1; // end-of-sequence counted
    }
    Ok(acc)
}

/// Cross-validated corpus perplexity: every reference of every item is
/// observed once while the remaining references are scored.
pub fn mc_posterior_ppl_corpus(
    da_params: &ModelParams,
    items: &[PplItem],
    samples: usize,
    config: &AugmentConfig,
    seed: u64,
) -> Result<f64, MetricsError> {
    let mut acc = PplAccumulator::default();
    for (i, item) in items.iter().enumerate() {
        for observed_ix in 0..item.refs.len() {
            let observed = &item.refs[observed_ix];
            let test_refs: Vec<(Vec<u32>, Vec<u32>)> = item
                .refs
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != observed_ix)
                .map(|(_, r)| r.clone())
                .collect();
            if test_refs.is_empty() {
                continue;
            }
            let cell = mc_posterior_ppl(
                da_params,
                &item.source_ids,
                &item.source_tags,
                (&observed.0, &observed.1),
                &test_refs,
                samples,
                config,
                seed,
                &[i as u64, observed_ix as u64],
            )?;
            acc.merge(cell);
        }
    }
    Ok(acc.ppl())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_corpora_score_one_hundred_exactly() {
        let hyps = vec![toks("the cat sat"), toks("a dog ran far away")];
        assert_eq!(s_bleu(&hyps, &hyps).unwrap(), 100.0);
        assert_eq!(d_bleu(&hyps, &hyps).unwrap(), 100.0);
        assert_eq!(deviation(&hyps[0], &hyps[0]), 0.0);
    }

    #[test]
    fn clipped_unigram_hand_case() {
        // p1 = 1/4 clipped; p2 = 1/4, p3 = 1/3, p4 = 1/2 after add-one
        let hyp = toks("the the the the");
        let reference = toks("the cat sat down");
        let got = sentence_bleu(&hyp, &reference);
        let expect = (0.25f64 * 0.25 * (1.0 / 3.0) * 0.5).powf(0.25) * 100.0;
        assert!((got - expect).abs() < 1e-9, "got {got}, expect {expect}");
    }

    #[test]
    fn disjoint_vocabulary_scores() {
        let hyp = vec![toks("aa bb cc dd")];
        let reference = vec![toks("xx yy zz ww")];
        assert_eq!(s_bleu_with(&hyp, &reference, false).unwrap(), 0.0);
        let smoothed = s_bleu_with(&hyp, &reference, true).unwrap();
        assert!(smoothed < 1.0);
    }

    #[test]
    fn length_mismatch_is_an_alignment_error() {
        let hyps = vec![toks("a b")];
        let refs = vec![toks("a b"), toks("c")];
        assert!(matches!(
            s_bleu(&hyps, &refs),
            Err(MetricsError::Alignment { hyps: 1, refs: 2 })
        ));
    }

    #[test]
    fn single_sentence_document_matches_sentence_bleu() {
        let hyp = vec![toks("the cat sat on the mat")];
        let reference = vec![toks("the cat sat on a mat")];
        let s = s_bleu(&hyp, &reference).unwrap();
        let d = d_bleu(&hyp, &reference).unwrap();
        assert!((s - d).abs() < 1e-12);
    }

    #[test]
    fn reversed_identical_documents_still_score_one_hundred() {
        let doc = vec![toks("x y z a b c")];
        let reversed = vec![toks("c b a z y x")];
        assert_eq!(d_bleu(&doc, &doc).unwrap(), 100.0);
        assert_eq!(d_bleu(&reversed, &reversed).unwrap(), 100.0);
    }

    #[test]
    fn diversity_rules() {
        let same = vec![toks("a b c d"), toks("a b c d"), toks("a b c d")];
        assert_eq!(diversity(&same).unwrap(), 0.0);

        let two = vec![toks("a b c d"), toks("x y z w")];
        let expect = deviation(&two[0], &two[1]);
        assert!((diversity(&two).unwrap() - expect).abs() < 1e-12);

        assert!(matches!(
            diversity(&[toks("a b")]),
            Err(MetricsError::TooFewTranslations { got: 1 })
        ));
    }

    #[test]
    fn diversity_three_way_hand_case_and_order_invariance() {
        let a = toks("a b c d e f g h");
        let b = toks("a b c d x y z w");
        let c = toks("p q r s t u v w");
        let set = vec![a.clone(), b.clone(), c.clone()];
        let expect = (deviation(&a, &b) + deviation(&a, &c) + deviation(&b, &c)) / 3.0;
        let got = diversity(&set).unwrap();
        assert!((got - expect).abs() < 1e-12);

        let permuted = vec![c, a, b];
        assert!((diversity(&permuted).unwrap() - got).abs() < 1e-12);
    }

    #[test]
    fn deviation_stays_in_range() {
        let pairs = [
            (toks("a b c"), toks("a b c")),
            (toks("a b c"), toks("x y z")),
            (toks("a x c d"), toks("a b c d")),
        ];
        for (h, r) in &pairs {
            let d = deviation(h, r);
            assert!((0.0..=100.0).contains(&d), "deviation {d}");
        }
    }

    #[test]
    fn log_sum_exp_matches_direct_mean() {
        let vals = [-2.0f64, -1.5, -3.0];
        let direct = (vals.iter().map(|v| v.exp()).sum::<f64>() / 3.0).ln();
        let got = log_sum_exp(&vals) - 3f64.ln();
        assert!((got - direct).abs() < 1e-12);
    }
}
