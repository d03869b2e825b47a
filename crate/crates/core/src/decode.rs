//! Beam-search generation from a trained model.
//!
//! Hypotheses are ranked by length-normalized score (mean token log-prob).
//! For multi-group inputs, generation keeps the sentence structure aligned
//! with the source: emitting the sep token advances the current group, the
//! end-of-sequence token is blocked until the final group is reached, and
//! sep is blocked once it is.

use crate::latent::ExtendedInput;
use crate::neural::{encode_states, next_token_log_probs, ModelParams, NeuralError};
use crate::special;

/// One finished (or length-forced) generation candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated token ids; the last token is end-of-sequence when finished.
    pub tokens: Vec<u32>,
    /// Sum of per-token log-probabilities.
    pub score: f64,
    /// `score / tokens.len()`.
    pub normalized_score: f64,
    /// False when the hypothesis was cut at `max_len` without emitting
    /// end-of-sequence.
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens without the trailing end-of-sequence.
    pub fn surface_tokens(&self) -> &[u32] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == special::EOS => rest,
            _ => &self.tokens,
        }
    }
}

#[derive(Clone)]
struct Beam {
    tokens: Vec<u32>,
    /// Query tag per decoder position: tags of already-predicted tokens plus
    /// the tag for the next prediction.
    query_tags: Vec<u32>,
    score: f64,
}

/// Default generation length bound: generous for translation-style tasks
/// while keeping runtime bounded.
pub fn default_max_len(input: &ExtendedInput) -> usize {
    2 * input.tokens.len() + 8
}

/// Standard beam search over the model's next-token log-probs.
///
/// Returns up to `beam_size` hypotheses, finished ones ranked by normalized
/// score descending with ties broken by token sequence then earlier finish.
/// If nothing finishes within `max_len`, the length-forced live hypotheses
/// are returned flagged unfinished.
pub fn beam_search(
    params: &ModelParams,
    input: &ExtendedInput,
    beam_size: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>, NeuralError> {
    assert!(beam_size >= 1, "beam_size must be at least 1");
    assert!(max_len >= 1, "max_len must be at least 1");
    let groups = input.group_tags.iter().copied().max().unwrap_or(1);
    let enc = encode_states(params, &input.tokens, &input.group_tags)?;

    let mut live = vec![Beam { tokens: Vec::new(), query_tags: vec![1], score: 0.0 }];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();

    for _step in 0..max_len {
        // candidates: (total_score, token, beam_index)
        let mut candidates: Vec<(f64, u32, usize)> = Vec::new();
        for (b, beam) in live.iter().enumerate() {
            let mut lp = next_token_log_probs(
                params,
                &enc,
                &input.group_tags,
                &beam.tokens,
                &beam.query_tags,
            )?;
            let cur_tag = *beam.query_tags.last().unwrap();
            lp[special::PAD as usize] = f64::NEG_INFINITY;
            lp[special::BOS as usize] = f64::NEG_INFINITY;
            if groups > 1 {
                if cur_tag < groups {
                    lp[special::EOS as usize] = f64::NEG_INFINITY;
                } else {
                    lp[special::SEP as usize] = f64::NEG_INFINITY;
                }
            } else {
                lp[special::SEP as usize] = f64::NEG_INFINITY;
            }
            for (tok, &logp) in lp.iter().enumerate() {
                if logp.is_finite() {
                    candidates.push((beam.score + logp, tok as u32, b));
                }
            }
        }
        // deterministic order: score desc, then token id, then beam index
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then_with(|| a.1.cmp(&b.1))
                .then_with(|| a.2.cmp(&b.2))
        });

        // the top beam_size candidates consume the beam budget whether they
        // finish or stay live: beam_size 1 therefore reduces to greedy
        let mut next_live = Vec::with_capacity(beam_size);
        let mut consumed = 0usize;
        for &(score, tok, b) in &candidates {
            if consumed >= beam_size {
                break;
            }
            consumed += 1;
            let beam = &live[b];
            let mut tokens = beam.tokens.clone();
            tokens.push(tok);
            if tok == special::EOS {
                finished.push((tokens, score));
                continue;
            }
            let mut query_tags = beam.query_tags.clone();
            let cur_tag = *query_tags.last().unwrap();
            let next_tag = if tok == special::SEP && cur_tag < groups {
                cur_tag + 1
            } else {
                cur_tag
            };
            query_tags.push(next_tag);
            next_live.push(Beam { tokens, query_tags, score });
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
    }

    let mut out: Vec<Hypothesis> = if finished.is_empty() {
        live.into_iter()
            .map(|b| Hypothesis {
                normalized_score: b.score / b.tokens.len().max(1) as f64,
                score: b.score,
                tokens: b.tokens,
                finished: false,
            })
            .collect()
    } else {
        finished
            .into_iter()
            .map(|(tokens, score)| Hypothesis {
                normalized_score: score / tokens.len() as f64,
                score,
                tokens,
                finished: true,
            })
            .collect()
    };
    // normalized score desc; ties by token sequence (shorter-prefix first,
    // which is also the earlier finish)
    out.sort_by(|a, b| {
        b.normalized_score
            .partial_cmp(&a.normalized_score)
            .unwrap()
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    out.truncate(beam_size);
    Ok(out)
}

/// Stepwise argmax decoding with the same structural constraints as
/// [`beam_search`]; ties break toward the lower token id.
pub fn greedy_decode(
    params: &ModelParams,
    input: &ExtendedInput,
    max_len: usize,
) -> Result<Hypothesis, NeuralError> {
    let groups = input.group_tags.iter().copied().max().unwrap_or(1);
    let enc = encode_states(params, &input.tokens, &input.group_tags)?;
    let mut tokens: Vec<u32> = Vec::new();
    let mut query_tags = vec![1u32];
    let mut score = 0.0;
    for _ in 0..max_len {
        let mut lp =
            next_token_log_probs(params, &enc, &input.group_tags, &tokens, &query_tags)?;
        let cur_tag = *query_tags.last().unwrap();
        lp[special::PAD as usize] = f64::NEG_INFINITY;
        lp[special::BOS as usize] = f64::NEG_INFINITY;
        if groups > 1 {
            if cur_tag < groups {
                lp[special::EOS as usize] = f64::NEG_INFINITY;
            } else {
                lp[special::SEP as usize] = f64::NEG_INFINITY;
            }
        } else {
            lp[special::SEP as usize] = f64::NEG_INFINITY;
        }
        let (tok, logp) = lp
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_finite())
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then_with(|| b.0.cmp(&a.0)))
            .map(|(t, &l)| (t as u32, l))
            .expect("some token is always available");
        tokens.push(tok);
        score += logp;
        if tok == special::EOS {
            return Ok(Hypothesis {
                normalized_score: score / tokens.len() as f64,
                score,
                tokens,
                finished: true,
            });
        }
        let next_tag = if tok == special::SEP && cur_tag < groups { cur_tag + 1 } else { cur_tag };
        query_tags.push(next_tag);
    }
    Ok(Hypothesis {
        normalized_score: score / tokens.len().max(1) as f64,
        score,
        tokens,
        finished: false,
    })
}
