//! The augmentation workflow: build the conditioned training set, train the
//! augmentation model on it, generate augmented corpora with beam search,
//! and train the translation model on the result.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tags_from_seps, ParallelInstance, Unit, Vocabulary};
use crate::decode::{beam_search, default_max_len};
use crate::latent::{
    prior_input, render_extended_input, sample_latent, sample_observed_ratio, AugmentConfig,
    Direction, ExtendedInput, Mode,
};
use crate::neural::{
    train, ModelConfig, ModelParams, ModelRole, NeuralError, TrainConfig, TrainExample,
    TrainReport,
};
use crate::rng::{child_rng, Stream};
use crate::special;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("augmentation model has role {role:?}, expected da")]
    WrongRole { role: ModelRole },
    #[error("vocabulary mismatch: {side} vocab hash {expected} != model's {found}")]
    VocabMismatch { side: &'static str, expected: String, found: String },
    #[error("invalid augmented corpus: {0}")]
    InvalidCorpus(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One conditioned training record: an extended input paired with the gold
/// target of its parent instance.
#[derive(Clone, Debug)]
pub struct DaTrainingRecord {
    pub extended_input: ExtendedInput,
    pub target: Vec<u32>,
    pub target_tags: Vec<u32>,
    pub parent_instance_id: String,
    pub replica_index: usize,
}

/// Latent draws reuse the stream sampled when the training set was built;
/// `Resample` switches to a fresh stream at augmentation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentReuse {
    ReuseTraining,
    Resample,
}

fn latent_stream(reuse: LatentReuse) -> Stream {
    match reuse {
        LatentReuse::ReuseTraining => Stream::DaLatent,
        LatentReuse::Resample => Stream::AugLatentResample,
    }
}

fn draw_extended_input(
    instance: &ParallelInstance,
    config: &AugmentConfig,
    stream: Stream,
    instance_ix: usize,
    replica: usize,
) -> ExtendedInput {
    if config.mode == Mode::Prior {
        return prior_input(&instance.source, &instance.src_group_tags);
    }
    let mut rng = child_rng(config.seed, stream, &[instance_ix as u64, replica as u64]);
    let alpha = sample_observed_ratio(config, &mut rng);
    let latent = sample_latent(&instance.target, alpha, config, &mut rng);
    render_extended_input(
        &instance.source,
        &instance.src_group_tags,
        &latent,
        &instance.target,
        &instance.tgt_group_tags,
    )
}

/// For each instance, draw `replicas` latent values and pair each rendered
/// input with the gold target.
pub fn build_da_training_set(
    instances: &[ParallelInstance],
    config: &AugmentConfig,
    replicas: usize,
    stream: Stream,
) -> Vec<DaTrainingRecord> {
    assert!(replicas >= 1, "replicas must be at least 1");
    let mut records = Vec::with_capacity(instances.len() * replicas);
    for (i, instance) in instances.iter().enumerate() {
        for j in 1..=replicas {
            let extended_input = draw_extended_input(instance, config, stream, i, j);
            records.push(DaTrainingRecord {
                extended_input,
                target: instance.target.clone(),
                target_tags: instance.tgt_group_tags.clone(),
                parent_instance_id: instance.instance_id.clone(),
                replica_index: j,
            });
        }
    }
    records
}

pub fn records_to_examples(records: &[DaTrainingRecord]) -> Vec<TrainExample> {
    records
        .iter()
        .map(|r| TrainExample {
            input_ids: r.extended_input.tokens.clone(),
            input_tags: r.extended_input.group_tags.clone(),
            target_ids: r.target.clone(),
            target_tags: r.target_tags.clone(),
        })
        .collect()
}

/// Plain source -> target examples (no latent), as used by the baseline and
/// for dev-set selection.
pub fn instances_to_examples(instances: &[ParallelInstance]) -> Vec<TrainExample> {
    instances
        .iter()
        .map(|i| TrainExample {
            input_ids: i.source.clone(),
            input_tags: i.src_group_tags.clone(),
            target_ids: i.target.clone(),
            target_tags: i.tgt_group_tags.clone(),
        })
        .collect()
}

/// Train the augmentation model: plain NLL over the replicated conditioned
/// records, best-dev checkpoint returned.
///
/// Posterior-mode inputs interleave source tokens with latent target
/// tokens, so the two sides are expected to share one (joint) vocabulary.
pub fn train_da(
    records: &[DaTrainingRecord],
    dev_records: &[DaTrainingRecord],
    model_config: ModelConfig,
    train_config: &TrainConfig,
    src_vocab_sha256: String,
    tgt_vocab_sha256: String,
) -> Result<(ModelParams, TrainReport), PipelineError> {
    let params = ModelParams::init(
        model_config,
        ModelRole::Da,
        train_config.seed,
        src_vocab_sha256,
        tgt_vocab_sha256,
    );
    let train_set = records_to_examples(records);
    let dev_set = records_to_examples(dev_records);
    Ok(train(params, &train_set, &dev_set, train_config)?)
}

/// Train the translation model on an augmented corpus: mean NLL over all
/// pairs; every pair of an instance carries equal weight because every
/// instance contributes the same number of pairs. `drop_gold` trains on
/// generated pairs only.
pub fn train_mt(
    augmented: &AugmentedCorpus,
    vocab_src: &Vocabulary,
    vocab_tgt: &Vocabulary,
    dev_instances: &[ParallelInstance],
    model_config: ModelConfig,
    train_config: &TrainConfig,
    drop_gold: bool,
) -> Result<(ModelParams, TrainReport), PipelineError> {
    augmented.validate()?;
    let params = ModelParams::init(
        model_config,
        ModelRole::Mt,
        train_config.seed,
        vocab_src.sha256_hex(),
        vocab_tgt.sha256_hex(),
    );
    let unit = augmented.meta.unit;
    let train_set: Vec<TrainExample> = augmented
        .pairs
        .iter()
        .filter(|p| !(drop_gold && p.origin == Origin::Gold))
        .map(|p| pair_to_example(p, vocab_src, vocab_tgt, unit))
        .collect();
    if train_set.is_empty() {
        return Err(PipelineError::InvalidCorpus("no training pairs left".into()));
    }
    let dev_set = instances_to_examples(dev_instances);
    Ok(train(params, &train_set, &dev_set, train_config)?)
}

/// Provenance of gold vs generated pairs; generated serializes as "da".
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    #[serde(rename = "gold")]
    Gold,
    #[serde(rename = "da")]
    Generated,
}

/// Which side a generated sequence replaced (absent means target).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratedSide {
    Src,
    Tgt,
}

/// One line of the augmented corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedPair {
    pub instance_id: String,
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub origin: Origin,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spans: Option<Vec<(usize, usize)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beam_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unfinished: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub side: Option<GeneratedSide>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedMeta {
    pub seed: u64,
    #[serde(rename = "M")]
    pub m: usize,
    pub mode: Mode,
    pub direction: Direction,
    pub unit: Unit,
    pub da_checkpoint_sha256: String,
    pub config_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub da_reverse_checkpoint_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedCorpus {
    pub meta: AugmentedMeta,
    pub pairs: Vec<AugmentedPair>,
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    _meta: AugmentedMeta,
}

impl AugmentedCorpus {
    /// Cardinality and per-pair invariants.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let per_instance = match self.meta.direction {
            Direction::Target | Direction::Source => self.meta.m + 1,
            Direction::Both => 2 * self.meta.m + 1,
        };
        let mut counts: std::collections::HashMap<&str, (usize, usize)> = Default::default();
        for pair in &self.pairs {
            let entry = counts.entry(pair.instance_id.as_str()).or_insert((0, 0));
            match pair.origin {
                Origin::Gold => {
                    entry.0 += 1;
                    if pair.alpha.is_some() || pair.spans.is_some() {
                        return Err(PipelineError::InvalidCorpus(format!(
                            "gold pair of {} carries latent fields",
                            pair.instance_id
                        )));
                    }
                }
                Origin::Generated => {
                    entry.1 += 1;
                    if self.meta.mode == Mode::Posterior {
                        match pair.alpha {
                            Some(a) if (0.0..=1.0).contains(&a) => {}
                            other => {
                                return Err(PipelineError::InvalidCorpus(format!(
                                    "generated pair of {} has bad alpha {other:?}",
                                    pair.instance_id
                                )))
                            }
                        }
                    }
                }
            }
        }
        for (id, (gold, generated)) in counts {
            if gold != 1 || gold + generated != per_instance {
                return Err(PipelineError::InvalidCorpus(format!(
                    "instance {id}: {gold} gold + {generated} generated, expected 1 + {}",
                    per_instance - 1
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        out.push_str(
            &serde_json::to_string(&MetaLine { _meta: self.meta.clone() })
                .expect("meta serializes"),
        );
        out.push('\n');
        for pair in &self.pairs {
            out.push_str(&serde_json::to_string(pair).expect("pair serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        fs::write(path, self.to_jsonl()).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<AugmentedCorpus, PipelineError> {
        let file = fs::File::open(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let meta = match lines.next() {
            Some((_, Ok(line))) => {
                let parsed: MetaLine = serde_json::from_str(&line).map_err(|e| {
                    PipelineError::Parse { line: 1, message: format!("meta header: {e}") }
                })?;
                parsed._meta
            }
            _ => {
                return Err(PipelineError::Parse {
                    line: 1,
                    message: "missing meta header line".into(),
                })
            }
        };
        let mut pairs = Vec::new();
        for (ix, line) in lines {
            let line = line.map_err(|source| PipelineError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let pair: AugmentedPair = serde_json::from_str(&line).map_err(|e| {
                PipelineError::Parse { line: ix + 1, message: e.to_string() }
            })?;
            pairs.push(pair);
        }
        Ok(AugmentedCorpus { meta, pairs })
    }
}

/// Re-encode one augmented pair as a training example. In document unit,
/// group tags are recovered from sep positions, capped at the source's
/// group count.
pub fn pair_to_example(
    pair: &AugmentedPair,
    vocab_src: &Vocabulary,
    vocab_tgt: &Vocabulary,
    unit: Unit,
) -> TrainExample {
    let input_ids = vocab_src.encode(&pair.src);
    let target_ids = vocab_tgt.encode(&pair.tgt);
    match unit {
        Unit::Sentence => TrainExample {
            input_tags: vec![1; input_ids.len()],
            target_tags: vec![1; target_ids.len()],
            input_ids,
            target_ids,
        },
        Unit::Document => {
            let groups =
                input_ids.iter().filter(|&&id| id == special::SEP).count() as u32 + 1;
            TrainExample {
                input_tags: tags_from_seps(&input_ids, groups),
                target_tags: tags_from_seps(&target_ids, groups),
                input_ids,
                target_ids,
            }
        }
    }
}

/// External provenance recorded in the augmented corpus header.
#[derive(Clone, Debug, Default)]
pub struct Provenance {
    pub da_checkpoint_sha256: String,
    pub config_sha256: String,
    pub da_reverse_checkpoint_sha256: Option<String>,
}

fn check_da_model(
    params: &ModelParams,
    vocab_src: &Vocabulary,
    vocab_tgt: &Vocabulary,
) -> Result<(), PipelineError> {
    if params.role != ModelRole::Da {
        return Err(PipelineError::WrongRole { role: params.role });
    }
    let src_hash = vocab_src.sha256_hex();
    if params.src_vocab_sha256 != src_hash {
        return Err(PipelineError::VocabMismatch {
            side: "source",
            expected: src_hash,
            found: params.src_vocab_sha256.clone(),
        });
    }
    let tgt_hash = vocab_tgt.sha256_hex();
    if params.tgt_vocab_sha256 != tgt_hash {
        return Err(PipelineError::VocabMismatch {
            side: "target",
            expected: tgt_hash,
            found: params.tgt_vocab_sha256.clone(),
        });
    }
    Ok(())
}

struct GeneratedOne {
    tokens: Vec<String>,
    alpha: Option<f64>,
    spans: Option<Vec<(usize, usize)>>,
    beam_score: f64,
    unfinished: bool,
}

fn generate_for_instance(
    instance: &ParallelInstance,
    instance_ix: usize,
    da_params: &ModelParams,
    config: &AugmentConfig,
    reuse: LatentReuse,
    vocab_tgt: &Vocabulary,
) -> Result<Vec<GeneratedOne>, PipelineError> {
    let stream = latent_stream(reuse);
    let mut outputs = Vec::with_capacity(config.num_samples);
    if config.mode == Mode::Prior {
        // identical inputs decode identically: run the beam once
        let input = prior_input(&instance.source, &instance.src_group_tags);
        let hyps = beam_search(da_params, &input, config.beam_size, default_max_len(&input))?;
        let top = &hyps[0];
        let one = GeneratedOne {
            tokens: vocab_tgt.decode(top.surface_tokens()),
            alpha: None,
            spans: None,
            beam_score: top.normalized_score,
            unfinished: !top.finished,
        };
        for _ in 0..config.num_samples {
            outputs.push(GeneratedOne {
                tokens: one.tokens.clone(),
                alpha: None,
                spans: None,
                beam_score: one.beam_score,
                unfinished: one.unfinished,
            });
        }
        return Ok(outputs);
    }
    for j in 1..=config.num_samples {
        let mut rng = child_rng(config.seed, stream, &[instance_ix as u64, j as u64]);
        let alpha = sample_observed_ratio(config, &mut rng);
        let latent = sample_latent(&instance.target, alpha, config, &mut rng);
        let input = render_extended_input(
            &instance.source,
            &instance.src_group_tags,
            &latent,
            &instance.target,
            &instance.tgt_group_tags,
        );
        let hyps = beam_search(da_params, &input, config.beam_size, default_max_len(&input))?;
        let top = &hyps[0];
        outputs.push(GeneratedOne {
            tokens: vocab_tgt.decode(top.surface_tokens()),
            alpha: Some(alpha),
            spans: Some(latent.spans.clone()),
            beam_score: top.normalized_score,
            unfinished: !top.finished,
        });
    }
    Ok(outputs)
}

/// Per Algorithm 1: for each instance emit the gold pair, then M beam-search
/// translations conditioned on fresh latent draws (posterior mode) or on
/// the bare source (prior mode).
pub fn target_augment(
    instances: &[ParallelInstance],
    da_params: &ModelParams,
    config: &AugmentConfig,
    reuse: LatentReuse,
    vocab_src: &Vocabulary,
    vocab_tgt: &Vocabulary,
    provenance: &Provenance,
) -> Result<AugmentedCorpus, PipelineError> {
    check_da_model(da_params, vocab_src, vocab_tgt)?;
    config.validate().map_err(PipelineError::InvalidCorpus)?;
    let unit = instances.first().map_or(Unit::Sentence, |i| i.unit);
    let generated: Result<Vec<Vec<GeneratedOne>>, PipelineError> = instances
        .par_iter()
        .enumerate()
        .map(|(ix, inst)| generate_for_instance(inst, ix, da_params, config, reuse, vocab_tgt))
        .collect();
    let generated = generated?;
    let mut pairs = Vec::with_capacity(instances.len() * (config.num_samples + 1));
    for (instance, gens) in instances.iter().zip(generated) {
        let src_tokens = vocab_src.decode(&instance.source);
        let gold_tokens = vocab_tgt.decode(&instance.target);
        pairs.push(AugmentedPair {
            instance_id: instance.instance_id.clone(),
            src: src_tokens.clone(),
            tgt: gold_tokens,
            origin: Origin::Gold,
            alpha: None,
            spans: None,
            beam_score: None,
            unfinished: None,
            side: None,
        });
        for g in gens {
            pairs.push(AugmentedPair {
                instance_id: instance.instance_id.clone(),
                src: src_tokens.clone(),
                tgt: g.tokens,
                origin: Origin::Generated,
                alpha: g.alpha,
                spans: g.spans,
                beam_score: Some(g.beam_score),
                unfinished: if g.unfinished { Some(true) } else { None },
                side: None,
            });
        }
    }
    Ok(AugmentedCorpus {
        meta: AugmentedMeta {
            seed: config.seed,
            m: config.num_samples,
            mode: config.mode,
            direction: Direction::Target,
            unit,
            da_checkpoint_sha256: provenance.da_checkpoint_sha256.clone(),
            config_sha256: provenance.config_sha256.clone(),
            da_reverse_checkpoint_sha256: provenance.da_reverse_checkpoint_sha256.clone(),
        },
        pairs,
    })
}

/// Source-side augmentation: the reverse model (trained on swapped roles)
/// generates novel sources paired with the gold targets.
pub fn source_augment(
    instances: &[ParallelInstance],
    reverse_da_params: &ModelParams,
    config: &AugmentConfig,
    reuse: LatentReuse,
    vocab_src: &Vocabulary,
    vocab_tgt: &Vocabulary,
    provenance: &Provenance,
) -> Result<AugmentedCorpus, PipelineError> {
    // the reverse model conditions on the target side and emits sources
    check_da_model(reverse_da_params, vocab_tgt, vocab_src)?;
    config.validate().map_err(PipelineError::InvalidCorpus)?;
    let unit = instances.first().map_or(Unit::Sentence, |i| i.unit);
    let swapped: Vec<ParallelInstance> = instances.iter().map(|i| i.swapped()).collect();
    let generated: Result<Vec<Vec<GeneratedOne>>, PipelineError> = swapped
        .par_iter()
        .enumerate()
        .map(|(ix, inst)| {
            generate_for_instance(inst, ix, reverse_da_params, config, reuse, vocab_src)
        })
        .collect();
    let generated = generated?;
    let mut pairs = Vec::with_capacity(instances.len() * (config.num_samples + 1));
    for (instance, gens) in instances.iter().zip(generated) {
        let src_tokens = vocab_src.decode(&instance.source);
        let gold_tokens = vocab_tgt.decode(&instance.target);
        pairs.push(AugmentedPair {
            instance_id: instance.instance_id.clone(),
            src: src_tokens,
            tgt: gold_tokens.clone(),
            origin: Origin::Gold,
            alpha: None,
            spans: None,
            beam_score: None,
            unfinished: None,
            side: None,
        });
        for g in gens {
            pairs.push(AugmentedPair {
                instance_id: instance.instance_id.clone(),
                src: g.tokens,
                tgt: gold_tokens.clone(),
                origin: Origin::Generated,
                alpha: g.alpha,
                spans: g.spans,
                beam_score: Some(g.beam_score),
                unfinished: if g.unfinished { Some(true) } else { None },
                side: Some(GeneratedSide::Src),
            });
        }
    }
    Ok(AugmentedCorpus {
        meta: AugmentedMeta {
            seed: config.seed,
            m: config.num_samples,
            mode: config.mode,
            direction: Direction::Source,
            unit,
            da_checkpoint_sha256: provenance.da_checkpoint_sha256.clone(),
            config_sha256: provenance.config_sha256.clone(),
            da_reverse_checkpoint_sha256: provenance.da_reverse_checkpoint_sha256.clone(),
        },
        pairs,
    })
}

/// Both-side augmentation: the union of target- and source-side pairs with
/// a single gold copy per instance, N x (2M + 1) pairs in total.
#[allow(clippy::too_many_arguments)]
pub fn both_augment(
    instances: &[ParallelInstance],
    da_params: &ModelParams,
    reverse_da_params: &ModelParams,
    config: &AugmentConfig,
    reuse: LatentReuse,
    vocab_src: &Vocabulary,
    vocab_tgt: &Vocabulary,
    provenance: &Provenance,
) -> Result<AugmentedCorpus, PipelineError> {
    let target =
        target_augment(instances, da_params, config, reuse, vocab_src, vocab_tgt, provenance)?;
    let source = source_augment(
        instances,
        reverse_da_params,
        config,
        reuse,
        vocab_src,
        vocab_tgt,
        provenance,
    )?;
    let per_instance = config.num_samples + 1;
    let mut pairs = Vec::with_capacity(instances.len() * (2 * config.num_samples + 1));
    for i in 0..instances.len() {
        let t = &target.pairs[i * per_instance..(i + 1) * per_instance];
        let s = &source.pairs[i * per_instance..(i + 1) * per_instance];
        pairs.extend_from_slice(t);
        pairs.extend_from_slice(&s[1..]); // drop the duplicate gold copy
    }
    Ok(AugmentedCorpus {
        meta: AugmentedMeta { direction: Direction::Both, ..target.meta },
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, load_corpus, make_instances, VocabSide};
    use crate::neural::AttentionMode;
    use crate::synth::{generate, SynthConfig};

    fn tiny_setup() -> (Vec<ParallelInstance>, Vocabulary, Vocabulary) {
        let cfg = SynthConfig {
            train_docs: 5,
            dev_docs: 2,
            test_docs: 2,
            sentences_per_doc: 2,
            ..SynthConfig::default()
        };
        let corpus = generate(&cfg);
        // a joint vocabulary: the conditioned input mixes source tokens with
        // latent target tokens, so both sides share one id space
        let vj = build_vocab(&corpus.train, VocabSide::Joint, 1);
        let (instances, _) = make_instances(&corpus.train, Unit::Sentence, &vj, &vj, 128);
        (instances, vj.clone(), vj)
    }

    fn tiny_model(vs: &Vocabulary, vt: &Vocabulary) -> ModelParams {
        let cfg = ModelConfig {
            layers: 1,
            heads: 2,
            model_dim: 16,
            ffn_dim: 24,
            src_vocab: vs.len(),
            tgt_vocab: vt.len(),
            max_len: 128,
            dropout: 0.0,
            label_smoothing: 0.1,
            attention_mode: AttentionMode::Plain,
            combined_top_layers: 0,
        };
        ModelParams::init(cfg, ModelRole::Da, 3, vs.sha256_hex(), vt.sha256_hex())
    }

    #[test]
    fn record_cardinality_and_span_tokens() {
        let (instances, _, _) = tiny_setup();
        let ten = &instances[..10.min(instances.len())];
        let config = AugmentConfig { seed: 5, ..AugmentConfig::default() };
        let records = build_da_training_set(ten, &config, 3, Stream::DaLatent);
        assert_eq!(records.len(), ten.len() * 3);
        for r in &records {
            // replica indices run 1..=3 and latent tokens occur in the target
            assert!((1..=3).contains(&r.replica_index));
            let latent = r.extended_input.latent_origin.as_ref().unwrap();
            for &(start, len) in &latent.spans {
                assert!(start + len <= r.target.len());
            }
        }
    }

    #[test]
    fn reuse_stream_makes_augment_inputs_match_training_records() {
        let (instances, _, _) = tiny_setup();
        let five = &instances[..5];
        let config =
            AugmentConfig { seed: 9, num_samples: 2, ..AugmentConfig::default() };
        let records = build_da_training_set(five, &config, 2, Stream::DaLatent);
        // the j-th replica's input equals the j-th augmentation draw
        for (ix, inst) in five.iter().enumerate() {
            for j in 1..=2usize {
                let redrawn =
                    draw_extended_input(inst, &config, Stream::DaLatent, ix, j);
                let rec = &records[ix * 2 + (j - 1)];
                assert_eq!(rec.extended_input, redrawn);
            }
        }
        // resampling switches the stream
        let redrawn = draw_extended_input(&five[0], &config, Stream::AugLatentResample, 0, 1);
        assert_ne!(records[0].extended_input, redrawn);
    }

    #[test]
    fn target_augment_cardinality_and_gold_preservation() {
        let (instances, vs, vt) = tiny_setup();
        let five = &instances[..5];
        let da = tiny_model(&vs, &vt);
        let config = AugmentConfig {
            seed: 4,
            num_samples: 3,
            beam_size: 2,
            ..AugmentConfig::default()
        };
        let corpus = target_augment(
            five,
            &da,
            &config,
            LatentReuse::ReuseTraining,
            &vs,
            &vt,
            &Provenance::default(),
        )
        .unwrap();
        assert_eq!(corpus.pairs.len(), 5 * 4);
        corpus.validate().unwrap();
        // gold multiset preserved, in instance order
        let golds: Vec<&AugmentedPair> =
            corpus.pairs.iter().filter(|p| p.origin == Origin::Gold).collect();
        assert_eq!(golds.len(), 5);
        for (pair, inst) in golds.iter().zip(five) {
            assert_eq!(pair.instance_id, inst.instance_id);
            assert_eq!(pair.tgt, vt.decode(&inst.target));
            assert!(pair.alpha.is_none() && pair.spans.is_none());
        }
    }

    #[test]
    fn prior_mode_translations_are_identical_within_instance() {
        let (instances, vs, vt) = tiny_setup();
        let three = &instances[..3];
        let da = tiny_model(&vs, &vt);
        let config = AugmentConfig {
            seed: 4,
            num_samples: 3,
            beam_size: 2,
            mode: Mode::Prior,
            ..AugmentConfig::default()
        };
        let corpus = target_augment(
            three,
            &da,
            &config,
            LatentReuse::ReuseTraining,
            &vs,
            &vt,
            &Provenance::default(),
        )
        .unwrap();
        for chunk in corpus.pairs.chunks(4) {
            let generated: Vec<&AugmentedPair> =
                chunk.iter().filter(|p| p.origin == Origin::Generated).collect();
            assert_eq!(generated.len(), 3);
            assert!(generated.iter().all(|p| p.tgt == generated[0].tgt));
            assert!(generated.iter().all(|p| p.alpha.is_none()));
        }
    }

    #[test]
    fn source_augment_and_both_mode_cardinality() {
        let (instances, vs, vt) = tiny_setup();
        let five = &instances[..5];
        // reverse model: swapped vocabularies
        let rev_cfg = ModelConfig {
            layers: 1,
            heads: 2,
            model_dim: 16,
            ffn_dim: 24,
            src_vocab: vt.len(),
            tgt_vocab: vs.len(),
            max_len: 128,
            dropout: 0.0,
            label_smoothing: 0.1,
            attention_mode: AttentionMode::Plain,
            combined_top_layers: 0,
        };
        let rev =
            ModelParams::init(rev_cfg, ModelRole::Da, 7, vt.sha256_hex(), vs.sha256_hex());
        let config = AugmentConfig {
            seed: 4,
            num_samples: 3,
            beam_size: 2,
            ..AugmentConfig::default()
        };
        let sourced = source_augment(
            five,
            &rev,
            &config,
            LatentReuse::ReuseTraining,
            &vs,
            &vt,
            &Provenance::default(),
        )
        .unwrap();
        assert_eq!(sourced.pairs.len(), 20);
        sourced.validate().unwrap();
        // gold targets byte-identical across all pairs of an instance
        for chunk in sourced.pairs.chunks(4) {
            assert!(chunk.iter().all(|p| p.tgt == chunk[0].tgt));
            for p in chunk.iter().filter(|p| p.origin == Origin::Generated) {
                assert_eq!(p.side, Some(GeneratedSide::Src));
            }
        }

        let fwd = tiny_model(&vs, &vt);
        let both = both_augment(
            five,
            &fwd,
            &rev,
            &config,
            LatentReuse::ReuseTraining,
            &vs,
            &vt,
            &Provenance::default(),
        )
        .unwrap();
        assert_eq!(both.pairs.len(), 5 * (2 * 3 + 1));
        both.validate().unwrap();
    }

    #[test]
    fn augment_is_rederivable_from_seed_config_and_params() {
        let (instances, vs, vt) = tiny_setup();
        let four = &instances[..4];
        let da = tiny_model(&vs, &vt);
        let config =
            AugmentConfig { seed: 13, num_samples: 2, beam_size: 2, ..AugmentConfig::default() };
        let a = target_augment(
            four,
            &da,
            &config,
            LatentReuse::ReuseTraining,
            &vs,
            &vt,
            &Provenance::default(),
        )
        .unwrap();
        let b = target_augment(
            four,
            &da,
            &config,
            LatentReuse::ReuseTraining,
            &vs,
            &vt,
            &Provenance::default(),
        )
        .unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
    }

    #[test]
    fn jsonl_round_trip_via_files() {
        let (instances, vs, vt) = tiny_setup();
        let da = tiny_model(&vs, &vt);
        let config =
            AugmentConfig { seed: 2, num_samples: 1, beam_size: 1, ..AugmentConfig::default() };
        let corpus = target_augment(
            &instances[..3],
            &da,
            &config,
            LatentReuse::ReuseTraining,
            &vs,
            &vt,
            &Provenance {
                da_checkpoint_sha256: "abc".into(),
                config_sha256: "def".into(),
                da_reverse_checkpoint_sha256: None,
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aug.jsonl");
        corpus.save(&path).unwrap();
        let loaded = AugmentedCorpus::load(&path).unwrap();
        assert_eq!(corpus, loaded);
        assert_eq!(loaded.meta.da_checkpoint_sha256, "abc");
    }

    #[test]
    fn wrong_role_and_vocab_mismatch_abort() {
        let (instances, vs, vt) = tiny_setup();
        let mut da = tiny_model(&vs, &vt);
        da.role = ModelRole::Mt;
        let config = AugmentConfig::default();
        let err = target_augment(
            &instances[..1],
            &da,
            &config,
            LatentReuse::ReuseTraining,
            &vs,
            &vt,
            &Provenance::default(),
        )
        .unwrap_err();
        assert!(matches!(err, PipelineError::WrongRole { .. }));

        let mut da = tiny_model(&vs, &vt);
        da.tgt_vocab_sha256 = "bogus".into();
        let err = target_augment(
            &instances[..1],
            &da,
            &config,
            LatentReuse::ReuseTraining,
            &vs,
            &vt,
            &Provenance::default(),
        )
        .unwrap_err();
        assert!(matches!(err, PipelineError::VocabMismatch { side: "target", .. }));
    }

    #[test]
    fn paper_style_example_input_ordering() {
        // "most free societies accept such limits as reasonable , but the
        // law has recently become more restrictive ." with spans
        // "societies" and "has recently" renders them after the source in
        // target order
        let line = concat!(
            r#"{"doc_id":"d","src":["die meisten freien gesellschaften akzeptieren dies"],"#,
            r#""tgt":["most free societies accept such limits as reasonable , but the law has recently become more restrictive ."]}"#,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let docs = load_corpus(&path, Unit::Sentence).unwrap();
        let vj = build_vocab(&docs, VocabSide::Joint, 1);
        let (instances, _) = make_instances(&docs, Unit::Sentence, &vj, &vj, 128);
        let inst = &instances[0];
        let latent = crate::latent::LatentValue {
            spans: vec![(2, 1), (12, 2)], // "societies", "has recently"
            observed_ratio_requested: 0.15,
            tokens_covered: 3,
        };
        let input = render_extended_input(
            &inst.source,
            &inst.src_group_tags,
            &latent,
            &inst.target,
            &inst.tgt_group_tags,
        );
        let rendered = vj.decode(&input.tokens[..inst.source.len()]);
        assert_eq!(rendered.join(" "), "die meisten freien gesellschaften akzeptieren dies");
        let tail = vj.decode(&input.tokens[inst.source.len()..]);
        assert_eq!(tail.join(" "), "<sep> societies <sep> has recently");
    }
}
