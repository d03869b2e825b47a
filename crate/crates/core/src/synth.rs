//! Synthetic synonym-pair corpus generator.
//!
//! Each source token has two valid target synonyms (an `a` and a `b`
//! variant). A document picks one register and renders every token with the
//! register's variant, flipped with a small noise probability. Alternative
//! references of the same document share its register, so part of one
//! reference genuinely informs the rest of another — the structure the
//! posterior-conditioned augmentation model is meant to exploit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{MultiRefDocument, ParallelDocument};
use crate::rng::{child_rng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Number of source tokens; the target vocabulary has twice as many.
    pub synonym_pairs: usize,
    pub train_docs: usize,
    pub dev_docs: usize,
    pub test_docs: usize,
    pub sentences_per_doc: usize,
    pub sent_len_min: usize,
    pub sent_len_max: usize,
    /// Probability of rendering the off-register synonym.
    pub noise: f64,
    /// References per test document in the multi-reference file.
    pub refs_per_doc: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            synonym_pairs: 25,
            train_docs: 500,
            dev_docs: 50,
            test_docs: 50,
            sentences_per_doc: 4,
            sent_len_min: 3,
            sent_len_max: 6,
            noise: 0.1,
            refs_per_doc: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.synonym_pairs == 0 || self.sentences_per_doc == 0 {
            return Err("synonym_pairs and sentences_per_doc must be positive".into());
        }
        if self.sent_len_min == 0 || self.sent_len_min > self.sent_len_max {
            return Err("require 1 <= sent_len_min <= sent_len_max".into());
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err("noise must lie in [0, 0.5]".into());
        }
        if self.refs_per_doc < 2 {
            return Err("refs_per_doc must be at least 2".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub train: Vec<ParallelDocument>,
    pub dev: Vec<ParallelDocument>,
    pub test: Vec<ParallelDocument>,
    pub test_multiref: Vec<MultiRefDocument>,
}

fn src_token(i: usize) -> String {
    format!("s{i:02}")
}

fn tgt_token(register: usize, i: usize) -> String {
    if register == 0 {
        format!("a{i:02}")
    } else {
        format!("b{i:02}")
    }
}

struct DocShape {
    register: usize,
    sentences: Vec<Vec<usize>>, // source token indices
}

fn doc_shape(cfg: &SynthConfig, split: u64, ix: usize) -> DocShape {
    let mut rng = child_rng(cfg.seed, Stream::Synth, &[split, ix as u64]);
    let register = rng.gen_range(0..2usize);
    let sentences = (0..cfg.sentences_per_doc)
        .map(|_| {
            let len = rng.gen_range(cfg.sent_len_min..=cfg.sent_len_max);
            (0..len).map(|_| rng.gen_range(0..cfg.synonym_pairs)).collect()
        })
        .collect();
    DocShape { register, sentences }
}

fn render_reference(cfg: &SynthConfig, shape: &DocShape, split: u64, ix: usize, r: usize) -> Vec<Vec<String>> {
    let mut rng = child_rng(cfg.seed, Stream::Synth, &[split, ix as u64, 1000 + r as u64]);
    shape
        .sentences
        .iter()
        .map(|sent| {
            sent.iter()
                .map(|&tok| {
                    let flip = rng.gen::<f64>() < cfg.noise;
                    let register = if flip { 1 - shape.register } else { shape.register };
                    tgt_token(register, tok)
                })
                .collect()
        })
        .collect()
}

fn make_split(cfg: &SynthConfig, split: u64, count: usize, prefix: &str) -> Vec<ParallelDocument> {
    (0..count)
        .map(|ix| {
            let shape = doc_shape(cfg, split, ix);
            ParallelDocument {
                doc_id: format!("{prefix}{ix:04}"),
                src_sentences: shape
                    .sentences
                    .iter()
                    .map(|s| s.iter().map(|&t| src_token(t)).collect())
                    .collect(),
                tgt_sentences: render_reference(cfg, &shape, split, ix, 0),
            }
        })
        .collect()
}

const SPLIT_TRAIN: u64 = 1;
const SPLIT_DEV: u64 = 2;
const SPLIT_TEST: u64 = 3;

/// Generate the full corpus. The single-reference test targets equal the
/// first reference of the multi-reference file.
pub fn generate(cfg: &SynthConfig) -> SynthCorpus {
    let train = make_split(cfg, SPLIT_TRAIN, cfg.train_docs, "train");
    let dev = make_split(cfg, SPLIT_DEV, cfg.dev_docs, "dev");
    let test = make_split(cfg, SPLIT_TEST, cfg.test_docs, "test");
    let test_multiref = (0..cfg.test_docs)
        .map(|ix| {
            let shape = doc_shape(cfg, SPLIT_TEST, ix);
            MultiRefDocument {
                doc_id: format!("test{ix:04}"),
                src: shape
                    .sentences
                    .iter()
                    .map(|s| s.iter().map(|&t| src_token(t)).collect::<Vec<_>>().join(" "))
                    .collect(),
                refs: (0..cfg.refs_per_doc)
                    .map(|r| {
                        render_reference(cfg, &shape, SPLIT_TEST, ix, r)
                            .iter()
                            .map(|s| s.join(" "))
                            .collect()
                    })
                    .collect(),
            }
        })
        .collect();
    SynthCorpus { train, dev, test, test_multiref }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_sized() {
        let cfg = SynthConfig {
            train_docs: 10,
            dev_docs: 3,
            test_docs: 4,
            ..SynthConfig::default()
        };
        let a = generate(&cfg);
        let b = generate(&cfg);
        assert_eq!(a.train, b.train);
        assert_eq!(a.train.len(), 10);
        assert_eq!(a.dev.len(), 3);
        assert_eq!(a.test.len(), 4);
        assert_eq!(a.test_multiref.len(), 4);
        assert_eq!(a.test_multiref[0].refs.len(), 3);
    }

    #[test]
    fn references_share_the_register_and_test_matches_first_ref() {
        let cfg = SynthConfig { test_docs: 6, noise: 0.0, ..SynthConfig::default() };
        let c = generate(&cfg);
        for (doc, mr) in c.test.iter().zip(&c.test_multiref) {
            let flat: Vec<String> = doc.tgt_sentences.iter().map(|s| s.join(" ")).collect();
            assert_eq!(flat, mr.refs[0]);
            // with zero noise all references are identical (pure register)
            for r in &mr.refs {
                assert_eq!(*r, mr.refs[0]);
            }
            // register purity: every token shares the same variant letter
            let first = doc.tgt_sentences[0][0].chars().next().unwrap();
            for sent in &doc.tgt_sentences {
                for tok in sent {
                    assert_eq!(tok.chars().next().unwrap(), first);
                }
            }
        }
    }

    #[test]
    fn both_registers_and_synonyms_appear() {
        let cfg = SynthConfig { train_docs: 40, ..SynthConfig::default() };
        let c = generate(&cfg);
        let mut saw_a = false;
        let mut saw_b = false;
        for doc in &c.train {
            for sent in &doc.tgt_sentences {
                for tok in sent {
                    match tok.chars().next().unwrap() {
                        'a' => saw_a = true,
                        'b' => saw_b = true,
                        _ => panic!("unexpected token {tok}"),
                    }
                }
            }
        }
        assert!(saw_a && saw_b);
    }
}
