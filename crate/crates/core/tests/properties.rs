//! Property tests for the corpus, latent, and metrics invariants.

use proptest::prelude::*;

use docaug_core::corpus::{
    build_vocab, make_instances, split_on_sep, tokenize, ParallelDocument, Unit, VocabSide,
};
use docaug_core::latent::{
    latent_coverage, render_extended_input, sample_latent, AugmentConfig,
};
use docaug_core::metrics::{deviation, diversity};
use docaug_core::rng::{child_rng, Stream};
use docaug_core::special;

fn token_strategy() -> impl Strategy<Value = String> {
    prop::sample::select(vec![
        "alpha", "bravo", "casa", "delta", "eco", "foto", "golf", "hotel", "igloo", "jazz",
    ])
    .prop_map(str::to_string)
}

fn sentence_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(token_strategy(), 1..8)
}

fn doc_strategy() -> impl Strategy<Value = ParallelDocument> {
    (prop::collection::vec(sentence_strategy(), 1..5), "[a-z]{1,6}").prop_map(|(sents, id)| {
        ParallelDocument {
            doc_id: id,
            src_sentences: sents.clone(),
            tgt_sentences: sents.into_iter().rev().collect(),
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_decode_round_trip_with_unk(sent in sentence_strategy(), oov in "[A-Z]{2,5}") {
        let docs = vec![ParallelDocument {
            doc_id: "d".into(),
            src_sentences: vec![sent.clone()],
            tgt_sentences: vec![sent.clone()],
        }];
        let vocab = build_vocab(&docs, VocabSide::Joint, 1);
        let mut with_oov = sent.clone();
        with_oov.push(oov.clone());
        let decoded = vocab.decode(&vocab.encode(&with_oov));
        let mut expect = sent;
        expect.push("<unk>".to_string());
        prop_assert_eq!(decoded, expect);
    }

    #[test]
    fn group_tag_partition_reconstructs(doc in doc_strategy()) {
        let docs = vec![doc];
        let vocab = build_vocab(&docs, VocabSide::Joint, 1);
        let (instances, _) = make_instances(&docs, Unit::Document, &vocab, &vocab, 4096);
        prop_assert_eq!(instances.len(), 1);
        let inst = &instances[0];
        // tags are non-decreasing from 1
        prop_assert_eq!(inst.tgt_group_tags[0], 1);
        prop_assert!(inst.tgt_group_tags.windows(2).all(|w| w[0] <= w[1] && w[1] <= w[0] + 1));
        // per-tag slices reconstruct the sentences
        let chunks = split_on_sep(&inst.target, docs[0].tgt_sentences.len());
        for (k, chunk) in chunks.iter().enumerate() {
            let expect = vocab.encode(&docs[0].tgt_sentences[k]);
            prop_assert_eq!(chunk, &expect);
        }
        // tokens of sentence k carry tag k
        let mut pos = 0usize;
        for (k, sent) in docs[0].tgt_sentences.iter().enumerate() {
            for _ in sent {
                prop_assert_eq!(inst.tgt_group_tags[pos], (k + 1) as u32);
                pos += 1;
            }
            if k + 1 < docs[0].tgt_sentences.len() {
                prop_assert_eq!(inst.target[pos], special::SEP);
                prop_assert_eq!(inst.tgt_group_tags[pos], (k + 1) as u32);
                pos += 1;
            }
        }
    }

    #[test]
    fn latent_spans_are_disjoint_and_exact(
        len in 1usize..40,
        alpha in 0.0f64..=1.0,
        seed in 0u64..5000,
    ) {
        let cfg = AugmentConfig::default();
        let target: Vec<u32> = (0..len as u32).map(|i| i + 5).collect();
        let mut rng = child_rng(seed, Stream::DaLatent, &[0]);
        let latent = sample_latent(&target, alpha, &cfg, &mut rng);
        latent.validate(len, cfg.ngram_max).map_err(|e| TestCaseError::fail(e))?;
        let budget = ((alpha * len as f64).round() as usize).min(len);
        prop_assert_eq!(latent.tokens_covered, budget);
        let cov = latent_coverage(&latent, len);
        prop_assert!((cov - budget as f64 / len as f64).abs() < 1e-12);
    }

    #[test]
    fn latent_sampling_is_deterministic(
        len in 1usize..30,
        alpha in 0.0f64..=1.0,
        seed in 0u64..5000,
    ) {
        let cfg = AugmentConfig::default();
        let target: Vec<u32> = (0..len as u32).map(|i| i + 5).collect();
        let a = sample_latent(&target, alpha, &cfg, &mut child_rng(seed, Stream::DaLatent, &[1]));
        let b = sample_latent(&target, alpha, &cfg, &mut child_rng(seed, Stream::DaLatent, &[1]));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn rendered_latent_tokens_match_target_slices(
        src_len in 1usize..12,
        tgt_len in 1usize..24,
        alpha in 0.0f64..=1.0,
        seed in 0u64..5000,
    ) {
        let cfg = AugmentConfig::default();
        let source: Vec<u32> = (0..src_len as u32).map(|i| i + 100).collect();
        let target: Vec<u32> = (0..tgt_len as u32).map(|i| i + 200).collect();
        let mut rng = child_rng(seed, Stream::DaLatent, &[2]);
        let latent = sample_latent(&target, alpha, &cfg, &mut rng);
        let out = render_extended_input(
            &source,
            &vec![1; src_len],
            &latent,
            &target,
            &vec![1; tgt_len],
        );
        let mut walker = out.tokens[src_len..].iter();
        for &(start, len) in &latent.spans {
            prop_assert_eq!(walker.next(), Some(&special::SEP));
            for k in 0..len {
                prop_assert_eq!(walker.next(), Some(&target[start + k]));
            }
        }
        prop_assert!(walker.next().is_none());
    }

    #[test]
    fn deviation_bounds_and_self_identity(sent in sentence_strategy()) {
        prop_assert_eq!(deviation(&sent, &sent), 0.0);
        let other = tokenize("zz yy xx ww vv");
        let d = deviation(&sent, &other);
        prop_assert!((0.0..=100.0).contains(&d));
    }

    #[test]
    fn diversity_is_order_invariant(
        a in sentence_strategy(),
        b in sentence_strategy(),
        c in sentence_strategy(),
    ) {
        let d1 = diversity(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let d2 = diversity(&[c, a, b]).unwrap();
        prop_assert!((d1 - d2).abs() < 1e-9);
    }
}
