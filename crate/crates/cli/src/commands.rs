//! The pipeline stages behind each subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use docaug_core::corpus::{
    encode_side, load_corpus, load_multiref, make_instances, split_on_sep, tokenize, write_corpus,
    write_multiref, MultiRefDocument, ParallelDocument, ParallelInstance, Unit, VocabSide,
    Vocabulary,
};
use docaug_core::decode::{beam_search, default_max_len};
use docaug_core::latent::{prior_input, Direction, Mode};
use docaug_core::metrics::{
    d_bleu, generation_quality, mc_posterior_ppl_corpus, s_bleu, GenGroup, MetricCounts,
    MetricReport, PplItem,
};
use docaug_core::neural::{load_checkpoint, save_checkpoint, ModelParams};
use docaug_core::pipeline::{
    both_augment, build_da_training_set, source_augment, target_augment, train_da, train_mt,
    AugmentedCorpus, GeneratedSide, LatentReuse, Origin, Provenance,
};
use docaug_core::rng::Stream;
use docaug_core::synth::generate;

use crate::config::{sidecar_path, write_sidecar, RunConfig, SidecarMeta};
use crate::CmdError;

fn validation(err: anyhow::Error) -> CmdError {
    CmdError::Validation(err)
}

fn runtime(err: anyhow::Error) -> CmdError {
    CmdError::Runtime(err)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating directory {}", parent.display()))?;
        }
    }
    Ok(())
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(docaug_core::sha256_hex(&bytes))
}

pub fn cmd_make_synth(cfg: &RunConfig) -> Result<(), CmdError> {
    let synth_cfg = cfg.synth_config();
    synth_cfg.validate().map_err(|e| validation(anyhow!(e)))?;
    let corpus = generate(&synth_cfg);
    let hash = cfg.sha256_hex();
    let outputs: [(&Path, &[ParallelDocument]); 3] = [
        (&cfg.paths.train, &corpus.train),
        (&cfg.paths.dev, &corpus.dev),
        (&cfg.paths.test, &corpus.test),
    ];
    for (path, docs) in outputs {
        ensure_parent(path).map_err(validation)?;
        write_corpus(path, docs).map_err(|e| runtime(anyhow!(e)))?;
        write_sidecar(path, cfg.seed, &hash).map_err(runtime)?;
    }
    ensure_parent(&cfg.paths.test_multiref).map_err(validation)?;
    write_multiref(&cfg.paths.test_multiref, &corpus.test_multiref)
        .map_err(|e| runtime(anyhow!(e)))?;
    write_sidecar(&cfg.paths.test_multiref, cfg.seed, &hash).map_err(runtime)?;
    println!(
        "{}",
        json!({
            "command": "make-synth",
            "train_docs": corpus.train.len(),
            "dev_docs": corpus.dev.len(),
            "test_docs": corpus.test.len(),
            "multiref_docs": corpus.test_multiref.len(),
            "seed": cfg.seed,
            "config_sha256": hash,
        })
    );
    Ok(())
}

pub fn cmd_build_vocab(cfg: &RunConfig) -> Result<(), CmdError> {
    let docs = load_corpus(&cfg.paths.train, cfg.corpus.unit).map_err(|e| validation(anyhow!(e)))?;
    let hash = cfg.sha256_hex();
    let mut written = Vec::new();
    if cfg.corpus.joint_vocab {
        let vocab = docaug_core::corpus::build_vocab(&docs, VocabSide::Joint, cfg.corpus.min_freq);
        ensure_parent(&cfg.paths.vocab).map_err(validation)?;
        vocab.save(&cfg.paths.vocab).map_err(|e| runtime(anyhow!(e)))?;
        write_sidecar(&cfg.paths.vocab, cfg.seed, &hash).map_err(runtime)?;
        written.push((cfg.paths.vocab.display().to_string(), vocab.len()));
    } else {
        let (src_path, tgt_path) = separate_vocab_paths(cfg).map_err(validation)?;
        let src = docaug_core::corpus::build_vocab(&docs, VocabSide::Src, cfg.corpus.min_freq);
        let tgt = docaug_core::corpus::build_vocab(&docs, VocabSide::Tgt, cfg.corpus.min_freq);
        for (path, vocab) in [(&src_path, &src), (&tgt_path, &tgt)] {
            ensure_parent(path).map_err(validation)?;
            vocab.save(path).map_err(|e| runtime(anyhow!(e)))?;
            write_sidecar(path, cfg.seed, &hash).map_err(runtime)?;
            written.push((path.display().to_string(), vocab.len()));
        }
    }
    println!(
        "{}",
        json!({
            "command": "build-vocab",
            "files": written.iter().map(|(p, n)| json!({"path": p, "size": n})).collect::<Vec<_>>(),
            "seed": cfg.seed,
            "config_sha256": hash,
        })
    );
    Ok(())
}

fn separate_vocab_paths(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    match (&cfg.paths.src_vocab, &cfg.paths.tgt_vocab) {
        (Some(s), Some(t)) => Ok((s.clone(), t.clone())),
        _ => bail!("paths.src_vocab and paths.tgt_vocab are required when joint_vocab = false"),
    }
}

/// Load the configured vocabularies: one joint vocabulary shared by both
/// sides, or a separate pair.
pub fn load_vocabs(cfg: &RunConfig) -> Result<(Vocabulary, Vocabulary)> {
    if cfg.corpus.joint_vocab {
        let vocab = Vocabulary::load(&cfg.paths.vocab)
            .with_context(|| format!("loading vocabulary {}", cfg.paths.vocab.display()))?;
        Ok((vocab.clone(), vocab))
    } else {
        let (src_path, tgt_path) = separate_vocab_paths(cfg)?;
        Ok((
            Vocabulary::load(&src_path)
                .with_context(|| format!("loading vocabulary {}", src_path.display()))?,
            Vocabulary::load(&tgt_path)
                .with_context(|| format!("loading vocabulary {}", tgt_path.display()))?,
        ))
    }
}

fn load_instances(
    cfg: &RunConfig,
    path: &Path,
    vocab_src: &Vocabulary,
    vocab_tgt: &Vocabulary,
) -> Result<Vec<ParallelInstance>> {
    let docs = load_corpus(path, cfg.corpus.unit)?;
    let (instances, report) =
        make_instances(&docs, cfg.corpus.unit, vocab_src, vocab_tgt, cfg.corpus.max_len);
    if report.skipped > 0 {
        eprintln!(
            "warning: skipped {} overlong instance(s) in {}: {:?}",
            report.skipped,
            path.display(),
            report.skipped_ids
        );
    }
    Ok(instances)
}

fn verify_sidecar(cfg: &RunConfig, artifact: &Path) -> Result<()> {
    let side = sidecar_path(artifact);
    if !side.exists() {
        return Ok(()); // externally produced artifact: nothing to check
    }
    let meta: SidecarMeta = serde_json::from_str(&fs::read_to_string(&side)?)
        .with_context(|| format!("parsing {}", side.display()))?;
    if meta.seed != cfg.seed {
        bail!("{}: seed {} does not match run seed {}", artifact.display(), meta.seed, cfg.seed);
    }
    if meta.config_sha256 != cfg.sha256_hex() {
        bail!("{}: config hash mismatch", artifact.display());
    }
    Ok(())
}

fn train_one_da(
    cfg: &RunConfig,
    instances: &[ParallelInstance],
    dev_instances: &[ParallelInstance],
    vocab_src: &Vocabulary,
    vocab_tgt: &Vocabulary,
    ckpt_path: &Path,
    verbose: bool,
) -> Result<(), CmdError> {
    let aug_cfg = cfg.augment_config();
    let replicas = if aug_cfg.mode == Mode::Prior { 1 } else { cfg.replicas() };
    let records = build_da_training_set(instances, &aug_cfg, replicas, Stream::DaLatent);
    let dev_records = build_da_training_set(dev_instances, &aug_cfg, 1, Stream::DevLatent);
    let (src_vocab, tgt_vocab) = (vocab_src.len(), vocab_tgt.len());
    let (params, report) = train_da(
        &records,
        &dev_records,
        cfg.model_config(src_vocab, tgt_vocab),
        &cfg.train_config(verbose),
        vocab_src.sha256_hex(),
        vocab_tgt.sha256_hex(),
    )
    .map_err(|e| runtime(anyhow!(e)))?;
    ensure_parent(ckpt_path).map_err(validation)?;
    save_checkpoint(&params, ckpt_path).map_err(|e| runtime(anyhow!(e)))?;
    println!(
        "{}",
        json!({
            "command": "train-da",
            "checkpoint": ckpt_path.display().to_string(),
            "records": records.len(),
            "epochs": report.epochs_run,
            "best_epoch": report.best_epoch,
            "best_dev_loss": report.dev_losses.iter().cloned().fold(f64::INFINITY, f64::min),
            "seed": cfg.seed,
            "config_sha256": cfg.sha256_hex(),
        })
    );
    Ok(())
}

pub fn cmd_train_da(cfg: &RunConfig, verbose: bool) -> Result<(), CmdError> {
    let (vocab_src, vocab_tgt) = load_vocabs(cfg).map_err(validation)?;
    let instances = load_instances(cfg, &cfg.paths.train, &vocab_src, &vocab_tgt)
        .map_err(validation)?;
    let dev_instances =
        load_instances(cfg, &cfg.paths.dev, &vocab_src, &vocab_tgt).map_err(validation)?;
    if instances.is_empty() {
        return Err(validation(anyhow!("training corpus produced no instances")));
    }
    match cfg.augment.direction {
        Direction::Target => train_one_da(
            cfg,
            &instances,
            &dev_instances,
            &vocab_src,
            &vocab_tgt,
            &cfg.paths.da_checkpoint,
            verbose,
        ),
        Direction::Source => {
            let swapped: Vec<_> = instances.iter().map(|i| i.swapped()).collect();
            let dev_swapped: Vec<_> = dev_instances.iter().map(|i| i.swapped()).collect();
            train_one_da(
                cfg,
                &swapped,
                &dev_swapped,
                &vocab_tgt,
                &vocab_src,
                &cfg.paths.da_reverse_checkpoint,
                verbose,
            )
        }
        Direction::Both => {
            train_one_da(
                cfg,
                &instances,
                &dev_instances,
                &vocab_src,
                &vocab_tgt,
                &cfg.paths.da_checkpoint,
                verbose,
            )?;
            let swapped: Vec<_> = instances.iter().map(|i| i.swapped()).collect();
            let dev_swapped: Vec<_> = dev_instances.iter().map(|i| i.swapped()).collect();
            train_one_da(
                cfg,
                &swapped,
                &dev_swapped,
                &vocab_tgt,
                &vocab_src,
                &cfg.paths.da_reverse_checkpoint,
                verbose,
            )
        }
    }
}

fn load_da_checkpoint(cfg: &RunConfig, path: &Path, verify: bool) -> Result<ModelParams> {
    let params = load_checkpoint(path)
        .map_err(|e| anyhow!("loading checkpoint {}: {e}", path.display()))?;
    if verify && params.seed != cfg.seed {
        bail!(
            "--verify: checkpoint {} was trained with seed {}, run seed is {}",
            path.display(),
            params.seed,
            cfg.seed
        );
    }
    Ok(params)
}

pub fn cmd_augment(cfg: &RunConfig, verify: bool) -> Result<(), CmdError> {
    let (vocab_src, vocab_tgt) = load_vocabs(cfg).map_err(validation)?;
    if verify {
        verify_sidecar(cfg, &cfg.paths.train).map_err(validation)?;
        verify_sidecar(cfg, &cfg.paths.vocab).map_err(validation)?;
    }
    let instances =
        load_instances(cfg, &cfg.paths.train, &vocab_src, &vocab_tgt).map_err(validation)?;
    let aug_cfg = cfg.augment_config();
    let reuse = if cfg.augment.resample_z {
        LatentReuse::Resample
    } else {
        LatentReuse::ReuseTraining
    };
    let config_hash = cfg.sha256_hex();

    let corpus = match cfg.augment.direction {
        Direction::Target => {
            let da = load_da_checkpoint(cfg, &cfg.paths.da_checkpoint, verify)
                .map_err(validation)?;
            let provenance = Provenance {
                da_checkpoint_sha256: hash_file(&cfg.paths.da_checkpoint).map_err(validation)?,
                config_sha256: config_hash.clone(),
                da_reverse_checkpoint_sha256: None,
            };
            target_augment(&instances, &da, &aug_cfg, reuse, &vocab_src, &vocab_tgt, &provenance)
                .map_err(pipeline_err)?
        }
        Direction::Source => {
            let rev = load_da_checkpoint(cfg, &cfg.paths.da_reverse_checkpoint, verify)
                .map_err(validation)?;
            let provenance = Provenance {
                da_checkpoint_sha256: hash_file(&cfg.paths.da_reverse_checkpoint)
                    .map_err(validation)?,
                config_sha256: config_hash.clone(),
                da_reverse_checkpoint_sha256: None,
            };
            source_augment(&instances, &rev, &aug_cfg, reuse, &vocab_src, &vocab_tgt, &provenance)
                .map_err(pipeline_err)?
        }
        Direction::Both => {
            let da = load_da_checkpoint(cfg, &cfg.paths.da_checkpoint, verify)
                .map_err(validation)?;
            let rev = load_da_checkpoint(cfg, &cfg.paths.da_reverse_checkpoint, verify)
                .map_err(validation)?;
            let provenance = Provenance {
                da_checkpoint_sha256: hash_file(&cfg.paths.da_checkpoint).map_err(validation)?,
                config_sha256: config_hash.clone(),
                da_reverse_checkpoint_sha256: Some(
                    hash_file(&cfg.paths.da_reverse_checkpoint).map_err(validation)?,
                ),
            };
            both_augment(
                &instances, &da, &rev, &aug_cfg, reuse, &vocab_src, &vocab_tgt, &provenance,
            )
            .map_err(pipeline_err)?
        }
    };
    ensure_parent(&cfg.paths.augmented).map_err(validation)?;
    corpus.save(&cfg.paths.augmented).map_err(|e| runtime(anyhow!(e)))?;
    println!(
        "{}",
        json!({
            "command": "augment",
            "augmented": cfg.paths.augmented.display().to_string(),
            "pairs": corpus.pairs.len(),
            "instances": instances.len(),
            "m": corpus.meta.m,
            "mode": corpus.meta.mode,
            "direction": corpus.meta.direction,
            "seed": cfg.seed,
            "config_sha256": config_hash,
        })
    );
    Ok(())
}

fn pipeline_err(err: docaug_core::pipeline::PipelineError) -> CmdError {
    use docaug_core::pipeline::PipelineError as P;
    match err {
        P::Neural(e) => runtime(anyhow!(e)),
        other => validation(anyhow!(other)),
    }
}

pub fn cmd_train_mt(cfg: &RunConfig, verify: bool, verbose: bool) -> Result<(), CmdError> {
    let (vocab_src, vocab_tgt) = load_vocabs(cfg).map_err(validation)?;
    let augmented = AugmentedCorpus::load(&cfg.paths.augmented).map_err(pipeline_err)?;
    if verify {
        if augmented.meta.seed != cfg.seed {
            return Err(validation(anyhow!(
                "--verify: augmented corpus seed {} does not match run seed {}",
                augmented.meta.seed,
                cfg.seed
            )));
        }
        if augmented.meta.config_sha256 != cfg.sha256_hex() {
            return Err(validation(anyhow!("--verify: augmented corpus config hash mismatch")));
        }
        let ckpt = match augmented.meta.direction {
            Direction::Source => &cfg.paths.da_reverse_checkpoint,
            _ => &cfg.paths.da_checkpoint,
        };
        let found = hash_file(ckpt).map_err(validation)?;
        if found != augmented.meta.da_checkpoint_sha256 {
            return Err(validation(anyhow!(
                "--verify: checkpoint {} hash changed since augmentation",
                ckpt.display()
            )));
        }
    }
    let dev_instances =
        load_instances(cfg, &cfg.paths.dev, &vocab_src, &vocab_tgt).map_err(validation)?;
    let (params, report) = train_mt(
        &augmented,
        &vocab_src,
        &vocab_tgt,
        &dev_instances,
        cfg.model_config(vocab_src.len(), vocab_tgt.len()),
        &cfg.train_config(verbose),
        cfg.augment.drop_gold,
    )
    .map_err(pipeline_err)?;
    ensure_parent(&cfg.paths.mt_checkpoint).map_err(validation)?;
    save_checkpoint(&params, &cfg.paths.mt_checkpoint).map_err(|e| runtime(anyhow!(e)))?;
    println!(
        "{}",
        json!({
            "command": "train-mt",
            "checkpoint": cfg.paths.mt_checkpoint.display().to_string(),
            "pairs": augmented.pairs.len(),
            "drop_gold": cfg.augment.drop_gold,
            "epochs": report.epochs_run,
            "best_epoch": report.best_epoch,
            "best_dev_loss": report.dev_losses.iter().cloned().fold(f64::INFINITY, f64::min),
            "seed": cfg.seed,
            "config_sha256": cfg.sha256_hex(),
        })
    );
    Ok(())
}

/// Translate every document of a corpus with the given model, returning
/// per-document sentence lists aligned with the references.
pub fn translate_corpus(
    cfg: &RunConfig,
    params: &ModelParams,
    docs: &[ParallelDocument],
    vocab_src: &Vocabulary,
    vocab_tgt: &Vocabulary,
) -> Result<Vec<Vec<Vec<String>>>, CmdError> {
    let (instances, _) =
        make_instances(docs, cfg.corpus.unit, vocab_src, vocab_tgt, cfg.corpus.max_len);
    let beam = cfg.augment.beam;
    let outputs: Result<Vec<Vec<u32>>, _> = instances
        .par_iter()
        .map(|inst| {
            let input = prior_input(&inst.source, &inst.src_group_tags);
            beam_search(params, &input, beam, default_max_len(&input))
                .map(|hyps| hyps[0].surface_tokens().to_vec())
        })
        .collect();
    let outputs = outputs.map_err(|e| runtime(anyhow!(e)))?;

    let mut result = Vec::with_capacity(docs.len());
    let mut cursor = 0usize;
    for doc in docs {
        match cfg.corpus.unit {
            Unit::Sentence => {
                let k = doc.src_sentences.len();
                let sents = outputs[cursor..cursor + k]
                    .iter()
                    .map(|ids| vocab_tgt.decode(ids))
                    .collect();
                cursor += k;
                result.push(sents);
            }
            Unit::Document => {
                let ids = &outputs[cursor];
                cursor += 1;
                let chunks = split_on_sep(ids, doc.src_sentences.len());
                result.push(chunks.iter().map(|c| vocab_tgt.decode(c)).collect());
            }
        }
    }
    Ok(result)
}

pub struct EvaluateArgs {
    pub hyp: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub augmented: Option<PathBuf>,
    pub save_hyp: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ReportEnvelope {
    seed: u64,
    config_sha256: String,
    report: MetricReport,
}

pub fn cmd_evaluate(cfg: &RunConfig, args: &EvaluateArgs) -> Result<(), CmdError> {
    let ref_path = args.reference.clone().unwrap_or_else(|| cfg.paths.test.clone());
    let ref_docs = load_corpus(&ref_path, cfg.corpus.unit).map_err(|e| validation(anyhow!(e)))?;

    let mut report = MetricReport::default();
    let mut documents = 0usize;
    let mut sentences = 0usize;
    let mut tokens = 0usize;

    let hyp_docs: Option<Vec<Vec<Vec<String>>>> = if let Some(hyp_path) = &args.hyp {
        let docs = load_corpus(hyp_path, cfg.corpus.unit).map_err(|e| validation(anyhow!(e)))?;
        Some(docs.into_iter().map(|d| d.tgt_sentences).collect())
    } else if cfg.paths.mt_checkpoint.exists() {
        let (vocab_src, vocab_tgt) = load_vocabs(cfg).map_err(validation)?;
        let params = load_checkpoint(&cfg.paths.mt_checkpoint)
            .map_err(|e| validation(anyhow!("loading {}: {e}", cfg.paths.mt_checkpoint.display())))?;
        Some(translate_corpus(cfg, &params, &ref_docs, &vocab_src, &vocab_tgt)?)
    } else if args.augmented.is_none() {
        return Err(validation(anyhow!(
            "nothing to evaluate: pass --hyp, provide an MT checkpoint, or pass --augmented"
        )));
    } else {
        None
    };

    if let Some(hyp_docs) = &hyp_docs {
        if hyp_docs.len() != ref_docs.len() {
            return Err(validation(anyhow!(
                "alignment error: {} hypothesis documents vs {} reference documents",
                hyp_docs.len(),
                ref_docs.len()
            )));
        }
        let mut hyp_sents = Vec::new();
        let mut ref_sents = Vec::new();
        let mut hyp_flat = Vec::new();
        let mut ref_flat = Vec::new();
        for (h_doc, r_doc) in hyp_docs.iter().zip(&ref_docs) {
            if h_doc.len() != r_doc.tgt_sentences.len() {
                return Err(validation(anyhow!(
                    "alignment error in {}: {} hypothesis sentences vs {} references",
                    r_doc.doc_id,
                    h_doc.len(),
                    r_doc.tgt_sentences.len()
                )));
            }
            hyp_flat.push(h_doc.concat());
            ref_flat.push(r_doc.tgt_sentences.concat());
            for (h, r) in h_doc.iter().zip(&r_doc.tgt_sentences) {
                tokens += r.len();
                hyp_sents.push(h.clone());
                ref_sents.push(r.clone());
            }
        }
        documents = ref_docs.len();
        sentences = ref_sents.len();
        report.s_bleu =
            Some(s_bleu(&hyp_sents, &ref_sents).map_err(|e| validation(anyhow!(e)))?);
        report.d_bleu = Some(d_bleu(&hyp_flat, &ref_flat).map_err(|e| validation(anyhow!(e)))?);

        if let Some(save) = &args.save_hyp {
            let docs: Vec<ParallelDocument> = hyp_docs
                .iter()
                .zip(&ref_docs)
                .map(|(h, r)| ParallelDocument {
                    doc_id: r.doc_id.clone(),
                    src_sentences: r.src_sentences.clone(),
                    tgt_sentences: h.clone(),
                })
                .collect();
            ensure_parent(save).map_err(validation)?;
            write_corpus(save, &docs).map_err(|e| runtime(anyhow!(e)))?;
            write_sidecar(save, cfg.seed, &cfg.sha256_hex()).map_err(runtime)?;
        }
    }

    if let Some(aug_path) = &args.augmented {
        let corpus = AugmentedCorpus::load(aug_path).map_err(pipeline_err)?;
        let mut groups: Vec<GenGroup> = Vec::new();
        let mut current: Option<GenGroup> = None;
        for pair in &corpus.pairs {
            match pair.origin {
                Origin::Gold => {
                    if let Some(g) = current.take() {
                        groups.push(g);
                    }
                    current = Some(GenGroup { gold: pair.tgt.clone(), generated: Vec::new() });
                }
                Origin::Generated => {
                    if pair.side == Some(GeneratedSide::Src) {
                        continue; // novel-source pairs keep the gold target
                    }
                    if let Some(g) = current.as_mut() {
                        g.generated.push(pair.tgt.clone());
                    }
                }
            }
        }
        if let Some(g) = current.take() {
            groups.push(g);
        }
        let quality = generation_quality(&groups);
        report.deviation_mean = Some(quality.deviation_mean);
        report.deviation_corpus = Some(quality.deviation_corpus);
        report.diversity = quality.diversity;
        if documents == 0 {
            documents = groups.len();
            sentences = groups.len();
        }
    }

    report.counts = MetricCounts { sentences, documents, tokens };
    let envelope =
        ReportEnvelope { seed: cfg.seed, config_sha256: cfg.sha256_hex(), report };
    let rendered = serde_json::to_string_pretty(&envelope).expect("report serializes");
    if let Some(out) = &args.out {
        ensure_parent(out).map_err(validation)?;
        fs::write(out, format!("{rendered}\n")).map_err(|e| runtime(anyhow!(e)))?;
    }
    println!("{rendered}");
    Ok(())
}

pub fn cmd_ppl_eval(cfg: &RunConfig, samples: Option<usize>) -> Result<(), CmdError> {
    let samples = samples.unwrap_or(cfg.ppl.samples);
    if samples < 1 {
        return Err(validation(anyhow!("--samples must be at least 1")));
    }
    let (vocab_src, vocab_tgt) = load_vocabs(cfg).map_err(validation)?;
    let multiref =
        load_multiref(&cfg.paths.test_multiref).map_err(|e| validation(anyhow!(e)))?;
    let params = load_da_checkpoint(cfg, &cfg.paths.da_checkpoint, false).map_err(validation)?;
    let items = multiref_items(cfg, &multiref, &vocab_src, &vocab_tgt).map_err(validation)?;
    let aug_cfg = cfg.augment_config();
    let ppl = mc_posterior_ppl_corpus(&params, &items, samples, &aug_cfg, cfg.seed)
        .map_err(|e| runtime(anyhow!(e)))?;
    println!(
        "{}",
        json!({
            "command": "ppl-eval",
            "ppl": ppl,
            "samples": samples,
            "mode": aug_cfg.mode,
            "items": items.len(),
            "seed": cfg.seed,
            "config_sha256": cfg.sha256_hex(),
        })
    );
    Ok(())
}

/// Encode multi-reference documents as perplexity items: one per sentence in
/// sentence unit, one per document in document unit.
pub fn multiref_items(
    cfg: &RunConfig,
    docs: &[MultiRefDocument],
    vocab_src: &Vocabulary,
    vocab_tgt: &Vocabulary,
) -> Result<Vec<PplItem>> {
    let mut items = Vec::new();
    for doc in docs {
        let src_sents: Vec<Vec<String>> = doc.src.iter().map(|s| tokenize(s)).collect();
        let ref_sents: Vec<Vec<Vec<String>>> =
            doc.refs.iter().map(|r| r.iter().map(|s| tokenize(s)).collect()).collect();
        for r in &ref_sents {
            if r.len() != src_sents.len() {
                bail!("{}: reference has {} sentences, source {}", doc.doc_id, r.len(), src_sents.len());
            }
        }
        match cfg.corpus.unit {
            Unit::Sentence => {
                for k in 0..src_sents.len() {
                    let (source_ids, source_tags) =
                        encode_side(&src_sents[k..=k], vocab_src, Unit::Sentence);
                    let refs = ref_sents
                        .iter()
                        .map(|r| encode_side(&r[k..=k], vocab_tgt, Unit::Sentence))
                        .collect();
                    items.push(PplItem { source_ids, source_tags, refs });
                }
            }
            Unit::Document => {
                let (source_ids, source_tags) =
                    encode_side(&src_sents, vocab_src, Unit::Document);
                let refs = ref_sents
                    .iter()
                    .map(|r| encode_side(r, vocab_tgt, Unit::Document))
                    .collect();
                items.push(PplItem { source_ids, source_tags, refs });
            }
        }
    }
    Ok(items)
}
