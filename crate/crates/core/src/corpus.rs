//! Document-aligned parallel corpora: loading, vocabularies, instances.
//!
//! Corpus files are UTF-8 JSONL with one document per line:
//! `{"doc_id": string, "src": [string...], "tgt": [string...]}`. Sentences
//! are pre-tokenized; tokenization here is whitespace splitting only.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::special;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("alignment error in document {doc_id}: {src} source vs {tgt} target sentences")]
    Alignment { doc_id: String, src: usize, tgt: usize },
    #[error("document {doc_id} has an empty sentence on the {side} side")]
    EmptySentence { doc_id: String, side: &'static str },
    #[error("vocabulary file {path} is malformed at line {line}")]
    VocabFormat { path: String, line: usize },
}

/// Translation unit: one instance per sentence pair, or per document.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Sentence,
    Document,
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Unit::Sentence => write!(f, "sentence"),
            Unit::Document => write!(f, "document"),
        }
    }
}

/// One aligned document: parallel lists of whitespace-tokenized sentences.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelDocument {
    pub doc_id: String,
    pub src_sentences: Vec<Vec<String>>,
    pub tgt_sentences: Vec<Vec<String>>,
}

/// One model-ready source/target pair with per-token group tags.
///
/// Group tags are 1-based sentence indices; in sentence unit every tag is 1.
/// In document unit, sentences are joined with the sep token on both sides
/// and each separator carries the tag of the sentence it terminates.
#[derive(Clone, Debug, PartialEq)]
pub struct ParallelInstance {
    pub instance_id: String,
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub src_group_tags: Vec<u32>,
    pub tgt_group_tags: Vec<u32>,
    pub unit: Unit,
}

impl ParallelInstance {
    /// Swap the source and target sides (used for source-side augmentation).
    pub fn swapped(&self) -> ParallelInstance {
        ParallelInstance {
            instance_id: self.instance_id.clone(),
            source: self.target.clone(),
            target: self.source.clone(),
            src_group_tags: self.tgt_group_tags.clone(),
            tgt_group_tags: self.src_group_tags.clone(),
            unit: self.unit,
        }
    }

    pub fn group_count(&self) -> u32 {
        self.src_group_tags.iter().copied().max().unwrap_or(1)
    }
}

/// A document with several alternative target references, for posterior
/// perplexity evaluation. JSONL: `{"doc_id", "src": [...], "refs": [[...]]}`.
#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct MultiRefDocument {
    pub doc_id: String,
    pub src: Vec<String>,
    pub refs: Vec<Vec<String>>,
}

#[derive(Deserialize)]
struct RawDocument {
    doc_id: String,
    src: Vec<String>,
    tgt: Vec<String>,
}

/// Serializable form of [`ParallelDocument`] for writing corpus files.
#[derive(Serialize)]
struct RawDocumentOut<'a> {
    doc_id: &'a str,
    src: Vec<String>,
    tgt: Vec<String>,
}

pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence.split_whitespace().map(str::to_string).collect()
}

fn validate_document(doc: &ParallelDocument) -> Result<(), CorpusError> {
    if doc.src_sentences.len() != doc.tgt_sentences.len() {
        return Err(CorpusError::Alignment {
            doc_id: doc.doc_id.clone(),
            src: doc.src_sentences.len(),
            tgt: doc.tgt_sentences.len(),
        });
    }
    for s in &doc.src_sentences {
        if s.is_empty() {
            return Err(CorpusError::EmptySentence { doc_id: doc.doc_id.clone(), side: "source" });
        }
    }
    for t in &doc.tgt_sentences {
        if t.is_empty() {
            return Err(CorpusError::EmptySentence { doc_id: doc.doc_id.clone(), side: "target" });
        }
    }
    Ok(())
}

/// Load a corpus file, preserving document order and validating alignment.
pub fn load_corpus(path: &Path, _unit: Unit) -> Result<Vec<ParallelDocument>, CorpusError> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut docs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let raw: RawDocument = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let doc = ParallelDocument {
            doc_id: raw.doc_id,
            src_sentences: raw.src.iter().map(|s| tokenize(s)).collect(),
            tgt_sentences: raw.tgt.iter().map(|s| tokenize(s)).collect(),
        };
        validate_document(&doc)?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Write documents in the corpus JSONL schema.
pub fn write_corpus(path: &Path, docs: &[ParallelDocument]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for doc in docs {
        let raw = RawDocumentOut {
            doc_id: &doc.doc_id,
            src: doc.src_sentences.iter().map(|s| s.join(" ")).collect(),
            tgt: doc.tgt_sentences.iter().map(|s| s.join(" ")).collect(),
        };
        out.push_str(&serde_json::to_string(&raw).expect("document serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_multiref(path: &Path) -> Result<Vec<MultiRefDocument>, CorpusError> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut docs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let doc: MultiRefDocument = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_multiref(path: &Path, docs: &[MultiRefDocument]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for doc in docs {
        out.push_str(&serde_json::to_string(doc).expect("document serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Which side(s) of the corpus feed a vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabSide {
    Src,
    Tgt,
    Joint,
}

/// Token/id mapping with the five reserved specials at ids 0..4.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
    freqs: Vec<u64>,
}

impl Vocabulary {
    fn with_entries(entries: Vec<(String, u64)>) -> Vocabulary {
        let mut id_to_token: Vec<String> =
            special::SURFACES.iter().map(|s| s.to_string()).collect();
        let mut freqs = vec![0u64; special::COUNT];
        for (tok, freq) in entries {
            id_to_token.push(tok);
            freqs.push(freq);
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { id_to_token, token_to_id, freqs }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn encode_token(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(special::UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.encode_token(t)).collect()
    }

    pub fn decode_id(&self, id: u32) -> &str {
        self.id_to_token
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(special::SURFACES[special::UNK as usize])
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter().map(|&id| self.decode_id(id).to_string()).collect()
    }

    /// Serialize in the vocabulary file format: one `token<TAB>frequency` per
    /// line, in id order, specials omitted.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for id in special::COUNT..self.id_to_token.len() {
            out.push_str(&self.id_to_token[id]);
            out.push('\t');
            out.push_str(&self.freqs[id].to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(text: &str, path: &str) -> Result<Vocabulary, CorpusError> {
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let (tok, freq) = line.split_once('\t').ok_or(CorpusError::VocabFormat {
                path: path.to_string(),
                line: idx + 1,
            })?;
            let freq: u64 = freq.parse().map_err(|_| CorpusError::VocabFormat {
                path: path.to_string(),
                line: idx + 1,
            })?;
            entries.push((tok.to_string(), freq));
        }
        Ok(Vocabulary::with_entries(entries))
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_file_string()).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Vocabulary, CorpusError> {
        let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Vocabulary::from_file_string(&text, &path.display().to_string())
    }

    /// Hash of the canonical file serialization; identifies the vocabulary in
    /// checkpoint headers.
    pub fn sha256_hex(&self) -> String {
        crate::sha256_hex(self.to_file_string().as_bytes())
    }
}

/// Count token frequencies on the requested side(s) and keep tokens with
/// frequency >= `min_freq`, ordered by frequency descending then token.
pub fn build_vocab(docs: &[ParallelDocument], side: VocabSide, min_freq: u64) -> Vocabulary {
    assert!(min_freq >= 1, "min_freq must be at least 1");
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for doc in docs {
        let sides: &[&Vec<Vec<String>>] = match side {
            VocabSide::Src => &[&doc.src_sentences],
            VocabSide::Tgt => &[&doc.tgt_sentences],
            VocabSide::Joint => &[&doc.src_sentences, &doc.tgt_sentences],
        };
        for sentences in sides {
            for sent in sentences.iter() {
                for tok in sent {
                    *counts.entry(tok.as_str()).or_insert(0) += 1;
                }
            }
        }
    }
    let mut entries: Vec<(String, u64)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_freq)
        .map(|(t, c)| (t.to_string(), c))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::with_entries(entries)
}

/// Instances skipped for exceeding the length limit.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SkipReport {
    pub skipped: usize,
    pub skipped_ids: Vec<String>,
}

/// Convert documents into instances.
///
/// Sentence unit: one instance per sentence pair, all group tags 1.
/// Document unit: one instance per document; sentences on both sides are
/// joined with sep and tagged with their 1-based sentence index, the joining
/// sep carrying the tag of the sentence it follows.
pub fn make_instances(
    docs: &[ParallelDocument],
    unit: Unit,
    vocab_src: &Vocabulary,
    vocab_tgt: &Vocabulary,
    max_len: usize,
) -> (Vec<ParallelInstance>, SkipReport) {
    let mut instances = Vec::new();
    let mut report = SkipReport::default();
    for doc in docs {
        match unit {
            Unit::Sentence => {
                for (k, (src, tgt)) in
                    doc.src_sentences.iter().zip(&doc.tgt_sentences).enumerate()
                {
                    let instance_id = format!("{}.{}", doc.doc_id, k + 1);
                    let source = vocab_src.encode(src);
                    let target = vocab_tgt.encode(tgt);
                    if source.len() > max_len || target.len() > max_len {
                        report.skipped += 1;
                        report.skipped_ids.push(instance_id);
                        continue;
                    }
                    let src_tags = vec![1u32; source.len()];
                    let tgt_tags = vec![1u32; target.len()];
                    instances.push(ParallelInstance {
                        instance_id,
                        source,
                        target,
                        src_group_tags: src_tags,
                        tgt_group_tags: tgt_tags,
                        unit,
                    });
                }
            }
            Unit::Document => {
                let (source, src_tags) = join_sentences(&doc.src_sentences, vocab_src);
                let (target, tgt_tags) = join_sentences(&doc.tgt_sentences, vocab_tgt);
                if source.len() > max_len || target.len() > max_len {
                    report.skipped += 1;
                    report.skipped_ids.push(doc.doc_id.clone());
                    continue;
                }
                instances.push(ParallelInstance {
                    instance_id: doc.doc_id.clone(),
                    source,
                    target,
                    src_group_tags: src_tags,
                    tgt_group_tags: tgt_tags,
                    unit,
                });
            }
        }
    }
    (instances, report)
}

/// Encode one side of a document as a single sequence with group tags:
/// sentence-unit callers pass a single sentence; document unit joins
/// sentences with sep exactly like [`make_instances`].
pub fn encode_side(sentences: &[Vec<String>], vocab: &Vocabulary, unit: Unit) -> (Vec<u32>, Vec<u32>) {
    match unit {
        Unit::Sentence => {
            assert_eq!(sentences.len(), 1, "sentence unit encodes one sentence");
            let ids = vocab.encode(&sentences[0]);
            let tags = vec![1u32; ids.len()];
            (ids, tags)
        }
        Unit::Document => join_sentences(sentences, vocab),
    }
}

fn join_sentences(sentences: &[Vec<String>], vocab: &Vocabulary) -> (Vec<u32>, Vec<u32>) {
    let mut ids = Vec::new();
    let mut tags = Vec::new();
    for (k, sent) in sentences.iter().enumerate() {
        let tag = (k + 1) as u32;
        for tok in sent {
            ids.push(vocab.encode_token(tok));
            tags.push(tag);
        }
        if k + 1 < sentences.len() {
            ids.push(special::SEP);
            tags.push(tag);
        }
    }
    (ids, tags)
}

/// Split a document-unit token sequence back into per-sentence chunks on the
/// sep token, forcing exactly `groups` chunks: missing trailing sentences
/// come back empty and surplus material is merged into the last chunk.
pub fn split_on_sep(ids: &[u32], groups: usize) -> Vec<Vec<u32>> {
    let mut chunks: Vec<Vec<u32>> = vec![Vec::new()];
    for &id in ids {
        if id == special::SEP && chunks.len() < groups {
            chunks.push(Vec::new());
        } else if id != special::SEP {
            chunks.last_mut().unwrap().push(id);
        } else {
            // surplus separator inside the final chunk: drop it
        }
    }
    while chunks.len() < groups {
        chunks.push(Vec::new());
    }
    chunks
}

/// Group tags for a generated document-unit sequence: tags advance after
/// each sep, capped at `groups`.
pub fn tags_from_seps(ids: &[u32], groups: u32) -> Vec<u32> {
    let mut tags = Vec::with_capacity(ids.len());
    let mut tag = 1u32;
    for &id in ids {
        tags.push(tag);
        if id == special::SEP && tag < groups {
            tag += 1;
        }
    }
    tags
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{}", l).unwrap();
        }
        f.flush().unwrap();
        f
    }

    #[test]
    fn load_single_document() {
        let f = write_tmp(&[r#"{"doc_id":"d1","src":["a b"],"tgt":["c d"]}"#]);
        let docs = load_corpus(f.path(), Unit::Sentence).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].src_sentences, vec![vec!["a".to_string(), "b".to_string()]]);
        assert_eq!(docs[0].tgt_sentences, vec![vec!["c".to_string(), "d".to_string()]]);
    }

    #[test]
    fn misaligned_counts_name_the_document() {
        let f = write_tmp(&[r#"{"doc_id":"bad","src":["a","b"],"tgt":["x","y","z"]}"#]);
        match load_corpus(f.path(), Unit::Sentence) {
            Err(CorpusError::Alignment { doc_id, src, tgt }) => {
                assert_eq!(doc_id, "bad");
                assert_eq!((src, tgt), (2, 3));
            }
            other => panic!("expected alignment error, got {:?}", other.map(|d| d.len())),
        }
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let docs = load_corpus(f.path(), Unit::Document).unwrap();
        assert!(docs.is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_tmp(&[
            r#"{"doc_id":"d1","src":["a"],"tgt":["b"]}"#,
            r#"{"doc_id":"d2","src":"#,
        ]);
        match load_corpus(f.path(), Unit::Sentence) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {:?}", other.map(|d| d.len())),
        }
    }

    fn docs_from(pairs: &[(&str, &str)]) -> Vec<ParallelDocument> {
        vec![ParallelDocument {
            doc_id: "d".into(),
            src_sentences: pairs.iter().map(|(s, _)| tokenize(s)).collect(),
            tgt_sentences: pairs.iter().map(|(_, t)| tokenize(t)).collect(),
        }]
    }

    #[test]
    fn vocab_threshold_rule() {
        let docs = docs_from(&[("a a a b", "x")]);
        let v = build_vocab(&docs, VocabSide::Src, 2);
        assert_eq!(v.encode_token("a"), 5);
        assert_eq!(v.encode_token("b"), special::UNK);

        let v1 = build_vocab(&docs, VocabSide::Src, 1);
        assert_ne!(v1.encode_token("b"), special::UNK);
    }

    #[test]
    fn vocab_is_deterministic_byte_for_byte() {
        let docs = docs_from(&[("c a b a", "z y z")]);
        let a = build_vocab(&docs, VocabSide::Joint, 1).to_file_string();
        let b = build_vocab(&docs, VocabSide::Joint, 1).to_file_string();
        assert_eq!(a, b);
        // frequency desc then lexicographic
        assert!(a.starts_with("a\t2\nz\t2\nb\t1\nc\t1\ny\t1\n"));
    }

    #[test]
    fn vocab_file_round_trip() {
        let docs = docs_from(&[("hello world world", "bonjour monde monde")]);
        let v = build_vocab(&docs, VocabSide::Joint, 1);
        let text = v.to_file_string();
        let v2 = Vocabulary::from_file_string(&text, "mem").unwrap();
        assert_eq!(v, v2);
        assert_eq!(v.sha256_hex(), v2.sha256_hex());
    }

    #[test]
    fn round_trip_with_unk_surface() {
        let docs = docs_from(&[("a b", "x")]);
        let v = build_vocab(&docs, VocabSide::Src, 1);
        let toks = tokenize("a b zzz");
        let ids = v.encode(&toks);
        let back = v.decode(&ids);
        assert_eq!(back, vec!["a".to_string(), "b".to_string(), "<unk>".to_string()]);
    }

    #[test]
    fn sentence_unit_instances() {
        let docs = docs_from(&[("a b", "c d"), ("e", "f g")]);
        let v_src = build_vocab(&docs, VocabSide::Src, 1);
        let v_tgt = build_vocab(&docs, VocabSide::Tgt, 1);
        let (inst, report) = make_instances(&docs, Unit::Sentence, &v_src, &v_tgt, 512);
        assert_eq!(inst.len(), 2);
        assert_eq!(report.skipped, 0);
        assert!(inst.iter().all(|i| i.src_group_tags.iter().all(|&t| t == 1)));
        assert_eq!(inst[0].instance_id, "d.1");
    }

    #[test]
    fn document_unit_tags_and_seps() {
        let docs = docs_from(&[("a b", "c d"), ("e", "f g")]);
        let v_src = build_vocab(&docs, VocabSide::Src, 1);
        let v_tgt = build_vocab(&docs, VocabSide::Tgt, 1);
        let (inst, _) = make_instances(&docs, Unit::Document, &v_src, &v_tgt, 512);
        assert_eq!(inst.len(), 1);
        let i = &inst[0];
        // "a b <sep> e" with tags [1,1,1,2]
        assert_eq!(i.source.len(), 4);
        assert_eq!(i.source[2], special::SEP);
        assert_eq!(i.src_group_tags, vec![1, 1, 1, 2]);
        // "c d <sep> f g" with tags [1,1,1,2,2]
        assert_eq!(i.tgt_group_tags, vec![1, 1, 1, 2, 2]);
        assert_eq!(i.group_count(), 2);
    }

    #[test]
    fn group_tag_partition_reconstructs_document() {
        let docs = docs_from(&[("a b", "c d"), ("e e", "f g"), ("b a", "d c")]);
        let v_src = build_vocab(&docs, VocabSide::Src, 1);
        let v_tgt = build_vocab(&docs, VocabSide::Tgt, 1);
        let (inst, _) = make_instances(&docs, Unit::Document, &v_src, &v_tgt, 512);
        let i = &inst[0];
        let chunks = split_on_sep(&i.target, 3);
        assert_eq!(chunks.len(), 3);
        for (k, chunk) in chunks.iter().enumerate() {
            let expect = v_tgt.encode(&docs[0].tgt_sentences[k]);
            assert_eq!(chunk, &expect, "sentence {}", k + 1);
            // every token of the chunk carried the right tag
            let tags: Vec<u32> = i
                .target
                .iter()
                .zip(&i.tgt_group_tags)
                .filter(|&(id, _)| *id != special::SEP)
                .map(|(_, &t)| t)
                .collect();
            assert!(tags.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn overlong_document_is_skipped_with_report() {
        let docs = docs_from(&[("a a a a a a", "b b b b b b")]);
        let v_src = build_vocab(&docs, VocabSide::Src, 1);
        let v_tgt = build_vocab(&docs, VocabSide::Tgt, 1);
        let (inst, report) = make_instances(&docs, Unit::Document, &v_src, &v_tgt, 4);
        assert!(inst.is_empty());
        assert_eq!(report.skipped, 1);
        assert_eq!(report.skipped_ids, vec!["d".to_string()]);
    }

    #[test]
    fn tags_from_seps_caps_at_group_count() {
        let ids = vec![9, special::SEP, 9, special::SEP, 9, special::SEP, 9];
        let tags = tags_from_seps(&ids, 2);
        assert_eq!(tags, vec![1, 1, 2, 2, 2, 2, 2]);
    }
}
