//! Run configuration: a flat TOML file with sections, overridden by flags,
//! fully resolved before any stage runs. The SHA-256 of the resolved TOML
//! serialization identifies the run in every artifact.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use docaug_core::corpus::Unit;
use docaug_core::latent::{AugmentConfig, Direction, Mode};
use docaug_core::neural::{AttentionMode, ModelConfig, TrainConfig};
use docaug_core::synth::SynthConfig;

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub out_dir: PathBuf,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    pub test_multiref: PathBuf,
    pub vocab: PathBuf,
    pub src_vocab: Option<PathBuf>,
    pub tgt_vocab: Option<PathBuf>,
    pub da_checkpoint: PathBuf,
    pub da_reverse_checkpoint: PathBuf,
    pub mt_checkpoint: PathBuf,
    pub augmented: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        let out = default_out_dir();
        PathsSection {
            train: PathBuf::from("train.jsonl"),
            dev: PathBuf::from("dev.jsonl"),
            test: PathBuf::from("test.jsonl"),
            test_multiref: PathBuf::from("test_multiref.jsonl"),
            vocab: out.join("joint.vocab"),
            src_vocab: None,
            tgt_vocab: None,
            da_checkpoint: out.join("da.ckpt"),
            da_reverse_checkpoint: out.join("da_reverse.ckpt"),
            mt_checkpoint: out.join("mt.ckpt"),
            augmented: out.join("augmented.jsonl"),
            out_dir: out,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub unit: Unit,
    pub min_freq: u64,
    pub max_len: usize,
    pub joint_vocab: bool,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { unit: Unit::Sentence, min_freq: 1, max_len: 512, joint_vocab: true }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub attention_mode: AttentionMode,
    pub combined_top_layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layers: 2,
            heads: 4,
            model_dim: 64,
            ffn_dim: 128,
            dropout: 0.1,
            label_smoothing: 0.1,
            attention_mode: AttentionMode::Grouped,
            combined_top_layers: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub mode: Mode,
    pub direction: Direction,
    pub m: usize,
    pub beam: usize,
    pub beta_a: f64,
    pub beta_b: f64,
    pub ngram_min: usize,
    pub ngram_max: usize,
    /// Latent replicas per instance when building the conditioned training
    /// set; 0 means "same as m".
    pub replicas: usize,
    pub resample_z: bool,
    pub drop_gold: bool,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            mode: Mode::Posterior,
            direction: Direction::Target,
            m: 4,
            beam: 5,
            beta_a: 2.0,
            beta_b: 3.0,
            ngram_min: 1,
            ngram_max: 3,
            replicas: 0,
            resample_z: false,
            drop_gold: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub warmup_steps: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { lr: 3e-3, warmup_steps: 100, max_epochs: 20, patience: 3, batch_size: 16 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PplSection {
    pub samples: usize,
}

impl Default for PplSection {
    fn default() -> Self {
        PplSection { samples: 100 }
    }
}

/// Fully resolved settings for one reproducible run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub paths: PathsSection,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub augment: AugmentSection,
    pub train: TrainSection,
    pub ppl: PplSection,
    pub synth: SynthSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub synonym_pairs: usize,
    pub train_docs: usize,
    pub dev_docs: usize,
    pub test_docs: usize,
    pub sentences_per_doc: usize,
    pub sent_len_min: usize,
    pub sent_len_max: usize,
    pub noise: f64,
    pub refs_per_doc: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        SynthSection {
            synonym_pairs: s.synonym_pairs,
            train_docs: s.train_docs,
            dev_docs: s.dev_docs,
            test_docs: s.test_docs,
            sentences_per_doc: s.sentences_per_doc,
            sent_len_min: s.sent_len_min,
            sent_len_max: s.sent_len_max,
            noise: s.noise,
            refs_per_doc: s.refs_per_doc,
        }
    }
}

/// Flag overrides applied on top of the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub unit: Option<Unit>,
    pub mode: Option<Mode>,
    pub direction: Option<Direction>,
    pub m: Option<usize>,
    pub beam: Option<usize>,
    pub beta: Option<(f64, f64)>,
    pub ngram: Option<(usize, usize)>,
    pub drop_gold: bool,
    pub resample_z: bool,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(config_path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
        let mut cfg: RunConfig = match config_path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(threads) = overrides.threads {
            cfg.threads = threads;
        }
        if let Some(unit) = overrides.unit {
            cfg.corpus.unit = unit;
        }
        if let Some(mode) = overrides.mode {
            cfg.augment.mode = mode;
        }
        if let Some(direction) = overrides.direction {
            cfg.augment.direction = direction;
        }
        if let Some(m) = overrides.m {
            cfg.augment.m = m;
        }
        if let Some(beam) = overrides.beam {
            cfg.augment.beam = beam;
        }
        if let Some((a, b)) = overrides.beta {
            cfg.augment.beta_a = a;
            cfg.augment.beta_b = b;
        }
        if let Some((lo, hi)) = overrides.ngram {
            cfg.augment.ngram_min = lo;
            cfg.augment.ngram_max = hi;
        }
        if overrides.drop_gold {
            cfg.augment.drop_gold = true;
        }
        if overrides.resample_z {
            cfg.augment.resample_z = true;
        }
        if let Some(dir) = &overrides.out_dir {
            cfg.rebase_out_dir(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Point every artifact default beneath a new output directory.
    fn rebase_out_dir(&mut self, dir: &Path) {
        let defaults = PathsSection::default();
        let old_out = self.paths.out_dir.clone();
        let rebase = |p: &mut PathBuf, default_rel: &Path| {
            if let Ok(rel) = p.strip_prefix(&old_out) {
                *p = dir.join(rel);
            } else if p == default_rel {
                *p = dir.join(default_rel);
            }
        };
        rebase(&mut self.paths.vocab, &defaults.vocab);
        rebase(&mut self.paths.da_checkpoint, &defaults.da_checkpoint);
        rebase(&mut self.paths.da_reverse_checkpoint, &defaults.da_reverse_checkpoint);
        rebase(&mut self.paths.mt_checkpoint, &defaults.mt_checkpoint);
        rebase(&mut self.paths.augmented, &defaults.augmented);
        self.paths.out_dir = dir.to_path_buf();
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(0, 0).validate().map_err(|e| anyhow::anyhow!(e))?;
        self.augment_config().validate().map_err(|e| anyhow::anyhow!(e))?;
        if self.corpus.min_freq < 1 {
            bail!("corpus.min_freq must be at least 1");
        }
        if self.train.batch_size < 1 || self.train.max_epochs < 1 {
            bail!("train.batch_size and train.max_epochs must be at least 1");
        }
        if self.ppl.samples < 1 {
            bail!("ppl.samples must be at least 1");
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration serialization.
    pub fn sha256_hex(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        docaug_core::sha256_hex(text.as_bytes())
    }

    pub fn model_config(&self, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            layers: self.model.layers,
            heads: self.model.heads,
            model_dim: self.model.model_dim,
            ffn_dim: self.model.ffn_dim,
            src_vocab,
            tgt_vocab,
            max_len: self.corpus.max_len,
            dropout: self.model.dropout,
            label_smoothing: self.model.label_smoothing,
            attention_mode: self.model.attention_mode,
            combined_top_layers: self.model.combined_top_layers,
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            beta_a: self.augment.beta_a,
            beta_b: self.augment.beta_b,
            ngram_min: self.augment.ngram_min,
            ngram_max: self.augment.ngram_max,
            num_samples: self.augment.m.max(1),
            beam_size: self.augment.beam,
            seed: self.seed,
            mode: self.augment.mode,
            direction: self.augment.direction,
        }
    }

    pub fn train_config(&self, verbose: bool) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            warmup_steps: self.train.warmup_steps,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            batch_size: self.train.batch_size,
            seed: self.seed,
            verbose,
            ..TrainConfig::default()
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            synonym_pairs: self.synth.synonym_pairs,
            train_docs: self.synth.train_docs,
            dev_docs: self.synth.dev_docs,
            test_docs: self.synth.test_docs,
            sentences_per_doc: self.synth.sentences_per_doc,
            sent_len_min: self.synth.sent_len_min,
            sent_len_max: self.synth.sent_len_max,
            noise: self.synth.noise,
            refs_per_doc: self.synth.refs_per_doc,
            seed: self.seed,
        }
    }

    pub fn replicas(&self) -> usize {
        if self.augment.replicas == 0 {
            self.augment.m.max(1)
        } else {
            self.augment.replicas
        }
    }
}

/// Sidecar metadata for artifacts whose file format admits no header.
#[derive(Serialize, Deserialize)]
pub struct SidecarMeta {
    pub seed: u64,
    pub config_sha256: String,
}

pub fn write_sidecar(artifact: &Path, seed: u64, config_sha256: &str) -> Result<()> {
    let meta = SidecarMeta { seed, config_sha256: config_sha256.to_string() };
    let path = sidecar_path(artifact);
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_and_hash_deterministically() {
        let a = RunConfig::load(None, &Overrides::default()).unwrap();
        let b = RunConfig::load(None, &Overrides::default()).unwrap();
        assert_eq!(a.sha256_hex(), b.sha256_hex());
        let mut ov = Overrides::default();
        ov.m = Some(9);
        let c = RunConfig::load(None, &ov).unwrap();
        assert_ne!(a.sha256_hex(), c.sha256_hex());
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let parsed: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg.sha256_hex(), parsed.sha256_hex());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 7\n[augment]\nm = 2\n").unwrap();
        let mut ov = Overrides::default();
        ov.beam = Some(3);
        let cfg = RunConfig::load(Some(&path), &ov).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.augment.m, 2);
        assert_eq!(cfg.augment.beam, 3);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[model]\nmodel_dim = 30\nheads = 4\n").unwrap();
        assert!(RunConfig::load(Some(&path), &Overrides::default()).is_err());

        std::fs::write(&path, "[augment]\nngram_min = 3\nngram_max = 2\n").unwrap();
        assert!(RunConfig::load(Some(&path), &Overrides::default()).is_err());

        std::fs::write(&path, "[nosuch]\nx = 1\n").unwrap();
        assert!(RunConfig::load(Some(&path), &Overrides::default()).is_err());
    }
}
