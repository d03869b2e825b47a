//! Model configuration, parameter storage, and the deterministic tensor
//! layout shared by initialization, checkpoints, and the optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{child_rng, Stream};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Plain,
    Grouped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Da,
    Mt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub attention_mode: AttentionMode,
    pub combined_top_layers: usize,
}

impl ModelConfig {
    /// Desk-scale default: the smallest shape that exercises both
    /// grouped-only and gate-combined layers.
    pub fn desk_default(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            layers: 2,
            heads: 4,
            model_dim: 64,
            ffn_dim: 128,
            src_vocab,
            tgt_vocab,
            max_len: 512,
            dropout: 0.1,
            label_smoothing: 0.1,
            attention_mode: AttentionMode::Grouped,
            combined_top_layers: 1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.ffn_dim == 0 {
            return Err("layers, heads, model_dim, ffn_dim must be positive".into());
        }
        if self.model_dim % self.heads != 0 {
            return Err("model_dim must be divisible by heads".into());
        }
        if self.combined_top_layers > self.layers {
            return Err("combined_top_layers must not exceed layers".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must lie in [0,1)".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err("label_smoothing must lie in [0,1)".into());
        }
        Ok(())
    }

    /// Does layer `i` (0-based) combine group and global attention?
    pub fn is_combined_layer(&self, i: usize) -> bool {
        self.attention_mode == AttentionMode::Grouped
            && i + self.combined_top_layers >= self.layers
    }
}

/// Parameter ids of one multi-head attention projection set.
#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

/// One attention site: a main projection set, plus a second global set and a
/// gate on gate-combined layers.
#[derive(Clone, Debug)]
pub struct SiteIds {
    pub main: AttnIds,
    pub global: Option<AttnIds>,
    pub gate_w: Option<usize>,
    pub gate_b: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct EncLayerIds {
    pub self_attn: SiteIds,
    pub ln1: (usize, usize),
    pub ffn_w1: usize,
    pub ffn_b1: usize,
    pub ffn_w2: usize,
    pub ffn_b2: usize,
    pub ln2: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct DecLayerIds {
    pub self_attn: SiteIds,
    pub ln1: (usize, usize),
    pub cross_attn: SiteIds,
    pub ln2: (usize, usize),
    pub ffn_w1: usize,
    pub ffn_b1: usize,
    pub ffn_w2: usize,
    pub ffn_b2: usize,
    pub ln3: (usize, usize),
}

/// Deterministic tensor layout derived from a [`ModelConfig`].
#[derive(Clone, Debug)]
pub struct Layout {
    pub names: Vec<String>,
    pub shapes: Vec<(usize, usize)>,
    pub src_embed: usize,
    pub tgt_embed: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub enc: Vec<EncLayerIds>,
    pub dec: Vec<DecLayerIds>,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.names.len() - 1
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        AttnIds {
            wq: self.push(format!("{prefix}.wq"), d, d),
            bq: self.push(format!("{prefix}.bq"), 1, d),
            wk: self.push(format!("{prefix}.wk"), d, d),
            bk: self.push(format!("{prefix}.bk"), 1, d),
            wv: self.push(format!("{prefix}.wv"), d, d),
            bv: self.push(format!("{prefix}.bv"), 1, d),
            wo: self.push(format!("{prefix}.wo"), d, d),
            bo: self.push(format!("{prefix}.bo"), 1, d),
        }
    }

    fn site(&mut self, prefix: &str, d: usize, combined: bool) -> SiteIds {
        let main = self.attn(prefix, d);
        if combined {
            let global = self.attn(&format!("{prefix}_glb"), d);
            let gate_w = self.push(format!("{prefix}_gate_w"), 2 * d, d);
            let gate_b = self.push(format!("{prefix}_gate_b"), 1, d);
            SiteIds { main, global: Some(global), gate_w: Some(gate_w), gate_b: Some(gate_b) }
        } else {
            SiteIds { main, global: None, gate_w: None, gate_b: None }
        }
    }

    fn ln(&mut self, name: String, d: usize) -> (usize, usize) {
        (self.push(format!("{name}_g"), 1, d), self.push(format!("{name}_b"), 1, d))
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let d = cfg.model_dim;
        let mut b = LayoutBuilder { names: Vec::new(), shapes: Vec::new() };
        let src_embed = b.push("src_embed".into(), cfg.src_vocab, d);
        let tgt_embed = b.push("tgt_embed".into(), cfg.tgt_vocab, d);
        let out_w = b.push("out_w".into(), d, cfg.tgt_vocab);
        let out_b = b.push("out_b".into(), 1, cfg.tgt_vocab);
        let mut enc = Vec::new();
        for i in 0..cfg.layers {
            let combined = cfg.is_combined_layer(i);
            let p = format!("enc{i}");
            enc.push(EncLayerIds {
                self_attn: b.site(&format!("{p}.self"), d, combined),
                ln1: b.ln(format!("{p}.ln1"), d),
                ffn_w1: b.push(format!("{p}.ffn_w1"), d, cfg.ffn_dim),
                ffn_b1: b.push(format!("{p}.ffn_b1"), 1, cfg.ffn_dim),
                ffn_w2: b.push(format!("{p}.ffn_w2"), cfg.ffn_dim, d),
                ffn_b2: b.push(format!("{p}.ffn_b2"), 1, d),
                ln2: b.ln(format!("{p}.ln2"), d),
            });
        }
        let mut dec = Vec::new();
        for i in 0..cfg.layers {
            let combined = cfg.is_combined_layer(i);
            let p = format!("dec{i}");
            dec.push(DecLayerIds {
                self_attn: b.site(&format!("{p}.self"), d, combined),
                ln1: b.ln(format!("{p}.ln1"), d),
                cross_attn: b.site(&format!("{p}.cross"), d, combined),
                ln2: b.ln(format!("{p}.ln2"), d),
                ffn_w1: b.push(format!("{p}.ffn_w1"), d, cfg.ffn_dim),
                ffn_b1: b.push(format!("{p}.ffn_b1"), 1, cfg.ffn_dim),
                ffn_w2: b.push(format!("{p}.ffn_w2"), cfg.ffn_dim, d),
                ffn_b2: b.push(format!("{p}.ffn_b2"), 1, d),
                ln3: b.ln(format!("{p}.ln3"), d),
            });
        }
        Layout {
            names: b.names,
            shapes: b.shapes,
            src_embed,
            tgt_embed,
            out_w,
            out_b,
            enc,
            dec,
        }
    }

    pub fn tensor_count(&self) -> usize {
        self.names.len()
    }
}

/// All tensors of one encoder-decoder model plus its configuration.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub role: ModelRole,
    pub seed: u64,
    pub src_vocab_sha256: String,
    pub tgt_vocab_sha256: String,
    pub layout: Layout,
    pub tensors: Vec<Matrix>,
}

impl ModelParams {
    /// Scaled-uniform initialization per tensor fan-in, seed-controlled.
    pub fn init(
        config: ModelConfig,
        role: ModelRole,
        seed: u64,
        src_vocab_sha256: String,
        tgt_vocab_sha256: String,
    ) -> ModelParams {
        let layout = Layout::new(&config);
        let mut tensors = Vec::with_capacity(layout.tensor_count());
        for (t, name) in layout.names.iter().enumerate() {
            let (rows, cols) = layout.shapes[t];
            let tensor = if name.ends_with("_g") && rows == 1 && cols == config.model_dim {
                // layer-norm gain
                Matrix::from_fn(rows, cols, |_, _| 1.0)
            } else if rows == 1 || name.ends_with("_b") {
                Matrix::zeros(rows, cols)
            } else {
                let fan_in = if name.ends_with("embed") { cols } else { rows };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut rng = child_rng(seed, Stream::ParamInit, &[t as u64]);
                Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
            };
            tensors.push(tensor);
        }
        ModelParams { config, role, seed, src_vocab_sha256, tgt_vocab_sha256, layout, tensors }
    }

    pub fn tensor(&self, id: usize) -> &Matrix {
        &self.tensors[id]
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }
}

/// Gradient buffers parallel to the model tensors.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub tensors: Vec<Matrix>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> ParamGrads {
        ParamGrads {
            tensors: params
                .layout
                .shapes
                .iter()
                .map(|&(r, c)| Matrix::zeros(r, c))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::desk_default(11, 13);
        c.layers = 2;
        c.combined_top_layers = 1;
        c
    }

    #[test]
    fn layout_is_deterministic_and_marks_combined_layers() {
        let c = cfg();
        let a = Layout::new(&c);
        let b = Layout::new(&c);
        assert_eq!(a.names, b.names);
        assert!(!c.is_combined_layer(0));
        assert!(c.is_combined_layer(1));
        assert!(a.enc[0].self_attn.global.is_none());
        assert!(a.enc[1].self_attn.global.is_some());
        assert!(a.dec[1].cross_attn.gate_w.is_some());
    }

    #[test]
    fn init_is_seed_deterministic_and_finite() {
        let c = cfg();
        let p1 = ModelParams::init(c.clone(), ModelRole::Da, 5, "h1".into(), "h2".into());
        let p2 = ModelParams::init(c.clone(), ModelRole::Da, 5, "h1".into(), "h2".into());
        let p3 = ModelParams::init(c, ModelRole::Da, 6, "h1".into(), "h2".into());
        assert!(p1.all_finite());
        assert_eq!(p1.tensors, p2.tensors);
        assert_ne!(p1.tensors, p3.tensors);
        // layer-norm gains start at one, biases at zero
        let ln = p1.layout.enc[0].ln1;
        assert!(p1.tensor(ln.0).data().iter().all(|&v| v == 1.0));
        assert!(p1.tensor(ln.1).data().iter().all(|&v| v == 0.0));
    }
}
