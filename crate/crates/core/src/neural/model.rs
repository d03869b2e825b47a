//! Encoder-decoder assembly on the autodiff graph.
//!
//! The encoder applies group attention on lower layers and gate-combined
//! group+global attention on the top layers (grouped mode); the decoder
//! mirrors this for self- and cross-attention, with causal masking in
//! self-attention. Cross-attention group masks pair decoder query tags with
//! source-side key tags.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::neural::attention::{causal_mask, group_mask};
use crate::neural::graph::{Graph, NodeId};
use crate::neural::params::{AttentionMode, AttnIds, ModelParams, ParamGrads, SiteIds};
use crate::neural::{Batch, NeuralError};
use crate::special;
use crate::tensor::Matrix;

/// Sinusoidal position encodings for `n` positions.
pub fn positional_encoding(n: usize, d: usize) -> Matrix {
    Matrix::from_fn(n, d, |pos, j| {
        let pair = (j / 2) as f64;
        let rate = 10000f64.powf(2.0 * pair / d as f64);
        let angle = pos as f64 / rate;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Inverted-dropout mask source for one sequence forward pass.
pub(crate) struct Dropout {
    p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub(crate) fn new(p: f64, rng: ChaCha8Rng) -> Option<Dropout> {
        if p > 0.0 {
            Some(Dropout { p, rng })
        } else {
            None
        }
    }
}

fn apply_dropout(g: &mut Graph, x: NodeId, dropout: &mut Option<Dropout>) -> NodeId {
    match dropout {
        None => x,
        Some(d) => {
            let v = g.value(x);
            let keep = 1.0 - d.p;
            let mask = Matrix::from_fn(v.rows(), v.cols(), |_, _| {
                if d.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            g.mul_const(x, mask)
        }
    }
}

fn mha(
    g: &mut Graph,
    ids: &AttnIds,
    q_in: NodeId,
    kv_in: NodeId,
    mask: Option<&Matrix>,
) -> NodeId {
    let cfg = &g.params().config;
    let heads = cfg.heads;
    let dk = cfg.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();

    let wq = g.param(ids.wq);
    let bq = g.param(ids.bq);
    let wk = g.param(ids.wk);
    let bk = g.param(ids.bk);
    let wv = g.param(ids.wv);
    let bv = g.param(ids.bv);
    let wo = g.param(ids.wo);
    let bo = g.param(ids.bo);

    let qm = g.matmul(q_in, wq);
    let q = g.add_row(qm, bq);
    let km = g.matmul(kv_in, wk);
    let k = g.add_row(km, bk);
    let vm = g.matmul(kv_in, wv);
    let v = g.add_row(vm, bv);

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dk, dk);
        let kh = g.slice_cols(k, h * dk, dk);
        let vh = g.slice_cols(v, h * dk, dk);
        let scores = g.matmul_nt(qh, kh);
        let scaled = g.scale(scores, scale);
        let masked = match mask {
            Some(m) => g.add_const(scaled, m),
            None => scaled,
        };
        let attn = g.softmax_rows(masked);
        head_outs.push(g.matmul(attn, vh));
    }
    let cat = g.concat_cols(&head_outs);
    let om = g.matmul(cat, wo);
    g.add_row(om, bo)
}

/// One attention site honoring the configured mode and layer kind.
///
/// * plain mode: a single global MHA (`base_mask` only);
/// * grouped-only layer: a single MHA with group + base mask;
/// * combined layer: group MHA and global MHA merged by the gate-sum.
fn attention_site(
    g: &mut Graph,
    site: &SiteIds,
    q_in: NodeId,
    kv_in: NodeId,
    gq: &[u32],
    gk: &[u32],
    base_mask: Option<&Matrix>,
) -> NodeId {
    if g.params().config.attention_mode == AttentionMode::Plain {
        return mha(g, &site.main, q_in, kv_in, base_mask);
    }
    let mut gmask = group_mask(gq, gk);
    if let Some(m) = base_mask {
        gmask.add_assign(m);
    }
    match &site.global {
        None => mha(g, &site.main, q_in, kv_in, Some(&gmask)),
        Some(global_ids) => {
            let h_local = mha(g, &site.main, q_in, kv_in, Some(&gmask));
            let h_global = mha(g, global_ids, q_in, kv_in, base_mask);
            let cat = g.concat_cols(&[h_local, h_global]);
            let gw = g.param(site.gate_w.expect("combined layer has gate"));
            let gb = g.param(site.gate_b.expect("combined layer has gate"));
            let lin_m = g.matmul(cat, gw);
            let lin = g.add_row(lin_m, gb);
            let gate = g.sigmoid(lin);
            let keep_local = g.mul(h_local, gate);
            let inv = g.one_minus(gate);
            let keep_global = g.mul(h_global, inv);
            g.add(keep_local, keep_global)
        }
    }
}

fn ffn(g: &mut Graph, w1: usize, b1: usize, w2: usize, b2: usize, x: NodeId) -> NodeId {
    let w1n = g.param(w1);
    let b1n = g.param(b1);
    let w2n = g.param(w2);
    let b2n = g.param(b2);
    let h_m = g.matmul(x, w1n);
    let h_b = g.add_row(h_m, b1n);
    let h = g.relu(h_b);
    let o = g.matmul(h, w2n);
    g.add_row(o, b2n)
}

fn check_finite(g: &Graph, x: NodeId, site: &str) -> Result<(), NeuralError> {
    if g.value(x).is_finite() {
        Ok(())
    } else {
        Err(NeuralError::NonFinite { site: site.to_string() })
    }
}

fn embed_sequence(
    g: &mut Graph,
    table: usize,
    ids: &[u32],
    dropout: &mut Option<Dropout>,
) -> NodeId {
    let d = g.params().config.model_dim;
    let e = g.embed(table, ids);
    let scaled = g.scale(e, (d as f64).sqrt());
    let pos = positional_encoding(ids.len(), d);
    let x = g.add_const(scaled, &pos);
    apply_dropout(g, x, dropout)
}

/// Build the encoder stack; returns the final states node.
pub(crate) fn build_encoder(
    g: &mut Graph,
    input_ids: &[u32],
    input_tags: &[u32],
    dropout: &mut Option<Dropout>,
) -> Result<NodeId, NeuralError> {
    debug_assert_eq!(input_ids.len(), input_tags.len());
    let layout = g.params().layout.clone();
    let mut x = embed_sequence(g, layout.src_embed, input_ids, dropout);
    for (i, layer) in layout.enc.iter().enumerate() {
        let a = attention_site(g, &layer.self_attn, x, x, input_tags, input_tags, None);
        let a = apply_dropout(g, a, dropout);
        let res = g.add(x, a);
        let g1 = g.param(layer.ln1.0);
        let b1 = g.param(layer.ln1.1);
        let x1 = g.layer_norm(res, g1, b1);
        let f = ffn(g, layer.ffn_w1, layer.ffn_b1, layer.ffn_w2, layer.ffn_b2, x1);
        let f = apply_dropout(g, f, dropout);
        let res2 = g.add(x1, f);
        let g2 = g.param(layer.ln2.0);
        let b2 = g.param(layer.ln2.1);
        x = g.layer_norm(res2, g2, b2);
        check_finite(g, x, &format!("encoder layer {i}"))?;
    }
    Ok(x)
}

/// Build the decoder stack over `[bos] ++ prefix` and return the logits node
/// (one row per decoder position).
///
/// `query_tags` has one tag per decoder position: the group of the token
/// predicted at that position.
pub(crate) fn build_decoder(
    g: &mut Graph,
    enc: NodeId,
    src_tags: &[u32],
    prefix_ids: &[u32],
    query_tags: &[u32],
    dropout: &mut Option<Dropout>,
) -> Result<NodeId, NeuralError> {
    let n = prefix_ids.len() + 1;
    debug_assert_eq!(query_tags.len(), n, "one query tag per decoder position");
    let layout = g.params().layout.clone();

    let mut dec_input = Vec::with_capacity(n);
    dec_input.push(special::BOS);
    dec_input.extend_from_slice(prefix_ids);

    let mut x = embed_sequence(g, layout.tgt_embed, &dec_input, dropout);
    let causal = causal_mask(n);
    for (i, layer) in layout.dec.iter().enumerate() {
        let a = attention_site(g, &layer.self_attn, x, x, query_tags, query_tags, Some(&causal));
        let a = apply_dropout(g, a, dropout);
        let res = g.add(x, a);
        let g1 = g.param(layer.ln1.0);
        let b1 = g.param(layer.ln1.1);
        let x1 = g.layer_norm(res, g1, b1);

        let c = attention_site(g, &layer.cross_attn, x1, enc, query_tags, src_tags, None);
        let c = apply_dropout(g, c, dropout);
        let res2 = g.add(x1, c);
        let g2 = g.param(layer.ln2.0);
        let b2 = g.param(layer.ln2.1);
        let x2 = g.layer_norm(res2, g2, b2);

        let f = ffn(g, layer.ffn_w1, layer.ffn_b1, layer.ffn_w2, layer.ffn_b2, x2);
        let f = apply_dropout(g, f, dropout);
        let res3 = g.add(x2, f);
        let g3 = g.param(layer.ln3.0);
        let b3 = g.param(layer.ln3.1);
        x = g.layer_norm(res3, g3, b3);
        check_finite(g, x, &format!("decoder layer {i}"))?;
    }
    let out_w = g.param(layout.out_w);
    let out_b = g.param(layout.out_b);
    let logits_m = g.matmul(x, out_w);
    let logits = g.add_row(logits_m, out_b);
    check_finite(g, logits, "output projection")?;
    Ok(logits)
}

/// Query tags for teacher forcing: the tag of each predicted target token,
/// plus the final group for the end-of-sequence position.
pub(crate) fn teacher_query_tags(target_tags: &[u32]) -> Vec<u32> {
    let last = target_tags.last().copied().unwrap_or(1);
    let mut tags = Vec::with_capacity(target_tags.len() + 1);
    tags.extend_from_slice(target_tags);
    tags.push(last);
    tags
}

/// Full teacher-forced forward; returns the graph and logits node.
pub(crate) fn forward_graph<'p>(
    params: &'p ModelParams,
    input_ids: &[u32],
    input_tags: &[u32],
    target_ids: &[u32],
    target_tags: &[u32],
    mut dropout: Option<Dropout>,
) -> Result<(Graph<'p>, NodeId), NeuralError> {
    let mut g = Graph::new(params);
    let enc = build_encoder(&mut g, input_ids, input_tags, &mut dropout)?;
    let query_tags = teacher_query_tags(target_tags);
    let logits = build_decoder(&mut g, enc, input_tags, target_ids, &query_tags, &mut dropout)?;
    Ok((g, logits))
}

/// Encoder states for one input, evaluation mode.
pub fn encode_states(
    params: &ModelParams,
    input_ids: &[u32],
    input_tags: &[u32],
) -> Result<Matrix, NeuralError> {
    let mut g = Graph::new(params);
    let enc = build_encoder(&mut g, input_ids, input_tags, &mut None)?;
    Ok(g.value(enc).clone())
}

/// Log-probabilities of the next token after `prefix_ids`, given
/// precomputed encoder states. `query_tags` covers every decoder position
/// including the next one.
pub fn next_token_log_probs(
    params: &ModelParams,
    enc_states: &Matrix,
    src_tags: &[u32],
    prefix_ids: &[u32],
    query_tags: &[u32],
) -> Result<Vec<f64>, NeuralError> {
    let mut g = Graph::new(params);
    let enc = g.constant(enc_states.clone());
    let logits = build_decoder(&mut g, enc, src_tags, prefix_ids, query_tags, &mut None)?;
    let lm = g.value(logits);
    let last = lm.rows() - 1;
    let row = Matrix::from_fn(1, lm.cols(), |_, j| lm.get(last, j));
    Ok(row.log_softmax_rows().row(0).to_vec())
}

/// Label-smoothed cross entropy over one sequence of logits.
///
/// Returns the summed loss and d(loss_sum)/d(logits). `targets` must already
/// include the end-of-sequence id at its final position.
pub(crate) fn ce_loss_and_dlogits(
    logits: &Matrix,
    targets: &[u32],
    smoothing: f64,
) -> (f64, Matrix) {
    assert_eq!(logits.rows(), targets.len());
    let v = logits.cols() as f64;
    let log_probs = logits.log_softmax_rows();
    let mut dlogits = log_probs.map(f64::exp); // softmax
    let mut loss = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        let lp_row = log_probs.row(t);
        let lp_sum: f64 = lp_row.iter().sum();
        loss += -(1.0 - smoothing) * lp_row[y as usize] - smoothing / v * lp_sum;
        let drow = dlogits.row_mut(t);
        drow[y as usize] -= 1.0 - smoothing;
        for x in drow.iter_mut() {
            *x -= smoothing / v;
        }
    }
    (loss, dlogits)
}

fn targets_with_eos(target_ids: &[u32]) -> Vec<u32> {
    let mut t = Vec::with_capacity(target_ids.len() + 1);
    t.extend_from_slice(target_ids);
    t.push(special::EOS);
    t
}

/// Per-position log-distributions over the target vocabulary for every row
/// of the batch (teacher-forced; final row predicts end-of-sequence).
pub fn forward_log_probs(
    params: &ModelParams,
    batch: &Batch,
) -> Result<Vec<Matrix>, NeuralError> {
    let mut out = Vec::with_capacity(batch.len());
    for r in 0..batch.len() {
        let (input_ids, input_tags) = batch.row_input(r);
        let (target_ids, target_tags) = batch.row_target(r);
        let (g, logits) =
            forward_graph(params, input_ids, input_tags, target_ids, target_tags, None)?;
        out.push(g.value(logits).log_softmax_rows());
    }
    Ok(out)
}

pub(crate) struct RowLoss {
    pub loss_sum: f64,
    pub grads: ParamGrads,
}

pub(crate) fn row_loss_and_grads(
    params: &ModelParams,
    input_ids: &[u32],
    input_tags: &[u32],
    target_ids: &[u32],
    target_tags: &[u32],
    dropout: Option<Dropout>,
    grad_scale: f64,
) -> Result<RowLoss, NeuralError> {
    let (g, logits) =
        forward_graph(params, input_ids, input_tags, target_ids, target_tags, dropout)?;
    let targets = targets_with_eos(target_ids);
    let (loss_sum, mut dlogits) =
        ce_loss_and_dlogits(g.value(logits), &targets, params.config.label_smoothing);
    dlogits.scale_assign(grad_scale);
    let mut grads = ParamGrads::zeros_like(params);
    g.backward(logits, dlogits, &mut grads);
    Ok(RowLoss { loss_sum, grads })
}

/// Mean token-level negative log-likelihood over the batch (label smoothing
/// per the model config) and gradients for every parameter tensor.
pub fn nll_loss_and_grads(
    params: &ModelParams,
    batch: &Batch,
) -> Result<(f64, ParamGrads), NeuralError> {
    if batch.len() == 0 {
        return Err(NeuralError::EmptyDataset);
    }
    let total_tokens = batch.total_target_tokens();
    let scale = 1.0 / total_tokens as f64;
    let mut grads = ParamGrads::zeros_like(params);
    let mut loss = 0.0;
    for r in 0..batch.len() {
        let (input_ids, input_tags) = batch.row_input(r);
        let (target_ids, target_tags) = batch.row_target(r);
        let row = row_loss_and_grads(
            params,
            input_ids,
            input_tags,
            target_ids,
            target_tags,
            None,
            scale,
        )?;
        loss += row.loss_sum;
        grads.accumulate(&row.grads);
    }
    Ok((loss * scale, grads))
}

/// Teacher-forced evaluation loss of a batch (no gradients, no dropout).
pub fn batch_loss(params: &ModelParams, batch: &Batch) -> Result<f64, NeuralError> {
    let mut loss = 0.0;
    let mut tokens = 0usize;
    for r in 0..batch.len() {
        let (input_ids, input_tags) = batch.row_input(r);
        let (target_ids, target_tags) = batch.row_target(r);
        let (g, logits) =
            forward_graph(params, input_ids, input_tags, target_ids, target_tags, None)?;
        let targets = targets_with_eos(target_ids);
        let (loss_sum, _) =
            ce_loss_and_dlogits(g.value(logits), &targets, params.config.label_smoothing);
        loss += loss_sum;
        tokens += targets.len();
    }
    Ok(loss / tokens as f64)
}

/// Total log-probability of `target ++ [eos]` given the input, teacher-forced.
pub fn sequence_log_prob(
    params: &ModelParams,
    input_ids: &[u32],
    input_tags: &[u32],
    target_ids: &[u32],
    target_tags: &[u32],
) -> Result<f64, NeuralError> {
    let (g, logits) =
        forward_graph(params, input_ids, input_tags, target_ids, target_tags, None)?;
    let lp = g.value(logits).log_softmax_rows();
    let targets = targets_with_eos(target_ids);
    Ok(targets.iter().enumerate().map(|(t, &y)| lp.get(t, y as usize)).sum())
}

/// Fraction of teacher-forced argmax predictions matching the target
/// (end-of-sequence included).
pub fn token_accuracy(params: &ModelParams, batch: &Batch) -> Result<f64, NeuralError> {
    let mut hit = 0usize;
    let mut total = 0usize;
    for r in 0..batch.len() {
        let (input_ids, input_tags) = batch.row_input(r);
        let (target_ids, target_tags) = batch.row_target(r);
        let (g, logits) =
            forward_graph(params, input_ids, input_tags, target_ids, target_tags, None)?;
        let lm = g.value(logits);
        let targets = targets_with_eos(target_ids);
        for (t, &y) in targets.iter().enumerate() {
            let row = lm.row(t);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(j, _)| j)
                .unwrap();
            if argmax == y as usize {
                hit += 1;
            }
            total += 1;
        }
    }
    Ok(hit as f64 / total as f64)
}
