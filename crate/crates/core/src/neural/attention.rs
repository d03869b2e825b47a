//! Attention primitives: scaled dot-product core, group masking, and the
//! gate-sum combination of group and global attention.

use crate::tensor::Matrix;

/// Additive mask value for blocked positions. A large negative number rather
/// than -inf so 32-bit checkpoint round-trips stay NaN-free.
pub const MASK_NEG: f64 = -1e9;

/// 0 where query and key tags match, [`MASK_NEG`] where they differ.
pub fn group_mask(gq: &[u32], gk: &[u32]) -> Matrix {
    Matrix::from_fn(gq.len(), gk.len(), |i, j| if gq[i] == gk[j] { 0.0 } else { MASK_NEG })
}

/// Strictly-upper-triangular causal mask.
pub fn causal_mask(n: usize) -> Matrix {
    Matrix::from_fn(n, n, |i, j| if j > i { MASK_NEG } else { 0.0 })
}

/// Key-padding mask: [`MASK_NEG`] on columns whose key is padding.
pub fn key_padding_mask(rows: usize, key_is_pad: &[bool]) -> Matrix {
    Matrix::from_fn(rows, key_is_pad.len(), |_, j| if key_is_pad[j] { MASK_NEG } else { 0.0 })
}

/// Post-softmax attention weights: softmax(QKᵀ/√d_k + mask).
pub fn attention_weights(q: &Matrix, k: &Matrix, mask: Option<&Matrix>) -> Matrix {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = q.matmul_nt(k);
    scores.scale_assign(scale);
    if let Some(m) = mask {
        scores.add_assign(m);
    }
    scores.softmax_rows()
}

/// Plain scaled dot-product attention over the whole sequence.
pub fn global_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    key_is_pad: Option<&[bool]>,
) -> Matrix {
    let mask = key_is_pad.map(|p| key_padding_mask(q.rows(), p));
    attention_weights(q, k, mask.as_ref()).matmul(v)
}

/// Attention restricted to matching group tags.
pub fn group_attention(q: &Matrix, k: &Matrix, v: &Matrix, gq: &[u32], gk: &[u32]) -> Matrix {
    assert_eq!(gq.len(), q.rows(), "one query tag per query row");
    assert_eq!(gk.len(), k.rows(), "one key tag per key row");
    let mask = group_mask(gq, gk);
    attention_weights(q, k, Some(&mask)).matmul(v)
}

/// Gate-sum of group and global attention:
/// `H = H_L ⊙ g + H_G ⊙ (1 − g)` with `g = sigmoid([H_L, H_G]·W + b)`.
pub fn gate_sum(h_local: &Matrix, h_global: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(h_local.rows(), h_global.rows());
    assert_eq!(h_local.cols(), h_global.cols());
    let d = h_local.cols();
    assert_eq!(w.rows(), 2 * d);
    assert_eq!(w.cols(), d);
    let n = h_local.rows();
    let mut cat = Matrix::zeros(n, 2 * d);
    for i in 0..n {
        cat.row_mut(i)[..d].copy_from_slice(h_local.row(i));
        cat.row_mut(i)[d..].copy_from_slice(h_global.row(i));
    }
    let mut lin = cat.matmul(w);
    for i in 0..n {
        for (x, bv) in lin.row_mut(i).iter_mut().zip(b.row(0)) {
            *x += bv;
        }
    }
    let gate = lin.map(|v| 1.0 / (1.0 + (-v).exp()));
    Matrix::from_fn(n, d, |i, j| {
        let g = gate.get(i, j);
        h_local.get(i, j) * g + h_global.get(i, j) * (1.0 - g)
    })
}

/// Group + global attention merged by the gate-sum module.
pub fn combined_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    gq: &[u32],
    gk: &[u32],
    gate_w: &Matrix,
    gate_b: &Matrix,
) -> Matrix {
    let h_local = group_attention(q, k, v, gq, gk);
    let h_global = global_attention(q, k, v, None);
    gate_sum(&h_local, &h_global, gate_w, gate_b)
}
