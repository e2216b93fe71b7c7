//! Tape-recorded forward pass used for training, scoring and gradient checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{AttnIdx, EncLayer, FfnIdx, LayerNormIdx, Model, TrainExample};
use crate::autograd::{Tape, Var};
use crate::tensor::Mat;
use crate::text::{TokenId, BOS};

pub(crate) struct ForwardOut {
    pub lm_logits: Var,
    pub cls_logits: Option<Var>,
}

/// Dropout state threaded through a training forward pass.
pub(crate) struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

fn dropout(t: &mut Tape, x: Var, drop: &mut Option<Dropout>) -> Var {
    let Some(dr) = drop else { return x };
    if dr.rate == 0.0 {
        return x;
    }
    let (r, c) = t.value(x).shape();
    let keep = 1.0 - dr.rate;
    let mut mask = Mat::zeros(r, c);
    for v in &mut mask.data {
        *v = if dr.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 };
    }
    t.mul_const(x, mask)
}

pub(crate) fn layer_norm(t: &mut Tape, x: Var, ln: LayerNormIdx) -> Var {
    let g = t.param(ln.gain);
    let b = t.param(ln.bias);
    t.layer_norm(x, g, b)
}

pub(crate) fn linear(t: &mut Tape, x: Var, w: usize, b: usize) -> Var {
    let w = t.param(w);
    let b = t.param(b);
    let y = t.matmul(x, w, false, false);
    t.add_row(y, b)
}

/// Multi-head attention of `q_in` rows over `kv_in` rows.
pub(crate) fn attention(t: &mut Tape, q_in: Var, kv_in: Var, p: AttnIdx, heads: usize, causal: bool) -> Var {
    let d = t.value(q_in).cols;
    let dh = d / heads;
    let q = linear(t, q_in, p.wq, p.bq);
    let kv = linear(t, kv_in, p.wkv, p.bkv);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = t.slice_cols(q, h * dh, dh);
        let kh = t.slice_cols(kv, h * dh, dh);
        let vh = t.slice_cols(kv, d + h * dh, dh);
        let s = t.matmul(qh, kh, false, true);
        let s = t.scale(s, scale);
        let a = t.softmax_rows(s, causal);
        outs.push(t.matmul(a, vh, false, false));
    }
    let o = if heads == 1 { outs[0] } else { t.concat_cols(&outs) };
    linear(t, o, p.wo, p.bo)
}

pub(crate) fn ffn(t: &mut Tape, x: Var, p: FfnIdx) -> Var {
    let h = linear(t, x, p.w1, p.b1);
    let h = t.gelu(h);
    linear(t, h, p.w2, p.b2)
}

/// Token plus positional embeddings for ids at positions `0..ids.len()`.
pub(crate) fn embed(t: &mut Tape, tok_emb: usize, pos_emb: usize, ids: &[TokenId]) -> Var {
    let e = t.param(tok_emb);
    let x = t.gather_rows(e, ids);
    let p = t.param(pos_emb);
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pe = t.gather_rows(p, &positions);
    t.add(x, pe)
}

/// Pre-norm encoder stack followed by a final layer norm.
pub(crate) fn encoder(
    t: &mut Tape,
    mut x: Var,
    layers: &[EncLayer],
    final_ln: LayerNormIdx,
    heads: usize,
    drop: &mut Option<Dropout>,
) -> Var {
    for l in layers {
        let h = layer_norm(t, x, l.ln1);
        let a = attention(t, h, h, l.attn, heads, false);
        let a = dropout(t, a, drop);
        x = t.add(x, a);
        let h = layer_norm(t, x, l.ln2);
        let f = ffn(t, h, l.ffn);
        let f = dropout(t, f, drop);
        x = t.add(x, f);
    }
    layer_norm(t, x, final_ln)
}

/// Teacher-forced pass: the decoder reads `[BOS] + tgt[..n-1]` and predicts `tgt`.
pub(crate) fn forward(
    m: &Model,
    t: &mut Tape,
    src: &[TokenId],
    tgt: &[TokenId],
    mut drop: Option<Dropout>,
) -> ForwardOut {
    let lay = &m.layout;
    let heads = m.config.heads;

    let enc = if src.is_empty() {
        None
    } else {
        let x = embed(t, lay.tok_emb, lay.enc_pos, src);
        let x = dropout(t, x, &mut drop);
        Some(encoder(t, x, &lay.enc, lay.enc_ln, heads, &mut drop))
    };

    let mut dec_in = Vec::with_capacity(tgt.len());
    dec_in.push(BOS);
    dec_in.extend_from_slice(&tgt[..tgt.len() - 1]);
    let mut y = embed(t, lay.tok_emb, lay.dec_pos, &dec_in);
    y = dropout(t, y, &mut drop);
    for l in &lay.dec {
        let h = layer_norm(t, y, l.ln1);
        let a = attention(t, h, h, l.self_attn, heads, true);
        let a = dropout(t, a, &mut drop);
        y = t.add(y, a);
        if let Some(e) = enc {
            let h = layer_norm(t, y, l.ln2);
            let c = attention(t, h, e, l.cross, heads, false);
            let c = dropout(t, c, &mut drop);
            y = t.add(y, c);
        }
        let h = layer_norm(t, y, l.ln3);
        let f = ffn(t, h, l.ffn);
        let f = dropout(t, f, &mut drop);
        y = t.add(y, f);
    }
    let h = layer_norm(t, y, lay.dec_ln);

    let lm = match lay.lm_out {
        Some(w) => {
            let w = t.param(w);
            t.matmul(h, w, false, false)
        }
        None => {
            let e = t.param(lay.tok_emb);
            t.matmul(h, e, false, true)
        }
    };
    let lm_bias = t.param(lay.lm_bias);
    let lm_logits = t.add_row(lm, lm_bias);
    let cls_logits = lay.cls.map(|(w, b)| linear(t, h, w, b));
    ForwardOut { lm_logits, cls_logits }
}

/// Per-example objective: `weight * mean token CE` (skipped for negative
/// labels) plus `cls_weight * weight * mean token BCE` when a label is given.
pub(crate) fn example_loss(
    m: &Model,
    t: &mut Tape,
    ex: &TrainExample,
    cls_weight: f64,
    drop: Option<Dropout>,
) -> Var {
    let n = ex.tgt.len();
    let out = forward(m, t, &ex.src, &ex.tgt, drop);
    let lm_w = if ex.label == Some(false) { 0.0 } else { ex.weight / n as f64 };
    let mut loss = t.cross_entropy(out.lm_logits, &ex.tgt, &vec![lm_w; n]);
    if let (Some(label), Some(cls)) = (ex.label, out.cls_logits) {
        let y = if label { 1.0 } else { 0.0 };
        let w = ex.weight * cls_weight / n as f64;
        let bce = t.bce_at(cls, &ex.tgt, &vec![y; n], &vec![w; n]);
        loss = t.add(loss, bce);
    }
    loss
}
