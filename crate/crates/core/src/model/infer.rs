//! Eager incremental decoding with per-layer key/value caches.

use std::sync::Arc;

use super::decode::{DirectorGuidance, StepModel};
use super::{AttnIdx, FfnIdx, LayerNormIdx, Model};
use crate::tensor::{gemm, log_sigmoid, log_softmax_in_place, Mat};
use crate::text::{is_special, TokenId, BOS, EOS};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;

fn layer_norm(x: &Mat, p: &[Mat], ln: LayerNormIdx) -> Mat {
    let (g, b) = (&p[ln.gain], &p[ln.bias]);
    let mut out = Mat::zeros(x.rows, x.cols);
    let d = x.cols as f64;
    for r in 0..x.rows {
        let row = x.row(r);
        let mu = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (row[c] - mu) * is * g.data[c] + b.data[c];
        }
    }
    out
}

fn linear(x: &Mat, p: &[Mat], w: usize, b: usize) -> Mat {
    let (w, b) = (&p[w], &p[b]);
    let mut out = Mat::zeros(x.rows, w.cols);
    for r in 0..x.rows {
        out.row_mut(r).copy_from_slice(&b.data);
    }
    gemm(1.0, x, false, w, false, 1.0, &mut out);
    out
}

fn ffn(x: &Mat, p: &[Mat], f: FfnIdx) -> Mat {
    let mut h = linear(x, p, f.w1, f.b1);
    for v in &mut h.data {
        let u = *v;
        *v = 0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh());
    }
    linear(&h, p, f.w2, f.b2)
}

/// Attention of each query row over all rows of `k`/`v` (no mask).
fn attend(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let d = q.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Mat::zeros(q.rows, d);
    let mut w = vec![0.0; k.rows];
    for r in 0..q.rows {
        let qr = q.row(r);
        for h in 0..heads {
            let off = h * dh;
            let mut max = f64::NEG_INFINITY;
            for (j, wj) in w.iter_mut().enumerate() {
                let kr = &k.row(j)[off..off + dh];
                let s: f64 = qr[off..off + dh].iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale;
                *wj = s;
                max = max.max(s);
            }
            let mut z = 0.0;
            for wj in w.iter_mut() {
                *wj = (*wj - max).exp();
                z += *wj;
            }
            let o = &mut out.row_mut(r)[off..off + dh];
            for (j, wj) in w.iter().enumerate() {
                let a = wj / z;
                for (oc, vc) in o.iter_mut().zip(&v.row(j)[off..off + dh]) {
                    *oc += a * vc;
                }
            }
        }
    }
    out
}

fn split_kv(kv: &Mat) -> (Mat, Mat) {
    let d = kv.cols / 2;
    let mut k = Mat::zeros(kv.rows, d);
    let mut v = Mat::zeros(kv.rows, d);
    for r in 0..kv.rows {
        k.row_mut(r).copy_from_slice(&kv.row(r)[..d]);
        v.row_mut(r).copy_from_slice(&kv.row(r)[d..]);
    }
    (k, v)
}

fn self_attention(x: &Mat, p: &[Mat], a: AttnIdx, heads: usize) -> Mat {
    let q = linear(x, p, a.wq, a.bq);
    let (k, v) = split_kv(&linear(x, p, a.wkv, a.bkv));
    let o = attend(&q, &k, &v, heads);
    linear(&o, p, a.wo, a.bo)
}

/// Per-layer cross-attention keys and values of an encoded source.
pub(crate) struct EncodedSource {
    cross_kv: Vec<(Mat, Mat)>,
}

pub(crate) fn encode_source(m: &Model, src: &[TokenId]) -> EncodedSource {
    if src.is_empty() {
        return EncodedSource { cross_kv: Vec::new() };
    }
    let p = &m.params;
    let lay = &m.layout;
    let heads = m.config.heads;
    let d = m.config.d_model;
    let mut x = Mat::zeros(src.len(), d);
    for (i, &tok) in src.iter().enumerate() {
        let row = x.row_mut(i);
        for ((o, e), q) in row.iter_mut().zip(p[lay.tok_emb].row(tok)).zip(p[lay.enc_pos].row(i)) {
            *o = e + q;
        }
    }
    for l in &lay.enc {
        let h = layer_norm(&x, p, l.ln1);
        x.add_assign(&self_attention(&h, p, l.attn, heads));
        let h = layer_norm(&x, p, l.ln2);
        x.add_assign(&ffn(&h, p, l.ffn));
    }
    let enc = layer_norm(&x, p, lay.enc_ln);
    let cross_kv = lay.dec.iter().map(|l| split_kv(&linear(&enc, p, l.cross.wkv, l.cross.bkv))).collect();
    EncodedSource { cross_kv }
}

/// Decoder state after consuming a prefix: cached self-attention keys/values
/// and the distribution over the next token.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pos: usize,
    self_k: Vec<Vec<f64>>,
    self_v: Vec<Vec<f64>>,
    log_probs: Arc<Vec<f64>>,
}

/// Adapts a [`Model`] and an encoded source to the [`StepModel`] interface,
/// optionally applying classifier-head guidance.
pub struct ModelStepper<'m> {
    model: &'m Model,
    enc: EncodedSource,
    guidance: Option<DirectorGuidance>,
    allowed: Vec<bool>,
}

impl<'m> ModelStepper<'m> {
    /// Special tokens other than `EOS` are never generated.
    pub fn new(model: &'m Model, src: &[TokenId], guidance: Option<DirectorGuidance>) -> Self {
        let allowed = (0..model.config.vocab_size).map(|t| t == EOS || !is_special(t)).collect();
        Self::with_allowed(model, src, guidance, allowed)
    }

    pub fn with_allowed(
        model: &'m Model,
        src: &[TokenId],
        guidance: Option<DirectorGuidance>,
        allowed: Vec<bool>,
    ) -> Self {
        assert_eq!(allowed.len(), model.config.vocab_size);
        if guidance.is_some() {
            assert!(model.has_classifier_head(), "guidance requires a classifier head");
        }
        ModelStepper { model, enc: encode_source(model, src), guidance, allowed }
    }

    pub fn max_len(&self) -> usize {
        self.model.config.max_len
    }

    fn step(&self, prev: Option<&DecoderState>, token: TokenId) -> DecoderState {
        let m = self.model;
        let p = &m.params;
        let lay = &m.layout;
        let heads = m.config.heads;
        let d = m.config.d_model;
        let pos = prev.map_or(0, |s| s.pos);
        let mut self_k = prev.map_or_else(|| vec![Vec::new(); lay.dec.len()], |s| s.self_k.clone());
        let mut self_v = prev.map_or_else(|| vec![Vec::new(); lay.dec.len()], |s| s.self_v.clone());

        let mut y = Mat::zeros(1, d);
        for ((o, e), q) in y.data.iter_mut().zip(p[lay.tok_emb].row(token)).zip(p[lay.dec_pos].row(pos)) {
            *o = e + q;
        }
        for (li, l) in lay.dec.iter().enumerate() {
            let h = layer_norm(&y, p, l.ln1);
            let q = linear(&h, p, l.self_attn.wq, l.self_attn.bq);
            let kv = linear(&h, p, l.self_attn.wkv, l.self_attn.bkv);
            self_k[li].extend_from_slice(&kv.data[..d]);
            self_v[li].extend_from_slice(&kv.data[d..]);
            let n = pos + 1;
            let k = Mat::from_vec(n, d, self_k[li].clone());
            let v = Mat::from_vec(n, d, self_v[li].clone());
            let a = attend(&q, &k, &v, heads);
            y.add_assign(&linear(&a, p, l.self_attn.wo, l.self_attn.bo));
            if let Some((ck, cv)) = self.enc.cross_kv.get(li) {
                let h = layer_norm(&y, p, l.ln2);
                let q = linear(&h, p, l.cross.wq, l.cross.bq);
                let a = attend(&q, ck, cv, heads);
                y.add_assign(&linear(&a, p, l.cross.wo, l.cross.bo));
            }
            let h = layer_norm(&y, p, l.ln3);
            y.add_assign(&ffn(&h, p, l.ffn));
        }
        let h = layer_norm(&y, p, lay.dec_ln);
        let mut logits = Mat::from_vec(1, m.config.vocab_size, p[lay.lm_bias].data.clone());
        match lay.lm_out {
            Some(w) => gemm(1.0, &h, false, &p[w], false, 1.0, &mut logits),
            None => gemm(1.0, &h, false, &p[lay.tok_emb], true, 1.0, &mut logits),
        }
        if let (Some(g), Some((w, b))) = (self.guidance, lay.cls) {
            let cls = linear(&h, p, w, b);
            for (l, c) in logits.data.iter_mut().zip(&cls.data) {
                *l += g.gamma * log_sigmoid(*c);
            }
        }
        for (l, ok) in logits.data.iter_mut().zip(&self.allowed) {
            if !ok {
                *l = f64::NEG_INFINITY;
            }
        }
        log_softmax_in_place(&mut logits.data);
        DecoderState { pos: pos + 1, self_k, self_v, log_probs: Arc::new(logits.data) }
    }
}

impl StepModel for ModelStepper<'_> {
    type State = DecoderState;

    fn initial(&self) -> DecoderState {
        self.step(None, BOS)
    }

    fn log_probs<'s>(&self, state: &'s DecoderState) -> &'s [f64] {
        &state.log_probs
    }

    fn push(&self, state: &DecoderState, token: TokenId) -> DecoderState {
        self.step(Some(state), token)
    }

    fn eos(&self) -> TokenId {
        EOS
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(cls: bool, tie: bool) -> Model {
        let mut c = ModelConfig::new(40);
        c.d_model = 12;
        c.heads = 3;
        c.ff_dim = 10;
        c.max_len = 20;
        c.has_classifier_head = cls;
        c.tie_embeddings = tie;
        c.seed = 3;
        let mut m = Model::new(c).unwrap();
        // Give the classifier head non-trivial values.
        if let Some((w, _)) = m.layout.cls {
            for (i, v) in m.params[w].data.iter_mut().enumerate() {
                *v = ((i * 37 % 11) as f64 - 5.0) * 0.1;
            }
        }
        m
    }

    #[test]
    fn incremental_decoding_matches_teacher_forcing() {
        for (tie, src) in [(true, vec![25, 26, 27, 30]), (false, vec![]), (true, vec![33])] {
            let m = model(false, tie);
            let tgt = vec![22, 23, 24, 21, EOS];
            let (_, per) = m.nll(&src, &tgt).unwrap();
            let mut allowed = vec![true; 40];
            allowed[0] = true;
            let s = ModelStepper::with_allowed(&m, &src, None, allowed);
            let mut st = s.initial();
            for (i, &t) in tgt.iter().enumerate() {
                let lp = s.log_probs(&st)[t];
                assert!((lp + per[i]).abs() < 1e-10, "pos {i}: {lp} vs {}", -per[i]);
                st = s.push(&st, t);
            }
        }
    }

    #[test]
    fn guided_distribution_normalizes() {
        let m = model(true, true);
        for gamma in [0.0, 0.5, 1.0, 4.0] {
            let s = ModelStepper::new(&m, &[25, 26], Some(DirectorGuidance { gamma }));
            let st = s.push(&s.initial(), 30);
            let total: f64 = s.log_probs(&st).iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_gamma_is_bitwise_unguided() {
        let m = model(true, true);
        let a = ModelStepper::new(&m, &[25, 26], Some(DirectorGuidance { gamma: 0.0 }));
        let b = ModelStepper::new(&m, &[25, 26], None);
        let sa = a.push(&a.initial(), 30);
        let sb = b.push(&b.initial(), 30);
        assert_eq!(a.log_probs(&sa), b.log_probs(&sb));
    }

    #[test]
    fn guidance_follows_product_rule() {
        // p(t) ∝ p_lm(t) * sigmoid(c(t))^gamma, checked against an explicit computation.
        let m = model(true, true);
        let src = [25, 26, 27];
        let gamma = 2.0;
        let g = ModelStepper::new(&m, &src, Some(DirectorGuidance { gamma }));
        let u = ModelStepper::new(&m, &src, None);
        let gs = g.initial();
        let us = u.initial();
        let cls = {
            let mut tape = crate::autograd::Tape::new(&m.params);
            let out = super::super::forward::forward(&m, &mut tape, &src, &[EOS], None);
            tape.value(out.cls_logits.unwrap()).row(0).to_vec()
        };
        let unnorm: Vec<f64> = (0..40)
            .map(|t| {
                let p = u.log_probs(&us)[t].exp();
                p * crate::tensor::sigmoid(cls[t]).powf(gamma)
            })
            .collect();
        let z: f64 = unnorm.iter().sum();
        for t in 0..40 {
            let want = unnorm[t] / z;
            assert!((g.log_probs(&gs)[t].exp() - want).abs() < 1e-12);
        }
    }
}
