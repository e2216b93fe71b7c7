//! Small transformer encoder-decoder with a language-model head and an
//! optional per-token classifier head.
//!
//! The classifier head maps the last decoder state to one logit per vocabulary
//! entry, so at every position it scores each candidate next token. During
//! training only the logit of the observed target token is used.

mod checkpoint;
pub mod decode;
mod forward;
mod gradcheck;
mod infer;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use decode::{Candidate, DecodeConfig, DecodeMode, DirectorGuidance, StepModel};
pub use gradcheck::{grad_check, grad_check_against, grad_check_full, GradCheckReport};
pub use infer::ModelStepper;
pub use train::{train, Adam, TrainConfig, TrainExample, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Tape};
use crate::error::{Error, Result};
use crate::tensor::{log_softmax_in_place, sigmoid, Mat};
use crate::text::TokenId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub has_classifier_head: bool,
    /// Share the token embedding with the LM output projection.
    pub tie_embeddings: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            layers: 2,
            heads: 2,
            ff_dim: 128,
            max_len: 128,
            dropout: 0.0,
            has_classifier_head: false,
            tie_embeddings: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("max_len", self.max_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be divisible by heads ({})",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerNormIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnIdx {
    /// Query projection (d x d) and bias.
    pub wq: usize,
    pub bq: usize,
    /// Fused key/value projection (d x 2d) and bias.
    pub wkv: usize,
    pub bkv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncLayer {
    pub ln1: LayerNormIdx,
    pub attn: AttnIdx,
    pub ln2: LayerNormIdx,
    pub ffn: FfnIdx,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecLayer {
    pub ln1: LayerNormIdx,
    pub self_attn: AttnIdx,
    pub ln2: LayerNormIdx,
    pub cross: AttnIdx,
    pub ln3: LayerNormIdx,
    pub ffn: FfnIdx,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub enc_pos: usize,
    pub dec_pos: usize,
    pub enc: Vec<EncLayer>,
    pub enc_ln: LayerNormIdx,
    pub dec: Vec<DecLayer>,
    pub dec_ln: LayerNormIdx,
    /// Untied output projection (d x V); `None` when tied to `tok_emb`.
    pub lm_out: Option<usize>,
    pub lm_bias: usize,
    pub cls: Option<(usize, usize)>,
}

#[derive(Clone, Copy, PartialEq)]
enum Init {
    Uniform(f64),
    Zeros,
    Ones,
}

/// Builds the parameter list; shared with the reward model's encoder.
pub(crate) struct ParamBuilder {
    pub names: Vec<String>,
    pub values: Vec<Mat>,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder { names: Vec::new(), values: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let mut m = Mat::zeros(rows, cols);
        match init {
            Init::Uniform(s) => m.data.iter_mut().for_each(|v| *v = self.rng.gen_range(-s..s)),
            Init::Zeros => {}
            Init::Ones => m.fill(1.0),
        }
        self.names.push(name);
        self.values.push(m);
        self.values.len() - 1
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let s = 1.0 / (fan_in as f64).sqrt();
        let w = self.add(format!("{name}.weight"), fan_in, fan_out, Init::Uniform(s));
        let b = self.add(format!("{name}.bias"), 1, fan_out, Init::Zeros);
        (w, b)
    }

    pub fn zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.add(format!("{name}.weight"), fan_in, fan_out, Init::Zeros);
        let b = self.add(format!("{name}.bias"), 1, fan_out, Init::Zeros);
        (w, b)
    }

    pub fn embedding(&mut self, name: &str, rows: usize, d: usize) -> usize {
        self.add(name.to_string(), rows, d, Init::Uniform(0.1))
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> LayerNormIdx {
        let gain = self.add(format!("{name}.gain"), 1, d, Init::Ones);
        let bias = self.add(format!("{name}.bias"), 1, d, Init::Zeros);
        LayerNormIdx { gain, bias }
    }

    pub fn attn(&mut self, name: &str, d: usize) -> AttnIdx {
        let (wq, bq) = self.linear(&format!("{name}.q"), d, d);
        let (wkv, bkv) = self.linear(&format!("{name}.kv"), d, 2 * d);
        let (wo, bo) = self.linear(&format!("{name}.out"), d, d);
        AttnIdx { wq, bq, wkv, bkv, wo, bo }
    }

    pub fn ffn(&mut self, name: &str, d: usize, ff: usize) -> FfnIdx {
        let (w1, b1) = self.linear(&format!("{name}.fc1"), d, ff);
        let (w2, b2) = self.linear(&format!("{name}.fc2"), ff, d);
        FfnIdx { w1, b1, w2, b2 }
    }

    pub fn enc_layer(&mut self, name: &str, d: usize, ff: usize) -> EncLayer {
        EncLayer {
            ln1: self.layer_norm(&format!("{name}.ln1"), d),
            attn: self.attn(&format!("{name}.attn"), d),
            ln2: self.layer_norm(&format!("{name}.ln2"), d),
            ffn: self.ffn(&format!("{name}.ffn"), d, ff),
        }
    }
}

/// A trainable encoder-decoder. Parameters are finite and the classifier head
/// is present exactly when `config.has_classifier_head`.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub(crate) params: Vec<Mat>,
    pub(crate) names: Vec<String>,
    pub(crate) layout: Layout,
}

impl Model {
    /// Deterministic given `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, v, ff, l) = (config.d_model, config.vocab_size, config.ff_dim, config.max_len);
        let mut b = ParamBuilder::new(config.seed);
        let tok_emb = b.embedding("tok_emb", v, d);
        let enc_pos = b.embedding("enc_pos", l, d);
        let dec_pos = b.embedding("dec_pos", l, d);
        let enc = (0..config.layers).map(|i| b.enc_layer(&format!("enc.{i}"), d, ff)).collect();
        let enc_ln = b.layer_norm("enc.ln_f", d);
        let dec = (0..config.layers)
            .map(|i| DecLayer {
                ln1: b.layer_norm(&format!("dec.{i}.ln1"), d),
                self_attn: b.attn(&format!("dec.{i}.self"), d),
                ln2: b.layer_norm(&format!("dec.{i}.ln2"), d),
                cross: b.attn(&format!("dec.{i}.cross"), d),
                ln3: b.layer_norm(&format!("dec.{i}.ln3"), d),
                ffn: b.ffn(&format!("dec.{i}.ffn"), d, ff),
            })
            .collect();
        let dec_ln = b.layer_norm("dec.ln_f", d);
        let (lm_out, lm_bias) = if config.tie_embeddings {
            let bias = b.add("lm_head.bias".into(), 1, v, Init::Zeros);
            (None, bias)
        } else {
            let (w, bias) = b.linear("lm_head", d, v);
            (Some(w), bias)
        };
        let cls = config.has_classifier_head.then(|| b.zero_linear("cls_head", d, v));
        let layout = Layout { tok_emb, enc_pos, dec_pos, enc, enc_ln, dec, dec_ln, lm_out, lm_bias, cls };
        Ok(Model { config, params: b.values, names: b.names, layout })
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Mat::len).sum()
    }

    pub fn has_classifier_head(&self) -> bool {
        self.layout.cls.is_some()
    }

    pub fn params(&self) -> &[Mat] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Mutable parameter access for tests and tooling; shapes must be preserved.
    pub fn params_mut(&mut self) -> &mut [Mat] {
        &mut self.params
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Mat::is_finite)
    }

    /// Copy of this model carrying a zero-initialized classifier head.
    pub fn with_classifier_head(&self) -> Model {
        if self.has_classifier_head() {
            return self.clone();
        }
        let mut config = self.config.clone();
        config.has_classifier_head = true;
        let mut m = self.clone();
        m.config = config;
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        m.names.push("cls_head.weight".into());
        m.params.push(Mat::zeros(d, v));
        m.names.push("cls_head.bias".into());
        m.params.push(Mat::zeros(1, v));
        m.layout.cls = Some((m.params.len() - 2, m.params.len() - 1));
        m
    }

    fn check_lengths(&self, src: &[TokenId], tgt: &[TokenId]) -> Result<()> {
        let l = self.config.max_len;
        if src.len() > l || tgt.len() > l {
            return Err(Error::invalid("sequence", format!("length exceeds max_len {l}")));
        }
        let v = self.config.vocab_size;
        if src.iter().chain(tgt).any(|&t| t >= v) {
            return Err(Error::invalid("sequence", format!("token id >= vocab size {v}")));
        }
        Ok(())
    }

    /// Teacher-forced negative log-likelihood (natural log) of `tgt` given `src`.
    pub fn nll(&self, src: &[TokenId], tgt: &[TokenId]) -> Result<(f64, Vec<f64>)> {
        if tgt.is_empty() {
            return Err(Error::invalid("tgt", "empty target"));
        }
        self.check_lengths(src, tgt)?;
        let mut tape = Tape::new(&self.params);
        let out = forward::forward(self, &mut tape, src, tgt, None);
        let logits = tape.value(out.lm_logits);
        let per_token: Vec<f64> = (0..tgt.len())
            .map(|i| {
                let mut row = logits.row(i).to_vec();
                log_softmax_in_place(&mut row);
                -row[tgt[i]]
            })
            .collect();
        Ok((per_token.iter().sum(), per_token))
    }

    /// Teacher-forced `sigmoid(classifier logit)` of each target token.
    pub fn classifier_scores(&self, src: &[TokenId], tgt: &[TokenId]) -> Result<Vec<f64>> {
        if !self.has_classifier_head() {
            return Err(Error::invalid("model", "classifier head absent"));
        }
        self.check_lengths(src, tgt)?;
        if tgt.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new(&self.params);
        let out = forward::forward(self, &mut tape, src, tgt, None);
        let cls = tape.value(out.cls_logits.expect("classifier head"));
        Ok((0..tgt.len()).map(|i| sigmoid(cls.get(i, tgt[i]))).collect())
    }

    /// Training loss of one example (weighted LM cross-entropy plus classifier
    /// BCE), with gradients accumulated into `grads` when given.
    pub fn example_loss(&self, ex: &TrainExample, cls_weight: f64, grads: Option<&mut Grads>) -> f64 {
        let mut tape = Tape::new(&self.params);
        let root = forward::example_loss(self, &mut tape, ex, cls_weight, None);
        let v = tape.scalar(root);
        if let Some(g) = grads {
            tape.backward(root, g);
        }
        v
    }
}

/// Appends `EOS` to a token sequence.
pub fn with_eos(mut ids: Vec<TokenId>) -> Vec<TokenId> {
    ids.push(crate::text::EOS);
    ids
}
