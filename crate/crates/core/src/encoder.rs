//! Miniature transformer encoder with per-layer output taps.
//!
//! Both the teacher and the student are instances of [`EncoderModel`]:
//! token + learned position embeddings with a layer norm, a stack of
//! post-norm transformer layers (multi-head attention, GELU feed-forward),
//! and a linear classifier head over the first-position hidden state.
//! [`ForwardTrace`] exposes the normalized embedding output and every
//! layer's final (post-norm feed-forward) output for distillation taps.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Geometry of an encoder. Parameter count is a pure function of this.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    /// Output classes; 1 selects the regression head.
    pub num_classes: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} must be divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count:
    ///
    /// ```text
    /// embeddings: vocab*h + max_len*h + 2h            (token, position, emb layer norm)
    /// per layer:  4*(h*h + h)                          (Q,K,V,O weights and biases)
    ///           + (h*f + f) + (f*h + h)                (feed-forward in/out)
    ///           + 4h                                   (two layer norms, gain and bias)
    /// head:       h * num_classes
    /// ```
    pub fn param_count(&self) -> usize {
        let h = self.hidden_size;
        let f = self.ffn_size;
        let emb = self.vocab_size * h + self.max_len * h + 2 * h;
        let per_layer = 4 * (h * h + h) + (h * f + f) + (f * h + h) + 4 * h;
        emb + self.num_layers * per_layer + h * self.num_classes
    }
}

#[derive(Debug)]
struct LayerParams {
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln_attn_gain: Tensor,
    ln_attn_bias: Tensor,
    w_in: Tensor,
    b_in: Tensor,
    w_out: Tensor,
    b_out: Tensor,
    ln_ffn_gain: Tensor,
    ln_ffn_bias: Tensor,
}

/// Transformer encoder with trainable parameters.
#[derive(Debug)]
pub struct EncoderModel {
    config: EncoderConfig,
    token_emb: Tensor,
    pos_emb: Tensor,
    emb_ln_gain: Tensor,
    emb_ln_bias: Tensor,
    layers: Vec<LayerParams>,
    head: Tensor,
}

/// Everything a forward pass exposes for distillation and training.
#[derive(Debug)]
pub struct ForwardTrace {
    /// Normalized token+position embedding, the full input to layer 1.
    pub emb_out: Tensor,
    /// Final (post-norm feed-forward) output of each transformer layer.
    pub ffn_outs: Vec<Tensor>,
    /// Classifier logits from the first-position hidden state.
    pub logits: Tensor,
}

impl ForwardTrace {
    /// Constant copy usable across tapes; teacher outputs are detached
    /// before feeding the distillation losses so no gradient flows into
    /// them.
    pub fn detach(&self) -> ForwardTrace {
        ForwardTrace {
            emb_out: self.emb_out.detach(),
            ffn_outs: self.ffn_outs.iter().map(Tensor::detach).collect(),
            logits: self.logits.detach(),
        }
    }
}

const INIT_RANGE: f64 = 0.08;

impl EncoderModel {
    /// Deterministic initialization: weights, biases and embeddings drawn
    /// uniform(-0.08, 0.08) from a seeded stream, layer-norm gain 1 bias 0.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<EncoderModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |shape: &[usize]| -> Tensor {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
            Tensor::param(data, shape).expect("init shape is valid")
        };
        let ones = |n: usize| Tensor::param(vec![1.0; n], &[n]).expect("valid");
        let zeros_p = |n: usize| Tensor::param(vec![0.0; n], &[n]).expect("valid");

        let h = config.hidden_size;
        let token_emb = draw(&[config.vocab_size, h]);
        let pos_emb = draw(&[config.max_len, h]);
        let emb_ln_gain = ones(h);
        let emb_ln_bias = zeros_p(h);
        let mut layers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            layers.push(LayerParams {
                wq: draw(&[h, h]),
                bq: draw(&[h]),
                wk: draw(&[h, h]),
                bk: draw(&[h]),
                wv: draw(&[h, h]),
                bv: draw(&[h]),
                wo: draw(&[h, h]),
                bo: draw(&[h]),
                ln_attn_gain: ones(h),
                ln_attn_bias: zeros_p(h),
                w_in: draw(&[h, config.ffn_size]),
                b_in: draw(&[config.ffn_size]),
                w_out: draw(&[config.ffn_size, h]),
                b_out: draw(&[h]),
                ln_ffn_gain: ones(h),
                ln_ffn_bias: zeros_p(h),
            });
        }
        let head = draw(&[h, config.num_classes]);
        Ok(EncoderModel {
            config: config.clone(),
            token_emb,
            pos_emb,
            emb_ln_gain,
            emb_ln_bias,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// All trainable parameters in a stable order. This order defines the
    /// checkpoint layout and the optimizer state layout.
    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("token_emb".to_string(), self.token_emb.clone()),
            ("pos_emb".to_string(), self.pos_emb.clone()),
            ("emb_ln_gain".to_string(), self.emb_ln_gain.clone()),
            ("emb_ln_bias".to_string(), self.emb_ln_bias.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let named: [(&str, &Tensor); 16] = [
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln_attn_gain", &l.ln_attn_gain),
                ("ln_attn_bias", &l.ln_attn_bias),
                ("w_in", &l.w_in),
                ("b_in", &l.b_in),
                ("w_out", &l.w_out),
                ("b_out", &l.b_out),
                ("ln_ffn_gain", &l.ln_ffn_gain),
                ("ln_ffn_bias", &l.ln_ffn_bias),
            ];
            for (suffix, t) in named {
                out.push((format!("layer{i}.{suffix}"), (*t).clone()));
            }
        }
        out.push(("head".to_string(), self.head.clone()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Normalize a token sequence to exactly `max_len` ids: pad with 0,
    /// truncate from the right.
    fn fit_tokens(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocab of {}",
                self.config.vocab_size
            )));
        }
        let l = self.config.max_len;
        let mut ids = tokens.to_vec();
        ids.truncate(l);
        ids.resize(l, 0);
        Ok(ids)
    }

    /// Full forward pass on a tape.
    ///
    /// When `inject_emb` is given, the embedding lookup is bypassed and the
    /// injected matrix feeds layer 1 directly; this carries the perturbed
    /// embedding of the second training pass.
    pub fn forward(
        &self,
        tape: &Tape,
        tokens: &[usize],
        inject_emb: Option<&Tensor>,
    ) -> Result<ForwardTrace> {
        let ids = self.fit_tokens(tokens)?;
        let h = self.config.hidden_size;
        let l = self.config.max_len;

        let emb_out = match inject_emb {
            Some(inj) => {
                let s = inj.shape();
                if s != [l, h] {
                    return Err(Error::Dimension { op: "inject_emb", lhs: s, rhs: vec![l, h] });
                }
                inj.clone()
            }
            None => {
                let tok = tape.embed(&self.token_emb, &ids)?;
                let summed = tape.add(&tok, &self.pos_emb)?;
                tape.layer_norm(&summed, &self.emb_ln_gain, &self.emb_ln_bias)?
            }
        };

        let mut x = emb_out.clone();
        let mut ffn_outs = Vec::with_capacity(self.config.num_layers);
        for layer in &self.layers {
            let attn = self.attention(tape, &x, layer)?;
            let x_attn =
                tape.layer_norm(&tape.add(&x, &attn)?, &layer.ln_attn_gain, &layer.ln_attn_bias)?;
            let hidden = tape.gelu(&tape.add_row(&tape.matmul(&x_attn, &layer.w_in)?, &layer.b_in)?)?;
            let ffn = tape.add_row(&tape.matmul(&hidden, &layer.w_out)?, &layer.b_out)?;
            let x_out =
                tape.layer_norm(&tape.add(&x_attn, &ffn)?, &layer.ln_ffn_gain, &layer.ln_ffn_bias)?;
            ffn_outs.push(x_out.clone());
            x = x_out;
        }

        let pooled = tape.reshape(&tape.row(&x, 0)?, &[1, h])?;
        let logits = tape.reshape(&tape.matmul(&pooled, &self.head)?, &[self.config.num_classes])?;
        Ok(ForwardTrace { emb_out, ffn_outs, logits })
    }

    fn attention(&self, tape: &Tape, x: &Tensor, layer: &LayerParams) -> Result<Tensor> {
        let heads = self.config.num_heads;
        let dh = self.config.hidden_size / heads;
        let q = tape.add_row(&tape.matmul(x, &layer.wq)?, &layer.bq)?;
        let k = tape.add_row(&tape.matmul(x, &layer.wk)?, &layer.bk)?;
        let v = tape.add_row(&tape.matmul(x, &layer.wv)?, &layer.bv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut contexts = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = tape.col_slice(&q, head * dh, dh)?;
            let kh = tape.col_slice(&k, head * dh, dh)?;
            let vh = tape.col_slice(&v, head * dh, dh)?;
            let scores = tape.scale(&tape.matmul(&qh, &tape.transpose(&kh)?)?, scale)?;
            let weights = tape.softmax(&scores, 1.0)?;
            contexts.push(tape.matmul(&weights, &vh)?);
        }
        let ctx = tape.col_concat(&contexts)?;
        tape.add_row(&tape.matmul(&ctx, &layer.wo)?, &layer.bo)
    }

    /// Convenience evaluation pass: fresh throwaway tape, constant outputs.
    pub fn forward_detached(&self, tokens: &[usize]) -> Result<ForwardTrace> {
        let tape = Tape::new();
        Ok(self.forward(&tape, tokens, None)?.detach())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 8,
            max_len: 6,
            num_layers: 2,
            hidden_size: 8,
            num_heads: 2,
            ffn_size: 16,
            num_classes: 3,
        }
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.value().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn one_layer_trace_shape() {
        let cfg = EncoderConfig { num_layers: 1, ..tiny_config() };
        let model = EncoderModel::init(&cfg, 3).unwrap();
        let tape = Tape::new();
        let trace = model.forward(&tape, &[3, 4, 5], None).unwrap();
        assert_eq!(trace.ffn_outs.len(), 1);
        assert_eq!(trace.ffn_outs[0].shape(), vec![cfg.max_len, cfg.hidden_size]);
        assert_eq!(trace.emb_out.shape(), vec![cfg.max_len, cfg.hidden_size]);
        assert_eq!(trace.logits.shape(), vec![cfg.num_classes]);
    }

    #[test]
    fn inject_emb_bypass_reproduces_logits() {
        let model = EncoderModel::init(&tiny_config(), 9).unwrap();
        let tokens = [3, 4, 5, 6];
        let base = model.forward_detached(&tokens).unwrap();
        let tape = Tape::new();
        let again = model.forward(&tape, &tokens, Some(&base.emb_out)).unwrap();
        assert_eq!(bits(&again.logits), bits(&base.logits));
    }

    #[test]
    fn inject_emb_shape_mismatch_is_dimension_error() {
        let model = EncoderModel::init(&tiny_config(), 9).unwrap();
        let bad = Tensor::zeros(&[2, 8]);
        let tape = Tape::new();
        let err = model.forward(&tape, &[3], Some(&bad)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let model = EncoderModel::init(&tiny_config(), 1).unwrap();
        model.head.data_mut(|d| d.fill(0.0));
        let trace = model.forward_detached(&[3, 4]).unwrap();
        assert!(trace.logits.value().iter().all(|&v| v == 0.0));
        let tape = Tape::new();
        let probs = tape.softmax(&trace.logits, 1.0).unwrap();
        for p in probs.value() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn token_out_of_range_is_input_error() {
        let model = EncoderModel::init(&tiny_config(), 1).unwrap();
        let tape = Tape::new();
        let err = model.forward(&tape, &[3, 99], None).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = tiny_config();
        let a = EncoderModel::init(&cfg, 42).unwrap();
        let b = EncoderModel::init(&cfg, 42).unwrap();
        for ((na, ta), (nb, tb)) in a.parameters().iter().zip(b.parameters().iter()) {
            assert_eq!(na, nb);
            assert_eq!(bits(ta), bits(tb), "param {na} differs across identical seeds");
        }
        let c = EncoderModel::init(&cfg, 43).unwrap();
        let differs = a
            .parameters()
            .iter()
            .zip(c.parameters().iter())
            .any(|((_, ta), (_, tc))| bits(ta) != bits(tc));
        assert!(differs, "different seeds must differ somewhere");
    }

    #[test]
    fn param_count_matches_enumeration() {
        let cfg = EncoderConfig {
            vocab_size: 64,
            max_len: 16,
            num_layers: 4,
            hidden_size: 32,
            num_heads: 4,
            ffn_size: 64,
            num_classes: 3,
        };
        let model = EncoderModel::init(&cfg, 0).unwrap();
        assert_eq!(model.param_count(), cfg.param_count());
    }

    #[test]
    fn forward_is_deterministic() {
        let model = EncoderModel::init(&tiny_config(), 5).unwrap();
        let a = model.forward_detached(&[4, 5, 6, 7]).unwrap();
        let b = model.forward_detached(&[4, 5, 6, 7]).unwrap();
        assert_eq!(bits(&a.logits), bits(&b.logits));
        for (x, y) in a.ffn_outs.iter().zip(&b.ffn_outs) {
            assert_eq!(bits(x), bits(y));
        }
    }

    #[test]
    fn layer_outputs_do_not_depend_on_later_layers() {
        let model = EncoderModel::init(&tiny_config(), 7).unwrap();
        let before = model.forward_detached(&[3, 5, 7]).unwrap();
        // scribble on layer 2's weights; layer 1's tap must not move
        model.layers[1].wq.data_mut(|d| d.iter_mut().for_each(|v| *v += 0.5));
        model.layers[1].w_in.data_mut(|d| d.iter_mut().for_each(|v| *v -= 0.25));
        let after = model.forward_detached(&[3, 5, 7]).unwrap();
        assert_eq!(bits(&before.ffn_outs[0]), bits(&after.ffn_outs[0]));
        assert_ne!(bits(&before.ffn_outs[1]), bits(&after.ffn_outs[1]));
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        let model = EncoderModel::init(&tiny_config(), 11).unwrap();
        let tape = Tape::new();
        let trace = model.forward(&tape, &[3, 4, 5, 6, 7, 3], None).unwrap();
        let onehot = Tensor::new(vec![0.0, 1.0, 0.0], &[3]).unwrap();
        let loss = crate::losses::hard_loss_plain(&tape, &trace.logits, &onehot).unwrap();
        tape.backward(&loss).unwrap();
        for (name, t) in model.parameters() {
            let g = t.grad().unwrap_or_else(|| panic!("no grad for {name}"));
            assert!(g.iter().any(|&v| v != 0.0), "all-zero grad for {name}");
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.num_heads = 3; // 8 % 3 != 0
        assert!(cfg.validate().is_err());
        cfg = tiny_config();
        cfg.num_layers = 0;
        assert!(cfg.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn sequences_are_padded_and_truncated() {
        let model = EncoderModel::init(&tiny_config(), 2).unwrap();
        // short input pads with 0 and still works
        let short = model.forward_detached(&[3]).unwrap();
        assert_eq!(short.emb_out.shape(), vec![6, 8]);
        // long input truncates to max_len
        let long = model.forward_detached(&[3, 4, 5, 6, 7, 3, 4, 5]).unwrap();
        let trunc = model.forward_detached(&[3, 4, 5, 6, 7, 3]).unwrap();
        assert_eq!(bits(&long.logits), bits(&trunc.logits));
    }
}
