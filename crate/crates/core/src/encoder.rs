//! A small post-layer-norm transformer encoder that exposes every layer.
//!
//! Layer 0 is `layer_norm(token_embedding + position_embedding)` (followed by
//! dropout in training mode); layers `1..=l` are standard blocks:
//! masked multi-head self-attention, residual + layer norm, then a GELU
//! feed-forward, residual + layer norm. There are no segment embeddings.
//!
//! Each sentence of a padded batch is run as its own `T x d` matrix, with pad
//! keys masked out of attention. Pad rows still carry values.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Array, Leaves, ParamSet, Tensor};
use crate::probe;
use crate::text::Batch;

pub const INIT_STDDEV: f64 = 0.02;
const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl EncoderConfig {
    /// The default desk-scale shape for a given vocabulary.
    pub fn desk_scale(vocab_size: usize) -> Self {
        Self {
            num_layers: 4,
            hidden_size: 64,
            num_heads: 4,
            ffn_size: 128,
            vocab_size,
            max_seq_len: crate::text::DEFAULT_MAX_SEQ_LEN,
            dropout: 0.1,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.hidden_size, self.ffn_size);
        let embeddings = self.vocab_size * d + self.max_seq_len * d + 2 * d;
        let attention = 4 * (d * d + d) + 2 * d;
        let ffn = d * f + f + f * d + d + 2 * d;
        embeddings + self.num_layers * (attention + ffn)
    }
}

pub fn layer_param(layer: usize, suffix: &str) -> String {
    format!("layer{layer}.{suffix}")
}

/// Parameters of the embedding layer (layer 0).
pub fn is_embedding_param(name: &str) -> bool {
    name.starts_with("embeddings.")
}

/// Weight matrices receive decoupled weight decay; biases and layer-norm
/// parameters do not.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tensors: ParamSet,
}

fn truncated_normal(rng: &mut ChaCha8Rng, n: usize, stddev: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, stddev).expect("positive stddev");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * stddev {
                break v;
            }
        })
        .collect()
}

impl EncoderParams {
    /// Weights from a truncated normal (stddev 0.02, cut at two deviations),
    /// zero biases, unit layer-norm gains. Deterministic in `config.seed`.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f) = (config.hidden_size, config.ffn_size);
        let mut t = ParamSet::new();
        let mut weight = |t: &mut ParamSet, name: String, rows: usize, cols: usize| {
            let data = truncated_normal(&mut rng, rows * cols, INIT_STDDEV);
            t.insert(name, Array::new(vec![rows, cols], data).expect("valid shape"));
        };
        weight(&mut t, "embeddings.token.weight".into(), config.vocab_size, d);
        weight(&mut t, "embeddings.position.weight".into(), config.max_seq_len, d);
        for layer in 0..config.num_layers {
            for proj in ["query", "key", "value", "output"] {
                weight(&mut t, layer_param(layer, &format!("attn.{proj}.weight")), d, d);
            }
            weight(&mut t, layer_param(layer, "ffn.in.weight"), d, f);
            weight(&mut t, layer_param(layer, "ffn.out.weight"), f, d);
        }
        t.insert("embeddings.ln.gain", Array::filled(&[d], 1.0));
        t.insert("embeddings.ln.bias", Array::zeros(&[d]));
        for layer in 0..config.num_layers {
            for proj in ["query", "key", "value", "output"] {
                t.insert(layer_param(layer, &format!("attn.{proj}.bias")), Array::zeros(&[d]));
            }
            t.insert(layer_param(layer, "ffn.in.bias"), Array::zeros(&[f]));
            t.insert(layer_param(layer, "ffn.out.bias"), Array::zeros(&[d]));
            for ln in ["attn.ln", "ffn.ln"] {
                t.insert(layer_param(layer, &format!("{ln}.gain")), Array::filled(&[d], 1.0));
                t.insert(layer_param(layer, &format!("{ln}.bias")), Array::zeros(&[d]));
            }
        }
        Ok(Self {
            config: config.clone(),
            tensors: t,
        })
    }

    /// Leaves that never accumulate gradients.
    pub fn constants(&self) -> Leaves {
        self.tensors.leaves(|_| false)
    }
}

/// Whether dropout is active; training mode carries the dropout RNG.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Hidden states of every layer for one sentence.
#[derive(Debug, Clone)]
pub struct EncoderState {
    /// `l + 1` matrices of shape `T x d`; index 0 is the embedding layer.
    pub layers: Vec<Tensor>,
    /// 1 on the sentence's true positions, 0 on padding.
    pub mask: Vec<u8>,
}

impl EncoderState {
    /// Row 0 of the last layer: the `[CLS]` sentence embedding, `1 x d`.
    pub fn cls_vector(&self) -> Tensor {
        self.layers.last().expect("at least the embedding layer").slice_rows(0, 1)
    }

    pub fn true_length(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

fn dropout(x: &Tensor, rate: f64, mode: &mut Mode) -> Tensor {
    match mode {
        Mode::Train(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let mask = (0..x.numel())
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                .collect();
            x.mul(&Tensor::constant(x.shape().to_vec(), mask))
        }
        _ => x.clone(),
    }
}

/// Runs the encoder on constant parameters.
pub fn encode(params: &EncoderParams, batch: &Batch, mode: Mode) -> Result<Vec<EncoderState>> {
    encode_with(&params.constants(), &params.config, batch, mode)
}

/// Runs the encoder on graph leaves, so gradients reach the trainable ones.
pub fn encode_with(weights: &Leaves, config: &EncoderConfig, batch: &Batch, mut mode: Mode) -> Result<Vec<EncoderState>> {
    batch.validate()?;
    let width = batch.width();
    if width > config.max_seq_len {
        return Err(Error::Padding(format!(
            "batch width {width} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    if let Some(&id) = batch.ids.iter().flatten().find(|&&id| id >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab_size: config.vocab_size,
        });
    }
    probe::record_encode(|| probe::fingerprint_leaves(weights), batch.len());

    let positions = weights.get("embeddings.position.weight").slice_rows(0, width);
    let mut states = Vec::with_capacity(batch.len());
    for (ids, mask) in batch.ids.iter().zip(&batch.mask) {
        let embedded = weights
            .get("embeddings.token.weight")
            .gather_rows(ids)
            .add(&positions)
            .layer_norm(weights.get("embeddings.ln.gain"), weights.get("embeddings.ln.bias"));
        let mut layers = Vec::with_capacity(config.num_layers + 1);
        layers.push(dropout(&embedded, config.dropout, &mut mode));
        let key_mask = Tensor::row(mask.iter().map(|&m| if m == 1 { 0.0 } else { MASKED_SCORE }).collect());
        for layer in 0..config.num_layers {
            let x = layers.last().unwrap();
            let (next, _) = block(weights, config, layer, x, &key_mask, &mut mode)?;
            layers.push(next);
        }
        states.push(EncoderState {
            layers,
            mask: mask.clone(),
        });
    }
    Ok(states)
}

fn affine(weights: &Leaves, x: &Tensor, prefix: &str) -> Tensor {
    x.matmul(weights.get(&format!("{prefix}.weight")))
        .add_row(weights.get(&format!("{prefix}.bias")))
}

/// Masked multi-head self-attention of one layer. Returns the projected
/// output (before the residual) and each head's attention probabilities.
pub fn self_attention(
    weights: &Leaves,
    config: &EncoderConfig,
    layer: usize,
    x: &Tensor,
    key_mask: &Tensor,
    mode: &mut Mode,
) -> Result<(Tensor, Vec<Tensor>)> {
    let p = |s: &str| layer_param(layer, s);
    let q = affine(weights, x, &p("attn.query"));
    let k = affine(weights, x, &p("attn.key"));
    let v = affine(weights, x, &p("attn.value"));
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut contexts = Vec::with_capacity(config.num_heads);
    let mut all_probs = Vec::with_capacity(config.num_heads);
    for h in 0..config.num_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let scores = q
            .slice_cols(lo, hi)
            .matmul(&k.slice_cols(lo, hi).transpose())
            .scale(scale)
            .add_row(key_mask);
        let probs = scores.softmax_rows()?;
        contexts.push(dropout(&probs, config.dropout, mode).matmul(&v.slice_cols(lo, hi)));
        all_probs.push(probs);
    }
    let context = if contexts.len() == 1 {
        contexts.pop().unwrap()
    } else {
        Tensor::concat_cols(&contexts)
    };
    Ok((affine(weights, &context, &p("attn.output")), all_probs))
}

fn block(
    weights: &Leaves,
    config: &EncoderConfig,
    layer: usize,
    x: &Tensor,
    key_mask: &Tensor,
    mode: &mut Mode,
) -> Result<(Tensor, Vec<Tensor>)> {
    let p = |s: &str| layer_param(layer, s);
    let (attn, probs) = self_attention(weights, config, layer, x, key_mask, mode)?;
    let attn = dropout(&attn, config.dropout, mode);
    let x1 = x
        .add(&attn)
        .layer_norm(weights.get(&p("attn.ln.gain")), weights.get(&p("attn.ln.bias")));
    let ff = affine(weights, &affine(weights, &x1, &p("ffn.in")).gelu(), &p("ffn.out"));
    let ff = dropout(&ff, config.dropout, mode);
    let out = x1
        .add(&ff)
        .layer_norm(weights.get(&p("ffn.ln.gain")), weights.get(&p("ffn.ln.bias")));
    Ok((out, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{TokenizedSentence, CLS_ID, SEP_ID};

    fn tiny(num_layers: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers,
            hidden_size: 16,
            num_heads: 2,
            ffn_size: 32,
            vocab_size: 100,
            max_seq_len: 16,
            dropout: 0.1,
            seed: 3,
        }
    }

    fn sentence(body: &[usize]) -> TokenizedSentence {
        let mut ids = vec![CLS_ID];
        ids.extend_from_slice(body);
        ids.push(SEP_ID);
        TokenizedSentence { ids }
    }

    #[test]
    fn init_is_deterministic() {
        let a = EncoderParams::init(&tiny(2)).unwrap();
        let b = EncoderParams::init(&tiny(2)).unwrap();
        assert!(a.tensors.bit_eq(&b.tensors));
        let mut other = tiny(2);
        other.seed = 4;
        assert!(!EncoderParams::init(&other).unwrap().tensors.bit_eq(&a.tensors));
    }

    #[test]
    fn init_rules() {
        let p = EncoderParams::init(&tiny(2)).unwrap();
        for (name, array) in p.tensors.iter() {
            if name.ends_with(".gain") {
                assert!(array.data().iter().all(|&v| v == 1.0), "{name}");
            } else if name.ends_with(".bias") {
                assert!(array.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                assert!(array.data().iter().all(|v| v.abs() <= 2.0 * INIT_STDDEV), "{name}");
            }
        }
    }

    #[test]
    fn param_count_matches_hand_count() {
        // l=2, d=16, heads=2, ffn=32, V=100, max_len=16, counted tensor by tensor:
        // embeddings: 100*16 + 16*16 + 16 + 16 = 1888
        // per layer: q,k,v,o 4*(256+16)=1088; attn ln 32; ffn 16*32+32 + 32*16+16 = 1072; ffn ln 32
        //            = 2224
        let expected = 1888 + 2 * 2224;
        let p = EncoderParams::init(&tiny(2)).unwrap();
        assert_eq!(p.tensors.numel(), expected);
        assert_eq!(tiny(2).param_count(), expected);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = tiny(2);
        c.num_heads = 3;
        assert!(EncoderParams::init(&c).is_err());
        let mut c = tiny(2);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn state_shapes_and_cls() {
        let p = EncoderParams::init(&tiny(2)).unwrap();
        let batch = Batch::collate(&[sentence(&[10, 11])]).unwrap();
        let states = encode(&p, &batch, Mode::Eval).unwrap();
        assert_eq!(states[0].layers.len(), 3);
        let cls = states[0].cls_vector();
        assert_eq!(cls.shape(), &[1, 16]);
        assert_eq!(cls.values(), states[0].layers[2].row_values(0));

        let p0 = EncoderParams::init(&tiny(0)).unwrap();
        let s0 = encode(&p0, &batch, Mode::Eval).unwrap();
        assert_eq!(s0[0].layers.len(), 1);
        assert_eq!(s0[0].cls_vector().values(), s0[0].layers[0].row_values(0));
    }

    #[test]
    fn identical_sentences_identical_states() {
        let p = EncoderParams::init(&tiny(2)).unwrap();
        let s = sentence(&[20, 21, 22]);
        let batch = Batch::collate(&[s.clone(), s]).unwrap();
        let states = encode(&p, &batch, Mode::Eval).unwrap();
        for (a, b) in states[0].layers.iter().zip(&states[1].layers) {
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn out_of_range_and_bad_padding() {
        let p = EncoderParams::init(&tiny(1)).unwrap();
        let batch = Batch::collate(&[sentence(&[100])]).unwrap();
        assert!(matches!(
            encode(&p, &batch, Mode::Eval),
            Err(Error::TokenOutOfRange { id: 100, .. })
        ));
        let mut batch = Batch::collate(&[sentence(&[5]), sentence(&[5, 6])]).unwrap();
        batch.mask[0][3] = 1;
        assert!(matches!(encode(&p, &batch, Mode::Eval), Err(Error::Padding(_))));
    }

    #[test]
    fn attention_rows_sum_to_one_over_unmasked_keys() {
        let cfg = tiny(1);
        let p = EncoderParams::init(&cfg).unwrap();
        let w = p.constants();
        // 3 real tokens padded to 5
        let batch = Batch::collate_to(&[sentence(&[7])], 5);
        let states = encode(&p, &batch, Mode::Eval).unwrap();
        let x = &states[0].layers[0];
        let key_mask = Tensor::row(vec![0.0, 0.0, 0.0, MASKED_SCORE, MASKED_SCORE]);
        let (_, probs) = self_attention(&w, &cfg, 0, x, &key_mask, &mut Mode::Eval).unwrap();

        // Recompute head scores by hand from the raw weight arrays.
        let d = cfg.hidden_size;
        let dh = cfg.head_dim();
        let get = |n: &str| p.tensors.get(&layer_param(0, n)).unwrap().data().to_vec();
        let (wq, bq, wk, bk) = (get("attn.query.weight"), get("attn.query.bias"), get("attn.key.weight"), get("attn.key.bias"));
        let proj = |w: &[f64], b: &[f64], row: &[f64]| -> Vec<f64> {
            (0..d).map(|j| b[j] + (0..d).map(|i| row[i] * w[i * d + j]).sum::<f64>()).collect()
        };
        for (h, head_probs) in probs.iter().enumerate() {
            for qi in 0..5 {
                let qv = proj(&wq, &bq, x.row_values(qi));
                let scores: Vec<f64> = (0..3)
                    .map(|kj| {
                        let kv = proj(&wk, &bk, x.row_values(kj));
                        (h * dh..(h + 1) * dh).map(|c| qv[c] * kv[c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let z: f64 = scores.iter().map(|s| s.exp()).sum();
                let row = head_probs.row_values(qi);
                for kj in 0..3 {
                    assert!((row[kj] - scores[kj].exp() / z).abs() < 1e-12);
                }
                assert_eq!(row[3], 0.0);
                assert_eq!(row[4], 0.0);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padding_invariance() {
        let p = EncoderParams::init(&tiny(2)).unwrap();
        let s = sentence(&[30, 31, 32]);
        let short = encode(&p, &Batch::collate_to(std::slice::from_ref(&s), 5), Mode::Eval).unwrap();
        let long = encode(&p, &Batch::collate_to(&[s], 9), Mode::Eval).unwrap();
        for (a, b) in short[0].layers.iter().zip(&long[0].layers) {
            for r in 0..5 {
                for (x, y) in a.row_values(r).iter().zip(b.row_values(r)) {
                    assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let p = EncoderParams::init(&tiny(2)).unwrap();
        let a = sentence(&[40, 41]);
        let b = sentence(&[42, 43, 44, 45]);
        let ab = encode(&p, &Batch::collate(&[a.clone(), b.clone()]).unwrap(), Mode::Eval).unwrap();
        let ba = encode(&p, &Batch::collate(&[b, a]).unwrap(), Mode::Eval).unwrap();
        assert_eq!(ab[0].cls_vector().values(), ba[1].cls_vector().values());
        assert_eq!(ab[1].cls_vector().values(), ba[0].cls_vector().values());
    }

    #[test]
    fn dropout_only_in_training() {
        let p = EncoderParams::init(&tiny(2)).unwrap();
        let batch = Batch::collate(&[sentence(&[50, 51, 52])]).unwrap();
        let e1 = encode(&p, &batch, Mode::Eval).unwrap();
        let e2 = encode(&p, &batch, Mode::Eval).unwrap();
        assert_eq!(e1[0].cls_vector().values(), e2[0].cls_vector().values());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = encode(&p, &batch, Mode::Train(&mut rng)).unwrap();
        assert_ne!(e1[0].cls_vector().values(), t[0].cls_vector().values());

        let mut cfg = tiny(2);
        cfg.dropout = 0.0;
        let p = EncoderParams::init(&cfg).unwrap();
        let e = encode(&p, &batch, Mode::Eval).unwrap();
        let t = encode(&p, &batch, Mode::Train(&mut rng)).unwrap();
        assert_eq!(e[0].cls_vector().values(), t[0].cls_vector().values());
    }
}
