//! STS-style evaluation: cosine scoring of sentence pairs under a chosen
//! embedding strategy, rank/product-moment correlation, and embedding export.
//!
//! Only the tuned encoder is involved; the projection head and the fixed
//! encoder never appear on this path.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::losses::cosine;
use crate::selfguide::{pool, PoolingMethod};
use crate::text::{Batch, SimilarityRecord, Vocab};

const EMBED_CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingStrategy {
    /// Last-layer `[CLS]` row of the tuned encoder.
    TunedCls,
    /// Pooled hidden states of one layer.
    LayerPool { layer: usize, pooling: PoolingMethod },
}

impl EmbeddingStrategy {
    /// `tuned_cls` first, then every layer with max, mean, and cls pooling.
    pub fn sweep(num_layers: usize) -> Vec<EmbeddingStrategy> {
        let mut out = vec![EmbeddingStrategy::TunedCls];
        for layer in 0..=num_layers {
            for pooling in PoolingMethod::ALL {
                out.push(EmbeddingStrategy::LayerPool { layer, pooling });
            }
        }
        out
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        match self {
            EmbeddingStrategy::LayerPool { layer, .. } if *layer > num_layers => {
                Err(Error::Config(format!("layer {layer} outside 0..={num_layers}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for EmbeddingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbeddingStrategy::TunedCls => f.write_str("tuned_cls"),
            EmbeddingStrategy::LayerPool { layer, pooling } => write!(f, "layer{layer}_{pooling}"),
        }
    }
}

impl FromStr for EmbeddingStrategy {
    type Err = Error;

    /// `tuned_cls` or `layer<k>_<max|mean|cls>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "tuned_cls" {
            return Ok(EmbeddingStrategy::TunedCls);
        }
        let bad = || Error::Config(format!("unknown embedding strategy {s:?}"));
        let rest = s.strip_prefix("layer").ok_or_else(bad)?;
        let (layer, pooling) = rest.split_once('_').ok_or_else(bad)?;
        Ok(EmbeddingStrategy::LayerPool {
            layer: layer.parse().map_err(|_| bad())?,
            pooling: pooling.parse()?,
        })
    }
}

/// Embeds sentences with dropout off, in chunks of padded batches.
pub fn embed(params: &EncoderParams, vocab: &Vocab, sentences: &[impl AsRef<str>], strategy: EmbeddingStrategy) -> Result<Vec<Vec<f64>>> {
    strategy.validate(params.config.num_layers)?;
    let tokenized = sentences
        .iter()
        .map(|s| vocab.tokenize(s.as_ref(), params.config.max_seq_len))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in tokenized.chunks(EMBED_CHUNK) {
        let batch = Batch::collate(chunk)?;
        for state in encoder::encode(params, &batch, Mode::Eval)? {
            let v = match strategy {
                EmbeddingStrategy::TunedCls => state.cls_vector(),
                EmbeddingStrategy::LayerPool { layer, pooling } => pool(&state.layers[layer], &state.mask, pooling)?,
            };
            out.push(v.values().to_vec());
        }
    }
    Ok(out)
}

pub fn similarity_score(params: &EncoderParams, vocab: &Vocab, a: &str, b: &str, strategy: EmbeddingStrategy) -> Result<f64> {
    let e = embed(params, vocab, &[a, b], strategy)?;
    cosine(&e[0], &e[1])
}

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn check_pair(pred: &[f64], gold: &[f64]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch(pred.len(), gold.len()));
    }
    if pred.len() < 2 {
        return Err(Error::Empty("correlation needs at least two points"));
    }
    Ok(())
}

/// Product-moment correlation.
pub fn pearson(pred: &[f64], gold: &[f64]) -> Result<f64> {
    check_pair(pred, gold)?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mg = gold.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vg = 0.0;
    for (p, g) in pred.iter().zip(gold) {
        let (dp, dg) = (p - mp, g - mg);
        cov += dp * dg;
        vp += dp * dp;
        vg += dg * dg;
    }
    if vp == 0.0 || vg == 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok((cov / (vp.sqrt() * vg.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64> {
    check_pair(pred, gold)?;
    pearson(&average_ranks(pred), &average_ranks(gold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub strategy: EmbeddingStrategy,
    pub spearman_x100: f64,
    pub pearson_x100: f64,
    pub n_pairs: usize,
}

impl EvalResult {
    pub const TSV_HEADER: &'static str = "strategy\tspearman_x100\tpearson_x100\tn";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{:.2}\t{:.2}\t{}",
            self.strategy, self.spearman_x100, self.pearson_x100, self.n_pairs
        )
    }
}

/// Cosine predictions for every record, in record order.
pub fn score_records(params: &EncoderParams, vocab: &Vocab, records: &[SimilarityRecord], strategy: EmbeddingStrategy) -> Result<Vec<f64>> {
    let left: Vec<&str> = records.iter().map(|r| r.sentence_a.as_str()).collect();
    let right: Vec<&str> = records.iter().map(|r| r.sentence_b.as_str()).collect();
    let ea = embed(params, vocab, &left, strategy)?;
    let eb = embed(params, vocab, &right, strategy)?;
    ea.iter().zip(&eb).map(|(a, b)| cosine(a, b)).collect()
}

pub fn evaluate_sts(params: &EncoderParams, vocab: &Vocab, records: &[SimilarityRecord], strategy: EmbeddingStrategy) -> Result<EvalResult> {
    if records.len() < 2 {
        return Err(Error::Empty("evaluation needs at least two records"));
    }
    let pred = score_records(params, vocab, records, strategy)?;
    let gold: Vec<f64> = records.iter().map(|r| r.gold).collect();
    Ok(EvalResult {
        strategy,
        spearman_x100: 100.0 * spearman(&pred, &gold)?,
        pearson_x100: 100.0 * pearson(&pred, &gold)?,
        n_pairs: records.len(),
    })
}

/// Evaluates every strategy of [`EmbeddingStrategy::sweep`]. A strategy whose
/// predictions are constant (layer-0 `[CLS]` is sentence independent) gets
/// NaN correlations instead of an error.
pub fn sweep_sts(params: &EncoderParams, vocab: &Vocab, records: &[SimilarityRecord]) -> Result<Vec<EvalResult>> {
    EmbeddingStrategy::sweep(params.config.num_layers)
        .into_iter()
        .map(|strategy| match evaluate_sts(params, vocab, records, strategy) {
            Err(Error::ConstantInput) if records.iter().any(|r| r.gold != records[0].gold) => Ok(EvalResult {
                strategy,
                spearman_x100: f64::NAN,
                pearson_x100: f64::NAN,
                n_pairs: records.len(),
            }),
            other => other,
        })
        .collect()
}

/// Writes `sentence<TAB>v1 v2 ... vd` per line, with shortest round-trip
/// float formatting.
pub fn export_embeddings(
    params: &EncoderParams,
    vocab: &Vocab,
    sentences: &[impl AsRef<str>],
    strategy: EmbeddingStrategy,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let vectors = if sentences.is_empty() {
        Vec::new()
    } else {
        embed(params, vocab, sentences, strategy)?
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (s, v) in sentences.iter().zip(&vectors) {
        let nums: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
        writeln!(w, "{}\t{}", s.as_ref().replace(['\t', '\n'], " "), nums.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`export_embeddings`].
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<f64>)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|line| {
            let (s, nums) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Config(format!("malformed embedding line in {}", path.display())))?;
            let v = nums
                .split(' ')
                .map(|x| x.parse::<f64>().map_err(|_| Error::Config(format!("bad number {x:?}"))))
                .collect::<Result<Vec<_>>>()?;
            Ok((s.to_string(), v))
        })
        .collect()
}
