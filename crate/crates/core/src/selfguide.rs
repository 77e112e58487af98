//! Fixed/tuned encoder pair, layer views, layer sampling, projection head.
//!
//! The fixed encoder always runs in evaluation mode and its outputs are
//! detached, so no gradient can reach it. The tuned encoder's embedding layer
//! (token and position tables plus the embedding layer norm) is frozen.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::numerics::{Array, Leaves, ParamSet, Tensor};
use crate::probe;
use crate::text::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMethod {
    Max,
    Mean,
    Cls,
}

impl PoolingMethod {
    pub const ALL: [PoolingMethod; 3] = [PoolingMethod::Max, PoolingMethod::Mean, PoolingMethod::Cls];
}

impl fmt::Display for PoolingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingMethod::Max => "max",
            PoolingMethod::Mean => "mean",
            PoolingMethod::Cls => "cls",
        })
    }
}

impl FromStr for PoolingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolingMethod::Max),
            "mean" => Ok(PoolingMethod::Mean),
            "cls" => Ok(PoolingMethod::Cls),
            other => Err(Error::Config(format!("unknown pooling method {other:?}"))),
        }
    }
}

/// Reduces a `T x d` layer to a `1 x d` sentence vector over unmasked rows.
pub fn pool(hidden: &Tensor, mask: &[u8], method: PoolingMethod) -> Result<Tensor> {
    let rows: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == 1)
        .map(|(i, _)| i)
        .collect();
    if rows.is_empty() {
        return Err(Error::Empty("unmasked positions to pool"));
    }
    Ok(match method {
        PoolingMethod::Max => hidden.gather_rows(&rows).max_rows(),
        PoolingMethod::Mean => hidden.gather_rows(&rows).mean_rows(),
        PoolingMethod::Cls => hidden.slice_rows(0, 1),
    })
}

/// Uniform choice among a fixed subset of layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSampler {
    eligible: Vec<usize>,
}

impl LayerSampler {
    pub fn new(mut eligible: Vec<usize>, num_layers: usize) -> Result<Self> {
        eligible.sort_unstable();
        eligible.dedup();
        if eligible.is_empty() {
            return Err(Error::Config("layer sampler needs at least one layer".into()));
        }
        if let Some(&k) = eligible.iter().find(|&&k| k > num_layers) {
            return Err(Error::Config(format!("layer {k} outside 0..={num_layers}")));
        }
        Ok(Self { eligible })
    }

    /// Every layer `0..=num_layers`.
    pub fn all(num_layers: usize) -> Self {
        Self {
            eligible: (0..=num_layers).collect(),
        }
    }

    pub fn eligible(&self) -> &[usize] {
        &self.eligible
    }

    /// Position within [`eligible`](Self::eligible) of a uniformly drawn layer.
    pub fn sample_slot(&self, rng: &mut ChaCha8Rng) -> usize {
        rng.gen_range(0..self.eligible.len())
    }
}

/// Pooled fixed-encoder views, `views[i][s]` for sentence `i` and the layer
/// `layers[s]`. All are constants.
#[derive(Debug, Clone)]
pub struct Views {
    pub layers: Vec<usize>,
    pub views: Vec<Vec<Tensor>>,
}

impl Views {
    pub fn batch_size(&self) -> usize {
        self.views.len()
    }

    /// Count of view vectors.
    pub fn len(&self) -> usize {
        self.views.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn get(&self, sentence: usize, layer: usize) -> Option<&Tensor> {
        let slot = self.layers.iter().position(|&k| k == layer)?;
        self.views.get(sentence)?.get(slot)
    }

    /// All views of one layer stacked into `b x d`.
    pub fn layer_matrix(&self, layer: usize) -> Option<Tensor> {
        let slot = self.layers.iter().position(|&k| k == layer)?;
        Some(Tensor::concat_rows(&self.views.iter().map(|v| v[slot].clone()).collect::<Vec<_>>()))
    }
}

/// Draws a layer for one sentence; returns the layer index and its view.
pub fn sample_view(sentence_views: &[Tensor], layers: &[usize], sampler: &LayerSampler, rng: &mut ChaCha8Rng) -> (usize, Tensor) {
    let k = sampler.eligible()[sampler.sample_slot(rng)];
    let slot = layers
        .iter()
        .position(|&l| l == k)
        .expect("views cover every eligible layer");
    (k, sentence_views[slot].clone())
}

/// Views from explicit weights; outputs are detached whatever the leaves.
pub fn compute_views_with(
    weights: &Leaves,
    config: &EncoderConfig,
    batch: &Batch,
    pooling: PoolingMethod,
    sampler: &LayerSampler,
) -> Result<Views> {
    let states = encoder::encode_with(weights, config, batch, Mode::Eval)?;
    probe::record_fixed_views(|| probe::fingerprint_leaves(weights), batch.len());
    let layers = sampler.eligible().to_vec();
    let views = states
        .iter()
        .map(|state| {
            layers
                .iter()
                .map(|&k| pool(&state.layers[k], &state.mask, pooling).map(|v| v.detach()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Views { layers, views })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub hidden: usize,
    pub out: usize,
    /// When false the head is the identity map.
    pub enabled: bool,
    pub seed: u64,
}

impl HeadConfig {
    /// Hidden width 4d and output width d.
    pub fn for_hidden_size(d: usize, seed: u64) -> Self {
        Self {
            hidden: 4 * d,
            out: d,
            enabled: true,
            seed,
        }
    }
}

/// Two affine maps with a GELU between them, or the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProjectionHead {
    Identity,
    Mlp(ParamSet),
}

pub const HEAD_IN_WEIGHT: &str = "head.in.weight";
pub const HEAD_IN_BIAS: &str = "head.in.bias";
pub const HEAD_OUT_WEIGHT: &str = "head.out.weight";
pub const HEAD_OUT_BIAS: &str = "head.out.bias";

impl ProjectionHead {
    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases.
    pub fn init(input: usize, config: &HeadConfig) -> Result<Self> {
        if !config.enabled {
            return Ok(ProjectionHead::Identity);
        }
        if input == 0 || config.hidden == 0 || config.out == 0 {
            return Err(Error::Config("projection head sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            Array::new(vec![rows, cols], data).expect("valid shape")
        };
        let mut p = ParamSet::new();
        p.insert(HEAD_IN_WEIGHT, uniform(input, config.hidden));
        p.insert(HEAD_OUT_WEIGHT, uniform(config.hidden, config.out));
        p.insert(HEAD_IN_BIAS, Array::zeros(&[config.hidden]));
        p.insert(HEAD_OUT_BIAS, Array::zeros(&[config.out]));
        Ok(ProjectionHead::Mlp(p))
    }

    /// Builds graph handles; MLP weights are trainable iff `trainable`.
    pub fn weights(&self, trainable: bool) -> HeadWeights {
        match self {
            ProjectionHead::Identity => HeadWeights::Identity,
            ProjectionHead::Mlp(p) => HeadWeights::Mlp(p.leaves(|_| trainable)),
        }
    }

    pub fn params(&self) -> Option<&ParamSet> {
        match self {
            ProjectionHead::Identity => None,
            ProjectionHead::Mlp(p) => Some(p),
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut ParamSet> {
        match self {
            ProjectionHead::Identity => None,
            ProjectionHead::Mlp(p) => Some(p),
        }
    }
}

pub enum HeadWeights {
    Identity,
    Mlp(Leaves),
}

impl HeadWeights {
    pub fn grads(&self) -> crate::numerics::Grads {
        match self {
            HeadWeights::Identity => Default::default(),
            HeadWeights::Mlp(l) => l.grads(),
        }
    }
}

/// Applies the head row-wise: `affine -> gelu -> affine`.
pub fn project(x: &Tensor, head: &HeadWeights) -> Result<Tensor> {
    probe::record_projection(x.rows());
    match head {
        HeadWeights::Identity => Ok(x.clone()),
        HeadWeights::Mlp(w) => {
            let w_in = w.get(HEAD_IN_WEIGHT);
            if w_in.rows() != x.cols() {
                return Err(Error::Shape(format!(
                    "projection head expects {} inputs, got {}",
                    w_in.rows(),
                    x.cols()
                )));
            }
            Ok(x.matmul(w_in)
                .add_row(w.get(HEAD_IN_BIAS))
                .gelu()
                .matmul(w.get(HEAD_OUT_WEIGHT))
                .add_row(w.get(HEAD_OUT_BIAS)))
        }
    }
}

/// The fixed encoder, the tuned encoder, and the projection head.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    fixed: EncoderParams,
    pub tuned: EncoderParams,
    pub head: ProjectionHead,
}

impl DualEncoder {
    /// Deep-copies `params` into both encoders and builds a fresh head.
    pub fn clone_from(params: &EncoderParams, head: &HeadConfig) -> Result<Self> {
        Ok(Self {
            fixed: params.clone(),
            tuned: params.clone(),
            head: ProjectionHead::init(params.config.hidden_size, head)?,
        })
    }

    pub fn fixed(&self) -> &EncoderParams {
        &self.fixed
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.fixed.config
    }

    /// Whether a tuned-encoder parameter may be updated.
    pub fn is_tuned_trainable(name: &str) -> bool {
        !encoder::is_embedding_param(name)
    }

    /// Names of every frozen parameter: all of the fixed encoder (prefixed
    /// `fixed.`) and the tuned embedding layer (prefixed `tuned.`).
    pub fn frozen_names(&self) -> Vec<String> {
        let fixed = self.fixed.tensors.names().map(|n| format!("fixed.{n}"));
        let tuned = self
            .tuned
            .tensors
            .names()
            .filter(|n| !Self::is_tuned_trainable(n))
            .map(|n| format!("tuned.{n}"));
        fixed.chain(tuned).collect()
    }

    /// Tuned-encoder leaves with the embedding layer frozen.
    pub fn tuned_leaves(&self) -> Leaves {
        self.tuned.tensors.leaves(Self::is_tuned_trainable)
    }

    pub fn compute_views(&self, batch: &Batch, pooling: PoolingMethod, sampler: &LayerSampler) -> Result<Views> {
        compute_views_with(&self.fixed.constants(), &self.fixed.config, batch, pooling, sampler)
    }
}
