//! Finite-difference verification of the full training objective on a toy
//! two-sentence model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::step_loss_with;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::losses::{LossConfig, LossVariant};
use crate::numerics::{finite_difference_check, GradCheckOptions, GradCheckReport, Grads, ParamSet};
use crate::selfguide::{DualEncoder, HeadConfig, LayerSampler, PoolingMethod};
use crate::text::{Batch, Vocab};

const SENTENCES: [&str; 2] = ["the cat sat on the mat", "a dog barked at the moon"];
const SAMPLER_SEED: u64 = 11;

/// Sizes of the verification model.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckSetup {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub temperature: f64,
    pub reg_weight: f64,
    /// Scales every analytic gradient; anything but 1.0 must fail the check.
    pub gradient_scale: f64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_size: 16,
            temperature: 0.01,
            reg_weight: 0.1,
            gradient_scale: 1.0,
        }
    }
}

fn toy_dual(setup: &GradCheckSetup) -> Result<(DualEncoder, Batch)> {
    let vocab = Vocab::build(&SENTENCES, 1)?;
    let cfg = EncoderConfig {
        num_layers: setup.num_layers,
        hidden_size: setup.hidden_size,
        num_heads: 2,
        ffn_size: 2 * setup.hidden_size,
        vocab_size: vocab.len(),
        max_seq_len: 16,
        dropout: 0.1,
        seed: 1,
    };
    let params = EncoderParams::init(&cfg)?;
    let mut dual = DualEncoder::clone_from(&params, &HeadConfig::for_hidden_size(setup.hidden_size, 2))?;
    // Move the tuned copy away from the fixed one so the regularizer has a
    // nonzero gradient to check.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.01).expect("valid normal");
    for (name, array) in dual.tuned.tensors.iter_mut() {
        if DualEncoder::is_tuned_trainable(name) {
            for v in array.data_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    let tokens = SENTENCES
        .iter()
        .map(|s| vocab.tokenize(s, cfg.max_seq_len))
        .collect::<Result<Vec<_>>>()?;
    Ok((dual, Batch::collate(&tokens)?))
}

/// Checks d(total loss)/d(tuned params, head params) for one variant.
pub fn check_variant_gradients(variant: LossVariant, setup: &GradCheckSetup, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (dual, batch) = toy_dual(setup)?;
    let loss_cfg = LossConfig {
        variant,
        temperature: setup.temperature,
        reg_weight: setup.reg_weight,
        pooling: PoolingMethod::Max,
        sampler: LayerSampler::all(setup.num_layers),
    };
    let mut joint = dual.tuned.tensors.clone();
    for (name, array) in dual.head.params().into_iter().flat_map(ParamSet::iter) {
        joint.insert(name.clone(), array.clone());
    }
    let loss_fn = |params: &ParamSet| -> Result<(f64, Grads)> {
        let mut tuned = ParamSet::new();
        let mut local = dual.clone();
        for (name, array) in params.iter() {
            match local.head.params_mut().and_then(|h| h.get_mut(name)) {
                Some(slot) => *slot = array.clone(),
                None => tuned.insert(name.clone(), array.clone()),
            }
        }
        // a fresh sampler stream each call keeps the objective deterministic
        let mut sample_rng = ChaCha8Rng::seed_from_u64(SAMPLER_SEED);
        let out = step_loss_with(&local, &tuned, &batch, &loss_cfg, None, &mut sample_rng)?;
        out.loss.total.backward()?;
        let (mut grads, head) = out.grads();
        grads.extend(head);
        for g in grads.values_mut() {
            g.iter_mut().for_each(|x| *x *= setup.gradient_scale);
        }
        Ok((out.loss.report.total, grads))
    };
    finite_difference_check(loss_fn, &joint, opts)
}
