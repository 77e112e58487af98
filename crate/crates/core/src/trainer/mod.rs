//! Optimization loop: AdamW over the tuned encoder and the projection head,
//! periodic validation, early stopping, and checkpoint persistence.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::evalsuite::{self, EmbeddingStrategy};
use crate::losses::{self, LossConfig, LossOutput, LossReport, LossVariant};
use crate::numerics::{Grads, Leaves, ParamSet, Tensor};
use crate::selfguide::{self, DualEncoder, HeadWeights, LayerSampler, PoolingMethod};
use crate::text::{Batch, SimilarityRecord, TokenizedSentence, Vocab};

mod checkpoint;
mod verify;

pub use verify::{check_variant_gradients, GradCheckSetup};
pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Decoupled decay, applied only to matrices (names ending in `.weight`).
    pub weight_decay: f64,
    pub epochs: usize,
    pub eval_step: usize,
    pub endurance: usize,
    pub temperature: f64,
    pub reg_weight: f64,
    pub seed: u64,
    pub variant: LossVariant,
    pub pooling: PoolingMethod,
    /// Layers the sampler may draw; `None` means every layer `0..=l`.
    pub layers: Option<Vec<usize>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 5e-5,
            adam_betas: (0.9, 0.9),
            adam_eps: 1e-8,
            weight_decay: 0.01,
            epochs: 1,
            eval_step: 50,
            endurance: 10,
            temperature: 0.01,
            reg_weight: 0.1,
            seed: 1,
            variant: LossVariant::Opt3,
            pooling: PoolingMethod::Max,
            layers: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("eval_step", self.eval_step),
            ("endurance", self.endurance),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!("adam betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            betas: self.adam_betas,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn loss_config(&self, num_layers: usize) -> Result<LossConfig> {
        let sampler = match &self.layers {
            Some(layers) => LayerSampler::new(layers.clone(), num_layers)?,
            None => LayerSampler::all(num_layers),
        };
        let cfg = LossConfig {
            variant: self.variant,
            temperature: self.temperature,
            reg_weight: self.reg_weight,
            pooling: self.pooling,
            sampler,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter, plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
/// Parameters rejected by `trainable`, or without a gradient, are left alone.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &Grads,
    state: &mut AdamState,
    config: &AdamConfig,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter {name}")))?;
        if p.len() != g.len() {
            return Err(Error::Shape(format!("{name}: {} values vs {} gradients", p.len(), g.len())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = config.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, array) in params.iter_mut() {
        if !trainable(name) {
            continue;
        }
        let Some(g) = grads.get(name) else { continue };
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        let decay = if encoder::decays(name) { config.weight_decay } else { 0.0 };
        for (i, theta) in array.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *theta *= 1.0 - config.learning_rate * decay;
            *theta -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// Loss of one batch together with the graph leaves it was built from.
pub struct StepOutput {
    pub loss: LossOutput,
    pub tuned: Leaves,
    pub head: HeadWeights,
}

impl StepOutput {
    /// Gradients keyed by parameter name; head entries keep their `head.` prefix.
    pub fn grads(&self) -> (Grads, Grads) {
        (self.tuned.grads(), self.head.grads())
    }
}

/// Builds the full training objective for one batch. Views come from the
/// fixed encoder with dropout off; `dropout` enables dropout in the tuned
/// encoder and `sample_rng` drives the layer sampler.
pub fn step_loss(
    dual: &DualEncoder,
    batch: &Batch,
    config: &LossConfig,
    dropout: Option<&mut ChaCha8Rng>,
    sample_rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    step_loss_with(dual, &dual.tuned.tensors, batch, config, dropout, sample_rng)
}

/// [`step_loss`] with the tuned parameters supplied separately, so callers
/// can perturb them without touching `dual`.
pub fn step_loss_with(
    dual: &DualEncoder,
    tuned_params: &ParamSet,
    batch: &Batch,
    config: &LossConfig,
    dropout: Option<&mut ChaCha8Rng>,
    sample_rng: &mut ChaCha8Rng,
) -> Result<StepOutput> {
    let views = dual.compute_views(batch, config.pooling, &config.sampler)?;
    let tuned = tuned_params.leaves(DualEncoder::is_tuned_trainable);
    let head = dual.head.weights(true);
    let mode = match dropout {
        Some(rng) => Mode::Train(rng),
        None => Mode::Eval,
    };
    let states = encoder::encode_with(&tuned, dual.config(), batch, mode)?;
    let c = Tensor::concat_rows(&states.iter().map(|s| s.cls_vector()).collect::<Vec<_>>());
    let sampled: Vec<Tensor> = views
        .views
        .iter()
        .map(|v| selfguide::sample_view(v, &views.layers, &config.sampler, sample_rng).1)
        .collect();
    let h = Tensor::concat_rows(&sampled);
    let reg = losses::reg_term(&dual.fixed().tensors, &tuned)?;
    let loss = losses::contrastive_loss(&c, &h, &views.views, &head, config, &reg)?;
    Ok(StepOutput { loss, tuned, head })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: usize,
        epoch: usize,
        #[serde(flatten)]
        report: LossReport,
    },
    Eval {
        step: usize,
        spearman_x100: f64,
        improved: bool,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn steps(&self) -> impl Iterator<Item = (usize, &LossReport)> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step { step, report, .. } => Some((*step, report)),
            _ => None,
        })
    }

    pub fn evals(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Eval { step, spearman_x100, .. } => Some((*step, *spearman_x100)),
            _ => None,
        })
    }
}

/// One JSON object per line.
impl fmt::Display for TrainLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.records {
            writeln!(f, "{}", serde_json::to_string(r).map_err(|_| fmt::Error)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Tuned encoder at the best validation evaluation.
    pub best: EncoderParams,
    pub best_metric: f64,
    pub best_step: usize,
    pub steps: usize,
    pub stopped_early: bool,
    pub log: TrainLog,
}

fn tokenize_all(sentences: &[impl AsRef<str>], vocab: &Vocab, max_seq_len: usize) -> Result<Vec<TokenizedSentence>> {
    sentences.iter().map(|s| vocab.tokenize(s.as_ref(), max_seq_len)).collect()
}

/// Trains `dual` in place and returns the best tuned snapshot. `dual` is left
/// in its final state, which need not be the best one.
pub fn train(
    sentences: &[impl AsRef<str>],
    valid: &[SimilarityRecord],
    vocab: &Vocab,
    dual: &mut DualEncoder,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if sentences.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    if valid.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if sentences.len() < config.batch_size {
        return Err(Error::Config(format!(
            "corpus of {} sentences is smaller than one batch of {}",
            sentences.len(),
            config.batch_size
        )));
    }
    let loss_cfg = config.loss_config(dual.config().num_layers)?;
    let tokens = tokenize_all(sentences, vocab, dual.config().max_seq_len)?;
    let adam = config.adam();
    let mut state = AdamState::new();
    let mut head_state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = TrainLog::default();

    let mut best: Option<(EncoderParams, f64, usize)> = None;
    let mut misses = 0;
    let mut step = 0;
    let mut last_eval = 0;
    let mut stopped_early = false;

    let mut evaluate = |dual: &DualEncoder, step: usize, log: &mut TrainLog| -> Result<bool> {
        let metric = evalsuite::evaluate_sts(&dual.tuned, vocab, valid, EmbeddingStrategy::TunedCls)?.spearman_x100;
        let improved = best.as_ref().is_none_or(|(_, m, _)| metric > *m);
        if improved {
            best = Some((dual.tuned.clone(), metric, step));
            misses = 0;
        } else {
            misses += 1;
        }
        log::info!("step {step}: validation spearman x100 = {metric:.2}{}", if improved { " (best)" } else { "" });
        log.records.push(LogRecord::Eval {
            step,
            spearman_x100: metric,
            improved,
        });
        Ok(misses >= config.endurance)
    };

    let mut order: Vec<usize> = (0..tokens.len()).collect();
    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(config.batch_size) {
            step += 1;
            let picked: Vec<TokenizedSentence> = chunk.iter().map(|&i| tokens[i].clone()).collect();
            let batch = Batch::collate(&picked)?;
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(rand::Rng::gen(&mut rng));
            let out = step_loss(dual, &batch, &loss_cfg, Some(&mut dropout_rng), &mut rng)?;
            let report = out.loss.report;
            if !report.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    detail: report.to_string(),
                });
            }
            out.loss.total.backward()?;
            let (tuned_grads, head_grads) = out.grads();
            drop(out);
            adamw_step(&mut dual.tuned.tensors, &tuned_grads, &mut state, &adam, DualEncoder::is_tuned_trainable)?;
            if let Some(head) = dual.head.params_mut() {
                adamw_step(head, &head_grads, &mut head_state, &adam, |_| true)?;
            }
            log::debug!("step {step}: {report}");
            log.records.push(LogRecord::Step { step, epoch, report });
            if step % config.eval_step == 0 {
                last_eval = step;
                if evaluate(dual, step, &mut log)? {
                    stopped_early = true;
                    break 'epochs;
                }
            }
        }
    }
    if step == 0 || last_eval != step {
        evaluate(dual, step, &mut log)?;
    }
    let (best, best_metric, best_step) = best.expect("at least one evaluation ran");
    Ok(TrainOutcome {
        best,
        best_metric,
        best_step,
        steps: step,
        stopped_early,
        log,
    })
}
