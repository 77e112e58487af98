//! Contrastive objectives guiding `[CLS]` embeddings with fixed-encoder views.
//!
//! Every objective scores pairs with `log phi(u, v) = cos(f(u), f(v)) / tau`,
//! where `f` is the projection head, and evaluates its denominators with
//! log-sum-exp. The four variants differ only in which pairs enter each
//! denominator:
//!
//! | variant | anchors            | denominator of anchor                          |
//! |---------|--------------------|------------------------------------------------|
//! | `Base`  | all `c_i` and `h_i` | every other element of `{c} ∪ {h}`            |
//! | `Opt1`  | `c_i`              | `c_j (j != i)` and every `h_j`                 |
//! | `Opt2`  | `c_i`              | every `h_j`                                    |
//! | `Opt3`  | `(c_i, h_{i,k})`   | `h_{i,k}` and every view of every other sentence |
//!
//! The regularizer is the unnormalized squared distance between paired
//! fixed and tuned encoder parameters; the projection head has no fixed
//! counterpart and is excluded.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Leaves, ParamSet, Tensor};
use crate::selfguide::{project, HeadWeights, LayerSampler, PoolingMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    Base,
    Opt1,
    Opt2,
    Opt3,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [LossVariant::Base, LossVariant::Opt1, LossVariant::Opt2, LossVariant::Opt3];

    /// Whether the variant consumes one sampled view per sentence (as
    /// opposed to every eligible view).
    pub fn samples_views(self) -> bool {
        self != LossVariant::Opt3
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossVariant::Base => "base",
            LossVariant::Opt1 => "opt1",
            LossVariant::Opt2 => "opt2",
            LossVariant::Opt3 => "opt3",
        })
    }
}

impl FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(LossVariant::Base),
            "opt1" => Ok(LossVariant::Opt1),
            "opt2" => Ok(LossVariant::Opt2),
            "opt3" | "opt" => Ok(LossVariant::Opt3),
            other => Err(Error::Config(format!("unknown loss variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub temperature: f64,
    pub reg_weight: f64,
    pub pooling: PoolingMethod,
    pub sampler: LayerSampler,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.reg_weight.is_finite() && self.reg_weight >= 0.0) {
            return Err(Error::Config(format!("reg_weight must be non-negative, got {}", self.reg_weight)));
        }
        Ok(())
    }
}

/// Scalar summary of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub contrastive: f64,
    pub regularizer: f64,
    /// Mean `log phi` of the four pair classes; absent for single-sentence batches.
    pub factors: Option<[f64; 4]>,
}

impl LossReport {
    /// Flat `key=value` pairs in a fixed order.
    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        let f = self.factors.unwrap_or([f64::NAN; 4]);
        vec![
            ("total", self.total),
            ("contrastive", self.contrastive),
            ("regularizer", self.regularizer),
            ("factor1", f[0]),
            ("factor2", f[1]),
            ("factor3", f[2]),
            ("factor4", f[3]),
        ]
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.fields().iter().map(|(k, v)| format!("{k}={v}")).collect();
        f.write_str(&parts.join(" "))
    }
}

pub struct LossOutput {
    pub total: Tensor,
    pub report: LossReport,
}

/// Cosine similarity of two nonzero vectors, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch(u.len(), v.len()));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// `log phi(u, v)` for two `1 x d` vectors.
pub fn log_phi(u: &Tensor, v: &Tensor, head: &HeadWeights, temperature: f64) -> Result<f64> {
    let fu = project(u, head)?;
    let fv = project(v, head)?;
    Ok(cosine(fu.values(), fv.values())? / temperature)
}

/// Projects the rows and scales them to unit length.
fn unit_projected(x: &Tensor, head: &HeadWeights) -> Result<Tensor> {
    let fx = project(x, head)?;
    let norms = fx.l2_norm_rows();
    if norms.values().contains(&0.0) {
        return Err(Error::ZeroVector);
    }
    Ok(fx.div_col(&norms))
}

/// `log phi` between every row of `a` and every row of `b`, given unit rows.
fn logits(a: &Tensor, b: &Tensor, temperature: f64) -> Tensor {
    a.matmul(&b.transpose()).scale(1.0 / temperature)
}

/// An element of `{c_i} ∪ {h_i}` tagged with its sentence index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tagged {
    Cls(usize),
    View(usize),
}

impl Tagged {
    /// Element `m` of the `2b` stacked elements: the first `b` are `c`, the rest `h`.
    pub fn from_index(m: usize, batch_size: usize) -> Result<Self> {
        match m {
            m if m < batch_size => Ok(Tagged::Cls(m)),
            m if m < 2 * batch_size => Ok(Tagged::View(m - batch_size)),
            _ => Err(Error::Shape(format!("element {m} outside a batch of {batch_size}"))),
        }
    }

    pub fn index(self, batch_size: usize) -> usize {
        match self {
            Tagged::Cls(i) => i,
            Tagged::View(i) => batch_size + i,
        }
    }
}

/// The positive partner: `c_i <-> h_i`.
pub fn matching_mu(x: Tagged) -> Tagged {
    match x {
        Tagged::Cls(i) => Tagged::View(i),
        Tagged::View(i) => Tagged::Cls(i),
    }
}

fn check_batch(c: &Tensor, h: &Tensor) -> Result<usize> {
    let b = c.rows();
    if b == 0 {
        return Err(Error::Empty("batch"));
    }
    if h.rows() != b || h.cols() != c.cols() {
        return Err(Error::Shape(format!("c is {:?} but h is {:?}", c.shape(), h.shape())));
    }
    Ok(b)
}

/// Mean over terms of `logsumexp(denominator) - positive`.
fn nt_xent(scores: &Tensor, terms: Vec<(usize, Vec<usize>)>, positives: Vec<(usize, usize)>) -> Tensor {
    let lse = scores.logsumexp_select(&terms);
    lse.sub(&scores.gather(&positives)).mean()
}

fn finish(contrastive: Tensor, reg: &Tensor, config: &LossConfig, factors: Option<[f64; 4]>) -> Result<LossOutput> {
    config.validate()?;
    let total = contrastive.add(&reg.reshape(vec![]).scale(config.reg_weight));
    let report = LossReport {
        total: total.item(),
        contrastive: contrastive.item(),
        regularizer: reg.item(),
        factors,
    };
    Ok(LossOutput { total, report })
}

fn factors_from_units(c: &Tensor, groups: &[Vec<usize>], h: &Tensor, temperature: f64) -> Option<[f64; 4]> {
    if c.rows() < 2 {
        return None;
    }
    let c_rows: Vec<&[f64]> = (0..c.rows()).map(|i| c.row_values(i)).collect();
    let h_groups: Vec<Vec<&[f64]>> = groups
        .iter()
        .map(|g| g.iter().map(|&r| h.row_values(r)).collect())
        .collect();
    Some(pair_class_means(&c_rows, &h_groups, |u, v| {
        u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / temperature
    }))
}

/// Mean score of each pair class: (1) `c_i`-own views, (2) `c_i`-`c_j`,
/// (3) `c_i`-views of `j`, (4) views of `i`-views of `j`; `i != j` throughout.
fn pair_class_means<T: Copy>(c: &[T], h: &[Vec<T>], score: impl Fn(T, T) -> f64) -> [f64; 4] {
    let b = c.len();
    let mut sums = [0.0; 4];
    let mut counts = [0usize; 4];
    let mut add = |k: usize, v: f64| {
        sums[k] += v;
        counts[k] += 1;
    };
    for i in 0..b {
        for &v in &h[i] {
            add(0, score(c[i], v));
        }
        for j in (0..b).filter(|&j| j != i) {
            add(1, score(c[i], c[j]));
            for &v in &h[j] {
                add(2, score(c[i], v));
            }
            for &u in &h[i] {
                for &v in &h[j] {
                    add(3, score(u, v));
                }
            }
        }
    }
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = sums[k] / counts[k] as f64;
    }
    out
}

/// Symmetric NT-Xent over the `2b` elements `{c_i} ∪ {h_i}`.
pub fn loss_base(c: &Tensor, h: &Tensor, head: &HeadWeights, config: &LossConfig, reg: &Tensor) -> Result<LossOutput> {
    let b = check_batch(c, h)?;
    let zc = unit_projected(c, head)?;
    let zh = unit_projected(h, head)?;
    let x = Tensor::concat_rows(&[zc.clone(), zh.clone()]);
    let scores = logits(&x, &x, config.temperature);
    let n = 2 * b;
    let mut terms = Vec::with_capacity(n);
    let mut positives = Vec::with_capacity(n);
    for m in 0..n {
        terms.push((m, (0..n).filter(|&k| k != m).collect()));
        let partner = matching_mu(Tagged::from_index(m, b)?).index(b);
        positives.push((m, partner));
    }
    let groups: Vec<Vec<usize>> = (0..b).map(|i| vec![i]).collect();
    let factors = factors_from_units(&zc, &groups, &zh, config.temperature);
    finish(nt_xent(&scores, terms, positives), reg, config, factors)
}

/// `c_i` anchored against other `c_j` and every `h_j`.
pub fn loss_opt1(c: &Tensor, h: &Tensor, head: &HeadWeights, config: &LossConfig, reg: &Tensor) -> Result<LossOutput> {
    let b = check_batch(c, h)?;
    let zc = unit_projected(c, head)?;
    let zh = unit_projected(h, head)?;
    let scores = logits(&zc, &Tensor::concat_rows(&[zc.clone(), zh.clone()]), config.temperature);
    let terms = (0..b)
        .map(|i| (i, (0..2 * b).filter(|&k| k != i).collect()))
        .collect();
    let positives = (0..b).map(|i| (i, b + i)).collect();
    let groups: Vec<Vec<usize>> = (0..b).map(|i| vec![i]).collect();
    let factors = factors_from_units(&zc, &groups, &zh, config.temperature);
    finish(nt_xent(&scores, terms, positives), reg, config, factors)
}

/// Softmax cross-entropy of `c_i` over `{h_j}` with target `j = i`.
pub fn loss_opt2(c: &Tensor, h: &Tensor, head: &HeadWeights, config: &LossConfig, reg: &Tensor) -> Result<LossOutput> {
    let b = check_batch(c, h)?;
    let zc = unit_projected(c, head)?;
    let zh = unit_projected(h, head)?;
    let scores = logits(&zc, &zh, config.temperature);
    let terms = (0..b).map(|i| (i, (0..b).collect())).collect();
    let positives = (0..b).map(|i| (i, i)).collect();
    let groups: Vec<Vec<usize>> = (0..b).map(|i| vec![i]).collect();
    let factors = factors_from_units(&zc, &groups, &zh, config.temperature);
    finish(nt_xent(&scores, terms, positives), reg, config, factors)
}

/// Every view of sentence `i` guides `c_i`; the negatives are every view of
/// every other sentence. `views[i]` lists sentence `i`'s views (`1 x d`
/// each), one per eligible layer.
pub fn loss_opt3(c: &Tensor, views: &[Vec<Tensor>], head: &HeadWeights, config: &LossConfig, reg: &Tensor) -> Result<LossOutput> {
    let b = c.rows();
    if b == 0 || views.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if views.len() != b {
        return Err(Error::Shape(format!("{b} embeddings but views for {} sentences", views.len())));
    }
    let per = views[0].len();
    if per == 0 || views.iter().any(|v| v.len() != per) {
        return Err(Error::Shape("every sentence needs the same non-zero number of views".into()));
    }
    let zc = unit_projected(c, head)?;
    let stacked: Vec<Tensor> = views.iter().flatten().cloned().collect();
    let zh = unit_projected(&Tensor::concat_rows(&stacked), head)?;
    let scores = logits(&zc, &zh, config.temperature);
    let mut terms = Vec::with_capacity(b * per);
    let mut positives = Vec::with_capacity(b * per);
    for i in 0..b {
        let negatives: Vec<usize> = (0..b * per).filter(|col| col / per != i).collect();
        for s in 0..per {
            let own = i * per + s;
            let mut cols = Vec::with_capacity(negatives.len() + 1);
            cols.push(own);
            cols.extend_from_slice(&negatives);
            terms.push((i, cols));
            positives.push((i, own));
        }
    }
    let groups: Vec<Vec<usize>> = (0..b).map(|i| (i * per..(i + 1) * per).collect()).collect();
    let factors = factors_from_units(&zc, &groups, &zh, config.temperature);
    finish(nt_xent(&scores, terms, positives), reg, config, factors)
}

/// Dispatches on `config.variant`. `sampled` holds one view per sentence
/// (used by Base/Opt1/Opt2); `all_views` every eligible view (Opt3).
pub fn contrastive_loss(
    c: &Tensor,
    sampled: &Tensor,
    all_views: &[Vec<Tensor>],
    head: &HeadWeights,
    config: &LossConfig,
    reg: &Tensor,
) -> Result<LossOutput> {
    match config.variant {
        LossVariant::Base => loss_base(c, sampled, head, config, reg),
        LossVariant::Opt1 => loss_opt1(c, sampled, head, config, reg),
        LossVariant::Opt2 => loss_opt2(c, sampled, head, config, reg),
        LossVariant::Opt3 => loss_opt3(c, all_views, head, config, reg),
    }
}

/// `sum (tuned - fixed)^2` over all encoder parameters, as a graph scalar.
/// Frozen tuned parameters are constants equal to their fixed twins and so
/// contribute exactly zero.
pub fn reg_term(fixed: &ParamSet, tuned: &Leaves) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    let tuned_names: BTreeMap<&str, &Tensor> = tuned.iter().map(|(n, t)| (n.as_str(), t)).collect();
    if tuned_names.len() != fixed.len() {
        return Err(Error::Layout {
            name: "<count>".into(),
            detail: format!("{} fixed vs {} tuned tensors", fixed.len(), tuned_names.len()),
        });
    }
    for (name, f) in fixed.iter() {
        let t = tuned_names.get(name.as_str()).ok_or_else(|| Error::Layout {
            name: name.clone(),
            detail: "missing from tuned parameters".into(),
        })?;
        if t.shape() != f.shape() {
            return Err(Error::Layout {
                name: name.clone(),
                detail: format!("shape {:?} vs {:?}", f.shape(), t.shape()),
            });
        }
        let term = t.sub(&Tensor::constant_from(f)).square().sum();
        total = Some(match total {
            Some(acc) => acc.add(&term),
            None => term,
        });
    }
    total.ok_or(Error::Empty("parameter set"))
}

/// Plain-value regularizer.
pub fn reg_value(fixed: &ParamSet, tuned: &ParamSet) -> Result<f64> {
    fixed.check_layout(tuned)?;
    Ok(fixed
        .iter()
        .zip(tuned.iter())
        .map(|((_, f), (_, t))| f.data().iter().zip(t.data()).map(|(a, b)| (b - a) * (b - a)).sum::<f64>())
        .sum())
}

/// Mean `log phi` per pair class, without gradients. `views[i]` may hold one
/// or more views of sentence `i`.
pub fn factor_report(c: &Tensor, views: &[Vec<Tensor>], head: &HeadWeights, temperature: f64) -> Result<[f64; 4]> {
    let b = c.rows();
    if b < 2 {
        return Err(Error::Config(format!("factor report needs at least 2 sentences, got {b}")));
    }
    if views.len() != b {
        return Err(Error::Shape(format!("{b} embeddings but views for {} sentences", views.len())));
    }
    let zc = unit_projected(&c.detach(), head)?;
    let mut groups = Vec::with_capacity(b);
    let mut rows = Vec::new();
    for v in views {
        let start = rows.len();
        rows.extend(v.iter().map(Tensor::detach));
        groups.push((start..rows.len()).collect::<Vec<_>>());
    }
    let zh = unit_projected(&Tensor::concat_rows(&rows), head)?;
    Ok(factors_from_units(&zc, &groups, &zh, temperature).expect("b >= 2"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(variant: LossVariant, temperature: f64) -> LossConfig {
        LossConfig {
            variant,
            temperature,
            reg_weight: 0.1,
            pooling: PoolingMethod::Max,
            sampler: LayerSampler::all(1),
        }
    }

    fn zero_reg() -> Tensor {
        Tensor::scalar(0.0)
    }

    fn rows(v: &[&[f64]]) -> Tensor {
        let c = v[0].len();
        Tensor::matrix(v.len(), c, v.iter().flat_map(|r| r.iter().copied()).collect())
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn log_phi_examples() {
        let id = HeadWeights::Identity;
        let u = Tensor::row(vec![0.3, -0.4]);
        assert!((log_phi(&u, &u, &id, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((log_phi(&u, &u, &id, 0.01).unwrap() - 100.0).abs() < 1e-12);
        let v = log_phi(&Tensor::row(vec![1.0, 0.0]), &Tensor::row(vec![1.0, 1.0]), &id, 1.0).unwrap();
        assert!((v - 1.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mu_is_a_fixed_point_free_involution() {
        let b = 4;
        let mut seen = std::collections::HashSet::new();
        for m in 0..2 * b {
            let x = Tagged::from_index(m, b).unwrap();
            let y = matching_mu(x);
            assert_ne!(x, y);
            assert_eq!(matching_mu(y), x);
            seen.insert(y.index(b));
        }
        assert_eq!(seen.len(), 8);
        assert_eq!(matching_mu(Tagged::Cls(3)), Tagged::View(3));
        assert!(Tagged::from_index(8, 4).is_err());
    }

    #[test]
    fn single_sentence_is_zero() {
        let c = rows(&[&[0.2, 0.7, -0.1]]);
        let h = rows(&[&[0.5, 0.1, 0.3]]);
        let id = HeadWeights::Identity;
        for v in [LossVariant::Base, LossVariant::Opt1, LossVariant::Opt2] {
            let out = contrastive_loss(&c, &h, &[], &id, &cfg(v, 0.01), &zero_reg()).unwrap();
            assert!(out.report.contrastive.abs() <= 1e-9, "{v}");
            assert!(out.report.factors.is_none());
        }
        let views = vec![vec![Tensor::row(vec![0.5, 0.1, 0.3]), Tensor::row(vec![-0.2, 0.4, 0.9])]];
        let out = loss_opt3(&c, &views, &id, &cfg(LossVariant::Opt3, 0.01), &Tensor::scalar(2.0)).unwrap();
        assert!(out.report.contrastive.abs() <= 1e-9);
        assert!((out.report.total - 0.1 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn opt2_hand_value() {
        let c = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let h = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let out = loss_opt2(&c, &h, &HeadWeights::Identity, &cfg(LossVariant::Opt2, 1.0), &zero_reg()).unwrap();
        let l1 = (1.0 + (-1.0f64).exp()).ln();
        assert!((l1 - 0.313262).abs() < 1e-6);
        // both sentences are symmetric, so the mean equals L_1
        assert!((out.report.contrastive - l1).abs() < 1e-12);
    }

    #[test]
    fn total_is_contrastive_plus_weighted_reg() {
        let c = rows(&[&[1.0, 0.2], &[0.1, 1.0]]);
        let h = rows(&[&[0.9, 0.1], &[0.3, 0.8]]);
        let mut config = cfg(LossVariant::Opt1, 0.5);
        config.reg_weight = 0.37;
        let out = loss_opt1(&c, &h, &HeadWeights::Identity, &config, &Tensor::scalar(1.9)).unwrap();
        let r = out.report;
        assert!((r.total - (r.contrastive + 0.37 * r.regularizer)).abs() <= 1e-12);
        assert_eq!(r.total, out.total.item());
    }

    #[test]
    fn config_validation() {
        let c = rows(&[&[1.0, 0.2], &[0.1, 1.0]]);
        let mut config = cfg(LossVariant::Opt2, 0.0);
        assert!(loss_opt2(&c, &c, &HeadWeights::Identity, &config, &zero_reg()).is_err());
        config.temperature = 1.0;
        config.reg_weight = -1.0;
        assert!(loss_opt2(&c, &c, &HeadWeights::Identity, &config, &zero_reg()).is_err());
    }

    #[test]
    fn zero_vectors_and_empty_batches_rejected() {
        let c = rows(&[&[0.0, 0.0], &[0.1, 1.0]]);
        let h = rows(&[&[1.0, 0.0], &[0.1, 1.0]]);
        let id = HeadWeights::Identity;
        assert!(matches!(loss_opt2(&c, &h, &id, &cfg(LossVariant::Opt2, 1.0), &zero_reg()), Err(Error::ZeroVector)));
        assert!(loss_opt3(&h, &[], &id, &cfg(LossVariant::Opt3, 1.0), &zero_reg()).is_err());
    }

    #[test]
    fn factor_report_extremes() {
        let id = HeadWeights::Identity;
        let same = rows(&[&[0.3, 0.4], &[0.3, 0.4], &[0.3, 0.4]]);
        let views: Vec<Vec<Tensor>> = (0..3).map(|_| vec![Tensor::row(vec![0.6, 0.8])]).collect();
        for f in factor_report(&same, &views, &id, 0.5).unwrap() {
            assert!((f - 2.0).abs() < 1e-12);
        }
        let c = rows(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 3.0]]);
        let views: Vec<Vec<Tensor>> = (0..3).map(|i| vec![c.slice_rows(i, i + 1)]).collect();
        let f = factor_report(&c, &views, &id, 0.1).unwrap();
        assert!((f[0] - 10.0).abs() < 1e-12);
        for x in &f[1..] {
            assert_eq!(*x, 0.0);
        }
        assert!(factor_report(&c.slice_rows(0, 1), &views[..1], &id, 0.1).is_err());
    }

    #[test]
    fn reg_term_rules() {
        let mut fixed = ParamSet::new();
        fixed.insert("a", Array::new(vec![2], vec![1.0, 2.0]).unwrap());
        fixed.insert("b", Array::new(vec![1, 2], vec![-1.0, 0.5]).unwrap());
        let zero = reg_term(&fixed, &fixed.leaves(|_| true)).unwrap();
        assert_eq!(zero.item(), 0.0);

        let mut tuned = fixed.clone();
        tuned.get_mut("b").unwrap().data_mut()[1] += 0.25;
        let leaves = tuned.leaves(|_| true);
        let r = reg_term(&fixed, &leaves).unwrap();
        assert_eq!(r.item(), 0.0625);
        assert_eq!(reg_value(&fixed, &tuned).unwrap(), 0.0625);
        r.backward().unwrap();
        assert_eq!(leaves.grads()["b"], vec![0.0, 0.5]);

        let mut other = fixed.clone();
        other.insert("c", Array::zeros(&[1]));
        assert!(reg_term(&fixed, &other.leaves(|_| true)).is_err());
        let mut reshaped = ParamSet::new();
        reshaped.insert("a", Array::zeros(&[1, 2]));
        reshaped.insert("b", Array::zeros(&[1, 2]));
        assert!(matches!(reg_term(&fixed, &reshaped.leaves(|_| true)), Err(Error::Layout { .. })));
    }

    #[test]
    fn scale_invariance_with_identity_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = |r, c| Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let c = m(3, 4);
        let h = m(3, 4);
        let id = HeadWeights::Identity;
        for v in [LossVariant::Base, LossVariant::Opt1, LossVariant::Opt2] {
            let config = cfg(v, 0.2);
            let a = contrastive_loss(&c, &h, &[], &id, &config, &zero_reg()).unwrap().report.contrastive;
            let b = contrastive_loss(&c.scale(3.5), &h.scale(3.5), &[], &id, &config, &zero_reg())
                .unwrap()
                .report
                .contrastive;
            assert!((a - b).abs() < 1e-12, "{v}: {a} vs {b}");
        }
    }
}
