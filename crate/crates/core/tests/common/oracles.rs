//! Brute-force reference implementations written with plain loops, explicit
//! `exp`/`ln`, and an independently coded projection head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use selfguide::losses::{self, LossConfig, LossVariant};
use selfguide::numerics::{ParamSet, Tensor};
use selfguide::selfguide::{HeadConfig, HeadWeights, LayerSampler, PoolingMethod, ProjectionHead};
use statrs::function::erf::erf;

pub type Vector = Vec<f64>;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// `x W_in + b_in -> gelu -> W_out + b_out`, or the identity.
pub fn head_apply(x: &[f64], head: Option<&ParamSet>) -> Vector {
    let Some(p) = head else { return x.to_vec() };
    let affine = |x: &[f64], w: &str, b: &str| -> Vector {
        let w = p.get(w).unwrap();
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        let bias = p.get(b).unwrap().data();
        (0..cols)
            .map(|j| bias[j] + (0..rows).map(|i| x[i] * w.data()[i * cols + j]).sum::<f64>())
            .collect()
    };
    let hidden: Vector = affine(x, "head.in.weight", "head.in.bias").into_iter().map(gelu).collect();
    affine(&hidden, "head.out.weight", "head.out.bias")
}

pub fn cos(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

pub struct Oracle<'a> {
    pub head: Option<&'a ParamSet>,
    pub tau: f64,
}

impl Oracle<'_> {
    pub fn log_phi(&self, u: &[f64], v: &[f64]) -> f64 {
        cos(&head_apply(u, self.head), &head_apply(v, self.head)) / self.tau
    }

    pub fn phi(&self, u: &[f64], v: &[f64]) -> f64 {
        self.log_phi(u, v).exp()
    }

    /// Symmetric loss over the 2b elements; the partner of `c_i` is `h_i`
    /// and vice versa.
    pub fn base(&self, c: &[Vector], h: &[Vector]) -> f64 {
        let b = c.len();
        let x: Vec<&Vector> = c.iter().chain(h).collect();
        let mut total = 0.0;
        for m in 0..2 * b {
            let partner = if m < b { m + b } else { m - b };
            let z: f64 = (0..2 * b).filter(|&n| n != m).map(|n| self.phi(x[m], x[n])).sum();
            total += -(self.phi(x[m], x[partner]) / z).ln();
        }
        total / (2 * b) as f64
    }

    pub fn opt1(&self, c: &[Vector], h: &[Vector]) -> f64 {
        let b = c.len();
        let mut total = 0.0;
        for i in 0..b {
            let mut z = 0.0;
            for j in 0..b {
                if j != i {
                    z += self.phi(&c[i], &c[j]);
                }
                z += self.phi(&c[i], &h[j]);
            }
            total += -(self.phi(&c[i], &h[i]) / z).ln();
        }
        total / b as f64
    }

    /// Softmax cross-entropy of row `i` of the `c x h` logit matrix against
    /// target `i`, with max subtraction.
    pub fn cross_entropy(&self, c: &[Vector], h: &[Vector]) -> f64 {
        let b = c.len();
        let mut total = 0.0;
        for i in 0..b {
            let logits: Vector = h.iter().map(|hj| self.log_phi(&c[i], hj)).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            let p = (logits[i] - max).exp() / denom;
            total += -p.ln();
        }
        total / b as f64
    }

    pub fn opt3(&self, c: &[Vector], views: &[Vec<Vector>]) -> f64 {
        let b = c.len();
        let per = views[0].len();
        let mut total = 0.0;
        for i in 0..b {
            let others: f64 = (0..b)
                .filter(|&m| m != i)
                .flat_map(|m| views[m].iter())
                .map(|v| self.phi(&c[i], v))
                .sum();
            for view in &views[i] {
                let own = self.phi(&c[i], view);
                total += -(own / (own + others)).ln();
            }
        }
        total / (b * per) as f64
    }

    /// Mean log phi of: c_i with own views; c_i with c_j; c_i with views of
    /// j; views of i with views of j (i != j throughout).
    pub fn factors(&self, c: &[Vector], views: &[Vec<Vector>]) -> [f64; 4] {
        let b = c.len();
        let mut acc = [(0.0, 0usize); 4];
        let mut push = |k: usize, v: f64| {
            acc[k].0 += v;
            acc[k].1 += 1;
        };
        for i in 0..b {
            for v in &views[i] {
                push(0, self.log_phi(&c[i], v));
            }
            for j in 0..b {
                if i == j {
                    continue;
                }
                push(1, self.log_phi(&c[i], &c[j]));
                for v in &views[j] {
                    push(2, self.log_phi(&c[i], v));
                }
                for u in &views[i] {
                    for v in &views[j] {
                        push(3, self.log_phi(u, v));
                    }
                }
            }
        }
        acc.map(|(s, n)| s / n as f64)
    }
}

pub fn matrix(rows: &[Vector]) -> Tensor {
    Tensor::matrix(rows.len(), rows[0].len(), rows.iter().flatten().copied().collect())
}

pub fn row_tensors(rows: &[Vector]) -> Vec<Tensor> {
    rows.iter().map(|r| Tensor::row(r.clone())).collect()
}

pub fn config(variant: LossVariant, tau: f64) -> LossConfig {
    LossConfig {
        variant,
        temperature: tau,
        reg_weight: 0.1,
        pooling: PoolingMethod::Max,
        sampler: LayerSampler::all(1),
    }
}

pub fn mlp(d: usize, seed: u64) -> ProjectionHead {
    ProjectionHead::init(d, &HeadConfig::for_hidden_size(d, seed)).unwrap()
}

pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vector> {
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn contrastive(variant: LossVariant, c: &[Vector], h: &[Vector], head: &HeadWeights, tau: f64) -> f64 {
    losses::contrastive_loss(&matrix(c), &matrix(h), &[], head, &config(variant, tau), &Tensor::scalar(0.0))
        .unwrap()
        .report
        .contrastive
}

pub fn hand_batches() -> Vec<(Vec<Vector>, Vec<Vec<Vector>>)> {
    // b = 2 sentences, l = 1 so two views (layers 0 and 1) per sentence
    vec![
        (
            vec![vec![0.3, -0.2, 0.9], vec![-0.5, 0.4, 0.1]],
            vec![
                vec![vec![0.2, 0.1, 0.8], vec![0.4, -0.3, 0.7]],
                vec![vec![-0.6, 0.5, 0.0], vec![-0.1, 0.9, 0.3]],
            ],
        ),
        (
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]],
            vec![
                vec![vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
                vec![vec![-1.0, 0.5, 0.5], vec![0.25, 0.25, -1.0]],
            ],
        ),
    ]
}


/// Rank by counting: 1 + (#smaller) + (#equal others) / 2.
pub fn counting_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&xi| {
            let smaller = x.iter().filter(|&&v| v < xi).count() as f64;
            let equal = x.iter().filter(|&&v| v == xi).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn brute_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx).powi(2);
        syy += (y[i] - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn brute_spearman(x: &[f64], y: &[f64]) -> f64 {
    brute_pearson(&counting_ranks(x), &counting_ranks(y))
}

pub fn instance(rng: &mut ChaCha8Rng, ties: bool) -> (Vec<f64>, Vec<f64>) {
    loop {
        let n = rng.gen_range(2..60);
        let draw = |rng: &mut ChaCha8Rng| {
            if ties {
                rng.gen_range(0..6) as f64 * 0.5
            } else {
                rng.gen_range(-3.0..3.0)
            }
        };
        let x: Vec<f64> = (0..n).map(|_| draw(rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| draw(rng)).collect();
        let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
        if !constant(&x) && !constant(&y) {
            return (x, y);
        }
    }
}

/// Flattens both sets in name order and takes `(t - f) . (t - f)`.
pub fn flatten_dot(fixed: &ParamSet, tuned: &ParamSet) -> f64 {
    let flat = |p: &ParamSet| p.iter().flat_map(|(_, a)| a.data().to_vec()).collect::<Vec<f64>>();
    let diff: Vec<f64> = flat(tuned).iter().zip(flat(fixed)).map(|(t, f)| t - f).collect();
    diff.iter().map(|d| d * d).sum()
}
