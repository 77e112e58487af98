//! Losses against exhaustive pair-enumeration oracles.

mod common;

use common::oracles::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use selfguide::losses::{self, LossVariant};
use selfguide::numerics::Tensor;
use selfguide::selfguide::{HeadWeights, ProjectionHead};

#[test]
fn base_opt1_opt3_and_factors_match_enumeration_on_two_sentence_batches() {
    for (c, views) in hand_batches() {
        for tau in [1.0, 0.1, 0.05] {
            for head in [None, Some(mlp(3, 4))] {
                let params = head.as_ref().and_then(ProjectionHead::params);
                let weights = head.as_ref().map_or(HeadWeights::Identity, |h| h.weights(false));
                let oracle = Oracle { head: params, tau };
                for layer in 0..2 {
                    let h: Vec<Vector> = views.iter().map(|v| v[layer].clone()).collect();
                    let got = contrastive(LossVariant::Base, &c, &h, &weights, tau);
                    assert!((got - oracle.base(&c, &h)).abs() <= 1e-12, "base tau={tau}");
                    let got = contrastive(LossVariant::Opt1, &c, &h, &weights, tau);
                    assert!((got - oracle.opt1(&c, &h)).abs() <= 1e-12, "opt1 tau={tau}");
                }
                let view_tensors: Vec<Vec<Tensor>> = views.iter().map(|v| row_tensors(v)).collect();
                let got = losses::loss_opt3(&matrix(&c), &view_tensors, &weights, &config(LossVariant::Opt3, tau), &Tensor::scalar(0.0))
                    .unwrap()
                    .report;
                assert!((got.contrastive - oracle.opt3(&c, &views)).abs() <= 1e-12, "opt3 tau={tau}");

                let factors = losses::factor_report(&matrix(&c), &view_tensors, &weights, tau).unwrap();
                let expected = oracle.factors(&c, &views);
                for k in 0..4 {
                    assert!((factors[k] - expected[k]).abs() <= 1e-12, "factor {k} tau={tau}");
                }
                assert_eq!(got.factors.unwrap(), factors);
            }
        }
    }
}

#[test]
fn opt2_equals_softmax_cross_entropy_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..100 {
        let b = rng.gen_range(1..7);
        let d = rng.gen_range(2..6);
        let tau = [1.0, 0.1, 0.01][trial % 3];
        let c = random_rows(&mut rng, b, d);
        let h = random_rows(&mut rng, b, d);
        let head = (trial % 2 == 0).then(|| mlp(d, trial as u64));
        let oracle = Oracle {
            head: head.as_ref().and_then(ProjectionHead::params),
            tau,
        };
        let weights = head.as_ref().map_or(HeadWeights::Identity, |h| h.weights(false));
        let got = contrastive(LossVariant::Opt2, &c, &h, &weights, tau);
        assert!((got - oracle.cross_entropy(&c, &h)).abs() <= 1e-9, "trial {trial}");
    }
}

#[test]
fn opt3_with_one_eligible_layer_is_opt2() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for trial in 0..50 {
        let b = rng.gen_range(1..6);
        let d = rng.gen_range(2..6);
        let c = random_rows(&mut rng, b, d);
        let h = random_rows(&mut rng, b, d);
        let head = mlp(d, trial);
        let weights = head.weights(false);
        let views: Vec<Vec<Tensor>> = h.iter().map(|r| vec![Tensor::row(r.clone())]).collect();
        let opt3 = losses::loss_opt3(&matrix(&c), &views, &weights, &config(LossVariant::Opt3, 0.05), &Tensor::scalar(0.0))
            .unwrap()
            .report
            .contrastive;
        let opt2 = contrastive(LossVariant::Opt2, &c, &h, &weights, 0.05);
        assert!((opt3 - opt2).abs() <= 1e-12, "trial {trial}: {opt3} vs {opt2}");
    }
}

#[test]
fn single_sentence_batches_have_zero_contrastive_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for _ in 0..20 {
        let c = random_rows(&mut rng, 1, 4);
        let h = random_rows(&mut rng, 1, 4);
        let head = mlp(4, 1);
        let weights = head.weights(false);
        for v in [LossVariant::Base, LossVariant::Opt1, LossVariant::Opt2] {
            assert!(contrastive(v, &c, &h, &weights, 0.01).abs() <= 1e-9, "{v}");
        }
        let views = vec![row_tensors(&random_rows(&mut rng, 3, 4))];
        let opt3 = losses::loss_opt3(&matrix(&c), &views, &weights, &config(LossVariant::Opt3, 0.01), &Tensor::scalar(0.0)).unwrap();
        assert!(opt3.report.contrastive.abs() <= 1e-9);
    }
}

#[test]
fn contrastive_parts_are_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..1000 {
        let b = rng.gen_range(1..6);
        let d = rng.gen_range(2..5);
        let per = rng.gen_range(1..4);
        let tau = [1.0, 0.1, 0.01][trial % 3];
        let c = random_rows(&mut rng, b, d);
        let views: Vec<Vec<Vector>> = (0..b).map(|_| random_rows(&mut rng, per, d)).collect();
        let h: Vec<Vector> = views.iter().map(|v| v[0].clone()).collect();
        let head = (trial % 4 == 0).then(|| mlp(d, trial as u64));
        let weights = head.as_ref().map_or(HeadWeights::Identity, |h| h.weights(false));
        let view_tensors: Vec<Vec<Tensor>> = views.iter().map(|v| row_tensors(v)).collect();
        for v in LossVariant::ALL {
            let out = losses::contrastive_loss(&matrix(&c), &matrix(&h), &view_tensors, &weights, &config(v, tau), &Tensor::scalar(0.0))
                .unwrap();
            assert!(out.report.contrastive >= 0.0, "{v} trial {trial}: {}", out.report.contrastive);
        }
    }
}
