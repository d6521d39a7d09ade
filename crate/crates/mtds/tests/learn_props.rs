//! Properties of the training machinery: weight normalization invariants,
//! estimator determinism, and the reparameterized ELBO gradient against
//! finite differences with frozen noise.

mod common;

use common::*;
use mtds::dho::{make_dataset, SequenceSet};
use mtds::learn::{
    construct_weights, elbo_batch_gradient, mco_epoch, ElboConfig, ElboTrainer, McoConfig,
    McoTrainer, VariationalParams,
};
use mtds::model::{BaseModel, HyperNetParams, ModelDims};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weight_columns_sum_to_one_and_shift_invariant(
        vals in proptest::collection::vec(-30.0_f64..30.0, 12),
        shift in -100.0_f64..100.0,
    ) {
        let ll = Array2::from_shape_vec((4, 3), vals.clone()).unwrap();
        let w = construct_weights(ll.view()).unwrap();
        for c in 0..3 {
            let sum: f64 = w.column(c).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
        // adding a constant to one column leaves its weights unchanged
        let mut shifted = ll.clone();
        for v in shifted.column_mut(1).iter_mut() {
            *v += shift;
        }
        let w2 = construct_weights(shifted.view()).unwrap();
        for m in 0..4 {
            prop_assert!((w[[m, 1]] - w2[[m, 1]]).abs() < 1e-12);
        }
    }
}

#[test]
fn mco_epoch_is_deterministic_under_seed() {
    let dims = ModelDims { n: 3, m: 1, p: 1, k: 2, h: 8 };
    let (train, _) = make_dataset(3, 0, 5);
    let mut rng = seeded(1);
    let phi = HyperNetParams::init(dims, BaseModel::Lds, &mut rng);
    let run = |seed: u64| {
        let mut rng = seeded(seed);
        let (grad, obj) =
            mco_epoch(&phi, dims, BaseModel::Lds, &train, 64, 3, 1, &mut rng).unwrap();
        (grad.to_flat(), obj)
    };
    let (g1, o1) = run(9);
    let (g2, o2) = run(9);
    assert_eq!(g1, g2);
    assert_eq!(o1, o2);
}

#[test]
fn trainer_improves_the_objective_on_a_small_problem() {
    let dims = ModelDims { n: 4, m: 1, p: 1, k: 2, h: 24 };
    let (train, _) = make_dataset(4, 0, 11);
    let mut rng = seeded(2);
    let phi = HyperNetParams::init(dims, BaseModel::Lds, &mut rng);
    let config = McoConfig {
        epochs: 60,
        batch_size: None,
        m_rsmp: 5,
        log_s_prior_sd: 0.05,
        schedule: vec![mtds::learn::ScheduleRow {
            epoch: 1,
            lr: 2e-3,
            beta1: 0.9,
            log_s_mean: -1.0,
            m_particles: 200,
        }],
    };
    let mut trainer = McoTrainer::new(phi, dims, BaseModel::Lds, config, 3).unwrap();
    let stats = trainer.train(&train).unwrap();
    let first = stats[..5].iter().map(|s| s.objective).sum::<f64>() / 5.0;
    let last = stats[stats.len() - 5..].iter().map(|s| s.objective).sum::<f64>() / 5.0;
    assert!(
        last > first + 1.0,
        "objective did not improve: {first} -> {last}"
    );
}

#[test]
fn elbo_gradient_matches_finite_differences_with_frozen_noise() {
    let dims = ModelDims { n: 3, m: 1, p: 1, k: 2, h: 6 };
    let (train, _) = make_dataset(2, 0, 21);
    let train = SequenceSet {
        sequences: train.sequences.slice(ndarray::s![.., ..12]).to_owned(),
        tasks: None,
        inputs: SequenceSet::impulse_inputs(12),
    };
    let mut rng = seeded(3);
    let phi = HyperNetParams::init(dims, BaseModel::Lds, &mut rng);
    let mut vparams = VariationalParams::init(2, dims.k, 0.3);
    for v in vparams.mu.iter_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
    for v in vparams.log_sd.iter_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    let eps = Array2::from_shape_fn((2, dims.k), |_| rng.random_range(-1.0..1.0));
    let tasks = [0usize, 1];

    let grad = elbo_batch_gradient(
        &phi,
        &vparams,
        dims,
        BaseModel::Lds,
        &train,
        &tasks,
        eps.view(),
        true,
    )
    .unwrap();

    // FD over the variational means and log-sds through the same noise
    let mut flat: Vec<f64> = vparams.mu.iter().chain(vparams.log_sd.iter()).copied().collect();
    let n_mu = vparams.mu.len();
    let mut f = |x: &[f64]| {
        let mut vp = vparams.clone();
        for (i, v) in vp.mu.iter_mut().enumerate() {
            *v = x[i];
        }
        for (i, v) in vp.log_sd.iter_mut().enumerate() {
            *v = x[n_mu + i];
        }
        elbo_batch_gradient(
            &phi,
            &vp,
            dims,
            BaseModel::Lds,
            &train,
            &tasks,
            eps.view(),
            true,
        )
        .unwrap()
        .elbo
    };
    let fd = central_diff(&mut f, &flat, FD_STEP);
    let analytic: Vec<f64> = grad.mu.iter().chain(grad.log_sd.iter()).copied().collect();
    let err = max_rel_err(&analytic, &fd);
    assert!(err < 1e-5, "variational gradient rel err {err}");
    flat.clear();

    // FD over phi through the same noise
    let template = phi.clone();
    let mut f_phi = |x: &[f64]| {
        let p = template.from_flat(x).unwrap();
        elbo_batch_gradient(
            &p,
            &vparams,
            dims,
            BaseModel::Lds,
            &train,
            &tasks,
            eps.view(),
            true,
        )
        .unwrap()
        .elbo
    };
    let fd_phi = central_diff(&mut f_phi, &phi.to_flat(), FD_STEP);
    let err_phi = max_rel_err(&grad.phi.to_flat(), &fd_phi);
    assert!(err_phi < 1e-5, "phi gradient rel err {err_phi}");
}

#[test]
fn tiny_posterior_sd_reduces_to_map_objective() {
    // with sd -> 0 the reparameterized sample is the mean, so the ELBO
    // equals loglik(mu) minus the KL mean term (plus the sd-only constant)
    let dims = ModelDims { n: 2, m: 1, p: 1, k: 2, h: 4 };
    let (train, _) = make_dataset(1, 0, 31);
    let mut rng = seeded(4);
    let phi = HyperNetParams::init(dims, BaseModel::Lds, &mut rng);
    let sd = 1e-9;
    let mut vparams = VariationalParams::init(1, dims.k, sd);
    vparams.mu[[0, 0]] = 0.4;
    vparams.mu[[0, 1]] = -0.7;
    let eps = Array2::from_elem((1, dims.k), 0.93);
    let grad = elbo_batch_gradient(
        &phi,
        &vparams,
        dims,
        BaseModel::Lds,
        &train,
        &[0],
        eps.view(),
        true,
    )
    .unwrap();
    let y = train
        .sequences
        .row(0)
        .to_owned()
        .into_shape_with_order((80, 1))
        .unwrap();
    let direct = mtds::model::loss_backward(
        &phi,
        dims,
        BaseModel::Lds,
        &mtds::model::LatentCode(vparams.mu.row(0).to_owned()),
        train.inputs.view(),
        y.view(),
    )
    .unwrap()
    .loglik;
    let kl = mtds::learn::kl_diag_gaussian(
        vparams.mu.row(0),
        Array1::from_elem(dims.k, sd).view(),
    )
    .unwrap();
    assert!((grad.elbo - (direct - kl)).abs() < 1e-6);
}

#[test]
fn elbo_is_nondecreasing_after_warmup_in_most_runs() {
    // the N = 4 benchmark problem; mean per-epoch ELBO may dip by less
    // than 1 nat between consecutive epochs in at least 8 of 10 seeds.
    // The first few epochs after the KL term switches on re-equilibrate the
    // pinned posterior sd, so the check starts 5 epochs past warm-up.
    let dims = ModelDims::dho();
    let (train, _) = make_dataset(4, 0, 77);
    let mut good = 0;
    for seed in 0..10u64 {
        let mut rng = seeded(100 + seed);
        let phi = HyperNetParams::init(dims, BaseModel::Lds, &mut rng);
        let config = ElboConfig {
            epochs: 60,
            kl_free_epochs: 15,
            ..ElboConfig::default()
        };
        let mut trainer = ElboTrainer::new(phi, dims, BaseModel::Lds, 4, config, seed).unwrap();
        let stats = trainer.train(&train).unwrap();
        let post: Vec<f64> = stats
            .iter()
            .filter(|s| s.epoch > 20)
            .map(|s| s.objective)
            .collect();
        let ok = post.windows(2).all(|w| w[1] >= w[0] - 1.0);
        if ok {
            good += 1;
        }
    }
    assert!(good >= 8, "only {good}/10 runs were non-decreasing");
}
