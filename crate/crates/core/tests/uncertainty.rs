mod common;

use affordance_bayes::bayes::{self, PosteriorSampleSet, SamplingMethod};
use affordance_bayes::data::FeatureRecord;
use affordance_bayes::model::{self, HeadConfig};
use affordance_bayes::numeric::{Matrix, RngStream, Vector};
use affordance_bayes::train::{self, TrainConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn fast_config(epochs: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(epochs, seed);
    cfg.lr0 = 1e-2;
    cfg.batch_size = 16;
    cfg
}

fn min_eigenvalue(m: &Matrix) -> f64 {
    let n = m.rows();
    let d = DMatrix::from_row_slice(n, n, m.values());
    d.symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn sample_set() -> impl Strategy<Value = (usize, Vec<Vec<f64>>)> {
    (
        prop_oneof![Just(2usize), Just(3), Just(7)],
        1usize..60,
        any::<u64>(),
    )
        .prop_map(|(r, m, seed)| {
            let mut rng = RngStream::new(seed, 0);
            (
                r,
                (0..m)
                    .map(|_| common::random_probability(&mut rng, r))
                    .collect(),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn decomposition_matches_brute_force((r, samples) in sample_set()) {
        let set = PosteriorSampleSet::from_vectors(samples.clone(), SamplingMethod::McDropout).unwrap();
        let report = bayes::decompose(&set).unwrap();
        let oracle = common::brute_force(&samples);
        for i in 0..r {
            prop_assert!((report.mean_p[i] - oracle.mean[i]).abs() <= 1e-12);
            for j in 0..r {
                prop_assert!((report.sigma_a.get(i, j) - oracle.aleatoric[i][j]).abs() <= 1e-12);
                prop_assert!((report.sigma_e.get(i, j) - oracle.epistemic[i][j]).abs() <= 1e-12);
                let sum = report.sigma_a.get(i, j) + report.sigma_e.get(i, j);
                prop_assert!((sum - oracle.total[i][j]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn covariances_are_psd_with_zero_row_sums((r, samples) in sample_set()) {
        let set = PosteriorSampleSet::from_vectors(samples, SamplingMethod::Ensemble).unwrap();
        for m in [bayes::aleatoric_cov(&set), bayes::epistemic_cov(&set)] {
            for i in 0..r {
                let row: f64 = m.row(i).iter().sum();
                prop_assert!(row.abs() <= 1e-9);
                for j in 0..r {
                    prop_assert!((m.get(i, j) - m.get(j, i)).abs() <= 1e-15);
                }
            }
            prop_assert!(min_eigenvalue(&m) >= -1e-10);
        }
    }

    #[test]
    fn categorical_covariance_rows_sum_to_zero(r in 2usize..8, seed in any::<u64>()) {
        let p = common::random_probability(&mut RngStream::new(seed, 1), r);
        let c = bayes::categorical_cov(&p);
        for i in 0..r {
            prop_assert!(c.row(i).iter().sum::<f64>().abs() <= 1e-12);
        }
    }
}

fn trained_mc_head() -> (
    model::HeadParams,
    HeadConfig,
    affordance_bayes::data::Dataset,
) {
    let d = common::blobs(3, 4, 4, 150, 0.0, 1, 0);
    let head = common::head_for(&d, model::DEFAULT_HIDDEN_DIM, model::DEFAULT_FC_HIDDEN_DIM);
    let (params, _) = train::train(&d, common::ACTION, &head, &fast_config(15, 1)).unwrap();
    (params, head, d)
}

#[test]
fn independent_mc_draws_agree() {
    let (params, head, d) = trained_mc_head();
    for record in d.records().iter().take(10) {
        let a = bayes::mc_dropout_sample(&params, &head, record, 50, &mut RngStream::new(100, 0))
            .unwrap();
        let b = bayes::mc_dropout_sample(&params, &head, record, 50, &mut RngStream::new(200, 0))
            .unwrap();
        let (ma, _) = bayes::predictive_mean(&a);
        let (mb, _) = bayes::predictive_mean(&b);
        let gap = ma
            .iter()
            .zip(mb.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(gap <= 0.05, "{}: gap {gap}", record.record_id);
    }
}

/// A point halfway between the centers of classes `a` and `b`.
fn midpoint(a: usize, b: usize) -> FeatureRecord {
    let mut x = [0.0; 8];
    x[a] += 2.0;
    x[b] += 2.0;
    FeatureRecord {
        record_id: format!("mid-{a}{b}"),
        object_class_id: 0,
        object_class_name: "object_0".into(),
        obj_feat: Vector::new(x[..4].to_vec()).unwrap(),
        glob_feat: Vector::new(x[4..].to_vec()).unwrap(),
        labels: Default::default(),
    }
}

#[test]
fn epistemic_trace_is_zero_without_dropout_and_positive_with_it() {
    let (params, head, d) = trained_mc_head();
    let off = HeadConfig {
        dropout_rate: 0.0,
        ..head.clone()
    };
    let boundary = [midpoint(0, 1), midpoint(0, 2), midpoint(1, 2)];
    for record in d.records().iter().take(10).chain(&boundary) {
        let s0 =
            bayes::mc_dropout_sample(&params, &off, record, 20, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(bayes::decompose(&s0).unwrap().trace_e, 0.0);
        let s3 = bayes::mc_dropout_sample(&params, &head, record, 20, &mut RngStream::new(3, 0))
            .unwrap();
        assert!(
            bayes::decompose(&s3).unwrap().trace_e > 0.0,
            "{}",
            record.record_id
        );
    }
    for record in &boundary {
        let s = bayes::mc_dropout_sample(&params, &head, record, 20, &mut RngStream::new(4, 0))
            .unwrap();
        let trace_e = bayes::decompose(&s).unwrap().trace_e;
        assert!(trace_e > 1e-12, "{}: {trace_e}", record.record_id);
    }
}

#[test]
fn every_ensemble_member_fits_the_data() {
    let d = common::blobs(3, 4, 4, 150, 0.0, 2, 0);
    let head = common::head_for(&d, 32, 16);
    let (ensemble, logs) =
        bayes::ensemble_train(&d, common::ACTION, &head, &fast_config(15, 2), 5).unwrap();
    assert_eq!(ensemble.len(), 5);
    for log in &logs {
        let acc = log.epochs.last().unwrap().train_accuracy;
        assert!(acc >= 0.9, "member {} accuracy {acc}", log.member);
    }
    assert_ne!(ensemble.members[0], ensemble.members[1]);
}

#[test]
fn label_noise_caps_test_accuracy() {
    let train_set = common::blobs(2, 4, 4, 400, 0.2, 4, 0);
    let test_set = common::blobs(2, 4, 4, 400, 0.2, 4, 1);
    let head = common::head_for(&train_set, 32, 16);
    let (params, _) = train::train(&train_set, common::ACTION, &head, &fast_config(20, 4)).unwrap();
    let labeled = test_set.labeled(common::ACTION);
    let correct = labeled
        .iter()
        .filter(|(r, l)| {
            let p = model::predict(&params, r.object_class_id, &r.obj_feat, &r.glob_feat).unwrap();
            p.argmax() == *l
        })
        .count();
    let acc = correct as f64 / labeled.len() as f64;
    assert!(acc <= 0.93, "test accuracy {acc} exceeds the noise ceiling");
    assert!(acc >= 0.8, "test accuracy {acc}");
}
