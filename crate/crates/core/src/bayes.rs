//! Posterior sampling and predictive-uncertainty decomposition.
//!
//! Both MC-dropout and deep ensembles produce a set of `M` probability
//! vectors `p_m`. From it:
//!
//! ```text
//! p̄   = (1/M) Σ p_m
//! σ_a = (1/M) Σ [diag(p_m) − p_m p_mᵀ]        aleatoric
//! σ_e = (1/M) Σ (p_m − p̄)(p_m − p̄)ᵀ          epistemic
//! ```
//!
//! and the two always add up to the categorical covariance of the mean,
//! `σ_a + σ_e = diag(p̄) − p̄ p̄ᵀ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ActionType, Dataset, FeatureRecord};
use crate::error::{Error, Result};
use crate::model::{self, DropoutMask, HeadConfig, HeadParams};
use crate::numeric::{Matrix, RngStream, Vector};
use crate::train::{self, TrainConfig, TrainingLog};

/// Tolerance of the decomposition identity check.
pub const IDENTITY_TOLERANCE: f64 = 1e-9;

/// How far a sample may be from summing to one.
const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMethod {
    McDropout,
    Ensemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SampleProvenance {
    /// Mask stream and dropout rate.
    McDropout {
        seed: u64,
        stream_id: u64,
        rate: f64,
    },
    /// Member ids in sample order.
    Ensemble { seed: u64, member_ids: Vec<u64> },
}

/// `M ≥ 1` probability vectors of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSampleSet {
    samples: Vec<Vector>,
    method: SamplingMethod,
    provenance: SampleProvenance,
}

impl PosteriorSampleSet {
    pub fn new(
        samples: Vec<Vector>,
        method: SamplingMethod,
        provenance: SampleProvenance,
    ) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::invalid("a posterior sample set needs at least one sample"))?;
        let dim = first.dim();
        for (m, p) in samples.iter().enumerate() {
            if p.dim() != dim {
                return Err(Error::shape(format!(
                    "sample {m} has {} entries, expected {dim}",
                    p.dim()
                )));
            }
            if p.iter().any(|&v| v < 0.0) || (p.sum() - 1.0).abs() > SIMPLEX_TOLERANCE {
                return Err(Error::invalid(format!(
                    "sample {m} is not a probability vector"
                )));
            }
        }
        Ok(PosteriorSampleSet {
            samples,
            method,
            provenance,
        })
    }

    /// Convenience constructor for ad-hoc sample sets.
    pub fn from_vectors(samples: Vec<Vec<f64>>, method: SamplingMethod) -> Result<Self> {
        let samples = samples
            .into_iter()
            .map(Vector::new)
            .collect::<Result<_>>()?;
        let provenance = match method {
            SamplingMethod::McDropout => SampleProvenance::McDropout {
                seed: 0,
                stream_id: 0,
                rate: 0.0,
            },
            SamplingMethod::Ensemble => SampleProvenance::Ensemble {
                seed: 0,
                member_ids: Vec::new(),
            },
        };
        PosteriorSampleSet::new(samples, method, provenance)
    }

    pub fn samples(&self) -> &[Vector] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of categories `R`.
    pub fn dim(&self) -> usize {
        self.samples[0].dim()
    }

    pub fn method(&self) -> SamplingMethod {
        self.method
    }

    pub fn provenance(&self) -> &SampleProvenance {
        &self.provenance
    }
}

fn check_record(config: &HeadConfig, record: &FeatureRecord) -> Result<()> {
    if record.obj_feat.dim() != config.obj_feature_dim
        || record.glob_feat.dim() != config.global_feature_dim
    {
        return Err(Error::shape(format!(
            "record {} has {}/{} feature dims, model expects {}/{}",
            record.record_id,
            record.obj_feat.dim(),
            record.glob_feat.dim(),
            config.obj_feature_dim,
            config.global_feature_dim
        )));
    }
    Ok(())
}

/// `m` stochastic forward passes with a fresh mask each, drawn in order from
/// `rng` at `config.dropout_rate`.
pub fn mc_dropout_sample(
    params: &HeadParams,
    config: &HeadConfig,
    record: &FeatureRecord,
    m: usize,
    rng: &mut RngStream,
) -> Result<PosteriorSampleSet> {
    if m < 1 {
        return Err(Error::invalid("MC-dropout needs at least one pass"));
    }
    check_record(config, record)?;
    let provenance = SampleProvenance::McDropout {
        seed: rng.seed(),
        stream_id: rng.stream_id(),
        rate: config.dropout_rate,
    };
    let mut samples = Vec::with_capacity(m);
    for pass in 0..m {
        let mask = DropoutMask::sample(config, config.dropout_rate, rng, pass as u64)?;
        let trace = model::forward(
            params,
            record.object_class_id,
            &record.obj_feat,
            &record.glob_feat,
            Some(&mask),
        )?;
        samples.push(trace.p);
    }
    PosteriorSampleSet::new(samples, SamplingMethod::McDropout, provenance)
}

/// `M` independently initialised and shuffled heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub config: HeadConfig,
    pub members: Vec<HeadParams>,
    /// Base seed shared by all members.
    pub seed: u64,
    /// Stream index of each member.
    pub member_ids: Vec<u64>,
}

impl EnsembleModel {
    pub fn new(
        config: HeadConfig,
        members: Vec<HeadParams>,
        seed: u64,
        member_ids: Vec<u64>,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("an ensemble needs at least one member"));
        }
        if member_ids.len() != members.len() {
            return Err(Error::invalid("one member id per member required"));
        }
        for (i, m) in members.iter().enumerate() {
            m.check_shapes(&config).map_err(|e| Error::Member {
                member: i,
                source: Box::new(e),
            })?;
        }
        Ok(EnsembleModel {
            config,
            members,
            seed,
            member_ids,
        })
    }

    /// Ensemble of one: the deterministic model.
    pub fn single(config: HeadConfig, params: HeadParams, seed: u64) -> Result<Self> {
        EnsembleModel::new(config, vec![params], seed, vec![0])
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Trains `m` members in parallel; member `i` uses stream index `i`.
pub fn ensemble_train(
    dataset: &Dataset,
    action: ActionType,
    head: &HeadConfig,
    config: &TrainConfig,
    m: usize,
) -> Result<(EnsembleModel, Vec<TrainingLog>)> {
    if m < 1 {
        return Err(Error::invalid("an ensemble needs at least one member"));
    }
    let runs: Vec<(HeadParams, TrainingLog)> = (0..m)
        .into_par_iter()
        .map(|i| {
            train::train_member(dataset, action, head, config, i as u64).map_err(|e| {
                Error::Member {
                    member: i,
                    source: Box::new(e),
                }
            })
        })
        .collect::<Result<_>>()?;
    let (members, logs): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    let ensemble = EnsembleModel::new(head.clone(), members, config.seed, (0..m as u64).collect())?;
    Ok((ensemble, logs))
}

/// One mask-free pass per member, in member order.
pub fn ensemble_sample(
    ensemble: &EnsembleModel,
    record: &FeatureRecord,
) -> Result<PosteriorSampleSet> {
    check_record(&ensemble.config, record)?;
    let samples = ensemble
        .members
        .iter()
        .map(|params| {
            model::predict(
                params,
                record.object_class_id,
                &record.obj_feat,
                &record.glob_feat,
            )
        })
        .collect::<Result<_>>()?;
    PosteriorSampleSet::new(
        samples,
        SamplingMethod::Ensemble,
        SampleProvenance::Ensemble {
            seed: ensemble.seed,
            member_ids: ensemble.member_ids.clone(),
        },
    )
}

/// Mean of the samples and its argmax (lowest index wins ties).
pub fn predictive_mean(s: &PosteriorSampleSet) -> (Vector, usize) {
    let first = &s.samples()[0];
    // Summing then dividing need not return identical samples exactly.
    if s.samples().iter().all(|p| p == first) {
        return (first.clone(), first.argmax());
    }
    let r = s.dim();
    let mut mean = vec![0.0; r];
    for p in s.samples() {
        for (acc, v) in mean.iter_mut().zip(p.iter()) {
            *acc += v;
        }
    }
    let m = s.len() as f64;
    mean.iter_mut().for_each(|v| *v /= m);
    let mean = Vector::from_raw(mean);
    let class = mean.argmax();
    (mean, class)
}

/// `(1/M) Σ diag(p_m) − p_m p_mᵀ`
pub fn aleatoric_cov(s: &PosteriorSampleSet) -> Matrix {
    let r = s.dim();
    let mut sigma = Matrix::zeros(r, r);
    for p in s.samples() {
        sigma.add_outer_scaled(p, p, -1.0);
        for i in 0..r {
            sigma.set(i, i, sigma.get(i, i) + p[i]);
        }
    }
    sigma.scale(1.0 / s.len() as f64);
    sigma
}

/// `(1/M) Σ (p_m − p̄)(p_m − p̄)ᵀ`
pub fn epistemic_cov(s: &PosteriorSampleSet) -> Matrix {
    let (mean, _) = predictive_mean(s);
    let r = s.dim();
    let mut sigma = Matrix::zeros(r, r);
    let mut dev = vec![0.0; r];
    for p in s.samples() {
        for ((d, a), b) in dev.iter_mut().zip(p.iter()).zip(mean.iter()) {
            *d = a - b;
        }
        sigma.add_outer_scaled(&dev, &dev, 1.0);
    }
    sigma.scale(1.0 / s.len() as f64);
    sigma
}

/// `diag(p) − p pᵀ` for a single probability vector.
pub fn categorical_cov(p: &[f64]) -> Matrix {
    let mut sigma = Matrix::from_diagonal(p);
    sigma.add_outer_scaled(p, p, -1.0);
    sigma
}

/// Mean prediction with its aleatoric and epistemic covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub mean_p: Vector,
    pub predicted_class: usize,
    pub sigma_a: Matrix,
    pub sigma_e: Matrix,
    pub trace_a: f64,
    pub trace_e: f64,
    /// Diagonal of `sigma_a` at the predicted class.
    pub predicted_class_var_a: f64,
    /// Diagonal of `sigma_e` at the predicted class.
    pub predicted_class_var_e: f64,
    pub diag_a: Vec<f64>,
    pub diag_e: Vec<f64>,
    pub num_samples: usize,
}

/// Builds the report and checks `σ_a + σ_e = diag(p̄) − p̄p̄ᵀ`.
pub fn decompose(s: &PosteriorSampleSet) -> Result<UncertaintyReport> {
    let (mean_p, predicted_class) = predictive_mean(s);
    let sigma_a = aleatoric_cov(s);
    let sigma_e = epistemic_cov(s);

    let mut sum = sigma_a.clone();
    sum.add_assign(&sigma_e)?;
    let total = categorical_cov(&mean_p);
    let gap = sum.max_abs_diff(&total).unwrap_or(f64::INFINITY);
    if gap.is_nan() || gap > IDENTITY_TOLERANCE {
        return Err(Error::InternalConsistency(format!(
            "aleatoric + epistemic differs from total covariance by {gap:e}"
        )));
    }

    Ok(UncertaintyReport {
        trace_a: sigma_a.trace(),
        trace_e: sigma_e.trace(),
        predicted_class_var_a: sigma_a.get(predicted_class, predicted_class),
        predicted_class_var_e: sigma_e.get(predicted_class, predicted_class),
        diag_a: sigma_a.diagonal(),
        diag_e: sigma_e.diagonal(),
        num_samples: s.len(),
        mean_p,
        predicted_class,
        sigma_a,
        sigma_e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::StreamPurpose;
    use std::collections::BTreeMap;

    fn set(samples: &[&[f64]]) -> PosteriorSampleSet {
        PosteriorSampleSet::from_vectors(
            samples.iter().map(|s| s.to_vec()).collect(),
            SamplingMethod::Ensemble,
        )
        .unwrap()
    }

    fn assert_matrix(m: &Matrix, expected: &[f64]) {
        for (a, b) in m.values().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{:?} vs {expected:?}", m.values());
        }
    }

    #[test]
    fn sample_set_validation() {
        assert!(PosteriorSampleSet::from_vectors(vec![], SamplingMethod::Ensemble).is_err());
        assert!(
            PosteriorSampleSet::from_vectors(vec![vec![0.5, 0.6]], SamplingMethod::Ensemble)
                .is_err()
        );
        assert!(
            PosteriorSampleSet::from_vectors(vec![vec![1.2, -0.2]], SamplingMethod::Ensemble)
                .is_err()
        );
        assert!(PosteriorSampleSet::from_vectors(
            vec![vec![1.0, 0.0], vec![1.0]],
            SamplingMethod::Ensemble
        )
        .is_err());
    }

    #[test]
    fn predictive_mean_examples() {
        let (mean, y) = predictive_mean(&set(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert_eq!(mean.as_slice(), &[0.5, 0.5]);
        assert_eq!(y, 0);
        let (mean, _) = predictive_mean(&set(&[&[0.3, 0.7]]));
        assert_eq!(mean.as_slice(), &[0.3, 0.7]);
        let (mean, y) = predictive_mean(&set(&[&[0.6, 0.4], &[0.2, 0.8]]));
        assert!((mean[0] - 0.4).abs() < 1e-15 && (mean[1] - 0.6).abs() < 1e-15);
        assert_eq!(y, 1);
    }

    #[test]
    fn aleatoric_examples() {
        assert_matrix(&aleatoric_cov(&set(&[&[1.0, 0.0]])), &[0.0; 4]);
        assert_matrix(
            &aleatoric_cov(&set(&[&[0.5, 0.5]])),
            &[0.25, -0.25, -0.25, 0.25],
        );
        assert_matrix(&aleatoric_cov(&set(&[&[1.0, 0.0], &[0.0, 1.0]])), &[0.0; 4]);
    }

    #[test]
    fn epistemic_examples() {
        assert_matrix(
            &epistemic_cov(&set(&[&[0.2, 0.8], &[0.2, 0.8], &[0.2, 0.8]])),
            &[0.0; 4],
        );
        assert_matrix(
            &epistemic_cov(&set(&[&[1.0, 0.0], &[0.0, 1.0]])),
            &[0.25, -0.25, -0.25, 0.25],
        );
        assert_matrix(&epistemic_cov(&set(&[&[0.1, 0.3, 0.6]])), &[0.0; 9]);
    }

    #[test]
    fn decompose_two_one_hots() {
        let r = decompose(&set(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_matrix(&r.sigma_a, &[0.0; 4]);
        assert_matrix(&r.sigma_e, &[0.25, -0.25, -0.25, 0.25]);
        let total = categorical_cov(&[0.5, 0.5]);
        assert_matrix(&total, &[0.25, -0.25, -0.25, 0.25]);
        assert_eq!(r.predicted_class, 0);
        assert_eq!(r.trace_e, 0.5);
        assert_eq!(r.predicted_class_var_e, 0.25);
    }

    fn trained_head() -> (HeadParams, HeadConfig, FeatureRecord) {
        let config = HeadConfig {
            num_object_classes: 2,
            obj_feature_dim: 3,
            global_feature_dim: 3,
            hidden_dim: 8,
            fc_hidden_dim: 6,
            num_categories: 4,
            dropout_rate: 0.3,
        };
        let params =
            model::init_params(&config, &mut RngStream::derived(1, StreamPurpose::Init, 0))
                .unwrap();
        let record = FeatureRecord {
            record_id: "x".into(),
            object_class_id: 1,
            object_class_name: "object_1".into(),
            obj_feat: Vector::new(vec![0.5, -1.0, 2.0]).unwrap(),
            glob_feat: Vector::new(vec![1.0, 0.3, -0.4]).unwrap(),
            labels: BTreeMap::new(),
        };
        (params, config, record)
    }

    #[test]
    fn rate_zero_dropout_is_deterministic() {
        let (params, mut config, record) = trained_head();
        config.dropout_rate = 0.0;
        let s =
            mc_dropout_sample(&params, &config, &record, 10, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.samples().iter().all(|p| p == &s.samples()[0]));
        let r = decompose(&s).unwrap();
        assert_eq!(r.trace_e, 0.0);
    }

    #[test]
    fn mc_dropout_is_reproducible_and_stochastic() {
        let (params, config, record) = trained_head();
        let a =
            mc_dropout_sample(&params, &config, &record, 20, &mut RngStream::new(3, 7)).unwrap();
        let b =
            mc_dropout_sample(&params, &config, &record, 20, &mut RngStream::new(3, 7)).unwrap();
        assert_eq!(a, b);
        let r = decompose(&a).unwrap();
        assert!(r.trace_e > 1e-12);
        assert!(
            mc_dropout_sample(&params, &config, &record, 0, &mut RngStream::new(3, 7)).is_err()
        );
    }

    #[test]
    fn ensemble_sample_matches_member_forward() {
        let (params, config, record) = trained_head();
        let other = model::init_params(&config, &mut RngStream::derived(1, StreamPurpose::Init, 1))
            .unwrap();
        let ens = EnsembleModel::new(
            config.clone(),
            vec![params.clone(), other.clone(), params.clone()],
            1,
            vec![0, 1, 2],
        )
        .unwrap();
        let s = ensemble_sample(&ens, &record).unwrap();
        assert_eq!(s.len(), 3);
        for (sample, member) in s.samples().iter().zip(&ens.members) {
            let p = model::predict(
                member,
                record.object_class_id,
                &record.obj_feat,
                &record.glob_feat,
            )
            .unwrap();
            assert_eq!(sample, &p);
        }
        assert_eq!(s.samples()[0], s.samples()[2]);

        let same = EnsembleModel::new(config.clone(), vec![params.clone(); 4], 1, vec![0, 1, 2, 3])
            .unwrap();
        let s = ensemble_sample(&same, &record).unwrap();
        assert!(s.samples().iter().all(|p| p == &s.samples()[0]));

        let single = EnsembleModel::single(config, params.clone(), 1).unwrap();
        let (mean, _) = predictive_mean(&ensemble_sample(&single, &record).unwrap());
        let direct = model::predict(
            &params,
            record.object_class_id,
            &record.obj_feat,
            &record.glob_feat,
        )
        .unwrap();
        assert_eq!(mean, direct);
    }

    #[test]
    fn ensemble_rejects_bad_members() {
        let (params, config, _) = trained_head();
        assert!(EnsembleModel::new(config.clone(), vec![], 0, vec![]).is_err());
        let other_cfg = HeadConfig {
            hidden_dim: 5,
            ..config.clone()
        };
        let odd = HeadParams::zeros(&other_cfg);
        assert!(matches!(
            EnsembleModel::new(config, vec![params, odd], 0, vec![0, 1]),
            Err(Error::Member { member: 1, .. })
        ));
    }

    #[test]
    fn report_serializes_full_matrices() {
        let r = decompose(&set(&[&[0.7, 0.2, 0.1], &[0.5, 0.3, 0.2]])).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["sigma_a"]["values"].as_array().unwrap().len(), 9);
        assert_eq!(json["sigma_e"]["rows"], 3);
        assert_eq!(json["predicted_class"], 0);
        let back: UncertaintyReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, r);
    }
}
