#![allow(dead_code)]

use affordance_bayes::data::{self, ActionType, Dataset, SynthSpec};
use affordance_bayes::model::{self, DropoutMask, ForwardTrace, HeadConfig, HeadParams};
use affordance_bayes::numeric::{RngStream, StreamPurpose};

/// A head with every dimension in `1..=8` plus one input and label.
pub struct Instance {
    pub config: HeadConfig,
    pub params: HeadParams,
    pub class_id: usize,
    pub obj: Vec<f64>,
    pub glob: Vec<f64>,
    pub label: usize,
}

fn dim(rng: &mut RngStream) -> usize {
    1 + rng.index(8)
}

fn random_instance(rng: &mut RngStream) -> Instance {
    let config = HeadConfig {
        num_object_classes: dim(rng).min(4),
        obj_feature_dim: dim(rng),
        global_feature_dim: dim(rng),
        hidden_dim: dim(rng),
        fc_hidden_dim: dim(rng),
        num_categories: 2 + rng.index(6),
        dropout_rate: 0.3,
    };
    let mut params = model::init_params(&config, rng).unwrap();
    for layer in params.layers_mut() {
        for b in layer.bias.iter_mut() {
            *b = rng.uniform_range(-0.5, 0.5);
        }
    }
    let class_id = rng.index(config.num_object_classes);
    let obj = (0..config.obj_feature_dim)
        .map(|_| rng.uniform_range(-1.0, 1.0))
        .collect();
    let glob = (0..config.global_feature_dim)
        .map(|_| rng.uniform_range(-1.0, 1.0))
        .collect();
    let label = rng.index(config.num_categories);
    Instance {
        config,
        params,
        class_id,
        obj,
        glob,
        label,
    }
}

/// Smallest |pre-activation| over every ReLU in the trace.
pub fn min_abs_pre_activation(trace: &ForwardTrace) -> f64 {
    [
        &trace.class_pre,
        &trace.object_pre,
        &trace.fusion_pre,
        &trace.fc1_pre,
    ]
    .into_iter()
    .flatten()
    .fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

/// Draws instances until one has every ReLU at least `margin` from its kink
/// and at least one unit active in each layer.
pub fn active_instance(rng: &mut RngStream, margin: f64) -> Instance {
    loop {
        let inst = random_instance(rng);
        let trace =
            model::forward(&inst.params, inst.class_id, &inst.obj, &inst.glob, None).unwrap();
        let any_active = |pre: &[f64]| pre.iter().any(|&v| v > 0.0);
        if min_abs_pre_activation(&trace) > margin
            && any_active(&trace.h_obj)
            && any_active(&trace.fusion_pre)
            && any_active(&trace.fc1_pre)
        {
            return inst;
        }
    }
}

pub fn loss(inst: &Instance, params: &HeadParams, mask: Option<&DropoutMask>) -> f64 {
    let trace = model::forward(params, inst.class_id, &inst.obj, &inst.glob, mask).unwrap();
    model::loss_cross_entropy(&trace.p, inst.label).unwrap()
}

/// Largest relative error between the analytic gradient and central
/// differences with step `h`, over every parameter.
pub fn gradient_check(inst: &Instance, mask: Option<&DropoutMask>, h: f64) -> f64 {
    let trace = model::forward(&inst.params, inst.class_id, &inst.obj, &inst.glob, mask).unwrap();
    let grads = model::backward(&trace, &inst.params, inst.label, mask).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut worst: f64 = 0.0;
    let mut probe = inst.params.clone();
    for (t, tensor) in analytic.iter().enumerate() {
        for (i, &a) in tensor.iter().enumerate() {
            let original = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = original + h;
            let up = loss(inst, &probe, mask);
            probe.tensors_mut()[t][i] = original - h;
            let down = loss(inst, &probe, mask);
            probe.tensors_mut()[t][i] = original;
            let numeric = (up - down) / (2.0 * h);
            let scale = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    worst
}

/// Random points on the simplex: a mix of soft, peaked and one-hot vectors.
pub fn random_probability(rng: &mut RngStream, r: usize) -> Vec<f64> {
    match rng.index(4) {
        0 => {
            let mut p = vec![0.0; r];
            p[rng.index(r)] = 1.0;
            p
        }
        kind => {
            let spread = [0.0, 0.5, 3.0, 30.0][kind];
            let z: Vec<f64> = (0..r).map(|_| spread * rng.standard_normal()).collect();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        }
    }
}

/// Covariances computed term by term, straight from their definitions.
pub struct Oracle {
    pub mean: Vec<f64>,
    pub aleatoric: Vec<Vec<f64>>,
    pub epistemic: Vec<Vec<f64>>,
    pub total: Vec<Vec<f64>>,
}

pub fn brute_force(samples: &[Vec<f64>]) -> Oracle {
    let m = samples.len();
    let r = samples[0].len();
    let mut mean = vec![0.0; r];
    for s in samples {
        for k in 0..r {
            mean[k] += s[k] / m as f64;
        }
    }
    let mut aleatoric = vec![vec![0.0; r]; r];
    let mut epistemic = vec![vec![0.0; r]; r];
    for s in samples {
        for i in 0..r {
            for j in 0..r {
                let diag = if i == j { s[i] } else { 0.0 };
                aleatoric[i][j] += (diag - s[i] * s[j]) / m as f64;
                epistemic[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]) / m as f64;
            }
        }
    }
    let total = (0..r)
        .map(|i| {
            (0..r)
                .map(|j| if i == j { mean[i] } else { 0.0 } - mean[i] * mean[j])
                .collect()
        })
        .collect();
    Oracle {
        mean,
        aleatoric,
        epistemic,
        total,
    }
}

/// Labelled blobs in `obj_dim + glob_dim` dimensions.
pub fn blobs(
    classes: usize,
    obj_dim: usize,
    glob_dim: usize,
    count: usize,
    noise: f64,
    seed: u64,
    index: u64,
) -> Dataset {
    let mut spec = SynthSpec::blobs(classes, obj_dim, glob_dim, 4.0, 1.0, count);
    spec.label_noise_rate = noise;
    let mut rng = RngStream::derived(seed, StreamPurpose::Synth, index);
    data::synth_blobs(&spec, &mut rng).unwrap().dataset
}

pub fn head_for(d: &Dataset, hidden: usize, fc_hidden: usize) -> HeadConfig {
    let h = d.header();
    HeadConfig {
        num_object_classes: h.num_object_classes,
        obj_feature_dim: h.obj_feature_dim,
        global_feature_dim: h.global_feature_dim,
        hidden_dim: hidden,
        fc_hidden_dim: fc_hidden,
        num_categories: model::NUM_CATEGORIES,
        dropout_rate: 0.3,
    }
}

pub const ACTION: ActionType = ActionType::Sit;

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}
