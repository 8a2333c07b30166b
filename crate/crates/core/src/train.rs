//! Adam minibatch training with a step-decay learning rate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ActionType, Dataset};
use crate::error::{Error, Result};
use crate::model::{self, DropoutMask, Gradients, HeadConfig, HeadParams};
use crate::numeric::{RngStream, StreamPurpose};

/// Samples per gradient work unit. Fixed so the floating-point summation
/// order does not depend on the thread pool.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_every_epochs: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub dropout_rate: f64,
}

impl TrainConfig {
    /// Batch 128, lr 1e-4 decayed by 0.85 every 5 epochs, standard Adam
    /// moments, dropout 0.3.
    pub fn new(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            batch_size: 128,
            lr0: 1e-4,
            decay_every_epochs: 5,
            decay_factor: 0.85,
            epochs,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed,
            dropout_rate: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if self.decay_every_epochs == 0 {
            return Err(Error::invalid("decay_every_epochs must be at least 1"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::invalid(format!(
                "decay_factor must be in (0, 1], got {}",
                self.decay_factor
            )));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(format!("{name} must be in (0, 1), got {b}")));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::invalid("adam_eps must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// `lr0 · decay_factor^⌊epoch / decay_every⌋`
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    let steps = (epoch / config.decay_every_epochs.max(1)) as i32;
    config.lr0 * config.decay_factor.powi(steps)
}

/// Adam moment estimates shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: HeadParams,
    pub second_moment: HeadParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &HeadParams) -> Self {
        AdamState {
            first_moment: HeadParams::zeros_like(params),
            second_moment: HeadParams::zeros_like(params),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut HeadParams,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if !params.same_shape(grads)
        || !params.same_shape(&state.first_moment)
        || !params.same_shape(&state.second_moment)
    {
        return Err(Error::shape(
            "parameters, gradients and Adam state differ in shape",
        ));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if !grads.is_finite() {
        return Err(Error::TrainingDiverged(format!(
            "non-finite gradient at Adam step {}",
            state.t + 1
        )));
    }
    state.t += 1;
    let (b1, b2, eps) = (config.adam_beta1, config.adam_beta2, config.adam_eps);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.first_moment.tensors_mut())
        .zip(state.second_moment.tensors_mut());
    for (((p, g), m), v) in tensors {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One row of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mask-free mean cross-entropy over the training set after the epoch.
    pub mean_loss: f64,
    /// Mask-free argmax accuracy over the training set after the epoch.
    pub train_accuracy: f64,
    /// Mean minibatch loss seen during the epoch (dropout active).
    pub running_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub member: u64,
    pub initial_loss: f64,
    pub initial_accuracy: f64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("epoch record serializes") + "\n")
            .collect()
    }
}

/// A training example resolved against the dataset.
pub(crate) struct Example<'a> {
    pub class_id: usize,
    pub obj: &'a [f64],
    pub glob: &'a [f64],
    pub label: usize,
}

pub(crate) fn examples<'a>(
    dataset: &'a Dataset,
    action: ActionType,
    head: &HeadConfig,
) -> Result<Vec<Example<'a>>> {
    let h = dataset.header();
    if h.obj_feature_dim != head.obj_feature_dim
        || h.global_feature_dim != head.global_feature_dim
        || h.num_object_classes != head.num_object_classes
    {
        return Err(Error::shape(format!(
            "dataset ({} object classes, {}/{} feature dims) does not match head ({} / {}/{})",
            h.num_object_classes,
            h.obj_feature_dim,
            h.global_feature_dim,
            head.num_object_classes,
            head.obj_feature_dim,
            head.global_feature_dim
        )));
    }
    let out: Vec<Example> = dataset
        .labeled(action)
        .into_iter()
        .map(|(r, label)| Example {
            class_id: r.object_class_id,
            obj: r.obj_feat.as_slice(),
            glob: r.glob_feat.as_slice(),
            label,
        })
        .collect();
    if out.is_empty() {
        return Err(Error::invalid(format!(
            "no training records labelled for {action}"
        )));
    }
    if let Some(e) = out.iter().find(|e| e.label >= head.num_categories) {
        return Err(Error::invalid(format!(
            "label {} does not fit a head with {} categories",
            e.label, head.num_categories
        )));
    }
    Ok(out)
}

/// Mask-free mean loss and accuracy.
fn evaluate(params: &HeadParams, examples: &[Example]) -> Result<(f64, f64)> {
    let per: Vec<(f64, bool)> = examples
        .par_iter()
        .map(|e| {
            let trace = model::forward(params, e.class_id, e.obj, e.glob, None)?;
            let loss = model::loss_cross_entropy(&trace.p, e.label)?;
            Ok((loss, trace.p.argmax() == e.label))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let loss = per.iter().map(|(l, _)| l).sum::<f64>() / n;
    let acc = per.iter().filter(|(_, ok)| *ok).count() as f64 / n;
    Ok((loss, acc))
}

/// Mean loss and gradient over one minibatch.
pub(crate) fn batch_gradient(
    params: &HeadParams,
    batch: &[&Example],
    masks: &[Option<DropoutMask>],
) -> Result<(f64, Gradients)> {
    let partials: Vec<(f64, Gradients)> = batch
        .par_chunks(GRAD_CHUNK)
        .zip(masks.par_chunks(GRAD_CHUNK))
        .map(|(examples, masks)| {
            let mut grad = HeadParams::zeros_like(params);
            let mut loss = 0.0;
            for (e, mask) in examples.iter().zip(masks) {
                let trace = model::forward(params, e.class_id, e.obj, e.glob, mask.as_ref())?;
                loss += model::loss_cross_entropy(&trace.p, e.label)?;
                let g = model::backward(&trace, params, e.label, mask.as_ref())?;
                grad.add_scaled(&g, 1.0);
            }
            Ok((loss, grad))
        })
        .collect::<Result<_>>()?;
    let mut total = HeadParams::zeros_like(params);
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        total.add_scaled(g, 1.0);
    }
    let n = batch.len() as f64;
    total.scale(1.0 / n);
    Ok((loss / n, total))
}

/// Trains member 0. See [`train_member`].
pub fn train(
    dataset: &Dataset,
    action: ActionType,
    head: &HeadConfig,
    config: &TrainConfig,
) -> Result<(HeadParams, TrainingLog)> {
    train_member(dataset, action, head, config, 0)
}

/// Trains one head. Initialisation, shuffling and dropout draw from streams
/// derived from `(config.seed, member)`, so members are independent and
/// every run is reproducible.
pub fn train_member(
    dataset: &Dataset,
    action: ActionType,
    head: &HeadConfig,
    config: &TrainConfig,
    member: u64,
) -> Result<(HeadParams, TrainingLog)> {
    head.validate()?;
    config.validate()?;
    let examples = examples(dataset, action, head)?;

    let mut init_rng = RngStream::derived(config.seed, StreamPurpose::Init, member);
    let mut params = model::init_params(head, &mut init_rng)?;
    let (initial_loss, initial_accuracy) = evaluate(&params, &examples)?;
    let mut log = TrainingLog {
        member,
        initial_loss,
        initial_accuracy,
        epochs: Vec::with_capacity(config.epochs),
    };
    if config.epochs == 0 {
        return Ok((params, log));
    }

    let mut shuffle_rng = RngStream::derived(config.seed, StreamPurpose::Shuffle, member);
    let mut mask_rng = RngStream::derived(config.seed, StreamPurpose::TrainDropout, member);
    let mut adam = AdamState::new(&params);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step: u64 = 0;

    for epoch in 0..config.epochs {
        let lr = lr_at(config, epoch);
        shuffle_rng.shuffle(&mut order);
        let mut running = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let masks: Vec<Option<DropoutMask>> = if config.dropout_rate > 0.0 {
                (0..batch.len())
                    .map(|_| {
                        DropoutMask::sample(head, config.dropout_rate, &mut mask_rng, step)
                            .map(Some)
                    })
                    .collect::<Result<_>>()?
            } else {
                vec![None; batch.len()]
            };
            let (loss, grads) = batch_gradient(&params, &batch, &masks)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged(format!(
                    "non-finite loss at epoch {epoch}, step {step}"
                )));
            }
            adam_step(&mut params, &grads, &mut adam, lr, config).map_err(|e| match e {
                Error::TrainingDiverged(msg) => {
                    Error::TrainingDiverged(format!("epoch {epoch}: {msg}"))
                }
                other => other,
            })?;
            running += loss;
            batches += 1;
            step += 1;
        }
        if !params.is_finite() {
            return Err(Error::TrainingDiverged(format!(
                "non-finite parameters after epoch {epoch}"
            )));
        }
        let (mean_loss, train_accuracy) = evaluate(&params, &examples)?;
        if !mean_loss.is_finite() {
            return Err(Error::TrainingDiverged(format!(
                "non-finite loss after epoch {epoch}"
            )));
        }
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            mean_loss,
            train_accuracy,
            running_loss: running / batches as f64,
        });
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, SynthSpec};
    use crate::numeric::StreamPurpose;

    fn scalar_head() -> HeadConfig {
        HeadConfig {
            num_object_classes: 1,
            obj_feature_dim: 1,
            global_feature_dim: 1,
            hidden_dim: 1,
            fc_hidden_dim: 1,
            num_categories: 1,
            dropout_rate: 0.0,
        }
    }

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::new(1, 0);
        assert_eq!(lr_at(&cfg, 0), 1e-4);
        assert_eq!(lr_at(&cfg, 4), 1e-4);
        assert!((lr_at(&cfg, 5) - 0.85e-4).abs() < 1e-18);
        assert!((lr_at(&cfg, 10) - 7.225e-5).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for e in 0..200 {
            let lr = lr_at(&cfg, e);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let head = scalar_head();
        let cfg = TrainConfig::new(1, 0);
        let mut params = model::init_params(&head, &mut RngStream::new(1, 0)).unwrap();
        let before = params.clone();
        let grads = HeadParams::zeros_like(&params);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 1e-3, &cfg).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let head = scalar_head();
        let cfg = TrainConfig::new(1, 0);
        let mut params = HeadParams::zeros(&head);
        let mut grads = HeadParams::zeros_like(&params);
        grads.fc2.bias[0] = 1.0;
        let mut state = AdamState::new(&params);
        let lr = 1e-3;
        adam_step(&mut params, &grads, &mut state, lr, &cfg).unwrap();
        // m̂ = 1, v̂ = 1 at t = 1
        let expected = -lr / (1.0 + cfg.adam_eps);
        assert!((params.fc2.bias[0] - expected).abs() < 1e-18);
        assert!((params.fc2.bias[0] + lr).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let head = scalar_head();
        let cfg = TrainConfig::new(1, 0);
        let mut params = HeadParams::zeros(&head);
        let mut grads = HeadParams::zeros_like(&params);
        grads.fc1.weight.values_mut()[0] = f64::NAN;
        let mut state = AdamState::new(&params);
        assert!(matches!(
            adam_step(&mut params, &grads, &mut state, 1e-3, &cfg),
            Err(Error::TrainingDiverged(_))
        ));
        assert_eq!(state.t, 0);
    }

    fn blob_data(seed: u64) -> (Dataset, HeadConfig) {
        let spec = SynthSpec::blobs(3, 4, 4, 4.0, 1.0, 120);
        let out = synth_blobs(
            &spec,
            &mut RngStream::derived(seed, StreamPurpose::Synth, 0),
        )
        .unwrap();
        let head = HeadConfig {
            num_object_classes: 1,
            obj_feature_dim: 4,
            global_feature_dim: 4,
            hidden_dim: 16,
            fc_hidden_dim: 8,
            num_categories: 3,
            dropout_rate: 0.1,
        };
        (out.dataset, head)
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (data, head) = blob_data(1);
        let cfg = TrainConfig::new(0, 9);
        let (params, log) = train(&data, ActionType::Sit, &head, &cfg).unwrap();
        let init =
            model::init_params(&head, &mut RngStream::derived(9, StreamPurpose::Init, 0)).unwrap();
        assert_eq!(params, init);
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (data, head) = blob_data(2);
        let mut cfg = TrainConfig::new(10, 4);
        cfg.lr0 = 5e-3;
        cfg.batch_size = 16;
        cfg.dropout_rate = 0.1;
        let (a, log_a) = train(&data, ActionType::Sit, &head, &cfg).unwrap();
        let (b, log_b) = train(&data, ActionType::Sit, &head, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        assert_eq!(log_a.to_json_lines().lines().count(), 10);
        assert!(log_a.epochs[9].mean_loss <= log_a.initial_loss);
    }

    #[test]
    fn determinism_holds_under_different_thread_counts() {
        let (data, head) = blob_data(3);
        let mut cfg = TrainConfig::new(3, 1);
        cfg.lr0 = 1e-2;
        cfg.batch_size = 50;
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| train(&data, ActionType::Sit, &head, &cfg).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn missing_labels_are_rejected() {
        let (data, head) = blob_data(1);
        let cfg = TrainConfig::new(1, 0);
        assert!(matches!(
            train(&data, ActionType::Grasp, &head, &cfg),
            Err(Error::InvalidInput(_))
        ));
        let wrong = HeadConfig {
            obj_feature_dim: 5,
            ..head
        };
        assert!(matches!(
            train(&data, ActionType::Sit, &wrong, &cfg),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn small_steps_descend() {
        let (data, head) = blob_data(5);
        let examples = examples(&data, ActionType::Sit, &head).unwrap();
        let batch: Vec<&Example> = examples.iter().take(32).collect();
        let masks = vec![None; batch.len()];
        let mut cfg = TrainConfig::new(1, 0);
        cfg.lr0 = 1e-6;
        let mut descended = 0;
        for seed in 0..10 {
            let mut params = model::init_params(&head, &mut RngStream::new(seed, 0)).unwrap();
            let (before, grads) = batch_gradient(&params, &batch, &masks).unwrap();
            let mut state = AdamState::new(&params);
            adam_step(&mut params, &grads, &mut state, cfg.lr0, &cfg).unwrap();
            let (after, _) = batch_gradient(&params, &batch, &masks).unwrap();
            if after < before {
                descended += 1;
            }
        }
        assert!(descended >= 9, "only {descended}/10 descended");
    }
}
