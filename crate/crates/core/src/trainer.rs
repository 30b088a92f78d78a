//! Base-session optimization, the freeze schedule, and incremental sessions.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::classifier::{ClassId, ClassifierState};
use crate::encoder::{
    backbone_digest, forward_batch, Binding, BoundEncoder, EncoderConfig, EncoderModel,
    ParamId, ParameterCount, Phase,
};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::protocol::{
    accuracy_on_features, cumulative_test_set, evaluate, summarize, LabeledSample, Session,
    SessionPlan, SessionReport,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian classifier initialization.
pub const CLASSIFIER_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Double,
    Single,
}

fn default_temperature() -> f64 {
    crate::classifier::DEFAULT_TEMPERATURE
}

/// Optimizer and schedule settings of the base session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Filled from the experiment seed when loaded from a config file.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    /// Cosine classifier temperature.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: B=32, lr=0.05, momentum 0.9, 30 epochs.
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
            precision: Precision::Double,
            temperature: default_temperature(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return contract_err("trainer.batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return contract_err("trainer.learning_rate must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return contract_err("trainer.momentum must lie in [0, 1)");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return contract_err("trainer.temperature must be positive");
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub session: usize,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// `v <- momentum * v + g; p <- p - lr * v`, elementwise.
pub fn sgd_step<T: Scalar>(params: &mut [T], grads: &[T], velocity: &mut [T], lr: T, momentum: T) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return contract_err(format!(
            "sgd_step lengths disagree: params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        ));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD holding one velocity buffer per parameter.
pub struct Sgd<T> {
    lr: T,
    momentum: T,
    velocity: HashMap<ParamId, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Self {
        Self {
            lr,
            momentum,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, id: ParamId, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if param.shape() != grad.shape() {
            return shape_err(format!(
                "gradient {:?} does not match parameter {:?}",
                grad.shape(),
                param.shape()
            ));
        }
        let v = self
            .velocity
            .entry(id)
            .or_insert_with(|| vec![T::zero(); param.len()]);
        sgd_step(param.data_mut(), grad.data(), v, self.lr, self.momentum)
    }
}

/// Mean cross-entropy over cosine logits for a batch, with the gradients of
/// every trainable tensor (encoder tensors per the freeze schedule, plus the
/// classifier matrix under [`ParamId::Classifier`]).
///
/// `columns[i]` is the classifier column of `samples[i]`'s label.
pub fn loss_and_gradients<T: Scalar>(
    encoder: &EncoderModel<T>,
    state: &ClassifierState<T>,
    samples: &[&LabeledSample<T>],
    columns: &[usize],
) -> Result<(T, BTreeMap<ParamId, Tensor<T>>)> {
    let mut tape = Tape::new();
    let bound = BoundEncoder::bind(&mut tape, encoder, Binding::Train);
    let zs = samples
        .iter()
        .map(|s| bound.encode(&mut tape, &encoder.config, &s.image))
        .collect::<Result<Vec<_>>>()?;
    head_loss(tape, bound.params().clone(), &zs, state, columns)
}

fn head_loss<T: Scalar>(
    mut tape: Tape<T>,
    mut params: BTreeMap<ParamId, crate::autodiff::Var>,
    zs: &[crate::autodiff::Var],
    state: &ClassifierState<T>,
    columns: &[usize],
) -> Result<(T, BTreeMap<ParamId, Tensor<T>>)> {
    let w = tape.param(state.weight_matrix()?);
    params.insert(ParamId::Classifier, w);
    let z = tape.concat_rows(zs)?;
    let wn = tape.l2_normalize(w);
    let cos = tape.matmul_nt(z, wn)?;
    let logits = tape.scale(cos, state.temperature());
    let loss = tape.cross_entropy(logits, columns)?;
    tape.backward(loss)?;
    let grads = params
        .into_iter()
        .map(|(id, v)| {
            let g = tape.grad(v).cloned().expect("trainable leaf has a gradient");
            (id, g)
        })
        .collect();
    Ok((tape.value(loss).item()?, grads))
}

/// Result of the base session.
pub struct BaseTraining<T> {
    pub encoder: EncoderModel<T>,
    pub classifier: ClassifierState<T>,
    /// One loss per optimizer step.
    pub loss_curve: Vec<f64>,
}

/// Independent seed for one stochastic component of a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)).next_u64()
}

pub const STREAM_BACKBONE: u64 = 1;
pub const STREAM_CLASSIFIER: u64 = 2;
pub const STREAM_SHUFFLE: u64 = 3;
/// Used by callers that synthesize data from the run seed.
pub const STREAM_DATA: u64 = 4;
/// Used by callers that draw the session plan from the run seed.
pub const STREAM_PLAN: u64 = 5;

/// Runs `epochs * ceil(n / B)` momentum-SGD steps on the cross-entropy of the
/// cosine logits. Only the update matrices, the adapted-block biases and the
/// classifier columns change.
pub fn train_base_session<T: Scalar>(
    encoder: EncoderModel<T>,
    state: ClassifierState<T>,
    base_data: &[LabeledSample<T>],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<BaseTraining<T>> {
    cfg.validate()?;
    if encoder.phase != Phase::Base {
        return contract_err("base training requires an encoder in the base phase");
    }
    let column: HashMap<ClassId, usize> = state
        .class_ids()
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    let columns = base_data
        .iter()
        .map(|s| {
            column.get(&s.label).copied().ok_or_else(|| {
                Error::Contract(format!("label {} is not a base class", s.label))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let frozen_before = backbone_digest(&encoder);

    let mut encoder = encoder;
    let mut state = state;
    let mut loss_curve = Vec::new();
    if base_data.is_empty() || cfg.epochs == 0 {
        return Ok(BaseTraining {
            encoder,
            classifier: state,
            loss_curve,
        });
    }

    // With nothing to adapt the features are constants; compute them once.
    let encoder_ids = encoder.schedule().trainable_encoder_params(&encoder.config);
    let cached: Option<Vec<Tensor<T>>> = if encoder_ids.is_empty() {
        let images: Vec<&Tensor<T>> = base_data.iter().map(|s| &s.image).collect();
        Some(forward_batch(&images, &encoder)?)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE));
    let mut opt = Sgd::new(T::lit(cfg.learning_rate), T::lit(cfg.momentum));
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..base_data.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let batch_columns: Vec<usize> = batch.iter().map(|&i| columns[i]).collect();
            let (loss, grads) = match &cached {
                Some(features) => {
                    let mut tape = Tape::new();
                    let zs: Vec<_> = batch
                        .iter()
                        .map(|&i| tape.constant(features[i].clone()))
                        .collect();
                    head_loss(tape, BTreeMap::new(), &zs, &state, &batch_columns)?
                }
                None => {
                    let samples: Vec<&LabeledSample<T>> = batch.iter().map(|&i| &base_data[i]).collect();
                    loss_and_gradients(&encoder, &state, &samples, &batch_columns)?
                }
            };
            let mut weights = state.weight_matrix()?;
            for (id, g) in &grads {
                match id {
                    ParamId::Classifier => opt.step(*id, &mut weights, g)?,
                    _ => opt.step(*id, encoder.param_mut(*id)?, g)?,
                }
            }
            state = state.with_weight_matrix(&weights)?;
            let record = StepRecord {
                session: 0,
                epoch,
                step,
                loss: loss.as_f64(),
            };
            log(&record);
            loss_curve.push(record.loss);
            step += 1;
        }
    }

    if backbone_digest(&encoder) != frozen_before {
        return contract_err("frozen backbone changed during base training");
    }
    Ok(BaseTraining {
        encoder,
        classifier: state,
        loss_curve,
    })
}

/// Groups unit features by class id.
fn features_by_class<T: Scalar>(
    encoder: &EncoderModel<T>,
    samples: &[LabeledSample<T>],
) -> Result<BTreeMap<ClassId, Vec<Tensor<T>>>> {
    let images: Vec<&Tensor<T>> = samples.iter().map(|s| &s.image).collect();
    let feats = forward_batch(&images, encoder)?;
    let mut out: BTreeMap<ClassId, Vec<Tensor<T>>> = BTreeMap::new();
    for (s, z) in samples.iter().zip(feats) {
        out.entry(s.label).or_default().push(z);
    }
    Ok(out)
}

/// Replaces every base column with the prototype of its class, computed with
/// the trained encoder.
pub fn replace_with_prototypes<T: Scalar>(
    encoder: &EncoderModel<T>,
    state: &ClassifierState<T>,
    base_data: &[LabeledSample<T>],
) -> Result<ClassifierState<T>> {
    state.replace_base_classifier(&features_by_class(encoder, base_data)?)
}

/// Appends one prototype per class of an N-way K-shot session. The encoder
/// must be frozen.
pub fn run_incremental_session<T: Scalar>(
    encoder: &EncoderModel<T>,
    state: &ClassifierState<T>,
    session: &Session<T>,
) -> Result<ClassifierState<T>> {
    if encoder.phase != Phase::Incremental {
        return contract_err("incremental sessions require a frozen encoder");
    }
    if let Some(c) = session.class_ids.iter().find(|c| state.class_ids().contains(c)) {
        return contract_err(format!("session class {c} already exists in the classifier"));
    }
    state.append_classes(&features_by_class(encoder, &session.train)?)
}

/// Wall-clock seconds per phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub base_training_s: f64,
    pub replacement_s: f64,
    pub incremental_s: f64,
    pub evaluation_s: f64,
}

/// Everything produced by an end-to-end run.
pub struct ExperimentOutcome<T> {
    pub report: SessionReport,
    pub loss_curve: Vec<f64>,
    /// Accuracy of the gradient-trained classifier on the base training set.
    pub base_train_accuracy: f64,
    pub parameter_count: ParameterCount,
    pub encoder: EncoderModel<T>,
    pub classifier: ClassifierState<T>,
    pub timings: PhaseTimings,
}

/// Base training, prototype replacement, then one incremental session at a
/// time, evaluating on the cumulative test set after each session.
pub fn run_full_experiment<T: Scalar>(
    plan: &SessionPlan<T>,
    encoder_cfg: &EncoderConfig,
    train_cfg: &TrainConfig,
) -> Result<SessionReport> {
    run_experiment(plan, encoder_cfg, train_cfg, &mut |_| {}).map(|o| o.report)
}

/// [`run_full_experiment`] with the full outcome and a training log sink.
pub fn run_experiment<T: Scalar>(
    plan: &SessionPlan<T>,
    encoder_cfg: &EncoderConfig,
    train_cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<ExperimentOutcome<T>> {
    // The backbone depends only on the architecture and the seed, so every
    // adaptation setting of a sweep starts from the same frozen weights.
    let encoder = EncoderModel::new(encoder_cfg.clone(), derive_seed(train_cfg.seed, STREAM_BACKBONE))?;
    run_experiment_with_backbone(plan, encoder, train_cfg, log)
}

/// Runs the pipeline from an already constructed base-phase encoder.
pub fn run_experiment_with_backbone<T: Scalar>(
    plan: &SessionPlan<T>,
    encoder: EncoderModel<T>,
    train_cfg: &TrainConfig,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<ExperimentOutcome<T>> {
    train_cfg.validate()?;
    plan.check_invariants()?;
    let mut timings = PhaseTimings::default();
    let base = plan.base();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train_cfg.seed, STREAM_CLASSIFIER));
    let initial = ClassifierState::random(
        base.class_ids.clone(),
        encoder.config.embed_dim,
        T::lit(train_cfg.temperature),
        CLASSIFIER_INIT_STD,
        &mut rng,
    )?;
    let parameter_count = encoder
        .config
        .trainable_parameter_count(base.class_ids.len());

    let clock = Instant::now();
    let trained = train_base_session(encoder, initial, &base.train, train_cfg, log)?;
    timings.base_training_s = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let encoder = trained.encoder.freeze();
    let base_features = features_by_class(&encoder, &base.train)?;
    let labelled: Vec<(Tensor<T>, ClassId)> = base_features
        .iter()
        .flat_map(|(&c, zs)| zs.iter().map(move |z| (z.clone(), c)))
        .collect();
    let base_train_accuracy = accuracy_on_features(&trained.classifier, &labelled)?;
    let mut state = trained.classifier.replace_base_classifier(&base_features)?;
    timings.replacement_s = clock.elapsed().as_secs_f64();

    let mut accuracies = Vec::with_capacity(plan.sessions.len());
    let clock = Instant::now();
    accuracies.push(evaluate(&encoder, &state, &cumulative_test_set(plan, 0)?)?);
    timings.evaluation_s += clock.elapsed().as_secs_f64();
    for t in 1..plan.sessions.len() {
        let clock = Instant::now();
        state = run_incremental_session(&encoder, &state, &plan.sessions[t])?;
        timings.incremental_s += clock.elapsed().as_secs_f64();
        let clock = Instant::now();
        accuracies.push(evaluate(&encoder, &state, &cumulative_test_set(plan, t)?)?);
        timings.evaluation_s += clock.elapsed().as_secs_f64();
    }
    Ok(ExperimentOutcome {
        report: summarize(&accuracies)?,
        loss_curve: trained.loss_curve,
        base_train_accuracy,
        parameter_count,
        encoder,
        classifier: state,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanilla_and_null_steps() {
        let mut p = vec![1.0f64, -2.0];
        let mut v = vec![0.0; 2];
        sgd_step(&mut p, &[0.5, 1.0], &mut v, 0.1, 0.0).unwrap();
        assert_eq!(p, vec![1.0 - 0.1 * 0.5, -2.0 - 0.1 * 1.0]);

        let mut p = vec![3.0f64];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[0.0], &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p, vec![3.0]);
    }

    #[test]
    fn momentum_recurrence_by_hand() {
        // v1 = 1, p1 = -0.1; v2 = 0.9 + 1 = 1.9, p2 = -0.1 - 0.19 = -0.29
        let mut p = vec![0.0f64];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9).unwrap();
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9).unwrap();
        assert!((p[0] + 0.29).abs() < 1e-15);
        assert!((v[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_shape_mismatch() {
        let mut p = vec![0.0f64; 2];
        let mut v = vec![0.0; 2];
        assert!(matches!(
            sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9),
            Err(Error::Contract(_))
        ));
        let mut opt = Sgd::new(0.1f64, 0.0);
        let mut t = Tensor::zeros(&[2]);
        assert!(opt.step(ParamId::Classifier, &mut t, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn sgd_is_bit_deterministic() {
        let run = || {
            let mut p = vec![0.3f64, -0.7, 1e-3];
            let mut v = vec![0.0; 3];
            for k in 0..10 {
                let g: Vec<f64> = p.iter().map(|x| x * 1.7 + k as f64 * 0.01).collect();
                sgd_step(&mut p, &g, &mut v, 0.05, 0.9).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn train_config_validation() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("momentum"));
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
