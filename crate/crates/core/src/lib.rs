//! Few-shot class-incremental learning on a frozen transformer encoder.
//!
//! The encoder is a small ViT whose backbone never trains. During the base
//! session a single set of additive updates to the attention query/key/value
//! projections (shared by the adapted blocks), the adapted blocks' biases and
//! a cosine classifier are fit by momentum SGD. Afterwards the encoder is
//! frozen, base columns are replaced by class prototypes, and every
//! incremental session only appends prototypes of its new classes.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root name the two concrete instantiations.

pub mod autodiff;
pub mod binary;
pub mod classifier;
pub mod data;
pub mod encoder;
pub mod error;
pub mod ops;
pub mod protocol;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Tape, Var};
pub use classifier::{fit_prototype, ClassId, ClassifierState};
pub use encoder::{EncoderConfig, EncoderModel, ParameterCount, UpdateTarget};
pub use error::{Error, Result};
pub use protocol::{
    build_session_plan, cumulative_test_set, evaluate, summarize, LabeledSample, SessionPlan,
    SessionReport, Split,
};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use trainer::{
    run_full_experiment, run_incremental_session, sgd_step, train_base_session, Precision,
    StepRecord, TrainConfig,
};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Tape32 = Tape<f32>;
pub type EncoderModel64 = EncoderModel<f64>;
pub type EncoderModel32 = EncoderModel<f32>;
pub type ClassifierState64 = ClassifierState<f64>;
pub type ClassifierState32 = ClassifierState<f32>;
pub type LabeledSample64 = LabeledSample<f64>;
pub type LabeledSample32 = LabeledSample<f32>;
pub type SessionPlan64 = SessionPlan<f64>;
pub type SessionPlan32 = SessionPlan<f32>;
