//! Two-stage multi-label classification with a prefix-conditional integrator.
//!
//! A base network predicts per-label marginals; a conditional network then models
//! the joint distribution one label at a time, conditioned on the marginals (or on
//! the raw features) and on the labels decided so far. Decoding is by beam search,
//! optionally restricted to prefixes that can still satisfy a CNF constraint set.

pub mod cli;
pub mod constraints;
pub mod data;
pub mod error;
pub mod inference;
pub mod losses;
pub mod model;
pub mod nnet;
pub mod pipeline;

pub use constraints::{ConstraintSet, Literal};
pub use error::{Error, Result};
pub use model::{
    encode_cond_input, joint_prob_base, BaseSeqModel, CondView, ConditionalModel, Independent, LabelOrder,
    MarginalAssignment, ModelBundle, SeqOnlyModel, StepModel, Valuation,
};
pub use nnet::{DenseNet, TrainConfig};
