//! Scoped learning: per-locale refinement of a global classifier.
//!
//! A global model scores each instance from its global features. Within a
//! locale, instances also carry local features whose class-conditional
//! distribution is specific to that locale. The routines here infer those
//! local distributions jointly with the instance labels.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod global_model;
pub mod numerics;
pub mod optim;
pub mod oracle;
pub mod scoped_discriminative;
pub mod scoped_generative;
pub mod synth;

pub use corpus::{Corpus, Dims, Instance, Locale, Names};
pub use error::{Error, Result};
pub use global_model::{
    DiscriminativeGlobalModel, GenerativeGlobalModel, GlobalModel, MaxentOptions,
};
pub use numerics::LogProb;
pub use oracle::{exact_label_posterior, OracleResult};
pub use scoped_discriminative::{cond_em_infer, LocalConditionalModel};
pub use scoped_generative::{map_em_infer, variational_infer, InferenceConfig, LocalParams, ScopedResult, VariationalState};
pub use synth::{sample_corpus, SynthSpec, Truth};
