//! Recurrence-risk prediction from slide bundles and clinical records: a
//! patch CNN with a region transformer, penalised logistic regression,
//! score fusion and the evaluation statistics around them.

pub mod aggrformer;
pub mod clinreg;
pub mod corpus;
pub mod diffcore;
pub mod error;
pub mod evalstat;
pub mod fusion;
pub mod heatmap;
pub mod io;
pub mod num;
pub mod patchnet;
pub mod pipeline;
pub mod slidebundle;
pub mod synthgen;

pub use error::{Error, Result};
pub use num::Scalar;

/// Concrete double-precision aliases of the generic core.
pub type Tensor = diffcore::Tensor<f64>;
pub type Graph = diffcore::Graph<f64>;
pub type ParamStore = diffcore::ParamStore<f64>;
pub type Checkpoint = diffcore::Checkpoint<f64>;
pub type Model = aggrformer::OncoModel<f64>;
pub type ClinicalModel = clinreg::ClinModel<f64>;
pub type Cohort = evalstat::ScoredCohort<f64>;
