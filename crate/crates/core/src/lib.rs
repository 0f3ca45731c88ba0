//! Multivariate tensor factorization (PMTF) and multi-aspect pairwise ranking
//! (BPMR) with learned aspect covariances, plus the PTF and BPR baselines,
//! an EM trainer, data handling and ranking and explanation metrics.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod checkpoint;
pub mod covariance;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradients;
pub mod matrix;
pub mod model;
pub mod objectives;
pub mod reduce;
pub mod special;
pub mod trainer;

pub use baselines::{BaselineConfig, BaselineKind, PairSample};
pub use checkpoint::Checkpoint;
pub use covariance::{CorrMatrix, CovFactor, CovMatrix};
pub use data::{Dataset, GenConfig, GroundTruth, IdMap, Observation, SplitDataset, SplitSpec};
pub use error::{Error, ErrorKind, Result};
pub use eval::{AspectSelector, GainKind};
pub use gradients::GradientBundle;
pub use matrix::Matrix;
pub use model::{CovarianceSet, Hyperparams, LatentFactors, ModelParams};
pub use objectives::TripleSample;
pub use trainer::{em_fit, CovInit, FitOutcome, HistoryEntry, Mode, TrainConfig};
