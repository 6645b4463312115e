//! Conformal prediction sets regularized by class similarity.
//!
//! Works on precomputed classifier outputs (softmax matrices, labels and
//! optional penultimate-layer features). A base nonconformity score
//! (LAC, RAPS or SAPS) is augmented with a penalty `lambda * d(y, y_hat(x))`
//! that charges candidates which are dissimilar to the predicted class:
//!
//! - [`similarity::PenaltySource::MaBinary`]: 1 when `y` and `y_hat` fall in
//!   different groups of a given class partition;
//! - [`similarity::PenaltySource::MsSoft`]: `1 - M[y, y_hat]` where `M` is
//!   the cosine similarity of centered class means in feature space;
//! - [`similarity::PenaltySource::MaDiag`]: 1 for every class except `y_hat`.
//!
//! Modules:
//!
//! - [`data`]: domain types and file formats
//! - [`scores`]: base nonconformity scores
//! - [`similarity`]: class means, similarity matrix, penalty sources
//! - [`conformal`]: calibration, prediction sets, the AIR superclass baseline
//! - [`tuning`]: lambda selection on a held-out calibration half
//! - [`metrics`]: set size, superclass count, coverage, worst class gap,
//!   and the repeated-split protocol
//! - [`synth`]: synthetic grouped data and numerical checks of the
//!   guarantees
//! - [`cli`]: the `simconf` command line

pub mod cli;
pub mod conformal;
pub mod data;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod scores;
pub mod similarity;
pub mod synth;
pub mod tuning;

pub use conformal::{calibrate, predict_set, Penalty, ScoredSamples};
pub use data::{
    CalibratedThreshold, ClassPartition, FeatureMatrix, LabelVector, Matrix, PredictionSet,
    SimilarityMatrix, SoftmaxMatrix,
};
pub use error::{Error, Result};
pub use scores::{ScoreFunction, ScoreKind};
pub use similarity::{PenaltyKind, PenaltySource};
