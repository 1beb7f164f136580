//! Prediction sets for future state-sequences of discrete-state Markov
//! processes.
//!
//! Two predictors are provided:
//!
//! - [`conformal`]: finite-sample-valid sets from i-block permutation tests
//!   on the calibration sequence augmented with each candidate forecast.
//! - [`likelihood`]: highest-probability-mass sets under the fitted chain,
//!   plus a randomized variant calibrated in expectation.
//!
//! [`ingest`] turns country-month fatality counts into conflict-state
//! labels, and [`evalsim`] runs coverage studies, backtests and forward
//! forecasts for both predictors.

pub mod composition;
pub mod conformal;
pub mod error;
pub mod evalsim;
pub mod iblocks;
pub mod ingest;
pub mod likelihood;
pub mod markov;
pub mod rng;

pub use composition::Composition;
pub use conformal::{ConformalConfig, ConformalPredictionSet, ScoreMode, ScoredCandidate};
pub use error::{Error, Result};
pub use iblocks::{BlockPermutation, IBlockDecomposition};
pub use likelihood::{LikelihoodPredictionSet, RankedCandidates};
pub use markov::{
    InitialDistribution, State, StateSequence, StateSpace, TransitionCounts, TransitionMatrix,
};
