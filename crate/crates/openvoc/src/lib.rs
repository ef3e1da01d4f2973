//! Open-vocabulary visual-semantic embeddings.
//!
//! This crate trains a linear map from visual feature space into a word-vector
//! ("semantic") space and classifies by nearest label prototype, so that the
//! label set at test time can be anything from the training classes to a
//! vocabulary of hundreds of thousands of words and phrases. The pieces:
//!
//! - [`embedding`] — vocabularies, datasets, the embedding matrix `W`, and
//!   distance/neighbor primitives.
//! - [`loss`] — the training objective: a weighted ε-insensitive regression
//!   term pulling each instance onto its class prototype, plus squared-hinge
//!   margin terms pushing it away from nearby competing prototypes.
//! - [`evt`] — extreme-value machinery: Weibull fits of per-class margin and
//!   coverage distributions, whose significance radii yield per-class weights.
//! - [`solver`] — L-BFGS, mini-batch SGD, a hybrid schedule, and the outer
//!   training loop that alternates weight refits with `W` minimization.
//! - [`recognition`] — nearest-prototype classification over candidate sets
//!   for the supervised / zero-shot / generalized / open-set settings.
//! - [`evaluation`] — top-k accuracy, the seen/unseen harmonic mean, the area
//!   under the seen-unseen accuracy curve, false-positive rate, and openness.
//! - [`io`] — word-vector files (word2vec text/binary), feature/label files,
//!   frequency-based vocabulary pruning, and model serialization.
//! - [`synth`] — a seeded synthetic benchmark generator and the brute-force
//!   reference implementations ("oracles") the test suite checks against.
//!
//! All computation is in `f64`; files may store `f32`. Every ranking breaks
//! distance ties by the lowest vocabulary index, which makes results
//! reproducible bit-for-bit across runs and thread counts.

pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod evt;
pub mod io;
pub mod loss;
pub mod recognition;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
