//! Numerical core of the compose-lab workbench.
//!
//! The pipeline has two strictly separated phases. Phase I trains a small
//! router MLP and a shared projection head against a holistic prototype
//! cross-entropy plus a decorrelation penalty, on top of a frozen slot
//! attention stage. Phase II is gradient-free: queries are scored against
//! class prototypes holistically and against per-class slot pools through a
//! family of set couplings (hard/soft Chamfer, mutual nearest neighbour,
//! Sinkhorn, Hungarian), then blended.
//!
//! Everything is driven by an explicit, replayable [`tensor::RngState`];
//! given the same seed and call sequence, every result in this crate is
//! bit-identical.
//!
//! Module map:
//! - [`tensor`] — dense matrices, seeded randomness, softmax/normalize,
//!   symmetric eigendecomposition, finite-difference oracle.
//! - [`slots`] — frozen slot attention forward pass, aggregate readout and
//!   the slot-purity evaluator.
//! - [`episode`] — the support/query batch that training and evaluation
//!   operate on.
//! - [`encoder`] — Phase-I trainables, losses, analytic gradients, Adam.
//! - [`matchers`] — Phase-II centering, couplings, Chamfer scoring and
//!   episode classification.
//! - [`gradlab`] — numerical validation of the gradient-geometry and
//!   decorrelation-feasibility claims the design rests on.
//! - [`bench`] — synthetic compositional benchmark: concept pools, scenes,
//!   splits, episodes, continual sessions with replay, metrics.

pub mod bench;
pub mod encoder;
pub mod episode;
pub mod error;
pub mod gradlab;
pub mod matchers;
pub mod slots;
pub mod tensor;

pub use error::{CoreError, Result};
