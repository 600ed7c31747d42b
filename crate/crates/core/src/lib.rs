//! Adversarial training with a quadratic upper bound on the inner loss.
//!
//! This crate implements the full pipeline for studying fast adversarial
//! training driven by a certified quadratic upper bound (QUB) on the
//! cross-entropy loss under logit perturbations:
//!
//! * [`tensor`] — a small reverse-mode autodiff engine (dense `f64` tensors
//!   on a replayable tape).
//! * [`model`] — multi-layer perceptrons with seeded init and a binary
//!   checkpoint format.
//! * [`loss`] — cross-entropy machinery: closed-form logit gradients and
//!   Hessians, the spectral-norm bound that justifies the quadratic
//!   coefficient, the QUB objective itself, and the blended objective used
//!   by the decreasing schedule.
//! * [`attack`] — FGSM, FGSM-RS, N-FGSM and PGD inner maximizers plus
//!   robust-accuracy evaluation.
//! * [`data`] — synthetic 2-D tasks (gaussians, spirals) and IDX image
//!   loading.
//! * [`train`] — SGD training loops for clean / adversarial / QUB objectives
//!   with the epoch-indexed blending schedule and early stopping.
//! * [`analysis`] — loss-landscape grids, dominant input-Hessian eigenvalues
//!   via matrix-free power iteration, and adversarial-sparsity estimates.
//! * [`matrix`] — the method-by-seed comparison harness that produces the
//!   summary CSV/JSON artifacts.
//! * [`verify`] — randomized property checks over the mathematical claims,
//!   designed to fail loudly when an implementation drifts.
//!
//! Everything is deterministic given seeds: identical inputs produce
//! bit-identical outputs on the same build.

pub mod analysis;
pub mod attack;
pub mod data;
pub mod error;
pub mod loss;
pub mod matrix;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;



pub use attack::{AttackFamily, AttackResult, AttackSpec};
pub use data::{Batch, Dataset, SplitSpec};
pub use error::{Error, Result};
pub use loss::{BlendWeight, LogitBundle};
pub use model::{Activation, Mlp, MlpConfig};
pub use tensor::{Tape, Tensor, Var};
pub use train::{EarlyStop, EpochRecord, LossMode, TrainPlan};

