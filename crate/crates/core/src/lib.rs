//! Adversarial example generation for feed-forward ReLU networks.
//!
//! The crate combines three ingredients:
//!
//! * classical iterative attacks (FGSM steps, PGD, momentum I-FGSM, a C&W
//!   ℓ∞ schedule) over an ε-ball intersected with the valid input box,
//! * verification-style machinery — interval and backward linear bounds,
//!   the triangle relaxation of each ReLU, and its Lagrangian-decomposition
//!   dual solved by supergradient ascent — whose outputs double as features,
//! * a trainable graph-network attack whose message passes mirror the
//!   target network and whose parameters transfer across architectures,
//!
//! plus a minimal-perturbation dataset generator and a timed benchmark
//! harness.

pub mod attacks;
pub mod bench;
pub mod bounds;
pub mod datagen;
pub mod error;
pub mod gnn;
pub mod linalg;
pub mod netcore;
pub mod relaxation;
pub mod synth;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
