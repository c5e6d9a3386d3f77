//! Restoration defense against sign-gradient adversarial attacks.
//!
//! The crate is organized around a small reverse-mode autodiff tensor engine
//! ([`tensor`], [`tape`]) on top of which everything else is built:
//!
//! - [`models`]: a miniature residual classifier and binary checkpoint IO,
//! - [`attacks`]: FGSM / BIM / PGD / MIM / FFGSM under a shared ℓ∞ budget
//!   contract, plus a BPDA bypass attack against the defended pipeline,
//! - [`gmem`]: per-class input-gradient maps of a frozen classifier,
//! - [`trn`]: the two-stream restoration network built from fusion blocks,
//! - [`training`]: Adam, classifier training, and adversarial training of
//!   the restoration network with pixel + semantic losses,
//! - [`data`]: IDX / CIFAR binary loaders, a deterministic synthetic
//!   dataset, and seeded batching,
//! - [`harness`]: accuracy evaluation, attack/defense matrices and reports,
//! - [`gradcheck`]: finite-difference checks and loop-oracle references.
//!
//! All numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! gradient-correctness checks run in `f64`, training defaults to `f32`.

pub mod attacks;
pub mod data;
pub mod error;
pub mod gmem;
pub mod gradcheck;
pub mod harness;
mod kernels;
pub mod models;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod trn;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
