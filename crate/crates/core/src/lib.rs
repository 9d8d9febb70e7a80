//! Core algorithms for the Schrödinger's-cat shadow workbench.
//!
//! Everything in here is pure computation over owned buffers: an exact
//! statevector simulator for small qubit registers, classical-shadow
//! sampling and tomographic reconstruction, a dense-tensor engine with
//! reverse-mode autodiff, a transformer-based beta-VAE over measurement
//! records, the training loop, evaluation metrics (fidelity, von Neumann
//! entropy), prompt-based task batteries, and latent-space analysis
//! (exact t-SNE, nearest-neighbor cluster scores).
//!
//! The crate is `no_std` + `alloc`; file formats, CLI, and anything that
//! touches the filesystem live in the companion `shadowcat-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analysis;
pub mod eval;
pub(crate) mod math;
pub mod model;
pub mod qsim;
pub mod rng;
pub mod shadows;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use qsim::{DensityMatrix, ObservableString, Pauli, StateVector};
pub use shadows::{Shadow, ShadowBatch};
