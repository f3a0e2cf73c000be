//! Learned graph regularization for FEM-discretized PDE inverse problems.
//!
//! The crate covers mesh generation and graph extraction ([`mesh`]), sparse
//! linear algebra and CGLS ([`sparse`]), P1 finite elements ([`fem`]),
//! linearized forward operators for Poisson, Helmholtz and EIT
//! ([`forward`]), a reverse-mode tape ([`autodiff`]), graph regularizers and
//! baselines ([`regularizer`]), synthetic datasets ([`datagen`]) and the
//! train/evaluate/reconstruct pipeline ([`pipeline`]).

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod exec;
pub mod fem;
pub mod forward;
pub mod mesh;
pub mod pipeline;
pub mod regularizer;
pub mod sparse;

pub use error::{Error, Result};
