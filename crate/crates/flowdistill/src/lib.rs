//! Desk-scale laboratory for distilling flow-matching generative models into
//! few-step generators on 2D synthetic distributions.
//!
//! The crate is organized bottom-up:
//!
//! - [`ndgrad`]: dense f64 tensors, a tape-based reverse-mode autodiff engine,
//!   flat parameter vectors, and an AdamW-style optimizer.
//! - [`schedules`]: forward noising schedules (linear flow-matching and a
//!   variance-preserving diffusion form) and the score/velocity conversions.
//! - [`data`]: 2D synthetic target distributions with analytic densities.
//! - [`nets`]: the velocity network and the frozen-backbone discriminator.
//! - [`samplers`]: dense Euler sampling, coarse-anchor stochastic sampling,
//!   and partial backward simulation.
//! - [`metrics`]: Frechet distance, MMD, KDE-based KL, x0-prediction error
//!   profiles, step-count consistency, and conditional diversity.
//! - [`theorylab`]: analytic Gaussian worlds and the tracking-error /
//!   KL-bound measurement instruments.
//! - [`distill`]: the distillation trainer (distribution matching, fake-model
//!   alignment, intra-segment guidance, adversarial term).
//! - [`harness`]: teacher training, seeded experiment runs, ablation grids,
//!   CSV logs, and SVG charts.

pub mod data;
pub mod distill;
pub mod harness;
pub mod metrics;
pub mod ndgrad;
pub mod nets;
pub mod samplers;
pub mod schedules;
pub mod theorylab;

/// Crate-wide error type.
///
/// `Contract` marks a caller-side misuse (bad shapes, out-of-range arguments),
/// `Numeric` marks a non-finite value or a diverged computation, and
/// `Unsupported` marks an operation a configuration does not provide.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("numeric failure in {op}: {msg}")]
    Numeric { op: &'static str, msg: String },
    #[error("unsupported operation {op}: {msg}")]
    Unsupported { op: &'static str, msg: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },
}

impl Error {
    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract { op, msg: msg.into() }
    }

    pub fn numeric(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Numeric { op, msg: msg.into() }
    }

    pub fn unsupported(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Unsupported { op, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
