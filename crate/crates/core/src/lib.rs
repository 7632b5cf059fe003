//! Information-theoretic limits and message-passing validation for noisy
//! multi-measurement-vector (MMV) compressed sensing.
//!
//! * [`model`]: the jointly sparse Bernoulli–Gaussian prior and its denoiser.
//! * [`replica`]: the replica free energy `F(E)`, its local maxima and the MMSE.
//! * [`phase`]: performance regions, threshold curves and phase diagrams.
//! * [`se`]: state evolution and the BP-predicted MSE.
//! * [`sim`]: synthetic MMV and complex-CS channels, covariance Monte Carlo.
//! * [`amp`]: approximate message passing for MMV.
//! * [`cli`]: the batch front end behind the `mmv` binary.

pub mod amp;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod model;
pub mod quadrature;
pub mod phase;
pub mod replica;
pub mod se;
pub mod sim;

pub use error::{MmvError, Result};
