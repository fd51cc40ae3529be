//! Coded-aperture snapshot spectral imaging toolkit.
//!
//! * [`hsi`] and [`container`]: cubes, masks, measurements and the HSIC file format
//! * [`cassi`]: the sensing operator Φ, its adjoint, a dense test oracle and shot noise
//! * [`autograd`] and [`params`]: the small differentiable tensor engine used by the networks
//! * [`mixs2`]: the spectral/spatial transformer denoiser
//! * [`unfolding`]: residual-degradation unfolded proximal gradient descent
//! * [`baselines`]: TV-regularized PGD and GAP-TV solvers
//! * [`metrics`], [`training`], [`checkpoint`]: evaluation and optimization

pub mod autograd;
pub mod baselines;
pub mod cassi;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod error;
pub mod hsi;
pub mod layers;
pub mod metrics;
pub mod mixs2;
pub mod params;
pub mod training;
pub mod unfolding;

pub use error::{Error, Result};
