//! Higher-order latent space dynamics identification.
//!
//! Full-order solvers produce trajectories with `K` time-derivative
//! channels; `K` sine-MLP autoencoders compress each channel; an order-`K`
//! linear latent ODE with per-parameter coefficients is trained jointly
//! through a differentiable RK4 integrator; Gaussian processes interpolate
//! the coefficients across parameter space and drive greedy sampling.

pub mod adam;
pub mod autodiff;
pub mod autoencoder;
pub mod bundle;
pub mod container;
pub mod error;
pub mod fd;
pub mod fom;
pub mod gp;
pub mod latent;
pub mod losses;
pub mod pipeline;

pub use error::*;
