//! Incentive design in parameterized mean-field games.
//!
//! Games are described by [`mfg::EnvModel`]. Equilibria are approximated by
//! iterating online mirror descent ([`mfg::omd_iterate`]), and design
//! gradients through those iterations come from [`adjoint::amid_gradient`].

pub mod adjoint;
pub mod autodiff;
pub mod design;
pub mod env;
pub mod error;
pub mod mechanism;
pub mod mfg;
pub mod nplayer;
pub mod optim;
pub mod params;

pub use error::{Error, Result};
