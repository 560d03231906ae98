//! Shape and appearance models learned from unannotated images.
//!
//! Images are explained as `f_n ~ p(f | pull(mu + W_a z_n, shoot(W_v z_n)))`:
//! a linear appearance model warped by a diffeomorphism obtained by
//! geodesic shooting of a linear combination of initial velocities.

pub mod error;
pub mod exact;
pub(crate) mod fft;
pub mod field;
pub mod grid;
pub mod operators;
pub mod diffeo;
pub mod likelihood;
pub mod dataset;
pub mod hyper;
pub mod model;
pub mod trainer;
pub mod synthetic;
pub mod inference;
pub mod distrib;
pub mod pnm;
pub mod xval;

pub use error::{Error, Result};
pub use grid::Grid;

#[cfg(test)]
pub(crate) mod testutil;
