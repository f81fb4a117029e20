//! Numerical laboratory for conformally flat metrics `e^{2u}|dx|^2` built from
//! Q-curvature data.
//!
//! The crate constructs normal metrics from curvature measures and measures the
//! quantitative structure around them: Muckenhoupt and strong `A∞` weight
//! constants, volume growth of geodesic balls, Poincaré ratios, the spectral
//! calculus of the weighted Laplacian, and Vitali coverings.

pub mod conformal;
pub mod covering;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod paths;
pub mod poincare;
pub mod quad;
pub mod spectral;
pub mod testfn;
pub mod weights;

pub use error::{Error, Result};
