//! Magnetic geodesics and curves of prescribed geodesic curvature on the 2-sphere
//! with a conformal metric: integration, closed orbit search and classification,
//! the latitude-circle reduction, and Gauss–Bonnet and hypothesis audits.

pub mod apriori_audit;
pub mod closed_orbits;
pub mod error;
pub mod integrator;
pub mod loop_field;
pub mod magnetic_flow;
pub mod poincare;
pub mod poly;
pub mod reduction;
pub mod sphere_geometry;
pub mod variational;

pub use error::{Error, Result};
