//! Structure-preserving solver for a Cahn–Hilliard–Darcy tumor growth
//! model: upwind discontinuous Galerkin in space, convex splitting in time.
//!
//! The discrete state is `(v, p, u, μ_u, n)` on a triangulation whose
//! interior edges are orthogonal to the segment joining the neighboring
//! barycenters. Each time step conserves `∫(u + n)`, keeps `u, n ∈ [0, 1]`
//! and satisfies a discrete energy law; [`diagnostics`] measures all three.

pub mod mesh;
pub mod quadrature;
pub mod spaces;
pub mod physics;
pub mod forms;
pub mod stepper;
pub mod diagnostics;
pub mod config;
pub mod output;
pub mod driver;
