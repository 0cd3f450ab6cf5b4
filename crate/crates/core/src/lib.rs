//! Numerical variational homogenization for random monotone elliptic equations.
//!
//! The crate builds uniformly convex, self-dual representatives of monotone
//! maps, samples stationary random coefficient fields, computes the
//! superadditive and subadditive cell quantities `mu` and `mu0` on triadic
//! cubes, extracts the homogenized integrand and map, and checks error decay
//! and large-scale regularity of Dirichlet solutions.

pub mod cli;
pub mod fft;
pub mod grid;
pub mod dirichlet;
pub mod homogenize;
pub mod solver;
pub mod subadd;
pub mod fields;
pub mod varrep;
