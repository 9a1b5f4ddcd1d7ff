//! Finite-element solver for the stochastic incompressible Navier-Stokes
//! equations with pressure-penalty Euler time stepping, and a Monte-Carlo
//! harness comparing penalty and saddle-point schemes on shared noise paths.

pub mod assembly;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod linalg;
pub mod mesh;
pub mod noise;
pub mod output;
pub mod quadrature;
pub mod scheme;
pub mod space;
pub mod sparse;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/meshes.md")]
    mod meshes {}
    #[doc = include_str!("../../../book/src/assembly.md")]
    mod assembly {}
    #[doc = include_str!("../../../book/src/noise.md")]
    mod noise {}
    #[doc = include_str!("../../../book/src/schemes.md")]
    mod schemes {}
    #[doc = include_str!("../../../book/src/ensembles.md")]
    mod ensembles {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
}
