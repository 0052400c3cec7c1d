//! Component mode synthesis for the damped frequency response of 2D linear
//! elasticity, with a posteriori modal error estimation and adaptive
//! subspace refinement.

pub mod adapt;
pub mod cache;
pub mod config;
pub mod decomp;
pub mod error;
pub mod estimate;
pub mod fem;
pub mod linalg;
pub mod mesh;
pub mod plot;
pub mod reduced;
pub mod run;

pub use error::Error;
