//! Forest-of-octrees adaptive meshes with conforming Lagrangian finite
//! elements, distributed over simulated ranks.
//!
//! Layers, bottom up: [`polytope`] (reference cube), [`forest`] (SFC leaves,
//! adapt, balance, partition, ghosts), [`simfabric`] (message rounds),
//! [`femesh`] (global VEFs per rank), [`fespace`] (DOFs and hanging
//! constraints), [`dofdist`] (ownership, exchange patterns, numbering),
//! [`assembly`] (Poisson systems and CG) and [`driver`] (the AMR loop).

pub mod assembly;
pub mod dofdist;
pub mod driver;
pub mod error;
pub mod femesh;
pub mod fespace;
pub mod forest;
pub mod polytope;
pub mod simfabric;

pub use error::{Error, Result};
