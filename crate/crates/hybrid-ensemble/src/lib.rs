//! Hybrid quantum-classical ensembles on configuration space.
//!
//! An ensemble is a density P(q,x) and phase S(q,x) over a quantum coordinate q
//! (continuous or a finite index) and a classical coordinate x. It is stored as
//! psi = sqrt(P) exp(iS/hbar) on a tensor grid.

pub mod error;
pub mod grid;
pub mod ensemble;
pub mod observables;
pub mod bracket;
pub mod fixtures;
pub mod measurement;
pub mod logpolar;
pub mod dynamics;
pub mod thermal;

pub use ensemble::HybridEnsemble;
pub use error::{HybridError, Result};
pub use grid::{ClassicalSector, DerivativeScheme, GridSpec, HybridGrid, QuantumSector};
