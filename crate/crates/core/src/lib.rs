//! Numerical machinery for periodic orbits accumulating on elliptic
//! invariant tori: Taylor-Fourier series algebra, resonance analysis and
//! certified period selection, third-order Lie averaging with twist and
//! coupling matrices, a Green-operator/contraction construction of
//! pseudo-periodic solutions, the reduced-action variational search, and
//! direct-integration verification.

pub mod dynamics;
pub mod error;
pub mod normalform;
pub mod orbit;
pub mod resonance;
pub mod tfseries;

pub use error::{CoreError, CoreResult};
pub use tfseries::{TFSeries, TermKey, VectorFieldSeries};
