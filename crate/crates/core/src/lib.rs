//! Numerical homogenization on periodic lattices: coefficient sampling,
//! corrector solves, heat-kernel masked energies and their fluctuations.

pub mod coeff;
pub mod error;
mod fft;
pub mod lattice;
pub mod gffref;
pub mod homog;
pub mod jfunc;
pub mod kernel;
pub mod solve;
pub mod stats;

pub use coeff::{sample_field, CoefficientField, SamplerSpec};
pub use error::{Error, Result};
pub use lattice::{GridSpec, ScalarField, VectorField};
pub use solve::{build_corrector_set, solve_const_poisson, solve_corrector, CorrectorSet, SolverOptions};
