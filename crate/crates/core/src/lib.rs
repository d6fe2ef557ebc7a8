//! Time-difference electrical impedance tomography (EIT) on 2D triangular meshes.
//!
//! The crate covers the full numerical path from mesh to image:
//!
//! - [`mesh`]: disk mesh generation, text-format I/O, uniform refinement,
//!   electrode placement along the boundary.
//! - [`forward`]: shunt-electrode finite element forward solver for the
//!   16-electrode neighboring injection protocol, plus the adjoint dipole
//!   solve used to cross-check sensitivities.
//! - [`sensitivity`]: the 208 x n_elem sensitivity (Jacobian) matrix, column
//!   correlations, the fidelity regularizer, boundary submatrices, and the
//!   averaging kernel.
//! - [`recon`]: fidelity-embedded and standard Tikhonov reconstructions of
//!   conductivity changes, and the boundary-motion artifact filter.
//! - [`phantom`]: synthetic breathing and boundary-motion phantoms simulated
//!   with nonlinear forward solves on a refined mesh, with seeded measurement
//!   noise.
//! - [`linalg`]: the dense Cholesky and sparse LDL^T kernels everything above
//!   sits on.
//!
//! Conductivity is dimensionless with reference value 1; currents are unit
//! amplitude. All randomness is explicit: operations that draw noise take a
//! seed and are bit-reproducible.

pub mod linalg;
pub mod mesh;
pub mod forward;
pub mod sensitivity;
pub mod recon;
pub mod phantom;
