//! Solvers for forward, backward and fully coupled forward-backward
//! stochastic difference equations on finite scenario trees, with
//! linear-quadratic control applications and brute-force oracles.
//!
//! ```
//! use fbsde_core::coefficients::DominationCase;
//! use fbsde_core::continuation::{solve_fbsde, ContinuationOptions, FbsdeSystem, PerturbationData};
//! use fbsde_core::family::{make_monotone_family, FamilySpec};
//! use fbsde_core::tree::TreeTopology;
//!
//! let topology = TreeTopology::rademacher(4)?;
//! let (family, domination) = make_monotone_family(&topology, FamilySpec::new(2, 2, 0.1, 7, DominationCase::Mu))?;
//! let system = FbsdeSystem::new(&topology, &family, &domination)?;
//! let data = PerturbationData::random(&topology, 2, 1.0, 11)?;
//! let (solution, diagnostics) = solve_fbsde(&system, &data, 1.0, &ContinuationOptions::default())?;
//! assert!(diagnostics.residual.unwrap().overall <= diagnostics.residual_bound.unwrap());
//! assert_eq!(solution.x.end(), 4);
//! # Ok::<(), fbsde_core::Error>(())
//! ```

pub mod bsde;
pub mod coefficients;
pub mod continuation;
pub mod error;
pub mod family;
pub mod linalg;
pub mod lq;
pub mod sde;
pub mod suite;
pub mod tree;

pub use error::{Error, Result};
