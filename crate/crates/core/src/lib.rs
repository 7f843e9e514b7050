//! Finite-dimensional KAM reducibility workbench for the wave equation
//! u_tt - u_xx + q(x) u + V(omega t, x) u = 0 on the circle.

pub mod calibration;
pub mod config;
pub mod craig_wayne;
pub mod error;
pub mod evolution;
pub mod harmonics;
pub mod kam;
pub mod magnus;
pub mod melnikov;
pub mod opmatrix;
pub mod oracle;
pub mod potentials;
pub mod psdo;
pub mod schrodinger;
pub mod stats;
pub mod suites;

pub use error::{Error, Result};
pub use harmonics::{Lattice, TorusFunction, C64};
