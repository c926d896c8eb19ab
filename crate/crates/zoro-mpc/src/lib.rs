//! Robust model-predictive tracking control for a differential-drive robot.
//!
//! The toolkit centers on a tube-based robust MPC scheme that keeps the
//! uncertainty description out of the optimization variables: ellipsoidal
//! tubes and the resulting constraint backoffs are frozen while each QP is
//! solved and refreshed between solves. Alongside the controller the crate
//! ships an exact-robust reference solver, a nominal baseline, a
//! scalar-radius tube baseline, and a closed-loop simulator with bounded
//! process noise for head-to-head comparisons.
//!
//! Start with the runnable programs in `examples/`; each one exercises a
//! major capability end to end.

pub mod error;
pub mod model;
pub mod ocp;
pub mod oracle;
pub mod qp;
pub mod runner;
pub mod scenario;
pub mod sim;
pub mod solver;
pub mod tube;

pub use error::{Error, Result};
