//! Non-Markovian quantum jump simulation.
//!
//! Unravels time-local master equations whose decay rates turn negative on
//! finite intervals into jump trajectories with forward and reverse jumps.
//! The ensemble is stored compressed (one vector per distinct state plus an
//! integer count), and a direct density-matrix integrator serves as the
//! reference solution.

pub mod ensemble;
pub mod error;
pub mod io;
pub mod jump;
pub mod linalg;
pub mod model;
pub mod naive;
pub mod oracle;
pub mod propagator;
pub mod run;

pub use ensemble::{DistinctState, Ensemble};
pub use error::{Error, Result};
pub use jump::{Engine, JumpEvent, JumpSign, StepOutcome};
pub use linalg::{C64, DensityMatrix, Operator, StateVector};
pub use model::{DecayChannel, ModelSpec, RateFunction};
pub use propagator::{IntegratorOrder, OrphanPolicy, StepControl};
