//! Finite-horizon optimal control problem solved at every sampling instant.

pub mod banded;
pub mod cost;
pub mod problem;
pub mod qp;
pub mod solver;
pub mod warm;

pub use cost::{CostWeights, Mode};
pub use problem::{transcribe, EndPenalty, OcpProblem, ProblemError, SolverOptions};
pub use solver::{cold_start, solve, OcpSolution, SolveStatus, WarmStart};
pub use warm::shift_warm_start;
