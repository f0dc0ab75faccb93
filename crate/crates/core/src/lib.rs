//! Model predictive path-following control for a constrained two-link arm.
//!
//! The crate is organized bottom-up: [`dynamics`] is the only place the plant
//! is evaluated, [`transverse`] and [`terminal_set`] build the terminal
//! ingredients, [`ocp`] transcribes and solves the finite-horizon problem and
//! [`mpfc`] closes the loop.

pub mod checks;
pub mod config;
pub mod dynamics;
pub mod mpfc;
pub mod ocp;
pub mod terminal_set;
pub mod transverse;
