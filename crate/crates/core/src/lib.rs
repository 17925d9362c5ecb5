//! Guess-free pseudospectral optimal control.
//!
//! A problem is declared as an [`ocp_model::OcpDefinition`], transcribed on
//! Legendre–Gauss–Lobatto nodes, and solved by Newton homotopy on the
//! first-order optimality system. No initial trajectory is required.

pub mod catalog;
pub mod exprlang;
pub mod ocp_model;
pub mod hamvet;
pub mod problem_file;
pub mod ps_basis;
pub mod scale;
pub mod solver;
pub mod transcription;
pub mod vnv;
