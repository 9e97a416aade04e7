//! Passivity-constrained task-space control of serial manipulators.

pub mod checks;
pub mod dynamics;
pub mod error;
pub mod manipulability;
pub mod qp;
pub mod qp_control;
pub mod report;
pub mod robot_model;
pub mod sim;
pub mod task_space;
