//! Simulation and control library for teleoperating a manipulator mounted on
//! a prismatic torso lift.

pub mod autodiff;
pub mod config;
pub mod coordination;
pub mod ik;
pub mod kinematics;
pub mod metrics;
pub mod operator;
pub mod server;
pub mod sim;
pub mod stats;
pub mod task;
