//! Iterative planning, control and model learning for underactuated robots.

pub mod controller;
pub mod dynamics;
pub mod error;
pub mod estimation;
pub mod gp;
pub mod learnloop;
pub mod pfl;
pub mod planner;

pub use error::{Error, Result};
