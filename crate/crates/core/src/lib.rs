//! EV ridepooling fleet simulator with pluggable charging control.

pub mod assignment;
pub mod charging;
pub mod cli;
pub mod clock;
pub mod control;
pub mod dispatch;
pub mod error;
pub mod ev;
pub mod network;
pub mod predictor;
pub mod reposition;
pub mod routing;
pub mod sim;
pub mod trips;

pub use error::{Error, Result};
