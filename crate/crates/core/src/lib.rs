//! Trusted, strictly monotonic timestamps served by a trio of clock nodes
//! that re-validate each other after every interruption.

pub mod calibration;
pub mod external;
pub mod guard;
pub mod host;
pub mod node;
pub mod service;
pub mod sim;
pub mod time;
pub mod wire;
