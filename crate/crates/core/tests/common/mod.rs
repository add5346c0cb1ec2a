//! Helpers shared by the integration tests and the acceptance harness.

#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;
