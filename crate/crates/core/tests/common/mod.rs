//! Test support shared by the integration tests.
#![allow(dead_code)]

pub mod gen;
pub mod golden;
pub mod props;
pub mod refx86;
