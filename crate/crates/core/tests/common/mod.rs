#![allow(dead_code)]

pub mod actgen;
pub mod autodiff;
pub mod dreamer;
pub mod gate;
pub mod geometry;
pub mod idm;
pub mod sysid;
