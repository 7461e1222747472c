//! Std companion of `h2o-core`: file persistence, socket mode, resource
//! sampling and the command-line front end.

pub mod cli;
pub mod client;
pub mod fsdisk;
pub mod net;
pub mod sampler;
