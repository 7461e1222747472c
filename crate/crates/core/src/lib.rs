#![cfg_attr(not(test), no_std)]
extern crate alloc;

pub mod cluster;
pub mod config;
pub mod error;
pub mod exec;
pub mod monitor;
pub mod node;
pub mod overlay;
pub mod sql;
pub mod storage;
pub mod systable;
pub mod tablemgr;
pub mod wire;
