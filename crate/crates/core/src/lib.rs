//! Cycle-level model of a tile-based streaming digital CIM accelerator for
//! multimodal attention.

pub mod cim;
pub mod config;
pub mod energy;
pub mod fixed;
pub mod harness;
pub mod operands;
pub mod reference;
pub mod schedule;
pub mod sim;
pub mod trancim;
pub mod workload;
