//! Simulation of distance-based timing leakage on a tiled mesh NUCA chip,
//! with the attacks that exploit it and the defenses that close it.

pub mod agents;
pub mod attack;
pub mod classifier;
pub mod covert;
pub mod defense;
pub mod error;
pub mod experiments;
pub mod io;
pub mod keyrec;
pub mod machine;
pub mod profiler;
pub mod stats;
pub mod victims;

pub use error::{Error, Result};
