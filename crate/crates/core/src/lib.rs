//! Beam-aware density resampling of spinning-LiDAR point clouds, a dense
//! occupancy autoencoder for self-supervised scene restoration, and a
//! per-query test-time adaptation loop built on top of it.

pub mod beams;
pub mod cli;
pub mod config;
pub mod error;
pub mod geom;
pub mod io;
pub mod pdda;
pub mod report;
pub mod restore;
pub mod rng;
pub mod synth;
pub mod tta;
pub mod voxel;

pub use error::{Error, Result};
