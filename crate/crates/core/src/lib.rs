//! Unsupervised object discovery, verification, tracking and dense 3D
//! reconstruction on RGBD sequences, with a deterministic synthetic scene
//! simulator in place of a physical robot and sensor.

pub mod discovery;
pub mod geometry;
pub mod image;
pub mod pipeline;
pub mod reconstruction;
pub mod regions;
pub mod scene_sim;
pub mod tracking2d;
pub mod tracking3d;
pub mod verification;
