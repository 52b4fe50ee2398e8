//! Rigid 3D tracking: ICP+RGB pose estimation between oriented colored
//! clouds (kd-tree association) or against raycast model views (projective
//! association), used both per object and for dominant-scene camera
//! tracking.

mod cloud;
mod icp;
mod kdtree;

pub use cloud::{cloud_from_raycast, make_cloud, OrientedColoredCloud, DEFAULT_MIN_POINTS};
pub use icp::{icp_rgb, icp_rgb_frame_to_model, IcpParams, IcpResult};
pub use kdtree::KdTree;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Tracking3dError {
    #[error("too few valid points: {got} < {min}")]
    TooFewPoints { got: usize, min: usize },
    #[error("cloud has no usable points or correspondences")]
    EmptyCloud,
    #[error("pose estimate diverged: mean residual {residual} m")]
    Diverged { residual: f64 },
    #[error("degenerate geometry: normal-equation conditioning {conditioning:.3e}")]
    Degenerate { conditioning: f64 },
}
