//! Oriented, intensity-carrying point clouds built from depth images or
//! raycast model views.

use super::Tracking3dError;
use crate::geometry::{backproject, CameraIntrinsics, Pixel};
use crate::image::{DepthImage, GrayImage, Mask};
use crate::reconstruction::Raycast;
use nalgebra::Vector3;

/// Camera-frame points with unit normals (oriented toward the camera) and
/// grayscale intensities in [0, 1].
#[derive(Debug, Clone, Default)]
pub struct OrientedColoredCloud {
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub intensities: Vec<f64>,
}

impl OrientedColoredCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Apply a rigid transform to points and normals.
    pub fn transformed(&self, pose: &crate::geometry::Pose) -> Self {
        Self {
            points: self.points.iter().map(|p| pose.transform(*p)).collect(),
            normals: self.normals.iter().map(|n| pose.rotate(*n)).collect(),
            intensities: self.intensities.clone(),
        }
    }
}

pub const DEFAULT_MIN_POINTS: usize = 100;

/// Back-project masked valid pixels into an oriented cloud. Normals come
/// from central differences of neighboring back-projections and are oriented
/// toward the camera; pixels without enough valid neighbors are skipped.
pub fn make_cloud(
    depth: &DepthImage,
    gray: &GrayImage,
    mask: Option<&Mask>,
    k: &CameraIntrinsics,
    min_points: usize,
) -> Result<OrientedColoredCloud, Tracking3dError> {
    let (w, h) = (depth.width, depth.height);
    let point_at = |x: usize, y: usize| -> Option<Vector3<f64>> {
        let d = *depth.get(x, y) as f64;
        if d <= 0.0 {
            return None;
        }
        backproject(Pixel::new(x as f64, y as f64), d, k).ok()
    };
    let mut cloud = OrientedColoredCloud::default();
    for y in 0..h {
        for x in 0..w {
            if let Some(m) = mask {
                if !*m.get(x, y) {
                    continue;
                }
            }
            let Some(p) = point_at(x, y) else { continue };
            // Central differences with one-sided fallback at borders/holes.
            let dx = match (
                (x + 1 < w).then(|| point_at(x + 1, y)).flatten(),
                (x > 0).then(|| point_at(x - 1, y)).flatten(),
            ) {
                (Some(a), Some(b)) => Some(a - b),
                (Some(a), None) => Some(a - p),
                (None, Some(b)) => Some(p - b),
                (None, None) => None,
            };
            let dy = match (
                (y + 1 < h).then(|| point_at(x, y + 1)).flatten(),
                (y > 0).then(|| point_at(x, y - 1)).flatten(),
            ) {
                (Some(a), Some(b)) => Some(a - b),
                (Some(a), None) => Some(a - p),
                (None, Some(b)) => Some(p - b),
                (None, None) => None,
            };
            let (Some(dx), Some(dy)) = (dx, dy) else {
                continue;
            };
            let mut n = dx.cross(&dy);
            let norm = n.norm();
            if norm < 1e-12 {
                continue;
            }
            n /= norm;
            // Toward the camera: the viewing ray is p itself.
            if n.dot(&p) > 0.0 {
                n = -n;
            }
            cloud.points.push(p);
            cloud.normals.push(n);
            cloud.intensities.push(*gray.get(x, y) as f64);
        }
    }
    if cloud.len() < min_points {
        return Err(Tracking3dError::TooFewPoints {
            got: cloud.len(),
            min: min_points,
        });
    }
    Ok(cloud)
}

/// Cloud from a raycast model view: the raycast already carries camera-frame
/// normals, so they are reused directly.
pub fn cloud_from_raycast(
    rc: &Raycast,
    k: &CameraIntrinsics,
    min_points: usize,
) -> Result<OrientedColoredCloud, Tracking3dError> {
    let mut cloud = OrientedColoredCloud::default();
    for y in 0..rc.depth.height {
        for x in 0..rc.depth.width {
            if !*rc.valid.get(x, y) {
                continue;
            }
            let d = *rc.depth.get(x, y) as f64;
            let Ok(p) = backproject(Pixel::new(x as f64, y as f64), d, k) else {
                continue;
            };
            let nr = rc.normals.get(x, y);
            let n = Vector3::new(nr[0] as f64, nr[1] as f64, nr[2] as f64);
            if n.norm() < 0.5 {
                continue;
            }
            cloud.points.push(p);
            cloud.normals.push(n.normalize());
            cloud.intensities.push(*rc.gray.get(x, y) as f64);
        }
    }
    if cloud.len() < min_points {
        return Err(Tracking3dError::TooFewPoints {
            got: cloud.len(),
            min: min_points,
        });
    }
    Ok(cloud)
}
