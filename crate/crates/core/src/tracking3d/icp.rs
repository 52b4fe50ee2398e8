//! Rigid pose estimation between oriented colored clouds or against a
//! raycast model view: point-to-plane geometry plus a tangent-plane
//! photometric term, minimized by Huber-weighted Gauss-Newton over
//! coarse-to-fine subsampling levels.

use super::cloud::OrientedColoredCloud;
use super::kdtree::KdTree;
use super::Tracking3dError;
use crate::geometry::{backproject, so3_exp, CameraIntrinsics, Pixel, Pose};
use crate::image::{DepthImage, GrayImage};
use crate::reconstruction::Raycast;
use nalgebra::{Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpParams {
    /// Weight of the photometric term relative to the geometric one.
    pub beta_rgb: f64,
    /// Huber threshold on point-to-plane residuals, meters.
    pub huber_delta_m: f64,
    /// Huber threshold on intensity residuals, 0-1 units.
    pub huber_delta_i: f64,
    /// Gauss-Newton iterations per level.
    pub max_iters: usize,
    /// Coarse-to-fine subsampling levels.
    pub pyramid_levels: usize,
    /// Mean geometric residual above this means divergence, meters.
    pub tau_fail_m: f64,
    /// Correspondences farther than this are dropped, meters.
    pub max_corr_dist_m: f64,
    /// Normal-equation conditioning limit before the problem counts as
    /// degenerate.
    pub max_conditioning: f64,
    /// Update norm below this stops the iteration.
    pub update_eps: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            beta_rgb: 0.1,
            huber_delta_m: 0.01,
            huber_delta_i: 0.1,
            max_iters: 30,
            pyramid_levels: 3,
            tau_fail_m: 0.05,
            max_corr_dist_m: 0.1,
            max_conditioning: 1e8,
            update_eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    /// Transform taking live-frame points into the reference frame.
    pub pose: Pose,
    pub iterations: usize,
    /// Mean absolute point-to-plane residual at the solution, meters.
    pub mean_geometric_residual: f64,
    /// (before, after) robust objective per accepted Gauss-Newton step.
    pub objective_trace: Vec<(f64, f64)>,
}

/// One reference correspondence: point, normal, intensity and tangent-plane
/// intensity gradient.
#[derive(Debug, Clone, Copy)]
struct RefPoint {
    p: Vector3<f64>,
    n: Vector3<f64>,
    i: f64,
    g: Vector3<f64>,
}

enum RefView<'a> {
    Cloud {
        tree: KdTree,
        cloud: &'a OrientedColoredCloud,
        grads: Vec<Vector3<f64>>,
        max_dist2: f64,
    },
    Projective {
        points: Vec<Option<RefPoint>>,
        width: usize,
        height: usize,
        k: CameraIntrinsics,
        max_dist2: f64,
    },
}

impl RefView<'_> {
    fn lookup(&self, q: &Vector3<f64>) -> Option<RefPoint> {
        match self {
            RefView::Cloud {
                tree,
                cloud,
                grads,
                max_dist2,
            } => {
                let (idx, d2) = tree.nearest(q)?;
                if d2 > *max_dist2 {
                    return None;
                }
                Some(RefPoint {
                    p: cloud.points[idx],
                    n: cloud.normals[idx],
                    i: cloud.intensities[idx],
                    g: grads[idx],
                })
            }
            RefView::Projective {
                points,
                width,
                height,
                k,
                max_dist2,
            } => {
                if q.z <= 0.0 {
                    return None;
                }
                let u = (k.fx * q.x / q.z + k.cx).round();
                let v = (k.fy * q.y / q.z + k.cy).round();
                if u < 0.0 || v < 0.0 || u >= *width as f64 || v >= *height as f64 {
                    return None;
                }
                let rp = points[v as usize * width + u as usize]?;
                ((rp.p - q).norm_squared() <= *max_dist2).then_some(rp)
            }
        }
    }
}

/// Tangent-plane intensity gradients by local least-squares fits over the
/// k nearest neighbors.
fn intensity_gradients(cloud: &OrientedColoredCloud, tree: &KdTree) -> Vec<Vector3<f64>> {
    const NEIGHBORS: usize = 8;
    const RIDGE: f64 = 1e-8;
    let mut grads = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        let p = cloud.points[i];
        let neighbors = tree.k_nearest(&p, NEIGHBORS + 1);
        let mut a = nalgebra::Matrix3::<f64>::zeros();
        let mut b = Vector3::zeros();
        for &(j, _) in &neighbors {
            if j == i {
                continue;
            }
            let dp = cloud.points[j] - p;
            let di = cloud.intensities[j] - cloud.intensities[i];
            a += dp * dp.transpose();
            b += dp * di;
        }
        a += nalgebra::Matrix3::identity() * RIDGE;
        let g = a.try_inverse().map_or_else(Vector3::zeros, |inv| inv * b);
        // Constrain to the tangent plane of the surface.
        let n = cloud.normals[i];
        grads.push(g - n * n.dot(&g));
    }
    grads
}

#[inline]
fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

#[inline]
fn huber_loss(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// ICP+RGB between two clouds: finds T with `T * live ~= ref`.
pub fn icp_rgb(
    reference: &OrientedColoredCloud,
    live: &OrientedColoredCloud,
    init: &Pose,
    params: &IcpParams,
) -> Result<IcpResult, Tracking3dError> {
    if reference.is_empty() || live.is_empty() {
        return Err(Tracking3dError::EmptyCloud);
    }
    let tree = KdTree::build(&reference.points);
    let grads = if params.beta_rgb > 0.0 {
        intensity_gradients(reference, &tree)
    } else {
        vec![Vector3::zeros(); reference.len()]
    };
    let view = RefView::Cloud {
        tree,
        cloud: reference,
        grads,
        max_dist2: params.max_corr_dist_m * params.max_corr_dist_m,
    };
    let live_pts: Vec<(Vector3<f64>, f64)> = live
        .points
        .iter()
        .zip(&live.intensities)
        .map(|(p, &i)| (*p, i))
        .collect();
    solve(&view, &live_pts, init, params)
}

/// ICP+RGB of a live depth/gray frame against a raycast model view, with
/// projective association (the frame-to-model default).
pub fn icp_rgb_frame_to_model(
    reference: &Raycast,
    live_depth: &DepthImage,
    live_gray: &GrayImage,
    k: &CameraIntrinsics,
    init: &Pose,
    params: &IcpParams,
) -> Result<IcpResult, Tracking3dError> {
    let (w, h) = (reference.depth.width, reference.depth.height);
    // Reference points with image-gradient-derived tangent gradients.
    let mut points: Vec<Option<RefPoint>> = vec![None; w * h];
    for y in 0..h {
        for x in 0..w {
            if !*reference.valid.get(x, y) {
                continue;
            }
            let d = *reference.depth.get(x, y) as f64;
            let Ok(p) = backproject(Pixel::new(x as f64, y as f64), d, k) else {
                continue;
            };
            let nr = reference.normals.get(x, y);
            let n = Vector3::new(nr[0] as f64, nr[1] as f64, nr[2] as f64);
            if n.norm() < 0.5 {
                continue;
            }
            // Intensity gradient in image space, pushed through the inverse
            // projection at depth d to a 3D direction.
            let gu = image_grad_x(&reference.gray, &reference.valid, x, y);
            let gv = image_grad_y(&reference.gray, &reference.valid, x, y);
            let gi = Vector3::new(
                gu * k.fx / d,
                gv * k.fy / d,
                -(gu * k.fx * p.x + gv * k.fy * p.y) / (d * d),
            );
            let g = gi - n * n.dot(&gi);
            points[y * w + x] = Some(RefPoint {
                p,
                n: n.normalize(),
                i: *reference.gray.get(x, y) as f64,
                g,
            });
        }
    }
    let view = RefView::Projective {
        points,
        width: w,
        height: h,
        k: *k,
        max_dist2: params.max_corr_dist_m * params.max_corr_dist_m,
    };
    let mut live_pts = Vec::new();
    for y in 0..live_depth.height {
        for x in 0..live_depth.width {
            let d = *live_depth.get(x, y) as f64;
            if d <= 0.0 {
                continue;
            }
            if let Ok(p) = backproject(Pixel::new(x as f64, y as f64), d, k) {
                live_pts.push((p, *live_gray.get(x, y) as f64));
            }
        }
    }
    if live_pts.is_empty() {
        return Err(Tracking3dError::EmptyCloud);
    }
    solve(&view, &live_pts, init, params)
}

fn spread_strides(levels: usize) -> Vec<usize> {
    // e.g. 3 levels -> [4, 2, 1].
    (0..levels).rev().map(|l| 1usize << l).collect()
}

/// Validity-aware intensity derivative along x (gray units per pixel).
fn image_grad_x(gray: &GrayImage, valid: &crate::image::Mask, x: usize, y: usize) -> f64 {
    let left = x > 0 && *valid.get(x - 1, y);
    let right = x + 1 < gray.width && *valid.get(x + 1, y);
    match (left, right) {
        (true, true) => (*gray.get(x + 1, y) as f64 - *gray.get(x - 1, y) as f64) * 0.5,
        (true, false) => *gray.get(x, y) as f64 - *gray.get(x - 1, y) as f64,
        (false, true) => *gray.get(x + 1, y) as f64 - *gray.get(x, y) as f64,
        (false, false) => 0.0,
    }
}

fn image_grad_y(gray: &GrayImage, valid: &crate::image::Mask, x: usize, y: usize) -> f64 {
    let up = y > 0 && *valid.get(x, y - 1);
    let down = y + 1 < gray.height && *valid.get(x, y + 1);
    match (up, down) {
        (true, true) => (*gray.get(x, y + 1) as f64 - *gray.get(x, y - 1) as f64) * 0.5,
        (true, false) => *gray.get(x, y) as f64 - *gray.get(x, y - 1) as f64,
        (false, true) => *gray.get(x, y + 1) as f64 - *gray.get(x, y) as f64,
        (false, false) => 0.0,
    }
}

fn solve(
    view: &RefView,
    live: &[(Vector3<f64>, f64)],
    init: &Pose,
    params: &IcpParams,
) -> Result<IcpResult, Tracking3dError> {
    let mut pose = *init;
    let mut trace = Vec::new();
    let mut iterations = 0usize;

    for &stride in &spread_strides(params.pyramid_levels.max(1)) {
        for _ in 0..params.max_iters {
            iterations += 1;
            // Assemble correspondences at the current pose.
            let mut pairs: Vec<(Vector3<f64>, f64, RefPoint)> = Vec::new();
            for (p, i) in live.iter().step_by(stride) {
                let q = pose.transform(*p);
                if let Some(rp) = view.lookup(&q) {
                    pairs.push((*p, *i, rp));
                }
            }
            if pairs.len() < 6 {
                return Err(Tracking3dError::EmptyCloud);
            }

            let objective = |t: &Pose| -> f64 {
                let mut e = 0.0;
                for (p, i, rp) in &pairs {
                    let q = t.transform(*p);
                    let rg = rp.n.dot(&(q - rp.p));
                    e += huber_loss(rg, params.huber_delta_m);
                    if params.beta_rgb > 0.0 {
                        let rc = rp.i + rp.g.dot(&(q - rp.p)) - i;
                        e += params.beta_rgb * huber_loss(rc, params.huber_delta_i);
                    }
                }
                e
            };
            let e_before = objective(&pose);

            // Normal equations with Huber IRLS weights.
            let mut hess = Matrix6::<f64>::zeros();
            let mut rhs = Vector6::<f64>::zeros();
            for (p, i, rp) in &pairs {
                let q = pose.transform(*p);
                let rg = rp.n.dot(&(q - rp.p));
                let wg = huber_weight(rg, params.huber_delta_m);
                let jg = jacobian_row(&q, &rp.n);
                hess += wg * jg * jg.transpose();
                rhs += wg * jg * rg;
                if params.beta_rgb > 0.0 {
                    let rc = rp.i + rp.g.dot(&(q - rp.p)) - i;
                    let wc = params.beta_rgb * huber_weight(rc, params.huber_delta_i);
                    let jc = jacobian_row(&q, &rp.g);
                    hess += wc * jc * jc.transpose();
                    rhs += wc * jc * rc;
                }
            }

            // Conditioning gate on the normal equations.
            let eig = nalgebra::SymmetricEigen::new(hess);
            let lmax = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
            let lmin = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
            if !(lmin > 0.0) || lmax / lmin > params.max_conditioning {
                return Err(Tracking3dError::Degenerate {
                    conditioning: if lmin > 0.0 { lmax / lmin } else { f64::INFINITY },
                });
            }

            let Some(chol) = hess.cholesky() else {
                return Err(Tracking3dError::Degenerate {
                    conditioning: f64::INFINITY,
                });
            };
            let mut delta = -chol.solve(&rhs);
            if delta.norm() < params.update_eps {
                trace.push((e_before, e_before));
                break;
            }
            // Damped acceptance: halve the step until the fixed-pair
            // objective does not increase.
            let mut accepted = false;
            for _ in 0..12 {
                let candidate = apply_twist(&pose, &delta);
                let e_after = objective(&candidate);
                if e_after <= e_before + 1e-12 {
                    pose = candidate;
                    trace.push((e_before, e_after));
                    accepted = true;
                    break;
                }
                delta *= 0.5;
            }
            if !accepted {
                trace.push((e_before, e_before));
                break;
            }
            if delta.norm() < params.update_eps {
                break;
            }
        }
    }

    // Final quality gate on the geometric residuals.
    let mut abs_sum = 0.0;
    let mut n = 0usize;
    for (p, _i) in live.iter() {
        let q = pose.transform(*p);
        if let Some(rp) = view.lookup(&q) {
            abs_sum += rp.n.dot(&(q - rp.p)).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Tracking3dError::EmptyCloud);
    }
    let mean_res = abs_sum / n as f64;
    if mean_res > params.tau_fail_m {
        return Err(Tracking3dError::Diverged {
            residual: mean_res,
        });
    }
    Ok(IcpResult {
        pose,
        iterations,
        mean_geometric_residual: mean_res,
        objective_trace: trace,
    })
}

/// d/d xi of vᵀ(exp(xi) q) at xi = 0, with xi = (translation, rotation).
#[inline]
fn jacobian_row(q: &Vector3<f64>, v: &Vector3<f64>) -> Vector6<f64> {
    let rot = q.cross(v);
    Vector6::new(v.x, v.y, v.z, rot.x, rot.y, rot.z)
}

/// Left-multiplicative update T <- exp(xi) * T.
fn apply_twist(pose: &Pose, xi: &Vector6<f64>) -> Pose {
    let t = Vector3::new(xi[0], xi[1], xi[2]);
    let omega = Vector3::new(xi[3], xi[4], xi[5]);
    let inc = Pose::new(so3_exp(omega), t);
    inc.compose(pose)
}
