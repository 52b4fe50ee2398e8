//! Deterministic synthetic RGBD sequence generator with scripted object
//! manipulation, standing in for the robot and sensor. Supplies analytic
//! ground truth (masks, backward flow, poses) for every downstream test.

mod config;
mod render;

pub use config::{load_scene_file, parse_scene_str, SceneFile};
pub use render::{hit_object, render_frame, HitGrid, Lighting, RenderedFrame, HIT_NONE, HIT_PLANE};

use crate::geometry::{backproject, project, CameraIntrinsics, Pixel, Point3, Pose};
use crate::image::{FlowField, Grid, LabelImage, Mask, RgbdFrame};
use nalgebra::Vector3;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("script references unknown object `{0}`")]
    ScriptReferencesUnknownObject(String),
    #[error("actions for object `{0}` overlap in frames {1}..{2}")]
    OverlappingActions(String, usize, usize),
    #[error("action for `{0}` has empty frame range")]
    EmptyActionRange(String),
    #[error("trajectory must contain at least one pose")]
    EmptyTrajectory,
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

/// Two-tone procedural albedo pattern keyed on floor coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Checker {
    /// Cell size in meters.
    pub cell: f64,
    /// Albedo of the alternate cells.
    pub albedo: [u8; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Axis-aligned box (in its own frame) with full side lengths in meters.
    Box { extents: Vector3<f64> },
    Sphere { radius: f64 },
}

impl Shape {
    /// Conservative bounding-sphere radius in the object frame.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            Shape::Box { extents } => extents.norm() * 0.5,
            Shape::Sphere { radius } => *radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub id: String,
    pub shape: Shape,
    /// Initial world pose.
    pub pose: Pose,
    pub albedo: [u8; 3],
    pub checker: Option<Checker>,
}

/// Albedo-only rectangle painted onto the ground plane (no geometry).
#[derive(Debug, Clone, PartialEq)]
pub struct PlanePatch {
    pub center: [f64; 2],
    pub half_size: [f64; 2],
    pub albedo: [u8; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundPlane {
    /// World z of the plane; its normal is +z.
    pub height: f64,
    pub albedo: [u8; 3],
    pub checker: Option<Checker>,
    pub patches: Vec<PlanePatch>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Motion {
    /// Rigid translation interpolated linearly over the frame range.
    Poke { translation: Vector3<f64> },
    /// Absolute pose keyframes spread evenly over the frame range and
    /// interpolated per frame.
    Grasp { keyframes: Vec<Pose> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub start_frame: usize,
    pub end_frame: usize,
    pub object_id: String,
    pub motion: Motion,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ManipulationScript {
    pub actions: Vec<Action>,
}

impl ManipulationScript {
    pub fn validate(&self, objects: &[SceneObject]) -> Result<(), SimError> {
        for action in &self.actions {
            if !objects.iter().any(|o| o.id == action.object_id) {
                return Err(SimError::ScriptReferencesUnknownObject(
                    action.object_id.clone(),
                ));
            }
            if action.end_frame <= action.start_frame {
                return Err(SimError::EmptyActionRange(action.object_id.clone()));
            }
        }
        for (i, a) in self.actions.iter().enumerate() {
            for b in &self.actions[i + 1..] {
                if a.object_id == b.object_id
                    && a.start_frame < b.end_frame
                    && b.start_frame < a.end_frame
                {
                    return Err(SimError::OverlappingActions(
                        a.object_id.clone(),
                        b.start_frame.max(a.start_frame),
                        b.end_frame.min(a.end_frame),
                    ));
                }
            }
        }
        Ok(())
    }

    /// First frame at which any scripted motion starts.
    pub fn first_motion_frame(&self) -> Option<usize> {
        self.actions.iter().map(|a| a.start_frame).min()
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub plane: Option<GroundPlane>,
    pub objects: Vec<SceneObject>,
    pub background: [u8; 3],
    pub light: Lighting,
    /// Std-dev of optional zero-mean Gaussian depth noise in meters.
    pub depth_sigma: f64,
    pub seed: u64,
}

impl Scene {
    /// World pose of object `idx` at the given frame, with all scripted
    /// actions up to that frame applied in order.
    pub fn object_pose_at(&self, idx: usize, script: &ManipulationScript, frame: usize) -> Pose {
        let obj = &self.objects[idx];
        let mut actions: Vec<&Action> = script
            .actions
            .iter()
            .filter(|a| a.object_id == obj.id)
            .collect();
        actions.sort_by_key(|a| a.start_frame);
        let mut pose = obj.pose;
        for action in actions {
            if frame <= action.start_frame {
                break;
            }
            let span = (action.end_frame - action.start_frame) as f64;
            let alpha = ((frame - action.start_frame) as f64 / span).min(1.0);
            pose = apply_motion(&pose, &action.motion, alpha);
        }
        pose
    }

    fn resolved_objects(&self, script: &ManipulationScript, frame: usize) -> Vec<(&SceneObject, Pose)> {
        self.objects
            .iter()
            .enumerate()
            .map(|(i, o)| (o, self.object_pose_at(i, script, frame)))
            .collect()
    }
}

fn apply_motion(base: &Pose, motion: &Motion, alpha: f64) -> Pose {
    match motion {
        Motion::Poke { translation } => Pose {
            rotation: base.rotation,
            translation: base.translation + translation * alpha,
        },
        Motion::Grasp { keyframes } => {
            if keyframes.is_empty() {
                return *base;
            }
            if alpha >= 1.0 {
                return *keyframes.last().unwrap();
            }
            // Segments: base -> kf[0] -> kf[1] -> ...
            let segments = keyframes.len() as f64;
            let pos = alpha * segments;
            let seg = (pos.floor() as usize).min(keyframes.len() - 1);
            let t = pos - seg as f64;
            let from = if seg == 0 { base } else { &keyframes[seg - 1] };
            from.interpolate(&keyframes[seg], t)
        }
    }
}

/// Analytic per-frame ground truth for a generated sequence.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Per-frame label image: 0 = background/plane, i+1 = object i.
    pub masks: Vec<LabelImage>,
    /// Backward flow for frames 1..; `flows[0]` is empty (all invalid).
    pub flows: Vec<FlowField>,
    /// `poses[frame][object]` world pose.
    pub poses: Vec<Vec<Pose>>,
    /// Camera world pose per frame.
    pub camera: Vec<Pose>,
}

impl GroundTruth {
    pub fn object_mask(&self, frame: usize, object_idx: usize) -> Mask {
        let labels = &self.masks[frame];
        let want = object_idx as u32 + 1;
        let mut m = Mask::new(labels.width, labels.height);
        for (i, &l) in labels.data.iter().enumerate() {
            m.data[i] = l == want;
        }
        m
    }
}

/// Render a full sequence plus analytic ground truth.
pub fn generate_sequence(
    scene: &Scene,
    camera_trajectory: &[Pose],
    script: &ManipulationScript,
    k: &CameraIntrinsics,
) -> Result<(Vec<RgbdFrame>, GroundTruth), SimError> {
    if camera_trajectory.is_empty() {
        return Err(SimError::EmptyTrajectory);
    }
    script.validate(&scene.objects)?;

    let rendered: Vec<RenderedFrame> = camera_trajectory
        .par_iter()
        .enumerate()
        .map(|(f, cam)| {
            let objects = scene.resolved_objects(script, f);
            let mut rng = ChaCha8Rng::seed_from_u64(scene.seed.wrapping_add(f as u64 * 0x9e37));
            let noise = if scene.depth_sigma > 0.0 {
                Some((&mut rng, scene.depth_sigma))
            } else {
                None
            };
            render_frame(
                scene.plane.as_ref(),
                &objects,
                cam,
                k,
                &scene.light,
                scene.background,
                f,
                noise,
            )
        })
        .collect();

    let poses: Vec<Vec<Pose>> = (0..camera_trajectory.len())
        .map(|f| {
            (0..scene.objects.len())
                .map(|i| scene.object_pose_at(i, script, f))
                .collect()
        })
        .collect();

    let masks: Vec<LabelImage> = rendered
        .iter()
        .map(|r| {
            let mut labels: LabelImage = Grid::new(r.hits.width, r.hits.height);
            for (i, &h) in r.hits.data.iter().enumerate() {
                if h >= 2 {
                    labels.data[i] = (h - 1) as u32; // object idx + 1
                }
            }
            labels
        })
        .collect();

    let flows: Vec<FlowField> = (0..rendered.len())
        .into_par_iter()
        .map(|f| {
            if f == 0 {
                FlowField::new(k.width, k.height)
            } else {
                ground_truth_flow(
                    &rendered[f],
                    &rendered[f - 1],
                    &camera_trajectory[f],
                    &camera_trajectory[f - 1],
                    &poses[f],
                    &poses[f - 1],
                    k,
                )
            }
        })
        .collect();

    let gt = GroundTruth {
        masks,
        flows,
        poses,
        camera: camera_trajectory.to_vec(),
    };
    Ok((rendered.into_iter().map(|r| r.frame).collect(), gt))
}

/// Backward flow for frame `cur`: where each visible surface point projected
/// in the previous frame. Valid only where the point was genuinely visible
/// at t-1 (same surface under the whole bilinear stencil, matching depth).
fn ground_truth_flow(
    cur: &RenderedFrame,
    prev: &RenderedFrame,
    cam_cur: &Pose,
    cam_prev: &Pose,
    poses_cur: &[Pose],
    poses_prev: &[Pose],
    k: &CameraIntrinsics,
) -> FlowField {
    let mut flow = FlowField::new(k.width, k.height);
    let prev_cam_inv = cam_prev.invert();
    for y in 0..k.height {
        for x in 0..k.width {
            let id = *cur.hits.get(x, y);
            if id == HIT_NONE {
                continue;
            }
            let d = *cur.frame.depth.get(x, y) as f64;
            let Ok(p_cam) = backproject(Pixel::new(x as f64, y as f64), d, k) else {
                continue;
            };
            let p_world = cam_cur.transform(p_cam);
            // Undo the object's motion between t-1 and t.
            let p_world_prev = if id >= 2 {
                let oi = (id - 2) as usize;
                let motion = poses_prev[oi].compose(&poses_cur[oi].invert());
                motion.transform(p_world)
            } else {
                p_world
            };
            let p_prev_cam = prev_cam_inv.transform(p_world_prev);
            if p_prev_cam.z <= 0.0 {
                continue;
            }
            let Ok(px_prev) = project(p_prev_cam, k) else {
                continue;
            };
            if !k.contains(px_prev) {
                continue;
            }
            // Visibility: the bilinear stencil at the previous location must
            // belong to the same surface, and the stored depth must agree.
            let x0 = px_prev.u.floor() as usize;
            let y0 = px_prev.v.floor() as usize;
            let x1 = (x0 + 1).min(k.width - 1);
            let y1 = (y0 + 1).min(k.height - 1);
            let same_surface = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)]
                .iter()
                .all(|&(sx, sy)| *prev.hits.get(sx, sy) == id);
            if !same_surface {
                continue;
            }
            let nearest = (px_prev.u.round() as usize, px_prev.v.round() as usize);
            let stored = *prev.frame.depth.get(nearest.0.min(k.width - 1), nearest.1.min(k.height - 1)) as f64;
            if (stored - p_prev_cam.z).abs() > 0.01 * p_prev_cam.z.max(0.1) + 0.005 {
                continue;
            }
            let i = flow.u.idx(x, y);
            // Snap sub-nanopixel displacements so a static camera yields
            // exactly zero flow.
            let snap = |v: f64| if v.abs() < 1e-9 { 0.0 } else { v as f32 };
            flow.u.data[i] = snap(px_prev.u - x as f64);
            flow.v.data[i] = snap(px_prev.v - y as f64);
            flow.valid.data[i] = true;
        }
    }
    flow
}

/// Camera trajectory helpers used by scene configs and tests.
pub mod trajectory {
    use super::*;

    /// `frames` copies of one pose.
    pub fn static_pose(pose: Pose, frames: usize) -> Vec<Pose> {
        vec![pose; frames]
    }

    /// Orbit around `target` at constant height, always looking at it.
    pub fn orbit(
        target: Vector3<f64>,
        radius: f64,
        height: f64,
        start_angle: f64,
        sweep: f64,
        frames: usize,
    ) -> Vec<Pose> {
        (0..frames)
            .map(|f| {
                let t = if frames > 1 {
                    f as f64 / (frames - 1) as f64
                } else {
                    0.0
                };
                let a = start_angle + sweep * t;
                let eye = target + Vector3::new(radius * a.cos(), radius * a.sin(), height);
                Pose::look_at(eye, target, Vector3::new(0.0, 0.0, 1.0))
            })
            .collect()
    }

    /// Piecewise interpolation through pose keyframes.
    pub fn keyframes(poses: &[Pose], frames: usize) -> Vec<Pose> {
        assert!(!poses.is_empty());
        if poses.len() == 1 || frames == 1 {
            return vec![poses[0]; frames];
        }
        (0..frames)
            .map(|f| {
                let t = f as f64 / (frames - 1) as f64 * (poses.len() - 1) as f64;
                let seg = (t.floor() as usize).min(poses.len() - 2);
                poses[seg].interpolate(&poses[seg + 1], t - seg as f64)
            })
            .collect()
    }
}

/// Convenience: back-projected world point of a pixel given its depth.
pub fn pixel_to_world(
    px: Pixel,
    depth: f64,
    camera: &Pose,
    k: &CameraIntrinsics,
) -> Option<Point3> {
    backproject(px, depth, k).ok().map(|p| camera.transform(p))
}
