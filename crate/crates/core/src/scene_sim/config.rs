//! One-file TOML description of a scene: camera, geometry, trajectory and
//! manipulation script.

use super::{
    Action, Checker, GroundPlane, Lighting, ManipulationScript, Motion, PlanePatch, Scene,
    SceneObject, Shape, SimError,
};
use crate::geometry::{CameraIntrinsics, Pose};
use nalgebra::Vector3;
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFileRaw {
    camera: CameraRaw,
    #[serde(default)]
    render: RenderRaw,
    plane: Option<PlaneRaw>,
    #[serde(default, rename = "object")]
    objects: Vec<ObjectRaw>,
    trajectory: TrajectoryRaw,
    #[serde(default, rename = "action")]
    actions: Vec<ActionRaw>,
}

#[derive(Debug, Deserialize)]
struct CameraRaw {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

#[derive(Debug, Deserialize)]
#[serde(default)]
struct RenderRaw {
    light_dir: [f64; 3],
    ambient: f64,
    diffuse: f64,
    background: [u8; 3],
    depth_sigma: f64,
    seed: u64,
}

impl Default for RenderRaw {
    fn default() -> Self {
        let l = Lighting::default();
        Self {
            light_dir: [l.direction.x, l.direction.y, l.direction.z],
            ambient: l.ambient,
            diffuse: l.diffuse,
            background: [24, 24, 32],
            depth_sigma: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Deserialize)]
struct PlaneRaw {
    #[serde(default)]
    height: f64,
    albedo: [u8; 3],
    checker_cell: Option<f64>,
    checker_albedo: Option<[u8; 3]>,
    #[serde(default, rename = "patch")]
    patches: Vec<PatchRaw>,
}

#[derive(Debug, Deserialize)]
struct PatchRaw {
    center: [f64; 2],
    half_size: [f64; 2],
    albedo: [u8; 3],
}

#[derive(Debug, Deserialize)]
struct ObjectRaw {
    id: String,
    shape: String,
    extents: Option<[f64; 3]>,
    radius: Option<f64>,
    position: [f64; 3],
    #[serde(default)]
    axis_angle: [f64; 3],
    albedo: [u8; 3],
    checker_cell: Option<f64>,
    checker_albedo: Option<[u8; 3]>,
}

#[derive(Debug, Deserialize)]
struct TrajectoryRaw {
    #[serde(rename = "type")]
    kind: String,
    frames: usize,
    #[serde(default)]
    eye: [f64; 3],
    #[serde(default)]
    target: [f64; 3],
    radius: Option<f64>,
    height: Option<f64>,
    start_angle_deg: Option<f64>,
    sweep_deg: Option<f64>,
    #[serde(default, rename = "keyframe")]
    keyframes: Vec<PoseRaw>,
}

#[derive(Debug, Deserialize)]
struct PoseRaw {
    position: [f64; 3],
    #[serde(default)]
    axis_angle: [f64; 3],
    /// When set, the pose is built by looking from `position` at this point.
    look_at: Option<[f64; 3]>,
}

impl PoseRaw {
    fn to_pose(&self) -> Pose {
        let t = Vector3::from(self.position);
        match self.look_at {
            Some(at) => Pose::look_at(t, Vector3::from(at), Vector3::new(0.0, 0.0, 1.0)),
            None => {
                let aa = Vector3::from(self.axis_angle);
                Pose::new(crate::geometry::so3_exp(aa), t)
            }
        }
    }
}

#[derive(Debug, Deserialize)]
struct ActionRaw {
    object: String,
    start: usize,
    end: usize,
    poke: Option<[f64; 3]>,
    #[serde(default, rename = "grasp")]
    grasp: Vec<PoseRaw>,
}

/// A fully parsed scene file ready for sequence generation.
#[derive(Debug, Clone)]
pub struct SceneFile {
    pub scene: Scene,
    pub intrinsics: CameraIntrinsics,
    pub trajectory: Vec<Pose>,
    pub script: ManipulationScript,
}

pub fn parse_scene_str(text: &str) -> Result<SceneFile, SimError> {
    let raw: SceneFileRaw =
        toml::from_str(text).map_err(|e| SimError::InvalidScene(e.to_string()))?;
    build(raw)
}

pub fn load_scene_file(path: impl AsRef<std::path::Path>) -> Result<SceneFile, SimError> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| SimError::InvalidScene(format!("{}: {e}", path.as_ref().display())))?;
    parse_scene_str(&text)
}

fn build(raw: SceneFileRaw) -> Result<SceneFile, SimError> {
    let intrinsics = CameraIntrinsics::new(
        raw.camera.fx,
        raw.camera.fy,
        raw.camera.cx,
        raw.camera.cy,
        raw.camera.width,
        raw.camera.height,
    )
    .map_err(|e| SimError::InvalidScene(e.to_string()))?;

    let plane = raw.plane.map(|p| GroundPlane {
        height: p.height,
        albedo: p.albedo,
        checker: checker(p.checker_cell, p.checker_albedo),
        patches: p
            .patches
            .into_iter()
            .map(|pa| PlanePatch {
                center: pa.center,
                half_size: pa.half_size,
                albedo: pa.albedo,
            })
            .collect(),
    });

    let mut objects = Vec::new();
    for o in raw.objects {
        let shape = match o.shape.as_str() {
            "box" => {
                let e = o.extents.ok_or_else(|| {
                    SimError::InvalidScene(format!("object `{}`: box needs extents", o.id))
                })?;
                if e.iter().any(|&v| v <= 0.0) {
                    return Err(SimError::InvalidScene(format!(
                        "object `{}`: extents must be positive",
                        o.id
                    )));
                }
                Shape::Box {
                    extents: Vector3::from(e),
                }
            }
            "sphere" => {
                let r = o.radius.ok_or_else(|| {
                    SimError::InvalidScene(format!("object `{}`: sphere needs radius", o.id))
                })?;
                if r <= 0.0 {
                    return Err(SimError::InvalidScene(format!(
                        "object `{}`: radius must be positive",
                        o.id
                    )));
                }
                Shape::Sphere { radius: r }
            }
            other => {
                return Err(SimError::InvalidScene(format!(
                    "object `{}`: unknown shape `{other}`",
                    o.id
                )))
            }
        };
        objects.push(SceneObject {
            id: o.id,
            shape,
            pose: Pose::new(
                crate::geometry::so3_exp(Vector3::from(o.axis_angle)),
                Vector3::from(o.position),
            ),
            albedo: o.albedo,
            checker: checker(o.checker_cell, o.checker_albedo),
        });
    }

    let trajectory = match raw.trajectory.kind.as_str() {
        "static" => super::trajectory::static_pose(
            Pose::look_at(
                Vector3::from(raw.trajectory.eye),
                Vector3::from(raw.trajectory.target),
                Vector3::new(0.0, 0.0, 1.0),
            ),
            raw.trajectory.frames,
        ),
        "orbit" => super::trajectory::orbit(
            Vector3::from(raw.trajectory.target),
            raw.trajectory.radius.unwrap_or(0.5),
            raw.trajectory.height.unwrap_or(0.6),
            raw.trajectory.start_angle_deg.unwrap_or(-90.0).to_radians(),
            raw.trajectory.sweep_deg.unwrap_or(30.0).to_radians(),
            raw.trajectory.frames,
        ),
        "keyframes" => {
            if raw.trajectory.keyframes.is_empty() {
                return Err(SimError::InvalidScene(
                    "keyframes trajectory needs at least one keyframe".into(),
                ));
            }
            let poses: Vec<Pose> = raw.trajectory.keyframes.iter().map(|p| p.to_pose()).collect();
            super::trajectory::keyframes(&poses, raw.trajectory.frames)
        }
        other => {
            return Err(SimError::InvalidScene(format!(
                "unknown trajectory type `{other}`"
            )))
        }
    };
    if trajectory.is_empty() {
        return Err(SimError::EmptyTrajectory);
    }

    let mut actions = Vec::new();
    for a in raw.actions {
        let motion = match (a.poke, a.grasp.is_empty()) {
            (Some(t), true) => Motion::Poke {
                translation: Vector3::from(t),
            },
            (None, false) => Motion::Grasp {
                keyframes: a.grasp.iter().map(|p| p.to_pose()).collect(),
            },
            _ => {
                return Err(SimError::InvalidScene(format!(
                    "action on `{}` must set exactly one of poke / grasp",
                    a.object
                )))
            }
        };
        actions.push(Action {
            start_frame: a.start,
            end_frame: a.end,
            object_id: a.object,
            motion,
        });
    }
    let script = ManipulationScript { actions };

    let scene = Scene {
        plane,
        objects,
        background: raw.render.background,
        light: Lighting {
            direction: Vector3::from(raw.render.light_dir),
            ambient: raw.render.ambient,
            diffuse: raw.render.diffuse,
        },
        depth_sigma: raw.render.depth_sigma,
        seed: raw.render.seed,
    };
    script.validate(&scene.objects)?;

    Ok(SceneFile {
        scene,
        intrinsics,
        trajectory,
        script,
    })
}

fn checker(cell: Option<f64>, albedo: Option<[u8; 3]>) -> Option<Checker> {
    match (cell, albedo) {
        (Some(cell), Some(albedo)) => Some(Checker { cell, albedo }),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
[camera]
fx = 130.0
fy = 130.0
cx = 80.0
cy = 60.0
width = 160
height = 120

[render]
seed = 9

[plane]
albedo = [120, 118, 115]

[[plane.patch]]
center = [0.12, 0.05]
half_size = [0.05, 0.035]
albedo = [235, 235, 230]

[[object]]
id = "red_box"
shape = "box"
extents = [0.09, 0.07, 0.05]
position = [-0.08, 0.02, 0.025]
albedo = [200, 40, 35]

[[object]]
id = "ball"
shape = "sphere"
radius = 0.03
position = [0.05, -0.09, 0.03]
albedo = [40, 80, 200]

[trajectory]
type = "orbit"
frames = 20
target = [0.0, 0.0, 0.0]
radius = 0.45
height = 0.6
sweep_deg = 25.0

[[action]]
object = "red_box"
start = 10
end = 16
poke = [0.1, 0.0, 0.0]
"#;

    #[test]
    fn parses_full_scene() {
        let sf = parse_scene_str(EXAMPLE).unwrap();
        assert_eq!(sf.scene.objects.len(), 2);
        assert_eq!(sf.trajectory.len(), 20);
        assert_eq!(sf.script.actions.len(), 1);
        assert_eq!(sf.intrinsics.width, 160);
        assert_eq!(sf.scene.plane.as_ref().unwrap().patches.len(), 1);
    }

    #[test]
    fn rejects_unknown_action_target() {
        let bad = EXAMPLE.replace("object = \"red_box\"\nstart", "object = \"nope\"\nstart");
        assert!(matches!(
            parse_scene_str(&bad),
            Err(SimError::ScriptReferencesUnknownObject(_))
        ));
    }

    #[test]
    fn rejects_bad_shape() {
        let bad = EXAMPLE.replace("shape = \"sphere\"", "shape = \"torus\"");
        assert!(matches!(parse_scene_str(&bad), Err(SimError::InvalidScene(_))));
    }
}
