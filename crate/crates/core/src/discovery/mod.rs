//! Appearance-based spatio-temporal candidate object discovery: optical flow
//! links video pixels across frames, an affinity graph over the sampled
//! lattice is spectrally embedded and clustered into 3D superpixels, which a
//! color merge condenses into candidate regions on the window's last frame.

mod affinity;
mod flow;
mod kmeans;
mod merge;
mod spectral;

pub use affinity::{
    build_affinity, normalized_affinity, AffinityGraph, AffinityParams, GraphNode, SparseMatrix,
};
pub use flow::{estimate_flow, FlowParams};
pub use kmeans::cluster_superpixels;
pub use merge::{candidates_from_labels, merge_labels, CandidateContourSet};
pub use spectral::{principal_angle, spectral_embed, Embedding};

use crate::image::{FlowField, RgbdFrame};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("need at least two frames")]
    EmptySequence,
    #[error("sample count m={m} must exceed eigenvector count k={k}")]
    SampleTooSmall { m: usize, k: usize },
}

/// Tunables for the whole discovery stage. Field names double as the config
/// file keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscoveryParams {
    /// Pixel lattice subsampling stride (1 = dense).
    pub stride: usize,
    /// Intra-frame connection radius in pixels.
    pub radius_r: f64,
    /// Color similarity scale, 0-255 units.
    pub sigma_color: f64,
    /// Spatial similarity scale, pixels.
    pub sigma_dist: f64,
    /// Optional depth similarity scale in meters (extension; off by default).
    pub sigma_depth: Option<f64>,
    /// Number of leading eigenvectors.
    pub eig_k: usize,
    /// Nystrom sample size.
    pub sample_m: usize,
    /// k-means cluster count (superpixels).
    pub kmeans_k: usize,
    /// Mean-color merge threshold, 0-255 units.
    pub merge_tau: f64,
    /// Minimum candidate region size in pixels.
    pub min_region_px: usize,
    pub seed: u64,
}

impl Default for DiscoveryParams {
    fn default() -> Self {
        Self {
            stride: 2,
            radius_r: 5.0,
            sigma_color: 20.0,
            sigma_dist: 4.0,
            sigma_depth: None,
            eig_k: 20,
            sample_m: 800,
            kmeans_k: 60,
            merge_tau: 12.0,
            min_region_px: 50,
            seed: 0,
        }
    }
}

impl DiscoveryParams {
    fn affinity(&self) -> AffinityParams {
        AffinityParams {
            stride: self.stride,
            radius: self.radius_r,
            sigma_color: self.sigma_color,
            sigma_dist: self.sigma_dist,
            sigma_depth: self.sigma_depth,
        }
    }
}

/// Full discovery pass over a frame window; flow is estimated internally.
pub fn discover(
    frames: &[RgbdFrame],
    params: &DiscoveryParams,
) -> Result<CandidateContourSet, DiscoveryError> {
    if frames.len() < 2 {
        return Err(DiscoveryError::EmptySequence);
    }
    let flow_params = FlowParams::default();
    let flows: Vec<FlowField> = frames
        .windows(2)
        .map(|pair| estimate_flow(&pair[0], &pair[1], &flow_params))
        .collect::<Result<_, _>>()?;
    discover_with_flows(frames, &flows, params)
}

/// Discovery with precomputed backward flows (`flows[i]`: frame i+1 -> i);
/// lets tests inject simulator ground-truth flow.
pub fn discover_with_flows(
    frames: &[RgbdFrame],
    flows: &[FlowField],
    params: &DiscoveryParams,
) -> Result<CandidateContourSet, DiscoveryError> {
    let graph = build_affinity(frames, flows, &params.affinity())?;
    debug_assert!(graph.w.asymmetry() < 1e-9);
    let (l, kept) = normalized_affinity(&graph.w);
    let k = params.eig_k.min(l.n.saturating_sub(1)).max(1);
    let embedding = spectral_embed(&l, k, params.sample_m, params.seed)?;
    let kept_labels = cluster_superpixels(&embedding, params.kmeans_k, params.seed.wrapping_add(1));

    // Isolated nodes each get a private label; they end up in regions far
    // below min_region_px and drop out.
    let mut labels = vec![0u32; graph.nodes.len()];
    let mut next_private = params.kmeans_k as u32;
    let mut kept_iter = kept.iter().zip(&kept_labels).peekable();
    for (i, slot) in labels.iter_mut().enumerate() {
        match kept_iter.peek() {
            Some(&(&orig, &label)) if orig as usize == i => {
                *slot = label;
                kept_iter.next();
            }
            _ => {
                *slot = next_private;
                next_private += 1;
            }
        }
    }

    let merged = merge_labels(&graph, &labels, params.merge_tau);
    Ok(candidates_from_labels(
        &graph,
        &merged,
        frames,
        params.min_region_px,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use crate::image::{ColorImage, DepthImage, Mask};
    use crate::scene_sim::{
        self, trajectory, GroundPlane, Lighting, ManipulationScript, PlanePatch, Scene,
        SceneObject, Shape,
    };
    use nalgebra::Vector3;

    fn desk_k() -> CameraIntrinsics {
        CameraIntrinsics::new(130.0, 130.0, 80.0, 60.0, 160, 120).unwrap()
    }

    fn red_box_scene(with_patch: bool) -> Scene {
        let patches = if with_patch {
            vec![PlanePatch {
                center: [0.1, -0.06],
                half_size: [0.05, 0.04],
                albedo: [235, 235, 230],
            }]
        } else {
            vec![]
        };
        Scene {
            plane: Some(GroundPlane {
                height: 0.0,
                albedo: [120, 118, 115],
                checker: None,
                patches,
            }),
            objects: vec![SceneObject {
                id: "red_box".into(),
                shape: Shape::Box {
                    extents: Vector3::new(0.1, 0.08, 0.05),
                },
                pose: crate::geometry::Pose::from_translation(Vector3::new(-0.06, 0.04, 0.025)),
                albedo: [200, 40, 35],
                checker: None,
            }],
            background: [24, 24, 32],
            light: Lighting::default(),
            depth_sigma: 0.0,
            seed: 5,
        }
    }

    fn small_params() -> DiscoveryParams {
        DiscoveryParams {
            sample_m: 500,
            kmeans_k: 40,
            ..DiscoveryParams::default()
        }
    }

    #[test]
    fn red_box_discovered_with_high_iou() {
        let scene = red_box_scene(false);
        let traj = trajectory::orbit(
            Vector3::zeros(),
            0.4,
            0.55,
            -std::f64::consts::FRAC_PI_2,
            0.12,
            10,
        );
        let (frames, gt) =
            scene_sim::generate_sequence(&scene, &traj, &ManipulationScript::default(), &desk_k())
                .unwrap();
        let cands = discover(&frames, &small_params()).unwrap();
        assert!(!cands.regions.is_empty());
        let gt_mask = gt.object_mask(9, 0);
        let best = cands
            .regions
            .iter()
            .map(|r| r.mask.iou(&gt_mask))
            .fold(0.0f64, f64::max);
        assert!(best >= 0.8, "best IoU {best}");
    }

    #[test]
    fn uniform_gray_yields_no_candidates() {
        let (w, h) = (80, 60);
        let mut rgb = ColorImage::new(w, h);
        rgb.data.fill(127);
        let mut depth = DepthImage::new(w, h);
        depth.data.fill(1.0);
        let frames: Vec<_> = (0..5)
            .map(|i| crate::image::RgbdFrame {
                rgb: rgb.clone(),
                depth: depth.clone(),
                index: i,
            })
            .collect();
        let cands = discover(&frames, &small_params()).unwrap();
        assert!(cands.regions.is_empty());
    }

    #[test]
    fn painted_patch_appears_as_candidate() {
        let scene = red_box_scene(true);
        let traj = trajectory::orbit(
            Vector3::zeros(),
            0.4,
            0.55,
            -std::f64::consts::FRAC_PI_2,
            0.1,
            8,
        );
        let k = desk_k();
        let (frames, gt) =
            scene_sim::generate_sequence(&scene, &traj, &ManipulationScript::default(), &k)
                .unwrap();
        let cands = discover(&frames, &small_params()).unwrap();

        // Patch mask computed analytically: plane pixels whose world point
        // falls inside the painted rectangle.
        let last = frames.len() - 1;
        let cam = &gt.camera[last];
        let labels = &gt.masks[last];
        let mut patch_mask = Mask::new(k.width, k.height);
        for y in 0..k.height {
            for x in 0..k.width {
                if *labels.get(x, y) != 0 {
                    continue;
                }
                let d = *frames[last].depth.get(x, y) as f64;
                if d <= 0.0 {
                    continue;
                }
                if let Some(p) = scene_sim::pixel_to_world(
                    crate::geometry::Pixel::new(x as f64, y as f64),
                    d,
                    cam,
                    &k,
                ) {
                    if (p.x - 0.1).abs() <= 0.05 && (p.y - -0.06).abs() <= 0.04 {
                        patch_mask.set(x, y, true);
                    }
                }
            }
        }
        assert!(patch_mask.count() > 100, "patch out of view?");
        let best = cands
            .regions
            .iter()
            .map(|r| r.mask.iou(&patch_mask))
            .fold(0.0f64, f64::max);
        assert!(
            best >= 0.5,
            "appearance discovery must surface the painted patch, best IoU {best}"
        );
    }

    #[test]
    fn discover_is_deterministic() {
        let scene = red_box_scene(true);
        let traj = trajectory::orbit(
            Vector3::zeros(),
            0.4,
            0.55,
            -std::f64::consts::FRAC_PI_2,
            0.1,
            6,
        );
        let (frames, _) =
            scene_sim::generate_sequence(&scene, &traj, &ManipulationScript::default(), &desk_k())
                .unwrap();
        let a = discover(&frames, &small_params()).unwrap();
        let b = discover(&frames, &small_params()).unwrap();
        assert_eq!(a.to_label_image().data, b.to_label_image().data);
    }

    #[test]
    fn candidates_are_disjoint_and_big_enough() {
        let scene = red_box_scene(true);
        let traj = trajectory::orbit(
            Vector3::zeros(),
            0.4,
            0.55,
            -std::f64::consts::FRAC_PI_2,
            0.1,
            6,
        );
        let params = small_params();
        let (frames, _) =
            scene_sim::generate_sequence(&scene, &traj, &ManipulationScript::default(), &desk_k())
                .unwrap();
        let cands = discover(&frames, &params).unwrap();
        for (i, a) in cands.regions.iter().enumerate() {
            assert!(a.area >= params.min_region_px);
            for b in &cands.regions[i + 1..] {
                assert_eq!(a.mask.intersection_count(&b.mask), 0);
            }
        }
    }
}
