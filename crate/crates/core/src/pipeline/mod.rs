//! End-to-end orchestration: dominant-model initialization, exploration with
//! appearance discovery, then per-frame verification, 2D/3D tracking and
//! fusion of every verified object.

mod outputs;
mod registry;

pub use outputs::{write_run_outputs, RunOutput};
pub use registry::{load_registry, ObjectRegistry, TrackedObject};

use crate::discovery::{discover, CandidateContourSet, DiscoveryError, DiscoveryParams};
use crate::geometry::{CameraIntrinsics, Pixel, Pose};
use crate::image::{Grid, LabelImage, Mask, RgbdFrame};
use crate::reconstruction::{ReconError, TsdfVolume};
use crate::regions::{connected_components, Region};
use crate::tracking2d::{
    evolve_level_set, init_object_2d, match_contour, update_histograms, ContourMatch,
    LevelSetParams, MatchParams, Sdf2D, Tracking2dError,
};
use crate::tracking3d::{icp_rgb, icp_rgb_frame_to_model, make_cloud, IcpParams, Tracking3dError};
use crate::verification::{
    extract_contours, residual_image, verify_candidates, MatchTag, VerifyError,
};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("first frame has too few valid depth pixels ({0})")]
    InsufficientDepth(usize),
    #[error("dominant tracking lost at frame {frame}: {source}")]
    DominantTrackingLost {
        frame: usize,
        source: Tracking3dError,
    },
    #[error(transparent)]
    Discovery(#[from] DiscoveryError),
    #[error(transparent)]
    Recon(#[from] ReconError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Tracking2d(#[from] Tracking2dError),
    #[error("sequence is empty")]
    EmptySequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Explore,
    Manipulate,
}

/// All pipeline tunables; field names double as config keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    /// Frames of the exploration phase before manipulation starts.
    pub explore_frames: usize,
    /// Trailing frames fed to appearance discovery.
    pub discovery_window: usize,
    pub discovery: DiscoveryParams,
    /// Depth discrepancy threshold for the residual image, meters.
    pub tau_depth_m: f64,
    /// Gray discrepancy threshold (0-1 units).
    pub tau_gray: f64,
    /// Minimum residual contour size, pixels.
    pub d1_min_px: usize,
    /// Minimum IoU between a motion region and a candidate.
    pub tau_iou: f64,
    /// Keep motion regions with no matching candidate as new objects.
    pub keep_unmatched: bool,
    pub matching: MatchParams,
    pub level_set: LevelSetParams,
    /// Level-set iterations per frame and object.
    pub lse_iters: usize,
    /// Work-domain inflation margin, pixels.
    pub inflate_margin_px: usize,
    pub icp: IcpParams,
    /// Dominant volume resolution.
    pub dominant_n: usize,
    /// Per-object volume resolution.
    pub object_n: usize,
    /// Object volume radius as a multiple of the observed half-extent.
    pub object_radius_scale: f64,
    /// Frames without a sighting before an object goes dormant.
    pub dormant_after: usize,
    /// Minimum valid foreground pixels to create or update an object model.
    pub min_object_px: usize,
    /// Histogram blend factor per update.
    pub hist_alpha: f64,
    pub seed: u64,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            explore_frames: 60,
            discovery_window: 10,
            discovery: DiscoveryParams::default(),
            tau_depth_m: 0.02,
            tau_gray: 30.0 / 255.0,
            d1_min_px: 100,
            tau_iou: 0.3,
            keep_unmatched: true,
            matching: MatchParams::default(),
            level_set: LevelSetParams::default(),
            lse_iters: 40,
            inflate_margin_px: 15,
            icp: IcpParams::default(),
            dominant_n: 128,
            object_n: 64,
            object_radius_scale: 1.5,
            dormant_after: 30,
            min_object_px: 100,
            hist_alpha: 0.1,
            seed: 0,
        }
    }
}

/// Live pipeline state: the registry plus transient per-run buffers.
pub struct Pipeline {
    pub registry: ObjectRegistry,
    pub params: PipelineParams,
    pub intrinsics: CameraIntrinsics,
    /// Trailing exploration frames for discovery.
    window: VecDeque<RgbdFrame>,
    /// Candidates plus the depth/pose of their discovery frame, for
    /// reprojection into later views.
    pub candidates: Option<DiscoveredCandidates>,
    /// Label image of tracked objects in the most recent frame.
    pub last_mask: Option<LabelImage>,
}

pub struct DiscoveredCandidates {
    pub set: CandidateContourSet,
    pub camera_pose: Pose,
    pub depth: crate::image::DepthImage,
}

/// Initialize the registry by fusing the first frame into a fresh dominant
/// volume at the identity camera pose.
pub fn init_dominant(
    first: &RgbdFrame,
    k: &CameraIntrinsics,
    params: &PipelineParams,
) -> Result<Pipeline, PipelineError> {
    let valid = first.valid_depth_count();
    if valid < 1000 {
        return Err(PipelineError::InsufficientDepth(valid));
    }
    // Volume centered on the observed geometry, sized to cover it.
    let mut centroid = Vector3::zeros();
    let mut pts = Vec::new();
    for y in (0..first.height()).step_by(2) {
        for x in (0..first.width()).step_by(2) {
            let d = *first.depth.get(x, y) as f64;
            if d <= 0.0 {
                continue;
            }
            if let Ok(p) = crate::geometry::backproject(Pixel::new(x as f64, y as f64), d, k) {
                centroid += p;
                pts.push(p);
            }
        }
    }
    centroid /= pts.len() as f64;
    let spread = pts
        .iter()
        .map(|p| (p - centroid).amax())
        .fold(0.0f64, f64::max);
    let radius = (spread * 1.3).max(0.3);
    let mut dominant = TsdfVolume::new(
        params.dominant_n,
        radius,
        Pose::from_translation(centroid),
    )?;
    dominant.fuse(&first.depth, &first.rgb.to_gray(), &Pose::identity(), k, None);

    let mut window = VecDeque::new();
    window.push_back(first.clone());
    Ok(Pipeline {
        registry: ObjectRegistry {
            dominant,
            camera_pose: Pose::identity(),
            camera_velocity: Pose::identity(),
            objects: Vec::new(),
            frames_processed: 1,
            next_object_id: 1,
        },
        params: params.clone(),
        intrinsics: *k,
        window,
        candidates: None,
        last_mask: None,
    })
}

impl Pipeline {
    /// Advance the pipeline by one frame.
    pub fn step(&mut self, frame: &RgbdFrame, phase: Phase) -> Result<(), PipelineError> {
        let k = self.intrinsics;
        let gray = frame.rgb.to_gray();

        // Dominant camera tracking against the model, from the
        // constant-velocity prediction.
        let predicted = self
            .registry
            .camera_pose
            .compose(&self.registry.camera_velocity);
        let ref_view = self.registry.dominant.raycast(&predicted, &k)?;
        let icp = icp_rgb_frame_to_model(
            &ref_view,
            &frame.depth,
            &gray,
            &k,
            &Pose::identity(),
            &self.params.icp,
        )
        .map_err(|source| PipelineError::DominantTrackingLost {
            frame: frame.index,
            source,
        })?;
        let new_pose = predicted.compose(&icp.pose);
        self.registry.camera_velocity = self.registry.camera_pose.invert().compose(&new_pose);
        self.registry.camera_pose = new_pose;

        match phase {
            Phase::Explore => {
                self.registry.dominant.fuse(
                    &frame.depth,
                    &gray,
                    &self.registry.camera_pose,
                    &k,
                    None,
                );
                self.window.push_back(frame.clone());
                while self.window.len() > self.params.discovery_window {
                    self.window.pop_front();
                }
                self.last_mask = Some(Grid::new(frame.width(), frame.height()));
            }
            Phase::Manipulate => {
                if self.candidates.is_none() && self.window.len() >= 2 {
                    let frames: Vec<RgbdFrame> = self.window.iter().cloned().collect();
                    let set = discover(&frames, &self.params.discovery)?;
                    let last = frames.last().unwrap();
                    self.candidates = Some(DiscoveredCandidates {
                        set,
                        camera_pose: self.registry.camera_pose,
                        depth: last.depth.clone(),
                    });
                }
                self.manipulate_step(frame, &gray)?;
            }
        }
        self.registry.frames_processed += 1;

        // Dormancy bookkeeping.
        let now = frame.index;
        let dormant_after = self.params.dormant_after;
        for obj in &mut self.registry.objects {
            if !obj.dormant && now.saturating_sub(obj.last_seen) > dormant_after {
                obj.dormant = true;
            }
        }
        Ok(())
    }

    fn manipulate_step(
        &mut self,
        frame: &RgbdFrame,
        gray: &crate::image::GrayImage,
    ) -> Result<(), PipelineError> {
        let k = self.intrinsics;
        let virt = self.registry.dominant.raycast(&self.registry.camera_pose, &k)?;
        let mut residual =
            residual_image(&virt, frame, self.params.tau_depth_m, self.params.tau_gray)?;
        // Morphological opening: the voxel-resolution model leaves 1-2 px
        // discrepancy rings around every depth discontinuity; real object
        // regions are thick and survive.
        residual.mask = opened(&residual.mask, 1);
        let contours = extract_contours(&residual, self.params.d1_min_px);

        // Candidates reprojected into the current view.
        let reprojected = self.reprojected_candidates(frame);
        let verified = match &reprojected {
            Some(cands) => verify_candidates(cands, contours, self.params.tau_iou),
            None => contours,
        };

        let mut updated_this_frame: Vec<u32> = Vec::new();
        let mut mask: LabelImage = Grid::new(frame.width(), frame.height());
        for motion in &verified.regions {
            // Vacated regions (model surface in front of live) carry no
            // object surface; they only witness that something left.
            if !motion.live_in_front() {
                continue;
            }
            let eligible = match motion.tag {
                MatchTag::Candidate(_) => true,
                MatchTag::Unmatched => self.params.keep_unmatched,
            };
            let object_refs: Vec<&crate::tracking2d::ObjectModel2D> =
                self.registry.objects.iter().map(|o| &o.model2d).collect();
            let matched = match_contour(&motion.region, frame, &object_refs, &self.params.matching);
            match matched {
                ContourMatch::Existing { index, .. } => {
                    let id = self.registry.objects[index].id;
                    if !updated_this_frame.contains(&id) {
                        if self.update_object(index, &motion.region, frame, gray)? {
                            updated_this_frame.push(id);
                        }
                    }
                }
                ContourMatch::New => {
                    // Genuine displaced objects sit coherently in front of
                    // the model; mixed-sign or threshold-hugging residual
                    // (model noise) must not seed objects.
                    if eligible && motion.mean_depth_diff >= 1.5 * self.params.tau_depth_m {
                        if let Some(id) = self.create_object(&motion.region, frame, gray)? {
                            updated_this_frame.push(id);
                        }
                    }
                }
            }
        }

        // Per-frame object mask from the current 2D models.
        for obj in &self.registry.objects {
            if obj.dormant {
                continue;
            }
            let inside = obj.model2d.sdf.inside_mask();
            for wy in 0..inside.height {
                for wx in 0..inside.width {
                    if *inside.get(wx, wy) {
                        let (x, y) = (obj.model2d.sdf.x0 + wx, obj.model2d.sdf.y0 + wy);
                        if x < mask.width && y < mask.height {
                            mask.set(x, y, obj.id);
                        }
                    }
                }
            }
        }
        self.last_mask = Some(mask);

        // Keep learning the static scene, but never fuse pixels that belong
        // to moved objects: contours with coherent in-front evidence and the
        // tracked foregrounds. Everything else (vacated spots, sub-threshold
        // noise) re-fuses so ghosts and model bias fade out.
        let mut fuse_mask = Mask::filled(frame.width(), frame.height(), true);
        for motion in &verified.regions {
            if motion.mean_depth_diff >= 1.5 * self.params.tau_depth_m {
                for (i, &b) in motion.region.mask.data.iter().enumerate() {
                    if b {
                        fuse_mask.data[i] = false;
                    }
                }
            }
        }
        if let Some(mask) = &self.last_mask {
            for (i, &l) in mask.data.iter().enumerate() {
                if l != 0 {
                    fuse_mask.data[i] = false;
                }
            }
        }
        let eroded = crate::regions::dilate_disk(
            &{
                let mut inv = Mask::new(fuse_mask.width, fuse_mask.height);
                for (o, &b) in inv.data.iter_mut().zip(&fuse_mask.data) {
                    *o = !b;
                }
                inv
            },
            3,
        );
        for (o, &b) in fuse_mask.data.iter_mut().zip(&eroded.data) {
            *o = !b;
        }
        self.registry.dominant.fuse(
            &frame.depth,
            gray,
            &self.registry.camera_pose,
            &k,
            Some(&fuse_mask),
        );
        Ok(())
    }

    fn reprojected_candidates(&self, frame: &RgbdFrame) -> Option<CandidateContourSet> {
        let cands = self.candidates.as_ref()?;
        let (w, h) = (frame.width(), frame.height());
        let to_world = cands.camera_pose;
        let to_cam = self.registry.camera_pose.invert();
        let mut regions = Vec::new();
        for region in &cands.set.regions {
            let mut mask = Mask::new(w, h);
            for y in region.bbox.1..=region.bbox.3 {
                for x in region.bbox.0..=region.bbox.2 {
                    if !*region.mask.get(x, y) {
                        continue;
                    }
                    let d = *cands.depth.get(x, y) as f64;
                    if d <= 0.0 {
                        continue;
                    }
                    let Ok(p) = crate::geometry::backproject(Pixel::new(x as f64, y as f64), d, &self.intrinsics)
                    else {
                        continue;
                    };
                    let q = to_cam.transform(to_world.transform(p));
                    if q.z <= 0.0 {
                        continue;
                    }
                    if let Ok(px) = crate::geometry::project(q, &self.intrinsics) {
                        let (u, v) = (px.u.round(), px.v.round());
                        if u >= 0.0 && v >= 0.0 && (u as usize) < w && (v as usize) < h {
                            mask.set(u as usize, v as usize, true);
                        }
                    }
                }
            }
            // Close splatting holes and take the dominant component.
            let closed = crate::regions::dilate_disk(&mask, 1);
            let comps = connected_components(&closed, 1);
            match comps.into_iter().max_by_key(|r| r.area) {
                Some(r) => regions.push(r),
                None => regions.push(Region {
                    mask: Mask::new(w, h),
                    area: 0,
                    anchor: (0, 0),
                    boundary: Vec::new(),
                    bbox: (0, 0, 0, 0),
                }),
            }
        }
        Some(CandidateContourSet {
            frame_index: frame.index,
            width: w,
            height: h,
            regions,
        })
    }

    /// Returns Ok(true) when the object was actually updated.
    fn update_object(
        &mut self,
        index: usize,
        region: &Region,
        frame: &RgbdFrame,
        gray: &crate::image::GrayImage,
    ) -> Result<bool, PipelineError> {
        let k = self.intrinsics;
        let params = self.params.clone();
        let obj = &mut self.registry.objects[index];

        let omega = crate::tracking2d::inflate(region, params.inflate_margin_px);
        // Re-anchor the SDF window onto the union of the old foreground and
        // the new work domain, then evolve in the current frame.
        let old_inside = obj.model2d.sdf.inside_mask();
        let mut union = omega.clone();
        for wy in 0..old_inside.height {
            for wx in 0..old_inside.width {
                if *old_inside.get(wx, wy) {
                    let (x, y) = (obj.model2d.sdf.x0 + wx, obj.model2d.sdf.y0 + wy);
                    if x < union.width && y < union.height {
                        union.set(x, y, true);
                    }
                }
            }
        }
        let Some((x0, y0, x1, y1)) = bbox_of(&union) else {
            return Ok(false);
        };
        let (ww, wh) = (x1 - x0 + 1, y1 - y0 + 1);
        // Seed the window's inside set from the previous foreground if it
        // overlaps, otherwise from the verified region itself.
        let mut seed = Mask::new(ww, wh);
        let mut seeded = false;
        for wy in 0..old_inside.height {
            for wx in 0..old_inside.width {
                if *old_inside.get(wx, wy) {
                    let (x, y) = (obj.model2d.sdf.x0 + wx, obj.model2d.sdf.y0 + wy);
                    if x >= x0 && x <= x1 && y >= y0 && y <= y1 && *omega.get(x, y) {
                        seed.set(x - x0, y - y0, true);
                        seeded = true;
                    }
                }
            }
        }
        if !seeded {
            for y in region.bbox.1..=region.bbox.3 {
                for x in region.bbox.0..=region.bbox.2 {
                    if *region.mask.get(x, y) && x >= x0 && x <= x1 && y >= y0 && y <= y1 {
                        seed.set(x - x0, y - y0, true);
                    }
                }
            }
        }
        let sdf = Sdf2D::from_mask(x0, y0, &seed);
        let evolved = evolve_level_set(
            &sdf,
            &omega,
            &frame.rgb,
            &obj.model2d.appearance,
            params.lse_iters,
            &params.level_set,
        )?;

        // Foreground cloud of the evolved contour.
        let mut fg_mask = Mask::new(frame.width(), frame.height());
        let mut fg_count = 0usize;
        let inside = evolved.inside_mask();
        for wy in 0..inside.height {
            for wx in 0..inside.width {
                if *inside.get(wx, wy) {
                    let (x, y) = (evolved.x0 + wx, evolved.y0 + wy);
                    if x < fg_mask.width && y < fg_mask.height && *frame.depth.get(x, y) > 0.0 {
                        fg_mask.set(x, y, true);
                        fg_count += 1;
                    }
                }
            }
        }
        if fg_count < params.min_object_px {
            return Ok(false);
        }

        // Relative pose between the stored foreground and the evolved one:
        // frame-to-frame cloud ICP gives crisp live normals, then a
        // frame-to-model refinement anchors against accumulated drift.
        let reference_pose = obj.pose;
        let Ok(live_cloud) = make_cloud(&frame.depth, gray, Some(&fg_mask), &k, 30) else {
            return Ok(false);
        };
        let Some(prev_cloud) = obj.prev_cloud.as_ref() else {
            return Ok(false);
        };
        let f2f = match icp_rgb(prev_cloud, &live_cloud, &obj.velocity, &params.icp) {
            Ok(r) => r,
            Err(_) => return Ok(false),
        };
        let mut t_rl = f2f.pose;
        let pose_f2f = reference_pose.compose(&t_rl);
        if let Ok(obj_view) = obj.volume.raycast(&pose_f2f, &k) {
            let mut masked_depth = frame.depth.clone();
            for (i, &m) in fg_mask.data.iter().enumerate() {
                if !m {
                    masked_depth.data[i] = 0.0;
                }
            }
            if let Ok(refine) = icp_rgb_frame_to_model(
                &obj_view,
                &masked_depth,
                gray,
                &k,
                &Pose::identity(),
                &params.icp,
            ) {
                t_rl = t_rl.compose(&refine.pose);
            }
        }
        let new_pose = reference_pose.compose(&t_rl);
        obj.last_update = Some((reference_pose, t_rl));
        // Damped velocity: finite-difference pose deltas are noisy, and an
        // undamped estimate keeps pushing along weakly observed directions
        // after the object comes to rest.
        obj.velocity = Pose::identity().interpolate(&t_rl, 0.7);
        obj.pose = new_pose;
        obj.prev_cloud = Some(live_cloud);

        // Grow the volume when newly seen surface falls outside it (objects
        // first noticed as a partial motion strip start undersized).
        let mut fg_model_pts = Vec::new();
        for y in 0..fg_mask.height {
            for x in 0..fg_mask.width {
                if *fg_mask.get(x, y) {
                    let d = *frame.depth.get(x, y) as f64;
                    if let Ok(p) = crate::geometry::backproject(Pixel::new(x as f64, y as f64), d, &k) {
                        fg_model_pts.push(obj.pose.transform(p));
                    }
                }
            }
        }
        if !fg_model_pts.is_empty() {
            let center = obj.volume.pose.translation;
            let reach = fg_model_pts
                .iter()
                .map(|p| (p - center).norm())
                .fold(0.0f64, f64::max);
            if reach > 0.85 * obj.volume.radius() {
                let mut centroid = Vector3::zeros();
                for p in &fg_model_pts {
                    centroid += p;
                }
                centroid /= fg_model_pts.len() as f64;
                let half_extent = fg_model_pts
                    .iter()
                    .map(|p| (p - centroid).norm())
                    .fold(0.0f64, f64::max);
                let new_radius = (params.object_radius_scale * half_extent)
                    .max(obj.volume.radius() * 1.3);
                if let Ok(grown) = obj.volume.resampled(
                    params.object_n,
                    new_radius,
                    Pose::from_translation(centroid),
                ) {
                    obj.volume = grown;
                }
            }
        }

        obj.volume
            .fuse(&frame.depth, gray, &obj.pose, &k, Some(&fg_mask));

        // Histograms track appearance drift.
        if let Ok(app) = update_histograms(&obj.appearance_for_update(), frame, &evolved, params.hist_alpha)
        {
            obj.model2d.appearance = app;
        }

        // Reset the 2D SDF to the silhouette of the updated model at the new
        // pose, keeping 2D and 3D state consistent.
        if let Ok(rc) = obj.volume.raycast(&obj.pose, &k) {
            if let Some(sdf) = silhouette_sdf(&rc.valid, params.min_object_px / 2) {
                obj.model2d.sdf = sdf;
            } else {
                obj.model2d.sdf = evolved;
            }
        } else {
            obj.model2d.sdf = evolved;
        }

        // Image-space motion cue for the next frame.
        let centroid = obj.model2d.centroid();
        if let (Some(prev), Some(cur)) = (obj.prev_centroid, centroid) {
            obj.model2d.predicted_centroid = Some((2.0 * cur.0 - prev.0, 2.0 * cur.1 - prev.1));
        } else {
            obj.model2d.predicted_centroid = centroid;
        }
        obj.prev_centroid = centroid;
        obj.last_seen = frame.index;
        obj.dormant = false;
        Ok(true)
    }

    fn create_object(
        &mut self,
        region: &Region,
        frame: &RgbdFrame,
        gray: &crate::image::GrayImage,
    ) -> Result<Option<u32>, PipelineError> {
        let k = self.intrinsics;
        let params = self.params.clone();

        // Back-project the region to size and place the object volume.
        let mut pts = Vec::new();
        for y in region.bbox.1..=region.bbox.3 {
            for x in region.bbox.0..=region.bbox.2 {
                if !*region.mask.get(x, y) {
                    continue;
                }
                let d = *frame.depth.get(x, y) as f64;
                if d <= 0.0 {
                    continue;
                }
                if let Ok(p) = crate::geometry::backproject(Pixel::new(x as f64, y as f64), d, &k)
                {
                    pts.push(self.registry.camera_pose.transform(p));
                }
            }
        }
        if pts.len() < params.min_object_px {
            return Ok(None);
        }
        let mut centroid = Vector3::zeros();
        for p in &pts {
            centroid += p;
        }
        centroid /= pts.len() as f64;
        let half_extent = pts
            .iter()
            .map(|p| (p - centroid).norm())
            .fold(0.0f64, f64::max);
        let radius = (params.object_radius_scale * half_extent).max(0.05);
        let mut volume = TsdfVolume::new(
            params.object_n,
            radius,
            Pose::from_translation(centroid),
        )?;
        volume.fuse(
            &frame.depth,
            gray,
            &self.registry.camera_pose,
            &k,
            Some(&region.mask),
        );

        let id = self.registry.next_object_id;
        self.registry.next_object_id += 1;
        let model2d = init_object_2d(id, region, frame, params.inflate_margin_px);
        let centroid2d = model2d.centroid();
        let prev_cloud = make_cloud(&frame.depth, gray, Some(&region.mask), &k, 30).ok();
        self.registry.objects.push(TrackedObject {
            id,
            model2d,
            volume,
            pose: self.registry.camera_pose,
            velocity: Pose::identity(),
            last_seen: frame.index,
            dormant: false,
            last_update: None,
            prev_centroid: centroid2d,
            prev_cloud,
        });
        Ok(Some(id))
    }
}

impl TrackedObject {
    fn appearance_for_update(&self) -> crate::tracking2d::AppearanceModel {
        self.model2d.appearance.clone()
    }
}

/// Morphological opening (erosion then dilation) with a radius-r disk.
fn opened(mask: &Mask, radius: usize) -> Mask {
    let mut inverted = Mask::new(mask.width, mask.height);
    for (o, &b) in inverted.data.iter_mut().zip(&mask.data) {
        *o = !b;
    }
    let grown_bg = crate::regions::dilate_disk(&inverted, radius);
    let mut eroded = Mask::new(mask.width, mask.height);
    for (o, &b) in eroded.data.iter_mut().zip(&grown_bg.data) {
        *o = !b;
    }
    crate::regions::dilate_disk(&eroded, radius)
}

fn bbox_of(mask: &Mask) -> Option<(usize, usize, usize, usize)> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if *mask.get(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (x0 != usize::MAX).then_some((x0, y0, x1, y1))
}

/// Signed distance of the largest component of a raycast validity mask, in
/// a padded window around it.
fn silhouette_sdf(valid: &Mask, min_px: usize) -> Option<Sdf2D> {
    let comps = connected_components(valid, min_px.max(1));
    let region = comps.into_iter().max_by_key(|r| r.area)?;
    let pad = 6usize;
    let x0 = region.bbox.0.saturating_sub(pad);
    let y0 = region.bbox.1.saturating_sub(pad);
    let x1 = (region.bbox.2 + pad).min(valid.width - 1);
    let y1 = (region.bbox.3 + pad).min(valid.height - 1);
    let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut local = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            local.set(x, y, *region.mask.get(x0 + x, y0 + y));
        }
    }
    Some(Sdf2D::from_mask(x0, y0, &local))
}

/// Run the full pipeline over a sequence: explore then manipulate, returning
/// the final registry and per-frame artifacts.
pub fn run(
    frames: &[RgbdFrame],
    k: &CameraIntrinsics,
    params: &PipelineParams,
) -> Result<RunOutput, PipelineError> {
    if frames.is_empty() {
        return Err(PipelineError::EmptySequence);
    }
    let mut pipeline = init_dominant(&frames[0], k, params)?;
    let mut masks = Vec::with_capacity(frames.len());
    masks.push(Grid::new(frames[0].width(), frames[0].height()));
    let mut poses: Vec<Vec<(u32, Pose)>> = vec![Vec::new()];
    let mut camera_poses = vec![pipeline.registry.camera_pose];

    for frame in &frames[1..] {
        let phase = if frame.index < params.explore_frames {
            Phase::Explore
        } else {
            Phase::Manipulate
        };
        pipeline.step(frame, phase)?;
        masks.push(
            pipeline
                .last_mask
                .clone()
                .unwrap_or_else(|| Grid::new(frame.width(), frame.height())),
        );
        poses.push(
            (0..pipeline.registry.objects.len())
                .map(|i| {
                    (
                        pipeline.registry.objects[i].id,
                        pipeline.registry.object_world_pose(i),
                    )
                })
                .collect(),
        );
        camera_poses.push(pipeline.registry.camera_pose);
    }
    Ok(RunOutput {
        registry: pipeline.registry,
        masks,
        object_poses: poses,
        camera_poses,
    })
}
