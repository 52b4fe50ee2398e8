//! Motion-based object verification: difference the dominant model's virtual
//! image against the live frame, extract disjoint residual contours, and
//! match them to appearance candidates.

use crate::discovery::CandidateContourSet;
use crate::geometry::{CameraIntrinsics, Pose};
use crate::image::{Grid, Mask, RgbdFrame};
use crate::reconstruction::{Raycast, ReconError, TsdfVolume};
use crate::regions::{connected_components, Region};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Recon(#[from] ReconError),
}

/// Raycast the dominant model from the live camera pose: the virtual gray +
/// depth image pair everything is differenced against.
pub fn virtual_image(
    volume: &TsdfVolume,
    t_wl: &Pose,
    k: &CameraIntrinsics,
) -> Result<Raycast, VerifyError> {
    Ok(volume.raycast(t_wl, k)?)
}

/// Pixels inconsistent with the dominant model, with the signed depth
/// discrepancy (virtual minus live, meters). Positive means the live surface
/// sits in front of the model.
#[derive(Debug, Clone)]
pub struct ResidualImage {
    pub mask: Mask,
    pub depth_diff: Grid<f32>,
}

/// Threshold the virtual/live discrepancy. A pixel is flagged iff both
/// depths are valid and either the gap exceeds `tau_depth`, or depth agrees
/// but gray disagrees by more than `tau_gray` (0-1 units). Where the model
/// has no prediction the difference carries no evidence and stays quiet.
pub fn residual_image(
    virtual_img: &Raycast,
    live: &RgbdFrame,
    tau_depth: f64,
    tau_gray: f64,
) -> Result<ResidualImage, VerifyError> {
    if virtual_img.depth.width != live.width() || virtual_img.depth.height != live.height() {
        return Err(VerifyError::DimensionMismatch(format!(
            "virtual {}x{} vs live {}x{}",
            virtual_img.depth.width,
            virtual_img.depth.height,
            live.width(),
            live.height()
        )));
    }
    let (w, h) = (live.width(), live.height());
    let live_gray = live.rgb.to_gray();
    let mut out = ResidualImage {
        mask: Mask::new(w, h),
        depth_diff: Grid::new(w, h),
    };
    for i in 0..w * h {
        let dl = live.depth.data[i] as f64;
        if dl <= 0.0 {
            continue;
        }
        let dv = virtual_img.depth.data[i] as f64;
        if dv <= 0.0 {
            continue;
        }
        let diff = dv - dl;
        if diff.abs() > tau_depth {
            out.mask.data[i] = true;
            out.depth_diff.data[i] = diff as f32;
        } else if (virtual_img.gray.data[i] as f64 - live_gray.data[i] as f64).abs() > tau_gray {
            out.mask.data[i] = true;
            out.depth_diff.data[i] = diff as f32;
        }
    }
    Ok(out)
}

/// How a motion region relates to the candidate set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchTag {
    /// Index into the candidate set it was matched against.
    Candidate(usize),
    Unmatched,
}

#[derive(Debug, Clone)]
pub struct MotionRegion {
    pub region: Region,
    /// Mean signed depth discrepancy over the region (meters); positive
    /// means the live surface is in front of the model (an object is there).
    pub mean_depth_diff: f64,
    /// Mean absolute depth discrepancy (meters); separates genuine object
    /// displacement from model noise hovering at the threshold.
    pub mean_abs_diff: f64,
    pub tag: MatchTag,
}

impl MotionRegion {
    /// True when the region shows scene content in front of the model, i.e.
    /// the current location of a moved object rather than a vacated one.
    pub fn live_in_front(&self) -> bool {
        self.mean_depth_diff > 0.0
    }
}

#[derive(Debug, Clone)]
pub struct VerifiedContourSet {
    pub width: usize,
    pub height: usize,
    pub regions: Vec<MotionRegion>,
}

/// 8-connected residual components with at least `d1` pixels, ordered by
/// topmost-leftmost anchor, boundaries traced clockwise.
pub fn extract_contours(res: &ResidualImage, d1: usize) -> VerifiedContourSet {
    let regions = connected_components(&res.mask, d1.max(1));
    let motion = regions
        .into_iter()
        .map(|region| {
            let mut sum = 0.0f64;
            let mut abs_sum = 0.0f64;
            let mut n = 0usize;
            for y in region.bbox.1..=region.bbox.3 {
                for x in region.bbox.0..=region.bbox.2 {
                    if *region.mask.get(x, y) {
                        let d = *res.depth_diff.get(x, y) as f64;
                        sum += d;
                        abs_sum += d.abs();
                        n += 1;
                    }
                }
            }
            MotionRegion {
                mean_depth_diff: if n > 0 { sum / n as f64 } else { 0.0 },
                mean_abs_diff: if n > 0 { abs_sum / n as f64 } else { 0.0 },
                region,
                tag: MatchTag::Unmatched,
            }
        })
        .collect();
    VerifiedContourSet {
        width: res.mask.width,
        height: res.mask.height,
        regions: motion,
    }
}

/// Match motion regions against appearance candidates by maximum IoU.
/// Regions reaching `tau_iou` get the candidate's index (lowest index wins
/// exact ties); the rest stay `Unmatched`. Candidates never matched by any
/// motion region are thereby discarded from the verified set.
pub fn verify_candidates(
    candidates: &CandidateContourSet,
    mut motion: VerifiedContourSet,
    tau_iou: f64,
) -> VerifiedContourSet {
    for m in &mut motion.regions {
        let mut best: Option<(usize, f64)> = None;
        for (ci, cand) in candidates.regions.iter().enumerate() {
            let iou = m.region.mask.iou(&cand.mask);
            let better = match best {
                None => iou > 0.0,
                Some((_, b)) => iou > b,
            };
            if better {
                best = Some((ci, iou));
            }
        }
        m.tag = match best {
            Some((ci, iou)) if iou >= tau_iou => MatchTag::Candidate(ci),
            _ => MatchTag::Unmatched,
        };
    }
    motion
}
