//! 2D tracking and reconstruction: contour-to-object matching, work-domain
//! inflation, level-set evolution of each object's 2D SDF, and appearance
//! histogram maintenance.

mod histogram;
mod levelset;
mod sdf;

pub use histogram::{color_bin, AppearanceModel, Histogram, BIN_COUNT};
pub use levelset::{
    delta, energy, energy_gradient, evolve_level_set, heaviside, log_likelihoods, LevelSetParams,
    LogLikelihoods,
};
pub use sdf::{edt, hausdorff, Sdf2D};

use crate::image::{Mask, RgbdFrame};
use crate::regions::{dilate_disk, Region};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Tracking2dError {
    #[error("evolution domain does not overlap the SDF window")]
    DomainDisjoint,
    #[error("object has no foreground pixels")]
    EmptyForeground,
}

/// The 2D state of one tracked object.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectModel2D {
    pub id: u32,
    pub sdf: Sdf2D,
    pub appearance: AppearanceModel,
    /// Predicted image-space centroid for the motion cue, when available.
    pub predicted_centroid: Option<(f64, f64)>,
}

impl ObjectModel2D {
    /// Foreground area in pixels.
    pub fn foreground_area(&self) -> usize {
        self.sdf.inside_mask().count()
    }

    /// Foreground centroid in image coordinates.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let m = self.sdf.inside_mask();
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut n = 0usize;
        for y in 0..m.height {
            for x in 0..m.width {
                if *m.get(x, y) {
                    sx += (self.sdf.x0 + x) as f64;
                    sy += (self.sdf.y0 + y) as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchParams {
    pub w_appearance: f64,
    pub w_shape: f64,
    pub w_motion: f64,
    /// Minimum combined score to accept a match.
    pub tau_match: f64,
    /// Scale of the centroid-proximity cue, pixels.
    pub sigma_motion: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            w_appearance: 1.0 / 3.0,
            w_shape: 1.0 / 3.0,
            w_motion: 1.0 / 3.0,
            tau_match: 0.5,
            sigma_motion: 20.0,
        }
    }
}

/// Outcome of matching a verified contour against the known objects.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ContourMatch {
    Existing { index: usize, score: f64 },
    New,
}

/// Score = w_a * histogram intersection + w_s * (1 - normalized area
/// difference) + w_m * centroid proximity; the best object wins if its score
/// reaches tau_match (lowest index on exact ties).
pub fn match_contour(
    region: &Region,
    frame: &RgbdFrame,
    objects: &[&ObjectModel2D],
    params: &MatchParams,
) -> ContourMatch {
    if objects.is_empty() {
        return ContourMatch::New;
    }
    let region_hist = Histogram::from_pixels(region_pixels(region, frame));
    let (rcx, rcy) = region.centroid();
    let mut best: Option<(usize, f64)> = None;
    for (i, obj) in objects.iter().enumerate() {
        let appearance = region_hist.intersection(&obj.appearance.fg);
        let oa = obj.foreground_area().max(1) as f64;
        let ra = region.area as f64;
        let shape = 1.0 - (ra - oa).abs() / ra.max(oa);
        let motion = match obj.predicted_centroid.or_else(|| obj.centroid()) {
            Some((px, py)) => {
                let d2 = (rcx - px).powi(2) + (rcy - py).powi(2);
                (-d2 / (2.0 * params.sigma_motion * params.sigma_motion)).exp()
            }
            None => 0.0,
        };
        let score = params.w_appearance * appearance
            + params.w_shape * shape
            + params.w_motion * motion;
        if best.map_or(true, |(_, b)| score > b) {
            best = Some((i, score));
        }
    }
    match best {
        Some((i, s)) if s >= params.tau_match => ContourMatch::Existing { index: i, score: s },
        _ => ContourMatch::New,
    }
}

fn region_pixels<'a>(
    region: &'a Region,
    frame: &'a RgbdFrame,
) -> impl Iterator<Item = [u8; 3]> + 'a {
    (region.bbox.1..=region.bbox.3).flat_map(move |y| {
        (region.bbox.0..=region.bbox.2).filter_map(move |x| {
            region.mask.get(x, y).then(|| frame.rgb.get(x, y))
        })
    })
}

/// Inflate the region mask by a disk of `margin` pixels, clipped to bounds.
pub fn inflate(region: &Region, margin: usize) -> Mask {
    dilate_disk(&region.mask, margin)
}

/// Foreground pixels of the evolved SDF: strictly inside the zero level set
/// and carrying valid depth. Returns (x, y, depth, rgb).
pub fn foreground(sdf: &Sdf2D, frame: &RgbdFrame) -> Vec<(usize, usize, f32, [u8; 3])> {
    let mut out = Vec::new();
    for wy in 0..sdf.height() {
        for wx in 0..sdf.width() {
            if *sdf.grid.get(wx, wy) >= 0.0 {
                continue;
            }
            let (x, y) = (sdf.x0 + wx, sdf.y0 + wy);
            if x >= frame.width() || y >= frame.height() {
                continue;
            }
            let d = *frame.depth.get(x, y);
            if d > 0.0 {
                out.push((x, y, d, frame.rgb.get(x, y)));
            }
        }
    }
    out
}

/// Blend both histograms toward the current frame's foreground/background
/// split defined by the SDF.
pub fn update_histograms(
    app: &AppearanceModel,
    frame: &RgbdFrame,
    sdf: &Sdf2D,
    alpha: f64,
) -> Result<AppearanceModel, Tracking2dError> {
    let inside = sdf.inside_mask();
    if inside.count() == 0 {
        return Err(Tracking2dError::EmptyForeground);
    }
    let mut fg_pixels = Vec::new();
    let mut bg_pixels = Vec::new();
    for wy in 0..sdf.height() {
        for wx in 0..sdf.width() {
            let (x, y) = (sdf.x0 + wx, sdf.y0 + wy);
            if x >= frame.width() || y >= frame.height() {
                continue;
            }
            let c = frame.rgb.get(x, y);
            if *inside.get(wx, wy) {
                fg_pixels.push(c);
            } else {
                bg_pixels.push(c);
            }
        }
    }
    let mut out = app.clone();
    out.fg
        .blend(&Histogram::from_pixels(fg_pixels.into_iter()), alpha);
    if !bg_pixels.is_empty() {
        out.bg
            .blend(&Histogram::from_pixels(bg_pixels.into_iter()), alpha);
    }
    Ok(out)
}

/// Build a fresh 2D object model from a verified contour: the SDF is the
/// signed distance to the contour, histograms come from inside/outside the
/// contour within the inflated domain.
pub fn init_object_2d(
    id: u32,
    region: &Region,
    frame: &RgbdFrame,
    margin: usize,
) -> ObjectModel2D {
    let omega = inflate(region, margin);
    // Window = bounding box of the inflated domain.
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..omega.height {
        for x in 0..omega.width {
            if *omega.get(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
    let mut local = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            local.set(x, y, *region.mask.get(x0 + x, y0 + y));
        }
    }
    let sdf = Sdf2D::from_mask(x0, y0, &local);
    let appearance = AppearanceModel::learn(&frame.rgb, &region.mask, &omega);
    ObjectModel2D {
        id,
        sdf,
        appearance,
        predicted_centroid: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{ColorImage, DepthImage, Grid};
    use crate::regions::connected_components;

    fn frame_with_square(
        w: usize,
        h: usize,
        x0: usize,
        y0: usize,
        side: usize,
        color: [u8; 3],
    ) -> (RgbdFrame, Region) {
        let mut rgb = ColorImage::new(w, h);
        for i in 0..w * h {
            rgb.data[i * 3..i * 3 + 3].copy_from_slice(&[120, 120, 120]);
        }
        let mut mask = Mask::new(w, h);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                rgb.set(x, y, color);
                mask.set(x, y, true);
            }
        }
        let mut depth = DepthImage::new(w, h);
        depth.data.fill(0.8);
        let frame = RgbdFrame {
            rgb,
            depth,
            index: 0,
        };
        let region = connected_components(&mask, 1).remove(0);
        (frame, region)
    }

    #[test]
    fn match_identical_region_scores_full() {
        let (frame, region) = frame_with_square(64, 48, 20, 10, 12, [200, 40, 30]);
        let obj = init_object_2d(1, &region, &frame, 6);
        let params = MatchParams::default();
        match match_contour(&region, &frame, &[&obj], &params) {
            ContourMatch::Existing { index, score } => {
                assert_eq!(index, 0);
                assert!(score > 0.97, "score {score}");
            }
            ContourMatch::New => panic!("should match"),
        }
    }

    #[test]
    fn empty_object_list_is_new() {
        let (frame, region) = frame_with_square(64, 48, 20, 10, 12, [200, 40, 30]);
        assert_eq!(
            match_contour(&region, &frame, &[], &MatchParams::default()),
            ContourMatch::New
        );
    }

    #[test]
    fn motion_cue_breaks_appearance_tie() {
        let (frame, region) = frame_with_square(96, 48, 40, 10, 12, [200, 40, 30]);
        // Two objects identical in appearance and shape, predicted at
        // different locations; the one predicted at the region must win.
        let base = init_object_2d(1, &region, &frame, 6);
        let mut away = base.clone();
        away.id = 2;
        away.predicted_centroid = Some((10.0, 40.0));
        let mut near = base.clone();
        near.id = 3;
        let (cx, cy) = region.centroid();
        near.predicted_centroid = Some((cx, cy));
        match match_contour(&region, &frame, &[&away, &near], &MatchParams::default()) {
            ContourMatch::Existing { index, .. } => assert_eq!(index, 1),
            ContourMatch::New => panic!("should match"),
        }
        // Order swap flips the index, proving the cue and not ordering wins.
        match match_contour(&region, &frame, &[&near, &away], &MatchParams::default()) {
            ContourMatch::Existing { index, .. } => assert_eq!(index, 0),
            ContourMatch::New => panic!("should match"),
        }
    }

    #[test]
    fn inflate_zero_margin_is_identity() {
        let (_, region) = frame_with_square(64, 48, 20, 10, 12, [1, 2, 3]);
        assert_eq!(inflate(&region, 0), region.mask);
        let inflated = inflate(&region, 3);
        for i in 0..inflated.data.len() {
            assert!(!region.mask.data[i] || inflated.data[i]);
        }
    }

    #[test]
    fn foreground_matches_bruteforce_scan() {
        let (mut frame, region) = frame_with_square(64, 48, 20, 10, 12, [200, 40, 30]);
        // Punch some invalid depth holes.
        frame.depth.set(22, 12, 0.0);
        frame.depth.set(25, 15, 0.0);
        let obj = init_object_2d(1, &region, &frame, 4);
        let fg = foreground(&obj.sdf, &frame);
        // Oracle: full scan over the window.
        let mut expect = Vec::new();
        for wy in 0..obj.sdf.height() {
            for wx in 0..obj.sdf.width() {
                let (x, y) = (obj.sdf.x0 + wx, obj.sdf.y0 + wy);
                if *obj.sdf.grid.get(wx, wy) < 0.0 && *frame.depth.get(x, y) > 0.0 {
                    expect.push((x, y));
                }
            }
        }
        assert_eq!(fg.len(), expect.len());
        for ((x, y, d, _), (ex, ey)) in fg.iter().zip(&expect) {
            assert_eq!((x, y), (ex, ey));
            assert!(*d > 0.0);
        }
        // Area is close to the square (SDF boundary sits between pixels).
        assert!((fg.len() as i64 - 142).unsigned_abs() < 20);
    }

    #[test]
    fn circle_sdf_foreground_count() {
        // Circle SDF of radius 5: ~pi*25 inside pixels, every one phi < 0.
        let (w, h) = (32, 32);
        let mut grid: Grid<f64> = Grid::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let d = ((x as f64 - 16.0).powi(2) + (y as f64 - 16.0).powi(2)).sqrt() - 5.0;
                grid.set(x, y, d);
            }
        }
        let sdf = Sdf2D { x0: 0, y0: 0, grid };
        let mut depth = DepthImage::new(w, h);
        depth.data.fill(1.0);
        let frame = RgbdFrame {
            rgb: ColorImage::new(w, h),
            depth,
            index: 0,
        };
        let fg = foreground(&sdf, &frame);
        let expected = std::f64::consts::PI * 25.0;
        assert!((fg.len() as f64 - expected).abs() < 12.0, "{}", fg.len());
        // All-invalid depth gives the empty set.
        let mut frame2 = frame;
        frame2.depth.data.fill(0.0);
        assert!(foreground(&sdf, &frame2).is_empty());
    }

    #[test]
    fn histogram_update_blend_rules() {
        let (frame, region) = frame_with_square(64, 48, 20, 10, 12, [200, 40, 30]);
        let obj = init_object_2d(1, &region, &frame, 4);
        let same = update_histograms(&obj.appearance, &frame, &obj.sdf, 0.0).unwrap();
        assert_eq!(same.fg, obj.appearance.fg);
        let replaced = update_histograms(&obj.appearance, &frame, &obj.sdf, 1.0).unwrap();
        assert!((replaced.fg.sum() - 1.0).abs() < 1e-9);
        // 100 successive updates preserve normalization.
        let mut acc = obj.appearance.clone();
        for _ in 0..100 {
            acc = update_histograms(&acc, &frame, &obj.sdf, 0.1).unwrap();
        }
        assert!((acc.fg.sum() - 1.0).abs() < 1e-9);
        assert!((acc.bg.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_foreground_is_an_error() {
        let (frame, region) = frame_with_square(64, 48, 20, 10, 12, [200, 40, 30]);
        let mut obj = init_object_2d(1, &region, &frame, 4);
        for v in &mut obj.sdf.grid.data {
            *v = 1.0;
        }
        assert!(matches!(
            update_histograms(&obj.appearance, &frame, &obj.sdf, 0.1),
            Err(Tracking2dError::EmptyForeground)
        ));
    }
}
