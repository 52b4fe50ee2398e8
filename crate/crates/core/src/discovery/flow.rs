//! Dense pyramidal Lucas-Kanade flow with a forward-backward consistency
//! check. Backward convention: the flow at a pixel of frame t points to the
//! matching position in frame t-1.

use crate::image::{FlowField, GrayImage, Grid, RgbdFrame};
use rayon::prelude::*;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FlowParams {
    /// Pyramid levels including full resolution.
    pub levels: usize,
    /// Half-size of the square integration window.
    pub window: usize,
    /// Gauss-Newton iterations per level.
    pub iterations: usize,
    /// Minimum eigenvalue of the structure tensor per window pixel.
    pub min_eigen: f32,
    /// Forward-backward inconsistency above this marks a pixel invalid (px).
    pub fb_threshold: f32,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            levels: 3,
            window: 3,
            iterations: 4,
            min_eigen: 1e-5,
            fb_threshold: 1.0,
        }
    }
}

fn downsample(img: &GrayImage) -> GrayImage {
    let w = (img.width / 2).max(1);
    let h = (img.height / 2).max(1);
    let mut out = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let x0 = 2 * x;
            let y0 = 2 * y;
            let x1 = (x0 + 1).min(img.width - 1);
            let y1 = (y0 + 1).min(img.height - 1);
            let s = img.get(x0, y0) + img.get(x1, y0) + img.get(x0, y1) + img.get(x1, y1);
            out.set(x, y, s * 0.25);
        }
    }
    out
}

fn pyramid(img: &GrayImage, levels: usize) -> Vec<GrayImage> {
    let mut pyr = vec![img.clone()];
    for _ in 1..levels {
        let next = downsample(pyr.last().unwrap());
        if next.width < 8 || next.height < 8 {
            break;
        }
        pyr.push(next);
    }
    pyr
}

/// Central-difference gradients.
fn gradients(img: &GrayImage) -> (GrayImage, GrayImage) {
    let (w, h) = (img.width, img.height);
    let mut gx = GrayImage::new(w, h);
    let mut gy = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            gx.set(x, y, (img.get(xp, y) - img.get(xm, y)) * 0.5);
            gy.set(x, y, (img.get(x, yp) - img.get(x, ym)) * 0.5);
        }
    }
    (gx, gy)
}

/// Dense LK flow from `from` toward `to`: result w satisfies
/// from(x) ~= to(x + w(x)).
fn lk_dense(from: &GrayImage, to: &GrayImage, params: &FlowParams) -> (Grid<f32>, Grid<f32>) {
    let pyr_from = pyramid(from, params.levels);
    let pyr_to = pyramid(to, params.levels);
    let levels = pyr_from.len().min(pyr_to.len());

    let mut u = Grid::<f32>::new(pyr_from[levels - 1].width, pyr_from[levels - 1].height);
    let mut v = Grid::<f32>::new(u.width, u.height);

    for level in (0..levels).rev() {
        let f = &pyr_from[level];
        let t = &pyr_to[level];
        // Upsample the coarser estimate.
        if u.width != f.width || u.height != f.height {
            let mut u2 = Grid::<f32>::new(f.width, f.height);
            let mut v2 = Grid::<f32>::new(f.width, f.height);
            for y in 0..f.height {
                for x in 0..f.width {
                    let sx = x as f32 * u.width as f32 / f.width as f32;
                    let sy = y as f32 * u.height as f32 / f.height as f32;
                    u2.set(x, y, u.sample_bilinear(sx, sy) * 2.0);
                    v2.set(x, y, v.sample_bilinear(sx, sy) * 2.0);
                }
            }
            u = u2;
            v = v2;
        }
        let (gx, gy) = gradients(t);
        let win = params.window as i64;
        let min_eig_total = params.min_eigen * ((2 * win + 1) * (2 * win + 1)) as f32;

        for _ in 0..params.iterations {
            let rows: Vec<Vec<(f32, f32)>> = (0..f.height)
                .into_par_iter()
                .map(|y| {
                    let mut row = Vec::with_capacity(f.width);
                    for x in 0..f.width {
                        let (mut du, mut dv) = (0.0f32, 0.0f32);
                        let u0 = *u.get(x, y);
                        let v0 = *v.get(x, y);
                        let mut a11 = 0.0f32;
                        let mut a12 = 0.0f32;
                        let mut a22 = 0.0f32;
                        let mut b1 = 0.0f32;
                        let mut b2 = 0.0f32;
                        for wy in -win..=win {
                            for wx in -win..=win {
                                let px = x as f32 + wx as f32;
                                let py = y as f32 + wy as f32;
                                if px < 0.0
                                    || py < 0.0
                                    || px > (f.width - 1) as f32
                                    || py > (f.height - 1) as f32
                                {
                                    continue;
                                }
                                let tx = px + u0;
                                let ty = py + v0;
                                let ix = gx.sample_bilinear(tx, ty);
                                let iy = gy.sample_bilinear(tx, ty);
                                let err = t.sample_bilinear(tx, ty)
                                    - f.sample_bilinear(px, py);
                                a11 += ix * ix;
                                a12 += ix * iy;
                                a22 += iy * iy;
                                b1 -= ix * err;
                                b2 -= iy * err;
                            }
                        }
                        let trace = a11 + a22;
                        let det = a11 * a22 - a12 * a12;
                        let disc = (trace * trace * 0.25 - det).max(0.0).sqrt();
                        let min_eig = trace * 0.5 - disc;
                        if min_eig > min_eig_total && det.abs() > 1e-12 {
                            du = (a22 * b1 - a12 * b2) / det;
                            dv = (a11 * b2 - a12 * b1) / det;
                            // Clamp wild steps to half a window.
                            let cap = win as f32;
                            du = du.clamp(-cap, cap);
                            dv = dv.clamp(-cap, cap);
                        }
                        row.push((u0 + du, v0 + dv));
                    }
                    row
                })
                .collect();
            for (y, row) in rows.into_iter().enumerate() {
                for (x, (nu, nv)) in row.into_iter().enumerate() {
                    u.set(x, y, nu);
                    v.set(x, y, nv);
                }
            }
        }
    }
    (u, v)
}

/// Backward flow from `cur` (frame t) to `prev` (frame t-1), with pixels
/// failing the forward-backward check marked invalid.
pub fn estimate_flow(
    prev: &RgbdFrame,
    cur: &RgbdFrame,
    params: &FlowParams,
) -> Result<FlowField, super::DiscoveryError> {
    if prev.width() != cur.width() || prev.height() != cur.height() {
        return Err(super::DiscoveryError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            prev.width(),
            prev.height(),
            cur.width(),
            cur.height()
        )));
    }
    let gray_prev = prev.rgb.to_gray();
    let gray_cur = cur.rgb.to_gray();
    let (bu, bv) = lk_dense(&gray_cur, &gray_prev, params);
    let (fu, fv) = lk_dense(&gray_prev, &gray_cur, params);

    let mut flow = FlowField::new(cur.width(), cur.height());
    let mut fu_img = GrayImage::new(fu.width, fu.height);
    fu_img.data = fu.data.clone();
    let mut fv_img = GrayImage::new(fv.width, fv.height);
    fv_img.data = fv.data.clone();

    for y in 0..cur.height() {
        for x in 0..cur.width() {
            let i = flow.u.idx(x, y);
            let u = bu.data[i];
            let v = bv.data[i];
            let tx = x as f32 + u;
            let ty = y as f32 + v;
            if tx < 0.0
                || ty < 0.0
                || tx > (cur.width() - 1) as f32
                || ty > (cur.height() - 1) as f32
            {
                continue;
            }
            let fwd_u = fu_img.sample_bilinear(tx, ty);
            let fwd_v = fv_img.sample_bilinear(tx, ty);
            let ex = u + fwd_u;
            let ey = v + fwd_v;
            if (ex * ex + ey * ey).sqrt() <= params.fb_threshold {
                flow.u.data[i] = u;
                flow.v.data[i] = v;
                flow.valid.data[i] = true;
            }
        }
    }
    Ok(flow)
}
