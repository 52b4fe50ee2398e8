//! 2D signed distance grids over an image window, built with an exact
//! Euclidean distance transform.

use crate::image::{Grid, Mask};
use serde::{Deserialize, Serialize};

/// Signed distance function over a window of the image; negative inside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sdf2D {
    /// Window origin in image coordinates.
    pub x0: usize,
    pub y0: usize,
    /// Distances in pixels.
    pub grid: Grid<f64>,
}

impl Sdf2D {
    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    /// Signed distance of the window-local mask: inside pixels get
    /// 0.5 - d(outside), outside pixels d(inside) - 0.5, so the zero level
    /// runs midway between boundary pixels and |grad| is 1.
    pub fn from_mask(x0: usize, y0: usize, inside: &Mask) -> Self {
        let dist_to_inside = edt(inside);
        let mut complement = Mask::new(inside.width, inside.height);
        for (c, &m) in complement.data.iter_mut().zip(&inside.data) {
            *c = !m;
        }
        let dist_to_outside = edt(&complement);
        let mut grid = Grid::new(inside.width, inside.height);
        for i in 0..grid.data.len() {
            grid.data[i] = if inside.data[i] {
                0.5 - dist_to_outside.data[i]
            } else {
                dist_to_inside.data[i] - 0.5
            };
        }
        Sdf2D { x0, y0, grid }
    }

    /// Pixels strictly inside the zero level set (window-local mask).
    pub fn inside_mask(&self) -> Mask {
        let mut m = Mask::new(self.grid.width, self.grid.height);
        for (b, &v) in m.data.iter_mut().zip(&self.grid.data) {
            *b = v < 0.0;
        }
        m
    }

    /// Reinitialize to a true signed distance with the same inside set.
    pub fn reinitialized(&self) -> Self {
        Self::from_mask(self.x0, self.y0, &self.inside_mask())
    }

    /// Sub-pixel zero crossings on horizontal/vertical grid edges,
    /// window-local coordinates.
    pub fn zero_crossings(&self) -> Vec<(f64, f64)> {
        let g = &self.grid;
        let mut pts = Vec::new();
        for y in 0..g.height {
            for x in 0..g.width {
                let a = *g.get(x, y);
                if x + 1 < g.width {
                    let b = *g.get(x + 1, y);
                    if (a < 0.0) != (b < 0.0) {
                        let t = a / (a - b);
                        pts.push((x as f64 + t, y as f64));
                    }
                }
                if y + 1 < g.height {
                    let b = *g.get(x, y + 1);
                    if (a < 0.0) != (b < 0.0) {
                        let t = a / (a - b);
                        pts.push((x as f64, y as f64 + t));
                    }
                }
            }
        }
        pts
    }
}

/// Symmetric Hausdorff distance between two point sets.
pub fn hausdorff(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let one_sided = |from: &[(f64, f64)], to: &[(f64, f64)]| -> f64 {
        from.iter()
            .map(|&(x, y)| {
                to.iter()
                    .map(|&(u, v)| ((x - u).powi(2) + (y - v).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    if a.is_empty() || b.is_empty() {
        return f64::INFINITY;
    }
    one_sided(a, b).max(one_sided(b, a))
}

/// Exact Euclidean distance to the nearest `true` pixel
/// (Felzenszwalb-Huttenlocher two-pass transform).
pub fn edt(mask: &Mask) -> Grid<f64> {
    const INF: f64 = 1e18;
    let (w, h) = (mask.width, mask.height);
    let mut sq = vec![INF; w * h];
    for i in 0..w * h {
        if mask.data[i] {
            sq[i] = 0.0;
        }
    }
    // Columns.
    let mut f = vec![0.0f64; h.max(w)];
    let mut d = vec![0.0f64; h.max(w)];
    let mut v = vec![0usize; h.max(w)];
    let mut z = vec![0.0f64; h.max(w) + 1];
    for x in 0..w {
        for y in 0..h {
            f[y] = sq[y * w + x];
        }
        dt_1d(&f[..h], &mut d, &mut v, &mut z);
        for y in 0..h {
            sq[y * w + x] = d[y];
        }
    }
    // Rows.
    for y in 0..h {
        f[..w].copy_from_slice(&sq[y * w..(y + 1) * w]);
        dt_1d(&f[..w], &mut d, &mut v, &mut z);
        sq[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    let mut out = Grid::new(w, h);
    for i in 0..w * h {
        out.data[i] = if sq[i] >= INF { INF } else { sq[i].sqrt() };
    }
    out
}

/// 1D squared-distance transform under a parabola envelope.
fn dt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let vk = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[vk] + (vk * vk) as f64))
                / (2.0 * q as f64 - 2.0 * vk as f64);
            if s <= z[k] {
                if k == 0 {
                    // Degenerate: replace the first parabola.
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let vk = v[k];
        d[q] = (q as f64 - vk as f64).powi(2) + f[vk];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from_str(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        let mut m = Mask::new(w, h);
        for (y, row) in rows.iter().enumerate() {
            for (x, c) in row.chars().enumerate() {
                if c == '#' {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    #[test]
    fn edt_matches_brute_force() {
        let m = mask_from_str(&["#.....", "......", "...#..", "......", ".....#"]);
        let d = edt(&m);
        for y in 0..5 {
            for x in 0..6 {
                let mut best = f64::INFINITY;
                for sy in 0..5 {
                    for sx in 0..6 {
                        if *m.get(sx, sy) {
                            let dd = (((sx as i64 - x as i64).pow(2)
                                + (sy as i64 - y as i64).pow(2))
                                as f64)
                                .sqrt();
                            best = best.min(dd);
                        }
                    }
                }
                assert!((d.get(x, y) - best).abs() < 1e-9, "({x},{y})");
            }
        }
    }

    #[test]
    fn sdf_sign_convention_and_eikonal() {
        let mut inside = Mask::new(40, 40);
        for y in 10..30 {
            for x in 10..30 {
                inside.set(x, y, true);
            }
        }
        let sdf = Sdf2D::from_mask(0, 0, &inside);
        assert!(*sdf.grid.get(20, 20) < 0.0);
        assert!(*sdf.grid.get(2, 2) > 0.0);
        // |grad| close to 1 on at least 90% of cells.
        let g = &sdf.grid;
        let mut ok = 0usize;
        let mut total = 0usize;
        for y in 1..39 {
            for x in 1..39 {
                let gx = (g.get(x + 1, y) - g.get(x - 1, y)) / 2.0;
                let gy = (g.get(x, y + 1) - g.get(x, y - 1)) / 2.0;
                let n = (gx * gx + gy * gy).sqrt();
                total += 1;
                if (n - 1.0).abs() <= 0.2 {
                    ok += 1;
                }
            }
        }
        assert!(ok as f64 / total as f64 >= 0.9);
        // Round trip: the inside set is reproduced exactly.
        assert_eq!(sdf.inside_mask(), inside);
    }

    #[test]
    fn reinitialization_preserves_zero_set() {
        // A deliberately distorted SDF: scaled and offset circle field.
        let mut grid = Grid::new(50, 50);
        for y in 0..50 {
            for x in 0..50 {
                let d = ((x as f64 - 25.0).powi(2) + (y as f64 - 25.0).powi(2)).sqrt() - 12.0;
                grid.set(x, y, 3.0 * d + 0.2 * (x as f64 * 0.7).sin());
            }
        }
        let sdf = Sdf2D { x0: 0, y0: 0, grid };
        let before = sdf.zero_crossings();
        let re = sdf.reinitialized();
        let after = re.zero_crossings();
        let h = hausdorff(&before, &after);
        assert!(h < 1.0, "zero set moved by {h}");
    }
}
