//! Binary-mask regions: 8-connected components, boundary tracing and
//! morphological dilation.

use crate::image::{Grid, LabelImage, Mask};

/// A closed pixel region extracted from a binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    /// Full-frame membership mask.
    pub mask: Mask,
    pub area: usize,
    /// Topmost-leftmost boundary pixel (scan order anchor).
    pub anchor: (usize, usize),
    /// Boundary polygon in clockwise order, starting at `anchor`.
    pub boundary: Vec<(usize, usize)>,
    /// Inclusive bounds (x0, y0, x1, y1).
    pub bbox: (usize, usize, usize, usize),
}

impl Region {
    pub fn centroid(&self) -> (f64, f64) {
        let mut sx = 0.0;
        let mut sy = 0.0;
        for y in self.bbox.1..=self.bbox.3 {
            for x in self.bbox.0..=self.bbox.2 {
                if *self.mask.get(x, y) {
                    sx += x as f64;
                    sy += y as f64;
                }
            }
        }
        (sx / self.area as f64, sy / self.area as f64)
    }

    pub fn iou(&self, other: &Region) -> f64 {
        self.mask.iou(&other.mask)
    }
}

const NEIGHBORS8: [(i64, i64); 8] = [
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
];

/// Extract 8-connected components with at least `min_area` pixels, ordered by
/// their topmost-leftmost anchor.
pub fn connected_components(mask: &Mask, min_area: usize) -> Vec<Region> {
    let (w, h) = (mask.width, mask.height);
    let mut visited = Mask::new(w, h);
    let mut regions = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !*mask.get(x, y) || *visited.get(x, y) {
                continue;
            }
            let mut component = Mask::new(w, h);
            let mut stack = vec![(x, y)];
            visited.set(x, y, true);
            let mut area = 0usize;
            let mut bbox = (x, y, x, y);
            while let Some((cx, cy)) = stack.pop() {
                component.set(cx, cy, true);
                area += 1;
                bbox.0 = bbox.0.min(cx);
                bbox.1 = bbox.1.min(cy);
                bbox.2 = bbox.2.max(cx);
                bbox.3 = bbox.3.max(cy);
                for (dx, dy) in NEIGHBORS8 {
                    let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                    if mask.in_bounds(nx, ny) {
                        let (nx, ny) = (nx as usize, ny as usize);
                        if *mask.get(nx, ny) && !*visited.get(nx, ny) {
                            visited.set(nx, ny, true);
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            if area >= min_area {
                let boundary = trace_boundary(&component, (x, y));
                regions.push(Region {
                    mask: component,
                    area,
                    anchor: (x, y),
                    boundary,
                    bbox,
                });
            }
        }
    }
    // Scan order already yields topmost-leftmost anchors first.
    regions
}

/// Moore-neighbor boundary trace, clockwise in image coordinates (y down),
/// starting from the topmost-leftmost region pixel. Terminates when the
/// (pixel, backtrack) tracer state repeats, which closes the contour.
pub fn trace_boundary(mask: &Mask, start: (usize, usize)) -> Vec<(usize, usize)> {
    let inside = |p: (i64, i64)| mask.in_bounds(p.0, p.1) && *mask.get(p.0 as usize, p.1 as usize);
    let dir_index = |from: (i64, i64), to: (i64, i64)| -> usize {
        let d = (to.0 - from.0, to.1 - from.1);
        NEIGHBORS8.iter().position(|&n| n == d).expect("adjacent")
    };

    let start_i = (start.0 as i64, start.1 as i64);
    let mut current = start_i;
    // The scan enters the start pixel from the west.
    let mut backtrack = (start_i.0 - 1, start_i.1);
    let mut boundary = vec![start];
    let mut seen = std::collections::HashSet::new();
    seen.insert((current, backtrack));

    let max_steps = 8 * mask.width * mask.height + 8;
    for _ in 0..max_steps {
        let d0 = dir_index(current, backtrack);
        let mut next = None;
        for step in 1..=8 {
            let dir = (d0 + step) % 8;
            let cand = (current.0 + NEIGHBORS8[dir].0, current.1 + NEIGHBORS8[dir].1);
            if inside(cand) {
                let prev_dir = (d0 + step - 1) % 8;
                let new_backtrack = (
                    current.0 + NEIGHBORS8[prev_dir].0,
                    current.1 + NEIGHBORS8[prev_dir].1,
                );
                next = Some((cand, new_backtrack));
                break;
            }
        }
        let Some((cand, new_backtrack)) = next else {
            break; // isolated pixel
        };
        if !seen.insert((cand, new_backtrack)) {
            break;
        }
        boundary.push((cand.0 as usize, cand.1 as usize));
        current = cand;
        backtrack = new_backtrack;
    }
    // A cycle that re-enters the start leaves a redundant trailing copy.
    if boundary.len() > 1 && boundary.last() == boundary.first() {
        boundary.pop();
    }
    boundary
}

/// Morphological dilation by a disk of the given radius, clipped to bounds.
pub fn dilate_disk(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let r2 = (radius * radius) as i64;
    let mut offsets = Vec::new();
    let r = radius as i64;
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r2 {
                offsets.push((dx, dy));
            }
        }
    }
    let mut out = Mask::new(mask.width, mask.height);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if *mask.get(x, y) {
                for &(dx, dy) in &offsets {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if mask.in_bounds(nx, ny) {
                        out.set(nx as usize, ny as usize, true);
                    }
                }
            }
        }
    }
    out
}

/// Paint regions into a label image; region i gets label i+1 (0 = background).
pub fn regions_to_labels(regions: &[Region], width: usize, height: usize) -> LabelImage {
    let mut labels: LabelImage = Grid::new(width, height);
    for (i, region) in regions.iter().enumerate() {
        for y in region.bbox.1..=region.bbox.3 {
            for x in region.bbox.0..=region.bbox.2 {
                if *region.mask.get(x, y) {
                    labels.set(x, y, i as u32 + 1);
                }
            }
        }
    }
    labels
}

/// Collect the masks of each distinct nonzero label, in ascending label order.
pub fn labels_to_masks(labels: &LabelImage) -> Vec<(u32, Mask)> {
    let mut ids: Vec<u32> = labels.data.iter().copied().filter(|&l| l != 0).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.into_iter()
        .map(|id| {
            let mut m = Mask::new(labels.width, labels.height);
            for (i, &l) in labels.data.iter().enumerate() {
                if l == id {
                    m.data[i] = true;
                }
            }
            (id, m)
        })
        .collect()
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
    fn single_blob_above_threshold() {
        let m = mask_from_str(&["....", ".##.", ".##.", "...."]);
        let regions = connected_components(&m, 3);
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].area, 4);
        assert_eq!(regions[0].anchor, (1, 1));
    }

    #[test]
    fn blob_below_threshold_dropped() {
        let m = mask_from_str(&["#..", "...", "..#"]);
        assert!(connected_components(&m, 2).is_empty());
        assert_eq!(connected_components(&m, 1).len(), 2);
    }

    #[test]
    fn two_blobs_ordered_by_anchor() {
        let m = mask_from_str(&["...##", ".....", "##..."]);
        let regions = connected_components(&m, 1);
        assert_eq!(regions.len(), 2);
        assert_eq!(regions[0].anchor, (3, 0));
        assert_eq!(regions[1].anchor, (0, 2));
    }

    #[test]
    fn diagonal_pixels_are_8_connected() {
        let m = mask_from_str(&["#..", ".#.", "..#"]);
        assert_eq!(connected_components(&m, 1).len(), 1);
    }

    #[test]
    fn boundary_of_square_is_its_perimeter() {
        let m = mask_from_str(&[".....", ".###.", ".###.", ".###.", "....."]);
        let regions = connected_components(&m, 1);
        let b = &regions[0].boundary;
        assert_eq!(b.len(), 8);
        assert_eq!(b[0], (1, 1));
        // Clockwise: the second point must be to the right of the start, not below.
        assert_eq!(b[1], (2, 1));
        let set: std::collections::HashSet<_> = b.iter().copied().collect();
        assert!(!set.contains(&(2, 2)), "interior pixel in boundary");
    }

    #[test]
    fn boundary_of_single_pixel() {
        let m = mask_from_str(&["...", ".#.", "..."]);
        let regions = connected_components(&m, 1);
        assert_eq!(regions[0].boundary, vec![(1, 1)]);
    }

    /// Brute-force dilation oracle.
    fn dilate_brute(mask: &Mask, radius: usize) -> Mask {
        let mut out = Mask::new(mask.width, mask.height);
        let r2 = (radius * radius) as i64;
        for y in 0..mask.height as i64 {
            for x in 0..mask.width as i64 {
                'search: for sy in 0..mask.height as i64 {
                    for sx in 0..mask.width as i64 {
                        if *mask.get(sx as usize, sy as usize)
                            && (sx - x) * (sx - x) + (sy - y) * (sy - y) <= r2
                        {
                            out.set(x as usize, y as usize, true);
                            break 'search;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn dilation_matches_brute_force() {
        let m = mask_from_str(&[
            "..........",
            "..##......",
            "..##...#..",
            "..........",
            "....#.....",
        ]);
        for radius in [0, 1, 2, 3] {
            assert_eq!(dilate_disk(&m, radius), dilate_brute(&m, radius));
        }
    }

    #[test]
    fn dilation_is_superset_and_rounds_corners() {
        // 10x10 square dilated by 2 in a large frame: 14x14 with cut corners.
        let mut m = Mask::new(20, 20);
        for y in 5..15 {
            for x in 5..15 {
                m.set(x, y, true);
            }
        }
        let d = dilate_disk(&m, 2);
        for i in 0..m.data.len() {
            assert!(!m.data[i] || d.data[i]);
        }
        // Count matches the disk-sum: 14*14 minus 4 corners of 3 px each.
        assert_eq!(d.count(), 14 * 14 - 4 * 3);
        assert!(*d.get(3, 10) && *d.get(10, 3));
        assert!(!*d.get(3, 3), "corner should be rounded off");
    }

    #[test]
    fn labels_round_trip() {
        let m = mask_from_str(&["##...", ".....", "...##"]);
        let regions = connected_components(&m, 1);
        let labels = regions_to_labels(&regions, 5, 3);
        let masks = labels_to_masks(&labels);
        assert_eq!(masks.len(), 2);
        assert_eq!(masks[0].1, regions[0].mask);
        assert_eq!(masks[1].1, regions[1].mask);
    }
}
