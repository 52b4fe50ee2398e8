//! Agglomerative merge of 3D superpixels by mean color, and extraction of
//! candidate regions on the window's last frame.

use super::affinity::AffinityGraph;
use crate::image::{Grid, LabelImage, Mask, RgbdFrame};
use crate::regions::{connected_components, Region};

/// Merge lattice-adjacent superpixels whose mean-color distance is strictly
/// below `tau`. Smallest distance first, lowest label pair on ties. Returns
/// the merged label per node.
pub fn merge_labels(graph: &AffinityGraph, labels: &[u32], tau: f64) -> Vec<u32> {
    assert_eq!(labels.len(), graph.nodes.len());
    let k = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    if k == 0 {
        return labels.to_vec();
    }

    // Mean color and size per superpixel.
    let mut sums = vec![[0.0f64; 3]; k];
    let mut counts = vec![0usize; k];
    for (node, &l) in graph.nodes.iter().zip(labels) {
        let l = l as usize;
        counts[l] += 1;
        for c in 0..3 {
            sums[l][c] += node.color[c] as f64;
        }
    }

    // Adjacency between superpixels: 4-neighbors on each frame lattice, plus
    // temporal flow links so 3D superpixels can merge across frames.
    let mut adjacent = std::collections::BTreeSet::new();
    let (lw, lh) = (graph.lattice_w, graph.lattice_h);
    for f in 0..graph.frames {
        for y in 0..lh {
            for x in 0..lw {
                let a = labels[graph.node_id(f, x, y)];
                if x + 1 < lw {
                    let b = labels[graph.node_id(f, x + 1, y)];
                    if a != b {
                        adjacent.insert((a.min(b), a.max(b)));
                    }
                }
                if y + 1 < lh {
                    let b = labels[graph.node_id(f, x, y + 1)];
                    if a != b {
                        adjacent.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
    }
    for (i, row) in graph.w.rows.iter().enumerate() {
        let fi = graph.nodes[i].frame;
        for &(j, _) in row {
            if graph.nodes[j as usize].frame != fi {
                let (a, b) = (labels[i], labels[j as usize]);
                if a != b {
                    adjacent.insert((a.min(b), a.max(b)));
                }
            }
        }
    }

    // Union-find over superpixel labels.
    let mut parent: Vec<u32> = (0..k as u32).collect();
    fn find(parent: &mut [u32], i: u32) -> u32 {
        let mut i = i;
        while parent[i as usize] != i {
            parent[i as usize] = parent[parent[i as usize] as usize];
            i = parent[i as usize];
        }
        i
    }

    let dist = |sums: &[[f64; 3]], counts: &[usize], a: u32, b: u32| -> f64 {
        let (a, b) = (a as usize, b as usize);
        let mut d2 = 0.0;
        for c in 0..3 {
            let ma = sums[a][c] / counts[a] as f64;
            let mb = sums[b][c] / counts[b] as f64;
            d2 += (ma - mb) * (ma - mb);
        }
        d2.sqrt()
    };

    loop {
        // Current root-level adjacency with minimum color distance.
        let mut best: Option<(f64, u32, u32)> = None;
        let mut seen = std::collections::BTreeSet::new();
        for &(a, b) in &adjacent {
            let ra = find(&mut parent, a);
            let rb = find(&mut parent, b);
            if ra == rb {
                continue;
            }
            let key = (ra.min(rb), ra.max(rb));
            if !seen.insert(key) {
                continue;
            }
            let d = dist(&sums, &counts, key.0, key.1);
            let better = match best {
                None => true,
                Some((bd, ba, bb)) => d < bd || (d == bd && (key.0, key.1) < (ba, bb)),
            };
            if better {
                best = Some((d, key.0, key.1));
            }
        }
        match best {
            Some((d, a, b)) if d < tau => {
                // Merge b into a (a < b).
                parent[b as usize] = a;
                for c in 0..3 {
                    sums[a as usize][c] += sums[b as usize][c];
                }
                counts[a as usize] += counts[b as usize];
            }
            _ => break,
        }
    }

    labels
        .iter()
        .map(|&l| find(&mut parent, l))
        .collect()
}

/// A set of disjoint candidate regions on one key frame.
#[derive(Debug, Clone)]
pub struct CandidateContourSet {
    pub frame_index: usize,
    pub width: usize,
    pub height: usize,
    pub regions: Vec<Region>,
}

impl CandidateContourSet {
    pub fn to_label_image(&self) -> LabelImage {
        crate::regions::regions_to_labels(&self.regions, self.width, self.height)
    }
}

/// Rasterize merged node labels of the last frame to full resolution, drop
/// the largest segment (the dominant surface) and everything smaller than
/// `min_region_px`, and trace the surviving regions.
pub fn candidates_from_labels(
    graph: &AffinityGraph,
    merged: &[u32],
    frames: &[RgbdFrame],
    min_region_px: usize,
) -> CandidateContourSet {
    let last = graph.frames - 1;
    let frame = &frames[last];
    let (w, h) = (frame.width(), frame.height());
    let s = graph.stride;
    let mut full: LabelImage = Grid::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let lx = (x / s).min(graph.lattice_w - 1);
            let ly = (y / s).min(graph.lattice_h - 1);
            full.set(x, y, merged[graph.node_id(last, lx, ly)] + 1);
        }
    }

    // Pixel counts per merged label on the last frame.
    let mut counts = std::collections::BTreeMap::new();
    for &l in &full.data {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let dominant = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&l, _)| l);

    let mut regions = Vec::new();
    for (&label, &count) in &counts {
        if Some(label) == dominant || count < min_region_px {
            continue;
        }
        let mut mask = Mask::new(w, h);
        for (i, &l) in full.data.iter().enumerate() {
            mask.data[i] = l == label;
        }
        // A merged label may be spatially disconnected; keep components
        // separately so candidate regions are closed and disjoint.
        regions.extend(connected_components(&mask, min_region_px));
    }
    // Deterministic order by anchor.
    regions.sort_by_key(|r| (r.anchor.1, r.anchor.0));
    CandidateContourSet {
        frame_index: frame.index,
        width: w,
        height: h,
        regions,
    }
}
