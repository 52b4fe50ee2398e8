//! Spatio-temporal affinity graph over a subsampled pixel lattice, and its
//! symmetric normalization.

use crate::image::{FlowField, RgbdFrame};
use rayon::prelude::*;

/// Symmetric sparse matrix stored as per-row adjacency lists. Every entry is
/// stored in both rows.
#[derive(Debug, Clone, Default)]
pub struct SparseMatrix {
    pub n: usize,
    pub rows: Vec<Vec<(u32, f64)>>,
}

impl SparseMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            rows: vec![Vec::new(); n],
        }
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.rows[i].iter().map(|&(_, w)| w).sum()
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    /// Max |W - W^T| entry, for symmetry assertions.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                let back = self.rows[j as usize]
                    .iter()
                    .find(|&&(jj, _)| jj as usize == i)
                    .map(|&(_, w2)| w2);
                match back {
                    Some(w2) => worst = worst.max((w - w2).abs()),
                    None => worst = worst.max(w.abs()),
                }
            }
        }
        worst
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                m[(i, j as usize)] += w;
            }
        }
        m
    }
}

/// One graph node: a sampled pixel in a specific frame.
#[derive(Debug, Clone, Copy)]
pub struct GraphNode {
    pub frame: u32,
    /// Pixel coordinates in the full-resolution image.
    pub x: u32,
    pub y: u32,
    pub color: [f32; 3],
    pub depth: f32,
}

/// Affinity graph over `frames.len()` subsampled lattices.
#[derive(Debug, Clone)]
pub struct AffinityGraph {
    pub nodes: Vec<GraphNode>,
    pub w: SparseMatrix,
    pub stride: usize,
    pub lattice_w: usize,
    pub lattice_h: usize,
    pub frames: usize,
}

impl AffinityGraph {
    #[inline]
    pub fn node_id(&self, frame: usize, lx: usize, ly: usize) -> usize {
        (frame * self.lattice_h + ly) * self.lattice_w + lx
    }
}

#[derive(Debug, Clone)]
pub struct AffinityParams {
    /// Lattice subsampling stride in pixels.
    pub stride: usize,
    /// Intra-frame connection radius in pixels.
    pub radius: f64,
    /// Color similarity scale (0-255 units).
    pub sigma_color: f64,
    /// Spatial similarity scale (pixels).
    pub sigma_dist: f64,
    /// Optional depth similarity scale (meters); extension, off by default.
    pub sigma_depth: Option<f64>,
}

impl Default for AffinityParams {
    fn default() -> Self {
        Self {
            stride: 2,
            radius: 5.0,
            sigma_color: 20.0,
            sigma_dist: 4.0,
            sigma_depth: None,
        }
    }
}

fn color_weight(a: [f32; 3], b: [f32; 3], sigma_color: f64) -> f64 {
    let d2 = (0..3).map(|c| ((a[c] - b[c]) as f64).powi(2)).sum::<f64>();
    (-d2 / (2.0 * sigma_color * sigma_color)).exp()
}

/// Build the spatio-temporal affinity graph. `flows[i]` must be the backward
/// flow of frame `i+1` toward frame `i`.
pub fn build_affinity(
    frames: &[RgbdFrame],
    flows: &[FlowField],
    params: &AffinityParams,
) -> Result<AffinityGraph, super::DiscoveryError> {
    if frames.len() < 2 {
        return Err(super::DiscoveryError::EmptySequence);
    }
    if flows.len() != frames.len() - 1 {
        return Err(super::DiscoveryError::DimensionMismatch(format!(
            "{} frames need {} flows, got {}",
            frames.len(),
            frames.len() - 1,
            flows.len()
        )));
    }
    let (w_px, h_px) = (frames[0].width(), frames[0].height());
    for f in frames {
        if f.width() != w_px || f.height() != h_px {
            return Err(super::DiscoveryError::DimensionMismatch(
                "frame sizes differ".into(),
            ));
        }
    }
    let s = params.stride.max(1);
    let lw = w_px.div_ceil(s);
    let lh = h_px.div_ceil(s);

    let mut nodes = Vec::with_capacity(frames.len() * lw * lh);
    for (fi, frame) in frames.iter().enumerate() {
        for ly in 0..lh {
            for lx in 0..lw {
                let x = (lx * s).min(w_px - 1);
                let y = (ly * s).min(h_px - 1);
                let c = frame.rgb.get(x, y);
                nodes.push(GraphNode {
                    frame: fi as u32,
                    x: x as u32,
                    y: y as u32,
                    color: [c[0] as f32, c[1] as f32, c[2] as f32],
                    depth: *frame.depth.get(x, y),
                });
            }
        }
    }

    // Intra-frame lattice offsets within the pixel radius.
    let max_step = (params.radius / s as f64).floor() as i64;
    let mut offsets = Vec::new();
    for dy in -max_step..=max_step {
        for dx in -max_step..=max_step {
            if dx == 0 && dy == 0 {
                continue;
            }
            let dist2 = ((dx * s as i64).pow(2) + (dy * s as i64).pow(2)) as f64;
            if dist2 <= params.radius * params.radius {
                offsets.push((dx, dy, dist2));
            }
        }
    }

    let per_frame = lw * lh;
    let node_id = |frame: usize, lx: usize, ly: usize| (frame * lh + ly) * lw + lx;

    let rows: Vec<Vec<(u32, f64)>> = (0..nodes.len())
        .into_par_iter()
        .map(|id| {
            let node = &nodes[id];
            let fi = node.frame as usize;
            let lx = (id % per_frame) % lw;
            let ly = (id % per_frame) / lw;
            let mut row = Vec::new();

            // Spatial neighbors in the same frame.
            for &(dx, dy, dist2) in &offsets {
                let nx = lx as i64 + dx;
                let ny = ly as i64 + dy;
                if nx < 0 || ny < 0 || nx >= lw as i64 || ny >= lh as i64 {
                    continue;
                }
                let j = node_id(fi, nx as usize, ny as usize);
                let other = &nodes[j];
                let mut w = color_weight(node.color, other.color, params.sigma_color)
                    * (-dist2 / (2.0 * params.sigma_dist * params.sigma_dist)).exp();
                if let Some(sd) = params.sigma_depth {
                    if node.depth > 0.0 && other.depth > 0.0 {
                        let dd = (node.depth - other.depth) as f64;
                        w *= (-dd * dd / (2.0 * sd * sd)).exp();
                    }
                }
                row.push((j as u32, w));
            }

            // Temporal neighbors: the 9 lattice nodes around the
            // flow-displaced location in the previous frame.
            if fi > 0 {
                let flow = &flows[fi - 1];
                let (px, py) = (node.x as usize, node.y as usize);
                let i = flow.u.idx(px, py);
                if flow.valid.data[i] {
                    let tx = node.x as f64 + flow.u.data[i] as f64;
                    let ty = node.y as f64 + flow.v.data[i] as f64;
                    let clx = (tx / s as f64).round() as i64;
                    let cly = (ty / s as f64).round() as i64;
                    for dy in -1..=1i64 {
                        for dx in -1..=1i64 {
                            let nx = clx + dx;
                            let ny = cly + dy;
                            if nx < 0 || ny < 0 || nx >= lw as i64 || ny >= lh as i64 {
                                continue;
                            }
                            let j = node_id(fi - 1, nx as usize, ny as usize);
                            let w = color_weight(node.color, nodes[j].color, params.sigma_color);
                            row.push((j as u32, w));
                        }
                    }
                }
            }
            row
        })
        .collect();

    // Mirror so the matrix is stored symmetrically (temporal links are built
    // one-directionally above).
    let mut w = SparseMatrix::new(nodes.len());
    for (i, row) in rows.iter().enumerate() {
        for &(j, weight) in row {
            w.rows[i].push((j, weight));
            if nodes[j as usize].frame != nodes[i].frame {
                w.rows[j as usize].push((i as u32, weight));
            }
        }
    }

    Ok(AffinityGraph {
        nodes,
        w,
        stride: s,
        lattice_w: lw,
        lattice_h: lh,
        frames: frames.len(),
    })
}

/// Normalized affinity L = D^(-1/2) W D^(-1/2) with isolated nodes dropped.
/// Returns the matrix over kept nodes plus the kept-node index map.
pub fn normalized_affinity(w: &SparseMatrix) -> (SparseMatrix, Vec<u32>) {
    let degrees: Vec<f64> = (0..w.n).map(|i| w.degree(i)).collect();
    let kept: Vec<u32> = (0..w.n).filter(|&i| degrees[i] > 0.0).map(|i| i as u32).collect();
    let mut remap = vec![u32::MAX; w.n];
    for (new, &old) in kept.iter().enumerate() {
        remap[old as usize] = new as u32;
    }
    let mut l = SparseMatrix::new(kept.len());
    for (new_i, &old_i) in kept.iter().enumerate() {
        let di = degrees[old_i as usize].sqrt();
        for &(j, weight) in &w.rows[old_i as usize] {
            let nj = remap[j as usize];
            if nj == u32::MAX {
                continue;
            }
            let dj = degrees[j as usize].sqrt();
            l.rows[new_i].push((nj, weight / (di * dj)));
        }
    }
    (l, kept)
}
