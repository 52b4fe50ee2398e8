//! Deterministic k-means over embedding rows with farthest-point seeding.

use super::spectral::Embedding;
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

const MAX_ITERS: usize = 60;

/// Cluster embedding rows into `k_clusters` groups. Rows are normalized to
/// the unit sphere first (zero rows stay at the origin), then the seed picks
/// the first center and the rest follow by farthest-point seeding with
/// lowest-index ties.
pub fn cluster_superpixels(raw: &Embedding, k_clusters: usize, seed: u64) -> Vec<u32> {
    let n = raw.n;
    let dim = raw.k;
    assert!(k_clusters >= 2, "need at least two clusters");
    if n == 0 {
        return Vec::new();
    }
    let k = k_clusters.min(n);

    let mut embedding = Embedding {
        n,
        k: dim,
        data: raw.data.clone(),
    };
    for i in 0..n {
        let row = &mut embedding.data[i * dim..(i + 1) * dim];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for v in row {
                *v /= norm;
            }
        }
    }
    let embedding = &embedding;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..n);
    let mut centers: Vec<Vec<f64>> = vec![embedding.row(first).to_vec()];
    let mut min_dist2: Vec<f64> = (0..n)
        .map(|i| dist2(embedding.row(i), &centers[0]))
        .collect();
    while centers.len() < k {
        let mut best = 0usize;
        let mut best_d = -1.0f64;
        for (i, &d) in min_dist2.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        centers.push(embedding.row(best).to_vec());
        let new_c = centers.last().unwrap().clone();
        for i in 0..n {
            let d = dist2(embedding.row(i), &new_c);
            if d < min_dist2[i] {
                min_dist2[i] = d;
            }
        }
    }

    let mut labels = vec![0u32; n];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for i in 0..n {
            let row = embedding.row(i);
            let mut best = 0u32;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = dist2(row, center);
                if d < best_d {
                    best_d = d;
                    best = c as u32;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0f64; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for i in 0..n {
            let c = labels[i] as usize;
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(embedding.row(i)) {
                *s += v;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            if counts[c] > 0 {
                for (cv, s) in center.iter_mut().zip(&sums[c]) {
                    *cv = s / counts[c] as f64;
                }
            }
            // Empty clusters keep their previous center.
        }
    }
    labels
}

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
