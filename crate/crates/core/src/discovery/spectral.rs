//! Sampled (Nystrom) spectral embedding of the normalized affinity matrix.
//!
//! A seeded subset of m nodes is eigendecomposed densely; the eigenvectors of
//! the k largest eigenvalues are extended to all nodes through the sparse
//! rows restricted to the sample. With m = n the embedding reduces to the
//! exact dense eigendecomposition.

use super::affinity::SparseMatrix;
use super::DiscoveryError;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

/// Row-major n x k embedding.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub n: usize,
    pub k: usize,
    pub data: Vec<f64>,
}

impl Embedding {
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }
}

/// Top-k eigenvector embedding from m sampled nodes, deterministic in `seed`.
/// Sample sets are nested: a larger m with the same seed extends the smaller
/// sample.
pub fn spectral_embed(
    l: &SparseMatrix,
    k: usize,
    m: usize,
    seed: u64,
) -> Result<Embedding, DiscoveryError> {
    let n = l.n;
    let m = m.min(n);
    if m <= k {
        return Err(DiscoveryError::SampleTooSmall { m, k });
    }

    // Seeded permutation; taking a prefix keeps samples nested across m.
    let mut perm: Vec<u32> = (0..n as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    let mut sample: Vec<u32> = perm[..m].to_vec();
    sample.sort_unstable();

    let mut sample_pos = vec![u32::MAX; n];
    for (pos, &s) in sample.iter().enumerate() {
        sample_pos[s as usize] = pos as u32;
    }

    // Dense principal submatrix L[S, S].
    let mut lss = DMatrix::<f64>::zeros(m, m);
    for (pos, &s) in sample.iter().enumerate() {
        for &(j, w) in &l.rows[s as usize] {
            let pj = sample_pos[j as usize];
            if pj != u32::MAX {
                lss[(pos, pj as usize)] += w;
            }
        }
    }

    let (eigenvalues, eigenvectors) = jacobi_eigen(lss);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]).then(a.cmp(&b)));
    let top: Vec<usize> = order.into_iter().take(k).collect();
    let lambdas: Vec<f64> = top.iter().map(|&i| eigenvalues[i]).collect();
    let vectors: Vec<DVector<f64>> = top
        .iter()
        .map(|&i| eigenvectors.column(i).into_owned())
        .collect();

    // Nystrom extension: phi_j(i) = (1/lambda_j) sum_s L[i, s] u_j(s).
    // Sampled nodes reproduce their eigenvector entries exactly.
    let mut data = vec![0.0f64; n * k];
    for i in 0..n {
        let pos = sample_pos[i];
        if pos != u32::MAX {
            for (j, v) in vectors.iter().enumerate() {
                data[i * k + j] = v[pos as usize];
            }
            continue;
        }
        for &(c, w) in &l.rows[i] {
            let pc = sample_pos[c as usize];
            if pc == u32::MAX {
                continue;
            }
            for (j, v) in vectors.iter().enumerate() {
                data[i * k + j] += w * v[pc as usize];
            }
        }
        for (j, &lambda) in lambdas.iter().enumerate() {
            if lambda.abs() > 1e-12 {
                data[i * k + j] /= lambda;
            } else {
                data[i * k + j] = 0.0;
            }
        }
    }

    // On sparse graphs the one-hop extension reaches only the neighbors of
    // the sample; a few orthogonalized power iterations on (L + I)/2 carry
    // the subspace to every node without disturbing the exact m = n case.
    refine_subspace(l, &mut data, n, k, REFINE_ITERS);

    Ok(Embedding { n, k, data })
}

const REFINE_ITERS: usize = 15;

fn refine_subspace(l: &SparseMatrix, data: &mut [f64], n: usize, k: usize, iters: usize) {
    let mut x = DMatrix::<f64>::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            x[(i, j)] = data[i * k + j];
        }
    }
    let spmv = |l: &SparseMatrix, x: &DMatrix<f64>| -> DMatrix<f64> {
        let mut y = DMatrix::<f64>::zeros(n, k);
        for (i, row) in l.rows.iter().enumerate() {
            for &(c, w) in row {
                for j in 0..k {
                    y[(i, j)] += w * x[(c as usize, j)];
                }
            }
        }
        y
    };
    for _ in 0..iters {
        // Shifted operator keeps the largest (signed) eigenvalues dominant.
        let y = spmv(l, &x);
        x = (y + &x) * 0.5;
        x = orthonormalize(&x);
    }
    // Rayleigh-Ritz: rotate the subspace basis onto approximate eigenvectors
    // of L, ordered by decreasing Ritz value.
    let lx = spmv(l, &x);
    let small = x.transpose() * lx;
    let sym = (&small + small.transpose()) * 0.5;
    let (values, vectors) = jacobi_eigen(sym);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut rot = DMatrix::<f64>::zeros(k, k);
    for (jj, &col) in order.iter().enumerate() {
        rot.set_column(jj, &vectors.column(col));
    }
    let rotated = x * rot;
    for i in 0..n {
        for j in 0..k {
            data[i * k + j] = rotated[(i, j)];
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Slower than a
/// tridiagonalization approach but unconditionally stable on the sparse,
/// rank-deficient principal submatrices the sampler produces.
pub fn jacobi_eigen(mut a: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut v = DMatrix::<f64>::identity(n, n);
    if n == 0 {
        return (Vec::new(), v);
    }
    let scale = a.amax().max(1e-300);
    let tol = 1e-12 * scale;
    for _sweep in 0..50 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[(p, q)].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = a[(i, p)];
                    let aiq = a[(i, q)];
                    a[(i, p)] = c * aip - s * aiq;
                    a[(i, q)] = s * aip + c * aiq;
                }
                for i in 0..n {
                    let api = a[(p, i)];
                    let aqi = a[(q, i)];
                    a[(p, i)] = c * api - s * aqi;
                    a[(q, i)] = s * api + c * aqi;
                }
                for i in 0..n {
                    let vip = v[(i, p)];
                    let viq = v[(i, q)];
                    v[(i, p)] = c * vip - s * viq;
                    v[(i, q)] = s * vip + c * viq;
                }
            }
        }
    }
    let values = (0..n).map(|i| a[(i, i)]).collect();
    (values, v)
}

/// Largest principal angle (radians) between the column spaces of two
/// orthonormalized n x k bases. Used by the oracle tests.
pub fn principal_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = orthonormalize(a);
    let qb = orthonormalize(b);
    let m = qa.transpose() * qb;
    let svd = m.svd(false, false);
    let smin = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
        .clamp(-1.0, 1.0);
    smin.acos()
}

fn orthonormalize(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut q = a.clone_owned();
    for j in 0..q.ncols() {
        for prev in 0..j {
            let proj = q.column(j).dot(&q.column(prev));
            let p = q.column(prev).into_owned();
            let mut col = q.column_mut(j);
            col.axpy(-proj, &p, 1.0);
        }
        let norm = q.column(j).norm();
        if norm > 1e-12 {
            q.column_mut(j).scale_mut(1.0 / norm);
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Two dense blocks with strong internal affinity and no cross edges.
    fn two_component_graph(na: usize, nb: usize, seed: u64) -> SparseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = na + nb;
        let mut w = SparseMatrix::new(n);
        let mut add = |w: &mut SparseMatrix, i: usize, j: usize, v: f64| {
            w.rows[i].push((j as u32, v));
            w.rows[j].push((i as u32, v));
        };
        for i in 0..na {
            for j in (i + 1)..na {
                if rng.gen_bool(0.6) {
                    add(&mut w, i, j, rng.gen_range(0.5..1.0));
                }
            }
        }
        for i in na..n {
            for j in (i + 1)..n {
                if rng.gen_bool(0.6) {
                    add(&mut w, i, j, rng.gen_range(0.5..1.0));
                }
            }
        }
        // Isolated-node removal is upstream; keep everything connected here.
        for i in 0..na - 1 {
            add(&mut w, i, i + 1, 0.9);
        }
        for i in na..n - 1 {
            add(&mut w, i, i + 1, 0.9);
        }
        w
    }

    fn dense_top_k(l: &SparseMatrix, k: usize) -> DMatrix<f64> {
        let eig = nalgebra::SymmetricEigen::new(l.to_dense());
        let mut order: Vec<usize> = (0..l.n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        let mut out = DMatrix::zeros(l.n, k);
        for (j, &i) in order.iter().take(k).enumerate() {
            out.set_column(j, &eig.eigenvectors.column(i));
        }
        out
    }

    #[test]
    fn sample_too_small_rejected() {
        let w = two_component_graph(10, 10, 1);
        let (l, _) = super::super::affinity::normalized_affinity(&w);
        assert!(matches!(
            spectral_embed(&l, 5, 5, 0),
            Err(DiscoveryError::SampleTooSmall { .. })
        ));
    }

    #[test]
    fn two_components_separate_perfectly() {
        let (na, nb) = (60, 40);
        let w = two_component_graph(na, nb, 2);
        let (l, kept) = super::super::affinity::normalized_affinity(&w);
        assert_eq!(kept.len(), na + nb);
        let emb = spectral_embed(&l, 2, 50, 7).unwrap();
        let labels = super::super::kmeans::cluster_superpixels(&emb, 2, 3);
        // Purity must be exactly 1: each block single-labeled.
        let la = labels[0];
        for i in 0..na {
            assert_eq!(labels[i], la, "node {i}");
        }
        let lb = labels[na];
        assert_ne!(la, lb);
        for i in na..na + nb {
            assert_eq!(labels[i], lb, "node {i}");
        }
    }

    #[test]
    fn full_sample_matches_dense_eigenvectors() {
        let w = two_component_graph(30, 25, 4);
        let (l, _) = super::super::affinity::normalized_affinity(&w);
        let k = 3;
        let emb = spectral_embed(&l, k, l.n, 0).unwrap();
        let mut ours = DMatrix::zeros(l.n, k);
        for i in 0..l.n {
            for j in 0..k {
                ours[(i, j)] = emb.row(i)[j];
            }
        }
        let dense = dense_top_k(&l, k);
        let angle = principal_angle(&ours, &dense);
        assert!(angle < 1e-3, "principal angle {angle}");
    }

    #[test]
    fn leading_eigenvector_constant_sign_on_connected_graph() {
        // Single connected block: Perron-Frobenius vector has one sign.
        let w = two_component_graph(40, 0, 5);
        let (l, _) = super::super::affinity::normalized_affinity(&w);
        let emb = spectral_embed(&l, 1, l.n, 0).unwrap();
        let signs: Vec<bool> = (0..l.n).map(|i| emb.row(i)[0] > 0.0).collect();
        assert!(signs.iter().all(|&s| s == signs[0]));
        assert!((0..l.n).all(|i| emb.row(i)[0].abs() > 1e-9));
    }

    #[test]
    fn nystrom_angle_non_increasing_in_sample_size() {
        // Blocks plus weak random cross links so small samples are imperfect.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut w = two_component_graph(180, 120, 6);
        for _ in 0..200 {
            let i = rng.gen_range(0..180usize);
            let j = rng.gen_range(180..300usize);
            let v = rng.gen_range(0.001..0.03);
            w.rows[i].push((j as u32, v));
            w.rows[j].push((i as u32, v));
        }
        let (l, _) = super::super::affinity::normalized_affinity(&w);
        assert_eq!(l.n, 300);
        let k = 4;
        let dense = dense_top_k(&l, k);
        let mut last = f64::INFINITY;
        for m in [50, 100, 200, 300] {
            let emb = spectral_embed(&l, k, m, 42).unwrap();
            let mut ours = DMatrix::zeros(l.n, k);
            for i in 0..l.n {
                for j in 0..k {
                    ours[(i, j)] = emb.row(i)[j];
                }
            }
            let angle = principal_angle(&ours, &dense);
            assert!(
                angle <= last + 1e-9,
                "angle {angle} at m={m} exceeds previous {last}"
            );
            last = angle;
        }
        assert!(last < 1e-3, "full-sample angle {last}");
    }

    #[test]
    fn deterministic_given_seed() {
        let w = two_component_graph(50, 50, 8);
        let (l, _) = super::super::affinity::normalized_affinity(&w);
        let a = spectral_embed(&l, 3, 40, 9).unwrap();
        let b = spectral_embed(&l, 3, 40, 9).unwrap();
        assert_eq!(a.data, b.data);
    }
}
