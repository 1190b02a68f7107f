//! One-sided (Hestenes) Jacobi SVD for small dense matrices.
//!
//! Columns of the tall orientation are rotated pairwise until mutually
//! orthogonal, which diagonalizes the Gram matrix without forming it.

use crate::error::{Error, Result};

/// Pairwise orthogonality threshold, relative to the column norms.
pub const JACOBI_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 80;

#[derive(Clone, Debug)]
pub struct Svd {
    /// Singular values, descending.
    pub sigma: Vec<f64>,
    /// Right singular vectors of the tall orientation, one per entry of
    /// `sigma`; see [`jacobi_svd`] for orientation.
    pub vectors: Option<Vec<Vec<f64>>>,
}

/// SVD of a row-major `rows × cols` matrix.
///
/// When `rows >= cols` the returned vectors are the right singular vectors
/// (length `cols`); otherwise the matrix is transposed first and they are
/// the left singular vectors (length `rows`).
pub fn jacobi_svd(a: &[f64], rows: usize, cols: usize, want_vectors: bool) -> Result<Svd> {
    if a.len() != rows * cols {
        return Err(Error::contract("svd", format!("{} values for a {rows}×{cols} matrix", a.len())));
    }
    let tall = rows >= cols;
    let (m, n) = if tall { (rows, cols) } else { (cols, rows) };
    // Column-major copy of the tall orientation: column j is cols_[j*m..].
    let mut b = vec![0.0; m * n];
    for r in 0..rows {
        for c in 0..cols {
            let (i, j) = if tall { (r, c) } else { (c, r) };
            b[j * m + i] = a[r * cols + c];
        }
    }
    let mut v = want_vectors.then(|| {
        let mut v = vec![0.0; n * n];
        for j in 0..n {
            v[j * n + j] = 1.0;
        }
        v
    });

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (bp, bq) = (&b[p * m..(p + 1) * m], &b[q * m..(q + 1) * m]);
                let alpha: f64 = bp.iter().map(|x| x * x).sum();
                let beta: f64 = bq.iter().map(|x| x * x).sum();
                let gamma: f64 = bp.iter().zip(bq).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut b, m, p, q, c, s);
                if let Some(v) = v.as_mut() {
                    rotate(v, n, p, q, c, s);
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numeric("svd", format!("Jacobi sweeps did not converge for a {rows}×{cols} matrix")));
    }

    let norms: Vec<f64> = (0..n).map(|j| b[j * m..(j + 1) * m].iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let sigma = order.iter().map(|&j| norms[j]).collect();
    let vectors = v.map(|v| order.iter().map(|&j| v[j * n..(j + 1) * n].to_vec()).collect());
    Ok(Svd { sigma, vectors })
}

fn rotate(buf: &mut [f64], len: usize, p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = buf.split_at_mut(q * len);
    let bp = &mut lo[p * len..(p + 1) * len];
    let bq = &mut hi[..len];
    for (x, y) in bp.iter_mut().zip(bq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

pub fn singular_values(a: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    Ok(jacobi_svd(a, rows, cols, false)?.sigma)
}

/// Number of singular values above `rel * sigma_max`.
pub fn numerical_rank(sigma: &[f64], rel: f64) -> usize {
    let top = sigma.first().copied().unwrap_or(0.0);
    sigma.iter().filter(|&&s| s > rel * top).count()
}

/// Principal axes of `n` samples of dimension `d` (row-major): the top `k`
/// unit directions and the variance along each of all `d` axes, descending.
pub fn principal_axes(samples: &[f64], n: usize, d: usize, k: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if k > d || n < 2 {
        return Err(Error::contract("pca", format!("need k ≤ d and n ≥ 2, got k={k}, d={d}, n={n}")));
    }
    let mut mean = vec![0.0; d];
    for row in samples.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x / n as f64);
    }
    let centered: Vec<f64> = samples.chunks(d).flat_map(|row| row.iter().zip(&mean).map(|(x, m)| x - m)).collect();
    if n < d {
        return Err(Error::contract("pca", format!("need at least d={d} samples, got {n}")));
    }
    let svd = jacobi_svd(&centered, n, d, true)?;
    let variances = svd.sigma.iter().map(|s| s * s / (n - 1) as f64).collect();
    let mut dirs = svd.vectors.expect("vectors requested");
    dirs.truncate(k);
    for dir in dirs.iter_mut() {
        if let Some(&first) = dir.iter().find(|x| x.abs() > 1e-12) {
            if first < 0.0 {
                dir.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }
    Ok((dirs, variances))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
        Rng::new(seed).normal_vec(rows * cols, 1.0)
    }

    #[test]
    fn matches_nalgebra_on_random_matrices() {
        for (rows, cols, seed) in [(5, 3, 1), (3, 7, 2), (16, 16, 3), (8, 40, 4)] {
            let a = random(rows, cols, seed);
            let ours = singular_values(&a, rows, cols).unwrap();
            let m = nalgebra::DMatrix::from_row_slice(rows, cols, &a);
            let mut theirs: Vec<f64> = m.singular_values().iter().copied().collect();
            theirs.sort_by(|x, y| y.total_cmp(x));
            for (x, y) in ours.iter().zip(&theirs) {
                assert!((x - y).abs() < 1e-9 * theirs[0], "{x} vs {y}");
            }
        }
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let n = 6;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = 1.0;
        }
        let s = singular_values(&a, n, n).unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn outer_product_is_rank_one() {
        let u = [1.0, -2.0, 0.5, 3.0];
        let v = [0.3, 0.1, -0.7, 2.0, 1.0, 0.2];
        let a: Vec<f64> = u.iter().flat_map(|x| v.iter().map(move |y| x * y)).collect();
        let s = singular_values(&a, 4, 6).unwrap();
        assert_eq!(numerical_rank(&s, 1e-6), 1);
    }

    #[test]
    fn vectors_reconstruct_rotated_columns() {
        let (rows, cols) = (9, 4);
        let a = random(rows, cols, 9);
        let svd = jacobi_svd(&a, rows, cols, true).unwrap();
        let vs = svd.vectors.unwrap();
        // A v_j has norm sigma_j and the v_j are orthonormal.
        for (j, vj) in vs.iter().enumerate() {
            let av: Vec<f64> = (0..rows).map(|r| (0..cols).map(|c| a[r * cols + c] * vj[c]).sum()).collect();
            let n: f64 = av.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - svd.sigma[j]).abs() < 1e-10);
            for vk in &vs[j + 1..] {
                let dot: f64 = vj.iter().zip(vk).map(|(x, y)| x * y).sum();
                assert!(dot.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pca_recovers_line_direction() {
        let dir = [0.6, -0.8, 0.0];
        let mut rng = Rng::new(4);
        let samples: Vec<f64> = (0..200)
            .flat_map(|_| {
                let t = rng.normal() * 3.0;
                dir.iter().map(move |d| 1.0 + t * d).collect::<Vec<_>>()
            })
            .collect();
        let (dirs, _) = principal_axes(&samples, 200, 3, 1).unwrap();
        let cos: f64 = dirs[0].iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>().abs();
        assert!(cos >= 0.999, "cos {cos}");
        assert!(dirs[0][0] > 0.0, "sign convention");
    }
}
