//! Independent reference implementations used as test oracles. The functions in
//! this file use neither nalgebra nor the crate's own numerics; `fake` and
//! `world` build test inputs.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| gaussian(rng)).collect()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn transpose(m: &Mat) -> Mat {
    if m.is_empty() {
        return vec![];
    }
    (0..m[0].len()).map(|j| m.iter().map(|r| r[j]).collect()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let bt = transpose(b);
    a.iter().map(|r| bt.iter().map(|c| dot(r, c)).collect()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(r, s)| r.iter().zip(s).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

/// Sample covariance with divisor `n − 1` of row data.
pub fn covariance(x: &Mat) -> Mat {
    let n = x.len();
    let d = x[0].len();
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut c = vec![vec![0.0; d]; d];
    for r in x {
        for i in 0..d {
            for j in 0..d {
                c[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    for row in c.iter_mut() {
        for v in row.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    c
}

/// Cyclic Jacobi eigensolver. Returns eigenpairs sorted by descending eigenvalue.
pub fn jacobi_eigen(a: &Mat) -> Vec<(f64, Vec<f64>)> {
    let n = a.len();
    let mut m = a.clone();
    let mut v: Mat = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n).map(|j| (m[j][j], v.iter().map(|r| r[j]).collect())).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    pairs
}

/// Modified Gram–Schmidt with one re-orthogonalization pass; vectors whose
/// residual norm falls below `tol` are dropped.
pub fn gram_schmidt(rows: &Mat, tol: f64) -> Mat {
    let mut basis: Mat = Vec::new();
    for r in rows {
        let mut v = r.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&v, b);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= c * y;
                }
            }
        }
        let n = norm(&v);
        if n > tol * norm(r).max(1.0) {
            basis.push(v.iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// `Bᵀ B` for a basis given as rows.
pub fn projector_from_basis(basis: &Mat, d: usize) -> Mat {
    let mut p = vec![vec![0.0; d]; d];
    for b in basis {
        for i in 0..d {
            for j in 0..d {
                p[i][j] += b[i] * b[j];
            }
        }
    }
    p
}

pub fn identity(d: usize) -> Mat {
    (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// Length of the longest common subsequence by exhaustive recursion with
/// memoization on (i, j); independent of the crate's table layout.
pub fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    fn go(a: &[&str], b: &[&str], i: usize, j: usize, memo: &mut std::collections::HashMap<(usize, usize), usize>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut std::collections::HashMap::new())
}

/// Textbook Pearson correlation (two-pass, explicit sums of squares).
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let syy: f64 = y.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let num = n * sxy - sx * sy;
    let den = ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
    (den > 0.0).then(|| num / den)
}

pub fn unit(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

pub fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

/// Gaussian vector with its component along `u` removed.
pub fn orthogonal_noise(rng: &mut impl Rng, u: &[f64], sigma: f64) -> Vec<f64> {
    let mut v: Vec<f64> = u.iter().map(|_| sigma * gaussian(rng)).collect();
    let c = dot(&v, u);
    for (x, y) in v.iter_mut().zip(u) {
        *x -= c * y;
    }
    v
}

/// Three Gaussian classes at the vertices of a triangle in the plane of axes
/// 0 and 1, isotropic noise elsewhere. Returns (rows, labels).
pub fn three_class_blobs(rng: &mut impl Rng, n_per_class: usize, d: usize, sep: f64, noise: f64) -> (Mat, Vec<usize>) {
    let centers = [(sep, 0.0), (-0.5 * sep, 0.866 * sep), (-0.5 * sep, -0.866 * sep)];
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (c, &(a, b)) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            let mut r: Vec<f64> = (0..d).map(|_| noise * gaussian(rng)).collect();
            r[0] += a;
            r[1] += b;
            x.push(r);
            y.push(c);
        }
    }
    (x, y)
}

pub mod fake;
pub mod world;
