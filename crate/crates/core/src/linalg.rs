//! One-sided Jacobi SVD for the small dense systems used by triangulation and
//! Procrustes alignment.

/// Thin SVD `A = U diag(s) Vᵀ` of an `m × n` matrix with `m ≥ n`.
///
/// Singular values are sorted in descending order. Columns of `u` belonging
/// to (numerically) zero singular values are completed to an orthonormal set.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `m × n`, column-major by index: `u[col][row]`.
    pub u: Vec<Vec<f64>>,
    pub s: Vec<f64>,
    /// `n × n`, `v[col][row]`; column `j` is the right singular vector for `s[j]`.
    pub v: Vec<Vec<f64>>,
}

const MAX_SWEEPS: usize = 80;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Computes the SVD of a row-major `rows × cols` matrix (`rows ≥ cols`).
pub fn svd(a: &[f64], rows: usize, cols: usize) -> Svd {
    assert_eq!(a.len(), rows * cols, "svd: data length");
    assert!(rows >= cols, "svd: needs rows >= cols");
    let n = cols;
    // Work on columns so the rotations touch contiguous memory.
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| (0..rows).map(|i| a[i * cols + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut w, &mut v] {
                    let (lo, hi) = mat.split_at_mut(q);
                    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                        let (xp, xq) = (*x, *y);
                        *x = c * xp - s * xq;
                        *y = s * xp + c * xq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = w.iter().map(|c| dot(c, c).sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let v: Vec<Vec<f64>> = order.iter().map(|&j| v[j].clone()).collect();
    let tiny = s.first().copied().unwrap_or(0.0) * 1e-14;
    let mut u: Vec<Vec<f64>> = order
        .iter()
        .zip(&s)
        .map(|(&j, &sj)| {
            if sj > tiny && sj > 0.0 {
                w[j].iter().map(|x| x / sj).collect()
            } else {
                Vec::new()
            }
        })
        .collect();
    complete_orthonormal(&mut u, rows);
    Svd { u, s, v }
}

/// Fills empty columns with unit vectors orthogonal to every other column.
fn complete_orthonormal(cols: &mut [Vec<f64>], dim: usize) {
    for j in 0..cols.len() {
        if !cols[j].is_empty() {
            continue;
        }
        for e in 0..dim {
            let mut cand: Vec<f64> = (0..dim).map(|i| if i == e { 1.0 } else { 0.0 }).collect();
            for other in cols.iter().filter(|c| !c.is_empty()) {
                let d = dot(&cand, other);
                for (x, o) in cand.iter_mut().zip(other) {
                    *x -= d * o;
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > 1e-6 {
                cols[j] = cand.iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}
