//! Slow, obviously-correct reference routes used by the test suites.
//!
//! Everything here is deliberately naive: Gauss-Jordan with partial
//! pivoting, triple-loop matrix products, and a from-scratch re-simulation
//! of the compensated quantization step that re-inverts the restricted
//! Hessian at every step instead of downdating. None of it shares code with
//! the kernels under test beyond the `Mat` container and the grid contract.

use fastobq_core::grid::{quantize_value, QuantGrid};
use fastobq_core::Mat;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform matrix with entries in `[lo, hi)`.
pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m.set(i, j, rng.random_range(lo..hi));
        }
    }
    m
}

/// Random SPD matrix `2 A A^T + damping * I` built with triple loops.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, damping: f64) -> Mat {
    let a = random_mat(rng, n, 2 * n, -1.0, 1.0);
    naive_gram(&a, damping)
}

/// `2 X X^T + damping * I`, one multiply at a time.
pub fn naive_gram(x: &Mat, damping: f64) -> Mat {
    let d = x.rows();
    let n = x.cols();
    let mut h = Mat::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for t in 0..n {
                s += x.get(i, t) * x.get(j, t);
            }
            h.set(i, j, 2.0 * s + if i == j { damping } else { 0.0 });
        }
    }
    h
}

/// Gauss-Jordan inverse with partial pivoting. `None` when singular.
pub fn gauss_jordan_inverse(a: &Mat) -> Option<Mat> {
    let n = a.rows();
    assert_eq!(n, a.cols(), "inverse needs a square matrix");
    let mut m = a.clone();
    let mut inv = Mat::identity(n);
    for col in 0..n {
        let mut pivot_row = col;
        for r in col + 1..n {
            if m.get(r, col).abs() > m.get(pivot_row, col).abs() {
                pivot_row = r;
            }
        }
        let pivot = m.get(pivot_row, col);
        if pivot == 0.0 {
            return None;
        }
        if pivot_row != col {
            for j in 0..n {
                let (x, y) = (m.get(col, j), m.get(pivot_row, j));
                m.set(col, j, y);
                m.set(pivot_row, j, x);
                let (x, y) = (inv.get(col, j), inv.get(pivot_row, j));
                inv.set(col, j, y);
                inv.set(pivot_row, j, x);
            }
        }
        let scale = 1.0 / m.get(col, col);
        for j in 0..n {
            m.set(col, j, m.get(col, j) * scale);
            inv.set(col, j, inv.get(col, j) * scale);
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m.get(r, col);
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                m.set(r, j, m.get(r, j) - f * m.get(col, j));
                inv.set(r, j, inv.get(r, j) - f * inv.get(col, j));
            }
        }
    }
    Some(inv)
}

/// Dense solve by Gaussian elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
pub fn solve_dense(a: &Mat, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.rows();
    assert_eq!(n, a.cols());
    assert_eq!(n, b.len());
    let mut m = a.clone();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let mut pivot_row = col;
        for r in col + 1..n {
            if m.get(r, col).abs() > m.get(pivot_row, col).abs() {
                pivot_row = r;
            }
        }
        if m.get(pivot_row, col) == 0.0 {
            return None;
        }
        if pivot_row != col {
            for j in 0..n {
                let (x, y) = (m.get(col, j), m.get(pivot_row, j));
                m.set(col, j, y);
                m.set(pivot_row, j, x);
            }
            rhs.swap(col, pivot_row);
        }
        for r in col + 1..n {
            let f = m.get(r, col) / m.get(col, col);
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                m.set(r, j, m.get(r, j) - f * m.get(col, j));
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut s = rhs[r];
        for j in r + 1..n {
            s -= m.get(r, j) * x[j];
        }
        x[r] = s / m.get(r, r);
    }
    Some(x)
}

/// Copies the submatrix of rows/columns where `keep` is true.
pub fn keep_submatrix(a: &Mat, keep: &[bool]) -> Mat {
    let idx: Vec<usize> = (0..a.rows()).filter(|&i| keep[i]).collect();
    let mut out = Mat::zeros(idx.len(), idx.len());
    for (bi, &i) in idx.iter().enumerate() {
        for (bj, &j) in idx.iter().enumerate() {
            out.set(bi, bj, a.get(i, j));
        }
    }
    out
}

/// Inverse of the kept submatrix, re-embedded at full size with zeros on
/// dead rows/columns. The delete-then-invert route.
pub fn delete_then_invert(h: &Mat, keep: &[bool]) -> Option<Mat> {
    let idx: Vec<usize> = (0..h.rows()).filter(|&i| keep[i]).collect();
    let sub = keep_submatrix(h, keep);
    if sub.rows() == 0 {
        return Some(Mat::zeros(h.rows(), h.cols()));
    }
    let inv = gauss_jordan_inverse(&sub)?;
    let mut out = Mat::zeros(h.rows(), h.cols());
    for (bi, &i) in idx.iter().enumerate() {
        for (bj, &j) in idx.iter().enumerate() {
            out.set(i, j, inv.get(bi, bj));
        }
    }
    Some(out)
}

/// Compensation as the solution of the constrained problem
/// `min 0.5 dw^T H dw  s.t.  dw_k = target`, via the KKT system
/// `[[H, e_k], [e_k^T, 0]] [dw; lambda] = [0; target]`.
pub fn kkt_delta(h: &Mat, k: usize, target: f64) -> Option<Vec<f64>> {
    let n = h.rows();
    let mut a = Mat::zeros(n + 1, n + 1);
    for i in 0..n {
        for j in 0..n {
            a.set(i, j, h.get(i, j));
        }
    }
    a.set(k, n, 1.0);
    a.set(n, k, 1.0);
    let mut b = vec![0.0; n + 1];
    b[n] = target;
    let sol = solve_dense(&a, &b)?;
    Some(sol[..n].to_vec())
}

/// `v^T H v`.
pub fn quad_form(h: &Mat, v: &[f64]) -> f64 {
    let n = h.rows();
    assert_eq!(v.len(), n);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += v[i] * h.get(i, j) * v[j];
        }
    }
    total
}

/// `||(W - Wq) X||_F^2` with explicit loops.
pub fn naive_layer_error(w: &Mat, w_q: &Mat, x: &Mat) -> f64 {
    let mut total = 0.0;
    for i in 0..w.rows() {
        for t in 0..x.cols() {
            let mut s = 0.0;
            for j in 0..w.cols() {
                s += (w.get(i, j) - w_q.get(i, j)) * x.get(j, t);
            }
            total += s * s;
        }
    }
    total
}

/// Straight-line re-simulation of compensated quantization for one row
/// under an explicit column order. Re-inverts the restricted Hessian from
/// scratch at every step; no downdates, no shared state with the kernels.
pub fn obs_row_oracle(
    w_row: &[f64],
    h: &Mat,
    g: &QuantGrid,
    grid_row: usize,
    order: &[usize],
) -> Vec<f64> {
    let n = w_row.len();
    let mut w = w_row.to_vec();
    let mut live = vec![true; n];
    for &k in order {
        assert!(live[k], "order revisits column {k}");
        let idx: Vec<usize> = (0..n).filter(|&i| live[i]).collect();
        let sub = keep_submatrix(h, &live);
        let inv = gauss_jordan_inverse(&sub).expect("restricted hessian must be invertible");
        let p = idx.iter().position(|&i| i == k).unwrap();
        let q = quantize_value(w[k], grid_row, g);
        let scale = (w[k] - q) / inv.get(p, p);
        for (a, &i) in idx.iter().enumerate() {
            w[i] -= scale * inv.get(a, p);
        }
        // w[k] is now q up to rounding; pin it and retire the index.
        w[k] = q;
        live[k] = false;
    }
    w
}

pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
