//! Hessian construction, SPD inversion, and the rank-1 inverse downdate that
//! both quantizers are built on.
//!
//! For a layer with calibration matrix `X` (`d_col x n_samples`) the per-row
//! reconstruction objective `||(W - Wq) X||^2` has Hessian `H = 2 X X^T`
//! per row, shared by every row. A damping term on the diagonal keeps it
//! positive definite when the calibration Gram matrix is rank deficient.
//!
//! Quantizing coordinate `k` and compensating the remaining live weights
//! restricts the problem to the surviving index set. Rather than re-inverting
//! the restricted Hessian, [`InverseHessian::downdate_in_place`] removes `k`
//! from an existing inverse in `O(live^2)`:
//!
//! ```text
//! Hinv <- Hinv - Hinv[:,k] Hinv[k,:] / Hinv[k,k]
//! ```
//!
//! after which row/column `k` are identically zero and the live block equals
//! the inverse of the Hessian restricted to the live indices.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::math::sqrt;

/// Inverse-Hessian diagonal entries at or below this are treated as singular.
pub const SINGULAR_PIVOT_TOL: f64 = 1e-12;

/// How the damping term added to the Hessian diagonal is derived.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DampingPolicy {
    /// Add the value itself to every diagonal entry.
    Absolute(f64),
    /// Add `fraction * mean(diag(2 X X^T))`.
    RelativeToMeanDiag(f64),
}

/// Damped layer Hessian `2 X X^T + damping * I`. Symmetric by construction
/// (the upper triangle is computed once and mirrored).
#[derive(Clone, Debug)]
pub struct Hessian {
    values: Mat,
    damping_applied: f64,
}

impl Hessian {
    /// Wraps a precomputed matrix. Rejects non-square, non-finite, or
    /// asymmetric (beyond 1e-12) input.
    pub fn from_matrix(values: Mat, damping_applied: f64) -> Result<Self> {
        if values.rows() != values.cols() {
            return Err(Error::ShapeMismatch {
                context: "hessian must be square",
            });
        }
        if !values.is_finite() {
            return Err(Error::NonFinite);
        }
        for i in 0..values.rows() {
            for j in i + 1..values.cols() {
                if (values.get(i, j) - values.get(j, i)).abs() > 1e-12 {
                    return Err(Error::ShapeMismatch {
                        context: "hessian must be symmetric",
                    });
                }
            }
        }
        Ok(Hessian {
            values,
            damping_applied,
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    /// The scalar that was added to every diagonal entry.
    pub fn damping_applied(&self) -> f64 {
        self.damping_applied
    }
}

/// Builds `2 X X^T + damping * I` from calibration samples `x`
/// (`d_col x n_samples`) with an absolute damping value.
pub fn build_hessian(x: &Mat, damping: f64) -> Result<Hessian> {
    build_hessian_damped(x, DampingPolicy::Absolute(damping))
}

/// [`build_hessian`] with an explicit damping policy.
pub fn build_hessian_damped(x: &Mat, policy: DampingPolicy) -> Result<Hessian> {
    match policy {
        DampingPolicy::Absolute(v) => assert!(v >= 0.0, "damping must be >= 0"),
        DampingPolicy::RelativeToMeanDiag(f) => assert!(f >= 0.0, "damping must be >= 0"),
    }
    if x.cols() == 0 || x.rows() == 0 {
        return Err(Error::EmptyCalibration);
    }
    if !x.is_finite() {
        return Err(Error::NonFinite);
    }
    let d = x.rows();
    let mut h = Mat::zeros(d, d);
    for i in 0..d {
        let ri = x.row(i);
        for j in i..d {
            let rj = x.row(j);
            let mut s = 0.0;
            for n in 0..ri.len() {
                s += ri[n] * rj[n];
            }
            let v = 2.0 * s;
            h.set(i, j, v);
            h.set(j, i, v);
        }
    }
    let damping = match policy {
        DampingPolicy::Absolute(v) => v,
        DampingPolicy::RelativeToMeanDiag(f) => {
            let mean = (0..d).map(|i| h.get(i, i)).sum::<f64>() / d as f64;
            f * mean
        }
    };
    for i in 0..d {
        let v = h.get(i, i) + damping;
        h.set(i, i, v);
    }
    Ok(Hessian {
        values: h,
        damping_applied: damping,
    })
}

#[derive(Default)]
struct TallyCounters {
    current: AtomicUsize,
    peak: AtomicUsize,
    total: AtomicUsize,
}

/// Counts live inverse-Hessian buffers. Cloning the tally shares the
/// counters; attach one handle per quantization run to get per-run numbers.
#[derive(Clone, Default)]
pub struct HinvTally(Arc<TallyCounters>);

impl HinvTally {
    pub fn new() -> Self {
        Self::default()
    }

    fn on_alloc(&self) {
        let now = self.0.current.fetch_add(1, Ordering::Relaxed) + 1;
        self.0.peak.fetch_max(now, Ordering::Relaxed);
        self.0.total.fetch_add(1, Ordering::Relaxed);
    }

    fn on_release(&self) {
        self.0.current.fetch_sub(1, Ordering::Relaxed);
    }

    /// Buffers currently alive.
    pub fn current(&self) -> usize {
        self.0.current.load(Ordering::Relaxed)
    }

    /// Most buffers alive at any one time.
    pub fn peak(&self) -> usize {
        self.0.peak.load(Ordering::Relaxed)
    }

    /// Buffers ever allocated.
    pub fn allocated_total(&self) -> usize {
        self.0.total.load(Ordering::Relaxed)
    }
}

/// Inverse Hessian with a live-index mask. Dead rows/columns are kept in the
/// buffer as exact zeros so indices stay stable across downdates.
pub struct InverseHessian {
    values: Mat,
    live: Vec<bool>,
    live_list: Vec<usize>,
    tally: Option<HinvTally>,
}

impl Clone for InverseHessian {
    fn clone(&self) -> Self {
        if let Some(t) = &self.tally {
            t.on_alloc();
        }
        InverseHessian {
            values: self.values.clone(),
            live: self.live.clone(),
            live_list: self.live_list.clone(),
            tally: self.tally.clone(),
        }
    }
}

impl Drop for InverseHessian {
    fn drop(&mut self) {
        if let Some(t) = &self.tally {
            t.on_release();
        }
    }
}

impl InverseHessian {
    #[inline]
    pub fn dim(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    #[inline]
    pub fn diag(&self, k: usize) -> f64 {
        self.values.get(k, k)
    }

    #[inline]
    pub fn is_live(&self, k: usize) -> bool {
        self.live[k]
    }

    /// Live indices in ascending order.
    pub fn live_indices(&self) -> &[usize] {
        &self.live_list
    }

    pub fn live_count(&self) -> usize {
        self.live_list.len()
    }

    pub fn fully_live(&self) -> bool {
        self.live_list.len() == self.dim()
    }

    /// Registers this buffer (and all future clones of it) with a tally.
    /// Panics if a tally is already attached.
    pub fn set_tally(&mut self, tally: HinvTally) {
        assert!(self.tally.is_none(), "tally already attached");
        tally.on_alloc();
        self.tally = Some(tally);
    }

    /// Removes index `k` from the live set, updating the live block to the
    /// inverse of the Hessian restricted to the surviving indices:
    ///
    /// ```text
    /// Hinv <- Hinv - Hinv[:,k] Hinv[k,:] / Hinv[k,k]
    /// ```
    ///
    /// Row and column `k` are zeroed exactly. `O(live^2)`.
    pub fn downdate_in_place(&mut self, k: usize) -> Result<()> {
        assert!(
            k < self.dim(),
            "index {k} out of bounds for dim {}",
            self.dim()
        );
        if !self.live[k] {
            return Err(Error::DeadIndex { index: k });
        }
        let pivot = self.values.get(k, k);
        if pivot <= SINGULAR_PIVOT_TOL {
            return Err(Error::SingularPivot {
                index: k,
                value: pivot,
            });
        }
        // Column k snapshot, aligned with live_list. Column equals row by symmetry.
        let col: Vec<f64> = self
            .live_list
            .iter()
            .map(|&j| self.values.get(j, k))
            .collect();
        let inv_pivot = 1.0 / pivot;
        for (a, &i) in self.live_list.iter().enumerate() {
            if i == k {
                continue;
            }
            let s = col[a] * inv_pivot;
            if s == 0.0 {
                continue;
            }
            let row = self.values.row_mut(i);
            for (b, &j) in self.live_list.iter().enumerate() {
                row[j] -= s * col[b];
            }
        }
        self.retire(k);
        Ok(())
    }

    /// Drops `k` from the live set without the rank-1 update. Only correct
    /// when the caller has decided the pivot is numerically unusable and no
    /// compensation is taking place; the surviving block then only
    /// approximates the restricted inverse.
    pub fn retire_index(&mut self, k: usize) -> Result<()> {
        assert!(
            k < self.dim(),
            "index {k} out of bounds for dim {}",
            self.dim()
        );
        if !self.live[k] {
            return Err(Error::DeadIndex { index: k });
        }
        self.retire(k);
        Ok(())
    }

    fn retire(&mut self, k: usize) {
        for j in 0..self.dim() {
            self.values.set(k, j, 0.0);
            self.values.set(j, k, 0.0);
        }
        self.live[k] = false;
        self.live_list.retain(|&j| j != k);
    }
}

/// Inverts a positive definite Hessian via Cholesky factorization.
/// `O(dim^3)`; the result starts with every index live.
pub fn invert_spd(h: &Hessian) -> Result<InverseHessian> {
    let n = h.dim();
    assert!(n > 0, "cannot invert an empty matrix");
    let a = h.values();

    // Lower-triangular factor L with H = L L^T.
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        // NaN pivots land here too: they fail `is_finite`.
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let ljj = sqrt(d);
        l.set(j, j, ljj);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }

    // M = L^-1 by forward substitution, still lower triangular.
    let mut m = Mat::zeros(n, n);
    for j in 0..n {
        m.set(j, j, 1.0 / l.get(j, j));
        for i in j + 1..n {
            let mut s = 0.0;
            for k in j..i {
                s += l.get(i, k) * m.get(k, j);
            }
            m.set(i, j, -s / l.get(i, i));
        }
    }

    // Hinv = M^T M; computed for i <= j and mirrored so it is exactly symmetric.
    let mut inv = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut s = 0.0;
            for k in j..n {
                s += m.get(k, i) * m.get(k, j);
            }
            inv.set(i, j, s);
            inv.set(j, i, s);
        }
    }

    Ok(InverseHessian {
        values: inv,
        live: vec![true; n],
        live_list: (0..n).collect(),
        tally: None,
    })
}

/// Pure-function form of [`InverseHessian::downdate_in_place`]: clones, then
/// downdates the clone.
pub fn downdate_inverse(hinv: &InverseHessian, k: usize) -> Result<InverseHessian> {
    let mut out = hinv.clone();
    out.downdate_in_place(k)?;
    Ok(out)
}
