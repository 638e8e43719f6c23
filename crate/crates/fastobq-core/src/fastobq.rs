//! Row-parallel OBQ with a shared inverse Hessian.
//!
//! Per-row OBQ lets every row pick its own column order, which forces one
//! inverse-Hessian copy per row and a rank-1 downdate per weight:
//! `O(d_row * d_col^3)` for the layer. All rows share the same Hessian
//! though, so if the column order is fixed up front and shared, the inverse
//! only has to exist once and each column costs a single downdate for the
//! whole layer: `O(d_col^3 + d_row * d_col^2)`.
//!
//! The shared order comes from aggregating the per-weight sensitivities
//! column-wise on the initial state:
//!
//! ```text
//! S_j = sum_i (quant(w_ij) - w_ij)^2 / (2 Hinv[j,j])
//! ```
//!
//! Each scheduled column is then processed in two phases: first every row
//! quantizes its weight in that column and compensates its own live weights
//! (all rows read the same inverse column), then the column is downdated
//! once. Weights are frozen after their column is processed; later steps
//! never touch them again.

use alloc::vec;
use alloc::vec::Vec;
use core::time::Duration;

use crate::error::{Error, Result};
use crate::grid::{quantize_value, QuantGrid};
use crate::linalg::{invert_spd, Hessian, HinvTally, InverseHessian, SINGULAR_PIVOT_TOL};
use crate::mat::Mat;
use crate::obq::TraceEntry;
use crate::ordering::{sorted_indices, OrderingStrategy, SortKey};

/// A shared column order plus the per-column key values that produced it.
#[derive(Clone, Debug)]
pub struct ColumnSchedule {
    permutation: Vec<usize>,
    scores: Vec<f64>,
    strategy: OrderingStrategy,
}

impl ColumnSchedule {
    /// Builds a schedule from an explicit permutation. Panics unless
    /// `permutation` is a bijection on `0..scores.len()`.
    pub fn new(permutation: Vec<usize>, scores: Vec<f64>, strategy: OrderingStrategy) -> Self {
        assert_eq!(
            permutation.len(),
            scores.len(),
            "permutation and scores must align"
        );
        let mut seen = vec![false; permutation.len()];
        for &k in &permutation {
            assert!(k < seen.len() && !seen[k], "not a permutation");
            seen[k] = true;
        }
        ColumnSchedule {
            permutation,
            scores,
            strategy,
        }
    }

    /// Columns in processing order.
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// Ordering key per column (column-indexed, not schedule-indexed).
    /// Aggregated sensitivities when the key is `sensi`.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn strategy(&self) -> OrderingStrategy {
        self.strategy
    }
}

/// Output of one fastobq layer run.
#[derive(Debug)]
pub struct LayerResult {
    pub w_q: Mat,
    /// Reconstruction error `||(W - Wq) X||_F^2`, computed from the damped
    /// Hessian (the damping contribution is subtracted back out).
    pub error_total: f64,
    /// Objective increase attributed to each schedule step, in schedule
    /// order, measured against the damped Hessian. When no fallback fired
    /// these sum to `error_total + 0.5 * damping * ||W - Wq||_F^2` up to
    /// rounding (the steps minimize the damped objective; `error_total`
    /// strips the damping term back out).
    pub per_column_error: Vec<f64>,
    /// Filled by callers that can measure time; the core has no clock.
    pub wall_time: Duration,
    /// Inverse-Hessian buffers ever allocated by this run (always 1 here).
    pub hinv_matrices_allocated: usize,
    /// Most inverse-Hessian buffers alive at once (always 1 here).
    pub hinv_peak: usize,
    /// Columns that hit the singular-pivot guard and were quantized
    /// round-to-nearest without compensation.
    pub singular_fallbacks: usize,
}

/// Reconstruction error of a quantized layer against calibration data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerError {
    /// `||(W - Wq) X||_F^2`.
    pub total: f64,
    /// `total / ||W X||_F^2`, or 0 when the reference norm is 0.
    pub normalized: f64,
}

/// Column sensitivities `S_j` aggregated over all rows, on a fully live
/// inverse. Errors with `SingularPivot` if any diagonal entry is unusable.
pub fn aggregate_column_sensitivity(
    w: &Mat,
    hinv: &InverseHessian,
    g: &QuantGrid,
) -> Result<Vec<f64>> {
    assert_eq!(
        w.cols(),
        hinv.dim(),
        "weight columns must match hessian dim"
    );
    assert_eq!(w.rows(), g.rows(), "grid must be fit on this weight matrix");
    assert!(
        hinv.fully_live(),
        "aggregation runs on the initial, fully live inverse"
    );
    let d_col = w.cols();
    let mut inv_2p = Vec::with_capacity(d_col);
    for j in 0..d_col {
        let p = hinv.diag(j);
        if p <= SINGULAR_PIVOT_TOL {
            return Err(Error::SingularPivot { index: j, value: p });
        }
        inv_2p.push(1.0 / (2.0 * p));
    }
    let mut scores = vec![0.0; d_col];
    for i in 0..w.rows() {
        let row = w.row(i);
        for j in 0..d_col {
            let e = quantize_value(row[j], i, g) - row[j];
            scores[j] += e * e * inv_2p[j];
        }
    }
    Ok(scores)
}

/// Turns aggregated sensitivities (or another per-column key, depending on
/// the strategy) into a processing order. Ties break toward the smaller
/// column index; `none` keeps natural order.
pub fn schedule_columns(
    sensitivities: &[f64],
    w: &Mat,
    g: &QuantGrid,
    strategy: OrderingStrategy,
) -> ColumnSchedule {
    assert_eq!(sensitivities.len(), w.cols(), "one sensitivity per column");
    let keys: Vec<f64> = match strategy.key {
        SortKey::Sensitivity | SortKey::Unsorted => sensitivities.to_vec(),
        SortKey::QuantError => {
            let mut keys = vec![0.0; w.cols()];
            for i in 0..w.rows() {
                let row = w.row(i);
                for (j, &v) in row.iter().enumerate() {
                    keys[j] += (quantize_value(v, i, g) - v).abs();
                }
            }
            keys
        }
        SortKey::WeightNorm => {
            // Column L2 norms.
            let mut keys = vec![0.0; w.cols()];
            for i in 0..w.rows() {
                for (j, &v) in w.row(i).iter().enumerate() {
                    keys[j] += v * v;
                }
            }
            for k in &mut keys {
                *k = crate::math::sqrt(*k);
            }
            keys
        }
    };
    let permutation = match strategy.key {
        SortKey::Unsorted => (0..w.cols()).collect(),
        _ => sorted_indices(&keys, strategy.direction),
    };
    ColumnSchedule {
        permutation,
        scores: keys,
        strategy,
    }
}

/// FastOBQ over one layer: aggregate sensitivities, fix the schedule, then
/// quantize column by column with a single shared inverse Hessian.
pub fn fastobq_quantize_layer(
    w: &Mat,
    h: &Hessian,
    g: &QuantGrid,
    strategy: OrderingStrategy,
) -> Result<LayerResult> {
    let (result, _) = run(w, h, g, None, strategy, false)?;
    Ok(result)
}

/// [`fastobq_quantize_layer`] that also records the full quantization trace.
pub fn fastobq_quantize_layer_traced(
    w: &Mat,
    h: &Hessian,
    g: &QuantGrid,
    strategy: OrderingStrategy,
) -> Result<(LayerResult, Vec<TraceEntry>)> {
    let (result, trace) = run(w, h, g, None, strategy, true)?;
    Ok((result, trace.unwrap_or_default()))
}

/// Runs fastobq under an explicit, caller-built schedule.
pub fn fastobq_quantize_with_schedule(
    w: &Mat,
    h: &Hessian,
    g: &QuantGrid,
    schedule: &ColumnSchedule,
) -> Result<LayerResult> {
    let (result, _) = run(w, h, g, Some(schedule), schedule.strategy(), false)?;
    Ok(result)
}

fn run(
    w: &Mat,
    h: &Hessian,
    g: &QuantGrid,
    schedule: Option<&ColumnSchedule>,
    strategy: OrderingStrategy,
    traced: bool,
) -> Result<(LayerResult, Option<Vec<TraceEntry>>)> {
    assert_eq!(w.cols(), h.dim(), "weight columns must match hessian dim");
    assert_eq!(w.rows(), g.rows(), "grid must be fit on this weight matrix");
    let d_row = w.rows();
    let d_col = w.cols();
    assert!(d_row > 0 && d_col > 0, "layer must be non-empty");

    let tally = HinvTally::new();
    let mut hinv = invert_spd(h)?;
    hinv.set_tally(tally.clone());

    let owned_schedule;
    let schedule = match schedule {
        Some(s) => {
            assert_eq!(
                s.permutation().len(),
                d_col,
                "schedule must cover every column"
            );
            s
        }
        None => {
            let scores = aggregate_column_sensitivity(w, &hinv, g)?;
            owned_schedule = schedule_columns(&scores, w, g, strategy);
            &owned_schedule
        }
    };

    let mut w_q = w.clone();
    let mut per_column_error = vec![0.0; d_col];
    let mut trace = traced.then(|| Vec::with_capacity(d_row * d_col));
    let mut singular_fallbacks = 0usize;
    // Step counter per row equals the schedule position: rows move in lockstep.
    let mut col_buf = vec![0.0; d_col];

    for (t, &k) in schedule.permutation().iter().enumerate() {
        debug_assert!(hinv.is_live(k));
        let pivot = hinv.diag(k);
        if pivot <= SINGULAR_PIVOT_TOL {
            // Degraded pivot: no compensation is possible, so quantize the
            // column round-to-nearest and retire it so later steps never
            // touch it again. The attributed cost is the uncompensated
            // objective increase sum_i e^2 * H[k,k] / 2.
            let mut step_err = 0.0;
            for i in 0..d_row {
                let row = w_q.row_mut(i);
                let q = quantize_value(row[k], i, g);
                let e = row[k] - q;
                step_err += 0.5 * e * e * h.values().get(k, k);
                row[k] = q;
                if let Some(tr) = &mut trace {
                    tr.push(TraceEntry {
                        step: t,
                        row: i,
                        col: k,
                        sensitivity: f64::NAN,
                        value: q,
                    });
                }
            }
            per_column_error[t] = step_err;
            hinv.retire_index(k)?;
            singular_fallbacks += 1;
            continue;
        }

        // Phase 1: every row quantizes column k and compensates its own
        // live weights against the shared inverse column.
        col_buf.fill(0.0);
        for &j in hinv.live_indices() {
            col_buf[j] = hinv.get(j, k);
        }
        let inv_pivot = 1.0 / pivot;
        let mut step_err = 0.0;
        for i in 0..d_row {
            let row = w_q.row_mut(i);
            let wik = row[k];
            let q = quantize_value(wik, i, g);
            let e = wik - q;
            step_err += e * e * (0.5 * inv_pivot);
            let s = e * inv_pivot;
            if s != 0.0 {
                for &j in hinv.live_indices() {
                    if j != k {
                        row[j] -= s * col_buf[j];
                    }
                }
            }
            row[k] = q;
            if let Some(tr) = &mut trace {
                tr.push(TraceEntry {
                    step: t,
                    row: i,
                    col: k,
                    sensitivity: e * e * (0.5 * inv_pivot),
                    value: q,
                });
            }
        }
        per_column_error[t] = step_err;

        // Phase 2: one downdate retires the column for all rows.
        hinv.downdate_in_place(k)?;
    }
    drop(hinv);

    let error_total = hessian_route_error(w, &w_q, h);
    Ok((
        LayerResult {
            w_q,
            error_total,
            per_column_error,
            wall_time: Duration::ZERO,
            hinv_matrices_allocated: tally.allocated_total(),
            hinv_peak: tally.peak(),
            singular_fallbacks,
        },
        trace,
    ))
}

/// `||(W - Wq) X||_F^2` computed through the damped Hessian:
/// `sum_i 0.5 * (d_i^T H d_i - damping * ||d_i||^2)` with `d_i` the row
/// difference. Exact because `H = 2 X X^T + damping * I`.
fn hessian_route_error(w: &Mat, w_q: &Mat, h: &Hessian) -> f64 {
    let hv = h.values();
    let damping = h.damping_applied();
    let d_col = w.cols();
    let mut diff = vec![0.0; d_col];
    let mut total = 0.0;
    for i in 0..w.rows() {
        let a = w.row(i);
        let b = w_q.row(i);
        let mut norm2 = 0.0;
        for j in 0..d_col {
            diff[j] = a[j] - b[j];
            norm2 += diff[j] * diff[j];
        }
        if norm2 == 0.0 {
            continue;
        }
        let mut quad = 0.0;
        for j in 0..d_col {
            let dj = diff[j];
            if dj != 0.0 {
                let hrow = hv.row(j);
                let mut acc = 0.0;
                for k in 0..d_col {
                    acc += hrow[k] * diff[k];
                }
                quad += dj * acc;
            }
        }
        total += 0.5 * (quad - damping * norm2);
    }
    total.max(0.0)
}

/// Direct reconstruction error `||(W - Wq) X||_F^2` and its normalized form.
pub fn layer_error(w: &Mat, w_q: &Mat, x: &Mat) -> LayerError {
    assert_eq!(w.rows(), w_q.rows(), "weight shapes must match");
    assert_eq!(w.cols(), w_q.cols(), "weight shapes must match");
    assert_eq!(
        w.cols(),
        x.rows(),
        "calibration rows must match weight columns"
    );
    let n = x.cols();
    let mut y = vec![0.0; n];
    let mut total = 0.0;
    let mut reference = 0.0;
    for i in 0..w.rows() {
        let a = w.row(i);
        let b = w_q.row(i);

        y.fill(0.0);
        for j in 0..w.cols() {
            let c = a[j] - b[j];
            if c != 0.0 {
                let xr = x.row(j);
                for (acc, &xv) in y.iter_mut().zip(xr) {
                    *acc += c * xv;
                }
            }
        }
        total += y.iter().map(|v| v * v).sum::<f64>();

        y.fill(0.0);
        for (j, &c) in a.iter().enumerate() {
            if c != 0.0 {
                let xr = x.row(j);
                for (acc, &xv) in y.iter_mut().zip(xr) {
                    *acc += c * xv;
                }
            }
        }
        reference += y.iter().map(|v| v * v).sum::<f64>();
    }
    let normalized = if reference > 0.0 {
        total / reference
    } else {
        0.0
    };
    LayerError { total, normalized }
}
