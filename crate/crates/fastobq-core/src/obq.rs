//! Reference quantizers: round-to-nearest and per-row OBQ.
//!
//! OBQ quantizes one weight at a time. For row `w` with inverse Hessian
//! `Hinv` restricted to the still-unquantized (live) set, quantizing
//! coordinate `k` costs
//!
//! ```text
//! L_k = (quant(w_k) - w_k)^2 / (2 Hinv[k,k])
//! ```
//!
//! and the loss-minimizing compensation spread over the live weights is
//!
//! ```text
//! dw = -(w_k - quant(w_k)) / Hinv[k,k] * Hinv[:,k]
//! ```
//!
//! after which `k` leaves the live set via a rank-1 inverse downdate. Each
//! row walks its own column order, so the layer needs one inverse Hessian
//! copy per row; that cost is the reason the row-parallel variant in
//! [`crate::fastobq`] exists.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::{quantize_value, QuantGrid};
use crate::linalg::{invert_spd, Hessian, HinvTally, InverseHessian, SINGULAR_PIVOT_TOL};
use crate::mat::Mat;
use crate::ordering::{sorted_indices, Direction, OrderingStrategy, SortKey};

/// One quantization decision. `step` counts within the entry's row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub step: usize,
    pub row: usize,
    pub col: usize,
    /// `L_k` of this step, evaluated just before the weight was committed.
    pub sensitivity: f64,
    /// The grid value the weight was committed to.
    pub value: f64,
}

/// Column selection mode for OBQ.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObqMode {
    /// Order fixed up front from the initial row state.
    Fixed,
    /// Key re-ranked after every step from the current row state.
    Greedy,
}

#[derive(Debug)]
pub struct ObqOutput {
    pub w_q: Mat,
    /// Every (row, col) exactly once, in commit order per row.
    pub trace: Vec<TraceEntry>,
    /// Inverse-Hessian buffers ever allocated by this run.
    pub hinv_matrices_allocated: usize,
    /// Most inverse-Hessian buffers alive at once.
    pub hinv_peak: usize,
}

/// Per-weight sensitivities `(index, L)` over the live set of `hinv`.
/// `row` selects the grid row to quantize against.
pub fn sensitivity_scores(
    w_row: &[f64],
    hinv: &InverseHessian,
    g: &QuantGrid,
    row: usize,
) -> Result<Vec<(usize, f64)>> {
    assert_eq!(w_row.len(), hinv.dim(), "row length must match hessian dim");
    let mut out = Vec::with_capacity(hinv.live_count());
    for &j in hinv.live_indices() {
        let p = hinv.diag(j);
        if p <= SINGULAR_PIVOT_TOL {
            return Err(Error::SingularPivot { index: j, value: p });
        }
        let e = quantize_value(w_row[j], row, g) - w_row[j];
        out.push((j, e * e / (2.0 * p)));
    }
    Ok(out)
}

/// Quantizes `w_row[k]` and compensates the remaining live weights.
/// Returns the new row; dead indices are untouched and `out[k]` lands
/// exactly on its grid value.
pub fn compensate(
    w_row: &[f64],
    hinv: &InverseHessian,
    k: usize,
    g: &QuantGrid,
    row: usize,
) -> Result<Vec<f64>> {
    assert_eq!(w_row.len(), hinv.dim(), "row length must match hessian dim");
    assert!(k < hinv.dim(), "index {k} out of bounds");
    if !hinv.is_live(k) {
        return Err(Error::DeadIndex { index: k });
    }
    let pivot = hinv.diag(k);
    if pivot <= SINGULAR_PIVOT_TOL {
        return Err(Error::SingularPivot {
            index: k,
            value: pivot,
        });
    }
    let mut out = w_row.to_vec();
    let q = quantize_value(w_row[k], row, g);
    compensate_in_place(&mut out, hinv, k, q, pivot);
    Ok(out)
}

/// Applies the compensation update assuming the pivot was already validated.
/// Commits `row[k] = q` exactly rather than through the (algebraically
/// equivalent) rank-1 formula, so closure is bitwise.
fn compensate_in_place(row: &mut [f64], hinv: &InverseHessian, k: usize, q: f64, pivot: f64) {
    let s = (row[k] - q) / pivot;
    if s != 0.0 {
        for &j in hinv.live_indices() {
            if j != k {
                row[j] -= s * hinv.get(j, k);
            }
        }
    }
    row[k] = q;
}

/// Quantization order for one row, fixed from its initial state.
fn fixed_order(
    row: &[f64],
    hinv: &InverseHessian,
    g: &QuantGrid,
    i: usize,
    strategy: OrderingStrategy,
) -> Result<Vec<usize>> {
    debug_assert!(hinv.fully_live());
    let keys: Vec<f64> = match strategy.key {
        SortKey::Unsorted => return Ok((0..row.len()).collect()),
        SortKey::Sensitivity => sensitivity_scores(row, hinv, g, i)?
            .into_iter()
            .map(|(_, l)| l)
            .collect(),
        SortKey::QuantError => row
            .iter()
            .map(|&w| (quantize_value(w, i, g) - w).abs())
            .collect(),
        SortKey::WeightNorm => row.iter().map(|&w| w.abs()).collect(),
    };
    Ok(sorted_indices(&keys, strategy.direction))
}

/// Best live index under the strategy, evaluated on the current row state.
/// Ties break toward the smaller index.
fn pick_next(
    row: &[f64],
    hinv: &InverseHessian,
    g: &QuantGrid,
    i: usize,
    strategy: OrderingStrategy,
) -> Result<usize> {
    let live = hinv.live_indices();
    debug_assert!(!live.is_empty());
    if strategy.key == SortKey::Unsorted {
        return Ok(live[0]);
    }
    let mut best = live[0];
    let mut best_key = f64::NAN;
    for &j in live {
        let key = match strategy.key {
            SortKey::Sensitivity => {
                let p = hinv.diag(j);
                if p <= SINGULAR_PIVOT_TOL {
                    return Err(Error::SingularPivot { index: j, value: p });
                }
                let e = quantize_value(row[j], i, g) - row[j];
                e * e / (2.0 * p)
            }
            SortKey::QuantError => (quantize_value(row[j], i, g) - row[j]).abs(),
            SortKey::WeightNorm => row[j].abs(),
            SortKey::Unsorted => unreachable!(),
        };
        let better = best_key.is_nan()
            || match strategy.direction {
                Direction::Descending => key > best_key,
                Direction::Ascending => key < best_key,
            };
        if better {
            best = j;
            best_key = key;
        }
    }
    Ok(best)
}

/// Per-row OBQ over a whole layer. Every row gets its own inverse-Hessian
/// copy (the returned counters record exactly that), walks its own column
/// order, and compensates only its own weights.
pub fn obq_quantize_layer(
    w: &Mat,
    h: &Hessian,
    g: &QuantGrid,
    strategy: OrderingStrategy,
    mode: ObqMode,
) -> Result<ObqOutput> {
    assert_eq!(w.cols(), h.dim(), "weight columns must match hessian dim");
    assert_eq!(w.rows(), g.rows(), "grid must be fit on this weight matrix");
    let d_row = w.rows();
    let d_col = w.cols();
    assert!(d_row > 0 && d_col > 0, "layer must be non-empty");

    let tally = HinvTally::new();
    let mut master = invert_spd(h)?;
    master.set_tally(tally.clone());
    // All row copies are materialized up front; the peak counter is the
    // honest memory cost of the algorithm.
    let mut row_invs: Vec<InverseHessian> = Vec::with_capacity(d_row);
    for _ in 1..d_row {
        row_invs.push(master.clone());
    }
    row_invs.push(master);

    let mut w_q = w.clone();
    let mut trace = Vec::with_capacity(d_row * d_col);
    for (i, hinv) in row_invs.iter_mut().enumerate() {
        let row = w_q.row_mut(i);
        let order = match mode {
            ObqMode::Fixed => Some(fixed_order(row, hinv, g, i, strategy)?),
            ObqMode::Greedy => None,
        };
        for step in 0..d_col {
            let k = match &order {
                Some(o) => o[step],
                None => pick_next(row, hinv, g, i, strategy)?,
            };
            let pivot = hinv.diag(k);
            if pivot <= SINGULAR_PIVOT_TOL {
                return Err(Error::SingularPivot {
                    index: k,
                    value: pivot,
                });
            }
            let q = quantize_value(row[k], i, g);
            let e = row[k] - q;
            trace.push(TraceEntry {
                step,
                row: i,
                col: k,
                sensitivity: e * e / (2.0 * pivot),
                value: q,
            });
            compensate_in_place(row, hinv, k, q, pivot);
            hinv.downdate_in_place(k)?;
        }
    }
    drop(row_invs);

    Ok(ObqOutput {
        w_q,
        trace,
        hinv_matrices_allocated: tally.allocated_total(),
        hinv_peak: tally.peak(),
    })
}

/// Round-to-nearest baseline: snaps every weight onto the grid, no
/// compensation. Idempotent on anything already on the grid.
pub fn rtn_quantize_layer(w: &Mat, g: &QuantGrid) -> Mat {
    assert_eq!(w.rows(), g.rows(), "grid must be fit on this weight matrix");
    let mut out = w.clone();
    for i in 0..out.rows() {
        for v in out.row_mut(i) {
            *v = quantize_value(*v, i, g);
        }
    }
    out
}
