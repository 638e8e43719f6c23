//! Uniform quantization grids.
//!
//! A grid is fit once, on the original weights, and then treated as frozen:
//! compensation moves weights around later, but never re-fits scales. Codes
//! are signed integers in `[qmin, qmax]`; a weight maps to
//!
//! ```text
//! code    = clamp(rint(w / scale) + zero_point, qmin, qmax)
//! quant(w) = scale * (code - zero_point)
//! ```
//!
//! with `rint` rounding half to even. Symmetric grids use
//! `qmax = 2^(bits-1) - 1`, `qmin = -qmax`, `scale = max|row| / qmax` and a
//! zero point of 0, so zero is always exactly representable. Asymmetric
//! grids use `qmin = 0`, `qmax = 2^bits - 1`,
//! `scale = (max - min) / (2^bits - 1)` and
//! `zero_point = clamp(rint(-min / scale), 0, qmax)`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::math::round_half_even;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Symmetric,
    Asymmetric,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Symmetric => "sym",
            Scheme::Asymmetric => "asym",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sym" => Some(Scheme::Symmetric),
            "asym" => Some(Scheme::Asymmetric),
            _ => None,
        }
    }
}

/// Frozen per-row uniform grid.
#[derive(Clone, Debug)]
pub struct QuantGrid {
    bits: u8,
    scheme: Scheme,
    scales: Vec<f64>,
    zero_points: Vec<i32>,
    qmin: i32,
    qmax: i32,
}

impl QuantGrid {
    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// One scale per weight row, all strictly positive.
    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[i32] {
        &self.zero_points
    }

    pub fn qmin(&self) -> i32 {
        self.qmin
    }

    pub fn qmax(&self) -> i32 {
        self.qmax
    }

    pub fn rows(&self) -> usize {
        self.scales.len()
    }
}

fn code_range(bits: u8, scheme: Scheme) -> (i32, i32) {
    match scheme {
        Scheme::Symmetric => {
            let qmax = (1i32 << (bits - 1)) - 1;
            (-qmax, qmax)
        }
        Scheme::Asymmetric => (0, (1i32 << bits) - 1),
    }
}

/// Fits one grid row. Returns (scale, zero_point).
fn fit_row(row_min: f64, row_max: f64, row_max_abs: f64, bits: u8, scheme: Scheme) -> (f64, i32) {
    let sym_qmax = ((1i32 << (bits - 1)) - 1) as f64;
    match scheme {
        Scheme::Symmetric => {
            let scale = if row_max_abs == 0.0 {
                1.0
            } else {
                row_max_abs / sym_qmax
            };
            (scale, 0)
        }
        Scheme::Asymmetric => {
            let range = row_max - row_min;
            if range == 0.0 {
                // Degenerate range: fall back to a symmetric fit for this
                // row, centered inside the unsigned code range.
                let scale = if row_max_abs == 0.0 {
                    1.0
                } else {
                    row_max_abs / sym_qmax
                };
                (scale, sym_qmax as i32)
            } else {
                let qmax = ((1i32 << bits) - 1) as f64;
                let scale = range / qmax;
                let zp = round_half_even(-row_min / scale).clamp(0.0, qmax);
                (scale, zp as i32)
            }
        }
    }
}

/// Fits a per-row grid on the original weights.
pub fn fit_grid(w: &Mat, bits: u8, scheme: Scheme) -> Result<QuantGrid> {
    assert!((2..=8).contains(&bits), "bits must be in 2..=8, got {bits}");
    if !w.is_finite() {
        return Err(Error::NonFinite);
    }
    let (qmin, qmax) = code_range(bits, scheme);
    let mut scales = Vec::with_capacity(w.rows());
    let mut zero_points = Vec::with_capacity(w.rows());
    for i in 0..w.rows() {
        let row = w.row(i);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut amax = 0.0f64;
        for &v in row {
            lo = lo.min(v);
            hi = hi.max(v);
            amax = amax.max(v.abs());
        }
        let (scale, zp) = fit_row(lo, hi, amax, bits, scheme);
        scales.push(scale);
        zero_points.push(zp);
    }
    Ok(QuantGrid {
        bits,
        scheme,
        scales,
        zero_points,
        qmin,
        qmax,
    })
}

/// Fits a single grid over the whole tensor and replicates it per row.
pub fn fit_grid_per_tensor(w: &Mat, bits: u8, scheme: Scheme) -> Result<QuantGrid> {
    assert!((2..=8).contains(&bits), "bits must be in 2..=8, got {bits}");
    if !w.is_finite() {
        return Err(Error::NonFinite);
    }
    let (qmin, qmax) = code_range(bits, scheme);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut amax = 0.0f64;
    for &v in w.data() {
        lo = lo.min(v);
        hi = hi.max(v);
        amax = amax.max(v.abs());
    }
    if w.data().is_empty() {
        lo = 0.0;
        hi = 0.0;
    }
    let (scale, zp) = fit_row(lo, hi, amax, bits, scheme);
    Ok(QuantGrid {
        bits,
        scheme,
        scales: alloc::vec![scale; w.rows()],
        zero_points: alloc::vec![zp; w.rows()],
        qmin,
        qmax,
    })
}

/// Snaps one weight of row `row` onto the grid.
#[inline]
pub fn quantize_value(w: f64, row: usize, g: &QuantGrid) -> f64 {
    let scale = g.scales[row];
    let zp = g.zero_points[row] as f64;
    let code = (round_half_even(w / scale) + zp).clamp(g.qmin as f64, g.qmax as f64);
    scale * (code - zp)
}

/// Signed distance from `w` to its grid point: `quantize_value(w) - w`.
#[inline]
pub fn quant_error(w: f64, row: usize, g: &QuantGrid) -> f64 {
    quantize_value(w, row, g) - w
}
