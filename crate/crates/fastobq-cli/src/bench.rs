//! Head-to-head timing of the reference per-row OBQ against fastobq.
//!
//! One synthetic gaussian layer per row count, shared grid and Hessian,
//! one untimed warmup for each quantizer, then interleaved timed repeats
//! (interleaving keeps thermal or scheduler drift from favoring whichever
//! side runs last). Medians are reported, not means, so one noisy repeat
//! cannot skew a speedup claim.

use std::time::Instant;

use fastobq_core::fastobq::fastobq_quantize_layer;
use fastobq_core::linalg::{build_hessian, Hessian};
use fastobq_core::obq::{obq_quantize_layer, ObqMode};
use fastobq_core::{layer_error, OrderingStrategy, QuantGrid};

use crate::synth::{generate_layer, SynthSpec, WeightDist};
use crate::HarnessError;

pub const BENCH_DAMPING: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
pub struct BenchRow {
    pub d_row: usize,
    pub d_col: usize,
    pub obq_ms_median: f64,
    pub fastobq_ms_median: f64,
    /// obq median / fastobq median.
    pub speedup: f64,
    pub obq_error_total: f64,
    pub fastobq_error_total: f64,
    pub obq_hinv_allocated: usize,
    pub obq_hinv_peak: usize,
    pub fastobq_hinv_allocated: usize,
    pub fastobq_hinv_peak: usize,
}

fn median(samples: &mut [f64]) -> f64 {
    assert!(!samples.is_empty());
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

struct BenchLayer {
    weight: fastobq_core::Mat,
    calib: fastobq_core::Mat,
    grid: QuantGrid,
    hessian: Hessian,
}

fn prepare(d_row: usize, d_col: usize, bits: u8) -> Result<BenchLayer, HarnessError> {
    // Seed folds in the shape so rows of a sweep are independent draws.
    let seed = 0xBE11C4 ^ (d_row as u64) << 16 ^ d_col as u64;
    let layer = generate_layer(
        &SynthSpec::new(d_row, d_col, None, WeightDist::Gaussian),
        seed,
    );
    let grid = fastobq_core::grid::fit_grid(&layer.weight, bits, fastobq_core::Scheme::Symmetric)?;
    let hessian = build_hessian(&layer.calib, BENCH_DAMPING)?;
    Ok(BenchLayer {
        weight: layer.weight,
        calib: layer.calib,
        grid,
        hessian,
    })
}

/// Benchmarks one (d_row, d_col) point. `repeats` timed runs per quantizer.
pub fn bench_layer(
    d_row: usize,
    d_col: usize,
    bits: u8,
    repeats: usize,
) -> Result<BenchRow, HarnessError> {
    assert!(repeats > 0, "need at least one timed repeat");
    let l = prepare(d_row, d_col, bits)?;
    let strategy = OrderingStrategy::SENSI_DES;

    // Warmup, also the run whose outputs and counters get reported.
    let obq_out = obq_quantize_layer(&l.weight, &l.hessian, &l.grid, strategy, ObqMode::Fixed)?;
    let fast_out = fastobq_quantize_layer(&l.weight, &l.hessian, &l.grid, strategy)?;
    let obq_err = layer_error(&l.weight, &obq_out.w_q, &l.calib);
    let fast_err = layer_error(&l.weight, &fast_out.w_q, &l.calib);

    let mut obq_ms = Vec::with_capacity(repeats);
    let mut fast_ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        let out = obq_quantize_layer(&l.weight, &l.hessian, &l.grid, strategy, ObqMode::Fixed)?;
        obq_ms.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(&out.w_q);

        let t = Instant::now();
        let out = fastobq_quantize_layer(&l.weight, &l.hessian, &l.grid, strategy)?;
        fast_ms.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(&out.w_q);
    }

    let obq_med = median(&mut obq_ms);
    let fast_med = median(&mut fast_ms);
    Ok(BenchRow {
        d_row,
        d_col,
        obq_ms_median: obq_med,
        fastobq_ms_median: fast_med,
        speedup: obq_med / fast_med,
        obq_error_total: obq_err.total,
        fastobq_error_total: fast_err.total,
        obq_hinv_allocated: obq_out.hinv_matrices_allocated,
        obq_hinv_peak: obq_out.hinv_peak,
        fastobq_hinv_allocated: fast_out.hinv_matrices_allocated,
        fastobq_hinv_peak: fast_out.hinv_peak,
    })
}

/// Benchmarks a row-count sweep at a fixed column count.
pub fn bench_sweep(
    rows: &[usize],
    d_col: usize,
    bits: u8,
    repeats: usize,
) -> Result<Vec<BenchRow>, HarnessError> {
    rows.iter()
        .map(|&r| bench_layer(r, d_col, bits, repeats))
        .collect()
}

/// Plain-text table for stdout.
pub fn render_table(rows: &[BenchRow]) -> String {
    let mut out = String::new();
    out.push_str(
        "  d_row  d_col     obq_ms fastobq_ms  speedup  obq_hinv(peak)  fast_hinv(peak)\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{:>7} {:>6} {:>10.2} {:>10.2} {:>8.2} {:>9}({:>4}) {:>10}({:>4})\n",
            r.d_row,
            r.d_col,
            r.obq_ms_median,
            r.fastobq_ms_median,
            r.speedup,
            r.obq_hinv_allocated,
            r.obq_hinv_peak,
            r.fastobq_hinv_allocated,
            r.fastobq_hinv_peak,
        ));
    }
    out
}
