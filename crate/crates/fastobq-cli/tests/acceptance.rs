//! Acceptance suite: one test per shipped claim, each printing a
//! `[acceptance NN] <claim> PASS/FAIL (details)` line.
//!
//! Run with:
//!
//! ```text
//! cargo test -p fastobq-cli --test acceptance -- --nocapture
//! ```
//!
//! The tests hold a shared lock so timing-sensitive criteria never fight
//! each other for cores, and the statistical criteria share lazily built
//! ensembles instead of re-quantizing hundreds of layers per test.

use std::sync::{LazyLock, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use fastobq_cli::bench::{bench_sweep, BenchRow};
use fastobq_cli::synth::{generate_layer, SynthSpec, WeightDist};
use fastobq_core::fastobq::{fastobq_quantize_layer, fastobq_quantize_layer_traced};
use fastobq_core::grid::{fit_grid, quantize_value};
use fastobq_core::linalg::{build_hessian, invert_spd};
use fastobq_core::obq::{compensate, obq_quantize_layer, rtn_quantize_layer, ObqMode};
use fastobq_core::{layer_error, Mat, OrderingStrategy, Scheme, TraceEntry};
use fastobq_testkit as tk;
use rand::seq::SliceRandom;
use rand::Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    // A criterion that failed must not silence the rest of the suite.
    SERIAL
        .lock()
        .unwrap_or_else(|poisoned| poisoned.into_inner())
}

/// Prints the verdict line and fails the test on FAIL.
fn verdict(n: usize, claim: &str, pass: bool, details: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    println!("[acceptance {n:02}] {claim} {word} ({details})");
    assert!(pass, "[acceptance {n:02}] {claim} FAIL ({details})");
}

// ---------------------------------------------------------------------------
// Shared ensembles for the statistical criteria: 64x64 layers, 256
// calibration samples, 4-bit symmetric grid, damping 0.1.

const ENS_DIM: usize = 64;
const ENS_SAMPLES: usize = 256;
const ENS_BITS: u8 = 4;
const ENS_DAMPING: f64 = 0.1;

struct VariantErrors {
    rtn: f64,
    obq_des: f64,
    obq_asc: f64,
    fast_des: f64,
    fast_asc: f64,
    fast_none: f64,
}

fn run_variants(dist: WeightDist, seed: u64) -> VariantErrors {
    let spec = SynthSpec::new(ENS_DIM, ENS_DIM, Some(ENS_SAMPLES), dist);
    let layer = generate_layer(&spec, seed);
    let grid = fit_grid(&layer.weight, ENS_BITS, Scheme::Symmetric).unwrap();
    let h = build_hessian(&layer.calib, ENS_DAMPING).unwrap();

    let err = |w_q: &Mat| layer_error(&layer.weight, w_q, &layer.calib).total;
    let obq = |strategy| {
        let out = obq_quantize_layer(&layer.weight, &h, &grid, strategy, ObqMode::Fixed).unwrap();
        err(&out.w_q)
    };
    let fast = |strategy| {
        let out = fastobq_quantize_layer(&layer.weight, &h, &grid, strategy).unwrap();
        err(&out.w_q)
    };

    VariantErrors {
        rtn: err(&rtn_quantize_layer(&layer.weight, &grid)),
        obq_des: obq(OrderingStrategy::SENSI_DES),
        obq_asc: obq(OrderingStrategy::SENSI_ASC),
        fast_des: fast(OrderingStrategy::SENSI_DES),
        fast_asc: fast(OrderingStrategy::SENSI_ASC),
        fast_none: fast(OrderingStrategy::NONE),
    }
}

fn build_ensemble(dist: WeightDist, seeds: std::ops::Range<u64>) -> (Vec<VariantErrors>, Duration) {
    let start = Instant::now();
    let rows = seeds.map(|s| run_variants(dist, s)).collect();
    (rows, start.elapsed())
}

/// 100 gaussian seeds: the first 50 serve the ordering/parity medians, all
/// 100 serve the RTN-dominance count.
static ENS_GAUSS: LazyLock<(Vec<VariantErrors>, Duration)> =
    LazyLock::new(|| build_ensemble(WeightDist::Gaussian, 0..100));

static ENS_TAIL: LazyLock<(Vec<VariantErrors>, Duration)> =
    LazyLock::new(|| build_ensemble(WeightDist::LongTail, 1000..1050));

/// Benchmark sweep shared by the speedup and memory criteria.
static BENCH: LazyLock<(Vec<BenchRow>, Duration)> = LazyLock::new(|| {
    let start = Instant::now();
    let rows = bench_sweep(&[64, 128, 256], 256, 4, 3).expect("bench sweep");
    (rows, start.elapsed())
});

// ---------------------------------------------------------------------------

#[test]
fn c01_downdate_matches_submatrix_inversion() {
    let _g = serial();
    let start = Instant::now();
    let d = 32;
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = tk::rng(seed);
        let x = tk::random_mat(&mut rng, d, 2 * d, -1.0, 1.0);
        let h = build_hessian(&x, 0.1).unwrap();
        let mut inv = invert_spd(&h).unwrap();

        let mut order: Vec<usize> = (0..d).collect();
        order.shuffle(&mut rng);
        let mut keep = vec![true; d];
        for &k in &order {
            inv.downdate_in_place(k).unwrap();
            keep[k] = false;
            let direct = tk::delete_then_invert(h.values(), &keep).unwrap();
            worst = worst.max(inv.values().max_abs_diff(&direct));
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-8 && elapsed < Duration::from_secs(10);
    verdict(
        1,
        "iterated inverse downdate tracks delete-then-invert",
        pass,
        &format!(
            "100 matrices of dim {d}, full removal, max dev {worst:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c02_compensation_is_the_constrained_optimum() {
    let _g = serial();
    let start = Instant::now();
    let d = 6;
    let mut worst_delta = 0.0f64;
    let mut worst_cost = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = tk::rng(200 + seed);
        let x = tk::random_mat(&mut rng, d, 4 * d, -1.0, 1.0);
        let h = build_hessian(&x, 0.1).unwrap();
        let hinv = invert_spd(&h).unwrap();
        let w = tk::random_mat(&mut rng, 1, d, -1.5, 1.5);
        let grid = fit_grid(&w, 4, Scheme::Symmetric).unwrap();
        let k = rng.random_range(0..d);

        let w_row = w.row(0);
        let new_row = compensate(w_row, &hinv, k, &grid, 0).unwrap();
        let delta: Vec<f64> = new_row.iter().zip(w_row).map(|(n, o)| n - o).collect();

        let q = quantize_value(w_row[k], 0, &grid);
        let target = q - w_row[k];
        let reference = tk::kkt_delta(h.values(), k, target).unwrap();
        for (a, b) in delta.iter().zip(&reference) {
            worst_delta = worst_delta.max((a - b).abs());
        }

        // The realized quadratic cost must equal the scored sensitivity.
        let cost = 0.5 * tk::quad_form(h.values(), &delta);
        let scored = target * target / (2.0 * hinv.diag(k));
        worst_cost = worst_cost.max((cost - scored).abs());
    }
    let elapsed = start.elapsed();
    let pass = worst_delta <= 1e-8 && worst_cost <= 1e-8 && elapsed < Duration::from_secs(5);
    verdict(
        2,
        "compensation solves the constrained minimum and costs its score",
        pass,
        &format!(
            "100 instances of dim {d}, max delta dev {worst_delta:.2e}, max cost dev {worst_cost:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

/// Replays a trace into a fresh matrix, asserting every weight is committed
/// exactly once and the final state matches the output. Returns the worst
/// distance of a committed value from its own grid point.
fn replay(
    trace: &[TraceEntry],
    w_q: &Mat,
    grid: &fastobq_core::QuantGrid,
    label: &str,
    checked: &mut usize,
) -> f64 {
    let mut worst = 0.0f64;
    let mut seen = vec![false; w_q.rows() * w_q.cols()];
    let mut rebuilt = Mat::zeros(w_q.rows(), w_q.cols());
    for e in trace {
        let flat = e.row * w_q.cols() + e.col;
        assert!(
            !seen[flat],
            "{label}: weight ({},{}) committed twice",
            e.row, e.col
        );
        seen[flat] = true;
        rebuilt.set(e.row, e.col, e.value);
        worst = worst.max((quantize_value(e.value, e.row, grid) - e.value).abs());
        *checked += 1;
    }
    assert!(seen.iter().all(|&s| s), "{label}: trace missed weights");
    assert_eq!(
        rebuilt.max_abs_diff(w_q),
        0.0,
        "{label}: trace disagrees with output"
    );
    worst
}

#[test]
fn c03_committed_weights_sit_on_their_grid() {
    let _g = serial();
    let mut worst = 0.0f64;
    let mut checked = 0usize;

    for seed in 0..10u64 {
        let spec = SynthSpec::new(16, 16, Some(128), WeightDist::Gaussian);
        let layer = generate_layer(&spec, 300 + seed);
        let grid = fit_grid(&layer.weight, 4, Scheme::Symmetric).unwrap();
        let h = build_hessian(&layer.calib, 0.1).unwrap();

        let obq = obq_quantize_layer(
            &layer.weight,
            &h,
            &grid,
            OrderingStrategy::SENSI_DES,
            ObqMode::Fixed,
        )
        .unwrap();
        worst = worst.max(replay(&obq.trace, &obq.w_q, &grid, "obq", &mut checked));

        let (fast, trace) =
            fastobq_quantize_layer_traced(&layer.weight, &h, &grid, OrderingStrategy::SENSI_DES)
                .unwrap();
        worst = worst.max(replay(&trace, &fast.w_q, &grid, "fastobq", &mut checked));
    }

    let pass = worst <= 1e-12;
    verdict(
        3,
        "every committed weight lands exactly on its grid",
        pass,
        &format!("10 layers, {checked} trace entries replayed, max grid dev {worst:.2e}"),
    );
}

#[test]
fn c04_single_row_and_tiled_rows_match_reference() {
    let _g = serial();
    let d_col = 64;
    let mut worst = 0.0f64;

    let compare = |w: &Mat, calib: &Mat| -> f64 {
        let grid = fit_grid(w, 4, Scheme::Symmetric).unwrap();
        let h = build_hessian(calib, 0.1).unwrap();
        let obq =
            obq_quantize_layer(w, &h, &grid, OrderingStrategy::SENSI_DES, ObqMode::Fixed).unwrap();
        let fast = fastobq_quantize_layer(w, &h, &grid, OrderingStrategy::SENSI_DES).unwrap();
        fast.w_q.max_abs_diff(&obq.w_q)
    };

    for seed in 0..20u64 {
        let single = generate_layer(
            &SynthSpec::new(1, d_col, Some(256), WeightDist::Gaussian),
            400 + seed,
        );
        worst = worst.max(compare(&single.weight, &single.calib));

        // Identical rows share one sensitivity profile, so the shared
        // schedule must reproduce the per-row result exactly.
        let d_row = 8;
        let mut tiled = Mat::zeros(d_row, d_col);
        for r in 0..d_row {
            for c in 0..d_col {
                tiled.set(r, c, single.weight.get(0, c));
            }
        }
        worst = worst.max(compare(&tiled, &single.calib));
    }

    let pass = worst <= 1e-10;
    verdict(
        4,
        "shared schedule equals per-row reference on single and tiled rows",
        pass,
        &format!("20 seeds, {d_col} columns, max per-weight dev {worst:.2e}"),
    );
}

#[test]
fn c05_descending_order_beats_ascending() {
    let _g = serial();
    let (gauss, g_time) = &*ENS_GAUSS;
    let (tail, t_time) = &*ENS_TAIL;
    let build = *g_time + *t_time;

    let med = |xs: Vec<f64>| tk::median(&xs);
    let mut pass = build < Duration::from_secs(120);
    let mut details = Vec::new();
    for (name, rows) in [("gaussian", &gauss[..50]), ("long_tail", &tail[..])] {
        for (quant, des, asc) in [
            (
                "obq",
                med(rows.iter().map(|r| r.obq_des).collect()),
                med(rows.iter().map(|r| r.obq_asc).collect()),
            ),
            (
                "fastobq",
                med(rows.iter().map(|r| r.fast_des).collect()),
                med(rows.iter().map(|r| r.fast_asc).collect()),
            ),
        ] {
            pass &= des <= asc;
            details.push(format!("{name}/{quant} med des {des:.4} vs asc {asc:.4}"));
        }
    }
    details.push(format!("ensembles built in {:.1}s", build.as_secs_f64()));
    verdict(
        5,
        "descending sensitivity order beats ascending in median error",
        pass,
        &details.join("; "),
    );
}

#[test]
fn c06_shared_schedule_stays_near_reference() {
    let _g = serial();
    let (gauss, _) = &*ENS_GAUSS;
    let (tail, _) = &*ENS_TAIL;

    let mut pass = true;
    let mut details = Vec::new();
    for (name, rows) in [("gaussian", &gauss[..50]), ("long_tail", &tail[..])] {
        let fast = tk::median(&rows.iter().map(|r| r.fast_des).collect::<Vec<_>>());
        let obq = tk::median(&rows.iter().map(|r| r.obq_des).collect::<Vec<_>>());
        let ratio = fast / obq;
        pass &= ratio <= 1.1;
        details.push(format!("{name} median ratio {ratio:.4}"));
    }
    verdict(
        6,
        "fastobq median error within 1.1x of per-row reference",
        pass,
        &details.join("; "),
    );
}

#[test]
fn c07_sorting_beats_no_sorting_on_average() {
    let _g = serial();
    let (gauss, _) = &*ENS_GAUSS;
    let (tail, _) = &*ENS_TAIL;
    let pooled: Vec<&VariantErrors> = gauss[..50].iter().chain(&tail[..]).collect();

    let des = tk::mean(&pooled.iter().map(|r| r.fast_des).collect::<Vec<_>>());
    let none = tk::mean(&pooled.iter().map(|r| r.fast_none).collect::<Vec<_>>());
    let pass = des <= none;
    verdict(
        7,
        "sensitivity sorting beats natural order in mean error",
        pass,
        &format!("100 pooled seeds, mean sorted {des:.4} vs unsorted {none:.4}"),
    );
}

#[test]
fn c08_speedup_grows_with_rows() {
    let _g = serial();
    let (rows, build) = &*BENCH;

    let mut pass = *build < Duration::from_secs(300);
    let mut prev = 0.0;
    let mut parts = Vec::new();
    for r in rows {
        pass &= r.speedup > prev;
        prev = r.speedup;
        parts.push(format!("{}x{}: {:.1}x", r.d_row, r.d_col, r.speedup));
    }
    let last = rows.last().unwrap();
    pass &= last.d_row == 256 && last.speedup >= 10.0;
    parts.push(format!("bench took {:.1}s", build.as_secs_f64()));
    verdict(
        8,
        "speedup at least 10x at 256 rows and strictly increasing",
        pass,
        &parts.join("; "),
    );
}

#[test]
fn c09_memory_counters_match_the_claims() {
    let _g = serial();
    let (rows, _) = &*BENCH;

    let mut pass = true;
    let mut parts = Vec::new();
    for r in rows {
        pass &= r.obq_hinv_peak == r.d_row && r.obq_hinv_allocated == r.d_row;
        pass &= r.fastobq_hinv_peak == 1 && r.fastobq_hinv_allocated == 1;
        parts.push(format!(
            "{} rows: obq peak {}, fastobq peak {}",
            r.d_row, r.obq_hinv_peak, r.fastobq_hinv_peak
        ));
    }
    verdict(
        9,
        "reference peaks at one inverse per row, fastobq at one total",
        pass,
        &parts.join("; "),
    );
}

#[test]
fn c10_compensated_quantizers_beat_rtn() {
    let _g = serial();
    let (gauss, _) = &*ENS_GAUSS;

    let n = gauss.len();
    let obq_wins = gauss.iter().filter(|r| r.obq_des <= r.rtn).count();
    let fast_wins = gauss.iter().filter(|r| r.fast_des <= r.rtn).count();
    let mean_rtn = tk::mean(&gauss.iter().map(|r| r.rtn).collect::<Vec<_>>());
    let mean_obq = tk::mean(&gauss.iter().map(|r| r.obq_des).collect::<Vec<_>>());
    let mean_fast = tk::mean(&gauss.iter().map(|r| r.fast_des).collect::<Vec<_>>());

    let pass = obq_wins * 100 >= 95 * n
        && fast_wins * 100 >= 95 * n
        && mean_obq <= mean_rtn
        && mean_fast <= mean_rtn;
    verdict(
        10,
        "compensated quantizers beat round-to-nearest",
        pass,
        &format!(
            "obq wins {obq_wins}/{n}, fastobq wins {fast_wins}/{n}, means rtn {mean_rtn:.4} obq {mean_obq:.4} fastobq {mean_fast:.4}"
        ),
    );
}

#[test]
fn c11_golden_tensor_file_is_stable() {
    let _g = serial();
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data/golden_2x2_identity.ftns");
    let raw = std::fs::read(&path).unwrap();
    let parsed = fastobq_cli::tensor::read_tensor(&path).unwrap();

    let dims_ok = parsed.dims == [2, 2];
    let values_ok = match &parsed.data {
        fastobq_cli::tensor::TensorData::F32(v) => v == &[1.0, 0.0, 0.0, 1.0],
        _ => false,
    };
    let bytes = fastobq_cli::tensor::to_bytes(&parsed).unwrap();
    let stable = bytes == raw;

    let pass = dims_ok && values_ok && stable && raw.len() == 40;
    verdict(
        11,
        "golden tensor file parses and re-serializes byte-identically",
        pass,
        &format!(
            "{} bytes, dims ok: {dims_ok}, values ok: {values_ok}, byte-stable: {stable}",
            raw.len()
        ),
    );
}
