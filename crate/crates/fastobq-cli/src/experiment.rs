//! Experiment configs and the grid runner behind `fastobq compare`.
//!
//! A config names a layer source (manifest or synthetic), a set of
//! quantizers and orderings, and one grid. The runner evaluates the full
//! cartesian product, one report row per cell. Layers run in parallel;
//! cells are isolated, so a singular layer shows up as a `run_error` row
//! instead of killing the experiment.

use std::path::{Path, PathBuf};
use std::time::Instant;

use fastobq_core::linalg::{build_hessian_damped, DampingPolicy};
use fastobq_core::obq::{obq_quantize_layer, rtn_quantize_layer, ObqMode};
use fastobq_core::{
    fastobq::fastobq_quantize_layer_traced, grid::fit_grid, layer_error, Hessian, LayerError, Mat,
    OrderingStrategy, QuantGrid, Scheme, TraceEntry,
};
use rayon::prelude::*;
use serde::Deserialize;

use crate::bundle::{load_bundle, LayerBundle};
use crate::report::{sort_reports, GridSummary, LayerReport, WarningCounts};
use crate::synth::{generate_layer, SynthSpec, WeightDist};
use crate::{report, HarnessError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantizerKind {
    Rtn,
    Obq,
    FastObq,
}

impl QuantizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantizerKind::Rtn => "rtn",
            QuantizerKind::Obq => "obq",
            QuantizerKind::FastObq => "fastobq",
        }
    }

    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        match s {
            "rtn" => Ok(QuantizerKind::Rtn),
            "obq" => Ok(QuantizerKind::Obq),
            "fastobq" => Ok(QuantizerKind::FastObq),
            other => Err(HarnessError::InvalidConfig(format!(
                "unknown quantizer '{other}' (expected rtn, obq or fastobq)"
            ))),
        }
    }
}

/// On-disk experiment config. Unknown keys are rejected so typos fail
/// loudly instead of silently running defaults.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub bundles: BundlesSpec,
    pub quantizers: Vec<String>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<String>,
    pub bits: u8,
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_damping_mode")]
    pub damping_mode: String,
    #[serde(default)]
    pub greedy: bool,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_strategies() -> Vec<String> {
    vec!["sensi_des".into()]
}

fn default_scheme() -> String {
    "sym".into()
}

fn default_damping() -> f64 {
    0.1
}

fn default_damping_mode() -> String {
    "absolute".into()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Exactly one of `manifest` / `synthetic` must be present.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundlesSpec {
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub d_row: usize,
    pub d_col: usize,
    #[serde(default)]
    pub n_samples: Option<usize>,
    #[serde(default = "default_weight_dist")]
    pub weight_dist: String,
}

fn default_weight_dist() -> String {
    "gaussian".into()
}

/// A fully validated experiment: strings parsed, layers materialized.
#[derive(Debug)]
pub struct Experiment {
    /// (layer, seed recorded in its rows). Manifest layers carry seed 0;
    /// synthetic sources expand to one layer per configured seed.
    pub layers: Vec<(LayerBundle, u64)>,
    pub quantizers: Vec<QuantizerKind>,
    pub strategies: Vec<OrderingStrategy>,
    pub bits: u8,
    pub scheme: Scheme,
    pub damping: f64,
    pub damping_policy: DampingPolicy,
    pub greedy: bool,
    pub output: Option<PathBuf>,
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => HarnessError::MissingFile(path.to_path_buf()),
        _ => HarnessError::Io(e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

impl Experiment {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        if cfg.quantizers.is_empty() {
            return Err(HarnessError::InvalidConfig(
                "quantizers must not be empty".into(),
            ));
        }
        let mut quantizers = Vec::new();
        for q in &cfg.quantizers {
            let kind = QuantizerKind::parse(q)?;
            if quantizers.contains(&kind) {
                return Err(HarnessError::InvalidConfig(format!(
                    "duplicate quantizer '{q}'"
                )));
            }
            quantizers.push(kind);
        }

        if cfg.strategies.is_empty() {
            return Err(HarnessError::InvalidConfig(
                "strategies must not be empty".into(),
            ));
        }
        let mut strategies = Vec::new();
        for s in &cfg.strategies {
            let strat: OrderingStrategy = s.parse().map_err(HarnessError::InvalidConfig)?;
            if strategies.contains(&strat) {
                return Err(HarnessError::InvalidConfig(format!(
                    "duplicate strategy '{s}'"
                )));
            }
            strategies.push(strat);
        }

        if !(2..=8).contains(&cfg.bits) {
            return Err(HarnessError::InvalidConfig(format!(
                "bits must be in 2..=8, got {}",
                cfg.bits
            )));
        }
        let scheme = Scheme::parse(&cfg.scheme).ok_or_else(|| {
            HarnessError::InvalidConfig(format!(
                "unknown scheme '{}' (expected sym or asym)",
                cfg.scheme
            ))
        })?;
        if !cfg.damping.is_finite() || cfg.damping < 0.0 {
            return Err(HarnessError::InvalidConfig(format!(
                "damping must be a finite value >= 0, got {}",
                cfg.damping
            )));
        }
        let damping_policy = match cfg.damping_mode.as_str() {
            "absolute" => DampingPolicy::Absolute(cfg.damping),
            "relative" => DampingPolicy::RelativeToMeanDiag(cfg.damping),
            other => {
                return Err(HarnessError::InvalidConfig(format!(
                    "unknown damping_mode '{other}' (expected absolute or relative)"
                )))
            }
        };

        let layers = match (&cfg.bundles.manifest, &cfg.bundles.synthetic) {
            (Some(path), None) => {
                // Manifest layers are fixed data; seeds do not apply and the
                // rows record seed 0.
                load_bundle(path)?.into_iter().map(|l| (l, 0)).collect()
            }
            (None, Some(synth)) => {
                if cfg.seeds.is_empty() {
                    return Err(HarnessError::InvalidConfig(
                        "synthetic bundles need at least one seed".into(),
                    ));
                }
                if synth.d_row == 0 || synth.d_col == 0 {
                    return Err(HarnessError::InvalidConfig(
                        "synthetic shape must be non-empty".into(),
                    ));
                }
                if synth.n_samples == Some(0) {
                    return Err(HarnessError::InvalidConfig(
                        "n_samples must be at least 1".into(),
                    ));
                }
                let dist = WeightDist::parse(&synth.weight_dist)?;
                let spec = SynthSpec::new(synth.d_row, synth.d_col, synth.n_samples, dist);
                cfg.seeds
                    .iter()
                    .map(|&s| (generate_layer(&spec, s), s))
                    .collect()
            }
            (Some(_), Some(_)) => {
                return Err(HarnessError::InvalidConfig(
                    "bundles.manifest and bundles.synthetic are mutually exclusive".into(),
                ))
            }
            (None, None) => {
                return Err(HarnessError::InvalidConfig(
                    "bundles needs either manifest or synthetic".into(),
                ))
            }
        };

        Ok(Experiment {
            layers,
            quantizers,
            strategies,
            bits: cfg.bits,
            scheme,
            damping: cfg.damping,
            damping_policy,
            greedy: cfg.greedy,
            output: cfg.output.clone(),
        })
    }
}

/// Per-layer artifacts every cell shares: the frozen grid, the damped
/// Hessian, and the round-to-nearest baseline.
pub struct LayerContext {
    pub grid: QuantGrid,
    pub summary: GridSummary,
    pub hessian: Hessian,
    pub rtn_wq: Mat,
    pub rtn_error: LayerError,
    pub rtn_ms: f64,
}

impl LayerContext {
    pub fn build(
        layer: &LayerBundle,
        bits: u8,
        scheme: Scheme,
        policy: DampingPolicy,
    ) -> Result<Self, fastobq_core::Error> {
        let grid = fit_grid(&layer.weight, bits, scheme)?;
        let summary = GridSummary::from_grid(&grid);
        let hessian = build_hessian_damped(&layer.calib, policy)?;
        let start = Instant::now();
        let rtn_wq = rtn_quantize_layer(&layer.weight, &grid);
        let rtn_ms = start.elapsed().as_secs_f64() * 1e3;
        let rtn_error = layer_error(&layer.weight, &rtn_wq, &layer.calib);
        Ok(LayerContext {
            grid,
            summary,
            hessian,
            rtn_wq,
            rtn_error,
            rtn_ms,
        })
    }
}

/// Everything a single cell run produces. `quantized`/`trace` feed the
/// `quantize` command; `compare` only keeps the report.
pub struct CellOutcome {
    pub report: LayerReport,
    pub quantized: Option<Mat>,
    pub trace: Option<Vec<TraceEntry>>,
}

fn base_report(
    layer: &LayerBundle,
    seed: u64,
    quantizer: QuantizerKind,
    strategy: &str,
    exp: &Experiment,
) -> LayerReport {
    LayerReport {
        layer: layer.name.clone(),
        quantizer: quantizer.as_str().into(),
        strategy: strategy.into(),
        seed,
        bits: exp.bits,
        scheme: exp.scheme.as_str().into(),
        damping: exp.damping,
        error_total: None,
        error_normalized: None,
        error_rtn_baseline: None,
        wall_time_ms: None,
        hinv_matrices_allocated: None,
        hinv_bytes_peak: None,
        warnings: WarningCounts::default(),
        grid: None,
        run_error: None,
    }
}

/// Runs one cell. Core failures land in `report.run_error`.
pub fn run_cell(
    layer: &LayerBundle,
    seed: u64,
    ctx: &LayerContext,
    quantizer: QuantizerKind,
    strategy: OrderingStrategy,
    exp: &Experiment,
    traced: bool,
) -> CellOutcome {
    // RTN ignores orderings; its single row records strategy "none".
    let strategy_name = if quantizer == QuantizerKind::Rtn {
        "none".to_string()
    } else {
        strategy.to_string()
    };
    let mut report = base_report(layer, seed, quantizer, &strategy_name, exp);
    report.grid = Some(ctx.summary.clone());
    report.error_rtn_baseline = Some(ctx.rtn_error.total);

    let d_col = layer.weight.cols();
    let bytes_per_matrix = (d_col * d_col * 8) as u64;

    let fill = |report: &mut LayerReport, err: LayerError, ms: f64, alloc: usize, peak: usize| {
        report.error_total = Some(err.total);
        report.error_normalized = Some(err.normalized);
        report.wall_time_ms = Some(ms);
        report.hinv_matrices_allocated = Some(alloc as u64);
        report.hinv_bytes_peak = Some(peak as u64 * bytes_per_matrix);
    };

    match quantizer {
        QuantizerKind::Rtn => {
            fill(&mut report, ctx.rtn_error, ctx.rtn_ms, 0, 0);
            CellOutcome {
                report,
                quantized: Some(ctx.rtn_wq.clone()),
                trace: None,
            }
        }
        QuantizerKind::Obq => {
            let mode = if exp.greedy {
                ObqMode::Greedy
            } else {
                ObqMode::Fixed
            };
            let start = Instant::now();
            match obq_quantize_layer(&layer.weight, &ctx.hessian, &ctx.grid, strategy, mode) {
                Ok(out) => {
                    let ms = start.elapsed().as_secs_f64() * 1e3;
                    let err = layer_error(&layer.weight, &out.w_q, &layer.calib);
                    fill(
                        &mut report,
                        err,
                        ms,
                        out.hinv_matrices_allocated,
                        out.hinv_peak,
                    );
                    CellOutcome {
                        report,
                        quantized: Some(out.w_q),
                        trace: traced.then_some(out.trace),
                    }
                }
                Err(e) => {
                    report.run_error = Some(e.to_string());
                    CellOutcome {
                        report,
                        quantized: None,
                        trace: None,
                    }
                }
            }
        }
        QuantizerKind::FastObq => {
            let start = Instant::now();
            match fastobq_quantize_layer_traced(&layer.weight, &ctx.hessian, &ctx.grid, strategy) {
                Ok((out, trace)) => {
                    let ms = start.elapsed().as_secs_f64() * 1e3;
                    let err = layer_error(&layer.weight, &out.w_q, &layer.calib);
                    fill(
                        &mut report,
                        err,
                        ms,
                        out.hinv_matrices_allocated,
                        out.hinv_peak,
                    );
                    report.warnings.singular_pivot_fallbacks = out.singular_fallbacks as u64;
                    CellOutcome {
                        report,
                        quantized: Some(out.w_q),
                        trace: traced.then_some(trace),
                    }
                }
                Err(e) => {
                    report.run_error = Some(e.to_string());
                    CellOutcome {
                        report,
                        quantized: None,
                        trace: None,
                    }
                }
            }
        }
    }
}

fn run_layer(layer: &LayerBundle, seed: u64, exp: &Experiment) -> Vec<LayerReport> {
    let cells: Vec<(QuantizerKind, OrderingStrategy)> = exp
        .quantizers
        .iter()
        .flat_map(|&q| match q {
            QuantizerKind::Rtn => vec![(q, OrderingStrategy::NONE)],
            _ => exp.strategies.iter().map(move |&s| (q, s)).collect(),
        })
        .collect();

    let ctx = match LayerContext::build(layer, exp.bits, exp.scheme, exp.damping_policy) {
        Ok(ctx) => ctx,
        Err(e) => {
            // Layer-level preparation failed: every cell reports it.
            return cells
                .iter()
                .map(|&(q, s)| {
                    let name = if q == QuantizerKind::Rtn {
                        "none".to_string()
                    } else {
                        s.to_string()
                    };
                    let mut r = base_report(layer, seed, q, &name, exp);
                    r.run_error = Some(e.to_string());
                    r
                })
                .collect();
        }
    };

    cells
        .iter()
        .map(|&(q, s)| run_cell(layer, seed, &ctx, q, s, exp, false).report)
        .collect()
}

/// Runs the whole grid, layers in parallel, and returns rows in canonical
/// order.
pub fn run_experiment(exp: &Experiment) -> Vec<LayerReport> {
    let mut rows: Vec<LayerReport> = exp
        .layers
        .par_iter()
        .flat_map(|(layer, seed)| run_layer(layer, *seed, exp))
        .collect();
    sort_reports(&mut rows);
    rows
}

/// Writes reports.jsonl, summary.csv and one curves_<quantizer>.csv per
/// quantizer that appears in the rows.
pub fn write_experiment_outputs(dir: &Path, rows: &[LayerReport]) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    report::write_reports_jsonl(&dir.join("reports.jsonl"), rows)?;
    report::write_summary_csv(&dir.join("summary.csv"), rows)?;
    let mut quantizers: Vec<&str> = rows.iter().map(|r| r.quantizer.as_str()).collect();
    quantizers.sort_unstable();
    quantizers.dedup();
    for q in quantizers {
        let csv = report::error_curves_csv(rows, q)?;
        std::fs::write(dir.join(format!("curves_{q}.csv")), csv)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth_config(json_tail: &str) -> ExperimentConfig {
        let text = format!(
            r#"{{
                "bundles": {{"synthetic": {{"d_row": 8, "d_col": 12, "weight_dist": "gaussian"}}}},
                {json_tail}
            }}"#
        );
        serde_json::from_str(&text).unwrap()
    }

    #[test]
    fn config_defaults_fill_in() {
        let cfg = synth_config(r#""quantizers": ["rtn"], "bits": 4"#);
        assert_eq!(cfg.strategies, ["sensi_des"]);
        assert_eq!(cfg.scheme, "sym");
        assert_eq!(cfg.damping, 0.1);
        assert_eq!(cfg.damping_mode, "absolute");
        assert!(!cfg.greedy);
        assert_eq!(cfg.seeds, [0]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"bundles": {"synthetic": {"d_row": 2, "d_col": 2}}, "quantizers": ["rtn"], "bits": 4, "bitz": 5}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(text).is_err());
    }

    #[test]
    fn validation_catches_bad_strings() {
        let mut cfg = synth_config(r#""quantizers": ["rtn"], "bits": 4"#);
        cfg.quantizers = vec!["gptq".into()];
        assert!(matches!(
            Experiment::from_config(&cfg).unwrap_err(),
            HarnessError::InvalidConfig(_)
        ));

        let mut cfg = synth_config(r#""quantizers": ["fastobq"], "bits": 4"#);
        cfg.strategies = vec!["sensi_up".into()];
        assert!(matches!(
            Experiment::from_config(&cfg).unwrap_err(),
            HarnessError::InvalidConfig(_)
        ));

        let cfg = synth_config(r#""quantizers": ["rtn"], "bits": 9"#);
        assert!(Experiment::from_config(&cfg).is_err());

        let cfg = synth_config(r#""quantizers": ["rtn"], "bits": 4, "scheme": "int4""#);
        assert!(Experiment::from_config(&cfg).is_err());

        let cfg = synth_config(r#""quantizers": ["rtn"], "bits": 4, "damping": -0.5"#);
        assert!(Experiment::from_config(&cfg).is_err());

        let cfg = synth_config(r#""quantizers": ["rtn", "rtn"], "bits": 4"#);
        assert!(Experiment::from_config(&cfg).is_err());
    }

    #[test]
    fn synthetic_source_expands_per_seed() {
        let cfg = synth_config(r#""quantizers": ["rtn"], "bits": 4, "seeds": [3, 9]"#);
        let exp = Experiment::from_config(&cfg).unwrap();
        assert_eq!(exp.layers.len(), 2);
        assert_eq!(exp.layers[0].1, 3);
        assert_eq!(exp.layers[1].1, 9);
        assert_ne!(exp.layers[0].0.name, exp.layers[1].0.name);
    }

    #[test]
    fn full_grid_produces_expected_cells() {
        let cfg = synth_config(
            r#""quantizers": ["rtn", "obq", "fastobq"],
               "strategies": ["sensi_des", "none"],
               "bits": 4, "seeds": [1, 2]"#,
        );
        let exp = Experiment::from_config(&cfg).unwrap();
        let rows = run_experiment(&exp);
        // Per layer: rtn once, obq and fastobq twice each. Two layers.
        assert_eq!(rows.len(), 2 * (1 + 2 + 2));
        assert!(rows.iter().all(|r| r.is_ok()), "{rows:#?}");
        // Canonical order is sorted.
        let mut sorted = rows.clone();
        sort_reports(&mut sorted);
        for (a, b) in rows.iter().zip(&sorted) {
            assert_eq!(a.layer, b.layer);
            assert_eq!(a.quantizer, b.quantizer);
            assert_eq!(a.strategy, b.strategy);
            assert_eq!(a.seed, b.seed);
        }
        // Errors beat or match the shared RTN baseline on every row.
        for r in &rows {
            assert!(r.error_total.unwrap() <= r.error_rtn_baseline.unwrap() * (1.0 + 1e-12));
        }
        // Allocation accounting distinguishes the algorithms.
        let obq = rows.iter().find(|r| r.quantizer == "obq").unwrap();
        assert_eq!(obq.hinv_matrices_allocated, Some(8));
        let fast = rows.iter().find(|r| r.quantizer == "fastobq").unwrap();
        assert_eq!(fast.hinv_matrices_allocated, Some(1));
        assert_eq!(fast.hinv_bytes_peak, Some(12 * 12 * 8));
    }

    #[test]
    fn runs_are_deterministic_modulo_wall_time() {
        let cfg = synth_config(
            r#""quantizers": ["fastobq"], "strategies": ["sensi_des"], "bits": 3, "seeds": [7]"#,
        );
        let exp = Experiment::from_config(&cfg).unwrap();
        let a = run_experiment(&exp);
        let b = run_experiment(&exp);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.error_total, y.error_total);
            assert_eq!(x.error_normalized, y.error_normalized);
            assert_eq!(x.error_rtn_baseline, y.error_rtn_baseline);
            assert_eq!(x.grid, y.grid);
        }
    }

    #[test]
    fn bad_layer_yields_error_rows_not_a_crash() {
        // Duplicate calibration columns with zero damping make the Hessian
        // exactly rank deficient, so inversion fails for this layer.
        let w = Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let x = Mat::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0]);
        let bad = LayerBundle {
            name: "degenerate".into(),
            weight: w,
            calib: x,
            metadata: Default::default(),
        };
        let good = generate_layer(&SynthSpec::new(2, 2, Some(8), WeightDist::Gaussian), 5);
        let cfg = synth_config(r#""quantizers": ["obq", "fastobq"], "bits": 4, "damping": 0.0"#);
        let mut exp = Experiment::from_config(&cfg).unwrap();
        exp.layers = vec![(bad, 0), (good, 5)];

        let rows = run_experiment(&exp);
        assert_eq!(rows.len(), 4);
        let (bad_rows, good_rows): (Vec<_>, Vec<_>) =
            rows.iter().partition(|r| r.layer == "degenerate");
        assert!(bad_rows.iter().all(|r| r.run_error.is_some()));
        assert!(bad_rows.iter().all(|r| r.error_total.is_none()));
        assert!(good_rows.iter().all(|r| r.is_ok()), "{good_rows:#?}");
    }

    #[test]
    fn outputs_land_in_the_requested_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = synth_config(r#""quantizers": ["rtn", "fastobq"], "bits": 4, "seeds": [0, 1]"#);
        let exp = Experiment::from_config(&cfg).unwrap();
        let rows = run_experiment(&exp);
        write_experiment_outputs(dir.path(), &rows).unwrap();
        assert!(dir.path().join("reports.jsonl").is_file());
        assert!(dir.path().join("summary.csv").is_file());
        assert!(dir.path().join("curves_rtn.csv").is_file());
        assert!(dir.path().join("curves_fastobq.csv").is_file());
        assert!(!dir.path().join("curves_obq.csv").exists());
        let back = report::read_reports_jsonl(&dir.path().join("reports.jsonl")).unwrap();
        assert_eq!(back.len(), rows.len());
    }
}
