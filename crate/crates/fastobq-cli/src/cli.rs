//! Command-line surface. Argument parsing stays here; the subcommands call
//! into the library modules so everything is reachable from tests without
//! spawning a process.
//!
//! Exit codes: 0 clean, 1 at least one run error (a layer failed to
//! quantize), 2 config or IO problems.

use std::io::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fastobq_core::linalg::DampingPolicy;
use fastobq_core::{OrderingStrategy, Scheme, TraceEntry};
use serde::Serialize;

use crate::bundle::load_bundle;
use crate::experiment::{
    load_config, run_cell, run_experiment, write_experiment_outputs, Experiment, LayerContext,
    QuantizerKind,
};
use crate::report::{sort_reports, write_reports_jsonl, write_summary_csv, LayerReport};
use crate::{bench, inspect, HarnessError};

#[derive(Debug, Parser)]
#[command(
    name = "fastobq",
    version,
    about = "Layer-wise post-training weight quantization",
    propagate_version = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize every layer in a bundle and write the results.
    Quantize(QuantizeArgs),
    /// Run an experiment grid from a JSON config.
    Compare(CompareArgs),
    /// Time the reference per-row OBQ against fastobq on synthetic layers.
    Bench(BenchArgs),
    /// Print shape, grid and conditioning diagnostics for a bundle.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Bundle manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// rtn, obq or fastobq.
    #[arg(long)]
    pub quantizer: String,
    /// Column ordering: sensi_des, sensi_asc, err_des, err_asc, w_des,
    /// w_asc or none. Ignored by rtn.
    #[arg(long, default_value = "sensi_des")]
    pub strategy: String,
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=8))]
    pub bits: u8,
    /// sym or asym.
    #[arg(long, default_value = "sym")]
    pub scheme: String,
    #[arg(long, default_value_t = 0.1)]
    pub damping: f64,
    /// absolute or relative (fraction of the mean Gram diagonal).
    #[arg(long, default_value = "absolute")]
    pub damping_mode: String,
    /// Re-rank remaining columns after every step (obq only).
    #[arg(long)]
    pub greedy: bool,
    /// Also write a per-step trace for each layer.
    #[arg(long)]
    pub emit_trace: bool,
    /// Output directory for quantized tensors and reports.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Row counts to sweep.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    pub rows: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    pub cols: usize,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(2..=8))]
    pub bits: u8,
    /// Timed repeats per quantizer (after one warmup).
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(2..=8))]
    pub bits: u8,
    #[arg(long, default_value = "sym")]
    pub scheme: String,
    #[arg(long, default_value_t = 0.1)]
    pub damping: f64,
    #[arg(long, default_value = "absolute")]
    pub damping_mode: String,
}

/// Applies FASTOBQ_THREADS to the global rayon pool. Absent or 0 means
/// auto-size; anything unparseable is a config error.
pub fn configure_threads() -> Result<(), HarnessError> {
    let raw = match std::env::var("FASTOBQ_THREADS") {
        Ok(v) => v,
        Err(std::env::VarError::NotPresent) => return Ok(()),
        Err(e) => {
            return Err(HarnessError::InvalidConfig(format!("FASTOBQ_THREADS: {e}")));
        }
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        HarnessError::InvalidConfig(format!(
            "FASTOBQ_THREADS must be a non-negative integer, got '{raw}'"
        ))
    })?;
    if n == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| HarnessError::InvalidConfig(format!("thread pool: {e}")))
}

/// Exit code for an error that escaped the per-cell isolation: core
/// quantization failures are run errors (1), everything else is a config
/// or IO problem (2).
pub fn exit_code_for(e: &HarnessError) -> u8 {
    match e {
        HarnessError::Core(_) => 1,
        _ => 2,
    }
}

/// Runs one parsed command. `Ok(true)` means every cell succeeded,
/// `Ok(false)` means the run finished but some rows carry `run_error`.
pub fn run(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::Quantize(args) => run_quantize(args),
        Command::Compare(args) => run_compare(args),
        Command::Bench(args) => run_bench(args),
        Command::Inspect(args) => run_inspect(args),
    }
}

fn parse_scheme(s: &str) -> Result<Scheme, HarnessError> {
    Scheme::parse(s).ok_or_else(|| {
        HarnessError::InvalidConfig(format!("unknown scheme '{s}' (expected sym or asym)"))
    })
}

fn parse_damping(damping: f64, mode: &str) -> Result<DampingPolicy, HarnessError> {
    if !damping.is_finite() || damping < 0.0 {
        return Err(HarnessError::InvalidConfig(format!(
            "damping must be a finite value >= 0, got {damping}"
        )));
    }
    match mode {
        "absolute" => Ok(DampingPolicy::Absolute(damping)),
        "relative" => Ok(DampingPolicy::RelativeToMeanDiag(damping)),
        other => Err(HarnessError::InvalidConfig(format!(
            "unknown damping_mode '{other}' (expected absolute or relative)"
        ))),
    }
}

/// Layer names become file stems; anything path-hostile is flattened.
fn sanitize_name(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Serialize)]
struct TraceRecord {
    step: usize,
    row: usize,
    col: usize,
    /// None for singular-pivot fallback steps, which have no finite score.
    sensitivity: Option<f64>,
    value: f64,
}

impl From<&TraceEntry> for TraceRecord {
    fn from(t: &TraceEntry) -> Self {
        TraceRecord {
            step: t.step,
            row: t.row,
            col: t.col,
            sensitivity: t.sensitivity.is_finite().then_some(t.sensitivity),
            value: t.value,
        }
    }
}

fn write_trace(path: &std::path::Path, trace: &[TraceEntry]) -> Result<(), HarnessError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for entry in trace {
        serde_json::to_writer(&mut w, &TraceRecord::from(entry))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn run_quantize(args: QuantizeArgs) -> Result<bool, HarnessError> {
    let quantizer = QuantizerKind::parse(&args.quantizer)?;
    let strategy: OrderingStrategy = args.strategy.parse().map_err(HarnessError::InvalidConfig)?;
    let scheme = parse_scheme(&args.scheme)?;
    let policy = parse_damping(args.damping, &args.damping_mode)?;

    let layers: Vec<_> = load_bundle(&args.manifest)?
        .into_iter()
        .map(|l| (l, 0u64))
        .collect();
    let exp = Experiment {
        layers,
        quantizers: vec![quantizer],
        strategies: vec![strategy],
        bits: args.bits,
        scheme,
        damping: args.damping,
        damping_policy: policy,
        greedy: args.greedy,
        output: Some(args.out.clone()),
    };

    std::fs::create_dir_all(&args.out)?;
    let mut reports: Vec<LayerReport> = Vec::new();
    for (layer, seed) in &exp.layers {
        match LayerContext::build(layer, exp.bits, exp.scheme, exp.damping_policy) {
            Ok(ctx) => {
                let outcome = run_cell(
                    layer,
                    *seed,
                    &ctx,
                    quantizer,
                    strategy,
                    &exp,
                    args.emit_trace,
                );
                let stem = sanitize_name(&layer.name);
                if let Some(wq) = &outcome.quantized {
                    crate::tensor::write_tensor(
                        &crate::tensor::TensorFile::from_mat(wq),
                        &args.out.join(format!("{stem}.ftns")),
                    )?;
                }
                if let Some(trace) = &outcome.trace {
                    write_trace(&args.out.join(format!("{stem}.trace.jsonl")), trace)?;
                }
                reports.push(outcome.report);
            }
            Err(e) => {
                let mut report = crate::report::LayerReport {
                    layer: layer.name.clone(),
                    quantizer: quantizer.as_str().into(),
                    strategy: if quantizer == QuantizerKind::Rtn {
                        "none".into()
                    } else {
                        strategy.to_string()
                    },
                    seed: *seed,
                    bits: exp.bits,
                    scheme: exp.scheme.as_str().into(),
                    damping: exp.damping,
                    error_total: None,
                    error_normalized: None,
                    error_rtn_baseline: None,
                    wall_time_ms: None,
                    hinv_matrices_allocated: None,
                    hinv_bytes_peak: None,
                    warnings: Default::default(),
                    grid: None,
                    run_error: None,
                };
                report.run_error = Some(e.to_string());
                reports.push(report);
            }
        }
    }
    sort_reports(&mut reports);
    write_reports_jsonl(&args.out.join("reports.jsonl"), &reports)?;
    write_summary_csv(&args.out.join("summary.csv"), &reports)?;

    let mut clean = true;
    for r in &reports {
        match (&r.run_error, r.error_total) {
            (Some(err), _) => {
                clean = false;
                eprintln!("{}: run error: {err}", r.layer);
            }
            (None, Some(total)) => {
                println!(
                    "{}: error {total:.6e} (rtn baseline {:.6e})",
                    r.layer,
                    r.error_rtn_baseline.unwrap_or(f64::NAN)
                );
            }
            (None, None) => unreachable!("successful cell without an error value"),
        }
    }
    println!(
        "wrote {} layer reports to {}",
        reports.len(),
        args.out.display()
    );
    Ok(clean)
}

fn run_compare(args: CompareArgs) -> Result<bool, HarnessError> {
    let cfg = load_config(&args.config)?;
    let exp = Experiment::from_config(&cfg)?;
    let out = args.out.or(exp.output.clone()).ok_or_else(|| {
        HarnessError::InvalidConfig(
            "no output directory: set `output` in the config or pass --out".into(),
        )
    })?;
    let rows = run_experiment(&exp);
    write_experiment_outputs(&out, &rows)?;

    let failures: Vec<&LayerReport> = rows.iter().filter(|r| !r.is_ok()).collect();
    for r in &failures {
        eprintln!(
            "{}/{}/{} seed {}: run error: {}",
            r.layer,
            r.quantizer,
            r.strategy,
            r.seed,
            r.run_error.as_deref().unwrap_or("?")
        );
    }
    println!(
        "{} cells ({} failed) -> {}",
        rows.len(),
        failures.len(),
        out.display()
    );
    Ok(failures.is_empty())
}

fn run_bench(args: BenchArgs) -> Result<bool, HarnessError> {
    if args.rows.is_empty() {
        return Err(HarnessError::InvalidConfig(
            "bench needs at least one row count".into(),
        ));
    }
    if args.rows.contains(&0) || args.cols == 0 {
        return Err(HarnessError::InvalidConfig(
            "bench shapes must be non-zero".into(),
        ));
    }
    if args.repeats == 0 {
        return Err(HarnessError::InvalidConfig(
            "repeats must be at least 1".into(),
        ));
    }
    let rows = bench::bench_sweep(&args.rows, args.cols, args.bits, args.repeats)?;
    print!("{}", bench::render_table(&rows));
    Ok(true)
}

fn run_inspect(args: InspectArgs) -> Result<bool, HarnessError> {
    let scheme = parse_scheme(&args.scheme)?;
    let policy = parse_damping(args.damping, &args.damping_mode)?;
    let inspections = inspect::inspect_bundle(&args.manifest, args.bits, scheme, policy)?;
    if inspections.is_empty() {
        println!("bundle is empty");
        return Ok(true);
    }
    for info in &inspections {
        print!("{}", inspect::render_inspection(info));
    }
    Ok(true)
}
