//! Pre-flight diagnostics for a bundle: shapes, grid scale spread, Hessian
//! conditioning, and the RTN error floor. Meant for eyeballing a dataset
//! before burning time on a full experiment.

use fastobq_core::linalg::{build_hessian_damped, invert_spd, DampingPolicy};
use fastobq_core::obq::rtn_quantize_layer;
use fastobq_core::{layer_error, Mat, Scheme};

use crate::bundle::{load_bundle, LayerBundle};
use crate::report::GridSummary;
use crate::HarnessError;

const POWER_ITERS: usize = 200;

/// Largest-eigenvalue estimate by power iteration from a fixed uniform
/// start vector. Symmetric positive input assumed; deterministic.
fn largest_eigenvalue(m: &Mat, iters: usize) -> f64 {
    let d = m.rows();
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..iters {
        let mut next = vec![0.0; d];
        for (i, out) in next.iter_mut().enumerate() {
            let row = m.row(i);
            *out = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let norm: f64 = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        for x in &mut next {
            *x /= norm;
        }
        v = next;
    }
    lambda
}

#[derive(Clone, Debug)]
pub struct LayerInspection {
    pub name: String,
    pub d_row: usize,
    pub d_col: usize,
    pub n_samples: usize,
    pub grid: GridSummary,
    pub damping_applied: f64,
    /// cond(H) estimated as lambda_max(H) * lambda_max(H^-1). None when the
    /// damped Hessian failed to invert; the error text lands in
    /// `inversion_error` instead.
    pub condition: Option<f64>,
    pub inversion_error: Option<String>,
    pub rtn_error_total: f64,
    pub rtn_error_normalized: f64,
}

pub fn inspect_layer(
    layer: &LayerBundle,
    bits: u8,
    scheme: Scheme,
    policy: DampingPolicy,
) -> Result<LayerInspection, HarnessError> {
    let grid = fastobq_core::grid::fit_grid(&layer.weight, bits, scheme)?;
    let hessian = build_hessian_damped(&layer.calib, policy)?;
    let (condition, inversion_error) = match invert_spd(&hessian) {
        Ok(hinv) => {
            let hi = largest_eigenvalue(hessian.values(), POWER_ITERS);
            let lo_inv = largest_eigenvalue(hinv.values(), POWER_ITERS);
            (Some(hi * lo_inv), None)
        }
        Err(e) => (None, Some(e.to_string())),
    };
    let rtn = layer_error(
        &layer.weight,
        &rtn_quantize_layer(&layer.weight, &grid),
        &layer.calib,
    );
    Ok(LayerInspection {
        name: layer.name.clone(),
        d_row: layer.weight.rows(),
        d_col: layer.weight.cols(),
        n_samples: layer.calib.cols(),
        grid: GridSummary::from_grid(&grid),
        damping_applied: hessian.damping_applied(),
        condition,
        inversion_error,
        rtn_error_total: rtn.total,
        rtn_error_normalized: rtn.normalized,
    })
}

pub fn inspect_bundle(
    manifest: &std::path::Path,
    bits: u8,
    scheme: Scheme,
    policy: DampingPolicy,
) -> Result<Vec<LayerInspection>, HarnessError> {
    load_bundle(manifest)?
        .iter()
        .map(|l| inspect_layer(l, bits, scheme, policy))
        .collect()
}

pub fn render_inspection(l: &LayerInspection) -> String {
    let cond = match (&l.condition, &l.inversion_error) {
        (Some(c), _) => format!("{c:.3e}"),
        (None, Some(e)) => format!("n/a ({e})"),
        (None, None) => "n/a".into(),
    };
    format!(
        "layer {name}\n\
         \x20 weight {rows}x{cols}, {n} calibration samples\n\
         \x20 grid [{qmin}, {qmax}], scales min/med/max {smin:.4e} / {smed:.4e} / {smax:.4e}\n\
         \x20 hessian damping {damp:.4e}, cond(H) ~ {cond}\n\
         \x20 rtn error {tot:.6e} (normalized {norm:.6e})\n",
        name = l.name,
        rows = l.d_row,
        cols = l.d_col,
        n = l.n_samples,
        qmin = l.grid.qmin,
        qmax = l.grid.qmax,
        smin = l.grid.scale_min,
        smed = l.grid.scale_median,
        smax = l.grid.scale_max,
        damp = l.damping_applied,
        cond = cond,
        tot = l.rtn_error_total,
        norm = l.rtn_error_normalized,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_layer, SynthSpec, WeightDist};

    #[test]
    fn identity_hessian_conditions_near_one() {
        // Orthonormal calibration: X = I/sqrt(2) makes 2XX^T = I exactly.
        let d = 8;
        let mut x = Mat::zeros(d, d);
        for i in 0..d {
            x.set(i, i, 1.0 / 2f64.sqrt());
        }
        let layer = LayerBundle {
            name: "ortho".into(),
            weight: generate_layer(&SynthSpec::new(4, d, Some(4), WeightDist::Gaussian), 3).weight,
            calib: x,
            metadata: Default::default(),
        };
        let info =
            inspect_layer(&layer, 4, Scheme::Symmetric, DampingPolicy::Absolute(0.0)).unwrap();
        let cond = info.condition.unwrap();
        assert!((cond - 1.0).abs() < 1e-9, "cond {cond}");
        assert_eq!(info.damping_applied, 0.0);
        assert!(info.inversion_error.is_none());
    }

    #[test]
    fn damping_bounds_the_condition_number() {
        let layer = generate_layer(&SynthSpec::new(4, 16, Some(64), WeightDist::Gaussian), 9);
        let tight =
            inspect_layer(&layer, 4, Scheme::Symmetric, DampingPolicy::Absolute(1e-6)).unwrap();
        let damped =
            inspect_layer(&layer, 4, Scheme::Symmetric, DampingPolicy::Absolute(10.0)).unwrap();
        assert!(damped.condition.unwrap() < tight.condition.unwrap());
    }

    #[test]
    fn failed_inversion_reports_text_not_an_error() {
        // Rank-1 calibration with zero damping cannot be inverted.
        let x = Mat::from_vec(2, 2, vec![1.0, 1.0, 1.0, 1.0]);
        let layer = LayerBundle {
            name: "singular".into(),
            weight: Mat::from_vec(1, 2, vec![1.0, 2.0]),
            calib: x,
            metadata: Default::default(),
        };
        let info =
            inspect_layer(&layer, 4, Scheme::Symmetric, DampingPolicy::Absolute(0.0)).unwrap();
        assert!(info.condition.is_none());
        assert!(info
            .inversion_error
            .as_deref()
            .unwrap()
            .contains("positive definite"));
        let text = render_inspection(&info);
        assert!(text.contains("n/a"));
    }

    #[test]
    fn render_mentions_the_essentials() {
        let layer = generate_layer(&SynthSpec::new(3, 4, Some(8), WeightDist::Gaussian), 1);
        let info =
            inspect_layer(&layer, 4, Scheme::Symmetric, DampingPolicy::Absolute(0.1)).unwrap();
        let text = render_inspection(&info);
        assert!(text.contains("weight 3x4"));
        assert!(text.contains("8 calibration samples"));
        assert!(text.contains("rtn error"));
    }
}
