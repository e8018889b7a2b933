//! From nonparametric branch samples to a fitted decoupled model: polynomial
//! branch fits, constant-term recovery, error metrics and optional
//! post-optimization of all parameters.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ftd::FtdResult;
use crate::jacobian::OperatingPoints;
use crate::lm::{lm_solve, LmOptions};
use crate::model::{BranchPoly, DecoupledModel, Model};
use crate::tensor::{pinv, Matrix};

/// Fit quality of one full run, as written into run reports.
#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    /// Per-output relative RMS error in percent; `None` marks an output
    /// whose variance over the points is zero (error undefined).
    pub errors_percent: Vec<Option<f64>>,
    pub mean_error_percent: Option<f64>,
    /// Relative least-squares residual of each branch's polynomial fit.
    pub branch_fit_residuals: Vec<f64>,
    pub seed: u64,
}

/// Least-squares polynomial fit of every branch's samples against its axis.
///
/// Fitting happens on the axis rescaled to [-1, 1] (a raw Vandermonde basis
/// at degree 7 over a wide z-range is numerically fragile); coefficients
/// are mapped back to the raw axis for storage. Returns the fitted model
/// (constants zero, superseded by [`estimate_constants`]) and the relative
/// fit residual per branch.
pub fn fit_branches(res: &FtdResult, degree: usize) -> Result<(DecoupledModel, Vec<f64>)> {
    if degree < 1 {
        return Err(Error::InvalidArgument("branch degree must be at least 1".into()));
    }
    let n_points = res.g.rows();
    if n_points <= degree {
        return Err(Error::InvalidArgument(format!(
            "cannot fit degree {degree} through {n_points} samples"
        )));
    }
    let r = res.g.cols();
    let mut branches = Vec::with_capacity(r);
    let mut residuals = Vec::with_capacity(r);
    for i in 0..r {
        let z = res.z.column(i);
        let g = res.g.column(i);
        let (zmin, zmax) = z.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        if !(zmax > zmin) {
            return Err(Error::DegenerateGrid { branch: Some(i) });
        }
        let alpha = 2.0 / (zmax - zmin);
        let beta = -(zmax + zmin) / (zmax - zmin);

        let vandermonde = Matrix::from_fn(n_points, degree + 1, |k, c| {
            let ti = alpha * z[k] + beta;
            ti.powi(c as i32)
        });
        let coeffs_scaled = pinv(&vandermonde)?.matvec(&g);
        let fitted = vandermonde.matvec(&coeffs_scaled);
        let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let resid = fitted
            .iter()
            .zip(&g)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / gnorm.max(1e-300);
        residuals.push(resid);

        branches.push(BranchPoly::new(rescale_coefficients(&coeffs_scaled, alpha, beta)));
    }
    let n_out = res.w.rows();
    let model = DecoupledModel::new(res.w.clone(), res.v.clone(), branches, vec![0.0; n_out])?;
    Ok((model, residuals))
}

/// Expands `Σ_k a_k (alpha z + beta)^k` into raw-z coefficients.
fn rescale_coefficients(scaled: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
    let d = scaled.len() - 1;
    let mut raw = vec![0.0; d + 1];
    // binomial table up to degree d
    let mut binom = vec![vec![0f64; d + 1]; d + 1];
    for k in 0..=d {
        binom[k][0] = 1.0;
        for j in 1..=k {
            binom[k][j] = binom[k - 1][j - 1] + if j <= k - 1 { binom[k - 1][j] } else { 0.0 };
        }
    }
    for (k, &ak) in scaled.iter().enumerate() {
        if ak == 0.0 {
            continue;
        }
        // (alpha z + beta)^k = Σ_j C(k,j) alpha^j beta^(k-j) z^j
        for j in 0..=k {
            raw[j] += ak * binom[k][j] * alpha.powi(j as i32) * beta.powi((k - j) as i32);
        }
    }
    raw
}

/// Least-squares estimate of the per-output constant terms: the column
/// means of the evaluation mismatch on the operating points, added to the
/// model's constants. Derivative-level decoupling cannot see these, so
/// they are always recovered here.
pub fn estimate_constants(
    model: &DecoupledModel,
    coupled: &dyn Model,
    pts: &OperatingPoints,
) -> Result<DecoupledModel> {
    check_compatible(coupled, model, pts)?;
    let n = model.output_dim();
    let mut sums = vec![0.0; n];
    for k in 0..pts.len() {
        let f = coupled.evaluate(pts.point(k))?;
        let fd = model.evaluate(pts.point(k))?;
        for o in 0..n {
            sums[o] += f[o] - fd[o];
        }
    }
    let mut constants = model.constants().to_vec();
    for (c, s) in constants.iter_mut().zip(&sums) {
        *c += s / pts.len() as f64;
    }
    model.with_constants(constants)
}

fn check_compatible(coupled: &dyn Model, model: &dyn Model, pts: &OperatingPoints) -> Result<()> {
    if coupled.input_dim() != model.input_dim()
        || coupled.output_dim() != model.output_dim()
        || pts.dim() != model.input_dim()
    {
        return Err(Error::DimensionMismatch(format!(
            "coupled {}->{} vs decoupled {}->{} on {}-dim points",
            coupled.input_dim(),
            coupled.output_dim(),
            model.input_dim(),
            model.output_dim(),
            pts.dim()
        )));
    }
    Ok(())
}

/// Relative RMS error per output in percent:
/// `100 * rms(f_i - fD_i) / rms(f_i - mean(f_i))`, evaluated on the
/// operating points. An output with zero variance has no defined error and
/// yields `None`.
pub fn relative_error(
    coupled: &dyn Model,
    model: &dyn Model,
    pts: &OperatingPoints,
) -> Result<Vec<Option<f64>>> {
    check_compatible(coupled, model, pts)?;
    let n = coupled.output_dim();
    let big_n = pts.len();
    if big_n < 2 {
        return Err(Error::InvalidArgument("need at least 2 points for the error metric".into()));
    }
    let mut f_all = Matrix::zeros(big_n, n);
    let mut fd_all = Matrix::zeros(big_n, n);
    for k in 0..big_n {
        let f = coupled.evaluate(pts.point(k))?;
        let fd = model.evaluate(pts.point(k))?;
        for o in 0..n {
            f_all[(k, o)] = f[o];
            fd_all[(k, o)] = fd[o];
        }
    }
    let mut out = Vec::with_capacity(n);
    for o in 0..n {
        let mean = (0..big_n).map(|k| f_all[(k, o)]).sum::<f64>() / big_n as f64;
        let num: f64 = (0..big_n).map(|k| (f_all[(k, o)] - fd_all[(k, o)]).powi(2)).sum();
        let den: f64 = (0..big_n).map(|k| (f_all[(k, o)] - mean).powi(2)).sum();
        if den <= 0.0 {
            out.push(None);
        } else {
            out.push(Some(100.0 * (num / den).sqrt()));
        }
    }
    Ok(out)
}

/// Mean of the defined per-output errors.
pub fn mean_error(errors: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = errors.iter().flatten().cloned().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Joint nonlinear refinement of every model parameter (W, V, branch
/// coefficients and constants) against the sample residuals on the
/// operating points. Step rejection inside the solver guarantees the
/// returned model is never worse than the input.
pub fn post_optimize(
    model: &DecoupledModel,
    coupled: &dyn Model,
    pts: &OperatingPoints,
    lm_opts: &LmOptions,
) -> Result<DecoupledModel> {
    check_compatible(coupled, model, pts)?;
    let big_n = pts.len();
    let n = model.output_dim();
    let mut targets = Matrix::zeros(big_n, n);
    for k in 0..big_n {
        let f = coupled.evaluate(pts.point(k))?;
        for o in 0..n {
            targets[(k, o)] = f[o];
        }
    }

    let x0 = pack_model(model);
    let template = model.clone();
    let residual = |x: &[f64]| -> Result<Vec<f64>> {
        let candidate = unpack_model(&template, x)?;
        let mut out = Vec::with_capacity(big_n * n);
        for k in 0..big_n {
            let fd = candidate.evaluate(pts.point(k))?;
            for o in 0..n {
                out.push(targets[(k, o)] - fd[o]);
            }
        }
        Ok(out)
    };
    let outcome = lm_solve(residual, &x0, lm_opts)?;
    unpack_model(&template, &outcome.x)
}

fn pack_model(model: &DecoupledModel) -> Vec<f64> {
    let mut x = Vec::new();
    let (w, v) = (model.w(), model.v());
    for i in 0..w.cols() {
        x.extend(w.column(i));
    }
    for i in 0..v.cols() {
        x.extend(v.column(i));
    }
    for b in model.branches() {
        x.extend_from_slice(b.coefficients());
    }
    x.extend_from_slice(model.constants());
    x
}

fn unpack_model(template: &DecoupledModel, x: &[f64]) -> Result<DecoupledModel> {
    let (n, m, r) = (template.output_dim(), template.input_dim(), template.num_branches());
    let mut idx = 0;
    let mut take = |count: usize| -> Vec<f64> {
        let slice = x[idx..idx + count].to_vec();
        idx += count;
        slice
    };
    let mut w = Matrix::zeros(n, r);
    for i in 0..r {
        w.set_column(i, &take(n));
    }
    let mut v = Matrix::zeros(m, r);
    for i in 0..r {
        v.set_column(i, &take(m));
    }
    let branches = template
        .branches()
        .iter()
        .map(|b| BranchPoly::new(take(b.coefficients().len())))
        .collect();
    let constants = take(n);
    debug_assert_eq!(idx, x.len());
    DecoupledModel::new(w, v, branches, constants)
}
