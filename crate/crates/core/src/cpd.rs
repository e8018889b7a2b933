//! Plain CPD by alternating least squares — the baseline decomposition.
//!
//! Factors the Jacobian tensor into `[[W, V, Gp]]` where `Gp` holds raw
//! third-factor samples (derivative estimates at the operating points).
//! Exact for small enough residual, but nothing constrains the columns of
//! `Gp` to look like functions of the branch variables: whenever the
//! decomposition is not unique the recovered columns are generally
//! meaningless scatter. The filtered decompositions in [`crate::ftd`]
//! exist to fix exactly that.

use crate::error::{Error, Result};
use crate::rng::{normal, restart_seed, seeded};
use crate::tensor::{khatri_rao, pinv, reconstruct, Matrix, Tensor3};

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct CpdOptions {
    pub max_sweeps: usize,
    /// Relative objective change over a 5-sweep window below which the
    /// iteration stops.
    pub tol: f64,
    pub seed: u64,
    pub restarts: usize,
}

impl Default for CpdOptions {
    fn default() -> Self {
        CpdOptions { max_sweeps: 500, tol: 1e-12, seed: 0, restarts: 5 }
    }
}

#[derive(Debug, Clone)]
pub struct CpdResult {
    pub w: Matrix,
    pub v: Matrix,
    pub gp: Matrix,
    /// Relative Frobenius residual after every sweep of the winning restart.
    pub objective_trace: Vec<f64>,
    pub sweeps: usize,
    /// Derived seed of the winning restart.
    pub restart_seed: u64,
}

impl CpdResult {
    pub fn relative_residual(&self) -> f64 {
        *self.objective_trace.last().expect("at least one sweep")
    }
}

/// Window used by the stall check, here and in the filtered variants.
pub(crate) const STALL_WINDOW: usize = 5;

pub(crate) fn stalled(trace: &[f64], tol: f64) -> bool {
    if trace.len() < STALL_WINDOW + 1 {
        return false;
    }
    let old = trace[trace.len() - 1 - STALL_WINDOW];
    let new = trace[trace.len() - 1];
    (old - new) / old.max(1e-300) < tol
}

fn normalize_columns_into(factor: &mut Matrix, scale_into: &mut Matrix) {
    for i in 0..factor.cols() {
        let norm = factor.column(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        for j in 0..factor.rows() {
            factor[(j, i)] /= norm;
        }
        for k in 0..scale_into.rows() {
            scale_into[(k, i)] *= norm;
        }
    }
}

/// One exact least-squares factor update:
/// `X_(mode) (B ⊙ A) ((B'B * A'A))⁺`, the workhorse of every sweep.
fn als_factor_update(unfolding: &Matrix, b: &Matrix, a: &Matrix) -> Result<Matrix> {
    let kr = khatri_rao(b, a)?;
    let gram = b.gram().hadamard(&a.gram());
    Ok(unfolding.matmul(&kr).matmul(&pinv(&gram)?))
}

fn single_run(t: &Tensor3, r: usize, opts: &CpdOptions, seed: u64) -> Result<CpdResult> {
    let (n, m, np) = (t.n_out(), t.n_in(), t.n_points());
    let mut rng = seeded(seed);
    let mut w = Matrix::from_fn(n, r, |_, _| normal(&mut rng));
    let mut v = Matrix::from_fn(m, r, |_, _| normal(&mut rng));
    let mut gp = Matrix::from_fn(np, r, |_, _| normal(&mut rng));
    normalize_columns_into(&mut w, &mut gp);
    normalize_columns_into(&mut v, &mut gp);

    let j1 = t.unfold(1)?;
    let j2 = t.unfold(2)?;
    let j3 = t.unfold(3)?;
    let t_norm = t.frobenius().max(1e-300);

    let mut trace = Vec::new();
    let mut sweeps = 0;
    for sweep in 0..opts.max_sweeps {
        sweeps = sweep + 1;
        w = als_factor_update(&j1, &gp, &v)?;
        normalize_columns_into(&mut w, &mut gp);
        v = als_factor_update(&j2, &gp, &w)?;
        normalize_columns_into(&mut v, &mut gp);
        gp = als_factor_update(&j3, &v, &w)?;

        let residual = t.sub(&reconstruct(&w, &v, &gp)?).frobenius() / t_norm;
        trace.push(residual);
        if residual < 1e-15 || stalled(&trace, opts.tol) {
            break;
        }
    }
    Ok(CpdResult { w, v, gp, objective_trace: trace, sweeps, restart_seed: seed })
}

/// Multi-start CPD-ALS; returns the restart with the lowest residual.
pub fn cpd_als(t: &Tensor3, r: usize, opts: &CpdOptions) -> Result<CpdResult> {
    if r < 1 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite("tensor".into()));
    }
    if opts.restarts < 1 {
        return Err(Error::InvalidArgument("need at least one restart".into()));
    }
    let mut best: Option<CpdResult> = None;
    for k in 0..opts.restarts {
        let run = single_run(t, r, opts, restart_seed(opts.seed, k))?;
        let better = match &best {
            None => true,
            Some(b) => run.relative_residual() < b.relative_residual(),
        };
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart ran"))
}

/// Numerical rank proxy: the smallest r at which a cheap multi-start CPD
/// drives the relative residual below 1e-6, capped by the unfolding ranks.
pub fn estimate_rank(t: &Tensor3) -> Result<usize> {
    let cap = (t.n_out() * t.n_in())
        .min(t.n_out() * t.n_points())
        .min(t.n_in() * t.n_points())
        .min(16);
    let opts = CpdOptions { max_sweeps: 300, tol: 1e-10, seed: 0x5eed, restarts: 2 };
    for r in 1..=cap {
        let run = cpd_als(t, r, &opts)?;
        if run.relative_residual() < 1e-6 {
            return Ok(r);
        }
    }
    Ok(cap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn rank_one_tensor(seed: u64) -> Tensor3 {
        let mut rng = seeded(seed);
        let w = Matrix::from_fn(3, 1, |_, _| normal(&mut rng));
        let v = Matrix::from_fn(2, 1, |_, _| normal(&mut rng));
        let h = Matrix::from_fn(30, 1, |_, _| normal(&mut rng));
        reconstruct(&w, &v, &h).unwrap()
    }

    #[test]
    fn rank_one_is_recovered_exactly() {
        let t = rank_one_tensor(3);
        let res = cpd_als(&t, 1, &CpdOptions::default()).unwrap();
        assert!(res.relative_residual() < 1e-10, "residual {}", res.relative_residual());
    }

    #[test]
    fn invalid_rank_rejected() {
        let t = rank_one_tensor(4);
        assert!(cpd_als(&t, 0, &CpdOptions::default()).is_err());
    }

    #[test]
    fn trace_is_monotonically_non_increasing() {
        let t = rank_one_tensor(5);
        let res = cpd_als(&t, 2, &CpdOptions { restarts: 1, max_sweeps: 60, ..Default::default() }).unwrap();
        for w in res.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn residual_identical_across_unfoldings() {
        let t = rank_one_tensor(6);
        let res = cpd_als(&t, 1, &CpdOptions { restarts: 1, max_sweeps: 30, ..Default::default() }).unwrap();
        let recon = reconstruct(&res.w, &res.v, &res.gp).unwrap();
        let diff = t.sub(&recon);
        let by_tensor = diff.frobenius();
        for mode in 1..=3 {
            let by_unfold = diff.unfold(mode).unwrap().frobenius();
            assert_eq!(by_tensor, by_unfold);
        }
    }

    #[test]
    fn rank_estimate_finds_construction_rank() {
        let mut rng = seeded(8);
        let w = Matrix::from_fn(3, 2, |_, _| normal(&mut rng));
        let v = Matrix::from_fn(3, 2, |_, _| normal(&mut rng));
        let h = Matrix::from_fn(25, 2, |_, _| normal(&mut rng));
        let t = reconstruct(&w, &v, &h).unwrap();
        assert_eq!(estimate_rank(&t).unwrap(), 2);
    }
}
