//! Filtered tensor decompositions.
//!
//! Both variants factor the Jacobian tensor as `[[W, V, F(V) ∘ G]]` where
//! `∘` filters each column of G with the finite-difference operator of its
//! branch axis, so G itself holds function samples rather than derivative
//! samples. The implicit variant demands that one G satisfies several
//! distinct derivative filters at once — only smooth sample sets can — and
//! the explicit variant adds a weighted penalty on the disagreement between
//! left and right filters. Updates alternate: W and G have closed-form
//! least-squares solutions, V is nonlinear (the filters depend on it
//! through the axes `z = V'p`) and is refined with the embedded
//! Levenberg-Marquardt solver, warm-started from a relaxation that ignores
//! that dependence.
//!
//! Every V or (explicit) G candidate is accepted only if the sweep
//! objective does not increase, so the recorded objective trace is
//! non-increasing. The sample factor G is determined only up to one
//! constant per column at this stage; the entry at each branch's smallest
//! z is pinned to zero and output constants are re-estimated afterwards
//! ([`crate::fit::estimate_constants`]).

mod explicit;
mod implicit;

pub use explicit::{ftd_explicit, lambda_search, LambdaRecord, LambdaSearch};
pub use implicit::ftd_implicit;

use crate::error::{Error, Result};
use crate::filters::{build_filter_bank, FilterBank, FilterKind};
use crate::jacobian::OperatingPoints;
use crate::lm::LmOptions;
use crate::rng::{normal, SeededRng};
use crate::tensor::{khatri_rao, pinv, solve_spd, Matrix, Tensor3};

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FtdOptions {
    /// Number of univariate branches.
    pub r: usize,
    /// Filters the implicit objective must satisfy simultaneously. `None`
    /// selects {Left3, Right3} and escalates to {Left3, Right3, Central3}
    /// when r exceeds a numerical rank estimate of the tensor. Ignored by
    /// the explicit variant, whose filter roles are fixed.
    pub kinds: Option<Vec<FilterKind>>,
    /// Weight of the left/right disagreement penalty (explicit only).
    pub lambda: f64,
    pub max_sweeps: usize,
    /// Relative objective change over a 5-sweep window below which the
    /// sweep loop stops.
    pub tol: f64,
    pub seed: u64,
    pub restarts: usize,
    /// Budget of the embedded nonlinear solver for each V update.
    pub lm: LmOptions,
}

impl Default for FtdOptions {
    fn default() -> Self {
        FtdOptions {
            r: 1,
            kinds: None,
            lambda: 0.0,
            max_sweeps: 200,
            tol: 1e-8,
            seed: 0,
            restarts: 5,
            lm: LmOptions { max_iters: 40, ..Default::default() },
        }
    }
}

impl FtdOptions {
    pub(crate) fn validate(&self, implicit: bool) -> Result<()> {
        if self.r < 1 {
            return Err(Error::InvalidArgument("rank must be at least 1".into()));
        }
        if self.restarts < 1 || self.max_sweeps < 1 {
            return Err(Error::InvalidArgument("need at least one restart and one sweep".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if let Some(kinds) = &self.kinds {
            if implicit {
                if kinds.len() < 2 {
                    return Err(Error::InvalidArgument(
                        "the implicit objective needs at least two filters".into(),
                    ));
                }
                for (i, k) in kinds.iter().enumerate() {
                    if kinds[..i].contains(k) {
                        return Err(Error::InvalidArgument(format!("duplicate filter kind {k:?}")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Outcome of a filtered decomposition.
#[derive(Debug, Clone)]
pub struct FtdResult {
    /// Output factor, n x r.
    pub w: Matrix,
    /// Input factor with unit-norm columns, m x r.
    pub v: Matrix,
    /// Branch samples, N x r; entry at each branch's smallest z is exactly 0.
    pub g: Matrix,
    /// Branch axes `z = points V`, N x r, for the final V.
    pub z: Matrix,
    /// Normalized objective after each sweep (index 0 is the initial state).
    pub objective_trace: Vec<f64>,
    /// Normalized left/right filter disagreement of G after each sweep.
    pub smoothness_trace: Vec<f64>,
    /// Filters used by the tensor objective.
    pub kinds: Vec<FilterKind>,
    /// Rank estimate backing the filter escalation, when one was computed.
    pub rank_estimate: Option<usize>,
    /// Penalty weight (explicit runs).
    pub lambda: Option<f64>,
    pub sweeps: usize,
    /// V updates whose nonlinear solve failed outright.
    pub lm_stalls: usize,
    /// V or G updates rejected by the objective gate.
    pub rejected_updates: usize,
    /// Derived seed of the winning restart.
    pub restart_seed: u64,
}

impl FtdResult {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("at least the initial objective")
    }

    pub fn final_smoothness(&self) -> f64 {
        *self.smoothness_trace.last().expect("at least the initial metric")
    }

    /// Relative Frobenius residual of `[[W, V, F_C(V) ∘ G]]` against `t`.
    pub fn reconstruction_residual(&self, t: &Tensor3, pts: &OperatingPoints) -> Result<f64> {
        let bank = build_filter_bank(&self.v, pts.matrix())?;
        let gp = bank.filter_columns(FilterKind::Central3, &self.g)?;
        let recon = crate::tensor::reconstruct(&self.w, &self.v, &gp)?;
        Ok(t.sub(&recon).frobenius() / t.frobenius().max(1e-300))
    }
}

/// Precomputed unfoldings and scales shared by every restart of a run.
pub(crate) struct Problem<'a> {
    pub t: &'a Tensor3,
    pub points: &'a Matrix,
    pub j1: Matrix,
    pub j2: Matrix,
    pub j3: Matrix,
    pub t_norm: f64,
    pub r: usize,
}

impl<'a> Problem<'a> {
    pub fn new(t: &'a Tensor3, pts: &'a OperatingPoints, r: usize) -> Result<Self> {
        if !t.is_finite() {
            return Err(Error::NonFinite("tensor".into()));
        }
        if t.n_points() != pts.len() || t.n_in() != pts.dim() {
            return Err(Error::DimensionMismatch(format!(
                "tensor is {}x{}x{} but points are {}x{}",
                t.n_out(),
                t.n_in(),
                t.n_points(),
                pts.len(),
                pts.dim()
            )));
        }
        Ok(Problem {
            t,
            points: pts.matrix(),
            j1: t.unfold(1)?,
            j2: t.unfold(2)?,
            j3: t.unfold(3)?,
            t_norm: t.frobenius().max(1e-300),
            r,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.t.n_out(), self.t.n_in(), self.t.n_points())
    }
}

/// Random factor initialization: W and V standard normal with unit-norm
/// columns, G standard normal.
pub(crate) fn random_factors(rng: &mut SeededRng, n: usize, m: usize, np: usize, r: usize) -> (Matrix, Matrix, Matrix) {
    let mut w = Matrix::from_fn(n, r, |_, _| normal(rng));
    let mut v = Matrix::from_fn(m, r, |_, _| normal(rng));
    let g = Matrix::from_fn(np, r, |_, _| normal(rng));
    normalize_columns(&mut w);
    normalize_columns(&mut v);
    (w, v, g)
}

pub(crate) fn normalize_columns(m: &mut Matrix) {
    for i in 0..m.cols() {
        let norm = m.column(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for j in 0..m.rows() {
                m[(j, i)] /= norm;
            }
        }
    }
}

pub(crate) fn sumsq_diff(a: &Matrix, b: &Matrix) -> f64 {
    debug_assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// `|J_(1) - W ((F_kind ∘ G) ⊙ V)'|_F^2` for one filter kind.
pub(crate) fn tensor_term(problem: &Problem, bank: &FilterBank, kind: FilterKind, w: &Matrix, v: &Matrix, g: &Matrix) -> Result<f64> {
    let gp = bank.filter_columns(kind, g)?;
    let kr = khatri_rao(&gp, v)?;
    let model = w.matmul(&kr.transpose());
    Ok(sumsq_diff(&problem.j1, &model))
}

/// RMS-normalized left/right disagreement of the columns (the smoothness
/// yardstick used for traces, the explicit penalty and the reported
/// metric). Zero exactly when left and right derivative estimates agree
/// after each column is scaled to unit RMS.
pub(crate) fn lr_disagreement_sumsq(bank: &FilterBank, cols: &Matrix) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..cols.cols() {
        let col = cols.column(i);
        let gl = bank.branch(i).apply(FilterKind::Left3, &col)?;
        let gr = bank.branch(i).apply(FilterKind::Right3, &col)?;
        let rl = rms(&gl).max(1e-300);
        let rr = rms(&gr).max(1e-300);
        total += gl
            .iter()
            .zip(&gr)
            .map(|(l, r)| {
                let d = l / rl - r / rr;
                d * d
            })
            .sum::<f64>();
    }
    Ok(total)
}

/// Normalized form of [`lr_disagreement_sumsq`], comparable across sizes.
pub(crate) fn smoothness_metric(bank: &FilterBank, cols: &Matrix) -> Result<f64> {
    let sumsq = lr_disagreement_sumsq(bank, cols)?;
    Ok((sumsq / (cols.rows() * cols.cols()) as f64).sqrt())
}

/// Exact least-squares W update against the stacked filter objectives:
/// `W = (Σ_k J_(1) (G'_k ⊙ V)) (Σ_k (G'_k'G'_k) * (V'V))⁺`.
pub(crate) fn w_update(problem: &Problem, bank: &FilterBank, kinds: &[FilterKind], v: &Matrix, g: &Matrix) -> Result<Matrix> {
    let r = problem.r;
    let mut gram_sum = Matrix::zeros(r, r);
    let mut rhs_sum = Matrix::zeros(problem.t.n_out(), r);
    let v_gram = v.gram();
    for &kind in kinds {
        let gp = bank.filter_columns(kind, g)?;
        let kr = khatri_rao(&gp, v)?;
        let gram = gp.gram().hadamard(&v_gram);
        gram_sum = gram_sum_add(gram_sum, &gram);
        rhs_sum = gram_sum_add(rhs_sum, &problem.j1.matmul(&kr));
    }
    Ok(rhs_sum.matmul(&pinv(&gram_sum)?))
}

fn gram_sum_add(mut acc: Matrix, inc: &Matrix) -> Matrix {
    for i in 0..acc.rows() {
        for j in 0..acc.cols() {
            acc[(i, j)] += inc[(i, j)];
        }
    }
    acc
}

/// Closed-form relaxation for V that ignores the filters' dependence on V:
/// `V0 = J_(2) (G' ⊙ W) ((G''G') * (W'W))⁺` with `G' = F_kind ∘ G`.
pub(crate) fn v_relaxation(problem: &Problem, bank: &FilterBank, kind: FilterKind, w: &Matrix, g: &Matrix) -> Result<Matrix> {
    let gp = bank.filter_columns(kind, g)?;
    let kr = khatri_rao(&gp, w)?;
    let gram = gp.gram().hadamard(&w.gram());
    Ok(problem.j2.matmul(&kr).matmul(&pinv(&gram)?))
}

/// vec(V) packing used by the nonlinear V updates (column-major).
pub(crate) fn pack_v(v: &Matrix) -> Vec<f64> {
    let mut x = Vec::with_capacity(v.rows() * v.cols());
    for i in 0..v.cols() {
        x.extend(v.column(i));
    }
    x
}

pub(crate) fn unpack_v(x: &[f64], m: usize, r: usize) -> Matrix {
    Matrix::from_fn(m, r, |j, i| x[i * m + j])
}

/// Which smooth decomposition a sweep is running.
pub(crate) enum Variant<'a> {
    /// Stacked tensor objectives over several filters.
    Implicit { kinds: &'a [FilterKind] },
    /// Central-filter tensor objective plus the weighted left/right penalty.
    Explicit { lambda: f64 },
}

const CENTRAL_ONLY: [FilterKind; 1] = [FilterKind::Central3];

impl Variant<'_> {
    pub fn tensor_kinds(&self) -> &[FilterKind] {
        match self {
            Variant::Implicit { kinds } => kinds,
            Variant::Explicit { .. } => &CENTRAL_ONLY,
        }
    }

    /// The sweep objective every update is gated on.
    pub fn objective(&self, problem: &Problem, bank: &FilterBank, w: &Matrix, v: &Matrix, g: &Matrix) -> Result<f64> {
        match self {
            Variant::Implicit { kinds } => {
                let mut total = 0.0;
                for &kind in kinds.iter() {
                    total += tensor_term(problem, bank, kind, w, v, g)?;
                }
                Ok(total)
            }
            Variant::Explicit { lambda } => {
                let tensor = tensor_term(problem, bank, FilterKind::Central3, w, v, g)?;
                let penalty =
                    if *lambda > 0.0 { lambda * lr_disagreement_sumsq(bank, g)? } else { 0.0 };
                Ok(tensor + penalty)
            }
        }
    }

    /// Trace normalization: divide out the number of stacked copies and the
    /// tensor norm so values are comparable across sizes and filter counts.
    pub fn normalized(&self, problem: &Problem, raw: f64) -> f64 {
        let copies = match self {
            Variant::Implicit { kinds } => kinds.len() as f64,
            Variant::Explicit { .. } => 1.0,
        };
        (raw / copies).sqrt() / problem.t_norm
    }

    /// Residual vector the nonlinear V solve minimizes.
    fn push_v_residual(
        &self,
        problem: &Problem,
        bank: &FilterBank,
        w: &Matrix,
        v: &Matrix,
        g: &Matrix,
        out: &mut Vec<f64>,
    ) -> Result<()> {
        match self {
            Variant::Implicit { kinds } => {
                for &kind in kinds.iter() {
                    push_mode2_residual(problem, bank, kind, w, v, g, out)?;
                }
            }
            Variant::Explicit { lambda } => {
                push_mode2_residual(problem, bank, FilterKind::Central3, w, v, g, out)?;
                if *lambda > 0.0 {
                    push_penalty_residual(bank, g, *lambda, out)?;
                }
            }
        }
        Ok(())
    }

    /// Closed-form G update for this variant.
    fn g_step(
        &self,
        problem: &Problem,
        bank: &FilterBank,
        w: &Matrix,
        v: &Matrix,
        g_current: &Matrix,
        rejections: &mut usize,
    ) -> Result<Matrix> {
        match self {
            Variant::Implicit { kinds } => g_update(problem, bank, kinds, w, v, None, rejections),
            Variant::Explicit { lambda } => {
                if *lambda > 0.0 {
                    // RMS scalings frozen at the current samples
                    let rows = build_penalty_rows(bank, g_current)?;
                    g_update(problem, bank, &CENTRAL_ONLY, w, v, Some((*lambda, &rows)), rejections)
                } else {
                    g_update(problem, bank, &CENTRAL_ONLY, w, v, None, rejections)
                }
            }
        }
    }
}

/// Residual entries of the RMS-normalized penalty, scaled by sqrt(lambda).
fn push_penalty_residual(bank: &FilterBank, g: &Matrix, lambda: f64, out: &mut Vec<f64>) -> Result<()> {
    let sl = lambda.sqrt();
    for i in 0..g.cols() {
        let col = g.column(i);
        let gl = bank.branch(i).apply(FilterKind::Left3, &col)?;
        let gr = bank.branch(i).apply(FilterKind::Right3, &col)?;
        let rl = rms(&gl).max(1e-300);
        let rr = rms(&gr).max(1e-300);
        out.extend(gl.iter().zip(&gr).map(|(l, r)| sl * (l / rl - r / rr)));
    }
    Ok(())
}

/// One full alternating run from a seeded random initialization.
///
/// Each sweep updates W in closed form, then tries V candidates — the
/// Levenberg-Marquardt refinement seeded at the relaxation, the raw
/// relaxation itself, and a refinement warm-started at the current V —
/// accepting the first whose *completed* sweep (filters rebuilt, G
/// re-solved) does not increase the objective. Judging candidates after
/// the G re-solve matters: the sample factor is tied to the old axes, so
/// even an excellent V looks catastrophic until G adapts.
pub(crate) fn single_run(
    problem: &Problem,
    variant: &Variant,
    opts: &FtdOptions,
    seed: u64,
) -> Result<FtdResult> {
    let (n, m, np) = problem.dims();
    let mut rng = crate::rng::seeded(seed);
    let (mut w, mut v, mut g) = random_factors(&mut rng, n, m, np, problem.r);
    let mut bank = build_filter_bank(&v, problem.points)?;

    let mut lm_stalls = 0usize;
    let mut rejected = 0usize;

    let initial = variant.objective(problem, &bank, &w, &v, &g)?;
    let mut objective_trace = vec![variant.normalized(problem, initial)];
    let mut smoothness_trace = vec![smoothness_metric(&bank, &g)?];

    let mut sweeps = 0;
    for sweep in 0..opts.max_sweeps {
        sweeps = sweep + 1;
        w = w_update(problem, &bank, variant.tensor_kinds(), &v, &g)?;
        let pre_obj = variant.objective(problem, &bank, &w, &v, &g)?;

        let relax = v_relaxation(problem, &bank, variant.tensor_kinds()[0], &w, &g)?;
        let run_lm = |x0: &Matrix, stalls: &mut usize| -> Option<Matrix> {
            if build_filter_bank(x0, problem.points).is_err() {
                return None;
            }
            let residual = |x: &[f64]| -> Result<Vec<f64>> {
                let vc = unpack_v(x, m, problem.r);
                let bank_c = build_filter_bank(&vc, problem.points)?;
                let mut out = Vec::new();
                variant.push_v_residual(problem, &bank_c, &w, &vc, &g, &mut out)?;
                Ok(out)
            };
            match crate::lm::lm_solve(residual, &pack_v(x0), &opts.lm) {
                Ok(outcome) => {
                    let mut cand = unpack_v(&outcome.x, m, problem.r);
                    normalize_columns(&mut cand);
                    Some(cand)
                }
                Err(_) => {
                    *stalls += 1;
                    None
                }
            }
        };

        // lazily generated V candidates, cheapest promising first
        let mut normalized_relax = relax.clone();
        normalize_columns(&mut normalized_relax);
        let candidates: [Option<Matrix>; 3] = [
            run_lm(&relax, &mut lm_stalls),
            Some(normalized_relax),
            run_lm(&v, &mut lm_stalls),
        ];

        let mut accepted = false;
        for cand in candidates.into_iter().flatten() {
            let Ok(bank_c) = build_filter_bank(&cand, problem.points) else {
                continue;
            };
            let Ok(g_c) = variant.g_step(problem, &bank_c, &w, &cand, &g, &mut rejected) else {
                continue;
            };
            let obj_c = variant.objective(problem, &bank_c, &w, &cand, &g_c)?;
            if obj_c <= pre_obj {
                v = cand;
                bank = bank_c;
                g = g_c;
                accepted = true;
                break;
            }
        }
        if !accepted {
            rejected += 1;
            // keep V, still refresh the samples (exact or gated G solve)
            let g_c = variant.g_step(problem, &bank, &w, &v, &g, &mut rejected)?;
            let obj_c = variant.objective(problem, &bank, &w, &v, &g_c)?;
            if obj_c <= pre_obj {
                g = g_c;
            }
        }

        let raw = variant.objective(problem, &bank, &w, &v, &g)?;
        objective_trace.push(variant.normalized(problem, raw));
        smoothness_trace.push(smoothness_metric(&bank, &g)?);

        if *objective_trace.last().unwrap() < 1e-13 || crate::cpd::stalled(&objective_trace, opts.tol) {
            break;
        }
    }

    let z = branch_axes(problem.points, &v);
    let lambda = match variant {
        Variant::Explicit { lambda } => Some(*lambda),
        Variant::Implicit { .. } => None,
    };
    Ok(FtdResult {
        w,
        v,
        g,
        z,
        objective_trace,
        smoothness_trace,
        kinds: variant.tensor_kinds().to_vec(),
        rank_estimate: None,
        lambda,
        sweeps,
        lm_stalls,
        rejected_updates: rejected,
        restart_seed: seed,
    })
}

/// Residual entries of `J_(2) - V ((F_kind ∘ G) ⊙ W)'` appended to `out`.
pub(crate) fn push_mode2_residual(
    problem: &Problem,
    bank: &FilterBank,
    kind: FilterKind,
    w: &Matrix,
    v: &Matrix,
    g: &Matrix,
    out: &mut Vec<f64>,
) -> Result<()> {
    let gp = bank.filter_columns(kind, g)?;
    let kr = khatri_rao(&gp, w)?;
    let model = v.matmul(&kr.transpose());
    out.extend(problem.j2.data().iter().zip(model.data()).map(|(a, b)| a - b));
    Ok(())
}

/// Scaled left-minus-right penalty rows for one branch, indexed by original
/// sample order; each row merges the two 3-point windows (at most 6
/// distinct columns).
pub(crate) struct PenaltyRows {
    /// rows[k] lists (column, weight) of row k of `F_L/rms_L - F_R/rms_R`.
    pub rows: Vec<Vec<(usize, f64)>>,
}

pub(crate) fn build_penalty_rows(bank: &FilterBank, g: &Matrix) -> Result<Vec<PenaltyRows>> {
    let mut all = Vec::with_capacity(bank.num_branches());
    for i in 0..bank.num_branches() {
        let col = g.column(i);
        let branch = bank.branch(i);
        let gl = branch.apply(FilterKind::Left3, &col)?;
        let gr = branch.apply(FilterKind::Right3, &col)?;
        let rl = rms(&gl).max(1e-300);
        let rr = rms(&gr).max(1e-300);
        let rows_l = branch.rows_original(FilterKind::Left3);
        let rows_r = branch.rows_original(FilterKind::Right3);
        let n = col.len();
        let mut rows = Vec::with_capacity(n);
        for k in 0..n {
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(6);
            for &(c, wgt) in &rows_l[k] {
                merge_entry(&mut row, c, wgt / rl);
            }
            for &(c, wgt) in &rows_r[k] {
                merge_entry(&mut row, c, -wgt / rr);
            }
            rows.push(row);
        }
        all.push(PenaltyRows { rows });
    }
    Ok(all)
}

fn merge_entry(row: &mut Vec<(usize, f64)>, col: usize, w: f64) {
    for entry in row.iter_mut() {
        if entry.0 == col {
            entry.1 += w;
            return;
        }
    }
    row.push((col, w));
}

/// Joint closed-form G update.
///
/// Solves the normal equations of the stacked system
/// `[ ((V⊙W) ⊗ I_N) blkdiag(F_k) ]_k  vec(G) = [ vec(J_(3)) ]_k`
/// plus, when a penalty is given, `sqrt(lambda) (blkdiag(F_L)/rms -
/// blkdiag(F_R)/rms) vec(G) = 0`. The Gram matrix is assembled from the
/// 3-banded filter rows [(r N)^2 dense, built in O(s r^2 N) work]; the
/// entry of each column at its branch's smallest z is pinned to zero,
/// which removes the per-column constant indeterminacy, and the ridge in
/// [`solve_spd`] keeps any remaining deficiency (r beyond the tensor rank)
/// at the minimum-norm solution.
pub(crate) fn g_update(
    problem: &Problem,
    bank: &FilterBank,
    kinds: &[FilterKind],
    w: &Matrix,
    v: &Matrix,
    penalty: Option<(f64, &[PenaltyRows])>,
    out_rejections: &mut usize,
) -> Result<Matrix> {
    let r = problem.r;
    let n = problem.t.n_points();
    let q = r * n;

    let b = khatri_rao(v, w)?;
    let gram = v.gram().hadamard(&w.gram()); // B'B
    let j3b = problem.j3.matmul(&b); // N x r

    let mut a = vec![0.0; q * q];
    let mut rhs = vec![0.0; q];

    for &kind in kinds {
        let rows: Vec<_> = (0..r).map(|i| bank.branch(i).rows_original(kind)).collect();
        for ia in 0..r {
            // right-hand side: F_a' (J_(3) B)[:, a]
            for k in 0..n {
                let u = j3b[(k, ia)];
                for &(c, wgt) in &rows[ia][k] {
                    rhs[ia * n + c] += wgt * u;
                }
            }
            for ib in 0..r {
                let coeff = gram[(ia, ib)];
                if coeff == 0.0 {
                    continue;
                }
                for k in 0..n {
                    for &(ca, wa) in &rows[ia][k] {
                        let base = (ia * n + ca) * q + ib * n;
                        let caw = coeff * wa;
                        for &(cb, wb) in &rows[ib][k] {
                            a[base + cb] += caw * wb;
                        }
                    }
                }
            }
        }
    }

    if let Some((lambda, penalty_rows)) = penalty {
        if lambda > 0.0 {
            for (i, p) in penalty_rows.iter().enumerate() {
                for row in &p.rows {
                    for &(c1, w1) in row {
                        let base = (i * n + c1) * q + i * n;
                        let lw = lambda * w1;
                        for &(c2, w2) in row {
                            a[base + c2] += lw * w2;
                        }
                    }
                }
            }
        }
    }

    // pin the entry at the smallest z of every branch to zero
    let fixed: Vec<usize> = (0..r).map(|i| bank.branch(i).min_z_index()).collect();
    let mut keep = Vec::with_capacity(q - r);
    let mut reduced_index = vec![usize::MAX; q];
    for full in 0..q {
        let branch = full / n;
        if full % n == fixed[branch] {
            continue;
        }
        reduced_index[full] = keep.len();
        keep.push(full);
    }

    let qr = keep.len();
    let mut a_red = Matrix::zeros(qr, qr);
    for (ri, &fi) in keep.iter().enumerate() {
        let src = &a[fi * q..(fi + 1) * q];
        for (rj, &fj) in keep.iter().enumerate() {
            a_red[(ri, rj)] = src[fj];
        }
    }
    let rhs_red: Vec<f64> = keep.iter().map(|&fi| rhs[fi]).collect();

    let x = solve_spd(&a_red, &rhs_red)?;
    if x.iter().any(|v| !v.is_finite()) {
        *out_rejections += 1;
        return Err(Error::Numerical("non-finite G update".into()));
    }

    let mut g = Matrix::zeros(n, r);
    for (full, &ri) in reduced_index.iter().enumerate() {
        if ri != usize::MAX {
            g[(full % n, full / n)] = x[ri];
        }
    }
    Ok(g)
}

/// Returns the best restart by final objective, running each restart with
/// its derived seed. Restarts are independent, so the winner is identical
/// no matter how they would be scheduled.
pub(crate) fn best_restart<F>(restarts: usize, seed: u64, mut single: F) -> Result<FtdResult>
where
    F: FnMut(u64) -> Result<FtdResult>,
{
    let mut best: Option<FtdResult> = None;
    for k in 0..restarts {
        let run = single(crate::rng::restart_seed(seed, k))?;
        let better = match &best {
            None => true,
            Some(b) => run.final_objective() < b.final_objective(),
        };
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

// Size caps for the variable-projection polish; beyond these the repeated
// sample solves would dominate the runtime for little acceptance gain.
const POLISH_MAX_UNKNOWNS: usize = 48;
const POLISH_MAX_SAMPLES: usize = 900;

/// Endgame refinement of the winning restart.
///
/// Alternating sweeps contract very slowly near a solution (the V update
/// judges candidates against samples tied to the old axes), so small
/// problems get a final joint solve: Levenberg-Marquardt over (V, W) with
/// G eliminated by its closed-form update at every probe. The polished
/// factors replace the result only if they lower the sweep objective.
pub(crate) fn varpro_polish(
    problem: &Problem,
    variant: &Variant,
    opts: &FtdOptions,
    mut res: FtdResult,
) -> Result<FtdResult> {
    let (n, m, np) = problem.dims();
    let r = problem.r;
    if r * np > POLISH_MAX_SAMPLES || r * (n + m) > POLISH_MAX_UNKNOWNS {
        return Ok(res);
    }
    let Ok(bank0) = build_filter_bank(&res.v, problem.points) else {
        return Ok(res);
    };
    let pre_obj = variant.objective(problem, &bank0, &res.w, &res.v, &res.g)?;

    // explicit runs keep the penalty scalings frozen at the incoming samples
    let frozen_penalty = match variant {
        Variant::Explicit { lambda } if *lambda > 0.0 => {
            Some((*lambda, build_penalty_rows(&bank0, &res.g)?))
        }
        _ => None,
    };

    let solve_g = |bank: &FilterBank, w: &Matrix, v: &Matrix| -> Result<Matrix> {
        let mut sink = 0;
        match &frozen_penalty {
            Some((lambda, rows)) => {
                g_update(problem, bank, variant.tensor_kinds(), w, v, Some((*lambda, rows)), &mut sink)
            }
            None => g_update(problem, bank, variant.tensor_kinds(), w, v, None, &mut sink),
        }
    };

    let mut x0 = pack_v(&res.v);
    for i in 0..r {
        x0.extend(res.w.column(i));
    }
    let unpack = |x: &[f64]| -> (Matrix, Matrix) {
        let v = unpack_v(&x[..m * r], m, r);
        let w = Matrix::from_fn(n, r, |j, i| x[m * r + i * n + j]);
        (v, w)
    };

    let residual = |x: &[f64]| -> Result<Vec<f64>> {
        let (vc, wc) = unpack(x);
        let bank = build_filter_bank(&vc, problem.points)?;
        let g_star = solve_g(&bank, &wc, &vc)?;
        let mut out = Vec::new();
        for &kind in variant.tensor_kinds() {
            let gp = bank.filter_columns(kind, &g_star)?;
            let kr = khatri_rao(&gp, &vc)?;
            let model = wc.matmul(&kr.transpose());
            out.extend(problem.j1.data().iter().zip(model.data()).map(|(a, b)| a - b));
        }
        if let Variant::Explicit { lambda } = variant {
            if *lambda > 0.0 {
                push_penalty_residual(&bank, &g_star, *lambda, &mut out)?;
            }
        }
        Ok(out)
    };

    let lm_opts = crate::lm::LmOptions { max_iters: opts.lm.max_iters.max(30), ..opts.lm.clone() };
    let Ok(outcome) = crate::lm::lm_solve(residual, &x0, &lm_opts) else {
        return Ok(res);
    };
    let (mut vc, wc) = unpack(&outcome.x);
    normalize_columns(&mut vc);
    let Ok(bank_c) = build_filter_bank(&vc, problem.points) else {
        return Ok(res);
    };
    let Ok(g_c) = solve_g(&bank_c, &wc, &vc) else {
        return Ok(res);
    };
    // one exact W pass on the polished axes
    let w_c = w_update(problem, &bank_c, variant.tensor_kinds(), &vc, &g_c)?;
    let g_c = solve_g(&bank_c, &w_c, &vc)?;
    let obj_c = variant.objective(problem, &bank_c, &w_c, &vc, &g_c)?;
    if obj_c <= pre_obj {
        res.objective_trace.push(variant.normalized(problem, obj_c));
        res.smoothness_trace.push(smoothness_metric(&bank_c, &g_c)?);
        res.z = branch_axes(problem.points, &vc);
        res.w = w_c;
        res.v = vc;
        res.g = g_c;
    }
    Ok(res)
}

/// Branch axes for the final factors.
pub(crate) fn branch_axes(points: &Matrix, v: &Matrix) -> Matrix {
    Matrix::from_fn(points.rows(), v.cols(), |k, i| {
        points.row(k).iter().enumerate().map(|(j, p)| p * v[(j, i)]).sum()
    })
}

/// The coarse default grid for the explicit penalty weight: squares of
/// sqrt(lambda) in {1e-1, 1e0, ..., 1e4}.
pub fn default_lambda_grid() -> Vec<f64> {
    (-1..=4).map(|e| 10f64.powi(2 * e)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::build_filter_bank;
    use crate::jacobian::sample_uniform;
    use crate::rng::seeded;
    use crate::tensor::reconstruct;

    /// Dense oracle for the G update: materialize the stacked system
    /// explicitly (dense filter matrices, Kronecker products and all) and
    /// solve it with the SVD pseudoinverse.
    fn dense_g_update_oracle(
        problem: &Problem,
        bank: &FilterBank,
        kinds: &[FilterKind],
        w: &Matrix,
        v: &Matrix,
        penalty: Option<(f64, &[PenaltyRows])>,
    ) -> Matrix {
        let r = problem.r;
        let n = problem.t.n_points();
        let q = r * n;
        let b = khatri_rao(v, w).unwrap();
        let nm = b.rows();

        // dense F per branch from the banded original-order rows
        let dense_f = |kind: FilterKind, i: usize| -> Matrix {
            let rows = bank.branch(i).rows_original(kind);
            let mut f = Matrix::zeros(n, n);
            for (k, row) in rows.iter().enumerate() {
                for &(c, wgt) in row {
                    f[(k, c)] += wgt;
                }
            }
            f
        };

        let fixed: Vec<usize> = (0..r).map(|i| bank.branch(i).min_z_index()).collect();
        let mut stacked_rows = 0;
        for _ in kinds {
            stacked_rows += nm * n;
        }
        if penalty.is_some() {
            stacked_rows += q;
        }
        let mut big = Matrix::zeros(stacked_rows, q - r);
        let mut rhs = vec![0.0; stacked_rows];

        // keep map without the pinned entries
        let mut keep = Vec::new();
        for full in 0..q {
            if full % n != fixed[full / n] {
                keep.push(full);
            }
        }

        let mut row_base = 0;
        for &kind in kinds {
            // ((B) ⊗ I_N) blkdiag(F_kind): row (col_of_B * n + point)
            for ib in 0..r {
                let f = dense_f(kind, ib);
                for (rk, &full) in keep.iter().enumerate() {
                    if full / n != ib {
                        continue;
                    }
                    let col_in_branch = full % n;
                    for point in 0..n {
                        for row_b in 0..nm {
                            big[(row_base + row_b * n + point, rk)] +=
                                b[(row_b, ib)] * f[(point, col_in_branch)];
                        }
                    }
                }
            }
            for row_b in 0..nm {
                for point in 0..n {
                    rhs[row_base + row_b * n + point] = problem.j3[(point, row_b)];
                }
            }
            row_base += nm * n;
        }
        if let Some((lambda, penalty_rows)) = penalty {
            let sl = lambda.sqrt();
            for (i, p) in penalty_rows.iter().enumerate() {
                for (k, row) in p.rows.iter().enumerate() {
                    for &(c, wgt) in row {
                        let full = i * n + c;
                        if let Ok(rk) = keep.binary_search(&full) {
                            big[(row_base + i * n + k, rk)] += sl * wgt;
                        }
                    }
                }
            }
        }

        let sol = pinv(&big).unwrap().matvec(&rhs);
        let mut g = Matrix::zeros(n, r);
        for (rk, &full) in keep.iter().enumerate() {
            g[(full % n, full / n)] = sol[rk];
        }
        g
    }

    #[test]
    fn g_update_matches_dense_pseudoinverse_oracle() {
        let mut rng = seeded(71);
        let pts = sample_uniform(72, 14, 2, -1.0, 1.0).unwrap();
        let (n, m, np, r) = (2, 2, 14, 2);
        let (w, v, g_true) = random_factors(&mut rng, n, m, np, r);
        let bank = build_filter_bank(&v, pts.matrix()).unwrap();
        let gp = bank.filter_columns(FilterKind::Central3, &g_true).unwrap();
        let t = reconstruct(&w, &v, &gp).unwrap();
        let problem = Problem::new(&t, &pts, r).unwrap();

        let mut rejections = 0;

        // implicit flavor (two filters, no penalty)
        let kinds = vec![FilterKind::Left3, FilterKind::Right3];
        let ours = g_update(&problem, &bank, &kinds, &w, &v, None, &mut rejections).unwrap();
        let oracle = dense_g_update_oracle(&problem, &bank, &kinds, &w, &v, None);
        let rel = ours.sub(&oracle).frobenius() / oracle.frobenius().max(1e-300);
        assert!(rel < 1e-8, "implicit-style G update differs from the dense oracle by {rel}");

        // explicit flavor (central + penalty)
        let kinds_c = vec![FilterKind::Central3];
        let penalty_rows = build_penalty_rows(&bank, &g_true).unwrap();
        let lambda = 3.5;
        let ours = g_update(&problem, &bank, &kinds_c, &w, &v, Some((lambda, &penalty_rows)), &mut rejections).unwrap();
        let oracle = dense_g_update_oracle(&problem, &bank, &kinds_c, &w, &v, Some((lambda, &penalty_rows)));
        let rel = ours.sub(&oracle).frobenius() / oracle.frobenius().max(1e-300);
        assert!(rel < 1e-8, "explicit-style G update differs from the dense oracle by {rel}");
        assert_eq!(rejections, 0);
    }

    #[test]
    fn g_update_pins_smallest_z_entry() {
        let mut rng = seeded(81);
        let pts = sample_uniform(82, 20, 3, -1.5, 1.5).unwrap();
        let (w, v, _) = random_factors(&mut rng, 2, 3, 20, 3);
        let bank = build_filter_bank(&v, pts.matrix()).unwrap();
        let g_target = Matrix::from_fn(20, 3, |k, i| {
            let z = bank.branch(i).z[k];
            (i + 1) as f64 * z * z
        });
        let gp = bank.filter_columns(FilterKind::Left3, &g_target).unwrap();
        let t = reconstruct(&w, &v, &gp).unwrap();
        let problem = Problem::new(&t, &pts, 3).unwrap();
        let mut rej = 0;
        let g = g_update(&problem, &bank, &[FilterKind::Left3, FilterKind::Right3], &w, &v, None, &mut rej).unwrap();
        for i in 0..3 {
            assert_eq!(g[(bank.branch(i).min_z_index(), i)], 0.0);
        }
    }

    #[test]
    fn default_grid_is_the_coarse_sqrt_scan() {
        let grid = default_lambda_grid();
        assert_eq!(grid.len(), 6);
        assert_eq!(grid[0], 1e-2);
        assert_eq!(grid[5], 1e8);
    }
}
