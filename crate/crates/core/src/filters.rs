//! Non-equidistant finite-difference filters.
//!
//! A filter is the composition `S⁻¹ D S`: sort the samples along a branch
//! axis z, apply a banded derivative-weight operator built from 3-point
//! Lagrange interpolation windows, and unsort. Three window placements are
//! supported — left, central and right — which agree on smooth data and
//! disagree wherever the samples are locally rough. That disagreement is
//! what the decomposition routines exploit.
//!
//! Operators are stored as three (column, weight) pairs per row; they are
//! never materialized as dense N x N matrices, so applying one costs O(N).

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Window placement of the 3-point derivative scheme.
///
/// `Left3` estimates the derivative at the most forward point of a window
/// reaching to the left; `Right3` at the most backward point of a window
/// reaching to the right; `Central3` at the middle point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum FilterKind {
    Left3,
    Central3,
    Right3,
}

impl FilterKind {
    pub fn short_name(self) -> &'static str {
        match self {
            FilterKind::Left3 => "L",
            FilterKind::Central3 => "C",
            FilterKind::Right3 => "R",
        }
    }
}

impl std::str::FromStr for FilterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "L" | "l" | "left" | "Left3" => Ok(FilterKind::Left3),
            "C" | "c" | "central" | "Central3" => Ok(FilterKind::Central3),
            "R" | "r" | "right" | "Right3" => Ok(FilterKind::Right3),
            other => Err(Error::Parse(format!("unknown filter kind '{other}' (expected L, C or R)"))),
        }
    }
}

/// Permutation sorting a branch grid into ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SortPermutation {
    /// original index -> position in the sorted grid
    positions: Vec<usize>,
    /// sorted position -> original index (inverse of `positions`)
    order: Vec<usize>,
}

impl SortPermutation {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Sorted position of original sample i.
    pub fn position(&self, i: usize) -> usize {
        self.positions[i]
    }

    /// Original index of the j-th smallest sample.
    pub fn original(&self, j: usize) -> usize {
        self.order[j]
    }

    pub fn is_identity(&self) -> bool {
        self.positions.iter().enumerate().all(|(i, &p)| i == p)
    }

    /// Applies S: gathers `g` into ascending-z order.
    pub fn sort<T: Copy>(&self, g: &[T]) -> Vec<T> {
        self.order.iter().map(|&i| g[i]).collect()
    }

    /// Applies S⁻¹: scatters a sorted vector back to original order.
    pub fn unsort<T: Copy + Default>(&self, sorted: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); sorted.len()];
        for (j, &i) in self.order.iter().enumerate() {
            out[i] = sorted[j];
        }
        out
    }
}

/// Relative spacing below which a grid is considered degenerate.
fn degenerate_eps(range: f64) -> f64 {
    1e-12 * range
}

/// Stable ascending sort of `z`, with a degeneracy check: two entries closer
/// than `1e-12 * range(z)` would blow up the Lagrange denominators, so they
/// are rejected rather than silently perturbed.
pub fn sort_permutation(z: &[f64]) -> Result<SortPermutation> {
    if z.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "a branch grid needs at least 3 points, got {}",
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("branch grid".into()));
    }
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[a].total_cmp(&z[b]));
    let range = z[order[z.len() - 1]] - z[order[0]];
    if range <= 0.0 {
        return Err(Error::DegenerateGrid { branch: None });
    }
    let eps = degenerate_eps(range);
    for w in order.windows(2) {
        if z[w[1]] - z[w[0]] < eps {
            return Err(Error::DegenerateGrid { branch: None });
        }
    }
    let mut positions = vec![0usize; z.len()];
    for (j, &i) in order.iter().enumerate() {
        positions[i] = j;
    }
    Ok(SortPermutation { positions, order })
}

/// Derivative weights of the quadratic interpolant through
/// `(zw[0], g0), (zw[1], g1), (zw[2], g2)`, evaluated at `x`.
///
/// The three boxed formulas for left/central/right windows are all instances
/// of this one expression with `x` set to the respective window point.
fn quadratic_derivative_weights(zw: &[f64; 3], x: f64) -> [f64; 3] {
    let (z1, z2, z3) = (zw[0], zw[1], zw[2]);
    [
        (2.0 * x - z2 - z3) / ((z1 - z2) * (z1 - z3)),
        (2.0 * x - z1 - z3) / ((z2 - z1) * (z2 - z3)),
        (2.0 * x - z1 - z2) / ((z3 - z1) * (z3 - z2)),
    ]
}

fn check_window(zw: &[f64; 3]) -> Result<()> {
    if !(zw[0] < zw[1] && zw[1] < zw[2]) {
        return Err(Error::InvalidArgument("window points must be strictly ascending".into()));
    }
    Ok(())
}

/// Weights of the derivative estimate at the middle point of the window.
pub fn lagrange_weights_central(zw: &[f64; 3]) -> Result<[f64; 3]> {
    check_window(zw)?;
    Ok(quadratic_derivative_weights(zw, zw[1]))
}

/// Weights of the derivative estimate at the most forward point, `zw[2]`.
pub fn lagrange_weights_left(zw: &[f64; 3]) -> Result<[f64; 3]> {
    check_window(zw)?;
    Ok(quadratic_derivative_weights(zw, zw[2]))
}

/// Weights of the derivative estimate at the backward point, `zw[0]`.
pub fn lagrange_weights_right(zw: &[f64; 3]) -> Result<[f64; 3]> {
    check_window(zw)?;
    Ok(quadratic_derivative_weights(zw, zw[0]))
}

/// Banded derivative operator on a sorted grid: three (column, weight)
/// entries per row, rows indexed like the sorted grid.
#[derive(Debug, Clone)]
pub struct FdOperator {
    n: usize,
    kind: FilterKind,
    rows: Vec<[(usize, f64); 3]>,
}

impl FdOperator {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn kind(&self) -> FilterKind {
        self.kind
    }

    pub fn rows(&self) -> &[[(usize, f64); 3]] {
        &self.rows
    }

    /// Applies the operator to a vector in sorted order.
    pub fn apply_sorted(&self, g_sorted: &[f64]) -> Vec<f64> {
        assert_eq!(g_sorted.len(), self.n);
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(c, w)| w * g_sorted[c]).sum())
            .collect()
    }
}

/// Builds the banded operator for a strictly ascending grid.
///
/// Boundary rows switch scheme rather than using ghost points: the central
/// operator opens with a right row and closes with a left row; the left
/// operator starts with a right row then a central row; the right operator
/// ends with a central row then a left row.
pub fn build_operator(z_sorted: &[f64], kind: FilterKind) -> Result<FdOperator> {
    let n = z_sorted.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("operator needs at least 3 grid points, got {n}")));
    }
    let range = z_sorted[n - 1] - z_sorted[0];
    if range <= 0.0 {
        return Err(Error::DegenerateGrid { branch: None });
    }
    let eps = degenerate_eps(range);
    for w in z_sorted.windows(2) {
        if w[1] - w[0] < eps {
            return Err(Error::DegenerateGrid { branch: None });
        }
    }

    let window_row = |start: usize, eval: usize| -> [(usize, f64); 3] {
        let zw = [z_sorted[start], z_sorted[start + 1], z_sorted[start + 2]];
        let w = quadratic_derivative_weights(&zw, z_sorted[start + eval]);
        [(start, w[0]), (start + 1, w[1]), (start + 2, w[2])]
    };

    let mut rows = Vec::with_capacity(n);
    match kind {
        FilterKind::Central3 => {
            rows.push(window_row(0, 0));
            for i in 1..n - 1 {
                rows.push(window_row(i - 1, 1));
            }
            rows.push(window_row(n - 3, 2));
        }
        FilterKind::Left3 => {
            rows.push(window_row(0, 0));
            rows.push(window_row(0, 1));
            for i in 2..n {
                rows.push(window_row(i - 2, 2));
            }
        }
        FilterKind::Right3 => {
            for i in 0..n - 2 {
                rows.push(window_row(i, 0));
            }
            rows.push(window_row(n - 3, 1));
            rows.push(window_row(n - 3, 2));
        }
    }
    Ok(FdOperator { n, kind, rows })
}

/// Applies the full filter `S⁻¹ D S` to samples in original order.
pub fn apply_filter(perm: &SortPermutation, op: &FdOperator, g: &[f64]) -> Result<Vec<f64>> {
    if perm.len() != g.len() || op.len() != g.len() {
        return Err(Error::DimensionMismatch(format!(
            "filter length {} / permutation length {} / data length {}",
            op.len(),
            perm.len(),
            g.len()
        )));
    }
    let sorted = perm.sort(g);
    let dsorted = op.apply_sorted(&sorted);
    Ok(perm.unsort(&dsorted))
}

/// Filters for one branch: the grid `z = points . v_i`, its sorting
/// permutation and the three banded operators on the sorted grid.
#[derive(Debug, Clone)]
pub struct BranchFilters {
    pub z: Vec<f64>,
    pub perm: SortPermutation,
    left: FdOperator,
    central: FdOperator,
    right: FdOperator,
}

impl BranchFilters {
    pub fn operator(&self, kind: FilterKind) -> &FdOperator {
        match kind {
            FilterKind::Left3 => &self.left,
            FilterKind::Central3 => &self.central,
            FilterKind::Right3 => &self.right,
        }
    }

    pub fn apply(&self, kind: FilterKind, g: &[f64]) -> Result<Vec<f64>> {
        apply_filter(&self.perm, self.operator(kind), g)
    }

    /// Original index of the smallest grid point; used to pin the free
    /// constant of each branch during the sample updates.
    pub fn min_z_index(&self) -> usize {
        self.perm.original(0)
    }

    /// Rows of the filter re-indexed to original sample order:
    /// entry k lists the (original column, weight) pairs of row k of
    /// `S⁻¹ D S`.
    pub fn rows_original(&self, kind: FilterKind) -> Vec<[(usize, f64); 3]> {
        let op = self.operator(kind);
        let mut rows = vec![[(0usize, 0.0); 3]; op.len()];
        for (j, row) in op.rows().iter().enumerate() {
            let orig_row = self.perm.original(j);
            let mut mapped = [(0usize, 0.0); 3];
            for (t, &(c, w)) in row.iter().enumerate() {
                mapped[t] = (self.perm.original(c), w);
            }
            rows[orig_row] = mapped;
        }
        rows
    }
}

/// Per-branch filters for every column of `v`: branch i lives on the axis
/// `z_i = points . v[:, i]`.
#[derive(Debug, Clone)]
pub struct FilterBank {
    branches: Vec<BranchFilters>,
}

impl FilterBank {
    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn branch(&self, i: usize) -> &BranchFilters {
        &self.branches[i]
    }

    pub fn branches(&self) -> &[BranchFilters] {
        &self.branches
    }

    /// Applies one filter kind column-wise: column i of the result is
    /// `F_i(kind) * g[:, i]`.
    pub fn filter_columns(&self, kind: FilterKind, g: &Matrix) -> Result<Matrix> {
        assert_eq!(g.cols(), self.num_branches());
        let mut out = Matrix::zeros(g.rows(), g.cols());
        for i in 0..g.cols() {
            let col = g.column(i);
            let f = self.branch(i).apply(kind, &col)?;
            out.set_column(i, &f);
        }
        Ok(out)
    }
}

/// Builds the per-branch filters for the axes defined by `v`.
///
/// `points` is N x m (one operating point per row), `v` is m x r.
pub fn build_filter_bank(v: &Matrix, points: &Matrix) -> Result<FilterBank> {
    if v.rows() != points.cols() {
        return Err(Error::DimensionMismatch(format!(
            "v has {} rows but points have {} columns",
            v.rows(),
            points.cols()
        )));
    }
    let n = points.rows();
    let mut branches = Vec::with_capacity(v.cols());
    for i in 0..v.cols() {
        let z: Vec<f64> = (0..n)
            .map(|k| points.row(k).iter().zip(0..v.rows()).map(|(p, j)| p * v[(j, i)]).sum())
            .collect();
        let branch = (|| -> Result<BranchFilters> {
            let perm = sort_permutation(&z)?;
            let z_sorted = perm.sort(&z);
            Ok(BranchFilters {
                left: build_operator(&z_sorted, FilterKind::Left3)?,
                central: build_operator(&z_sorted, FilterKind::Central3)?,
                right: build_operator(&z_sorted, FilterKind::Right3)?,
                z,
                perm,
            })
        })()
        .map_err(|e| match e {
            Error::DegenerateGrid { .. } => Error::DegenerateGrid { branch: Some(i) },
            other => other,
        })?;
        branches.push(branch);
    }
    Ok(FilterBank { branches })
}
