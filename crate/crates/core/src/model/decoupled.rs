//! The decoupled form `f(p) = W g(V'p) + c` with polynomial branches.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::polynomial::{MonomialPolynomial, Term};
use super::{check_input_dim, compositions, Model};

/// One univariate branch: coefficients `c0..cd` of a polynomial in its
/// internal variable `z = v_i'p`, constant included.
///
/// The constant cannot be identified from derivative data; it is kept in
/// the representation anyway so the same type serves before and after the
/// separate constant-estimation step.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchPoly {
    coefficients: Vec<f64>,
}

impl BranchPoly {
    pub fn new(coefficients: Vec<f64>) -> Self {
        assert!(!coefficients.is_empty());
        BranchPoly { coefficients }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn degree(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn eval(&self, z: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * z + c)
    }

    pub fn deriv(&self, z: f64) -> f64 {
        let mut acc = 0.0;
        for (k, c) in self.coefficients.iter().enumerate().skip(1).rev() {
            acc = acc * z + k as f64 * c;
        }
        acc
    }
}

/// `f(p) = W g(V'p) + c` with `r` univariate polynomial branches.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledModel {
    w: Matrix,
    v: Matrix,
    branches: Vec<BranchPoly>,
    constants: Vec<f64>,
}

impl DecoupledModel {
    pub fn new(w: Matrix, v: Matrix, branches: Vec<BranchPoly>, constants: Vec<f64>) -> Result<Self> {
        let r = branches.len();
        if w.cols() != r || v.cols() != r {
            return Err(Error::DimensionMismatch(format!(
                "branch count {r} vs W columns {} and V columns {}",
                w.cols(),
                v.cols()
            )));
        }
        if constants.len() != w.rows() {
            return Err(Error::DimensionMismatch(format!(
                "constant vector length {} vs {} outputs",
                constants.len(),
                w.rows()
            )));
        }
        if !w.is_finite() || !v.is_finite() || constants.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("decoupled model parameters".into()));
        }
        Ok(DecoupledModel { w, v, branches, constants })
    }

    pub fn w(&self) -> &Matrix {
        &self.w
    }

    pub fn v(&self) -> &Matrix {
        &self.v
    }

    pub fn branches(&self) -> &[BranchPoly] {
        &self.branches
    }

    pub fn constants(&self) -> &[f64] {
        &self.constants
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn with_constants(&self, constants: Vec<f64>) -> Result<Self> {
        DecoupledModel::new(self.w.clone(), self.v.clone(), self.branches.clone(), constants)
    }

    /// Internal variables `z = V'p`.
    pub fn internal_variables(&self, p: &[f64]) -> Vec<f64> {
        (0..self.v.cols())
            .map(|i| p.iter().enumerate().map(|(j, x)| self.v[(j, i)] * x).sum())
            .collect()
    }

    /// Expands the model into the standard monomial basis. Each branch term
    /// `c_k (v_i'p)^k` is spread over exponent vectors by the multinomial
    /// theorem; evaluations agree with the decoupled form up to rounding.
    pub fn expand_to_monomials(&self) -> MonomialPolynomial {
        let m = self.input_dim();
        let n = self.output_dim();
        let mut acc: std::collections::BTreeMap<Vec<u32>, Vec<f64>> = std::collections::BTreeMap::new();
        // output constants plus every branch's constant coefficient
        let mut constant = self.constants.clone();
        for (i, branch) in self.branches.iter().enumerate() {
            let c0 = branch.coefficients()[0];
            if c0 != 0.0 {
                for (o, v) in constant.iter_mut().enumerate() {
                    *v += self.w[(o, i)] * c0;
                }
            }
        }
        if constant.iter().any(|c| *c != 0.0) {
            acc.insert(vec![0; m], constant);
        }
        for (i, branch) in self.branches.iter().enumerate() {
            for (k, &ck) in branch.coefficients().iter().enumerate().skip(1) {
                if ck == 0.0 {
                    continue;
                }
                for exps in compositions(k as u32, m) {
                    // multinomial coefficient k! / Π e_j!
                    let mut coef = factorial(k as u32);
                    for &e in &exps {
                        coef /= factorial(e);
                    }
                    let mut weight = ck * coef as f64;
                    for (j, &e) in exps.iter().enumerate() {
                        if e > 0 {
                            weight *= self.v[(j, i)].powi(e as i32);
                        }
                    }
                    if weight == 0.0 {
                        continue;
                    }
                    let entry = acc.entry(exps).or_insert_with(|| vec![0.0; n]);
                    for (o, slot) in entry.iter_mut().enumerate() {
                        *slot += self.w[(o, i)] * weight;
                    }
                }
            }
        }
        let terms = acc
            .into_iter()
            .map(|(exponents, coefficients)| Term { exponents, coefficients })
            .collect();
        MonomialPolynomial::new(m, n, terms).expect("expansion produces consistent terms")
    }
}

fn factorial(k: u32) -> u64 {
    (1..=k as u64).product::<u64>().max(1)
}

impl Model for DecoupledModel {
    fn input_dim(&self) -> usize {
        self.v.rows()
    }

    fn output_dim(&self) -> usize {
        self.w.rows()
    }

    fn evaluate(&self, p: &[f64]) -> Result<Vec<f64>> {
        check_input_dim(self.input_dim(), p)?;
        let z = self.internal_variables(p);
        let g: Vec<f64> = self.branches.iter().zip(&z).map(|(b, &zi)| b.eval(zi)).collect();
        let mut out = self.constants.clone();
        for o in 0..self.w.rows() {
            for (i, gi) in g.iter().enumerate() {
                out[o] += self.w[(o, i)] * gi;
            }
        }
        Ok(out)
    }

    /// `W diag(g_i'(z_i)) V'` by the chain rule.
    fn jacobian(&self, p: &[f64]) -> Result<Matrix> {
        check_input_dim(self.input_dim(), p)?;
        let z = self.internal_variables(p);
        let slopes: Vec<f64> = self.branches.iter().zip(&z).map(|(b, &zi)| b.deriv(zi)).collect();
        let n = self.output_dim();
        let m = self.input_dim();
        let mut jac = Matrix::zeros(n, m);
        for o in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for (i, slope) in slopes.iter().enumerate() {
                    s += self.w[(o, i)] * slope * self.v[(j, i)];
                }
                jac[(o, j)] = s;
            }
        }
        Ok(jac)
    }

    /// `r (m + n + d + 1)` for the factors and branch coefficients, plus n
    /// output constants when any are present.
    fn param_count(&self) -> usize {
        let r = self.branches.len();
        let d = self.branches.iter().map(|b| b.degree()).max().unwrap_or(0);
        let base = r * (self.input_dim() + self.output_dim() + d + 1);
        let has_constants = self.constants.iter().any(|c| *c != 0.0);
        base + if has_constants || r == 0 { self.output_dim() } else { 0 }
    }
}
