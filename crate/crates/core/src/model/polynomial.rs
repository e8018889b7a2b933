//! Multivariate polynomials in the standard monomial basis.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::{check_input_dim, Model};

/// One monomial: an exponent vector over the inputs and a coefficient per
/// output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub exponents: Vec<u32>,
    pub coefficients: Vec<f64>,
}

/// `f(p) = Σ_t coef_t * Π_j p_j^{e_tj}`, vector valued.
#[derive(Debug, Clone, PartialEq)]
pub struct MonomialPolynomial {
    m: usize,
    n: usize,
    terms: Vec<Term>,
}

impl MonomialPolynomial {
    pub fn new(m: usize, n: usize, terms: Vec<Term>) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::InvalidArgument("polynomial needs m, n >= 1".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &terms {
            if t.exponents.len() != m {
                return Err(Error::DimensionMismatch(format!(
                    "exponent vector length {} does not match m = {m}",
                    t.exponents.len()
                )));
            }
            if t.coefficients.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "coefficient vector length {} does not match n = {n}",
                    t.coefficients.len()
                )));
            }
            if t.coefficients.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFinite("polynomial coefficient".into()));
            }
            if !seen.insert(t.exponents.clone()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate exponent vector {:?}",
                    t.exponents
                )));
            }
        }
        Ok(MonomialPolynomial { m, n, terms })
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    fn monomial(&self, exponents: &[u32], p: &[f64]) -> f64 {
        exponents
            .iter()
            .zip(p)
            .map(|(&e, &x)| if e == 0 { 1.0 } else { x.powi(e as i32) })
            .product()
    }
}

impl Model for MonomialPolynomial {
    fn input_dim(&self) -> usize {
        self.m
    }

    fn output_dim(&self) -> usize {
        self.n
    }

    fn evaluate(&self, p: &[f64]) -> Result<Vec<f64>> {
        check_input_dim(self.m, p)?;
        let mut out = vec![0.0; self.n];
        for t in &self.terms {
            let mon = self.monomial(&t.exponents, p);
            for (o, c) in out.iter_mut().zip(&t.coefficients) {
                *o += c * mon;
            }
        }
        Ok(out)
    }

    fn jacobian(&self, p: &[f64]) -> Result<Matrix> {
        check_input_dim(self.m, p)?;
        let mut jac = Matrix::zeros(self.n, self.m);
        for t in &self.terms {
            for j in 0..self.m {
                let e = t.exponents[j];
                if e == 0 {
                    continue;
                }
                // d/dp_j of the monomial: e * p_j^(e-1) * rest
                let mut d = e as f64;
                for (jj, (&ee, &x)) in t.exponents.iter().zip(p).enumerate() {
                    let pow = if jj == j { ee - 1 } else { ee };
                    if pow > 0 {
                        d *= x.powi(pow as i32);
                    }
                }
                for o in 0..self.n {
                    jac[(o, j)] += t.coefficients[o] * d;
                }
            }
        }
        Ok(jac)
    }

    fn param_count(&self) -> usize {
        self.terms.len() * self.n
    }
}
