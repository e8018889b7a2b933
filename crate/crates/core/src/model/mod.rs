//! Evaluable function representations with analytic Jacobians.
//!
//! Three families are supported: multivariate polynomials in the monomial
//! basis, feed-forward sigmoid networks with a linear output layer, and the
//! decoupled form `W g(V'p) + c` itself. All three expose evaluation, the
//! analytic Jacobian and a parameter count through the [`Model`] trait.

mod decoupled;
mod io;
mod mlp;
mod polynomial;

pub use decoupled::{BranchPoly, DecoupledModel};
pub use io::{load_model, read_model, save_model, write_model, AnyModel};
pub use mlp::MlpNetwork;
pub use polynomial::{MonomialPolynomial, Term};

use crate::error::{Error, Result};
use crate::rng::{normal, seeded};
use crate::tensor::Matrix;

/// An evaluable function `R^m -> R^n` with an analytic Jacobian.
pub trait Model {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    /// `f(p)`.
    fn evaluate(&self, p: &[f64]) -> Result<Vec<f64>>;

    /// The `n x m` Jacobian at `p`.
    fn jacobian(&self, p: &[f64]) -> Result<Matrix>;

    /// Number of free parameters of the representation.
    fn param_count(&self) -> usize;
}

pub(crate) fn check_input_dim(expected: usize, p: &[f64]) -> Result<()> {
    if p.len() != expected {
        return Err(Error::DimensionMismatch(format!(
            "model expects {} inputs, got {}",
            expected,
            p.len()
        )));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("model input".into()));
    }
    Ok(())
}

/// Random polynomial in the monomial basis: one coefficient vector drawn
/// from N(0,1) for every monomial of total degree 1..=d.
pub fn random_polynomial(seed: u64, m: usize, n: usize, d: u32) -> Result<MonomialPolynomial> {
    if m == 0 || n == 0 || d == 0 {
        return Err(Error::InvalidArgument("random polynomial needs m, n, d >= 1".into()));
    }
    let mut rng = seeded(seed);
    let mut terms = Vec::new();
    for degree in 1..=d {
        for exps in compositions(degree, m) {
            let coefficients = (0..n).map(|_| normal(&mut rng)).collect();
            terms.push(Term { exponents: exps, coefficients });
        }
    }
    MonomialPolynomial::new(m, n, terms)
}

/// Random feed-forward sigmoid network with linear output layer; all
/// weights and biases drawn from N(0,1).
pub fn random_mlp(seed: u64, dims: &[usize]) -> Result<MlpNetwork> {
    if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument("mlp needs at least input and output dims, all >= 1".into()));
    }
    let mut rng = seeded(seed);
    let mut layers = Vec::new();
    for l in 1..dims.len() {
        let w = Matrix::from_fn(dims[l], dims[l - 1], |_, _| normal(&mut rng));
        let b = (0..dims[l]).map(|_| normal(&mut rng)).collect();
        layers.push((w, b));
    }
    MlpNetwork::new(layers)
}

/// Random decoupled model: W, V and all branch coefficients (constant
/// through degree d) drawn from N(0,1); output constants left at zero.
pub fn random_decoupled(seed: u64, m: usize, n: usize, r: usize, d: usize) -> Result<DecoupledModel> {
    if m == 0 || n == 0 || r == 0 || d == 0 {
        return Err(Error::InvalidArgument("random decoupled model needs m, n, r, d >= 1".into()));
    }
    let mut rng = seeded(seed);
    let w = Matrix::from_fn(n, r, |_, _| normal(&mut rng));
    let v = Matrix::from_fn(m, r, |_, _| normal(&mut rng));
    let branches = (0..r)
        .map(|_| BranchPoly::new((0..=d).map(|_| normal(&mut rng)).collect()))
        .collect();
    DecoupledModel::new(w, v, branches, vec![0.0; n])
}

/// All exponent vectors over `m` variables with total degree `degree`.
pub(crate) fn compositions(degree: u32, m: usize) -> Vec<Vec<u32>> {
    fn rec(remaining: u32, slots: usize, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if slots == 1 {
            let mut v = prefix.clone();
            v.push(remaining);
            out.push(v);
            return;
        }
        for take in 0..=remaining {
            prefix.push(take);
            rec(remaining - take, slots - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(degree, m, &mut Vec::new(), &mut out);
    out
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::uniform;

    #[test]
    fn compositions_count_matches_stars_and_bars() {
        // C(d + m - 1, m - 1) exponent vectors of total degree d
        assert_eq!(compositions(5, 2).len(), 6);
        assert_eq!(compositions(3, 3).len(), 10);
        for exps in compositions(4, 3) {
            assert_eq!(exps.iter().sum::<u32>(), 4);
        }
    }

    #[test]
    fn random_generation_is_reproducible() {
        let a = random_polynomial(5, 3, 2, 4).unwrap();
        let b = random_polynomial(5, 3, 2, 4).unwrap();
        let p = vec![0.3, -0.2, 0.9];
        assert_eq!(a.evaluate(&p).unwrap(), b.evaluate(&p).unwrap());

        let ma = random_mlp(9, &[2, 5, 2]).unwrap();
        let mb = random_mlp(9, &[2, 5, 2]).unwrap();
        assert_eq!(ma.evaluate(&[0.1, 0.2]).unwrap(), mb.evaluate(&[0.1, 0.2]).unwrap());

        let da = random_decoupled(11, 4, 2, 3, 5).unwrap();
        let db = random_decoupled(11, 4, 2, 3, 5).unwrap();
        let q = vec![0.5, -0.1, 0.0, 1.2];
        assert_eq!(da.evaluate(&q).unwrap(), db.evaluate(&q).unwrap());
    }

    #[test]
    fn random_mlp_param_count_matches_case_study_network() {
        let mlp = random_mlp(1, &[2, 15, 10, 10, 5, 2]).unwrap();
        assert_eq!(mlp.param_count(), 382);
    }

    #[test]
    fn random_decoupled_expands_to_full_degree() {
        let d = random_decoupled(3, 5, 1, 3, 5).unwrap();
        let poly = d.expand_to_monomials();
        let max_deg = poly
            .terms()
            .iter()
            .filter(|t| t.coefficients.iter().any(|c| c.abs() > 1e-12))
            .map(|t| t.exponents.iter().sum::<u32>())
            .max()
            .unwrap();
        assert_eq!(max_deg, 5);
    }

    #[test]
    fn jacobians_match_finite_differences_across_families() {
        let mut rng = seeded(61);
        let mut pts = Vec::new();
        for _ in 0..20 {
            pts.push((0..3).map(|_| uniform(&mut rng, -1.0, 1.0)).collect::<Vec<f64>>());
        }
        let poly = random_polynomial(21, 3, 2, 3).unwrap();
        testutil::assert_jacobian_matches_fd(&poly, &pts);

        let mlp = random_mlp(22, &[3, 6, 4, 2]).unwrap();
        testutil::assert_jacobian_matches_fd(&mlp, &pts);

        let dec = random_decoupled(23, 3, 2, 3, 4).unwrap();
        testutil::assert_jacobian_matches_fd(&dec, &pts);
    }
}
