//! Built-in case studies: the cubic toy problem, a polynomial-reduction
//! example and a sigmoid network reduction, each run end-to-end and
//! summarized as an error table over the branch count.

use serde::Serialize;

use crate::error::Result;
use crate::filters::FilterKind;
use crate::fit::{estimate_constants, fit_branches, mean_error, relative_error};
use crate::ftd::{ftd_implicit, FtdOptions};
use crate::jacobian::{build_tensor, sample_uniform, OperatingPoints};
use crate::lm::LmOptions;
use crate::model::{
    random_decoupled, random_mlp, BranchPoly, DecoupledModel, MlpNetwork, Model,
    MonomialPolynomial, Term,
};
use crate::tensor::Matrix;

/// Two-input, two-output cubic polynomial in the monomial basis whose
/// exact three-branch decoupled form is [`toy_decoupled`]. The workhorse
/// example throughout the test suite.
pub fn toy_coupled() -> MonomialPolynomial {
    let monomials: [(u32, u32); 7] = [(2, 0), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2), (0, 3)];
    let coefficients: [[f64; 7]; 2] = [
        [5.25, 0.0, -20.5, 29.875, 42.75, 31.5, -2.0],
        [20.75, 41.0, 85.0, 109.375, 120.75, 88.5, 93.0],
    ];
    let terms = monomials
        .iter()
        .enumerate()
        .map(|(t, &(e1, e2))| Term {
            exponents: vec![e1, e2],
            coefficients: vec![coefficients[0][t], coefficients[1][t]],
        })
        .collect();
    MonomialPolynomial::new(2, 2, terms).expect("toy polynomial is well formed")
}

/// The exact decoupled form of [`toy_coupled`]: three cubic branches.
pub fn toy_decoupled() -> DecoupledModel {
    let w = Matrix::from_rows(&[vec![3.0, 0.5, -1.0], vec![1.0, 2.0, 3.0]]).unwrap();
    // V^T rows are (1,2), (3,1), (0.5,3)
    let v = Matrix::from_rows(&[vec![1.0, 3.0, 0.5], vec![2.0, 1.0, 3.0]]).unwrap();
    let branches = vec![
        BranchPoly::new(vec![0.0, 0.0, 0.5, 1.0]), // z^3 + 0.5 z^2
        BranchPoly::new(vec![0.0, 0.0, 1.0, 2.0]), // 2 z^3 + z^2
        BranchPoly::new(vec![0.0, 0.0, 3.0, 1.0]), // z^3 + 3 z^2
    ];
    DecoupledModel::new(w, v, branches, vec![0.0, 0.0]).expect("toy decoupled form is well formed")
}

/// One row of a case-study table.
#[derive(Debug, Clone, Serialize)]
pub struct CaseRow {
    pub r: usize,
    pub errors_percent: Vec<Option<f64>>,
    pub mean_error_percent: Option<f64>,
    pub tensor_residual: f64,
    pub smoothness: f64,
    /// Parameter ratio coupled/decoupled using this crate's counting.
    pub param_ratio: Option<f64>,
    /// Parameter ratio using the source convention quoted for the study.
    pub param_ratio_quoted: Option<f64>,
    pub kinds: Vec<FilterKind>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseStudyReport {
    pub name: String,
    pub seed: u64,
    pub n_points: usize,
    pub degree: usize,
    pub rows: Vec<CaseRow>,
    /// Parameter count of the model being decoupled.
    pub coupled_params: usize,
}

fn implicit_row(
    model: &dyn Model,
    pts: &OperatingPoints,
    r: usize,
    degree: usize,
    kinds: Option<Vec<FilterKind>>,
    seed: u64,
    max_sweeps: usize,
    restarts: usize,
    lm_iters: usize,
) -> Result<CaseRow> {
    let t = build_tensor(model, pts)?;
    let opts = FtdOptions {
        r,
        kinds,
        seed,
        restarts,
        max_sweeps,
        lm: LmOptions { max_iters: lm_iters, ..Default::default() },
        ..Default::default()
    };
    let res = ftd_implicit(&t, pts, &opts)?;
    let (fitted, _) = fit_branches(&res, degree)?;
    let fitted = estimate_constants(&fitted, model, pts)?;
    let errors = relative_error(model, &fitted, pts)?;
    let mean = mean_error(&errors);
    Ok(CaseRow {
        r,
        errors_percent: errors,
        mean_error_percent: mean,
        tensor_residual: res.reconstruction_residual(&t, pts)?,
        smoothness: res.final_smoothness(),
        param_ratio: None,
        param_ratio_quoted: None,
        kinds: res.kinds.clone(),
    })
}

/// Decouples the toy polynomial with the implicit method for r = 1..=4,
/// N = 100 points uniform on (-1.5, 1.5), two filters, cubic branch fits.
pub fn run_toy(seed: u64) -> Result<CaseStudyReport> {
    let model = toy_coupled();
    let pts = sample_uniform(seed, 100, 2, -1.5, 1.5)?;
    let kinds = Some(vec![FilterKind::Left3, FilterKind::Right3]);
    let mut rows = Vec::new();
    for r in 1..=4 {
        rows.push(implicit_row(&model, &pts, r, 3, kinds.clone(), seed, 200, 5, 40)?);
    }
    Ok(CaseStudyReport {
        name: "toy".into(),
        seed,
        n_points: 100,
        degree: 3,
        coupled_params: model.param_count(),
        rows,
    })
}

/// Decouples a random three-branch quintic (m=5 inputs, one output) for
/// r = 1..=4 with the implicit method, N = 200 points, degree-5 fits.
/// Parameter ratios report both the standard monomial count (251 for
/// degrees 1..5 in five variables) and the quoted 456-parameter
/// convention of the original example.
pub fn run_polyreduction(seed: u64) -> Result<CaseStudyReport> {
    let target = random_decoupled(seed, 5, 1, 3, 5)?;
    let pts = sample_uniform(seed ^ 0x706f6c79, 200, 5, -1.5, 1.5)?;
    let kinds = Some(vec![FilterKind::Left3, FilterKind::Right3]);
    let standard_count = target.expand_to_monomials().param_count();
    let mut rows = Vec::new();
    for r in 1..=4 {
        let mut row = implicit_row(&target, &pts, r, 5, kinds.clone(), seed, 200, 5, 40)?;
        let decoupled_params = r * (5 + 1 + 5 + 1);
        row.param_ratio = Some(standard_count as f64 / decoupled_params as f64);
        row.param_ratio_quoted = Some(456.0 / decoupled_params as f64);
        rows.push(row);
    }
    Ok(CaseStudyReport {
        name: "polyreduction".into(),
        seed,
        n_points: 200,
        degree: 5,
        coupled_params: standard_count,
        rows,
    })
}

/// MLP case-study dimensions: 382 parameters in total.
pub const MLP_DIMS: [usize; 6] = [2, 15, 10, 10, 5, 2];
const MLP_POINTS: usize = 150;
const MLP_DEGREE: usize = 7;

/// Builds the case-study network.
pub fn mlp_model(seed: u64) -> Result<MlpNetwork> {
    random_mlp(seed, &MLP_DIMS)
}

/// Reduces a random sigmoid network (dims 2-15-10-10-5-2) to decoupled
/// form for r = 1..=10 with the implicit method, automatic filter
/// escalation, degree-7 fits and constant estimation. Budgets are tighter
/// than for the small studies: the sample solves grow with (r N)^3.
pub fn run_mlp(seed: u64) -> Result<CaseStudyReport> {
    let model = mlp_model(seed)?;
    let pts = sample_uniform(seed ^ 0x6d6c70, MLP_POINTS, 2, -1.5, 1.5)?;
    let mut rows = Vec::new();
    for r in 1..=10 {
        let mut row = implicit_row(&model, &pts, r, MLP_DEGREE, None, seed, 50, 3, 15)?;
        let decoupled_params = r * (2 + 2 + MLP_DEGREE + 1) + 2;
        row.param_ratio = Some(model.param_count() as f64 / decoupled_params as f64);
        row.param_ratio_quoted = row.param_ratio;
        rows.push(row);
    }
    Ok(CaseStudyReport {
        name: "mlp".into(),
        seed,
        n_points: MLP_POINTS,
        degree: MLP_DEGREE,
        coupled_params: model.param_count(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, uniform};

    #[test]
    fn toy_forms_evaluate_identically() {
        let coupled = toy_coupled();
        let decoupled = toy_decoupled();
        assert_eq!(coupled.evaluate(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let mut rng = seeded(3);
        for _ in 0..50 {
            let p = [uniform(&mut rng, -1.5, 1.5), uniform(&mut rng, -1.5, 1.5)];
            let a = coupled.evaluate(&p).unwrap();
            let b = decoupled.evaluate(&p).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()), "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn toy_expansion_reproduces_published_coefficients() {
        let expanded = toy_decoupled().expand_to_monomials();
        let find = |e1: u32, e2: u32| -> Vec<f64> {
            expanded
                .terms()
                .iter()
                .find(|t| t.exponents == vec![e1, e2])
                .map(|t| t.coefficients.clone())
                .unwrap_or_else(|| vec![0.0, 0.0])
        };
        // the p1^3 coefficient is 3*1 + 0.5*2*27 - 1*0.125 = 29.875
        let p1_cubed = find(3, 0);
        assert!((p1_cubed[0] - 29.875).abs() < 1e-12, "{p1_cubed:?}");
        assert!((p1_cubed[1] - 109.375).abs() < 1e-12);
        let cross = find(1, 1);
        assert!(cross[0].abs() < 1e-12);
        assert!((cross[1] - 41.0).abs() < 1e-12);
    }

    #[test]
    fn toy_jacobian_carries_the_cubic_coefficient() {
        // d f1 / d p1 along p2 = 0 is 2*5.25*p1 + 3*29.875*p1^2
        let coupled = toy_coupled();
        let jac = coupled.jacobian(&[1.0, 0.0]).unwrap();
        let expect = 2.0 * 5.25 + 3.0 * 29.875;
        assert!((jac[(0, 0)] - expect).abs() < 1e-12);
    }

    #[test]
    fn toy_tensors_from_both_forms_agree() {
        let pts = sample_uniform(9, 100, 2, -1.5, 1.5).unwrap();
        let tc = build_tensor(&toy_coupled(), &pts).unwrap();
        let td = build_tensor(&toy_decoupled(), &pts).unwrap();
        assert_eq!((tc.n_out(), tc.n_in(), tc.n_points()), (2, 2, 100));
        let rel = tc.sub(&td).frobenius() / td.frobenius();
        assert!(rel < 1e-9, "rel {rel}");
    }
}
