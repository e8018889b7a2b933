//! Operating points and the Jacobian tensor.
//!
//! The decomposition consumes the `n x m x N` stack of Jacobian evaluations
//! of a model at N operating points. Points are an explicit, first-class
//! input everywhere downstream — branch axes are recomputed from them every
//! sweep and error metrics are defined on them — so they are sampled (or
//! loaded) once and never regenerated internally.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::jsonfmt::fmt_f64;
use crate::model::Model;
use crate::rng::{seeded, uniform};
use crate::tensor::{Matrix, Tensor3};

/// Where a set of operating points came from.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub enum Provenance {
    UniformBox { seed: u64, lo: f64, hi: f64 },
    File { path: String },
    InMemory,
}

/// N operating points in R^m, one per row.
#[derive(Debug, Clone)]
pub struct OperatingPoints {
    points: Matrix,
    provenance: Provenance,
}

impl OperatingPoints {
    pub fn from_matrix(points: Matrix, provenance: Provenance) -> Result<Self> {
        if points.rows() < 3 {
            return Err(Error::InvalidArgument(format!(
                "need at least 3 operating points, got {}",
                points.rows()
            )));
        }
        if !points.is_finite() {
            return Err(Error::NonFinite("operating points".into()));
        }
        Ok(OperatingPoints { points, provenance })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn point(&self, k: usize) -> &[f64] {
        self.points.row(k)
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }
}

/// Samples N points i.i.d. uniform on [lo, hi)^m, reproducibly.
pub fn sample_uniform(seed: u64, n_points: usize, m: usize, lo: f64, hi: f64) -> Result<OperatingPoints> {
    if lo >= hi {
        return Err(Error::InvalidArgument(format!("need lo < hi, got [{lo}, {hi})")));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("points need at least one coordinate".into()));
    }
    let mut rng = seeded(seed);
    let points = Matrix::from_fn(n_points, m, |_, _| uniform(&mut rng, lo, hi));
    OperatingPoints::from_matrix(points, Provenance::UniformBox { seed, lo, hi })
}

/// Evaluates the model Jacobian at every point and stacks the slices.
pub fn build_tensor(model: &dyn Model, pts: &OperatingPoints) -> Result<Tensor3> {
    if model.input_dim() != pts.dim() {
        return Err(Error::DimensionMismatch(format!(
            "model takes {} inputs but points have {} coordinates",
            model.input_dim(),
            pts.dim()
        )));
    }
    let mut t = Tensor3::zeros(model.output_dim(), model.input_dim(), pts.len());
    for k in 0..pts.len() {
        let jac = model.jacobian(pts.point(k))?;
        if !jac.is_finite() {
            return Err(Error::NonFinite(format!("jacobian at operating point {k}")));
        }
        t.set_slice(k, &jac);
    }
    Ok(t)
}

/// Parses a points CSV: one point per row, m comma-separated decimal
/// columns, optionally preceded by a single header row.
pub fn parse_points_csv(text: &str) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(values) => rows.push(values),
            Err(e) => {
                // a single unparsable first row is treated as a header
                if lineno == 0 && rows.is_empty() {
                    continue;
                }
                return Err(Error::Parse(format!("points file line {}: {e}", lineno + 1)));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Parse("points file has no data rows".into()));
    }
    Matrix::from_rows(&rows)
}

pub fn load_points_csv(path: &Path) -> Result<OperatingPoints> {
    let text = std::fs::read_to_string(path)?;
    let points = parse_points_csv(&text)?;
    OperatingPoints::from_matrix(points, Provenance::File { path: path.display().to_string() })
}

/// Writes a tensor dump: first line `n,m,N`, then the mode-1 unfolding as
/// CSV rows.
pub fn write_tensor_csv(t: &Tensor3, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "{},{},{}", t.n_out(), t.n_in(), t.n_points())?;
    let unf = t.unfold(1)?;
    for i in 0..unf.rows() {
        let row: Vec<String> = unf.row(i).iter().map(|v| fmt_f64(*v)).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_decoupled, MonomialPolynomial, Term};
    use crate::tensor::reconstruct;

    #[test]
    fn sampling_is_reproducible_and_in_range() {
        let a = sample_uniform(7, 50, 3, -1.5, 1.5).unwrap();
        let b = sample_uniform(7, 50, 3, -1.5, 1.5).unwrap();
        assert_eq!(a.matrix(), b.matrix());
        assert!(a.matrix().data().iter().all(|v| (-1.5..1.5).contains(v)));
    }

    #[test]
    fn sample_mean_near_midpoint() {
        let pts = sample_uniform(11, 10_000, 2, -1.5, 1.5).unwrap();
        let mean: f64 = pts.matrix().data().iter().sum::<f64>() / (10_000.0 * 2.0);
        assert!(mean.abs() < 0.05 * 3.0, "mean {mean}");
    }

    #[test]
    fn linear_model_gives_constant_slices() {
        // f(p) = A p with A = [[2, -1], [0.5, 4]]
        let a = [[2.0, -1.0], [0.5, 4.0]];
        let terms = (0..2)
            .map(|j| Term {
                exponents: (0..2).map(|jj| (jj == j) as u32).collect(),
                coefficients: (0..2).map(|o| a[o][j]).collect(),
            })
            .collect();
        let model = MonomialPolynomial::new(2, 2, terms).unwrap();
        let pts = sample_uniform(3, 20, 2, -1.0, 1.0).unwrap();
        let t = build_tensor(&model, &pts).unwrap();
        for k in 0..20 {
            for o in 0..2 {
                for l in 0..2 {
                    assert_eq!(t[(o, l, k)], a[o][l]);
                }
            }
        }
    }

    #[test]
    fn decoupled_tensor_matches_rank_one_sum() {
        // chain rule: tensor of a decoupled model equals the rank-r
        // reconstruction from (W, V, G') with G'[k,i] = g_i'(z_i(k))
        let model = random_decoupled(5, 3, 2, 4, 3).unwrap();
        let pts = sample_uniform(6, 40, 3, -1.5, 1.5).unwrap();
        let t = build_tensor(&model, &pts).unwrap();
        let gp = Matrix::from_fn(40, 4, |k, i| {
            let z = model.internal_variables(pts.point(k));
            model.branches()[i].deriv(z[i])
        });
        let expect = reconstruct(model.w(), model.v(), &gp).unwrap();
        let rel = t.sub(&expect).frobenius() / expect.frobenius();
        assert!(rel < 1e-12, "rel {rel}");
    }

    #[test]
    fn csv_parsing_handles_header_and_errors() {
        let m = parse_points_csv("x,y\n1.0,2.0\n3.5,-0.25\n").unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 2));
        assert_eq!(m[(1, 1)], -0.25);

        let no_header = parse_points_csv("1,2\n3,4\n5,6\n").unwrap();
        assert_eq!(no_header.rows(), 3);

        assert!(parse_points_csv("x,y\n1.0,oops\n").is_err());
        assert!(parse_points_csv("").is_err());
        // ragged rows
        assert!(parse_points_csv("1,2\n3\n").is_err());
    }

    #[test]
    fn tensor_dump_has_header_and_unfolding() {
        let model = random_decoupled(5, 2, 2, 2, 2).unwrap();
        let pts = sample_uniform(6, 5, 2, -1.0, 1.0).unwrap();
        let t = build_tensor(&model, &pts).unwrap();
        let mut buf = Vec::new();
        write_tensor_csv(&t, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "2,2,5");
        assert_eq!(lines.count(), 2);
    }
}
