//! Model file format: a tagged JSON object per model family.
//!
//! ```text
//! {"type":"polynomial","m":..,"n":..,"terms":[{"exp":[..],"coef":[..]},..]}
//! {"type":"mlp","layers":[{"W":[[..]],"b":[..]},..]}
//! {"type":"decoupled","W":[[..]],"V":[[..]],"branches":[{"coeffs":[..]},..],"c":[..]}
//! ```
//!
//! Floats are written with 17 significant digits so files round-trip
//! bit-exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonfmt::to_json_string;
use crate::tensor::Matrix;

use super::{BranchPoly, DecoupledModel, MlpNetwork, Model, MonomialPolynomial, Term};

/// Any of the three model families, as loaded from a model file.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Polynomial(MonomialPolynomial),
    Mlp(MlpNetwork),
    Decoupled(DecoupledModel),
}

impl AnyModel {
    pub fn as_model(&self) -> &dyn Model {
        match self {
            AnyModel::Polynomial(m) => m,
            AnyModel::Mlp(m) => m,
            AnyModel::Decoupled(m) => m,
        }
    }
}

impl Model for AnyModel {
    fn input_dim(&self) -> usize {
        self.as_model().input_dim()
    }
    fn output_dim(&self) -> usize {
        self.as_model().output_dim()
    }
    fn evaluate(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.as_model().evaluate(p)
    }
    fn jacobian(&self, p: &[f64]) -> Result<Matrix> {
        self.as_model().jacobian(p)
    }
    fn param_count(&self) -> usize {
        self.as_model().param_count()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum ModelFile {
    Polynomial {
        m: usize,
        n: usize,
        terms: Vec<TermFile>,
    },
    Mlp {
        layers: Vec<LayerFile>,
    },
    Decoupled {
        #[serde(rename = "W")]
        w: Vec<Vec<f64>>,
        #[serde(rename = "V")]
        v: Vec<Vec<f64>>,
        branches: Vec<BranchFile>,
        c: Vec<f64>,
    },
}

#[derive(Serialize, Deserialize)]
struct TermFile {
    exp: Vec<u32>,
    coef: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BranchFile {
    coeffs: Vec<f64>,
}

fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn model_to_file(model: &AnyModel) -> ModelFile {
    match model {
        AnyModel::Polynomial(p) => ModelFile::Polynomial {
            m: p.input_dim(),
            n: p.output_dim(),
            terms: p
                .terms()
                .iter()
                .map(|t| TermFile { exp: t.exponents.clone(), coef: t.coefficients.clone() })
                .collect(),
        },
        AnyModel::Mlp(net) => ModelFile::Mlp {
            layers: net
                .layers()
                .iter()
                .map(|(w, b)| LayerFile { w: matrix_to_rows(w), b: b.clone() })
                .collect(),
        },
        AnyModel::Decoupled(d) => ModelFile::Decoupled {
            w: matrix_to_rows(d.w()),
            v: matrix_to_rows(d.v()),
            branches: d
                .branches()
                .iter()
                .map(|b| BranchFile { coeffs: b.coefficients().to_vec() })
                .collect(),
            c: d.constants().to_vec(),
        },
    }
}

fn file_to_model(file: ModelFile) -> Result<AnyModel> {
    match file {
        ModelFile::Polynomial { m, n, terms } => {
            let terms = terms
                .into_iter()
                .map(|t| Term { exponents: t.exp, coefficients: t.coef })
                .collect();
            Ok(AnyModel::Polynomial(MonomialPolynomial::new(m, n, terms)?))
        }
        ModelFile::Mlp { layers } => {
            let layers = layers
                .into_iter()
                .map(|l| Ok((Matrix::from_rows(&l.w)?, l.b)))
                .collect::<Result<Vec<_>>>()?;
            Ok(AnyModel::Mlp(MlpNetwork::new(layers)?))
        }
        ModelFile::Decoupled { w, v, branches, c } => {
            let branches = branches.into_iter().map(|b| BranchPoly::new(b.coeffs)).collect();
            Ok(AnyModel::Decoupled(DecoupledModel::new(
                Matrix::from_rows(&w)?,
                Matrix::from_rows(&v)?,
                branches,
                c,
            )?))
        }
    }
}

/// Serializes a model to the text format.
pub fn write_model(model: &AnyModel) -> Result<String> {
    to_json_string(&model_to_file(model))
}

/// Parses a model from the text format.
pub fn read_model(text: &str) -> Result<AnyModel> {
    let file: ModelFile =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("model file: {e}")))?;
    file_to_model(file)
}

pub fn save_model(model: &AnyModel, path: &Path) -> Result<()> {
    std::fs::write(path, write_model(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<AnyModel> {
    let text = std::fs::read_to_string(path)?;
    read_model(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_decoupled, random_mlp, random_polynomial};
    use crate::rng::{seeded, uniform};

    fn assert_same_evaluations(a: &AnyModel, b: &AnyModel, m: usize) {
        let mut rng = seeded(4);
        for _ in 0..20 {
            let p: Vec<f64> = (0..m).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
            assert_eq!(a.evaluate(&p).unwrap(), b.evaluate(&p).unwrap());
        }
    }

    #[test]
    fn round_trips_preserve_models_exactly() {
        let models = vec![
            (AnyModel::Polynomial(random_polynomial(1, 3, 2, 3).unwrap()), 3),
            (AnyModel::Mlp(random_mlp(2, &[2, 5, 3, 1]).unwrap()), 2),
            (AnyModel::Decoupled(random_decoupled(3, 4, 2, 3, 5).unwrap()), 4),
        ];
        for (model, m) in models {
            let text = write_model(&model).unwrap();
            let back = read_model(&text).unwrap();
            assert_same_evaluations(&model, &back, m);
            // emission is deterministic
            assert_eq!(text, write_model(&back).unwrap());
        }
    }

    #[test]
    fn tagged_type_is_spelled_out() {
        let model = AnyModel::Polynomial(random_polynomial(1, 2, 1, 2).unwrap());
        let text = write_model(&model).unwrap();
        assert!(text.contains("\"type\": \"polynomial\""));
        assert!(text.contains("\"exp\""));
        assert!(text.contains("\"coef\""));
    }

    #[test]
    fn malformed_input_is_a_parse_error() {
        assert!(read_model("{\"type\":\"nope\"}").is_err());
        assert!(read_model("not json").is_err());
    }
}
