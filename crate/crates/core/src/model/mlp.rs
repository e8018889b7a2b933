//! Feed-forward sigmoid networks with a linear output layer.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::{check_input_dim, Model};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Layers are (weight matrix, bias); every hidden layer applies the logistic
/// sigmoid element-wise, the final layer is affine.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    layers: Vec<(Matrix, Vec<f64>)>,
}

impl MlpNetwork {
    pub fn new(layers: Vec<(Matrix, Vec<f64>)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for (l, (w, b)) in layers.iter().enumerate() {
            if w.rows() != b.len() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {l}: weight rows {} vs bias length {}",
                    w.rows(),
                    b.len()
                )));
            }
            if l > 0 && w.cols() != layers[l - 1].0.rows() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {l}: expects {} inputs but previous layer emits {}",
                    w.cols(),
                    layers[l - 1].0.rows()
                )));
            }
        }
        Ok(MlpNetwork { layers })
    }

    pub fn layers(&self) -> &[(Matrix, Vec<f64>)] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].0.cols()];
        dims.extend(self.layers.iter().map(|(w, _)| w.rows()));
        dims
    }
}

impl Model for MlpNetwork {
    fn input_dim(&self) -> usize {
        self.layers[0].0.cols()
    }

    fn output_dim(&self) -> usize {
        self.layers.last().unwrap().0.rows()
    }

    fn evaluate(&self, p: &[f64]) -> Result<Vec<f64>> {
        check_input_dim(self.input_dim(), p)?;
        let last = self.layers.len() - 1;
        let mut x = p.to_vec();
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let mut pre = w.matvec(&x);
            for (v, bias) in pre.iter_mut().zip(b) {
                *v += bias;
            }
            x = if l == last { pre } else { pre.into_iter().map(sigmoid).collect() };
        }
        Ok(x)
    }

    fn jacobian(&self, p: &[f64]) -> Result<Matrix> {
        check_input_dim(self.input_dim(), p)?;
        let last = self.layers.len() - 1;
        let mut x = p.to_vec();
        // forward accumulation: jac maps input perturbations to layer output
        let mut jac = Matrix::identity(self.input_dim());
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let mut pre = w.matvec(&x);
            for (v, bias) in pre.iter_mut().zip(b) {
                *v += bias;
            }
            let mut layer_jac = w.matmul(&jac);
            if l == last {
                x = pre;
            } else {
                let act: Vec<f64> = pre.iter().map(|&v| sigmoid(v)).collect();
                for (i, a) in act.iter().enumerate() {
                    let slope = a * (1.0 - a);
                    for j in 0..layer_jac.cols() {
                        layer_jac[(i, j)] *= slope;
                    }
                }
                x = act;
            }
            jac = layer_jac;
        }
        Ok(jac)
    }

    fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|(w, b)| w.rows() * w.cols() + b.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_return_final_bias() {
        let layers = vec![
            (Matrix::zeros(3, 2), vec![0.0; 3]),
            (Matrix::zeros(2, 3), vec![1.5, -0.5]),
        ];
        let net = MlpNetwork::new(layers).unwrap();
        assert_eq!(net.evaluate(&[0.7, -0.3]).unwrap(), vec![1.5, -0.5]);
    }

    #[test]
    fn param_count_sums_weights_and_biases() {
        let layers = vec![
            (Matrix::zeros(4, 2), vec![0.0; 4]),
            (Matrix::zeros(1, 4), vec![0.0]),
        ];
        let net = MlpNetwork::new(layers).unwrap();
        assert_eq!(net.param_count(), 8 + 4 + 4 + 1);
    }

    #[test]
    fn mismatched_layers_rejected() {
        let layers = vec![
            (Matrix::zeros(3, 2), vec![0.0; 3]),
            (Matrix::zeros(2, 4), vec![0.0; 2]),
        ];
        assert!(MlpNetwork::new(layers).is_err());
    }
}
