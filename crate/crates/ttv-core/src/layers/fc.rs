use crate::error::{Error, Result};
use crate::layers::{Backward, Layer, Mode};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Fully-connected layer: `out = input * weight + bias`.
pub struct FCLayer {
    weight: Tensor, // [in, out]
    bias: Tensor,   // [out]
    cache_input: Option<Tensor>,
}

impl FCLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || weight.shape()[1] != bias.shape()[0] {
            return Err(Error::shape_mismatch("fc new", weight.shape(), bias.shape()));
        }
        Ok(FCLayer {
            weight,
            bias,
            cache_input: None,
        })
    }

    /// Glorot-style init: weight std sqrt(2 / (in + out)), zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut RngState) -> Self {
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        FCLayer {
            weight: rng.normal_tensor(&[in_dim, out_dim], std),
            bias: Tensor::zeros(&[out_dim]),
            cache_input: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

/// out[b, j] = sum_i input[b, i] * weight[i, j] + bias[j]
pub(crate) fn fc_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if input.rank() != 2 || input.shape()[1] != weight.shape()[0] {
        return Err(Error::shape_mismatch(
            "fc forward",
            input.shape(),
            weight.shape(),
        ));
    }
    let mut out = input.matmul(weight)?;
    let out_dim = weight.shape()[1];
    for row in out.data_mut().chunks_mut(out_dim) {
        for (o, b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

impl Layer for FCLayer {
    fn kind(&self) -> &'static str {
        "fc"
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let out = fc_forward(input, &self.weight, &self.bias)?;
        self.cache_input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, out_grad: &Tensor) -> Result<Backward> {
        let input = self
            .cache_input
            .as_ref()
            .ok_or_else(|| Error::Validation("fc backward before forward".into()))?;
        let d_weight = input.transposed()?.matmul(out_grad)?;
        let out_dim = self.bias.shape()[0];
        let mut d_bias = Tensor::zeros(&[out_dim]);
        for row in out_grad.data().chunks(out_dim) {
            for (db, g) in d_bias.data_mut().iter_mut().zip(row) {
                *db += g;
            }
        }
        let input_grad = out_grad.matmul(&self.weight.transposed()?)?;
        Ok(Backward {
            input_grad,
            param_grads: vec![("weight".into(), d_weight), ("bias".into(), d_bias)],
        })
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::assert_grad_check;

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut layer = FCLayer::new(
            RngState::new(1).normal_tensor(&[4, 3], 1.0),
            Tensor::zeros(&[3]),
        )
        .unwrap();
        let out = layer.forward(&Tensor::zeros(&[2, 4]), Mode::Infer).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_weight_passes_input_through() {
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.set(&[i, i], 1.0);
        }
        let mut layer = FCLayer::new(eye, Tensor::zeros(&[3])).unwrap();
        let x = RngState::new(2).normal_tensor(&[5, 3], 1.0);
        let out = layer.forward(&x, Mode::Infer).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn forward_matches_triple_loop_oracle() {
        let mut rng = RngState::new(3);
        let x = rng.normal_tensor(&[3, 5], 1.0);
        let w = rng.normal_tensor(&[5, 2], 1.0);
        let b = rng.normal_tensor(&[2], 1.0);
        let mut layer = FCLayer::new(w.clone(), b.clone()).unwrap();
        let out = layer.forward(&x, Mode::Infer).unwrap();
        for bi in 0..3 {
            for j in 0..2 {
                let mut acc = b.at(&[j]);
                for i in 0..5 {
                    acc += x.at(&[bi, i]) * w.at(&[i, j]);
                }
                assert!((out.at(&[bi, j]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut layer = FCLayer::init(4, 3, &mut RngState::new(0));
        let err = layer.forward(&Tensor::zeros(&[2, 5]), Mode::Infer);
        assert!(err.is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = RngState::new(seed);
            let mut layer = FCLayer::init(4, 3, &mut rng);
            let x = rng.normal_tensor(&[2, 4], 1.0);
            assert_grad_check(&mut layer, &x, 1e-6, seed).unwrap();
        }
    }

    #[test]
    fn quadratic_loss_finite_diff_is_near_exact() {
        // linear layer + quadratic loss: central differences are exact for
        // polynomials of degree <= 2, so only rounding noise remains
        let mut rng = RngState::new(7);
        let mut layer = FCLayer::init(3, 2, &mut rng);
        let x = rng.normal_tensor(&[2, 3], 1.0);
        let target = rng.normal_tensor(&[2, 2], 1.0);

        let loss = |layer: &mut FCLayer, x: &Tensor| {
            let out = layer.forward(x, Mode::Train).unwrap();
            0.5 * out.sub(&target).unwrap().sum_squares()
        };

        let out = layer.forward(&x, Mode::Train).unwrap();
        let upstream = out.sub(&target).unwrap();
        let bw = layer.backward(&upstream).unwrap();

        let h = 1e-5;
        for p in 0..2 {
            for i in 0..layer.params()[p].1.len() {
                let orig = layer.params()[p].1.data()[i];
                layer.params_mut()[p].1.data_mut()[i] = orig + h;
                let lp = loss(&mut layer, &x);
                layer.params_mut()[p].1.data_mut()[i] = orig - h;
                let lm = loss(&mut layer, &x);
                layer.params_mut()[p].1.data_mut()[i] = orig;
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = bw.param_grads[p].1.data()[i];
                assert!(
                    (numeric - analytic).abs() / analytic.abs().max(1.0) < 1e-9,
                    "param {p} elem {i}: {analytic} vs {numeric}"
                );
            }
        }
    }
}
