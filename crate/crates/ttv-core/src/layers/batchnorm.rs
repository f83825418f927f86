use crate::error::{Error, Result};
use crate::layers::{Backward, Layer, Mode};
use crate::tensor::Tensor;

/// Batch normalization over the trailing (channel) axis of a channel-last
/// input `[batch, ..., C]`. Train mode normalizes per channel over batch and
/// all spatial axes with the biased variance; infer mode uses the running
/// statistics only.
pub struct BatchNormLayer {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    momentum: f64,
    epsilon: f64,
    cache: Option<BnCache>,
}

struct BnCache {
    mode: Mode,
    x_hat: Tensor,
    inv_std: Vec<f64>, // per channel
    n: usize,          // population per channel
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            momentum: 0.9,
            epsilon: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape()[0]
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn running_mean(&self) -> &Tensor {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Tensor {
        &self.running_var
    }

    fn check_input(&self, input: &Tensor) -> Result<usize> {
        let c = self.channels();
        if input.rank() < 2 || *input.shape().last().unwrap() != c {
            return Err(Error::shape_mismatch(
                "batchnorm",
                input.shape(),
                self.gamma.shape(),
            ));
        }
        Ok(input.len() / c)
    }
}

impl Layer for BatchNormLayer {
    fn kind(&self) -> &'static str {
        "batchnorm"
    }

    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = self.channels();
        let n = self.check_input(input)?;

        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::Validation(format!(
                        "batchnorm train mode needs >= 2 samples per channel, got {n}"
                    )));
                }
                let mut mean = vec![0.0; c];
                for row in input.data().chunks_exact(c) {
                    for (m, x) in mean.iter_mut().zip(row) {
                        *m += x;
                    }
                }
                for m in &mut mean {
                    *m /= n as f64;
                }
                let mut var = vec![0.0; c];
                for row in input.data().chunks_exact(c) {
                    for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = x - m;
                        *v += d * d;
                    }
                }
                for v in &mut var {
                    *v /= n as f64;
                }
                for ci in 0..c {
                    let rm = self.running_mean.data_mut();
                    rm[ci] = self.momentum * rm[ci] + (1.0 - self.momentum) * mean[ci];
                    let rv = self.running_var.data_mut();
                    rv[ci] = self.momentum * rv[ci] + (1.0 - self.momentum) * var[ci];
                }
                (mean, var)
            }
            Mode::Infer => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.epsilon).sqrt()).collect();
        let mut x_hat = input.clone();
        for row in x_hat.data_mut().chunks_exact_mut(c) {
            for ((x, m), s) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *x = (*x - m) * s;
            }
        }
        let mut out = x_hat.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for ((y, g), b) in row.iter_mut().zip(self.gamma.data()).zip(self.beta.data()) {
                *y = g * *y + b;
            }
        }
        self.cache = Some(BnCache {
            mode,
            x_hat,
            inv_std,
            n,
        });
        Ok(out)
    }

    fn backward(&mut self, out_grad: &Tensor) -> Result<Backward> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Validation("batchnorm backward before forward".into()))?;
        let c = self.channels();
        if out_grad.shape() != cache.x_hat.shape() {
            return Err(Error::shape_mismatch(
                "batchnorm backward",
                out_grad.shape(),
                cache.x_hat.shape(),
            ));
        }

        let mut d_gamma = vec![0.0; c];
        let mut d_beta = vec![0.0; c];
        for (grow, xrow) in out_grad
            .data()
            .chunks_exact(c)
            .zip(cache.x_hat.data().chunks_exact(c))
        {
            for i in 0..c {
                d_gamma[i] += grow[i] * xrow[i];
                d_beta[i] += grow[i];
            }
        }

        let input_grad = match cache.mode {
            Mode::Train => {
                let n = cache.n as f64;
                // dx = gamma*inv_std * (dy - mean(dy) - x_hat * mean(dy*x_hat))
                let mut grad = out_grad.clone();
                for (grow, xrow) in grad
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(cache.x_hat.data().chunks_exact(c))
                {
                    for i in 0..c {
                        grow[i] = self.gamma.data()[i]
                            * cache.inv_std[i]
                            * (grow[i] - d_beta[i] / n - xrow[i] * d_gamma[i] / n);
                    }
                }
                grad
            }
            Mode::Infer => {
                // fixed affine transform
                let mut grad = out_grad.clone();
                for row in grad.data_mut().chunks_exact_mut(c) {
                    for ((g, gamma), s) in
                        row.iter_mut().zip(self.gamma.data()).zip(&cache.inv_std)
                    {
                        *g *= gamma * s;
                    }
                }
                grad
            }
        };

        Ok(Backward {
            input_grad,
            param_grads: vec![
                ("gamma".into(), Tensor::from_vec(d_gamma)),
                ("beta".into(), Tensor::from_vec(d_beta)),
            ],
        })
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("gamma".into(), &mut self.gamma),
            ("beta".into(), &mut self.beta),
        ]
    }

    fn state(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("running_mean".into(), &self.running_mean),
            ("running_var".into(), &self.running_var),
        ]
    }

    fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("running_mean".into(), &mut self.running_mean),
            ("running_var".into(), &mut self.running_var),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::assert_grad_check;
    use crate::rng::RngState;

    #[test]
    fn normalizes_batch_moments() {
        let mut rng = RngState::new(1);
        // large input variance so the epsilon bias stays below 1e-6
        let x = rng.normal_tensor(&[8, 3, 4], 10.0);
        let mut bn = BatchNormLayer::new(4);
        let out = bn.forward(&x, Mode::Train).unwrap();
        let n = (out.len() / 4) as f64;
        for c in 0..4 {
            let vals: Vec<f64> = out.data().iter().skip(c).step_by(4).copied().collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn already_normalized_input_is_near_fixed_point() {
        // per-channel zero-mean unit-variance by construction
        let vals = [-1.0, 1.0, -1.0, 1.0];
        let x = Tensor::new(vec![4, 1], vals.to_vec()).unwrap();
        let mut bn = BatchNormLayer::new(1);
        let out = bn.forward(&x, Mode::Train).unwrap();
        assert!(out.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn zero_gamma_gives_constant_beta() {
        let mut bn = BatchNormLayer::new(2);
        bn.params_mut()[0].1.data_mut().fill(0.0);
        bn.params_mut()[1].1.data_mut().copy_from_slice(&[3.0, -1.0]);
        let x = RngState::new(2).normal_tensor(&[5, 2], 1.0);
        let out = bn.forward(&x, Mode::Train).unwrap();
        for row in out.data().chunks(2) {
            assert_eq!(row, &[3.0, -1.0]);
        }
    }

    #[test]
    fn train_rejects_single_sample() {
        let mut bn = BatchNormLayer::new(3);
        let x = Tensor::zeros(&[1, 3]);
        assert!(bn.forward(&x, Mode::Train).is_err());
        assert!(bn.forward(&x, Mode::Infer).is_ok());
    }

    #[test]
    fn infer_uses_running_stats_and_is_idempotent() {
        let mut bn = BatchNormLayer::new(2);
        let mut rng = RngState::new(3);
        let x = rng.normal_tensor(&[6, 2], 2.0);
        bn.forward(&x, Mode::Train).unwrap();
        let rm = bn.running_mean().clone();

        let y = rng.normal_tensor(&[4, 2], 1.0);
        let o1 = bn.forward(&y, Mode::Infer).unwrap();
        let o2 = bn.forward(&y, Mode::Infer).unwrap();
        assert_eq!(o1, o2);
        assert_eq!(bn.running_mean(), &rm); // infer never mutates stats
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = RngState::new(seed + 60);
            let mut bn = BatchNormLayer::new(3);
            // non-trivial gamma/beta
            bn.params_mut()[0]
                .1
                .data_mut()
                .copy_from_slice(&[1.3, 0.7, -0.9]);
            bn.params_mut()[1]
                .1
                .data_mut()
                .copy_from_slice(&[0.1, -0.2, 0.4]);
            let x = rng.normal_tensor(&[4, 2, 3], 1.0);
            assert_grad_check(&mut bn, &x, 1e-5, seed).unwrap();
        }
    }
}
