use crate::error::{Error, Result};
use crate::layers::{Backward, Layer, Mode};
use crate::tensor::Tensor;

/// Elementwise `max(0, x)`. The subgradient at exactly 0 is taken as 0.
pub struct ReluLayer {
    mask: Option<Vec<bool>>,
}

impl ReluLayer {
    pub fn new() -> Self {
        ReluLayer { mask: None }
    }
}

impl Default for ReluLayer {
    fn default() -> Self {
        Self::new()
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|x| x.max(0.0))
}

impl Layer for ReluLayer {
    fn kind(&self) -> &'static str {
        "relu"
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        self.mask = Some(input.data().iter().map(|&x| x > 0.0).collect());
        Ok(relu(input))
    }

    fn backward(&mut self, out_grad: &Tensor) -> Result<Backward> {
        let mask = self
            .mask
            .as_ref()
            .ok_or_else(|| Error::Validation("relu backward before forward".into()))?;
        if mask.len() != out_grad.len() {
            return Err(Error::shape_mismatch(
                "relu backward",
                &[mask.len()],
                out_grad.shape(),
            ));
        }
        let data = out_grad
            .data()
            .iter()
            .zip(mask)
            .map(|(&g, &m)| if m { g } else { 0.0 })
            .collect();
        Ok(Backward {
            input_grad: Tensor::new(out_grad.shape().to_vec(), data)?,
            param_grads: Vec::new(),
        })
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn definition_cases() {
        let t = Tensor::from_vec(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.0]);

        let neg = Tensor::from_vec(vec![-3.0, -0.5]);
        assert!(relu(&neg).data().iter().all(|&x| x == 0.0));

        let pos = Tensor::from_vec(vec![3.0, 0.5]);
        assert_eq!(relu(&pos).data(), pos.data());
    }

    #[test]
    fn backward_masks_gradient_with_zero_at_zero() {
        let mut layer = ReluLayer::new();
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0]);
        layer.forward(&x, Mode::Train).unwrap();
        let g = Tensor::from_vec(vec![5.0, 5.0, 5.0]);
        let bw = layer.backward(&g).unwrap();
        assert_eq!(bw.input_grad.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn gradcheck_away_from_kinks() {
        for seed in 0..5u64 {
            let mut rng = RngState::new(seed + 100);
            // resample until no pre-activation sits near the kink
            let x = loop {
                let t = rng.normal_tensor(&[2, 6], 1.0);
                if t.data().iter().all(|v| v.abs() > 1e-3) {
                    break t;
                }
            };
            let mut layer = ReluLayer::new();
            crate::layers::assert_grad_check(&mut layer, &x, 1e-6, seed).unwrap();
        }
    }
}
