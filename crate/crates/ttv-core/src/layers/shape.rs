use crate::error::{Error, Result};
use crate::layers::{Backward, Layer, Mode};
use crate::tensor::Tensor;

/// `[batch, ...]` -> `[batch, prod(...)]`.
pub struct FlattenLayer {
    cache_shape: Option<Vec<usize>>,
}

impl FlattenLayer {
    pub fn new() -> Self {
        FlattenLayer { cache_shape: None }
    }
}

impl Default for FlattenLayer {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for FlattenLayer {
    fn kind(&self) -> &'static str {
        "flatten"
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        if input.rank() < 2 {
            return Err(Error::InvalidShape(format!(
                "flatten needs a batch axis, got {:?}",
                input.shape()
            )));
        }
        self.cache_shape = Some(input.shape().to_vec());
        let batch = input.shape()[0];
        input.reshape(&[batch, input.len() / batch])
    }

    fn backward(&mut self, out_grad: &Tensor) -> Result<Backward> {
        let shape = self
            .cache_shape
            .as_ref()
            .ok_or_else(|| Error::Validation("flatten backward before forward".into()))?;
        Ok(Backward {
            input_grad: out_grad.reshape(shape)?,
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

/// Adapter from flat feature vectors to channel-last images.
///
/// Feature rows are laid out `[frame][channel][bin]` (frame slowest), i.e.
/// width `W * C * H`; the image wanted by convolution is `[W, H, C]` with
/// W = context frames, H = frequency bins, C = input channels.
pub struct ImageLayer {
    pub w: usize,
    pub h: usize,
    pub c: usize,
}

impl ImageLayer {
    pub fn new(w: usize, h: usize, c: usize) -> Self {
        ImageLayer { w, h, c }
    }
}

impl Layer for ImageLayer {
    fn kind(&self) -> &'static str {
        "image"
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let d = self.w * self.h * self.c;
        if input.rank() != 2 || input.shape()[1] != d {
            return Err(Error::shape_mismatch(
                "image adapter",
                input.shape(),
                &[self.w, self.h, self.c],
            ));
        }
        let batch = input.shape()[0];
        input
            .reshape(&[batch, self.w, self.c, self.h])?
            .permute(&[0, 1, 3, 2])
    }

    fn backward(&mut self, out_grad: &Tensor) -> Result<Backward> {
        let batch = out_grad.shape()[0];
        // swapping the last two axes is its own inverse
        let grad = out_grad
            .permute(&[0, 1, 3, 2])?
            .reshape(&[batch, self.w * self.h * self.c])?;
        Ok(Backward {
            input_grad: grad,
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
    fn flatten_round_trip() {
        let mut rng = RngState::new(1);
        let x = rng.normal_tensor(&[2, 3, 4, 2], 1.0);
        let mut layer = FlattenLayer::new();
        let out = layer.forward(&x, Mode::Infer).unwrap();
        assert_eq!(out.shape(), &[2, 24]);
        let bw = layer.backward(&out).unwrap();
        assert_eq!(bw.input_grad, x);
    }

    #[test]
    fn image_adapter_maps_feature_layout() {
        // 2 frames, 3 bins, 2 channels: index = w*(C*H) + c*H + h
        let (w, h, c) = (2, 3, 2);
        let d = w * h * c;
        let x = Tensor::new(vec![1, d], (0..d).map(|v| v as f64).collect()).unwrap();
        let mut layer = ImageLayer::new(w, h, c);
        let img = layer.forward(&x, Mode::Infer).unwrap();
        assert_eq!(img.shape(), &[1, w, h, c]);
        for wi in 0..w {
            for hi in 0..h {
                for ci in 0..c {
                    let flat = (wi * c + ci) * h + hi;
                    assert_eq!(img.at(&[0, wi, hi, ci]), flat as f64);
                }
            }
        }
        // backward inverts exactly
        let bw = layer.backward(&img).unwrap();
        assert_eq!(bw.input_grad, x);
    }
}
