//! Network layers with a uniform forward/backward contract.
//!
//! All layers take batch-first inputs (`[batch, ...]`), cache whatever the
//! matching `backward` needs during `forward`, and hand back parameter
//! gradients in the same order as `params()`. Differentiation is manual
//! reverse mode; every implementation is validated against central finite
//! differences by `grad_check`.

mod batchnorm;
pub(crate) mod conv;
mod fc;
mod relu;
mod shape;

pub use batchnorm::BatchNormLayer;
pub use conv::{
    col2im, conv2d_direct, conv2d_direct_strided, im2col, im2col_strided, kernel_from_matrix,
    reshape_kernel, Conv2DLayer,
};
pub use fc::FCLayer;
pub use relu::ReluLayer;
pub use shape::{FlattenLayer, ImageLayer};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Result of a backward pass: gradient w.r.t. the layer input plus one
/// gradient per trainable parameter, ordered exactly like `params()`.
pub struct Backward {
    pub input_grad: Tensor,
    pub param_grads: Vec<(String, Tensor)>,
}

pub trait Layer {
    fn kind(&self) -> &'static str;

    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor>;

    /// Backward for the most recent `forward` on this instance.
    fn backward(&mut self, out_grad: &Tensor) -> Result<Backward>;

    /// Trainable parameters. Order is fixed and matches `backward`.
    fn params(&self) -> Vec<(String, &Tensor)>;

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    /// Non-trainable persistent state (e.g. running statistics).
    fn state(&self) -> Vec<(String, &Tensor)> {
        Vec::new()
    }

    fn state_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        Vec::new()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Central finite-difference check of a layer's backward pass.
///
/// The scalar probe loss is `L = sum_i c_i * out_i` with fixed Gaussian
/// coefficients `c`, so the analytic upstream gradient is exactly `c`.
/// Each parameter element and each input element is perturbed by `+-h`
/// (h = 1e-5) and the central difference is compared to the analytic value.
///
/// The reported error is relative with an absolute floor:
/// `|a - n| / max(|a|, |n|, 1e-3)`, which keeps finite-difference rounding
/// noise on near-zero gradients from drowning the signal.
pub struct GradCheckReport {
    pub max_rel: f64,
    pub worst: String,
}

const FD_STEP: f64 = 1e-5;

pub fn grad_check(layer: &mut dyn Layer, input: &Tensor, seed: u64) -> Result<GradCheckReport> {
    let out = layer.forward(input, Mode::Train)?;
    let coeff = RngState::new(seed ^ 0xC0FFEE).normal_tensor(out.shape(), 1.0);
    let bw = layer.backward(&coeff)?;

    let loss = |layer: &mut dyn Layer, input: &Tensor, coeff: &Tensor| -> Result<f64> {
        let out = layer.forward(input, Mode::Train)?;
        Ok(out
            .data()
            .iter()
            .zip(coeff.data())
            .map(|(o, c)| o * c)
            .sum())
    };

    let mut max_rel = 0.0f64;
    let mut worst = String::from("none");
    let mut record = |name: &str, idx: usize, analytic: f64, numeric: f64| {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        if rel > max_rel {
            max_rel = rel;
            worst = format!("{name}[{idx}]");
        }
    };

    // parameters
    let n_params = layer.params().len();
    for p in 0..n_params {
        let (name, n_elems) = {
            let ps = layer.params();
            (ps[p].0.clone(), ps[p].1.len())
        };
        for i in 0..n_elems {
            let orig = layer.params()[p].1.data()[i];
            layer.params_mut()[p].1.data_mut()[i] = orig + FD_STEP;
            let lp = loss(layer, input, &coeff)?;
            layer.params_mut()[p].1.data_mut()[i] = orig - FD_STEP;
            let lm = loss(layer, input, &coeff)?;
            layer.params_mut()[p].1.data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let analytic = bw.param_grads[p].1.data()[i];
            record(&name, i, analytic, numeric);
        }
    }

    // input
    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_STEP;
        let lp = loss(layer, &x, &coeff)?;
        x.data_mut()[i] = orig - FD_STEP;
        let lm = loss(layer, &x, &coeff)?;
        x.data_mut()[i] = orig;
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        let analytic = bw.input_grad.data()[i];
        record("input", i, analytic, numeric);
    }

    // leave the cache consistent with the unperturbed input
    let _ = layer.forward(input, Mode::Train)?;

    Ok(GradCheckReport { max_rel, worst })
}

/// `grad_check` that fails with the offending parameter name.
pub fn assert_grad_check(layer: &mut dyn Layer, input: &Tensor, tol: f64, seed: u64) -> Result<()> {
    let report = grad_check(layer, input, seed)?;
    if report.max_rel > tol {
        return Err(Error::GradCheck {
            param: report.worst,
            max_rel: report.max_rel,
            tol,
        });
    }
    Ok(())
}
