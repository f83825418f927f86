//! Tucker factorization of convolution kernels along the channel modes.
//!
//! A kernel `[L, L, C, S]` is approximated as a smaller core `[L, L, Rc, Rs]`
//! contracted with orthonormal factor matrices on the input-channel and
//! output-channel modes. The spatial modes stay intact; their extents are
//! small and factoring them buys almost nothing. The factored convolution
//! runs in three stages: 1x1 channel projection, LxL convolution with the
//! core, 1x1 channel expansion.

use crate::error::{Error, Result};
use crate::layers::conv::{conv_batch_backward, conv_batch_forward, BatchConvCache};
use crate::layers::{Backward, Layer, Mode};
use crate::linalg::svd;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TuckerKernel {
    /// `[L, L, Rc, Rs]`
    pub core: Tensor,
    /// `[C, Rc]`, orthonormal columns when produced by `hosvd_decompose`.
    pub input_factor: Tensor,
    /// `[S, Rs]`, likewise.
    pub output_factor: Tensor,
}

impl TuckerKernel {
    pub fn new(core: Tensor, input_factor: Tensor, output_factor: Tensor) -> Result<Self> {
        if core.rank() != 4
            || core.shape()[0] != core.shape()[1]
            || input_factor.rank() != 2
            || output_factor.rank() != 2
            || input_factor.shape()[1] != core.shape()[2]
            || output_factor.shape()[1] != core.shape()[3]
        {
            return Err(Error::Validation(format!(
                "inconsistent tucker kernel: core {:?}, input factor {:?}, output factor {:?}",
                core.shape(),
                input_factor.shape(),
                output_factor.shape()
            )));
        }
        Ok(TuckerKernel {
            core,
            input_factor,
            output_factor,
        })
    }

    pub fn kernel_width(&self) -> usize {
        self.core.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.input_factor.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.output_factor.shape()[0]
    }

    pub fn ranks(&self) -> (usize, usize) {
        (self.core.shape()[2], self.core.shape()[3])
    }

    pub fn param_count(&self) -> usize {
        self.core.len() + self.input_factor.len() + self.output_factor.len()
    }
}

/// `L^2*Rc*Rs + C*Rc + S*Rs` scalars for the factored kernel. Note this can
/// exceed the dense `L^2*C*S` at near-full ranks; callers report, not hide,
/// that case.
pub fn tucker_param_count(l: usize, c: usize, s: usize, rc: usize, rs: usize) -> usize {
    l * l * rc * rs + c * rc + s * rs
}

/// Contract the input-channel mode: out(i,j,a,s) = sum_c t(i,j,c,s) * factor(c,a)
fn contract_mode2(t: &Tensor, factor: &Tensor) -> Result<Tensor> {
    let (l1, l2, c, s) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    let r = factor.shape()[1];
    let m = t
        .permute(&[0, 1, 3, 2])?
        .reshape(&[l1 * l2 * s, c])?
        .matmul(factor)?;
    m.reshape(&[l1, l2, s, r])?.permute(&[0, 1, 3, 2])
}

/// Contract the output-channel mode: out(i,j,c,b) = sum_s t(i,j,c,s) * factor(s,b)
fn contract_mode3(t: &Tensor, factor: &Tensor) -> Result<Tensor> {
    let (l1, l2, c, s) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    let r = factor.shape()[1];
    let m = t.reshape(&[l1 * l2 * c, s])?.matmul(factor)?;
    m.reshape(&[l1, l2, c, r])
}

/// HOSVD of the channel modes: factor matrices are the leading left singular
/// vectors of the mode-3/mode-4 unfoldings, the core is the kernel
/// contracted with the factor transposes. Returns the kernel and the actual
/// Frobenius reconstruction error.
pub fn hosvd_decompose(kernel: &Tensor, rc: usize, rs: usize) -> Result<(TuckerKernel, f64)> {
    if kernel.rank() != 4 || kernel.shape()[0] != kernel.shape()[1] {
        return Err(Error::InvalidShape(format!(
            "hosvd needs [L, L, C, S], got {:?}",
            kernel.shape()
        )));
    }
    let (l, c, s) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    if rc == 0 || rc > c || rs == 0 || rs > s {
        return Err(Error::Validation(format!(
            "tucker ranks ({rc}, {rs}) out of bounds for channels ({c}, {s})"
        )));
    }

    // mode-3 unfolding [C, L^2 S]
    let m3 = kernel.permute(&[2, 0, 1, 3])?.reshape(&[c, l * l * s])?;
    let f3 = svd(&m3)?;
    let input_factor = leading_columns(&f3.u, rc)?;

    // mode-4 unfolding [S, L^2 C]
    let m4 = kernel.permute(&[3, 0, 1, 2])?.reshape(&[s, l * l * c])?;
    let f4 = svd(&m4)?;
    let output_factor = leading_columns(&f4.u, rs)?;

    let core = contract_mode3(&contract_mode2(kernel, &input_factor)?, &output_factor)?;
    let tk = TuckerKernel::new(core, input_factor, output_factor)?;
    let err = kernel.sub(&tucker_reconstruct(&tk)?)?.frobenius_norm();
    Ok((tk, err))
}

fn leading_columns(u: &Tensor, r: usize) -> Result<Tensor> {
    let (rows, cols) = (u.shape()[0], u.shape()[1]);
    let mut data = Vec::with_capacity(rows * r);
    for i in 0..rows {
        data.extend_from_slice(&u.data()[i * cols..i * cols + r]);
    }
    Tensor::new(vec![rows, r], data)
}

/// Dense kernel represented by the factored form:
/// k(i,j,c,s) = sum_{a,b} core(i,j,a,b) * input_factor(c,a) * output_factor(s,b)
pub fn tucker_reconstruct(tk: &TuckerKernel) -> Result<Tensor> {
    let expanded = contract_mode2(&tk.core, &tk.input_factor.transposed()?)?;
    contract_mode3(&expanded, &tk.output_factor.transposed()?)
}

/// Staged factored convolution of a single `[W, H, C]` image, stride 1.
/// Equals `conv2d_direct(input, tucker_reconstruct(tk))`.
pub fn tucker_conv_forward(tk: &TuckerKernel, input: &Tensor) -> Result<Tensor> {
    if input.rank() != 3 || input.shape()[2] != tk.in_channels() {
        return Err(Error::shape_mismatch(
            "tucker conv",
            input.shape(),
            tk.core.shape(),
        ));
    }
    let batched = input.reshape(&[1, input.shape()[0], input.shape()[1], input.shape()[2]])?;
    let projected = project_channels(&batched, &tk.input_factor)?;
    let (mid, _) = conv_batch_forward(&projected, &tk.core, (1, 1))?;
    let out = project_channels(&mid, &tk.output_factor.transposed()?)?;
    let shape = out.shape()[1..].to_vec();
    out.reshape(&shape)
}

fn project_channels(input: &Tensor, factor: &Tensor) -> Result<Tensor> {
    // [B, W, H, C] x [C, R] -> [B, W, H, R]
    let (b, w, h, c) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let r = factor.shape()[1];
    input
        .reshape(&[b * w * h, c])?
        .matmul(factor)?
        .reshape(&[b, w, h, r])
}

/// Convolutional layer carrying its kernel in Tucker form.
///
/// With `train_factors = false` (the default after compressing a trained
/// model) the factor matrices are frozen: their gradients are projected to
/// zero so only the core and bias move during fine-tuning.
pub struct TuckerConvLayer {
    kernel: TuckerKernel,
    bias: Tensor, // [S]
    stride: (usize, usize),
    train_factors: bool,
    cache: Option<TuckerCache>,
}

struct TuckerCache {
    input: Tensor,
    mid: Tensor,
    conv: BatchConvCache,
}

impl TuckerConvLayer {
    pub fn new(
        kernel: TuckerKernel,
        bias: Tensor,
        stride: (usize, usize),
        train_factors: bool,
    ) -> Result<Self> {
        if bias.shape() != [kernel.out_channels()] {
            return Err(Error::shape_mismatch(
                "tucker bias",
                bias.shape(),
                &[kernel.out_channels()],
            ));
        }
        Ok(TuckerConvLayer {
            kernel,
            bias,
            stride,
            train_factors,
            cache: None,
        })
    }

    pub fn kernel(&self) -> &TuckerKernel {
        &self.kernel
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn stride(&self) -> (usize, usize) {
        self.stride
    }

    pub fn train_factors(&self) -> bool {
        self.train_factors
    }

    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        use crate::layers::conv::conv_out_extent;
        let l = self.kernel.kernel_width();
        if in_shape.len() != 3 || in_shape[2] != self.kernel.in_channels() {
            return Err(Error::shape_mismatch(
                "tucker out_shape",
                in_shape,
                self.kernel.core.shape(),
            ));
        }
        if l > in_shape[0].min(in_shape[1]) {
            return Err(Error::InvalidShape(format!(
                "kernel width {l} exceeds input extents {in_shape:?}"
            )));
        }
        Ok(vec![
            conv_out_extent(in_shape[0], l, self.stride.0),
            conv_out_extent(in_shape[1], l, self.stride.1),
            self.kernel.out_channels(),
        ])
    }
}

impl Layer for TuckerConvLayer {
    fn kind(&self) -> &'static str {
        "tucker_conv"
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let projected = project_channels(input, &self.kernel.input_factor)?;
        let (mid, conv) = conv_batch_forward(&projected, &self.kernel.core, self.stride)?;
        let mut out = project_channels(&mid, &self.kernel.output_factor.transposed()?)?;
        let s = self.kernel.out_channels();
        for row in out.data_mut().chunks_mut(s) {
            for (o, b) in row.iter_mut().zip(self.bias.data()) {
                *o += b;
            }
        }
        self.cache = Some(TuckerCache {
            input: input.clone(),
            mid,
            conv,
        });
        Ok(out)
    }

    fn backward(&mut self, out_grad: &Tensor) -> Result<Backward> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Validation("tucker backward before forward".into()))?;
        let s = self.kernel.out_channels();
        let (rc, rs) = self.kernel.ranks();

        let mut d_bias = Tensor::zeros(&[s]);
        for row in out_grad.data().chunks(s) {
            for (db, g) in d_bias.data_mut().iter_mut().zip(row) {
                *db += g;
            }
        }

        // stage 3: out = mid x output_factor^T (per position)
        let positions = out_grad.len() / s;
        let dy = out_grad.reshape(&[positions, s])?;
        let mid_mat = cache.mid.reshape(&[positions, rs])?;
        let mut d_out_factor = dy.transposed()?.matmul(&mid_mat)?; // [S, Rs]
        let d_mid = dy
            .matmul(&self.kernel.output_factor)?
            .reshape(cache.mid.shape())?;

        // stage 2: convolution with the core
        let (d_projected, d_core) =
            conv_batch_backward(&self.kernel.core, self.stride, &cache.conv, &d_mid)?;

        // stage 1: projected = input x input_factor (per position)
        let c = self.kernel.in_channels();
        let in_positions = cache.input.len() / c;
        let x_mat = cache.input.reshape(&[in_positions, c])?;
        let dp_mat = d_projected.reshape(&[in_positions, rc])?;
        let mut d_in_factor = x_mat.transposed()?.matmul(&dp_mat)?; // [C, Rc]
        let input_grad = dp_mat
            .matmul(&self.kernel.input_factor.transposed()?)?
            .reshape(cache.input.shape())?;

        if !self.train_factors {
            d_in_factor.data_mut().fill(0.0);
            d_out_factor.data_mut().fill(0.0);
        }

        Ok(Backward {
            input_grad,
            param_grads: vec![
                ("core".into(), d_core),
                ("input_factor".into(), d_in_factor),
                ("output_factor".into(), d_out_factor),
                ("bias".into(), d_bias),
            ],
        })
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("core".into(), &self.kernel.core),
            ("input_factor".into(), &self.kernel.input_factor),
            ("output_factor".into(), &self.kernel.output_factor),
            ("bias".into(), &self.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("core".into(), &mut self.kernel.core),
            ("input_factor".into(), &mut self.kernel.input_factor),
            ("output_factor".into(), &mut self.kernel.output_factor),
            ("bias".into(), &mut self.bias),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{assert_grad_check, conv2d_direct};
    use crate::rng::RngState;

    #[test]
    fn full_rank_hosvd_is_exact() {
        let kernel = RngState::new(1).normal_tensor(&[3, 3, 4, 5], 1.0);
        let (tk, err) = hosvd_decompose(&kernel, 4, 5).unwrap();
        assert!(err < 1e-10, "err {err}");
        let back = tucker_reconstruct(&tk).unwrap();
        assert!(kernel.max_abs_diff(&back) < 1e-10);
    }

    #[test]
    fn factor_columns_are_orthonormal() {
        let kernel = RngState::new(2).normal_tensor(&[3, 3, 6, 4], 1.0);
        let (tk, _) = hosvd_decompose(&kernel, 3, 2).unwrap();
        for f in [&tk.input_factor, &tk.output_factor] {
            let g = f.transposed().unwrap().matmul(f).unwrap();
            let r = g.shape()[0];
            for i in 0..r {
                for j in 0..r {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((g.at(&[i, j]) - want).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn constructed_low_rank_kernel_is_recovered() {
        // build a kernel that really has input-channel rank 2 of C = 4
        let mut rng = RngState::new(3);
        let core = rng.normal_tensor(&[3, 3, 2, 5], 1.0);
        let fin = rng.normal_tensor(&[4, 2], 1.0);
        let fout = rng.normal_tensor(&[5, 5], 1.0);
        let kernel = tucker_reconstruct(&TuckerKernel::new(core, fin, fout).unwrap()).unwrap();
        let (_, err) = hosvd_decompose(&kernel, 2, 5).unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn reconstruction_error_non_increasing_in_rank() {
        let kernel = RngState::new(4).normal_tensor(&[3, 3, 6, 6], 1.0);
        let mut prev = f64::INFINITY;
        for r in 1..=6 {
            let (_, err) = hosvd_decompose(&kernel, r, 6).unwrap();
            assert!(err <= prev + 1e-12, "rank {r}: {err} > {prev}");
            prev = err;
        }
    }

    #[test]
    fn rank_out_of_bounds_is_rejected() {
        let kernel = Tensor::zeros(&[3, 3, 4, 5]);
        assert!(hosvd_decompose(&kernel, 5, 5).is_err());
        assert!(hosvd_decompose(&kernel, 0, 5).is_err());
        assert!(hosvd_decompose(&kernel, 4, 6).is_err());
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(tucker_param_count(3, 64, 128, 16, 16), 5376);
        assert_eq!(3 * 3 * 64 * 128, 73728); // dense reference
        // degenerate overhead case: more parameters than the dense kernel
        assert_eq!(tucker_param_count(1, 1, 1, 1, 1), 3);
    }

    #[test]
    fn staged_forward_equals_direct_conv_full_rank() {
        let mut rng = RngState::new(5);
        let kernel = rng.normal_tensor(&[3, 3, 3, 4], 1.0);
        let (tk, _) = hosvd_decompose(&kernel, 3, 4).unwrap();
        let input = rng.normal_tensor(&[6, 7, 3], 1.0);
        let staged = tucker_conv_forward(&tk, &input).unwrap();
        let direct = conv2d_direct(&input, &kernel).unwrap();
        assert!(staged.max_abs_diff(&direct) < 1e-10);
    }

    #[test]
    fn staged_forward_equals_conv_with_reconstruction_when_truncated() {
        let mut rng = RngState::new(6);
        let kernel = rng.normal_tensor(&[3, 3, 5, 6], 1.0);
        let (tk, _) = hosvd_decompose(&kernel, 2, 3).unwrap();
        let input = rng.normal_tensor(&[5, 5, 5], 1.0);
        let staged = tucker_conv_forward(&tk, &input).unwrap();
        let direct = conv2d_direct(&input, &tucker_reconstruct(&tk).unwrap()).unwrap();
        assert!(staged.max_abs_diff(&direct) < 1e-10);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let kernel = RngState::new(7).normal_tensor(&[2, 2, 2, 3], 1.0);
        let (tk, _) = hosvd_decompose(&kernel, 2, 3).unwrap();
        let out = tucker_conv_forward(&tk, &Tensor::zeros(&[4, 4, 2])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = RngState::new(80 + seed);
            let kernel = rng.normal_tensor(&[2, 2, 3, 3], 0.5);
            let (tk, _) = hosvd_decompose(&kernel, 2, 2).unwrap();
            let mut layer = TuckerConvLayer::new(tk, Tensor::zeros(&[3]), (1, 1), true).unwrap();
            let x = rng.normal_tensor(&[2, 4, 4, 3], 1.0);
            assert_grad_check(&mut layer, &x, 1e-5, seed).unwrap();
        }
    }

    #[test]
    fn frozen_factors_get_zero_gradients() {
        let mut rng = RngState::new(90);
        let kernel = rng.normal_tensor(&[2, 2, 3, 3], 0.5);
        let (tk, _) = hosvd_decompose(&kernel, 2, 2).unwrap();
        let mut layer = TuckerConvLayer::new(tk, Tensor::zeros(&[3]), (1, 1), false).unwrap();
        let x = rng.normal_tensor(&[1, 4, 4, 3], 1.0);
        let out = layer.forward(&x, Mode::Train).unwrap();
        let bw = layer.backward(&Tensor::filled(out.shape(), 1.0)).unwrap();
        assert!(bw.param_grads[1].1.data().iter().all(|&g| g == 0.0));
        assert!(bw.param_grads[2].1.data().iter().all(|&g| g == 0.0));
        // core still trains
        assert!(bw.param_grads[0].1.data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn strided_layer_matches_reconstructed_kernel() {
        let mut rng = RngState::new(91);
        let kernel = rng.normal_tensor(&[3, 3, 2, 4], 1.0);
        let (tk, _) = hosvd_decompose(&kernel, 2, 4).unwrap();
        let mut layer =
            TuckerConvLayer::new(tk.clone(), Tensor::zeros(&[4]), (1, 2), false).unwrap();
        let x = rng.normal_tensor(&[1, 5, 9, 2], 1.0);
        let out = layer.forward(&x, Mode::Infer).unwrap();
        assert_eq!(out.shape(), &[1, 3, 4, 4]);
        let item = Tensor::new(vec![5, 9, 2], x.data().to_vec()).unwrap();
        let want =
            crate::layers::conv2d_direct_strided(&item, &tucker_reconstruct(&tk).unwrap(), 1, 2)
                .unwrap();
        let got = Tensor::new(vec![3, 4, 4], out.data().to_vec()).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-10);
    }
}
