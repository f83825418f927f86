//! Valid 2D convolution over channel-last images `[W, H, C]`, both as a
//! direct quadruple-sum (the test oracle) and as the production
//! im2col + GEMM path.
//!
//! Index maps (0-based translation of the 1-based originals):
//!   patch matrix  X[x + W'*(y), i + L*(j) + L^2*(c)] = input(x*sx + i, y*sy + j, c)
//!   kernel matrix K[i + L*(j) + L^2*(c), s]          = kernel(i, j, c, s)
//! so a convolution is the single product `Y = X * K` with output rows
//! indexed `x + W'*y`.

use crate::error::{Error, Result};
use crate::layers::{Backward, Layer, Mode};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Output spatial extents of a valid convolution with stride.
pub fn conv_out_extent(in_extent: usize, l: usize, stride: usize) -> usize {
    (in_extent - l) / stride + 1
}

fn check_conv_shapes(input: &Tensor, kernel: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
    if input.rank() != 3 || kernel.rank() != 4 {
        return Err(Error::shape_mismatch("conv2d", input.shape(), kernel.shape()));
    }
    let (w, h, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (l, l2, kc, s) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if l != l2 || kc != c || l > w.min(h) {
        return Err(Error::shape_mismatch("conv2d", input.shape(), kernel.shape()));
    }
    Ok((w, h, c, l, s))
}

/// Direct evaluation of the convolution sum, stride 1. Retained as the
/// oracle for the GEMM path.
pub fn conv2d_direct(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    conv2d_direct_strided(input, kernel, 1, 1)
}

/// y(x, y, s) = sum_{i,j,c} kernel(i, j, c, s) * input(x*sx + i, y*sy + j, c)
pub fn conv2d_direct_strided(
    input: &Tensor,
    kernel: &Tensor,
    sx: usize,
    sy: usize,
) -> Result<Tensor> {
    let (w, h, c, l, s) = check_conv_shapes(input, kernel)?;
    let (wp, hp) = (conv_out_extent(w, l, sx), conv_out_extent(h, l, sy));
    let x_data = input.data();
    let k_data = kernel.data();
    let mut out = vec![0.0; wp * hp * s];
    for x in 0..wp {
        for y in 0..hp {
            for si in 0..s {
                let mut acc = 0.0;
                for i in 0..l {
                    for j in 0..l {
                        for ci in 0..c {
                            let xv = x_data[((x * sx + i) * h + (y * sy + j)) * c + ci];
                            let kv = k_data[((i * l + j) * c + ci) * s + si];
                            acc += kv * xv;
                        }
                    }
                }
                out[(x * hp + y) * s + si] = acc;
            }
        }
    }
    Tensor::new(vec![wp, hp, s], out)
}

/// Patch matrix of shape `[W'H', L^2 C]`, stride 1, following the index map
/// in the module docs.
pub fn im2col(input: &Tensor, l: usize) -> Result<Tensor> {
    im2col_strided(input, l, 1, 1)
}

pub fn im2col_strided(input: &Tensor, l: usize, sx: usize, sy: usize) -> Result<Tensor> {
    if input.rank() != 3 {
        return Err(Error::InvalidShape(format!(
            "im2col needs [W, H, C], got {:?}",
            input.shape()
        )));
    }
    let (w, h, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if l > w.min(h) {
        return Err(Error::InvalidShape(format!(
            "kernel width {l} exceeds input extents {:?}",
            input.shape()
        )));
    }
    let (wp, hp) = (conv_out_extent(w, l, sx), conv_out_extent(h, l, sy));
    let cols = l * l * c;
    let mut out = vec![0.0; wp * hp * cols];
    im2col_into(input.data(), w, h, c, l, sx, sy, &mut out);
    Tensor::new(vec![wp * hp, cols], out)
}

/// Core of im2col, writing rows for one item into a caller-owned slice.
fn im2col_into(x_data: &[f64], w: usize, h: usize, c: usize, l: usize, sx: usize, sy: usize, out: &mut [f64]) {
    let (wp, hp) = (conv_out_extent(w, l, sx), conv_out_extent(h, l, sy));
    let cols = l * l * c;
    for y in 0..hp {
        for x in 0..wp {
            let base = (x + wp * y) * cols;
            for ci in 0..c {
                for j in 0..l {
                    for i in 0..l {
                        out[base + i + l * j + l * l * ci] =
                            x_data[((x * sx + i) * h + (y * sy + j)) * c + ci];
                    }
                }
            }
        }
    }
}

fn col2im_into(cd: &[f64], w: usize, h: usize, c: usize, l: usize, sx: usize, sy: usize, o: &mut [f64]) {
    let (wp, hp) = (conv_out_extent(w, l, sx), conv_out_extent(h, l, sy));
    let ncols = l * l * c;
    for y in 0..hp {
        for x in 0..wp {
            let base = (x + wp * y) * ncols;
            for ci in 0..c {
                for j in 0..l {
                    for i in 0..l {
                        o[((x * sx + i) * h + (y * sy + j)) * c + ci] +=
                            cd[base + i + l * j + l * l * ci];
                    }
                }
            }
        }
    }
}

/// Scatter-add inverse of `im2col_strided`, used for the input gradient.
pub fn col2im(
    cols: &Tensor,
    w: usize,
    h: usize,
    c: usize,
    l: usize,
    sx: usize,
    sy: usize,
) -> Result<Tensor> {
    let (wp, hp) = (conv_out_extent(w, l, sx), conv_out_extent(h, l, sy));
    if cols.shape() != [wp * hp, l * l * c] {
        return Err(Error::shape_mismatch(
            "col2im",
            cols.shape(),
            &[wp * hp, l * l * c],
        ));
    }
    let mut out = Tensor::zeros(&[w, h, c]);
    col2im_into(cols.data(), w, h, c, l, sx, sy, out.data_mut());
    Ok(out)
}

/// Kernel `[L, L, C, S]` flattened to `[L^2 C, S]` per the index map.
pub fn reshape_kernel(kernel: &Tensor) -> Result<Tensor> {
    if kernel.rank() != 4 || kernel.shape()[0] != kernel.shape()[1] {
        return Err(Error::InvalidShape(format!(
            "reshape_kernel needs [L, L, C, S], got {:?}",
            kernel.shape()
        )));
    }
    let (l, c, s) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    // row index i + L*j + L^2*c means c slowest, i fastest
    kernel.permute(&[2, 1, 0, 3])?.reshape(&[l * l * c, s])
}

/// Inverse of `reshape_kernel`.
pub fn kernel_from_matrix(mat: &Tensor, l: usize, c: usize, s: usize) -> Result<Tensor> {
    if mat.shape() != [l * l * c, s] {
        return Err(Error::shape_mismatch("kernel_from_matrix", mat.shape(), &[l * l * c, s]));
    }
    mat.reshape(&[c, l, l, s])?.permute(&[2, 1, 0, 3])
}

pub(crate) struct BatchConvCache {
    batch: usize,
    in_extents: (usize, usize, usize),
    out_extents: (usize, usize),
    cols: Tensor, // [batch * W'H', L^2 C]
}

/// Bias-free batched convolution `[batch, W, H, C] -> [batch, W', H', S]`
/// over the im2col + GEMM path, returning the patch cache for backward.
pub(crate) fn conv_batch_forward(
    input: &Tensor,
    kernel: &Tensor,
    stride: (usize, usize),
) -> Result<(Tensor, BatchConvCache)> {
    let (l, c, s) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    if input.rank() != 4 || input.shape()[3] != c {
        return Err(Error::shape_mismatch(
            "conv forward",
            input.shape(),
            kernel.shape(),
        ));
    }
    let (batch, w, h) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if l > w.min(h) {
        return Err(Error::InvalidShape(format!(
            "kernel width {l} exceeds input extents {:?}",
            input.shape()
        )));
    }
    let (sx, sy) = stride;
    let (wp, hp) = (conv_out_extent(w, l, sx), conv_out_extent(h, l, sy));

    let ncols = l * l * c;
    let mut cols = Tensor::zeros(&[batch * wp * hp, ncols]);
    let per_item = wp * hp * ncols;
    for b in 0..batch {
        im2col_into(
            &input.data()[b * w * h * c..(b + 1) * w * h * c],
            w,
            h,
            c,
            l,
            sx,
            sy,
            &mut cols.data_mut()[b * per_item..(b + 1) * per_item],
        );
    }

    let kmat = reshape_kernel(kernel)?;
    let rows = cols.matmul(&kmat)?;
    let out = rows_to_image(&rows, batch, wp, hp, s);
    let cache = BatchConvCache {
        batch,
        in_extents: (w, h, c),
        out_extents: (wp, hp),
        cols,
    };
    Ok((out, cache))
}

/// Gradients of `conv_batch_forward` w.r.t. input and kernel.
pub(crate) fn conv_batch_backward(
    kernel: &Tensor,
    stride: (usize, usize),
    cache: &BatchConvCache,
    out_grad: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (l, c, s) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let (w, h, _) = cache.in_extents;
    let (wp, hp) = cache.out_extents;
    let batch = cache.batch;
    if out_grad.shape() != [batch, wp, hp, s] {
        return Err(Error::shape_mismatch(
            "conv backward",
            out_grad.shape(),
            &[batch, wp, hp, s],
        ));
    }
    let (sx, sy) = stride;

    let grad_rows = image_to_rows(out_grad);
    let d_kmat = cache.cols.transposed()?.matmul(&grad_rows)?;
    let d_kernel = kernel_from_matrix(&d_kmat, l, c, s)?;

    let kmat = reshape_kernel(kernel)?;
    let d_cols = grad_rows.matmul(&kmat.transposed()?)?;
    let mut input_grad = Tensor::zeros(&[batch, w, h, c]);
    let ncols = l * l * c;
    let per_item = wp * hp * ncols;
    for b in 0..batch {
        col2im_into(
            &d_cols.data()[b * per_item..(b + 1) * per_item],
            w,
            h,
            c,
            l,
            sx,
            sy,
            &mut input_grad.data_mut()[b * w * h * c..(b + 1) * w * h * c],
        );
    }
    Ok((input_grad, d_kernel))
}

/// Convolutional layer over batched images `[batch, W, H, C]`, GEMM-backed.
pub struct Conv2DLayer {
    kernel: Tensor, // [L, L, C, S]
    bias: Tensor,   // [S]
    stride: (usize, usize),
    cache: Option<BatchConvCache>,
}

impl Conv2DLayer {
    pub fn new(kernel: Tensor, bias: Tensor, stride: (usize, usize)) -> Result<Self> {
        if kernel.rank() != 4
            || kernel.shape()[0] != kernel.shape()[1]
            || bias.rank() != 1
            || bias.shape()[0] != kernel.shape()[3]
        {
            return Err(Error::shape_mismatch("conv new", kernel.shape(), bias.shape()));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Validation("stride must be >= 1".into()));
        }
        Ok(Conv2DLayer {
            kernel,
            bias,
            stride,
            cache: None,
        })
    }

    pub fn init(
        l: usize,
        c_in: usize,
        c_out: usize,
        stride: (usize, usize),
        rng: &mut RngState,
    ) -> Self {
        let fan = (l * l * (c_in + c_out)) as f64;
        let std = (2.0 / fan).sqrt();
        Conv2DLayer {
            kernel: rng.normal_tensor(&[l, l, c_in, c_out], std),
            bias: Tensor::zeros(&[c_out]),
            stride,
            cache: None,
        }
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn stride(&self) -> (usize, usize) {
        self.stride
    }

    pub fn kernel_width(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[3]
    }

    pub fn out_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        if in_shape.len() != 3 || in_shape[2] != self.in_channels() {
            return Err(Error::shape_mismatch("conv out_shape", in_shape, self.kernel.shape()));
        }
        let l = self.kernel_width();
        if l > in_shape[0].min(in_shape[1]) {
            return Err(Error::InvalidShape(format!(
                "kernel width {l} exceeds input extents {in_shape:?}"
            )));
        }
        Ok(vec![
            conv_out_extent(in_shape[0], l, self.stride.0),
            conv_out_extent(in_shape[1], l, self.stride.1),
            self.out_channels(),
        ])
    }
}

/// Gather `[batch, W', H', S]` from GEMM rows ordered `x + W'*y` per item.
fn rows_to_image(rows: &Tensor, batch: usize, wp: usize, hp: usize, s: usize) -> Tensor {
    let mut out = vec![0.0; batch * wp * hp * s];
    let rd = rows.data();
    for b in 0..batch {
        for y in 0..hp {
            for x in 0..wp {
                let src = ((b * wp * hp) + x + wp * y) * s;
                let dst = (((b * wp) + x) * hp + y) * s;
                out[dst..dst + s].copy_from_slice(&rd[src..src + s]);
            }
        }
    }
    Tensor::new(vec![batch, wp, hp, s], out).expect("sized")
}

fn image_to_rows(img: &Tensor) -> Tensor {
    let (batch, wp, hp, s) = (
        img.shape()[0],
        img.shape()[1],
        img.shape()[2],
        img.shape()[3],
    );
    let mut out = vec![0.0; batch * wp * hp * s];
    let id = img.data();
    for b in 0..batch {
        for y in 0..hp {
            for x in 0..wp {
                let dst = ((b * wp * hp) + x + wp * y) * s;
                let src = (((b * wp) + x) * hp + y) * s;
                out[dst..dst + s].copy_from_slice(&id[src..src + s]);
            }
        }
    }
    Tensor::new(vec![batch * wp * hp, s], out).expect("sized")
}

impl Layer for Conv2DLayer {
    fn kind(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (mut out, cache) = conv_batch_forward(input, &self.kernel, self.stride)?;
        let s = self.out_channels();
        for row in out.data_mut().chunks_mut(s) {
            for (o, bv) in row.iter_mut().zip(self.bias.data()) {
                *o += bv;
            }
        }
        self.cache = Some(cache);
        Ok(out)
    }

    fn backward(&mut self, out_grad: &Tensor) -> Result<Backward> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Validation("conv backward before forward".into()))?;
        let (input_grad, d_kernel) =
            conv_batch_backward(&self.kernel, self.stride, cache, out_grad)?;
        let s = self.out_channels();
        let mut d_bias = Tensor::zeros(&[s]);
        for row in out_grad.data().chunks(s) {
            for (db, g) in d_bias.data_mut().iter_mut().zip(row) {
                *db += g;
            }
        }
        Ok(Backward {
            input_grad,
            param_grads: vec![("kernel".into(), d_kernel), ("bias".into(), d_bias)],
        })
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("kernel".into(), &self.kernel), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("kernel".into(), &mut self.kernel),
            ("bias".into(), &mut self.bias),
        ]
    }
}
