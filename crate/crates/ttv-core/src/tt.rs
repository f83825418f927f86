//! Tensor-train representation of weight matrices.
//!
//! A matrix `W` of extents `(prod m_k) x (prod n_k)` is carried as K cores,
//! core k of extents `[r_k, m_k, n_k, r_{k+1}]` with `r_1 = r_{K+1} = 1`:
//!
//!   W((i_1, j_1), ..., (i_K, j_K)) = prod_k C_k(r_k, i_k, j_k, r_{k+1})
//!
//! evaluated as the rank-indexed chain of matrix products. Composite index
//! convention, fixed once for the whole crate: the flattened row index of W
//! treats `i_1` as the fastest-varying digit (little-endian in k), i.e.
//! `row = i_1 + m_1*i_2 + m_1*m_2*i_3 + ...`, and columns likewise over the
//! `j_k`. Storage cost is `sum_k m_k*n_k*r_k*r_{k+1}` against
//! `prod_k m_k*n_k` for the dense matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Backward, Layer, Mode};
use crate::linalg::{svd, truncation_rank};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TTShape {
    pub m: Vec<usize>,
    pub n: Vec<usize>,
    pub r: Vec<usize>,
}

impl TTShape {
    pub fn new(m: Vec<usize>, n: Vec<usize>, r: Vec<usize>) -> Result<Self> {
        let shape = TTShape { m, n, r };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.m.len();
        if k == 0 || self.n.len() != k || self.r.len() != k + 1 {
            return Err(Error::Validation(format!(
                "tt shape needs K >= 1 with |m| = |n| = K and |r| = K+1, got m={:?} n={:?} r={:?}",
                self.m, self.n, self.r
            )));
        }
        if self.r[0] != 1 || self.r[k] != 1 {
            return Err(Error::Validation(format!(
                "boundary tt ranks must be 1, got r={:?}",
                self.r
            )));
        }
        if self.m.iter().chain(&self.n).chain(&self.r).any(|&v| v == 0) {
            return Err(Error::Validation(
                "tt extents and ranks must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn num_cores(&self) -> usize {
        self.m.len()
    }

    /// Row count of the represented matrix.
    pub fn out_dim(&self) -> usize {
        self.m.iter().product()
    }

    /// Column count of the represented matrix.
    pub fn in_dim(&self) -> usize {
        self.n.iter().product()
    }

    pub fn core_extents(&self, k: usize) -> [usize; 4] {
        [self.r[k], self.m[k], self.n[k], self.r[k + 1]]
    }
}

/// Number of scalars stored by the cores: `sum_k m_k*n_k*r_k*r_{k+1}`.
pub fn tt_param_count(shape: &TTShape) -> usize {
    (0..shape.num_cores())
        .map(|k| shape.m[k] * shape.n[k] * shape.r[k] * shape.r[k + 1])
        .sum()
}

#[derive(Debug, Clone)]
pub struct TTCores {
    shape: TTShape,
    cores: Vec<Tensor>,
}

impl TTCores {
    pub fn new(shape: TTShape, cores: Vec<Tensor>) -> Result<Self> {
        shape.validate()?;
        if cores.len() != shape.num_cores() {
            return Err(Error::Validation(format!(
                "expected {} cores, got {}",
                shape.num_cores(),
                cores.len()
            )));
        }
        for (k, core) in cores.iter().enumerate() {
            let want = shape.core_extents(k);
            if core.shape() != want {
                return Err(Error::shape_mismatch("tt core", core.shape(), &want));
            }
        }
        Ok(TTCores { shape, cores })
    }

    pub fn shape(&self) -> &TTShape {
        &self.shape
    }

    pub fn cores(&self) -> &[Tensor] {
        &self.cores
    }

    pub fn cores_mut(&mut self) -> &mut [Tensor] {
        &mut self.cores
    }

    pub fn param_count(&self) -> usize {
        tt_param_count(&self.shape)
    }

    /// Gaussian cores with per-core std `sqrt(2 / (n_k r_k + m_k r_{k+1}))`,
    /// the TT analogue of Glorot scaling (for K = 1 it reduces to variance
    /// `2 / (n + m)`).
    pub fn init_random(shape: TTShape, rng: &mut RngState) -> Result<Self> {
        shape.validate()?;
        let cores = (0..shape.num_cores())
            .map(|k| {
                let fan = (shape.n[k] * shape.r[k] + shape.m[k] * shape.r[k + 1]) as f64;
                rng.normal_tensor(&shape.core_extents(k), (2.0 / fan).sqrt())
            })
            .collect();
        TTCores::new(shape, cores)
    }
}

/// Dense matrix represented by the cores, `[(prod m_k) x (prod n_k)]`.
///
/// The chain product is accumulated left to right, giving the tensor in
/// interleaved `(i_1, j_1, i_2, j_2, ...)` axis order, which is then
/// permuted into the composite row/column convention.
pub fn tt_reconstruct(tt: &TTCores) -> Result<Tensor> {
    let shape = tt.shape();
    let kc = shape.num_cores();

    let mut acc = tt.cores()[0].reshape(&[shape.m[0] * shape.n[0], shape.r[1]])?;
    for k in 1..kc {
        let [rl, m, n, rr] = shape.core_extents(k);
        let g = tt.cores()[k].reshape(&[rl, m * n * rr])?;
        let p = acc.shape()[0];
        acc = acc.matmul(&g)?.reshape(&[p * m * n, rr])?;
    }

    let mut interleaved = Vec::with_capacity(2 * kc);
    for k in 0..kc {
        interleaved.push(shape.m[k]);
        interleaved.push(shape.n[k]);
    }
    let t = acc.reshape(&interleaved)?;
    // composite rows are (i_K, ..., i_1) slowest-first, columns likewise
    let mut order = Vec::with_capacity(2 * kc);
    for k in (0..kc).rev() {
        order.push(2 * k);
    }
    for k in (0..kc).rev() {
        order.push(2 * k + 1);
    }
    t.permute(&order)?
        .reshape(&[shape.out_dim(), shape.in_dim()])
}

/// Evaluation of the defining product over every index tuple. Exponential
/// blow-up in K; test oracle only.
pub fn tt_reconstruct_bruteforce(tt: &TTCores) -> Result<Tensor> {
    let shape = tt.shape();
    let kc = shape.num_cores();
    let (rows, cols) = (shape.out_dim(), shape.in_dim());
    let mut out = Tensor::zeros(&[rows, cols]);
    let mut is = vec![0usize; kc];
    let mut js = vec![0usize; kc];
    for row in 0..rows {
        let mut rest = row;
        for k in 0..kc {
            is[k] = rest % shape.m[k];
            rest /= shape.m[k];
        }
        for col in 0..cols {
            let mut rest = col;
            for k in 0..kc {
                js[k] = rest % shape.n[k];
                rest /= shape.n[k];
            }
            // chain of (r_k x r_{k+1}) slices
            let mut vec = vec![1.0];
            for k in 0..kc {
                let rr = shape.r[k + 1];
                let core = &tt.cores()[k];
                let mut next = vec![0.0; rr];
                for (a, v) in vec.iter().enumerate() {
                    for (b, slot) in next.iter_mut().enumerate() {
                        *slot += v * core.at(&[a, is[k], js[k], b]);
                    }
                }
                vec = next;
            }
            out.set(&[row, col], vec[0]);
        }
    }
    Ok(out)
}

/// Intermediates of one batched contraction sweep, kept for backward.
struct TtSweep {
    /// R_k fed into step k's product, `[r_k*n_k, cols_k]`.
    r_mats: Vec<Tensor>,
    /// Core k viewed as `[r_k*n_k, m_k*r_{k+1}]`.
    m_mats: Vec<Tensor>,
    batch: usize,
}

fn core_as_matrix(core: &Tensor, ext: [usize; 4]) -> Result<Tensor> {
    let [rl, m, n, rr] = ext;
    core.permute(&[0, 2, 1, 3])?.reshape(&[rl * n, m * rr])
}

/// Batched `y = W x` evaluated core by core without materializing W.
/// `x: [batch, prod n_k]` -> `[batch, prod m_k]`.
///
/// The running tensor entering step k is kept as the matrix
/// `[r_k*n_k, Jrest_k * Iprev_k * batch]` where Jrest stacks the not yet
/// consumed j digits (j_{k+1} slowest) and Iprev the already produced i
/// digits as a little-endian composite.
fn tt_forward_sweep(tt: &TTCores, x: &Tensor) -> Result<(Tensor, TtSweep)> {
    let shape = tt.shape();
    let kc = shape.num_cores();
    let (n_total, m_total) = (shape.in_dim(), shape.out_dim());
    if x.rank() != 2 || x.shape()[1] != n_total {
        return Err(Error::shape_mismatch("tt matvec", x.shape(), &[0, n_total]));
    }
    let batch = x.shape()[0];

    // x[b, col] with col little-endian in j: axes [B, n_K, ..., n_1]
    let mut view = vec![batch];
    view.extend(shape.n.iter().rev());
    let mut order: Vec<usize> = (1..=kc).rev().collect();
    order.push(0);
    let jrest0: usize = shape.n[1..].iter().product();
    let mut r = x
        .reshape(&view)?
        .permute(&order)?
        .reshape(&[shape.n[0], jrest0 * batch])?;

    let mut sweep = TtSweep {
        r_mats: Vec::with_capacity(kc),
        m_mats: Vec::with_capacity(kc),
        batch,
    };

    let mut iprev = 1usize;
    for k in 0..kc {
        let ext = shape.core_extents(k);
        let [_, m, _, rr] = ext;
        let mmat = core_as_matrix(&tt.cores()[k], ext)?;
        let z = mmat.transposed()?.matmul(&r)?; // [m*rr, Jrest*Iprev*B]
        sweep.r_mats.push(r.clone());
        sweep.m_mats.push(mmat);

        if k + 1 < kc {
            let n_next = shape.n[k + 1];
            let jrest_next: usize = shape.n[k + 2..].iter().product();
            // [m_k, rr, n_{k+1}, Jrest', Iprev, B]
            //   -> [rr, n_{k+1}, Jrest', m_k, Iprev, B]
            // placing m_k as the slow digit of the grown Iprev block
            let z6 = z.reshape(&[m, rr, n_next, jrest_next, iprev, batch])?;
            r = z6
                .permute(&[1, 2, 3, 0, 4, 5])?
                .reshape(&[rr * n_next, jrest_next * m * iprev * batch])?;
            iprev *= m;
        } else {
            // rr = 1 here: [m_K, Iprev, B] -> [B, m_K, Iprev]
            let z3 = z.reshape(&[m, iprev, batch])?;
            let y = z3.permute(&[2, 0, 1])?.reshape(&[batch, m_total])?;
            return Ok((y, sweep));
        }
    }
    unreachable!("loop returns at the last core")
}

/// Reverse sweep: gradients for every core plus the input.
fn tt_backward_sweep(tt: &TTCores, sweep: &TtSweep, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let shape = tt.shape();
    let kc = shape.num_cores();
    let batch = sweep.batch;
    let m_total = shape.out_dim();
    if dy.shape() != [batch, m_total] {
        return Err(Error::shape_mismatch(
            "tt backward",
            dy.shape(),
            &[batch, m_total],
        ));
    }

    let iprev_last: usize = shape.m[..kc - 1].iter().product();
    let m_last = shape.m[kc - 1];
    // invert the final [m_K, Iprev, B] -> [B, m_K, Iprev] permute
    let mut dz = dy
        .reshape(&[batch, m_last, iprev_last])?
        .permute(&[1, 2, 0])?
        .reshape(&[m_last, iprev_last * batch])?;

    let mut core_grads = vec![Tensor::zeros(&[1]); kc];
    for k in (0..kc).rev() {
        let ext = shape.core_extents(k);
        let [rl, m, n, rr] = ext;
        // Z_k = M_k^T R_k  =>  dM = R dZ^T, dR = M dZ
        let dm = sweep.r_mats[k].matmul(&dz.transposed()?)?;
        core_grads[k] = dm.reshape(&[rl, n, m, rr])?.permute(&[0, 2, 1, 3])?;
        let dr = sweep.m_mats[k].matmul(&dz)?;

        if k > 0 {
            // invert the 6-axis reorganization done after step k-1
            let m_prev = shape.m[k - 1];
            let rr_prev = shape.r[k];
            let jrest: usize = shape.n[k + 1..].iter().product();
            let iprev: usize = shape.m[..k - 1].iter().product();
            dz = dr
                .reshape(&[rr_prev, n, jrest, m_prev, iprev, batch])?
                .permute(&[3, 0, 1, 2, 4, 5])?
                .reshape(&[m_prev * rr_prev, n * jrest * iprev * batch])?;
        } else {
            // invert the input unfolding
            let mut view = shape.n.clone();
            view.push(batch);
            let mut order = vec![kc];
            order.extend((0..kc).rev());
            let dx = dr
                .reshape(&view)?
                .permute(&order)?
                .reshape(&[batch, shape.in_dim()])?;
            return Ok((dx, core_grads));
        }
    }
    unreachable!("loop returns at core 0")
}

/// `y = W x` for a single vector, computed by sequential core contractions.
pub fn tt_mat_vec(tt: &TTCores, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 || x.len() != tt.shape().in_dim() {
        return Err(Error::shape_mismatch(
            "tt matvec",
            x.shape(),
            &[tt.shape().in_dim()],
        ));
    }
    let batched = x.reshape(&[1, x.len()])?;
    let (y, _) = tt_forward_sweep(tt, &batched)?;
    y.reshape(&[tt.shape().out_dim()])
}

/// Result of `tt_svd`: the cores plus the Frobenius error bound accumulated
/// from the discarded singular values,
/// `sqrt(sum_k sum_{i > rank_k} sigma_{k,i}^2)`.
pub struct TtSvdResult {
    pub cores: TTCores,
    pub error_bound: f64,
}

/// Sequential SVD factorization of a dense matrix into TT cores.
///
/// The matrix is reshaped into a 2K-way tensor with the (m_k, n_k) pairs
/// grouped per core, then repeatedly unfolded and split by SVD. At step k
/// the kept rank is `min(max_ranks[k], smallest rank capturing 1 - tol^2 of
/// the squared singular mass)`; singular values are absorbed into the right
/// factor so left factors stay orthonormal. `max_ranks = None` leaves the
/// internal ranks unbounded; `tol = 0` keeps everything above machine noise.
pub fn tt_svd(
    w: &Tensor,
    m: &[usize],
    n: &[usize],
    max_ranks: Option<&[usize]>,
    tol: f64,
) -> Result<TtSvdResult> {
    let kc = m.len();
    if kc == 0 || n.len() != kc {
        return Err(Error::Validation(format!(
            "tt_svd factor lists must be non-empty and of equal length, got m={m:?} n={n:?}"
        )));
    }
    let (rows, cols): (usize, usize) = (m.iter().product(), n.iter().product());
    if w.rank() != 2 || w.shape() != [rows, cols] {
        return Err(Error::shape_mismatch("tt_svd", w.shape(), &[rows, cols]));
    }
    if let Some(mr) = max_ranks {
        if mr.len() != kc - 1 {
            return Err(Error::Validation(format!(
                "expected {} internal max ranks, got {}",
                kc - 1,
                mr.len()
            )));
        }
        if mr.iter().any(|&r| r == 0) {
            return Err(Error::Validation("max ranks must be >= 1".into()));
        }
    }

    // rows are little-endian in i: axes (i_K, ..., i_1); same for columns
    let mut view: Vec<usize> = m.iter().rev().copied().collect();
    view.extend(n.iter().rev());
    // regroup into (i_1, j_1, i_2, j_2, ...)
    let mut order = Vec::with_capacity(2 * kc);
    for k in 1..=kc {
        order.push(kc - k);
        order.push(2 * kc - k);
    }
    let grouped = w.reshape(&view)?.permute(&order)?;

    let mut ranks = vec![1usize; kc + 1];
    let mut cores = Vec::with_capacity(kc);
    let mut discarded_energy = 0.0;
    let rest0: usize = (1..kc).map(|k| m[k] * n[k]).product();
    let mut c = grouped.reshape(&[m[0] * n[0], rest0])?;

    for k in 0..kc - 1 {
        let f = svd(&c)?;
        let cap = max_ranks.map(|mr| mr[k]);
        let rank = truncation_rank(&f.sigma, tol, cap);
        for s in &f.sigma[rank..] {
            discarded_energy += s * s;
        }
        ranks[k + 1] = rank;

        // truncated left factor becomes core k; its row index is already
        // (r_k, i_k, j_k) in row-major order
        let u_rows = f.u.shape()[0];
        let u_cols = f.u.shape()[1];
        let mut u_data = Vec::with_capacity(u_rows * rank);
        for i in 0..u_rows {
            let row = &f.u.data()[i * u_cols..i * u_cols + rank];
            u_data.extend_from_slice(row);
        }
        cores.push(Tensor::new(vec![ranks[k], m[k], n[k], rank], u_data)?);

        // carry sigma * V^T rightward and fold in the next pair
        let cols_rest = c.shape()[1];
        let mut carry = Vec::with_capacity(rank * cols_rest);
        for i in 0..rank {
            let s = f.sigma[i];
            for j in 0..cols_rest {
                carry.push(s * f.vt.at(&[i, j]));
            }
        }
        let next_pair = m[k + 1] * n[k + 1];
        c = Tensor::new(vec![rank * next_pair, cols_rest / next_pair], carry)?;
    }

    let last = c.reshape(&[ranks[kc - 1], m[kc - 1], n[kc - 1], 1])?;
    cores.push(last);

    let shape = TTShape::new(m.to_vec(), n.to_vec(), ranks)?;
    Ok(TtSvdResult {
        cores: TTCores::new(shape, cores)?,
        error_bound: discarded_energy.sqrt(),
    })
}

/// Fully-connected layer whose weight matrix lives in TT form. Output width
/// is `prod m_k`, input width `prod n_k`; forward and backward run as core
/// contraction sweeps without ever materializing the dense matrix.
pub struct TTLayer {
    cores: TTCores,
    bias: Tensor, // [prod m_k]
    sweep: Option<TtSweep>,
}

impl TTLayer {
    pub fn new(cores: TTCores, bias: Tensor) -> Result<Self> {
        if bias.shape() != [cores.shape().out_dim()] {
            return Err(Error::shape_mismatch(
                "tt layer bias",
                bias.shape(),
                &[cores.shape().out_dim()],
            ));
        }
        Ok(TTLayer {
            cores,
            bias,
            sweep: None,
        })
    }

    pub fn init(shape: TTShape, rng: &mut RngState) -> Result<Self> {
        let out = shape.out_dim();
        Ok(TTLayer {
            cores: TTCores::init_random(shape, rng)?,
            bias: Tensor::zeros(&[out]),
            sweep: None,
        })
    }

    pub fn cores(&self) -> &TTCores {
        &self.cores
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn in_dim(&self) -> usize {
        self.cores.shape().in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.cores.shape().out_dim()
    }
}

impl Layer for TTLayer {
    fn kind(&self) -> &'static str {
        "tt"
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let (mut y, sweep) = tt_forward_sweep(&self.cores, input)?;
        let out_dim = self.out_dim();
        for row in y.data_mut().chunks_mut(out_dim) {
            for (o, b) in row.iter_mut().zip(self.bias.data()) {
                *o += b;
            }
        }
        self.sweep = Some(sweep);
        Ok(y)
    }

    fn backward(&mut self, out_grad: &Tensor) -> Result<Backward> {
        let sweep = self
            .sweep
            .as_ref()
            .ok_or_else(|| Error::Validation("tt backward before forward".into()))?;
        let (dx, core_grads) = tt_backward_sweep(&self.cores, sweep, out_grad)?;
        let out_dim = self.out_dim();
        let mut d_bias = Tensor::zeros(&[out_dim]);
        for row in out_grad.data().chunks(out_dim) {
            for (db, g) in d_bias.data_mut().iter_mut().zip(row) {
                *db += g;
            }
        }
        let mut param_grads: Vec<(String, Tensor)> = core_grads
            .into_iter()
            .enumerate()
            .map(|(k, g)| (format!("core.{k}"), g))
            .collect();
        param_grads.push(("bias".into(), d_bias));
        Ok(Backward {
            input_grad: dx,
            param_grads,
        })
    }

    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .cores
            .cores()
            .iter()
            .enumerate()
            .map(|(k, c)| (format!("core.{k}"), c))
            .collect();
        out.push(("bias".into(), &self.bias));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .cores
            .cores_mut()
            .iter_mut()
            .enumerate()
            .map(|(k, c)| (format!("core.{k}"), c))
            .collect();
        out.push(("bias".into(), &mut self.bias));
        out
    }
}
