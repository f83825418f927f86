//! Dense N-dimensional tensors of `f64` in row-major order.
//!
//! Row-major means the last axis varies fastest: for shape `[a, b, c]` the
//! element at multi-index `(i, j, k)` lives at flat offset `(i*b + j)*c + k`.
//! Every other module builds on this layout convention.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// TTV1 tensor file magic: the bytes `54 54 56 31` ("TTV1").
pub const TTV1_MAGIC: [u8; 4] = *b"TTV1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::InvalidShape("rank must be >= 1".into()));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidShape(format!(
                "extents must be >= 1, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Rank-1 tensor from a plain vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 tensor from rows (row-major).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidShape("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Element at a full multi-index. Intended for tests and small oracles;
    /// hot paths index `data()` directly.
    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.rank());
        let strides = self.strides();
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let strides = self.strides();
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[off] = value;
    }

    /// Same data, new shape metadata. Element count must be preserved.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let n: usize = new_shape.iter().product();
        if new_shape.is_empty() || new_shape.iter().any(|&e| e == 0) || n != self.len() {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({} elements)",
                self.shape,
                self.len(),
                new_shape,
                n
            )));
        }
        Ok(Tensor {
            shape: new_shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Axis permutation with physical reordering to row-major.
    ///
    /// `order` lists, for each output axis, the input axis it comes from
    /// (numpy `transpose` convention): `out.shape[d] = in.shape[order[d]]`
    /// and `out[j_0, .., j_{r-1}] = in[idx]` with `idx[order[d]] = j_d`.
    pub fn permute(&self, order: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        if order.len() != r {
            return Err(Error::InvalidPermutation {
                order: order.to_vec(),
                rank: r,
            });
        }
        let mut seen = vec![false; r];
        for &a in order {
            if a >= r || seen[a] {
                return Err(Error::InvalidPermutation {
                    order: order.to_vec(),
                    rank: r,
                });
            }
            seen[a] = true;
        }

        let out_shape: Vec<usize> = order.iter().map(|&a| self.shape[a]).collect();
        let in_strides = self.strides();
        // stride of output axis d, measured in the input's flat layout
        let gather: Vec<usize> = order.iter().map(|&a| in_strides[a]).collect();

        let mut out = vec![0.0; self.len()];
        let mut idx = vec![0usize; r];
        let mut src = 0usize;
        for slot in out.iter_mut() {
            *slot = self.data[src];
            // odometer increment over the output multi-index
            for d in (0..r).rev() {
                idx[d] += 1;
                src += gather[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                src -= gather[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        Tensor::new(out_shape, out)
    }

    /// Rank-2 transpose.
    pub fn transposed(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::InvalidShape(format!(
                "transpose needs rank 2, got {:?}",
                self.shape
            )));
        }
        self.permute(&[1, 0])
    }

    /// Matrix product of two rank-2 tensors.
    ///
    /// Straightforward loop with the `k` dimension innermost-ordered per
    /// output element, so results are bitwise equal to the naive
    /// `c[i][j] = sum_k a[i][k] b[k][j]` triple loop. No BLAS.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape_mismatch("matmul", &self.shape, &other.shape));
        }
        let (p, q) = (self.shape[0], self.shape[1]);
        let r = other.shape[1];
        let a = &self.data;
        let b = &other.data;
        let mut c = vec![0.0; p * r];
        for i in 0..p {
            let crow = &mut c[i * r..(i + 1) * r];
            let arow = &a[i * q..(i + 1) * q];
            for (k, &aik) in arow.iter().enumerate() {
                let brow = &b[k * r..(k + 1) * r];
                for (cj, &bkj) in crow.iter_mut().zip(brow) {
                    *cj += aik * bkj;
                }
            }
        }
        Tensor::new(vec![p, r], c)
    }

    /// Elementwise map.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, a: f64) -> Tensor {
        self.map(|x| a * x)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape_mismatch("add", &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape_mismatch("sub", &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| x - y)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    /// Serializes in the TTV1 format: magic `54 54 56 31`, u32 LE rank,
    /// rank x u64 LE extents, then the row-major payload of f64 LE values.
    pub fn write_ttv1<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&TTV1_MAGIC)?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_ttv1<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != TTV1_MAGIC {
            return Err(Error::Format(format!(
                "bad TTV1 magic {magic:02x?}, expected {TTV1_MAGIC:02x?}"
            )));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rank = u32::from_le_bytes(b4) as usize;
        if rank == 0 {
            return Err(Error::Format("TTV1 rank must be >= 1".into()));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut b8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut b8)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Tensor::new(shape, data)
    }

    pub fn to_ttv1_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(4 + 4 + 8 * self.rank() + 8 * self.len());
        self.write_ttv1(&mut buf).expect("write to Vec");
        buf
    }

    pub fn from_ttv1_bytes(bytes: &[u8]) -> Result<Tensor> {
        let mut cur = bytes;
        Tensor::read_ttv1(&mut cur)
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Inverse of a permutation given in `permute` convention.
pub fn invert_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; order.len()];
    for (d, &a) in order.iter().enumerate() {
        inv[a] = d;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (p, q) = (a.shape()[0], a.shape()[1]);
        let r = b.shape()[1];
        let mut c = Tensor::zeros(&[p, r]);
        for i in 0..p {
            for j in 0..r {
                let mut acc = 0.0;
                for k in 0..q {
                    acc += a.at(&[i, k]) * b.at(&[k, j]);
                }
                c.set(&[i, j], acc);
            }
        }
        c
    }

    #[test]
    fn matmul_identity_cases() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        assert_eq!(eye.matmul(&m).unwrap(), m);
        let m2 = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m2.matmul(&eye).unwrap(), m2);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        let expect = Tensor::from_rows(&[vec![19.0, 22.0], vec![43.0, 50.0]]).unwrap();
        assert_eq!(c, expect);

        let mut rng = RngState::new(11);
        for _ in 0..10 {
            let a = rng.normal_tensor(&[4, 7], 1.0);
            let b = rng.normal_tensor(&[7, 3], 1.0);
            let got = a.matmul(&b).unwrap();
            let want = naive_matmul(&a, &b);
            // identical accumulation order, so bitwise equal
            assert_eq!(got, want);
        }
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn matmul_associative_within_tolerance() {
        let mut rng = RngState::new(99);
        for _ in 0..20 {
            let a = rng.normal_tensor(&[3, 5], 1.0);
            let b = rng.normal_tensor(&[5, 4], 1.0);
            let c = rng.normal_tensor(&[4, 6], 1.0);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.frobenius_norm().max(1.0);
            assert!(left.max_abs_diff(&right) / scale < 1e-9);
        }
    }

    #[test]
    fn reshape_preserves_data_order() {
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let r = t.reshape(&[2, 2]).unwrap();
        assert_eq!(r.shape(), &[2, 2]);
        assert_eq!(r.data(), t.data());

        let t = Tensor::new(vec![2, 3], (0..6).map(|x| x as f64).collect()).unwrap();
        let back = t.reshape(&[6]).unwrap().reshape(&[2, 3]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn reshape_flat_to_4d_index_oracle() {
        // flat index i maps to (i1,i2,i3,i4) with i4 fastest in row-major
        let t = Tensor::from_vec((0..256).map(|x| x as f64).collect());
        let r = t.reshape(&[4, 4, 4, 4]).unwrap();
        for i in 0..256usize {
            let (i1, i2, i3, i4) = (i / 64, (i / 16) % 4, (i / 4) % 4, i % 4);
            assert_eq!(r.at(&[i1, i2, i3, i4]), i as f64);
        }
    }

    #[test]
    fn reshape_count_mismatch_errors() {
        let t = Tensor::from_vec(vec![1.0; 6]);
        assert!(t.reshape(&[4]).is_err());
        assert!(t.reshape(&[0, 6]).is_err());
    }

    #[test]
    fn permute_transpose_oracle() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(p.at(&[j, i]), t.at(&[i, j]));
            }
        }
    }

    #[test]
    fn permute_identity_and_inverse() {
        let mut rng = RngState::new(3);
        let t = rng.normal_tensor(&[2, 3, 4], 1.0);
        assert_eq!(t.permute(&[0, 1, 2]).unwrap(), t);

        let order = [2, 0, 1];
        let inv = invert_permutation(&order);
        let round = t.permute(&order).unwrap().permute(&inv).unwrap();
        assert_eq!(round, t);
    }

    #[test]
    fn permute_rejects_invalid_orders() {
        let t = Tensor::zeros(&[2, 2]);
        assert!(t.permute(&[0, 0]).is_err());
        assert!(t.permute(&[0, 2]).is_err());
        assert!(t.permute(&[0]).is_err());
    }

    #[test]
    fn permute_preserves_value_multiset() {
        let mut rng = RngState::new(8);
        let t = rng.normal_tensor(&[3, 4, 5], 2.0);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert!((t.sum() - p.sum()).abs() < 1e-12);
        assert!((t.sum_squares() - p.sum_squares()).abs() < 1e-12);
        // reshape is metadata-only: bitwise identical data
        let r = t.reshape(&[60]).unwrap();
        assert_eq!(r.data(), t.data());
    }

    #[test]
    fn ttv1_round_trip_and_validation() {
        let mut rng = RngState::new(1234);
        let t = rng.normal_tensor(&[3, 5, 2], 1.5);
        let bytes = t.to_ttv1_bytes();
        assert_eq!(&bytes[..4], b"TTV1");
        let back = Tensor::from_ttv1_bytes(&bytes).unwrap();
        assert_eq!(back, t);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Tensor::from_ttv1_bytes(&bad).is_err());
        // truncated payload
        assert!(Tensor::from_ttv1_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn ttv1_layout_is_byte_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let bytes = t.to_ttv1_bytes();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"TTV1");
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        expect.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(bytes, expect);
    }
}
