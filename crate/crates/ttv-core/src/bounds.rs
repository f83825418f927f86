//! Numeric evaluation of the representation-power bound expressions for the
//! CNN, DNN-TT, and CNN-TT architectures.
//!
//! These evaluators compute the closed-form expression inside the O(.)
//! literally; the constants of the underlying theorems are unknown, so no
//! claim is made that the value bounds any measured error. Reports label the
//! column "bound expression value".
//!
//! Indexing note: the rank list is taken as `r_0..r_K` with `r_0 = r_K = 1`,
//! so each factor k in 1..=K uses the adjacent pair `(r_{k-1}, r_k)`. The
//! source expressions also contain a stray symbol (an `r` with an undefined
//! subscript) which is read as `r_k`; that substitution is flagged in every
//! emitted report as `r_sub: "r_l -> r_k"`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flag string attached to report metadata wherever Eq.-(3)/(4)-style values
/// are emitted.
pub const RANK_SUBSTITUTION_NOTE: &str = "r_l -> r_k";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundParams {
    /// Output dimension q.
    pub q: usize,
    /// Input dimension d.
    pub d: usize,
    /// Layer count B.
    pub layers: usize,
    /// Final-layer kernel width L_B.
    pub kernel_width: usize,
    /// Final-layer channel count C_B.
    pub channels: usize,
    /// Per-core output extents I_k, length K.
    pub i: Vec<usize>,
    /// Per-core input extents J_k, length K.
    pub j: Vec<usize>,
    /// Ranks r_0..r_K with both ends 1, length K+1.
    pub r: Vec<usize>,
    /// Final-hidden-layer widths n_{k,B}, length K.
    pub n_b: Vec<usize>,
    /// Channel splits c_{k,B}, length K, with prod c_{k,B} = L_B * C_B.
    pub c_b: Vec<usize>,
}

impl BoundParams {
    pub fn validate(&self) -> Result<()> {
        let k = self.i.len();
        if k == 0 {
            return Err(Error::Validation("bound params need K >= 1".into()));
        }
        if self.j.len() != k || self.n_b.len() != k || self.c_b.len() != k {
            return Err(Error::Validation(format!(
                "bound params lists must all have length K = {k}"
            )));
        }
        if self.r.len() != k + 1 || self.r[0] != 1 || self.r[k] != 1 {
            return Err(Error::Validation(format!(
                "rank list needs K+1 entries with ends 1, got {:?}",
                self.r
            )));
        }
        let all = self
            .i
            .iter()
            .chain(&self.j)
            .chain(&self.r)
            .chain(&self.n_b)
            .chain(&self.c_b);
        if all.clone().any(|&v| v == 0)
            || self.q == 0
            || self.d == 0
            || self.layers == 0
            || self.kernel_width == 0
            || self.channels == 0
        {
            return Err(Error::Validation("bound params must all be >= 1".into()));
        }
        let prod: usize = self.c_b.iter().product();
        if prod != self.kernel_width * self.channels {
            return Err(Error::Validation(format!(
                "prod c_b = {prod} must equal L_B * C_B = {}",
                self.kernel_width * self.channels
            )));
        }
        Ok(())
    }

    pub fn num_cores(&self) -> usize {
        self.i.len()
    }
}

/// `q / (L_B^2 * C_B + B - 1)^(1/d)`
pub fn cnn_bound(p: &BoundParams) -> f64 {
    let base = (p.kernel_width * p.kernel_width * p.channels + p.layers - 1) as f64;
    p.q as f64 / base.powf(1.0 / p.d as f64)
}

fn tt_bound_with_widths(p: &BoundParams, widths: &[usize]) -> f64 {
    let mut out = 1.0;
    for k in 1..=p.num_cores() {
        let (r_prev, r_k) = (p.r[k - 1] as f64, p.r[k] as f64);
        let base = r_prev * r_k * widths[k - 1] as f64 + (p.layers - 1) as f64;
        let exponent = 1.0 / (r_k * r_prev * p.j[k - 1] as f64);
        out *= p.i[k - 1] as f64 / base.powf(exponent);
    }
    out
}

/// `prod_k I_k / (r_{k-1} r_k n_{k,B} + B - 1)^(1/(r_k r_{k-1} J_k))`
pub fn ttdnn_bound(p: &BoundParams) -> f64 {
    tt_bound_with_widths(p, &p.n_b)
}

/// Same expression with the widths replaced by the channel splits c_{k,B}.
pub fn cnntt_bound(p: &BoundParams) -> f64 {
    tt_bound_with_widths(p, &p.c_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_params() -> BoundParams {
        BoundParams {
            q: 257,
            d: 771,
            layers: 4,
            kernel_width: 3,
            channels: 128,
            i: vec![4, 4],
            j: vec![4, 4],
            r: vec![1, 2, 1],
            n_b: vec![8, 8],
            c_b: vec![24, 16],
        }
    }

    #[test]
    fn validation_rules() {
        assert!(base_params().validate().is_ok());
        let mut p = base_params();
        p.r = vec![1, 2, 2];
        assert!(p.validate().is_err());
        let mut p = base_params();
        p.c_b = vec![3, 16]; // prod != L_B * C_B
        assert!(p.validate().is_err());
        let mut p = base_params();
        p.n_b = vec![8];
        assert!(p.validate().is_err());
    }

    #[test]
    fn cnn_bound_all_ones_is_one() {
        let p = BoundParams {
            q: 1,
            d: 1,
            layers: 1,
            kernel_width: 1,
            channels: 1,
            i: vec![1],
            j: vec![1],
            r: vec![1, 1],
            n_b: vec![1],
            c_b: vec![1],
        };
        assert_eq!(cnn_bound(&p), 1.0);
    }

    #[test]
    fn cnn_bound_matches_direct_arithmetic() {
        let p = base_params();
        // 257 / (9*128 + 3)^(1/771)
        let want = 257.0 / (1155.0f64).powf(1.0 / 771.0);
        assert!((cnn_bound(&p) - want).abs() < 1e-12);
        assert!((want - 254.65).abs() < 0.02, "value {want}");
    }

    #[test]
    fn tt_bounds_match_direct_arithmetic() {
        let mut p = base_params();
        p.layers = 3;
        // two identical factors: 4 / (1*2*8 + 2)^(1/(2*1*4))
        let f1 = 4.0 / (18.0f64).powf(1.0 / 8.0);
        let f2 = 4.0 / (2.0 * 1.0 * 8.0 + 2.0f64).powf(1.0 / (1.0 * 2.0 * 4.0));
        let want = f1 * f2;
        assert!((ttdnn_bound(&p) - want).abs() < 1e-12);
    }

    #[test]
    fn all_ones_tt_bound_is_one() {
        let p = BoundParams {
            q: 1,
            d: 1,
            layers: 1,
            kernel_width: 1,
            channels: 1,
            i: vec![1],
            j: vec![1],
            r: vec![1, 1],
            n_b: vec![1],
            c_b: vec![1],
        };
        assert_eq!(ttdnn_bound(&p), 1.0);
        assert_eq!(cnntt_bound(&p), 1.0);
    }

    #[test]
    fn cnntt_equals_ttdnn_when_widths_match_splits() {
        let mut p = base_params();
        p.n_b = p.c_b.clone();
        assert_eq!(ttdnn_bound(&p), cnntt_bound(&p));
    }

    #[test]
    fn monotonicity_in_widths_and_outputs() {
        let p = base_params();
        let v0 = cnn_bound(&p);
        let mut wider = p.clone();
        wider.channels += 16;
        assert!(cnn_bound(&wider) < v0);

        let t0 = ttdnn_bound(&p);
        let mut deeper = p.clone();
        deeper.n_b[0] += 4;
        assert!(ttdnn_bound(&deeper) < t0);
        let mut bigger_i = p.clone();
        bigger_i.i[0] += 1;
        assert!(ttdnn_bound(&bigger_i) > t0);
    }
}
