//! Numeric primitives. Every forward op here is a pure function with a fixed
//! accumulation order (ascending index), which is what makes the incremental
//! streaming paths reproduce offline results exactly: both call these same
//! functions on the same operand values.
//!
//! The checked public entry points ([`softmax`], [`log_sum_exp`],
//! [`layer_norm`]) validate their inputs; the `pub(crate)` raw kernels assert
//! shape preconditions and are wired into both engines and the tape backward
//! closures.

use crate::error::{Error, Result};
use crate::kernel::tensor::Tensor;

/// Which positions of a score matrix row may receive attention weight.
/// Every variant yields one contiguous column range per row, so masked
/// softmax can run on exactly the permitted slice.
#[derive(Debug, Clone, PartialEq)]
pub enum AttnMask {
    /// Every column.
    Full,
    /// Columns 0..=row.
    Causal,
    /// Columns max(0, row−tau)..=row: left-limited self-attention.
    Band { tau: usize },
    /// Causal within consecutive row blocks starting at `starts` (ascending,
    /// first entry 0). Rows of one block never see another block: used to
    /// score a packed batch of candidate sequences in one pass.
    Blocks { starts: Vec<usize> },
}

impl AttnMask {
    /// Permitted column range [lo, hi) for `row` in a matrix of `ncols`.
    pub fn range(&self, row: usize, ncols: usize) -> (usize, usize) {
        match self {
            AttnMask::Full => (0, ncols),
            AttnMask::Causal => {
                assert!(row < ncols, "causal mask needs square-or-wider scores");
                (0, row + 1)
            }
            AttnMask::Band { tau } => {
                assert!(row < ncols, "band mask needs square-or-wider scores");
                (row.saturating_sub(*tau), row + 1)
            }
            AttnMask::Blocks { starts } => {
                assert!(row < ncols, "block mask needs square-or-wider scores");
                debug_assert!(!starts.is_empty() && starts[0] == 0);
                let block = starts.partition_point(|&s| s <= row) - 1;
                (starts[block], row + 1)
            }
        }
    }
}

/// log(Σ exp(x_i)), stable under large magnitudes. Empty input is a
/// precondition violation. All entries −∞ yields −∞.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "log_sum_exp of an empty list");
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut s = 0.0;
    for &x in xs {
        s += (x - m).exp();
    }
    m + s.ln()
}

/// Two-argument [`log_sum_exp`], the hot path of the CTC recursions.
pub fn lse2(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Three-argument [`log_sum_exp`].
pub fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

/// Softmax along `axis` (0 = down each column, 1 = along each row), computed
/// with max-subtraction. Non-finite input is a numeric-domain error.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    assert!(axis < 2, "softmax axis must be 0 or 1");
    if !x.all_finite() {
        return Err(Error::Numeric("softmax input contains NaN or Inf".into()));
    }
    if axis == 1 {
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            softmax_slice(row);
        }
        Ok(out)
    } else {
        let t = transpose(x);
        let s = softmax(&t, 1)?;
        Ok(transpose(&s))
    }
}

/// In-place softmax of one contiguous slice with max-subtraction.
pub(crate) fn softmax_slice(xs: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Per-row normalization to zero mean and unit variance (biased variance,
/// `eps` inside the square root), then elementwise gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    if gain.shape() != (1, x.cols()) || bias.shape() != (1, x.cols()) {
        return Err(Error::Shape(format!(
            "layer_norm: x has {} columns but gain is {:?} and bias {:?}",
            x.cols(),
            gain.shape(),
            bias.shape()
        )));
    }
    Ok(layer_norm_rows(x, gain, bias, eps))
}

pub(crate) fn layer_norm_rows(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Tensor {
    let d = x.cols();
    let mut out = Tensor::zeros(x.rows(), d);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let mut mean = 0.0;
        for &v in xr {
            mean += v;
        }
        mean /= d as f64;
        let mut var = 0.0;
        for &v in xr {
            var += (v - mean) * (v - mean);
        }
        var /= d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let or = out.row_mut(r);
        for c in 0..d {
            or[c] = (xr[c] - mean) * inv * gain.at(0, c) + bias.at(0, c);
        }
    }
    out
}

/// (dx, dgain, dbias) of [`layer_norm_rows`].
pub(crate) fn layer_norm_back(
    x: &Tensor,
    gain: &Tensor,
    eps: f64,
    grad: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = x.cols();
    let mut dx = Tensor::zeros(x.rows(), d);
    let mut dgain = Tensor::zeros(1, d);
    let mut dbias = Tensor::zeros(1, d);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let gr = grad.row(r);
        let mut mean = 0.0;
        for &v in xr {
            mean += v;
        }
        mean /= d as f64;
        let mut var = 0.0;
        for &v in xr {
            var += (v - mean) * (v - mean);
        }
        var /= d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        // xhat and the two row means the chain rule needs.
        let mut m_dxhat = 0.0;
        let mut m_dxhat_xhat = 0.0;
        let mut xhat = vec![0.0; d];
        let mut dxhat = vec![0.0; d];
        for c in 0..d {
            xhat[c] = (xr[c] - mean) * inv;
            dxhat[c] = gr[c] * gain.at(0, c);
            m_dxhat += dxhat[c];
            m_dxhat_xhat += dxhat[c] * xhat[c];
            dgain.row_mut(0)[c] += gr[c] * xhat[c];
            dbias.row_mut(0)[c] += gr[c];
        }
        m_dxhat /= d as f64;
        m_dxhat_xhat /= d as f64;
        let dr = dx.row_mut(r);
        for c in 0..d {
            dr[c] = inv * (dxhat[c] - m_dxhat - xhat[c] * m_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

/// a[R,K] · b[K,C]. Accumulation over k is ascending for every output cell.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.rows(), "matmul inner dims {} vs {}", a.cols(), b.rows());
    let (r, k, c) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(r, c);
    for i in 0..r {
        let ar = a.row(i);
        let or = out.row_mut(i);
        for kk in 0..k {
            let av = ar[kk];
            let br = b.row(kk);
            for j in 0..c {
                or[j] += av * br[j];
            }
        }
    }
    out
}

pub(crate) fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "add shape mismatch");
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    out
}

/// a[R,C] + broadcast b[1,C].
pub(crate) fn add_bias(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(b.shape(), (1, a.cols()), "bias shape mismatch");
    let mut out = a.clone();
    for r in 0..out.rows() {
        let or = out.row_mut(r);
        for c in 0..or.len() {
            or[c] += b.at(0, c);
        }
    }
    out
}

/// Column sums of grad, shaped [1,C]: the bias gradient.
pub(crate) fn col_sums(grad: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, grad.cols());
    for r in 0..grad.rows() {
        let gr = grad.row(r);
        for c in 0..gr.len() {
            out.row_mut(0)[c] += gr[c];
        }
    }
    out
}

pub(crate) fn relu(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

pub(crate) fn relu_back(input: &Tensor, grad: &Tensor) -> Tensor {
    let mut out = grad.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(input.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

pub(crate) fn scale(a: &Tensor, s: f64) -> Tensor {
    let mut out = a.clone();
    for v in out.data_mut() {
        *v *= s;
    }
    out
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.cols(), a.rows());
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            out.set(c, r, a.at(r, c));
        }
    }
    out
}

/// Row-wise softmax restricted to each row's mask range; zeros elsewhere.
pub(crate) fn masked_softmax(a: &Tensor, mask: &AttnMask) -> Tensor {
    let mut out = Tensor::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let (lo, hi) = mask.range(r, a.cols());
        debug_assert!(lo < hi && hi <= a.cols());
        let src = &a.row(r)[lo..hi];
        let mut buf = src.to_vec();
        softmax_slice(&mut buf);
        out.row_mut(r)[lo..hi].copy_from_slice(&buf);
    }
    out
}

pub(crate) fn masked_softmax_back(out: &Tensor, mask: &AttnMask, grad: &Tensor) -> Tensor {
    let mut din = Tensor::zeros(out.rows(), out.cols());
    for r in 0..out.rows() {
        let (lo, hi) = mask.range(r, out.cols());
        let o = &out.row(r)[lo..hi];
        let g = &grad.row(r)[lo..hi];
        let mut dot = 0.0;
        for i in 0..o.len() {
            dot += o[i] * g[i];
        }
        let d = &mut din.row_mut(r)[lo..hi];
        for i in 0..o.len() {
            d[i] = o[i] * (g[i] - dot);
        }
    }
    din
}

/// Row-wise log-softmax over the full width.
pub(crate) fn log_softmax_rows(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for &v in row.iter() {
            s += (v - m).exp();
        }
        let lse = m + s.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

pub(crate) fn log_softmax_back(out: &Tensor, grad: &Tensor) -> Tensor {
    let mut din = grad.clone();
    for r in 0..out.rows() {
        let mut gsum = 0.0;
        for &g in grad.row(r) {
            gsum += g;
        }
        let o = out.row(r);
        let d = din.row_mut(r);
        for c in 0..d.len() {
            d[c] -= o[c].exp() * gsum;
        }
    }
    din
}

pub(crate) fn slice_cols(a: &Tensor, lo: usize, hi: usize) -> Tensor {
    assert!(lo < hi && hi <= a.cols(), "slice_cols out of range");
    let mut out = Tensor::zeros(a.rows(), hi - lo);
    for r in 0..a.rows() {
        out.row_mut(r).copy_from_slice(&a.row(r)[lo..hi]);
    }
    out
}

pub(crate) fn concat_cols(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty(), "concat_cols of nothing");
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let or = out.row_mut(r);
        let mut off = 0;
        for p in parts {
            assert_eq!(p.rows(), rows, "concat_cols row mismatch");
            or[off..off + p.cols()].copy_from_slice(p.row(r));
            off += p.cols();
        }
    }
    out
}

pub(crate) fn gather_rows(a: &Tensor, idx: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(idx.len(), a.cols());
    for (r, &i) in idx.iter().enumerate() {
        assert!(i < a.rows(), "gather_rows index {} out of {} rows", i, a.rows());
        out.row_mut(r).copy_from_slice(a.row(i));
    }
    out
}

pub(crate) fn gather_rows_back(a_rows: usize, a_cols: usize, idx: &[usize], grad: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a_rows, a_cols);
    for (r, &i) in idx.iter().enumerate() {
        let or = out.row_mut(i);
        let gr = grad.row(r);
        for c in 0..a_cols {
            or[c] += gr[c];
        }
    }
    out
}

/// Sliding left-context windows for a causal strided convolution.
/// Output row u is the concatenation of rows u·stride−(taps−1) .. u·stride of
/// `a`, zero rows substituted below index 0. Output has ceil(rows/stride)
/// rows and taps·cols columns; empty input gives empty output.
pub(crate) fn unfold_causal(a: &Tensor, taps: usize, stride: usize) -> Tensor {
    assert!(taps >= 1 && stride >= 1);
    let t = a.rows();
    let u = if t == 0 { 0 } else { (t - 1) / stride + 1 };
    let d = a.cols();
    let mut out = Tensor::zeros(u, taps * d);
    for i in 0..u {
        let anchor = i * stride;
        let or = out.row_mut(i);
        for j in 0..taps {
            let src = anchor as isize - (taps as isize - 1) + j as isize;
            if src >= 0 {
                or[j * d..(j + 1) * d].copy_from_slice(a.row(src as usize));
            }
        }
    }
    out
}

pub(crate) fn unfold_causal_back(
    t: usize,
    d: usize,
    taps: usize,
    stride: usize,
    grad: &Tensor,
) -> Tensor {
    let mut out = Tensor::zeros(t, d);
    for i in 0..grad.rows() {
        let anchor = i * stride;
        let gr = grad.row(i);
        for j in 0..taps {
            let src = anchor as isize - (taps as isize - 1) + j as isize;
            if src >= 0 && (src as usize) < t {
                let or = out.row_mut(src as usize);
                for c in 0..d {
                    or[c] += gr[j * d + c];
                }
            }
        }
    }
    out
}

/// Sliding lookahead windows: output row t is the concatenation of rows
/// t .. t+taps−1 of `a`, zero rows substituted past the end. Same row count
/// as the input, taps·cols columns.
pub(crate) fn unfold_ahead(a: &Tensor, taps: usize) -> Tensor {
    assert!(taps >= 1);
    let t = a.rows();
    let d = a.cols();
    let mut out = Tensor::zeros(t, taps * d);
    for i in 0..t {
        let or = out.row_mut(i);
        for j in 0..taps {
            if i + j < t {
                or[j * d..(j + 1) * d].copy_from_slice(a.row(i + j));
            }
        }
    }
    out
}

pub(crate) fn unfold_ahead_back(t: usize, d: usize, taps: usize, grad: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(t, d);
    for i in 0..t {
        let gr = grad.row(i);
        for j in 0..taps {
            if i + j < t {
                let or = out.row_mut(i + j);
                for c in 0..d {
                    or[c] += gr[j * d + c];
                }
            }
        }
    }
    out
}

/// Σ a ⊙ w as a [1,1] tensor; w is a constant weighting, its gradient is
/// never produced. Used to reduce matrices to scalars in gradient checks.
pub(crate) fn weighted_sum(a: &Tensor, w: &Tensor) -> Tensor {
    assert_eq!(a.shape(), w.shape(), "weighted_sum shape mismatch");
    let mut s = 0.0;
    for (x, y) in a.data().iter().zip(w.data()) {
        s += x * y;
    }
    Tensor::scalar(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_symmetry() {
        let x = Tensor::new(1, 4, vec![0.0; 4]);
        let s = softmax(&x, 1).unwrap();
        for c in 0..4 {
            assert_eq!(s.at(0, c), 0.25);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let x = Tensor::new(1, 2, vec![1000.0, 0.0]);
        let s = softmax(&x, 1).unwrap();
        assert!(s.all_finite());
        assert_eq!(s.at(0, 0), 1.0);
        assert_eq!(s.at(0, 1), 0.0);
    }

    #[test]
    fn softmax_direct_values() {
        let x = Tensor::new(1, 3, vec![1.0, 2.0, 3.0]);
        let s = softmax(&x, 1).unwrap();
        let want = [0.09003057, 0.24472847, 0.66524096];
        for c in 0..3 {
            assert!((s.at(0, c) - want[c]).abs() < 1e-8, "col {c}: {}", s.at(0, c));
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::new(1, 2, vec![f64::NAN, 0.0]);
        assert!(softmax(&x, 1).is_err());
        let y = Tensor::new(1, 2, vec![f64::INFINITY, 0.0]);
        assert!(softmax(&y, 1).is_err());
    }

    #[test]
    fn softmax_axis0_is_columnwise() {
        let x = Tensor::new(2, 1, vec![0.0, 0.0]);
        let s = softmax(&x, 0).unwrap();
        assert_eq!(s.at(0, 0), 0.5);
        assert_eq!(s.at(1, 0), 0.5);
    }

    #[test]
    fn lse_single_element() {
        assert_eq!(log_sum_exp(&[3.25]), 3.25);
    }

    #[test]
    fn lse_two_zeros_is_ln2() {
        assert!((log_sum_exp(&[0.0, 0.0]) - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lse_shift_invariance_at_large_magnitude() {
        let v = log_sum_exp(&[-1000.0, -1000.0]);
        assert!((v - (-1000.0 + 2.0_f64.ln())).abs() < 1e-9);
    }

    #[test]
    #[should_panic(expected = "empty")]
    fn lse_empty_is_precondition_violation() {
        log_sum_exp(&[]);
    }

    #[test]
    fn lse2_matches_lse() {
        assert_eq!(lse2(f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
        assert!((lse2(-1.0, -2.0) - log_sum_exp(&[-1.0, -2.0])).abs() < 1e-12);
        assert_eq!(lse2(f64::NEG_INFINITY, -3.0), -3.0);
    }

    #[test]
    fn layer_norm_constant_row_is_zeroed() {
        let x = Tensor::new(1, 4, vec![5.0; 4]);
        let g = Tensor::new(1, 4, vec![1.0; 4]);
        let b = Tensor::zeros(1, 4);
        let y = layer_norm(&x, &g, &b, 1e-6).unwrap();
        for c in 0..4 {
            assert_eq!(y.at(0, c), 0.0);
        }
    }

    #[test]
    fn layer_norm_identity_on_normalized_row() {
        let x = Tensor::new(1, 2, vec![1.0, -1.0]);
        let g = Tensor::new(1, 2, vec![1.0; 2]);
        let b = Tensor::zeros(1, 2);
        let y = layer_norm(&x, &g, &b, 0.0).unwrap();
        assert_eq!(y.at(0, 0), 1.0);
        assert_eq!(y.at(0, 1), -1.0);
    }

    #[test]
    fn layer_norm_zero_gain_broadcasts_bias() {
        let x = Tensor::new(2, 3, vec![1.0, 7.0, -2.0, 0.5, 0.5, 9.0]);
        let g = Tensor::zeros(1, 3);
        let b = Tensor::new(1, 3, vec![4.0, 5.0, 6.0]);
        let y = layer_norm(&x, &g, &b, 1e-6).unwrap();
        for r in 0..2 {
            assert_eq!(y.row(r), &[4.0, 5.0, 6.0]);
        }
    }

    #[test]
    fn layer_norm_shape_mismatch_is_error() {
        let x = Tensor::zeros(1, 3);
        let g = Tensor::zeros(1, 2);
        let b = Tensor::zeros(1, 3);
        assert!(layer_norm(&x, &g, &b, 1e-6).is_err());
    }

    #[test]
    fn layer_norm_normalizes_before_affine() {
        let x = Tensor::new(1, 5, vec![3.0, -1.0, 2.0, 8.0, 0.0]);
        let g = Tensor::new(1, 5, vec![1.0; 5]);
        let b = Tensor::zeros(1, 5);
        let y = layer_norm(&x, &g, &b, 0.0).unwrap();
        let mean: f64 = y.row(0).iter().sum::<f64>() / 5.0;
        let var: f64 = y.row(0).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new(2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn mask_ranges() {
        assert_eq!(AttnMask::Full.range(2, 5), (0, 5));
        assert_eq!(AttnMask::Causal.range(2, 5), (0, 3));
        assert_eq!(AttnMask::Band { tau: 1 }.range(3, 5), (2, 4));
        assert_eq!(AttnMask::Band { tau: 10 }.range(3, 5), (0, 4));
        let m = AttnMask::Blocks { starts: vec![0, 2, 5] };
        assert_eq!(m.range(1, 7), (0, 2));
        assert_eq!(m.range(2, 7), (2, 3));
        assert_eq!(m.range(6, 7), (5, 7));
    }

    #[test]
    fn masked_softmax_band_ignores_outside() {
        let x = Tensor::new(3, 3, vec![1.0, 9.0, 9.0, 0.5, 0.5, 9.0, 7.0, 1.0, 1.0]);
        let s = masked_softmax(&x, &AttnMask::Band { tau: 1 });
        assert_eq!(s.at(0, 0), 1.0);
        assert_eq!(s.at(0, 1), 0.0);
        assert_eq!(s.at(1, 0), 0.5);
        assert_eq!(s.at(1, 1), 0.5);
        assert_eq!(s.at(2, 0), 0.0);
        assert_eq!(s.at(2, 1), 0.5);
        assert_eq!(s.at(2, 2), 0.5);
    }

    #[test]
    fn unfold_causal_lengths_and_padding() {
        // 4 rows, taps 3, stride 2: anchors 0 and 2.
        let a = Tensor::new(4, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let u = unfold_causal(&a, 3, 2);
        assert_eq!(u.shape(), (2, 3));
        assert_eq!(u.row(0), &[0.0, 0.0, 1.0]);
        assert_eq!(u.row(1), &[1.0, 2.0, 3.0]);
        assert_eq!(unfold_causal(&Tensor::zeros(0, 1), 3, 2).rows(), 0);
    }

    #[test]
    fn unfold_ahead_windows() {
        let a = Tensor::new(3, 1, vec![1.0, 2.0, 3.0]);
        let u = unfold_ahead(&a, 2);
        assert_eq!(u.shape(), (3, 2));
        assert_eq!(u.row(0), &[1.0, 2.0]);
        assert_eq!(u.row(1), &[2.0, 3.0]);
        assert_eq!(u.row(2), &[3.0, 0.0]);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0..30.0f64, 1..24)) {
            let x = Tensor::new(1, vals.len(), vals);
            let s = softmax(&x, 1).unwrap();
            let sum: f64 = s.row(0).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(s.row(0).iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(vals in proptest::collection::vec(-20.0..20.0f64, 2..12), shift in -50.0..50.0f64) {
            let x = Tensor::new(1, vals.len(), vals.clone());
            let shifted = Tensor::new(1, vals.len(), vals.iter().map(|v| v + shift).collect());
            let a = softmax(&x, 1).unwrap();
            let b = softmax(&shifted, 1).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn softmax_permutation_equivariant(vals in proptest::collection::vec(-20.0..20.0f64, 2..10)) {
            let n = vals.len();
            let x = Tensor::new(1, n, vals.clone());
            let mut rev = vals.clone();
            rev.reverse();
            let xr = Tensor::new(1, n, rev);
            let a = softmax(&x, 1).unwrap();
            let b = softmax(&xr, 1).unwrap();
            for c in 0..n {
                prop_assert!((a.at(0, c) - b.at(0, n - 1 - c)).abs() < 1e-15);
            }
        }

        #[test]
        fn lse_bounds(vals in proptest::collection::vec(-40.0..40.0f64, 1..16)) {
            let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let l = log_sum_exp(&vals);
            prop_assert!(l >= m - 1e-12);
            prop_assert!(l <= m + (vals.len() as f64).ln() + 1e-12);
        }
    }
}
