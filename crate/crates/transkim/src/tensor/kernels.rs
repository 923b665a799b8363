//! Plain-slice math kernels behind the graph ops.
//!
//! Everything here is value-level: no graph bookkeeping, no gradients.
//! The op layer in `mod.rs` records these on the tape and owns the VJPs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `c = a_view @ b_view` where views are described by (rows, cols) strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm_into<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    a_off: usize,
    a_rs: isize,
    a_cs: isize,
    b: &[S],
    b_off: usize,
    b_rs: isize,
    b_cs: isize,
    c: &mut [S],
    c_off: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::one(),
            a.as_ptr().add(a_off),
            a_rs,
            a_cs,
            b.as_ptr().add(b_off),
            b_rs,
            b_cs,
            S::zero(),
            c.as_mut_ptr().add(c_off),
            n as isize,
            1,
        );
    }
}

/// Row-wise softmax over contiguous rows of `width`, with max-subtraction.
/// `-inf` entries map to exactly 0; a row of only `-inf` is an error.
pub fn softmax_rows<S: Scalar>(x: &[S], width: usize) -> Result<Vec<S>> {
    let mut out = vec![S::zero(); x.len()];
    for (row, (xi, oi)) in x.chunks(width).zip(out.chunks_mut(width)).enumerate() {
        let mut mx = S::neg_infinity();
        for &v in xi {
            if v > mx {
                mx = v;
            }
        }
        if mx == S::neg_infinity() {
            return Err(Error::DegenerateRow { row });
        }
        let mut sum = S::zero();
        for (o, &v) in oi.iter_mut().zip(xi.iter()) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        for o in oi.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

/// Row-wise log-softmax; same stability scheme as [`softmax_rows`].
pub fn log_softmax_rows<S: Scalar>(x: &[S], width: usize) -> Result<Vec<S>> {
    let mut out = vec![S::zero(); x.len()];
    for (row, (xi, oi)) in x.chunks(width).zip(out.chunks_mut(width)).enumerate() {
        let mut mx = S::neg_infinity();
        for &v in xi {
            if v > mx {
                mx = v;
            }
        }
        if mx == S::neg_infinity() {
            return Err(Error::DegenerateRow { row });
        }
        let mut sum = S::zero();
        for (o, &v) in oi.iter_mut().zip(xi.iter()) {
            let s = v - mx;
            *o = s;
            sum += s.exp();
        }
        let lse = sum.ln();
        for o in oi.iter_mut() {
            *o -= lse;
        }
    }
    Ok(out)
}

/// Per-position layer norm over the trailing `width`, followed by the affine.
/// Returns the output and the saved `(mean, inv_std)` per position for the VJP.
pub fn layer_norm_rows<S: Scalar>(
    x: &[S],
    gain: &[S],
    bias: &[S],
    width: usize,
    eps: S,
) -> (Vec<S>, Vec<(S, S)>) {
    let positions = x.len() / width;
    let mut out = vec![S::zero(); x.len()];
    let mut stats = Vec::with_capacity(positions);
    let d = S::from_f64(width as f64);
    for (xi, oi) in x.chunks(width).zip(out.chunks_mut(width)) {
        let mut sum = S::zero();
        for &v in xi {
            sum += v;
        }
        let mean = sum / d;
        let mut var = S::zero();
        for &v in xi {
            let c = v - mean;
            var += c * c;
        }
        var /= d;
        let inv = S::one() / (var + eps).sqrt();
        for ((o, &v), (&g, &b)) in oi.iter_mut().zip(xi.iter()).zip(gain.iter().zip(bias.iter())) {
            *o = (v - mean) * inv * g + b;
        }
        stats.push((mean, inv));
    }
    (out, stats)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact Gaussian-CDF GeLU: `x * Phi(x)`.
pub fn gelu_value<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    x * half * (S::one() + (x * S::from_f64(INV_SQRT_2)).erf())
}

/// d/dx of [`gelu_value`]: `Phi(x) + x * phi(x)`.
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let phi_cdf = half * (S::one() + (x * S::from_f64(INV_SQRT_2)).erf());
    let pdf = S::from_f64(INV_SQRT_2PI) * (-(x * x) * half).exp();
    phi_cdf + x * pdf
}

/// Validate a numpy-style broadcast from `from` to `to` and return, per target
/// dim, the source dim size (1 where broadcast).
pub fn broadcast_plan(from: &[usize], to: &[usize]) -> Result<Vec<usize>> {
    if from.len() > to.len() {
        return Err(Error::ShapeMismatch {
            op: "broadcast_to",
            lhs: from.to_vec(),
            rhs: to.to_vec(),
        });
    }
    let pad = to.len() - from.len();
    let mut src = vec![1usize; to.len()];
    for (i, &f) in from.iter().enumerate() {
        if f != to[pad + i] && f != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_to",
                lhs: from.to_vec(),
                rhs: to.to_vec(),
            });
        }
        src[pad + i] = f;
    }
    Ok(src)
}

/// Materialize a broadcast copy (0 FLOPs; pure data movement).
pub fn broadcast_copy<S: Scalar>(x: &[S], from: &[usize], to: &[usize]) -> Result<Vec<S>> {
    let src = broadcast_plan(from, to)?;
    let out_n = numel(to);
    let mut out = vec![S::zero(); out_n];
    let to_strides = strides(to);
    let src_strides = strides(&src);
    for (oi, o) in out.iter_mut().enumerate() {
        let mut rem = oi;
        let mut si = 0usize;
        for (ax, &st) in to_strides.iter().enumerate() {
            let idx = rem / st;
            rem %= st;
            if src[ax] != 1 {
                si += idx * src_strides[ax];
            }
        }
        *o = x[si];
    }
    Ok(out)
}

/// Sum `g` (shaped `to`) back down to `from`: the VJP of `broadcast_copy`.
pub fn reduce_from_broadcast<S: Scalar>(g: &[S], from: &[usize], to: &[usize]) -> Vec<S> {
    let src = broadcast_plan(from, to).expect("reduce must mirror a valid broadcast");
    let mut out = vec![S::zero(); numel(from)];
    let to_strides = strides(to);
    let src_strides = strides(&src);
    for (gi, &v) in g.iter().enumerate() {
        let mut rem = gi;
        let mut si = 0usize;
        for (ax, &st) in to_strides.iter().enumerate() {
            let idx = rem / st;
            rem %= st;
            if src[ax] != 1 {
                si += idx * src_strides[ax];
            }
        }
        out[si] += v;
    }
    out
}

/// Permute axes (a generalized transpose); returns data and new shape.
pub fn permute_copy<S: Scalar>(x: &[S], shape: &[usize], perm: &[usize]) -> (Vec<S>, Vec<usize>) {
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let old_strides = strides(shape);
    let new_strides = strides(&new_shape);
    let mut out = vec![S::zero(); x.len()];
    for (oi, o) in out.iter_mut().enumerate() {
        let mut rem = oi;
        let mut src = 0usize;
        for (ax, &st) in new_strides.iter().enumerate() {
            let idx = rem / st;
            rem %= st;
            src += idx * old_strides[perm[ax]];
        }
        *o = x[src];
    }
    (out, new_shape)
}

/// Inverse of a permutation.
pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry_and_mask() {
        let out = softmax_rows::<f64>(&[0.0, 0.0], 2).unwrap();
        assert_eq!(out, vec![0.5, 0.5]);
        let out = softmax_rows::<f64>(&[0.0, f64::NEG_INFINITY], 2).unwrap();
        assert_eq!(out, vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_reference_row() {
        // Frozen from direct high-precision evaluation of exp(x)/sum.
        let out = softmax_rows::<f64>(&[1.0, 2.0, 3.0], 3).unwrap();
        let want = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (o, w) in out.iter().zip(want.iter()) {
            assert!((o - w).abs() < 1e-12, "{o} vs {w}");
        }
    }

    #[test]
    fn softmax_degenerate_row_errors() {
        let err = softmax_rows::<f64>(&[f64::NEG_INFINITY, f64::NEG_INFINITY], 2).unwrap_err();
        assert!(err.to_string().contains("row 0"));
    }

    #[test]
    fn layer_norm_closed_forms() {
        // Zero-variance direction.
        let (out, _) = layer_norm_rows::<f64>(&[1.0, 1.0], &[1.0, 1.0], &[0.0, 0.0], 2, 1e-5);
        assert!(out[0].abs() < 1e-9 && out[1].abs() < 1e-9);
        // x=[0,2]: mean 1, var 1 -> +-1/sqrt(1+eps)
        let (out, _) = layer_norm_rows::<f64>(&[0.0, 2.0], &[1.0, 1.0], &[0.0, 0.0], 2, 1e-5);
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((out[0] + scale).abs() < 1e-12);
        assert!((out[1] - scale).abs() < 1e-12);
        // x=[3,5], gain=2, bias=1 -> [1-2/sqrt(1+eps), 1+2/sqrt(1+eps)]
        let (out, _) = layer_norm_rows::<f64>(&[3.0, 5.0], &[2.0, 2.0], &[1.0, 1.0], 2, 1e-5);
        assert!((out[0] - (1.0 - 2.0 * scale)).abs() < 1e-12);
        assert!((out[1] - (1.0 + 2.0 * scale)).abs() < 1e-12);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_value(0.0f64), 0.0);
        assert!(gelu_value(-10.0f64).abs() < 1e-6);
        // x * Phi(x) at x=1, frozen from the 0.5*(1+erf(1/sqrt(2))) closed form.
        assert!((gelu_value(1.0f64) - 0.8413447460685429).abs() < 1e-12);
    }

    #[test]
    fn broadcast_roundtrip_reduces_by_sum() {
        let x = vec![1.0f64, 2.0];
        let big = broadcast_copy(&x, &[2], &[3, 2]).unwrap();
        assert_eq!(big, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let back = reduce_from_broadcast(&big, &[2], &[3, 2]);
        assert_eq!(back, vec![3.0, 6.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let (p, shp) = permute_copy(&x, &[2, 3, 4], &[2, 0, 1]);
        assert_eq!(shp, vec![4, 2, 3]);
        let (back, shp2) = permute_copy(&p, &shp, &inverse_perm(&[2, 0, 1]));
        assert_eq!(shp2, vec![2, 3, 4]);
        assert_eq!(back, x);
    }
}
