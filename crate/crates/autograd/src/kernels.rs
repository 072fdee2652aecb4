//! Plain-slice kernels shared by forward and backward rules.
//!
//! Reductions run left to right so repeated runs are bit-identical.

use crate::Element;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = T::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn transpose<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Softmax of one row restricted to `allowed` entries; disallowed entries and
/// fully masked rows produce zeros.
pub fn softmax_row<T: Element>(x: &[T], allowed: Option<&[bool]>, out: &mut [T]) {
    let ok = |j: usize| allowed.map_or(true, |m| m[j]);
    let mut max: Option<T> = None;
    for (j, &v) in x.iter().enumerate() {
        if ok(j) {
            max = Some(match max {
                Some(m) if m >= v => m,
                _ => v,
            });
        }
    }
    let Some(max) = max else {
        out.iter_mut().for_each(|o| *o = T::ZERO);
        return;
    };
    let mut sum = T::ZERO;
    for (j, (&v, o)) in x.iter().zip(out.iter_mut()).enumerate() {
        if ok(j) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        } else {
            *o = T::ZERO;
        }
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

pub fn log_softmax_row<T: Element>(x: &[T], out: &mut [T]) {
    let mut max = x[0];
    for &v in &x[1..] {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::ZERO;
    for &v in x {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Symmetric fake-quantization of one value; returns (dequantized, inside clamp range).
#[inline]
pub fn fake_quant_value<T: Element>(x: T, inv_scale: T, qmax: T) -> (T, bool) {
    let scaled = x * inv_scale;
    let inside = scaled.abs() <= qmax;
    let q = scaled.round().max(-qmax).min(qmax);
    (q / inv_scale, inside)
}

/// Tanh approximation of GELU.
pub fn gelu<T: Element>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + k * x * x * x)).tanh())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0f64, 1.0];
        let mut out = [0.0; 2];
        matmul_acc(&a, &b, &mut out, 2, 2, 1);
        assert_eq!(out, [3.0, 7.0]);
    }

    #[test]
    fn nt_and_tn_agree_with_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 4x3
        let bt = transpose(&b, 4, 3);
        let mut x = vec![0.0; 8];
        let mut y = vec![0.0; 8];
        matmul_nt_acc(&a, &b, &mut x, 2, 3, 4);
        matmul_acc(&a, &bt, &mut y, 2, 3, 4);
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-12);
        }
        let at = transpose(&a, 2, 3);
        let c: Vec<f64> = (0..8).map(|v| v as f64).collect(); // 2x4
        let mut z = vec![0.0; 12];
        let mut w = vec![0.0; 12];
        matmul_tn_acc(&a, &c, &mut z, 2, 3, 4);
        matmul_acc(&at, &c, &mut w, 3, 2, 4);
        assert_eq!(z, w);
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let mut out = [1.0f32; 3];
        softmax_row(&[1.0, 2.0, 3.0], Some(&[false, false, false]), &mut out);
        assert_eq!(out, [0.0; 3]);
    }

    #[test]
    fn round_half_away() {
        let (v, inside) = fake_quant_value(0.5f64, 127.0, 127.0);
        assert!(inside);
        assert_eq!(v, 64.0 / 127.0);
        let (v, _) = fake_quant_value(-0.5f64, 127.0, 127.0);
        assert_eq!(v, -64.0 / 127.0);
    }
}
