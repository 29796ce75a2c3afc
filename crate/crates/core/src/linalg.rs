//! Small dense row-major matrices stored in flat slices.

use nalgebra::DMatrix;

pub fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

/// `out += scale * a * b` for d×d row-major matrices.
pub fn gemm_acc(d: usize, scale: f64, a: &[f64], b: &[f64], out: &mut [f64]) {
    match d {
        1 => {
            out[0] += scale * (a[0] * b[0]);
            return;
        }
        2 => {
            let (a, b, o) = (&a[..4], &b[..4], &mut out[..4]);
            o[0] += scale * (a[0] * b[0] + a[1] * b[2]);
            o[1] += scale * (a[0] * b[1] + a[1] * b[3]);
            o[2] += scale * (a[2] * b[0] + a[3] * b[2]);
            o[3] += scale * (a[2] * b[1] + a[3] * b[3]);
            return;
        }
        _ => {}
    }
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for l in 0..d {
                s += a[i * d + l] * b[l * d + j];
            }
            out[i * d + j] += scale * s;
        }
    }
}

/// `out = a * b`.
pub fn gemm(d: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    if d == 1 {
        out[0] = a[0] * b[0];
        return;
    }
    out.iter_mut().for_each(|v| *v = 0.0);
    gemm_acc(d, 1.0, a, b, out);
}

pub fn matvec(d: usize, a: &[f64], v: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|i| (0..d).map(|j| a[i * d + j] * v[j]).sum())
        .collect()
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn frobenius(m: &[f64]) -> f64 {
    norm2(m)
}

pub fn max_abs(m: &[f64]) -> f64 {
    m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

/// Operator 2-norm (largest singular value).
pub fn spectral_norm(d: usize, m: &[f64]) -> f64 {
    if d == 0 {
        return 0.0;
    }
    if d == 1 {
        return m[0].abs();
    }
    DMatrix::from_row_slice(d, d, m)
        .singular_values()
        .iter()
        .fold(0.0f64, |acc, s| acc.max(*s))
}

pub fn to_dmatrix(d: usize, m: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, m)
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}
