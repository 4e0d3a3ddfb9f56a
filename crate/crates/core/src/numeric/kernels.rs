//! Plain-slice compute kernels shared by the differentiation tape and the
//! tape-free inference path.

use crate::error::{dim_err, param_err, Result};

/// Zero-padding policy for 1D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    /// Symmetric zero padding chosen so that the output length is `ceil(T / stride)`.
    #[default]
    SameByStride,
    /// No padding: output length is `floor((T - W) / stride) + 1`.
    Valid,
}

/// Resolved sizes of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub width: usize,
    pub stride: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(
        c_in: usize,
        t_in: usize,
        c_out: usize,
        width: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 {
            return param_err("convolution stride must be at least 1");
        }
        if width == 0 {
            return param_err("convolution kernel width must be at least 1");
        }
        let (t_out, pad_left) = match padding {
            Padding::SameByStride => {
                if t_in == 0 {
                    return dim_err("convolution input is empty");
                }
                let t_out = t_in.div_ceil(stride);
                let total = ((t_out - 1) * stride + width).saturating_sub(t_in);
                (t_out, total / 2)
            }
            Padding::Valid => {
                if width > t_in {
                    return dim_err(format!(
                        "kernel width {width} exceeds input length {t_in}"
                    ));
                }
                ((t_in - width) / stride + 1, 0)
            }
        };
        Ok(Self {
            c_in,
            c_out,
            width,
            stride,
            t_in,
            t_out,
            pad_left,
        })
    }

    fn patch(&self) -> usize {
        self.c_in * self.width
    }

    fn chunk(&self) -> usize {
        const COL_BUDGET: usize = 1 << 21;
        (COL_BUDGET / self.patch().max(1)).clamp(1, self.t_out.max(1))
    }

    #[inline]
    fn source(&self, t: usize, i: usize) -> Option<usize> {
        let pos = (t * self.stride + i).checked_sub(self.pad_left)?;
        (pos < self.t_in).then_some(pos)
    }
}

/// `C = alpha * A B + beta * C` over strided views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, c: usize, rs: usize, cs: usize| (r - 1) * rs + (c - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len());
        assert!(last(k, n, rsb, csb) < b.len());
    }
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: every index touched through the strided views is bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Row-major `[m×k] · [k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a, k, 1, b, n, 1, &mut out, n, 1, 0.0);
    out
}

/// Gradients of `C = A B` given `dC`: returns `(dA, dB)`.
pub fn matmul_backward(
    a: &[f64],
    b: &[f64],
    grad: &[f64],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; m * k];
    let mut db = vec![0.0; k * n];
    // dA = dC · Bᵀ
    gemm(m, n, k, grad, n, 1, b, 1, n, &mut da, k, 1, 0.0);
    // dB = Aᵀ · dC
    gemm(k, m, n, a, 1, k, grad, n, 1, &mut db, n, 1, 0.0);
    (da, db)
}

fn im2col(x: &[f64], g: &ConvGeometry, t0: usize, ch: usize, stride_cols: usize, col: &mut [f64]) {
    for c in 0..g.c_in {
        let xrow = &x[c * g.t_in..(c + 1) * g.t_in];
        for i in 0..g.width {
            let dst = &mut col[(c * g.width + i) * stride_cols..][..ch];
            for (j, d) in dst.iter_mut().enumerate() {
                *d = g.source(t0 + j, i).map_or(0.0, |p| xrow[p]);
            }
        }
    }
}

/// Forward 1D convolution. `x` is `[c_in × t_in]`, `kernels` is
/// `[c_out × c_in × width]`, output is `[c_out × t_out]`.
pub fn conv1d_forward(x: &[f64], kernels: &[f64], bias: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let patch = g.patch();
    let chunk = g.chunk();
    let mut out = vec![0.0; g.c_out * g.t_out];
    let mut col = vec![0.0; patch * chunk];
    let mut t0 = 0;
    while t0 < g.t_out {
        let ch = chunk.min(g.t_out - t0);
        im2col(x, g, t0, ch, chunk, &mut col);
        gemm(
            g.c_out,
            patch,
            ch,
            kernels,
            patch,
            1,
            &col,
            chunk,
            1,
            &mut out[t0..],
            g.t_out,
            1,
            0.0,
        );
        t0 += ch;
    }
    for (o, row) in out.chunks_mut(g.t_out).enumerate() {
        let b = bias[o];
        row.iter_mut().for_each(|v| *v += b);
    }
    out
}

/// Gradients of [`conv1d_forward`]: returns `(dx, dkernels, dbias)`.
pub fn conv1d_backward(
    x: &[f64],
    kernels: &[f64],
    grad: &[f64],
    g: &ConvGeometry,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let patch = g.patch();
    let chunk = g.chunk();
    let mut dx = vec![0.0; g.c_in * g.t_in];
    let mut dk = vec![0.0; g.c_out * patch];
    let db = grad.chunks(g.t_out).map(|r| r.iter().sum()).collect();
    let mut col = vec![0.0; patch * chunk];
    let mut dcol = vec![0.0; patch * chunk];
    let mut t0 = 0;
    while t0 < g.t_out {
        let ch = chunk.min(g.t_out - t0);
        im2col(x, g, t0, ch, chunk, &mut col);
        // dK += dY_chunk · colᵀ
        gemm(
            g.c_out, ch, patch, &grad[t0..], g.t_out, 1, &col, 1, chunk, &mut dk, patch, 1, 1.0,
        );
        // dcol = Kᵀ · dY_chunk
        gemm(
            patch, g.c_out, ch, kernels, 1, patch, &grad[t0..], g.t_out, 1, &mut dcol, chunk, 1,
            0.0,
        );
        for c in 0..g.c_in {
            for i in 0..g.width {
                let src = &dcol[(c * g.width + i) * chunk..][..ch];
                for (j, &v) in src.iter().enumerate() {
                    if let Some(p) = g.source(t0 + j, i) {
                        dx[c * g.t_in + p] += v;
                    }
                }
            }
        }
        t0 += ch;
    }
    (dx, dk, db)
}

/// Non-overlapping max pooling over the last axis of `[channels × t]`.
/// Returns the pooled values and, per output, the flat index of the
/// selected input (first maximal index on ties).
pub fn maxpool_forward(
    x: &[f64],
    channels: usize,
    t: usize,
    window: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if window == 0 {
        return param_err("pool window must be at least 1");
    }
    if t < window {
        return dim_err(format!("pool window {window} exceeds length {t}"));
    }
    let t_out = t / window;
    let mut out = Vec::with_capacity(channels * t_out);
    let mut idx = Vec::with_capacity(channels * t_out);
    for c in 0..channels {
        for o in 0..t_out {
            let start = c * t + o * window;
            let mut best = start;
            for p in start + 1..start + window {
                if x[p] > x[best] {
                    best = p;
                }
            }
            out.push(x[best]);
            idx.push(best);
        }
    }
    Ok((out, idx))
}

/// Non-overlapping mean pooling over the last axis of `[channels × t]`.
pub fn avgpool_forward(x: &[f64], channels: usize, t: usize, window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return param_err("pool window must be at least 1");
    }
    if t < window {
        return dim_err(format!("pool window {window} exceeds length {t}"));
    }
    let t_out = t / window;
    let scale = 1.0 / window as f64;
    let mut out = Vec::with_capacity(channels * t_out);
    for c in 0..channels {
        for o in 0..t_out {
            let start = c * t + o * window;
            out.push(x[start..start + window].iter().sum::<f64>() * scale);
        }
    }
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln Σ exp(x_i)`; `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-semiring product: `C[p,r] = ln Σ_q exp(A[p,q] + B[q,r])`.
pub fn log_matmul(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    let mut buf = vec![0.0; q];
    for i in 0..p {
        for k in 0..r {
            for (j, v) in buf.iter_mut().enumerate() {
                *v = a[i * q + j] + b[j * r + k];
            }
            out[i * r + k] = log_sum_exp(&buf);
        }
    }
    out
}

/// Gradients of [`log_matmul`] given its output `c` and `dC`.
pub fn log_matmul_backward(
    a: &[f64],
    b: &[f64],
    c: &[f64],
    grad: &[f64],
    p: usize,
    q: usize,
    r: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; p * q];
    let mut db = vec![0.0; q * r];
    for i in 0..p {
        for k in 0..r {
            let g = grad[i * r + k];
            if g == 0.0 || c[i * r + k] == f64::NEG_INFINITY {
                continue;
            }
            for j in 0..q {
                let w = g * (a[i * q + j] + b[j * r + k] - c[i * r + k]).exp();
                da[i * q + j] += w;
                db[j * r + k] += w;
            }
        }
    }
    (da, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], k: &[f64], b: &[f64], g: &ConvGeometry) -> Vec<f64> {
        let mut out = vec![0.0; g.c_out * g.t_out];
        for o in 0..g.c_out {
            for t in 0..g.t_out {
                let mut acc = b[o];
                for c in 0..g.c_in {
                    for i in 0..g.width {
                        let pos = (t * g.stride + i) as isize - g.pad_left as isize;
                        if pos >= 0 && (pos as usize) < g.t_in {
                            acc += k[(o * g.c_in + c) * g.width + i] * x[c * g.t_in + pos as usize];
                        }
                    }
                }
                out[o * g.t_out + t] = acc;
            }
        }
        out
    }

    #[test]
    fn same_by_stride_lengths() {
        let g = ConvGeometry::new(1, 864_000, 256, 10, 2, Padding::SameByStride).unwrap();
        assert_eq!(g.t_out, 432_000);
        let g = ConvGeometry::new(1, 7, 1, 3, 2, Padding::SameByStride).unwrap();
        assert_eq!(g.t_out, 4);
        let g = ConvGeometry::new(1, 4, 1, 2, 2, Padding::Valid).unwrap();
        assert_eq!(g.t_out, 2);
        assert!(ConvGeometry::new(1, 2, 1, 3, 1, Padding::Valid).is_err());
        assert!(ConvGeometry::new(1, 2, 1, 1, 0, Padding::Valid).is_err());
    }

    #[test]
    fn gemm_conv_matches_direct_sum() {
        let c_in = 3;
        let t_in = 23;
        let c_out = 4;
        let w = 5;
        let x: Vec<f64> = (0..c_in * t_in).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let k: Vec<f64> = (0..c_out * c_in * w).map(|i| ((i * 13 % 7) as f64) * 0.1 - 0.3).collect();
        let b = vec![0.5, -0.25, 0.0, 1.0];
        for stride in 1..4 {
            for pad in [Padding::SameByStride, Padding::Valid] {
                let g = ConvGeometry::new(c_in, t_in, c_out, w, stride, pad).unwrap();
                let got = conv1d_forward(&x, &k, &b, &g);
                let want = naive_conv(&x, &k, &b, &g);
                for (a, e) in got.iter().zip(&want) {
                    assert!((a - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn maxpool_tie_takes_first() {
        let (v, i) = maxpool_forward(&[5.0, 5.0], 1, 2, 2).unwrap();
        assert_eq!(v, vec![5.0]);
        assert_eq!(i, vec![0]);
        assert!(maxpool_forward(&[1.0], 1, 1, 2).is_err());
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }
}
