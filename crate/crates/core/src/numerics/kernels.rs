//! Forward and backward kernels shared by the tape and the plain array API.
//!
//! Activations are channels-last: a skeleton batch is stored `[N, T, V, C]`
//! so that 1x1 channel maps are a single GEMM over the trailing axis.

use crate::error::{Error, Result};

use super::NdArray;

/// `c = a * b + beta * c` for an `m x k` by `k x n` product with arbitrary
/// non-negative strides on `a` and `b`; `c` is contiguous row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    // SAFETY: the asserts above bound every element the kernel touches.
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
            n as isize,
            1,
        );
    }
}

pub(crate) struct MatmulDims {
    pub batch: Vec<usize>,
    pub a_batched: bool,
    pub b_batched: bool,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl MatmulDims {
    pub fn batch_count(&self) -> usize {
        self.batch.iter().product()
    }
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatmulDims> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (ba, ma) = a.split_at(a.len() - 2);
    let (bb, mb) = b.split_at(b.len() - 2);
    let (m, k) = (ma[0], ma[1]);
    let (kb, n) = if trans_b { (mb[1], mb[0]) } else { (mb[0], mb[1]) };
    if k != kb {
        return Err(err());
    }
    let batch = if ba == bb || bb.is_empty() {
        ba.to_vec()
    } else if ba.is_empty() {
        bb.to_vec()
    } else {
        return Err(err());
    };
    Ok(MatmulDims {
        batch,
        a_batched: !ba.is_empty(),
        b_batched: !bb.is_empty(),
        m,
        k,
        n,
    })
}

/// Batched product over the last two axes. One side may omit the batch axes,
/// in which case it is shared by every batch entry.
pub(crate) fn matmul_forward(a: &NdArray, b: &NdArray, trans_b: bool) -> Result<NdArray> {
    let d = matmul_dims(a.shape(), b.shape(), trans_b)?;
    let (m, k, n) = (d.m, d.k, d.n);
    let b_strides = if trans_b { (1, k) } else { (n, 1) };
    let mut out_shape = d.batch.clone();
    out_shape.extend([m, n]);
    let mut out = vec![0.0; d.batch_count() * m * n];
    if d.a_batched && !d.b_batched {
        let rows = d.batch_count() * m;
        gemm(rows, k, n, a.data(), (k, 1), b.data(), b_strides, &mut out, 0.0);
    } else {
        for bi in 0..d.batch_count() {
            let ao = if d.a_batched { bi * m * k } else { 0 };
            let bo = if d.b_batched { bi * k * n } else { 0 };
            gemm(
                m,
                k,
                n,
                &a.data()[ao..],
                (k, 1),
                &b.data()[bo..],
                b_strides,
                &mut out[bi * m * n..],
                0.0,
            );
        }
    }
    NdArray::new(&out_shape, out)
}

/// Gradients of `matmul_forward` with respect to both inputs.
pub(crate) fn matmul_backward(
    a: &NdArray,
    b: &NdArray,
    trans_b: bool,
    dout: &NdArray,
) -> Result<(NdArray, NdArray)> {
    let d = matmul_dims(a.shape(), b.shape(), trans_b)?;
    let (m, k, n) = (d.m, d.k, d.n);
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; b.len()];
    let g = dout.data();
    // op(B)^T as a k... view: dA = dC * op(B)^T  (m x n) * (n x k)
    let opb_t_strides = if trans_b { (k, 1) } else { (1, n) };
    if d.a_batched && !d.b_batched {
        let rows = d.batch_count() * m;
        gemm(rows, n, k, g, (n, 1), b.data(), opb_t_strides, &mut da, 0.0);
        if trans_b {
            // dB (n x k) = dC^T * A
            gemm(n, rows, k, g, (1, n), a.data(), (k, 1), &mut db, 0.0);
        } else {
            // dB (k x n) = A^T * dC
            gemm(k, rows, n, a.data(), (1, k), g, (n, 1), &mut db, 0.0);
        }
    } else {
        for bi in 0..d.batch_count() {
            let ao = if d.a_batched { bi * m * k } else { 0 };
            let bo = if d.b_batched { bi * k * n } else { 0 };
            let go = bi * m * n;
            let beta_a = if d.a_batched || bi == 0 { 0.0 } else { 1.0 };
            let beta_b = if d.b_batched || bi == 0 { 0.0 } else { 1.0 };
            gemm(
                m,
                n,
                k,
                &g[go..],
                (n, 1),
                &b.data()[bo..],
                opb_t_strides,
                &mut da[ao..],
                beta_a,
            );
            if trans_b {
                gemm(
                    n,
                    m,
                    k,
                    &g[go..],
                    (1, n),
                    &a.data()[ao..],
                    (k, 1),
                    &mut db[bo..],
                    beta_b,
                );
            } else {
                gemm(
                    k,
                    m,
                    n,
                    &a.data()[ao..],
                    (1, k),
                    &g[go..],
                    (n, 1),
                    &mut db[bo..],
                    beta_b,
                );
            }
        }
    }
    Ok((NdArray::new(a.shape(), da)?, NdArray::new(b.shape(), db)?))
}

pub(crate) fn softmax_rows(x: &[f64], width: usize, out: &mut [f64]) {
    for (row, orow) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        let inv = 1.0 / sum;
        orow.iter_mut().for_each(|o| *o *= inv);
    }
}

pub(crate) fn softmax_backward_rows(y: &[f64], dy: &[f64], width: usize, dx: &mut [f64]) {
    for ((yr, gr), dr) in y
        .chunks_exact(width)
        .zip(dy.chunks_exact(width))
        .zip(dx.chunks_exact_mut(width))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d += yv * (gv - dot);
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes every trailing-axis slice; returns (output, x_hat, inv_std).
pub(crate) fn layer_norm_forward(
    x: &[f64],
    width: usize,
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / width;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for (r, row) in x.chunks_exact(width).enumerate() {
        let mean = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        let base = r * width;
        for c in 0..width {
            let h = (row[c] - mean) * is;
            xhat[base + c] = h;
            y[base + c] = h * gamma[c] + beta[c];
        }
    }
    (y, xhat, inv_std)
}

pub(crate) fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    width: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; width];
    let mut dbeta = vec![0.0; width];
    let nf = width as f64;
    for (r, (gr, hr)) in dy.chunks_exact(width).zip(xhat.chunks_exact(width)).enumerate() {
        let mut sum_g = 0.0;
        let mut sum_gh = 0.0;
        for c in 0..width {
            let g = gr[c] * gamma[c];
            sum_g += g;
            sum_gh += g * hr[c];
            dgamma[c] += gr[c] * hr[c];
            dbeta[c] += gr[c];
        }
        let is = inv_std[r];
        let base = r * width;
        for c in 0..width {
            let g = gr[c] * gamma[c];
            dx[base + c] = is * (g - sum_g / nf - hr[c] * sum_gh / nf);
        }
    }
    (dx, dgamma, dbeta)
}

/// Geometry of a temporal convolution over a channels-last `[N, T, V, C]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, dilation: usize, stride: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal kernel must be odd, got {kernel}"
            )));
        }
        if dilation == 0 || stride == 0 {
            return Err(Error::Config("dilation and stride must be positive".into()));
        }
        Ok(Self {
            kernel,
            dilation,
            stride,
        })
    }

    pub fn padding(&self) -> usize {
        (self.kernel - 1) * self.dilation / 2
    }

    pub fn output_len(&self, t: usize) -> usize {
        t.div_ceil(self.stride)
    }

    /// Input frame read by output frame `to` at tap `k`, if inside the signal.
    #[inline]
    pub fn source(&self, to: usize, k: usize, t: usize) -> Option<usize> {
        let pos = (to * self.stride + k * self.dilation) as isize - self.padding() as isize;
        (pos >= 0 && (pos as usize) < t).then_some(pos as usize)
    }
}

fn conv_dims(x: &[usize], what: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *x {
        [n, t, v, c] => Ok((n, t, v, c)),
        _ => Err(Error::Shape {
            op: what,
            lhs: x.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Dense temporal convolution: weights `[K, C_in, C_out]`, no bias.
pub(crate) fn conv_forward(x: &NdArray, w: &NdArray, geo: ConvGeometry) -> Result<NdArray> {
    let (n, t, v, ci) = conv_dims(x.shape(), "temporal_conv")?;
    if w.shape().len() != 3 || w.shape()[0] != geo.kernel || w.shape()[1] != ci {
        return Err(Error::Shape {
            op: "temporal_conv",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let co = w.shape()[2];
    let to_len = geo.output_len(t);
    let mut out = vec![0.0; n * to_len * v * co];
    let frame_in = v * ci;
    let frame_out = v * co;
    for ni in 0..n {
        for to in 0..to_len {
            let obase = (ni * to_len + to) * frame_out;
            for k in 0..geo.kernel {
                if let Some(ti) = geo.source(to, k, t) {
                    let ibase = (ni * t + ti) * frame_in;
                    gemm(
                        v,
                        ci,
                        co,
                        &x.data()[ibase..],
                        (ci, 1),
                        &w.data()[k * ci * co..],
                        (co, 1),
                        &mut out[obase..],
                        1.0,
                    );
                }
            }
        }
    }
    NdArray::new(&[n, to_len, v, co], out)
}

pub(crate) fn conv_backward(
    x: &NdArray,
    w: &NdArray,
    dout: &NdArray,
    geo: ConvGeometry,
) -> Result<(NdArray, NdArray)> {
    let (n, t, v, ci) = conv_dims(x.shape(), "temporal_conv")?;
    let co = w.shape()[2];
    let to_len = geo.output_len(t);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let frame_in = v * ci;
    let frame_out = v * co;
    let g = dout.data();
    for ni in 0..n {
        for to in 0..to_len {
            let obase = (ni * to_len + to) * frame_out;
            for k in 0..geo.kernel {
                if let Some(ti) = geo.source(to, k, t) {
                    let ibase = (ni * t + ti) * frame_in;
                    // dX rows (v x ci) += dOut (v x co) * W_k^T (co x ci)
                    gemm(
                        v,
                        co,
                        ci,
                        &g[obase..],
                        (co, 1),
                        &w.data()[k * ci * co..],
                        (1, co),
                        &mut dx[ibase..],
                        1.0,
                    );
                    // dW_k (ci x co) += X^T (ci x v) * dOut (v x co)
                    gemm(
                        ci,
                        v,
                        co,
                        &x.data()[ibase..],
                        (1, ci),
                        &g[obase..],
                        (co, 1),
                        &mut dw[k * ci * co..],
                        1.0,
                    );
                }
            }
        }
    }
    Ok((NdArray::new(x.shape(), dx)?, NdArray::new(w.shape(), dw)?))
}

/// Per-channel temporal convolution: weights `[K, C]`, no bias.
pub(crate) fn depthwise_forward(x: &NdArray, w: &NdArray, geo: ConvGeometry) -> Result<NdArray> {
    let (n, t, v, c) = conv_dims(x.shape(), "depthwise_temporal_conv")?;
    if w.shape() != [geo.kernel, c] {
        return Err(Error::Shape {
            op: "depthwise_temporal_conv",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let to_len = geo.output_len(t);
    let frame = v * c;
    let mut out = vec![0.0; n * to_len * frame];
    for ni in 0..n {
        for to in 0..to_len {
            let ob = (ni * to_len + to) * frame;
            for k in 0..geo.kernel {
                if let Some(ti) = geo.source(to, k, t) {
                    let ib = (ni * t + ti) * frame;
                    let wk = &w.data()[k * c..(k + 1) * c];
                    let xs = &x.data()[ib..ib + frame];
                    for (o, xr) in out[ob..ob + frame].chunks_exact_mut(c).zip(xs.chunks_exact(c)) {
                        for ((o, &xv), &wv) in o.iter_mut().zip(xr).zip(wk) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    NdArray::new(&[n, to_len, v, c], out)
}

pub(crate) fn depthwise_backward(
    x: &NdArray,
    w: &NdArray,
    dout: &NdArray,
    geo: ConvGeometry,
) -> Result<(NdArray, NdArray)> {
    let (n, t, v, c) = conv_dims(x.shape(), "depthwise_temporal_conv")?;
    let to_len = geo.output_len(t);
    let frame = v * c;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let g = dout.data();
    for ni in 0..n {
        for to in 0..to_len {
            let ob = (ni * to_len + to) * frame;
            for k in 0..geo.kernel {
                if let Some(ti) = geo.source(to, k, t) {
                    let ib = (ni * t + ti) * frame;
                    let wk = &w.data()[k * c..(k + 1) * c];
                    let dwk = &mut dw[k * c..(k + 1) * c];
                    for vi in 0..v {
                        for ch in 0..c {
                            let gv = g[ob + vi * c + ch];
                            dx[ib + vi * c + ch] += gv * wk[ch];
                            dwk[ch] += gv * x.data()[ib + vi * c + ch];
                        }
                    }
                }
            }
        }
    }
    Ok((NdArray::new(x.shape(), dx)?, NdArray::new(w.shape(), dw)?))
}
