//! Forward kernels for the primitive set. The graph in [`super::graph`] calls
//! these for values and pairs each one with a hand-written backward rule.

use crate::error::{MsmfError, Result};

use super::Tensor;

fn expect_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(MsmfError::Dimension(format!(
            "{what} expects a rank-{rank} tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Standard matrix product of `m × k` and `k × n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul")?;
    expect_rank(b, 2, "matmul")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(MsmfError::Dimension(format!(
            "matmul: inner extents differ for {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `out += a · b` for row-major slices.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "transpose")?;
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let src = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Softmax over the last axis, computed with max-subtraction.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let (rows, d) = x.as_matrix_dims();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        let slice = &src[r * d..(r + 1) * d];
        let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[r * d..(r + 1) * d];
        let mut total = 0.0;
        for (o, &v) in dst.iter_mut().zip(slice) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in dst.iter_mut() {
            *o /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Same-padded temporal convolution.
///
/// `x` is `T × d_in`, `kernel` is `w × d_in × d_out` with odd `w`, and `bias`
/// holds `d_out` values (any shape). Rows outside `[0, T)` read as zero.
pub fn temporal_conv(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (t_len, d_in, w, d_out) = conv_dims(x, kernel, bias)?;
    let pad = (w - 1) / 2;
    let xs = x.data();
    let ks = kernel.data();
    let mut out = vec![0.0; t_len * d_out];
    for t in 0..t_len {
        let row = &mut out[t * d_out..(t + 1) * d_out];
        row.copy_from_slice(bias.data());
        for k in 0..w {
            let src = t + k;
            if src < pad || src - pad >= t_len {
                continue;
            }
            let s = src - pad;
            for i in 0..d_in {
                let xv = xs[s * d_in + i];
                let krow = &ks[(k * d_in + i) * d_out..(k * d_in + i + 1) * d_out];
                for (o, &kv) in row.iter_mut().zip(krow) {
                    *o += xv * kv;
                }
            }
        }
    }
    Tensor::new(vec![t_len, d_out], out)
}

pub(crate) fn conv_dims(
    x: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
) -> Result<(usize, usize, usize, usize)> {
    expect_rank(x, 2, "temporal_conv input")?;
    expect_rank(kernel, 3, "temporal_conv kernel")?;
    let (t_len, d_in) = (x.shape()[0], x.shape()[1]);
    let (w, kd_in, d_out) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if w % 2 == 0 {
        return Err(MsmfError::Config(format!(
            "temporal_conv window must be odd, got {w}"
        )));
    }
    if kd_in != d_in {
        return Err(MsmfError::Dimension(format!(
            "temporal_conv: input {:?} does not match kernel {:?}",
            x.shape(),
            kernel.shape()
        )));
    }
    if bias.len() != d_out {
        return Err(MsmfError::Dimension(format!(
            "temporal_conv: bias {:?} does not match kernel {:?}",
            bias.shape(),
            kernel.shape()
        )));
    }
    Ok((t_len, d_in, w, d_out))
}

/// Non-overlapping mean pooling along time. A trailing partial window is
/// averaged over its actual length.
pub fn temporal_pool(x: &Tensor, window: usize) -> Result<Tensor> {
    expect_rank(x, 2, "temporal_pool")?;
    if window == 0 {
        return Err(MsmfError::Config(
            "temporal_pool window must be at least 1".into(),
        ));
    }
    let (t_len, d) = (x.shape()[0], x.shape()[1]);
    let out_rows = t_len.div_ceil(window);
    let xs = x.data();
    let mut out = vec![0.0; out_rows * d];
    for r in 0..out_rows {
        let start = r * window;
        let end = (start + window).min(t_len);
        let dst = &mut out[r * d..(r + 1) * d];
        for t in start..end {
            for (o, &v) in dst.iter_mut().zip(&xs[t * d..(t + 1) * d]) {
                *o += v;
            }
        }
        let count = (end - start) as f64;
        for o in dst.iter_mut() {
            *o /= count;
        }
    }
    Tensor::new(vec![out_rows, d], out)
}

/// Splits a shape around `axis` into `(outer, extent, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| MsmfError::Dimension("concat of zero tensors".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(MsmfError::Dimension(format!(
            "concat axis {axis} out of range for shape {:?}",
            first.shape()
        )));
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = 0;
    for p in parts {
        let ok = p.rank() == rank
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(MsmfError::Dimension(format!(
                "concat along axis {axis}: shapes {:?} and {:?} are incompatible",
                first.shape(),
                p.shape()
            )));
        }
        out_shape[axis] += p.shape()[axis];
    }
    let (outer, _, inner) = axis_split(&out_shape, axis);
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(out_shape, out)
}

pub fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(MsmfError::Dimension(format!(
            "slice [{start}, {}) on axis {axis} out of range for shape {:?}",
            start + len,
            x.shape()
        )));
    }
    let (outer, extent, inner) = axis_split(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * extent * inner + start * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}
