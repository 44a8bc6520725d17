//! Forward and backward kernels. All tensors here are row-major; a 1-D
//! signal with `C` channels and `L` time steps is a `[C, L]` tensor.

use crate::error::{dim_err, Result};
use crate::scalar::{gemm, MatMut, MatRef, Scalar};
use crate::tensor::Tensor;

fn shape2<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    t.shape2().ok_or_else(|| dim_err(op, format!("expected rank 2, got {:?}", t.dims())))
}

/// Output length of a 1-D convolution.
pub fn conv1d_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// `y = x W^T + b` for `x: [n, in]`, `W: [out, in]`, `b: [out]`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (out_f, in_f) = shape2(w, "linear")?;
    let x_in = *x.dims().last().expect("non-empty dims");
    if x_in != in_f {
        return Err(dim_err("linear", format!("input width {x_in} vs weight {:?}", w.dims())));
    }
    if let Some(b) = b {
        if b.len() != out_f {
            return Err(dim_err("linear", format!("bias {:?} vs {out_f} outputs", b.dims())));
        }
    }
    let n = x.len() / in_f;
    let mut dims = x.dims().to_vec();
    *dims.last_mut().unwrap() = out_f;
    let mut out = Tensor::zeros(&dims);
    gemm(
        T::one(),
        MatRef::dense(x.data(), 0, n, in_f),
        MatRef::dense(w.data(), 0, out_f, in_f).t(),
        T::zero(),
        MatMut::dense(out.data_mut(), 0, n, out_f),
    );
    if let Some(b) = b {
        for row in out.data_mut().chunks_mut(out_f) {
            for (y, &bi) in row.iter_mut().zip(b.data()) {
                *y += bi;
            }
        }
    }
    Ok(out)
}

/// Returns `(dx, dW, db)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (out_f, in_f) = w.shape2().expect("checked in forward");
    let n = x.len() / in_f;
    let mut dx = Tensor::zeros(x.dims());
    gemm(
        T::one(),
        MatRef::dense(dy.data(), 0, n, out_f),
        MatRef::dense(w.data(), 0, out_f, in_f),
        T::zero(),
        MatMut::dense(dx.data_mut(), 0, n, in_f),
    );
    let mut dw = Tensor::zeros(w.dims());
    gemm(
        T::one(),
        MatRef::dense(dy.data(), 0, n, out_f).t(),
        MatRef::dense(x.data(), 0, n, in_f),
        T::zero(),
        MatMut::dense(dw.data_mut(), 0, out_f, in_f),
    );
    let mut db = Tensor::zeros(&[out_f]);
    for row in dy.data().chunks(out_f) {
        for (acc, &g) in db.data_mut().iter_mut().zip(row) {
            *acc += g;
        }
    }
    (dx, dw, db)
}

fn pad_time<T: Scalar>(x: &Tensor<T>, padding: usize) -> Tensor<T> {
    if padding == 0 {
        return x.clone();
    }
    let (c, l) = x.shape2().expect("rank 2");
    let lp = l + 2 * padding;
    let mut out = Tensor::zeros(&[c, lp]);
    for (src, dst) in x.data().chunks(l).zip(out.data_mut().chunks_mut(lp)) {
        dst[padding..padding + l].copy_from_slice(src);
    }
    out
}

/// Cross-correlation of `x: [C_in, L]` with `kernel: [C_out, C_in, K]`.
pub fn conv1d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (c_in, len) = shape2(x, "conv1d")?;
    let (c_out, k_in, k) = match kernel.dims()[..] {
        [a, b, c] => (a, b, c),
        _ => return Err(dim_err("conv1d", format!("kernel dims {:?}", kernel.dims()))),
    };
    if k_in != c_in {
        return Err(dim_err("conv1d", format!("input channels {c_in} vs kernel {:?}", kernel.dims())));
    }
    let out_len = conv1d_out_len(len, k, stride, padding)
        .ok_or_else(|| dim_err("conv1d", format!("length {len} too short for kernel {k}")))?;
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(dim_err("conv1d", format!("bias {:?} vs {c_out} channels", b.dims())));
        }
    }
    let xp = pad_time(x, padding);
    let lp = len + 2 * padding;
    let mut out = Tensor::zeros(&[c_out, out_len]);
    if let Some(b) = bias {
        for (row, &bi) in out.data_mut().chunks_mut(out_len).zip(b.data()) {
            row.fill(bi);
        }
    }
    for tap in 0..k {
        let w_tap = MatRef { data: kernel.data(), offset: tap, rows: c_out, cols: c_in, row_stride: c_in * k, col_stride: k };
        let x_tap = MatRef { data: xp.data(), offset: tap, rows: c_in, cols: out_len, row_stride: lp, col_stride: stride };
        gemm(T::one(), w_tap, x_tap, T::one(), MatMut::dense(out.data_mut(), 0, c_out, out_len));
    }
    Ok(out)
}

/// Returns `(dx, dkernel, dbias)`.
pub fn conv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c_in, len) = x.shape2().expect("rank 2");
    let (c_out, k) = (kernel.dims()[0], kernel.dims()[2]);
    let out_len = dy.dims()[1];
    let lp = len + 2 * padding;
    let xp = pad_time(x, padding);
    let mut dxp = Tensor::zeros(&[c_in, lp]);
    let mut dk = Tensor::zeros(kernel.dims());
    for tap in 0..k {
        let x_tap_t = MatRef { data: xp.data(), offset: tap, rows: out_len, cols: c_in, row_stride: stride, col_stride: lp };
        let dk_tap = MatMut { data: dk.data_mut(), offset: tap, rows: c_out, cols: c_in, row_stride: c_in * k, col_stride: k };
        gemm(T::one(), MatRef::dense(dy.data(), 0, c_out, out_len), x_tap_t, T::zero(), dk_tap);

        let w_tap_t = MatRef { data: kernel.data(), offset: tap, rows: c_in, cols: c_out, row_stride: k, col_stride: c_in * k };
        let dx_tap = MatMut { data: dxp.data_mut(), offset: tap, rows: c_in, cols: out_len, row_stride: lp, col_stride: stride };
        gemm(T::one(), w_tap_t, MatRef::dense(dy.data(), 0, c_out, out_len), T::one(), dx_tap);
    }
    let dx = if padding == 0 {
        dxp
    } else {
        let mut dx = Tensor::zeros(&[c_in, len]);
        for (src, dst) in dxp.data().chunks(lp).zip(dx.data_mut().chunks_mut(len)) {
            dst.copy_from_slice(&src[padding..padding + len]);
        }
        dx
    };
    let db = Tensor::from_fn(&[c_out], |o| dy.data()[o * out_len..(o + 1) * out_len].iter().copied().sum());
    (dx, dk, db)
}

/// `op(a) * op(b)` where `op` optionally transposes a rank-2 operand.
pub fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_a: bool, trans_b: bool) -> Result<Tensor<T>> {
    let (ar, ac) = shape2(a, "matmul")?;
    let (br, bc) = shape2(b, "matmul")?;
    let va = if trans_a { MatRef::dense(a.data(), 0, ar, ac).t() } else { MatRef::dense(a.data(), 0, ar, ac) };
    let vb = if trans_b { MatRef::dense(b.data(), 0, br, bc).t() } else { MatRef::dense(b.data(), 0, br, bc) };
    if va.cols != vb.rows {
        return Err(dim_err("matmul", format!("{:?}{} x {:?}{}", a.dims(), if trans_a { "^T" } else { "" }, b.dims(), if trans_b { "^T" } else { "" })));
    }
    let (m, n) = (va.rows, vb.cols);
    let mut out = Tensor::zeros(&[m, n]);
    gemm(T::one(), va, vb, T::zero(), MatMut::dense(out.data_mut(), 0, m, n));
    Ok(out)
}

/// Returns `(da, db)` for [`matmul_forward`].
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_a: bool,
    trans_b: bool,
    dc: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (ar, ac) = a.shape2().expect("rank 2");
    let (br, bc) = b.shape2().expect("rank 2");
    let va = if trans_a { MatRef::dense(a.data(), 0, ar, ac).t() } else { MatRef::dense(a.data(), 0, ar, ac) };
    let vb = if trans_b { MatRef::dense(b.data(), 0, br, bc).t() } else { MatRef::dense(b.data(), 0, br, bc) };
    let (m, n) = (va.rows, vb.cols);
    let vdc = MatRef::dense(dc.data(), 0, m, n);

    // d op(a) = dC op(b)^T, written through a transposed view when op(a) = a^T.
    let mut da = Tensor::zeros(a.dims());
    let da_view = if trans_a {
        MatMut { data: da.data_mut(), offset: 0, rows: ac, cols: ar, row_stride: 1, col_stride: ac }
    } else {
        MatMut::dense(da.data_mut(), 0, ar, ac)
    };
    gemm(T::one(), vdc, vb.t(), T::zero(), da_view);

    let mut db = Tensor::zeros(b.dims());
    let db_view = if trans_b {
        MatMut { data: db.data_mut(), offset: 0, rows: bc, cols: br, row_stride: 1, col_stride: bc }
    } else {
        MatMut::dense(db.data_mut(), 0, br, bc)
    };
    gemm(T::one(), va.t(), vdc, T::zero(), db_view);
    (da, db)
}

/// Per-group statistics saved by the group-norm forward pass.
#[derive(Clone, Debug)]
pub struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// Group normalization over `[C, L]` with per-channel affine parameters.
pub fn group_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: f64,
) -> Result<(Tensor<T>, GroupStats<T>)> {
    let (c, l) = shape2(x, "group_norm")?;
    if groups == 0 || c % groups != 0 || gamma.len() != c || beta.len() != c {
        return Err(dim_err("group_norm", format!("{c} channels, {groups} groups, affine {:?}/{:?}", gamma.dims(), beta.dims())));
    }
    let per = (c / groups) * l;
    let mut out = Tensor::zeros(x.dims());
    let mut stats = GroupStats { mean: Vec::with_capacity(groups), rstd: Vec::with_capacity(groups) };
    let n = T::from_f64(per as f64);
    for g in 0..groups {
        let xs = &x.data()[g * per..(g + 1) * per];
        let mean = xs.iter().copied().sum::<T>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + T::from_f64(eps)).sqrt();
        stats.mean.push(mean);
        stats.rstd.push(rstd);
        let ys = &mut out.data_mut()[g * per..(g + 1) * per];
        for (ch_off, (xrow, yrow)) in xs.chunks(l).zip(ys.chunks_mut(l)).enumerate() {
            let ch = g * (c / groups) + ch_off;
            let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
            for (y, &v) in yrow.iter_mut().zip(xrow) {
                *y = (v - mean) * rstd * gm + bt;
            }
        }
    }
    Ok((out, stats))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &GroupStats<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c, l) = x.shape2().expect("rank 2");
    let groups = stats.mean.len();
    let cpg = c / groups;
    let n = T::from_f64((cpg * l) as f64);
    let mut dx = Tensor::zeros(x.dims());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for g in 0..groups {
        let (mean, rstd) = (stats.mean[g], stats.rstd[g]);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for ch in g * cpg..(g + 1) * cpg {
            let gm = gamma.data()[ch];
            let xrow = &x.data()[ch * l..(ch + 1) * l];
            let dyrow = &dy.data()[ch * l..(ch + 1) * l];
            let (mut dg, mut db) = (T::zero(), T::zero());
            for (&v, &d) in xrow.iter().zip(dyrow) {
                let xhat = (v - mean) * rstd;
                dg += d * xhat;
                db += d;
                sum_dxhat += d * gm;
                sum_dxhat_xhat += d * gm * xhat;
            }
            dgamma.data_mut()[ch] = dg;
            dbeta.data_mut()[ch] = db;
        }
        for ch in g * cpg..(g + 1) * cpg {
            let gm = gamma.data()[ch];
            for i in ch * l..(ch + 1) * l {
                let xhat = (x.data()[i] - mean) * rstd;
                let dxhat = dy.data()[i] * gm;
                dx.data_mut()[i] = rstd / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, cols) = shape2(x, "softmax")?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let cols = y.dims()[1];
    let mut dx = Tensor::zeros(y.dims());
    for ((yr, dyr), dxr) in y.data().chunks(cols).zip(dy.data().chunks(cols)).zip(dx.data_mut().chunks_mut(cols)) {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(x.dims());
    for ((d, &v), &g) in dx.data_mut().iter_mut().zip(x.data()).zip(dy.data()) {
        let s = sigmoid(v);
        *d = g * s * (T::one() + v * (T::one() - s));
    }
    dx
}

/// Source index used by nearest-neighbour resampling of `src_len` onto `dst_len`.
#[inline]
pub fn nearest_source(t: usize, src_len: usize, dst_len: usize) -> usize {
    t * src_len / dst_len
}

/// Nearest-neighbour resampling of every row of `[R, L]` to `[R, len]`.
pub fn resample_nearest<T: Scalar>(x: &Tensor<T>, len: usize) -> Result<Tensor<T>> {
    let (rows, src) = shape2(x, "resample_nearest")?;
    if len == 0 {
        return Err(dim_err("resample_nearest", "target length 0"));
    }
    let mut out = Tensor::zeros(&[rows, len]);
    for (xr, yr) in x.data().chunks(src).zip(out.data_mut().chunks_mut(len)) {
        for (t, y) in yr.iter_mut().enumerate() {
            *y = xr[nearest_source(t, src, len)];
        }
    }
    Ok(out)
}

pub fn resample_nearest_backward<T: Scalar>(src_len: usize, dy: &Tensor<T>) -> Tensor<T> {
    let (rows, len) = dy.shape2().expect("rank 2");
    let mut dx = Tensor::zeros(&[rows, src_len]);
    for (dyr, dxr) in dy.data().chunks(len).zip(dx.data_mut().chunks_mut(src_len)) {
        for (t, &g) in dyr.iter().enumerate() {
            dxr[nearest_source(t, src_len, len)] += g;
        }
    }
    dx
}
