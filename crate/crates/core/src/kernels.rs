//! Forward and backward kernels on raw tensors.
//!
//! These are graph-free; [`crate::graph::Graph`] records calls to them and
//! routes gradients through the matching `*_backward` functions. Every
//! reduction runs in a fixed scan order so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{matmul, spatial_len, Real, Tensor};

const SPATIAL: [&str; 3] = ["depth", "height", "width"];

/// Resolved geometry of a 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        const OP: &str = "conv3d";
        let [n, cin, d, h, w] = as5(OP, input)?;
        let [cout, wcin, kd, kh, kw] = as5(OP, weight)?;
        if wcin != cin {
            return Err(Error::shape(OP, "in_channels", cin, wcin));
        }
        if kd != kh || kd != kw {
            return Err(Error::arg(
                OP,
                format!("kernel must be cubic, got {kd}x{kh}x{kw}"),
            ));
        }
        if kd % 2 == 0 {
            return Err(Error::arg(OP, format!("kernel size must be odd, got {kd}")));
        }
        if stride == 0 {
            return Err(Error::arg(OP, "stride must be positive"));
        }
        let mut output = [0; 3];
        for (axis, &size) in [d, h, w].iter().enumerate() {
            let padded = size + 2 * padding;
            if padded < kd {
                return Err(Error::shape(OP, SPATIAL[axis], kd, padded));
            }
            output[axis] = (padded - kd) / stride + 1;
        }
        Ok(Self {
            batch: n,
            in_channels: cin,
            out_channels: cout,
            kernel: kd,
            stride,
            padding,
            input: [d, h, w],
            output,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let [d, h, w] = self.output;
        vec![self.batch, self.out_channels, d, h, w]
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    /// Rows of the unfolded input matrix: `in_channels * k^3`.
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn as5(op: &'static str, shape: &[usize]) -> Result<[usize; 5]> {
    match *shape {
        [a, b, c, d, e] => Ok([a, b, c, d, e]),
        _ => Err(Error::RankMismatch {
            op,
            expected: 5,
            got: shape.len(),
        }),
    }
}

/// Output spatial size along one axis, or `None` if the kernel does not fit.
pub fn conv_output_len(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `tap`
/// (stride 1), plus the input offset `tap - padding`.
#[inline]
fn unit_stride_span(
    out_len: usize,
    in_len: usize,
    tap: usize,
    padding: usize,
) -> (usize, usize, isize) {
    let offset = tap as isize - padding as isize;
    let lo = (-offset).max(0) as usize;
    let hi = ((in_len as isize - offset).max(0) as usize).min(out_len);
    (lo.min(hi), hi, offset)
}

/// Target size (in elements) of one unfolded column block.
const TILE_ELEMS: usize = 1 << 16;

/// Output rows (`(z, y)` pairs) per column block.
fn rows_per_tile(g: &ConvGeometry) -> usize {
    (TILE_ELEMS / (g.patch_len() * g.output[2]).max(1)).clamp(1, g.output[0] * g.output[1])
}

/// Unfolds output rows `r0..r1` (row `r` is `z = r / H'`, `y = r % H'`) of
/// one sample (`C x D x H x W`) into a `(C*k^3) x ((r1-r0)*W')` matrix.
fn im2col<T: Real>(g: &ConvGeometry, x: &[T], r0: usize, r1: usize, cols: &mut [T]) {
    let k = g.kernel;
    let [d, h, w] = g.input;
    let [_, oh, ow] = g.output;
    let vol = (r1 - r0) * ow;
    let (s, p) = (g.stride as isize, g.padding as isize);
    for ci in 0..g.in_channels {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let dst = &mut cols[row * vol..(row + 1) * vol];
                    let span = (g.stride == 1).then(|| unit_stride_span(ow, w, kw, g.padding));
                    for r in r0..r1 {
                        let (z, y) = (r / oh, r % oh);
                        let iz = z as isize * s + kd as isize - p;
                        let iy = y as isize * s + kh as isize - p;
                        let o0 = (r - r0) * ow;
                        let out = &mut dst[o0..o0 + ow];
                        if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        {
                            let base = (iz as usize * h + iy as usize) * w;
                            match span {
                                Some((lo, hi, off)) => {
                                    out[..lo].fill(T::zero());
                                    if lo < hi {
                                        let start = (base as isize + lo as isize + off) as usize;
                                        out[lo..hi].copy_from_slice(&xc[start..start + (hi - lo)]);
                                    }
                                    out[hi..].fill(T::zero());
                                }
                                None => {
                                    for (xo, o) in out.iter_mut().enumerate() {
                                        let ix = xo as isize * s + kw as isize - p;
                                        *o = if ix < 0 || ix >= w as isize {
                                            T::zero()
                                        } else {
                                            xc[base + ix as usize]
                                        };
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a column block back into `dx`.
fn col2im<T: Real>(g: &ConvGeometry, cols: &[T], r0: usize, r1: usize, dx: &mut [T]) {
    let k = g.kernel;
    let [d, h, w] = g.input;
    let [_, oh, ow] = g.output;
    let vol = (r1 - r0) * ow;
    let (s, p) = (g.stride as isize, g.padding as isize);
    for ci in 0..g.in_channels {
        let xc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = ((ci * k + kd) * k + kh) * k + kw;
                    let src = &cols[row * vol..(row + 1) * vol];
                    let span = (g.stride == 1).then(|| unit_stride_span(ow, w, kw, g.padding));
                    for r in r0..r1 {
                        let (z, y) = (r / oh, r % oh);
                        let iz = z as isize * s + kd as isize - p;
                        let iy = y as isize * s + kh as isize - p;
                        if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                            continue;
                        }
                        {
                            let o0 = (r - r0) * ow;
                            let row_src = &src[o0..o0 + ow];
                            let base = (iz as usize * h + iy as usize) * w;
                            match span {
                                Some((lo, hi, off)) if lo < hi => {
                                    let start = (base as isize + lo as isize + off) as usize;
                                    for (dst, &v) in xc[start..start + (hi - lo)]
                                        .iter_mut()
                                        .zip(&row_src[lo..hi])
                                    {
                                        *dst += v;
                                    }
                                }
                                Some(_) => {}
                                None => {
                                    for (xo, &v) in row_src.iter().enumerate() {
                                        let ix = xo as isize * s + kw as isize - p;
                                        if ix >= 0 && ix < w as isize {
                                            xc[base + ix as usize] += v;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3D cross-correlation with zero padding.
pub fn conv3d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.out_channels {
            return Err(Error::shape("conv3d", "bias", g.out_channels, b.len()));
        }
    }
    input.ensure_finite("conv3d")?;
    weight.ensure_finite("conv3d")?;

    let in_len = g.in_channels * g.in_volume();
    let vol = g.out_volume();
    let out_len = g.out_channels * vol;
    let plen = g.patch_len();
    let (rows, ow) = (g.output[0] * g.output[1], g.output[2]);
    let tile = rows_per_tile(&g);
    let mut out = vec![T::zero(); g.batch * out_len];
    let w = weight.data();
    out.par_chunks_mut(out_len)
        .zip(input.data().par_chunks(in_len))
        .for_each(|(y, x)| {
            if g.is_pointwise() {
                matmul(
                    g.out_channels,
                    g.in_channels,
                    vol,
                    w,
                    false,
                    x,
                    false,
                    y,
                    false,
                );
            } else {
                let mut cols = vec![T::zero(); plen * tile * ow];
                for r0 in (0..rows).step_by(tile) {
                    let r1 = (r0 + tile).min(rows);
                    let tv = (r1 - r0) * ow;
                    im2col(&g, x, r0, r1, &mut cols);
                    gemm_strided(
                        g.out_channels,
                        plen,
                        tv,
                        w,
                        (plen, 1),
                        &cols,
                        (tv, 1),
                        &mut y[r0 * ow..],
                        vol,
                        false,
                    );
                }
            }
            if let Some(b) = bias {
                for (o, chunk) in y.chunks_mut(vol).enumerate() {
                    let bo = b.data()[o];
                    chunk.iter_mut().for_each(|v| *v += bo);
                }
            }
        });
    Tensor::new(g.output_shape(), out)
}

/// `c = a · b` (or `c += a · b`) for an `m x k` by `k x n` product with
/// arbitrary element strides on `a`/`b` and row stride `ldc` on `c`.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    c: &mut [T],
    ldc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent =
        |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(k == 0 || a.len() >= extent(m, k, rsa, csa));
    assert!(k == 0 || b.len() >= extent(k, n, rsb, csb));
    assert!(c.len() >= extent(m, n, ldc, 1));
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: extents checked above.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Gradients of [`conv3d`] given the upstream gradient `dy`.
pub struct ConvGrads<T: Real> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    dy: &[T],
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    let in_len = g.in_channels * g.in_volume();
    let vol = g.out_volume();
    let out_len = g.out_channels * vol;
    let plen = g.patch_len();
    let (rows, ow) = (g.output[0] * g.output[1], g.output[2]);
    let tile = rows_per_tile(&g);
    let w = weight.data();

    // Per-sample weight (and input) gradients; weight gradients are summed
    // afterwards in sample order.
    let mut dx = vec![T::zero(); if need_input_grad { g.batch * in_len } else { 0 }];
    let mut dx_chunks: Vec<&mut [T]> = if need_input_grad {
        dx.chunks_mut(in_len).collect()
    } else {
        (0..g.batch).map(|_| &mut [][..]).collect()
    };
    let partial: Vec<Vec<T>> = dx_chunks
        .par_iter_mut()
        .zip(input.data().par_chunks(in_len))
        .zip(dy.par_chunks(out_len))
        .map(|((dxn, x), gy)| {
            let mut dw = vec![T::zero(); g.out_channels * plen];
            if g.is_pointwise() {
                matmul(
                    g.out_channels,
                    vol,
                    plen,
                    gy,
                    false,
                    x,
                    true,
                    &mut dw,
                    false,
                );
                if need_input_grad {
                    matmul(
                        g.in_channels,
                        g.out_channels,
                        vol,
                        w,
                        true,
                        gy,
                        false,
                        dxn,
                        false,
                    );
                }
                return dw;
            }
            let mut cols = vec![T::zero(); plen * tile * ow];
            for r0 in (0..rows).step_by(tile) {
                let r1 = (r0 + tile).min(rows);
                let tv = (r1 - r0) * ow;
                let gy_tile = &gy[r0 * ow..];
                im2col(&g, x, r0, r1, &mut cols);
                gemm_strided(
                    g.out_channels,
                    tv,
                    plen,
                    gy_tile,
                    (vol, 1),
                    &cols,
                    (1, tv),
                    &mut dw,
                    plen,
                    true,
                );
                if need_input_grad {
                    gemm_strided(
                        plen,
                        g.out_channels,
                        tv,
                        w,
                        (1, plen),
                        gy_tile,
                        (vol, 1),
                        &mut cols,
                        tv,
                        false,
                    );
                    col2im(&g, &cols, r0, r1, dxn);
                }
            }
            dw
        })
        .collect();
    let mut dweight = vec![T::zero(); g.out_channels * plen];
    for dw in &partial {
        for (acc, &v) in dweight.iter_mut().zip(dw) {
            *acc += v;
        }
    }

    let mut dbias = vec![T::zero(); g.out_channels];
    for gy in dy.chunks(out_len) {
        for (o, chunk) in gy.chunks(vol).enumerate() {
            let mut s = T::zero();
            for &v in chunk {
                s += v;
            }
            dbias[o] += s;
        }
    }

    Ok(ConvGrads {
        input: need_input_grad.then_some(dx),
        weight: dweight,
        bias: dbias,
    })
}

/// Per-voxel channel mixing with a `[Cout, C, 1, 1, 1]` kernel.
pub fn conv1x1x1<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_pointwise_kernel(weight.shape())?;
    conv3d(input, weight, Some(bias), 1, 0)
}

pub(crate) fn check_pointwise_kernel(shape: &[usize]) -> Result<()> {
    let [_, _, kd, kh, kw] = as5("conv1x1x1", shape)?;
    if (kd, kh, kw) != (1, 1, 1) {
        return Err(Error::arg(
            "conv1x1x1",
            format!("kernel must be 1x1x1, got {kd}x{kh}x{kw}"),
        ));
    }
    Ok(())
}

/// Saved per-slice statistics of an instance normalization.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-`(n, c)` standardization followed by a per-channel affine map.
pub fn instance_norm<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    const OP: &str = "instance_norm";
    let [n, c, ..] = input.dims5(OP)?;
    let vol = spatial_len(input.shape());
    if vol < 2 {
        return Err(Error::arg(OP, "each (n, c) slice needs at least 2 voxels"));
    }
    if gamma.len() != c {
        return Err(Error::shape(OP, "gamma", c, gamma.len()));
    }
    if beta.len() != c {
        return Err(Error::shape(OP, "beta", c, beta.len()));
    }
    let eps = T::from_f64(eps);
    let inv_n = T::one() / T::from_f64(vol as f64);
    let mut out = vec![T::zero(); input.len()];
    let mut stats = NormStats {
        mean: Vec::with_capacity(n * c),
        inv_std: Vec::with_capacity(n * c),
    };
    for (slice, (x, y)) in input
        .data()
        .chunks(vol)
        .zip(out.chunks_mut(vol))
        .enumerate()
    {
        let ch = slice % c;
        // An f64 sum makes the mean of a constant slice exact, so such a
        // slice normalizes to exactly beta.
        let sum: f64 = x.iter().map(|v| v.as_f64()).sum();
        let mean = T::from_f64(sum / vol as f64);
        let mut sq = T::zero();
        for &v in x {
            let d = v - mean;
            sq += d * d;
        }
        let inv_std = T::one() / (sq * inv_n + eps).sqrt();
        let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
        for (o, &v) in y.iter_mut().zip(x) {
            *o = ga * ((v - mean) * inv_std) + be;
        }
        stats.mean.push(mean);
        stats.inv_std.push(inv_std);
    }
    Ok((Tensor::new(input.shape().to_vec(), out)?, stats))
}

pub struct NormGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn instance_norm_backward<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    dy: &[T],
) -> NormGrads<T> {
    let c = input.shape()[1];
    let vol = spatial_len(input.shape());
    let count = T::from_f64(vol as f64);
    let mut dx = vec![T::zero(); input.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (slice, ((x, gy), gx)) in input
        .data()
        .chunks(vol)
        .zip(dy.chunks(vol))
        .zip(dx.chunks_mut(vol))
        .enumerate()
    {
        let ch = slice % c;
        let (mean, inv_std) = (stats.mean[slice], stats.inv_std[slice]);
        let ga = gamma.data()[ch];
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for (&v, &d) in x.iter().zip(gy) {
            let xhat = (v - mean) * inv_std;
            sum_dy += d;
            sum_dy_xhat += d * xhat;
        }
        dgamma[ch] += sum_dy_xhat;
        dbeta[ch] += sum_dy;
        let scale = ga * inv_std / count;
        for ((o, &v), &d) in gx.iter_mut().zip(x).zip(gy) {
            let xhat = (v - mean) * inv_std;
            *o = scale * (count * d - sum_dy - xhat * sum_dy_xhat);
        }
    }
    NormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

/// 2x2x2 max pooling. Returns the pooled tensor and, per output voxel, the
/// flat input index that won (first maximum in scan order).
pub fn max_pool2<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    const OP: &str = "down2";
    let [n, c, d, h, w] = input.dims5(OP)?;
    for (axis, size) in [d, h, w].into_iter().enumerate() {
        if size % 2 != 0 {
            return Err(Error::shape(OP, SPATIAL[axis], size + 1, size));
        }
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * od * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for slice in 0..n * c {
        let base = slice * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = base + ((2 * z) * h + 2 * y) * w + 2 * xo;
                    let mut best_v = x[best];
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xo + dx;
                                if x[i] > best_v {
                                    best_v = x[i];
                                    best = i;
                                }
                            }
                        }
                    }
                    out.push(best_v);
                    argmax.push(best as u32);
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, od, oh, ow], out)?, argmax))
}

pub fn max_pool2_backward<T: Real>(input_len: usize, argmax: &[u32], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(dy) {
        dx[i as usize] += g;
    }
    dx
}

/// Nearest-neighbour doubling of every spatial dim.
pub fn upsample2<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = input.dims5("up2")?;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let x = input.data();
    let mut out = vec![T::zero(); n * c * od * oh * ow];
    for slice in 0..n * c {
        let src = &x[slice * d * h * w..(slice + 1) * d * h * w];
        let dst = &mut out[slice * od * oh * ow..(slice + 1) * od * oh * ow];
        for z in 0..od {
            for y in 0..oh {
                let srow = &src[((z / 2) * h + y / 2) * w..((z / 2) * h + y / 2 + 1) * w];
                let drow = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                for (xo, o) in drow.iter_mut().enumerate() {
                    *o = srow[xo / 2];
                }
            }
        }
    }
    Tensor::new(vec![n, c, od, oh, ow], out)
}

pub fn upsample2_backward<T: Real>(input_shape: &[usize], dy: &[T]) -> Vec<T> {
    let (d, h, w) = (input_shape[2], input_shape[3], input_shape[4]);
    let slices = input_shape[0] * input_shape[1];
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); slices * d * h * w];
    for slice in 0..slices {
        let src = &dy[slice * 8 * d * h * w..(slice + 1) * 8 * d * h * w];
        let dst = &mut dx[slice * d * h * w..(slice + 1) * d * h * w];
        for z in 0..2 * d {
            for y in 0..oh {
                let srow = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                let drow = &mut dst[((z / 2) * h + y / 2) * w..((z / 2) * h + y / 2 + 1) * w];
                for (xo, &g) in srow.iter().enumerate() {
                    drow[xo / 2] += g;
                }
            }
        }
    }
    dx
}

/// Concatenates two `N, C, ...` tensors along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "concat_channels";
    let [n, ca, d, h, w] = a.dims5(OP)?;
    let [nb, cb, db, hb, wb] = b.dims5(OP)?;
    for (name, x, y) in [
        ("batch", n, nb),
        ("depth", d, db),
        ("height", h, hb),
        ("width", w, wb),
    ] {
        if x != y {
            return Err(Error::shape(OP, name, x, y));
        }
    }
    let vol = d * h * w;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * vol..(i + 1) * ca * vol]);
        out.extend_from_slice(&b.data()[i * cb * vol..(i + 1) * cb * vol]);
    }
    Tensor::new(vec![n, ca + cb, d, h, w], out)
}

/// Softmax across the channel axis at every voxel.
pub fn channel_softmax<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, ..] = input.dims5("channel_softmax")?;
    let vol = spatial_len(input.shape());
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        let base = i * c * vol;
        for v in 0..vol {
            let mut m = x[base + v];
            for ch in 1..c {
                m = m.max(x[base + ch * vol + v]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (x[base + ch * vol + v] - m).exp();
                out[base + ch * vol + v] = e;
                z += e;
            }
            let inv = T::one() / z;
            for ch in 0..c {
                out[base + ch * vol + v] *= inv;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

pub fn channel_softmax_backward<T: Real>(probs: &Tensor<T>, dy: &[T]) -> Vec<T> {
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    let vol = spatial_len(probs.shape());
    let p = probs.data();
    let mut dx = vec![T::zero(); p.len()];
    for i in 0..n {
        let base = i * c * vol;
        for v in 0..vol {
            let mut dot = T::zero();
            for ch in 0..c {
                dot += p[base + ch * vol + v] * dy[base + ch * vol + v];
            }
            for ch in 0..c {
                let j = base + ch * vol + v;
                dx[j] = p[j] * (dy[j] - dot);
            }
        }
    }
    dx
}

/// Per-class sums used by the soft Dice loss.
#[derive(Clone, Debug)]
pub struct DiceSums<T> {
    pub intersection: Vec<T>,
    pub prob_sum: Vec<T>,
    pub target_sum: Vec<T>,
}

/// Soft Dice loss `1 - mean_k (2 I_k + s) / (P_k + G_k + s)` over the
/// foreground classes `k = 1..K`, pooled over the whole batch.
pub fn soft_dice<T: Real>(
    probs: &Tensor<T>,
    targets: &[u8],
    smooth: f64,
) -> Result<(T, DiceSums<T>)> {
    const OP: &str = "dice_loss";
    let [n, k, ..] = probs.dims5(OP)?;
    if k < 2 {
        return Err(Error::arg(OP, format!("need at least 2 classes, got {k}")));
    }
    let vol = spatial_len(probs.shape());
    if targets.len() != n * vol {
        return Err(Error::shape(OP, "targets", n * vol, targets.len()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= k) {
        return Err(Error::LabelOutOfRange {
            label: bad as u32,
            classes: k,
        });
    }
    let p = probs.data();
    let mut sums = DiceSums {
        intersection: vec![T::zero(); k],
        prob_sum: vec![T::zero(); k],
        target_sum: vec![T::zero(); k],
    };
    for i in 0..n {
        let t = &targets[i * vol..(i + 1) * vol];
        for cls in 1..k {
            let pc = &p[(i * k + cls) * vol..(i * k + cls + 1) * vol];
            let (mut inter, mut ps, mut ts) = (T::zero(), T::zero(), T::zero());
            for (&pv, &tv) in pc.iter().zip(t) {
                ps += pv;
                if tv as usize == cls {
                    inter += pv;
                    ts += T::one();
                }
            }
            sums.intersection[cls] += inter;
            sums.prob_sum[cls] += ps;
            sums.target_sum[cls] += ts;
        }
    }
    let s = T::from_f64(smooth);
    let two = T::from_f64(2.0);
    let mut mean_dice = T::zero();
    for cls in 1..k {
        mean_dice +=
            (two * sums.intersection[cls] + s) / (sums.prob_sum[cls] + sums.target_sum[cls] + s);
    }
    mean_dice = mean_dice / T::from_f64((k - 1) as f64);
    Ok((T::one() - mean_dice, sums))
}

pub fn soft_dice_backward<T: Real>(
    probs_shape: &[usize],
    targets: &[u8],
    sums: &DiceSums<T>,
    smooth: f64,
    upstream: T,
) -> Vec<T> {
    let (n, k) = (probs_shape[0], probs_shape[1]);
    let vol = spatial_len(probs_shape);
    let s = T::from_f64(smooth);
    let two = T::from_f64(2.0);
    let scale = -upstream / T::from_f64((k - 1) as f64);
    let mut dp = vec![T::zero(); n * k * vol];
    for cls in 1..k {
        let denom = sums.prob_sum[cls] + sums.target_sum[cls] + s;
        let numer = two * sums.intersection[cls] + s;
        let inv = T::one() / denom;
        let on = scale * (two * denom - numer) * inv * inv;
        let off = scale * (-numer) * inv * inv;
        for i in 0..n {
            let t = &targets[i * vol..(i + 1) * vol];
            let dst = &mut dp[(i * k + cls) * vol..(i * k + cls + 1) * vol];
            for (o, &tv) in dst.iter_mut().zip(t) {
                *o = if tv as usize == cls { on } else { off };
            }
        }
    }
    dp
}
