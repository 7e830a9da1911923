//! Forward and backward kernels behind the tape ops.

use super::{PoolIndices, Real, Result, Shape, Tensor, TensorError};
use crate::parallel;

pub(crate) fn conv_out_dim(
    op: &'static str,
    size: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op,
            msg: "stride must be positive".into(),
        });
    }
    let padded = size + 2 * pad;
    if padded < k || (padded - k) % stride != 0 {
        return Err(TensorError::InvalidArgument {
            op,
            msg: format!(
                "output size ({size} + 2*{pad} - {k})/{stride} + 1 is not a positive integer"
            ),
        });
    }
    Ok((padded - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, weight: Shape, stride: usize, pad: usize) -> Result<Self> {
        if input.c() != weight.c() {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: format!("input with {} channels", weight.c()),
                got: format!("input {input} for weight {weight}"),
            });
        }
        let ho = conv_out_dim("conv2d", input.h(), weight.h(), stride, pad)?;
        let wo = conv_out_dim("conv2d", input.w(), weight.w(), stride, pad)?;
        Ok(ConvGeom {
            c_in: input.c(),
            h: input.h(),
            w: input.w(),
            kh: weight.h(),
            kw: weight.w(),
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn cols_len(&self) -> usize {
        self.k() * self.ho * self.wo
    }

    /// Output positions `lo..hi` along one axis whose input index
    /// `o * stride + k - pad` falls inside `0..n_in`.
    fn valid(&self, k: usize, n_out: usize, n_in: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(k).div_ceil(s).min(n_out);
        let hi = if n_in + self.pad <= k {
            lo
        } else {
            ((n_in - 1 + self.pad - k) / s + 1).clamp(lo, n_out)
        };
        (lo, hi)
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let hw = self.ho * self.wo;
        let s = self.stride;
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (y0, y1) = self.valid(ky, self.ho, self.h);
                for kx in 0..self.kw {
                    let (x0, x1) = self.valid(kx, self.wo, self.w);
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    dst[..y0 * self.wo].fill(T::zero());
                    dst[y1 * self.wo..].fill(T::zero());
                    for oy in y0..y1 {
                        let iy = oy * s + ky - self.pad;
                        let out_row = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        out_row[..x0].fill(T::zero());
                        out_row[x1..].fill(T::zero());
                        if x0 == x1 {
                            continue;
                        }
                        let ix0 = x0 * s + kx - self.pad;
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        if s == 1 {
                            out_row[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                        } else {
                            for (v, &u) in out_row[x0..x1].iter_mut().zip(src[ix0..].iter().step_by(s)) {
                                *v = u;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let hw = self.ho * self.wo;
        let s = self.stride;
        for ci in 0..self.c_in {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                let (y0, y1) = self.valid(ky, self.ho, self.h);
                for kx in 0..self.kw {
                    let (x0, x1) = self.valid(kx, self.wo, self.w);
                    if x0 == x1 {
                        continue;
                    }
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in y0..y1 {
                        let iy = oy * s + ky - self.pad;
                        let ix0 = x0 * s + kx - self.pad;
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let from = &src[oy * self.wo + x0..oy * self.wo + x1];
                        for (d, &g) in dst[ix0..].iter_mut().step_by(s).zip(from) {
                            *d += g;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let geom = ConvGeom::new(input.shape(), weight.shape(), stride, pad)?;
    let c_out = weight.shape().n();
    if bias.len() != c_out {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            expected: format!("bias of {c_out} elements"),
            got: format!("{}", bias.shape()),
        });
    }
    let n = input.shape().n();
    let out_shape = Shape::new(n, c_out, geom.ho, geom.wo);
    let hw = geom.ho * geom.wo;
    let k = geom.k();
    let mut out = vec![T::zero(); out_shape.numel()];
    let w = weight.data();
    let b = bias.data();
    parallel::for_each_chunk(&mut out, c_out * hw, |i, dst| {
        let mut cols = vec![T::zero(); geom.cols_len()];
        geom.im2col(input.sample(i), &mut cols);
        for (co, row) in dst.chunks_mut(hw).enumerate() {
            row.iter_mut().for_each(|v| *v = b[co]);
        }
        T::gemm(
            c_out,
            k,
            hw,
            T::one(),
            w,
            k as isize,
            1,
            &cols,
            hw as isize,
            1,
            T::one(),
            dst,
            hw as isize,
            1,
        );
    });
    Tensor::from_vec(out_shape, out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let geom = ConvGeom::new(input.shape(), weight.shape(), stride, pad)?;
    let c_out = weight.shape().n();
    let n = input.shape().n();
    let hw = geom.ho * geom.wo;
    let k = geom.k();
    let w = weight.data();
    let sample_in = input.shape().sample_len();

    // Per-sample partials, summed in batch order afterwards for determinism.
    let partials = parallel::map_indexed(n, |i| {
        let g = &grad_out[i * c_out * hw..(i + 1) * c_out * hw];
        let mut cols = vec![T::zero(); geom.cols_len()];
        let dw = if need[1] {
            geom.im2col(input.sample(i), &mut cols);
            let mut dw = vec![T::zero(); c_out * k];
            T::gemm(
                c_out,
                hw,
                k,
                T::one(),
                g,
                hw as isize,
                1,
                &cols,
                1,
                hw as isize,
                T::zero(),
                &mut dw,
                k as isize,
                1,
            );
            Some(dw)
        } else {
            None
        };
        let dx = if need[0] {
            T::gemm(
                k,
                c_out,
                hw,
                T::one(),
                w,
                1,
                k as isize,
                g,
                hw as isize,
                1,
                T::zero(),
                &mut cols,
                hw as isize,
                1,
            );
            let mut dx = vec![T::zero(); sample_in];
            geom.col2im(&cols, &mut dx);
            Some(dx)
        } else {
            None
        };
        (dx, dw)
    });

    let mut grads = ConvGrads {
        input: need[0].then(|| Vec::with_capacity(n * sample_in)),
        weight: need[1].then(|| vec![T::zero(); c_out * k]),
        bias: None,
    };
    for (dx, dw) in partials {
        if let (Some(acc), Some(dx)) = (grads.input.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
        if let (Some(acc), Some(dw)) = (grads.weight.as_mut(), dw) {
            acc.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b);
        }
    }
    if need[2] {
        let mut db = vec![T::zero(); c_out];
        for i in 0..n {
            for (co, acc) in db.iter_mut().enumerate() {
                let start = (i * c_out + co) * hw;
                *acc += grad_out[start..start + hw].iter().copied().sum::<T>();
            }
        }
        grads.bias = Some(db);
    }
    Ok(grads)
}

pub(crate) fn maxpool_forward<T: Real>(
    input: &Tensor<T>,
    k: usize,
    s: usize,
) -> Result<(Tensor<T>, PoolIndices)> {
    let shape = input.shape();
    if k == 0 || s == 0 {
        return Err(TensorError::InvalidArgument {
            op: "maxpool2d",
            msg: "kernel and stride must be positive".into(),
        });
    }
    let ho = conv_out_dim("maxpool2d", shape.h(), k, s, 0)?;
    let wo = conv_out_dim("maxpool2d", shape.w(), k, s, 0)?;
    if k == s && (shape.h() % s != 0 || shape.w() % s != 0) {
        return Err(TensorError::InvalidArgument {
            op: "maxpool2d",
            msg: format!("spatial dims {}x{} not divisible by {s}", shape.h(), shape.w()),
        });
    }
    let out_shape = Shape::new(shape.n(), shape.c(), ho, wo);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut idx = Vec::with_capacity(out_shape.numel());
    let (h, w) = (shape.h(), shape.w());
    if k == 2 && s == 2 {
        for plane in input.data().chunks(h * w) {
            for oy in 0..ho {
                let (r0, r1) = (&plane[2 * oy * w..][..w], &plane[(2 * oy + 1) * w..][..w]);
                for ox in 0..wo {
                    let x = 2 * ox;
                    // same first-maximum rule as the general loop
                    let at = 2 * oy * w + x;
                    let (mut best, mut bi) = (T::neg_infinity(), at);
                    for (v, i) in [(r0[x], at), (r0[x + 1], at + 1), (r1[x], at + w), (r1[x + 1], at + w + 1)] {
                        if v > best {
                            best = v;
                            bi = i;
                        }
                    }
                    out.push(best);
                    idx.push(bi as u32);
                }
            }
        }
        return Ok((Tensor::from_vec(out_shape, out)?, PoolIndices::new(out_shape, (h, w), idx)?));
    }
    for plane in input.data().chunks(h * w) {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = (oy * s) * w + ox * s;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = (oy * s + ky) * w + ox * s + kx;
                        // strict comparison keeps the first maximum in row-major order
                        if plane[i] > best {
                            best = plane[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                idx.push(best_i as u32);
            }
        }
    }
    Ok((
        Tensor::from_vec(out_shape, out)?,
        PoolIndices::new(out_shape, (h, w), idx)?,
    ))
}

/// Scatters `values` (shaped like `indices`) into zero planes of `out_hw`.
pub(crate) fn scatter<T: Real>(
    values: &[T],
    indices: &PoolIndices,
    out_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let shape = indices.shape();
    let plane_out = out_hw.0 * out_hw.1;
    let plane_in = shape.plane();
    let out_shape = Shape::new(shape.n(), shape.c(), out_hw.0, out_hw.1);
    let mut out = vec![T::zero(); out_shape.numel()];
    for (p, (src, dst)) in values
        .chunks(plane_in)
        .zip(out.chunks_mut(plane_out))
        .enumerate()
    {
        let idx = &indices.flat_index()[p * plane_in..(p + 1) * plane_in];
        for (&v, &i) in src.iter().zip(idx) {
            let i = i as usize;
            if i >= plane_out {
                return Err(TensorError::IndexOutOfRange {
                    op: "unpool",
                    index: i,
                    len: plane_out,
                });
            }
            dst[i] += v;
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Reads `source` (planes of `source_hw`) at each index position.
pub(crate) fn gather<T: Real>(source: &[T], source_hw: (usize, usize), indices: &PoolIndices) -> Vec<T> {
    let plane_src = source_hw.0 * source_hw.1;
    let plane_idx = indices.shape().plane();
    let mut out = Vec::with_capacity(indices.flat_index().len());
    for (p, idx) in indices.flat_index().chunks(plane_idx).enumerate() {
        let src = &source[p * plane_src..(p + 1) * plane_src];
        out.extend(idx.iter().map(|&i| src[i as usize]));
    }
    out
}

pub(crate) fn upsample_forward<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 1 {
        return Err(TensorError::InvalidArgument {
            op: "upsample_nearest",
            msg: format!("factor must be >= 1, got {factor}"),
        });
    }
    let s = input.shape();
    let (h, w) = (s.h(), s.w());
    let out_shape = Shape::new(s.n(), s.c(), h * factor, w * factor);
    let wo = w * factor;
    let mut out = vec![T::zero(); out_shape.numel()];
    for (row, dst) in input.data().chunks(w).zip(out.chunks_mut(wo * factor)) {
        let (first, rest) = dst.split_at_mut(wo);
        for (&v, cell) in row.iter().zip(first.chunks_mut(factor)) {
            cell.fill(v);
        }
        for copy in rest.chunks_mut(wo) {
            copy.copy_from_slice(first);
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub(crate) fn upsample_backward<T: Real>(grad_out: &[T], in_shape: Shape, factor: usize) -> Vec<T> {
    let (h, w) = (in_shape.h(), in_shape.w());
    let (ho, wo) = (h * factor, w * factor);
    let mut dx = vec![T::zero(); in_shape.numel()];
    debug_assert_eq!(grad_out.len(), in_shape.n() * in_shape.c() * ho * wo);
    for (g, d) in grad_out.chunks(wo * factor).zip(dx.chunks_mut(w)) {
        for grow in g.chunks(wo) {
            for (cell, acc) in grow.chunks(factor).zip(d.iter_mut()) {
                *acc += cell.iter().copied().sum::<T>();
            }
        }
    }
    dx
}

/// Per-channel mean and biased variance over `(n, h, w)`.
pub(crate) fn channel_moments<T: Real>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let s = x.shape();
    let (c, plane) = (s.c(), s.plane());
    let count = T::from_usize(s.n() * plane).unwrap();
    let mut mean = vec![T::zero(); c];
    for (j, chunk) in x.data().chunks(plane).enumerate() {
        mean[j % c] += chunk.iter().copied().sum::<T>();
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    let mut var = vec![T::zero(); c];
    for (j, chunk) in x.data().chunks(plane).enumerate() {
        let m = mean[j % c];
        var[j % c] += chunk.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
    }
    var.iter_mut().for_each(|v| *v = *v / count);
    (mean, var)
}
