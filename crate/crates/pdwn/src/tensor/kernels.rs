//! Forward and backward kernels for the standard graph ops.
//!
//! Every kernel writes disjoint output chunks (see [`crate::parallel`]), so
//! gradients accumulate in a fixed order regardless of thread count.

use super::{Scalar, Shape, TensorData};
use crate::parallel::for_each_chunk;

pub fn conv2d_out_shape(input: &Shape, weight: &Shape, stride: usize, padding: usize) -> Shape {
    let k = weight.h;
    let oh = (input.h + 2 * padding - k) / stride + 1;
    let ow = (input.w + 2 * padding - k) / stride + 1;
    Shape::new(input.n, weight.n, oh, ow)
}

/// Direct convolution; weight is (c_out, c_in, k, k), bias is (1, c_out, 1, 1).
pub fn conv2d_forward<T: Scalar>(
    input: &TensorData<T>,
    weight: &TensorData<T>,
    bias: &TensorData<T>,
    stride: usize,
    padding: usize,
) -> TensorData<T> {
    let (h, w) = (input.shape.h, input.shape.w);
    let (c_in, k) = (weight.shape.c, weight.shape.h);
    let out_shape = conv2d_out_shape(&input.shape, &weight.shape, stride, padding);
    let (oh, ow) = (out_shape.h, out_shape.w);
    let mut out = TensorData::zeros(out_shape);

    for_each_chunk(&mut out.data, ow, |row_idx, row| {
        let oy = row_idx % oh;
        let co = (row_idx / oh) % weight.shape.n;
        let n = row_idx / (oh * weight.shape.n);
        row.fill(bias.data[co]);
        for ci in 0..c_in {
            let in_plane = &input.data[input.shape.at(n, ci, 0, 0)..input.shape.at(n, ci, 0, 0) + h * w];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let in_row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
                for kx in 0..k {
                    let wv = weight.at(co, ci, ky, kx);
                    let (ox_min, ox_max) = valid_out_range(kx, padding, stride, w, ow);
                    for ox in ox_min..ox_max {
                        let ix = ox * stride + kx - padding;
                        row[ox] += wv * in_row[ix];
                    }
                }
            }
        }
    });
    out
}

/// Output x-range for which `ox*stride + kx - padding` lands inside `0..w`.
#[inline]
fn valid_out_range(kx: usize, padding: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let ox_min = if kx >= padding { 0 } else { (padding - kx).div_ceil(stride) };
    let last_ix = w as isize - 1 + padding as isize - kx as isize;
    if last_ix < 0 {
        return (0, 0);
    }
    let ox_max = ((last_ix as usize) / stride + 1).min(ow);
    (ox_min.min(ox_max), ox_max)
}

pub fn conv2d_backward_input<T: Scalar>(
    grad_out: &TensorData<T>,
    weight: &TensorData<T>,
    input_shape: Shape,
    stride: usize,
    padding: usize,
) -> TensorData<T> {
    let (h, w) = (input_shape.h, input_shape.w);
    let (c_out, c_in, k) = (weight.shape.n, weight.shape.c, weight.shape.h);
    let (oh, ow) = (grad_out.shape.h, grad_out.shape.w);
    let mut grad_in = TensorData::zeros(input_shape);

    for_each_chunk(&mut grad_in.data, w, |row_idx, row| {
        let iy = row_idx % h;
        let ci = (row_idx / h) % c_in;
        let n = row_idx / (h * c_in);
        for co in 0..c_out {
            let g_plane =
                &grad_out.data[grad_out.shape.at(n, co, 0, 0)..grad_out.shape.at(n, co, 0, 0) + oh * ow];
            for ky in 0..k {
                let t = iy as isize + padding as isize - ky as isize;
                if t < 0 || t % stride as isize != 0 {
                    continue;
                }
                let oy = t as usize / stride;
                if oy >= oh {
                    continue;
                }
                let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                for kx in 0..k {
                    let wv = weight.at(co, ci, ky, kx);
                    let (ox_min, ox_max) = valid_out_range(kx, padding, stride, w, ow);
                    for ox in ox_min..ox_max {
                        let ix = ox * stride + kx - padding;
                        row[ix] += wv * g_row[ox];
                    }
                }
            }
        }
    });
    grad_in
}

pub fn conv2d_backward_weight<T: Scalar>(
    grad_out: &TensorData<T>,
    input: &TensorData<T>,
    weight_shape: Shape,
    stride: usize,
    padding: usize,
) -> TensorData<T> {
    let (h, w) = (input.shape.h, input.shape.w);
    let k = weight_shape.h;
    let (oh, ow) = (grad_out.shape.h, grad_out.shape.w);
    let mut grad_w = TensorData::zeros(weight_shape);

    // One task per (c_out, c_in) filter plane.
    for_each_chunk(&mut grad_w.data, k * k, |pair_idx, cell| {
        let ci = pair_idx % weight_shape.c;
        let co = pair_idx / weight_shape.c;
        for ky in 0..k {
            for kx in 0..k {
                let mut acc = T::ZERO;
                let (ox_min, ox_max) = valid_out_range(kx, padding, stride, w, ow);
                for n in 0..input.shape.n {
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let g_row = &grad_out.data
                            [grad_out.shape.at(n, co, oy, 0)..grad_out.shape.at(n, co, oy, 0) + ow];
                        let in_row =
                            &input.data[input.shape.at(n, ci, iy as usize, 0)..input.shape.at(n, ci, iy as usize, 0) + w];
                        for ox in ox_min..ox_max {
                            acc += g_row[ox] * in_row[ox * stride + kx - padding];
                        }
                    }
                }
                cell[ky * k + kx] = acc;
            }
        }
    });
    grad_w
}

pub fn conv2d_backward_bias<T: Scalar>(grad_out: &TensorData<T>) -> TensorData<T> {
    let c_out = grad_out.shape.c;
    let plane = grad_out.shape.h * grad_out.shape.w;
    let mut grad_b = TensorData::zeros(Shape::new(1, c_out, 1, 1));
    for_each_chunk(&mut grad_b.data, 1, |co, cell| {
        let mut acc = T::ZERO;
        for n in 0..grad_out.shape.n {
            let base = grad_out.shape.at(n, co, 0, 0);
            for v in &grad_out.data[base..base + plane] {
                acc += *v;
            }
        }
        cell[0] = acc;
    });
    grad_b
}

pub fn max_pool2_out_shape(input: &Shape) -> Shape {
    Shape::new(input.n, input.c, input.h.div_ceil(2), input.w.div_ceil(2))
}

/// 2x2 max pool, stride 2. Odd extents are padded on the right/bottom by edge
/// replication. Returns the output and per-cell argmax (flat index within the
/// source (n, c) plane); the first window element in row-major scan wins ties.
pub fn max_pool2_forward<T: Scalar>(input: &TensorData<T>) -> (TensorData<T>, Vec<u32>) {
    let (h, w) = (input.shape.h, input.shape.w);
    let out_shape = max_pool2_out_shape(&input.shape);
    let (oh, ow) = (out_shape.h, out_shape.w);
    let mut argmax = vec![0u32; out_shape.len()];

    for_each_chunk(&mut argmax, oh * ow, |plane_idx, args| {
        let in_base = plane_idx * h * w;
        let in_plane = &input.data[in_base..in_base + h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::from_f64(f64::NEG_INFINITY);
                let mut best_idx = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let y = (2 * oy + dy).min(h - 1);
                        let x = (2 * ox + dx).min(w - 1);
                        let v = in_plane[y * w + x];
                        if v > best {
                            best = v;
                            best_idx = y * w + x;
                        }
                    }
                }
                args[oy * ow + ox] = best_idx as u32;
            }
        }
    });

    let mut out = TensorData::zeros(out_shape);
    for_each_chunk(&mut out.data, oh * ow, |plane_idx, plane| {
        let in_base = plane_idx * h * w;
        let args = &argmax[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
        for (v, &a) in plane.iter_mut().zip(args) {
            *v = input.data[in_base + a as usize];
        }
    });
    (out, argmax)
}

pub fn max_pool2_backward<T: Scalar>(
    grad_out: &TensorData<T>,
    argmax: &[u32],
    input_shape: Shape,
) -> TensorData<T> {
    let plane_in = input_shape.h * input_shape.w;
    let plane_out = grad_out.shape.h * grad_out.shape.w;
    let mut grad_in = TensorData::zeros(input_shape);
    for_each_chunk(&mut grad_in.data, plane_in, |plane_idx, plane| {
        let out_base = plane_idx * plane_out;
        for i in 0..plane_out {
            plane[argmax[out_base + i] as usize] += grad_out.data[out_base + i];
        }
    });
    grad_in
}

/// Source position and corner weights for one output coordinate under the
/// align-corners-false convention.
#[derive(Clone, Copy)]
pub struct ResizeTap {
    pub i0: usize,
    pub i1: usize,
    pub w1: f64, // weight of i1; i0 gets 1 - w1
}

pub fn resize_taps(in_len: usize, out_len: usize) -> Vec<ResizeTap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let f = src.floor();
            let w1 = src - f;
            let i = f as isize;
            ResizeTap {
                i0: i.clamp(0, in_len as isize - 1) as usize,
                i1: (i + 1).clamp(0, in_len as isize - 1) as usize,
                w1,
            }
        })
        .collect()
}

pub fn bilinear_resize_forward<T: Scalar>(
    input: &TensorData<T>,
    out_h: usize,
    out_w: usize,
) -> TensorData<T> {
    let (h, w) = (input.shape.h, input.shape.w);
    let ys = resize_taps(h, out_h);
    let xs = resize_taps(w, out_w);
    let mut out = TensorData::zeros(Shape::new(input.shape.n, input.shape.c, out_h, out_w));

    for_each_chunk(&mut out.data, out_w, |row_idx, row| {
        let oy = row_idx % out_h;
        let c = (row_idx / out_h) % input.shape.c;
        let n = row_idx / (out_h * input.shape.c);
        let base = input.shape.at(n, c, 0, 0);
        let plane = &input.data[base..base + h * w];
        let ty = ys[oy];
        let wy1 = T::from_f64(ty.w1);
        let wy0 = T::ONE - wy1;
        let r0 = &plane[ty.i0 * w..ty.i0 * w + w];
        let r1 = &plane[ty.i1 * w..ty.i1 * w + w];
        for (ox, out_v) in row.iter_mut().enumerate() {
            let tx = xs[ox];
            let wx1 = T::from_f64(tx.w1);
            let wx0 = T::ONE - wx1;
            *out_v = wy0 * (wx0 * r0[tx.i0] + wx1 * r0[tx.i1]) + wy1 * (wx0 * r1[tx.i0] + wx1 * r1[tx.i1]);
        }
    });
    out
}

pub fn bilinear_resize_backward<T: Scalar>(
    grad_out: &TensorData<T>,
    input_shape: Shape,
) -> TensorData<T> {
    let (h, w) = (input_shape.h, input_shape.w);
    let (oh, ow) = (grad_out.shape.h, grad_out.shape.w);
    let ys = resize_taps(h, oh);
    let xs = resize_taps(w, ow);
    let mut grad_in = TensorData::zeros(input_shape);

    for_each_chunk(&mut grad_in.data, h * w, |plane_idx, plane| {
        let out_base = plane_idx * oh * ow;
        for oy in 0..oh {
            let ty = ys[oy];
            let wy1 = T::from_f64(ty.w1);
            let wy0 = T::ONE - wy1;
            for ox in 0..ow {
                let tx = xs[ox];
                let wx1 = T::from_f64(tx.w1);
                let wx0 = T::ONE - wx1;
                let g = grad_out.data[out_base + oy * ow + ox];
                plane[ty.i0 * w + tx.i0] += wy0 * wx0 * g;
                plane[ty.i0 * w + tx.i1] += wy0 * wx1 * g;
                plane[ty.i1 * w + tx.i0] += wy1 * wx0 * g;
                plane[ty.i1 * w + tx.i1] += wy1 * wx1 * g;
            }
        }
    });
    grad_in
}

/// Per-pixel softmax across the channel axis, stabilized by max subtraction.
pub fn softmax_channels_forward<T: Scalar>(input: &TensorData<T>) -> TensorData<T> {
    let s = input.shape;
    let plane = s.h * s.w;
    let mut out = TensorData::zeros(s);
    for_each_chunk(&mut out.data, s.c * plane, |n, chunk| {
        let in_chunk = &input.data[n * s.c * plane..(n + 1) * s.c * plane];
        for p in 0..plane {
            let mut m = in_chunk[p];
            for c in 1..s.c {
                m = m.max(in_chunk[c * plane + p]);
            }
            let mut sum = T::ZERO;
            for c in 0..s.c {
                let e = (in_chunk[c * plane + p] - m).exp();
                chunk[c * plane + p] = e;
                sum += e;
            }
            for c in 0..s.c {
                chunk[c * plane + p] = chunk[c * plane + p] / sum;
            }
        }
    });
    out
}

pub fn softmax_channels_backward<T: Scalar>(
    grad_out: &TensorData<T>,
    output: &TensorData<T>,
) -> TensorData<T> {
    let s = output.shape;
    let plane = s.h * s.w;
    let mut grad_in = TensorData::zeros(s);
    for_each_chunk(&mut grad_in.data, s.c * plane, |n, chunk| {
        let y = &output.data[n * s.c * plane..(n + 1) * s.c * plane];
        let g = &grad_out.data[n * s.c * plane..(n + 1) * s.c * plane];
        for p in 0..plane {
            let mut dot = T::ZERO;
            for c in 0..s.c {
                dot += g[c * plane + p] * y[c * plane + p];
            }
            for c in 0..s.c {
                chunk[c * plane + p] = y[c * plane + p] * (g[c * plane + p] - dot);
            }
        }
    });
    grad_in
}
