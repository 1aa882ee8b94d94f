//! Differentiable operators over [`Tensor4`]: convolution, bilinear
//! sampling, 2x upsampling, space-to-depth, fully-connected, relu.
//!
//! Each operator is a pure function pair: a forward producing new
//! buffers and a backward producing analytic gradients w.r.t. its
//! inputs. Gradient contracts are verified against central finite
//! differences in the test suites.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor4;

/// Zero-padded cross-correlation. `weights` is `(out_ch, in_ch, k, k)`
/// with odd `k`; output spatial size is `floor((H + 2·pad − k)/stride) + 1`.
pub fn conv2d<T: Real>(
    input: &Tensor4<T>,
    weights: &Tensor4<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor4<T>> {
    let [n, in_ch, h, w] = input.shape();
    let [out_ch, w_in_ch, kh, kw] = weights.shape();
    if w_in_ch != in_ch || kh != kw || kh == 0 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: weights {:?} incompatible with input {:?} (need square kernel, matching in_ch)",
            weights.shape(),
            input.shape()
        )));
    }
    if let Some(b) = bias {
        if b.len() != out_ch {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: bias length {} != out_ch {}",
                b.len(),
                out_ch
            )));
        }
    }
    if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: kernel {}x{} with pad {} does not fit input {}x{}",
            kh, kw, pad, h, w
        )));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor4::zeros([n, out_ch, oh, ow]);

    for b in 0..n {
        for oc in 0..out_ch {
            if let Some(bias) = bias {
                out.plane_mut(b, oc).iter_mut().for_each(|v| *v = bias[oc]);
            }
            for ic in 0..in_ch {
                let x_plane = input.plane(b, ic);
                let w_base = ((oc * in_ch + ic) * kh) * kw;
                let w_data = &weights.data()[w_base..w_base + kh * kw];
                let o_plane = out.plane_mut(b, oc);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w_data[ky * kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        accumulate_shifted(
                            o_plane, x_plane, wv, oh, ow, h, w, stride, pad, ky, kx,
                        );
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `out[oy][ox] += wv * x[oy*stride + ky - pad][ox*stride + kx - pad]`
/// over the in-bounds range.
#[inline]
fn accumulate_shifted<T: Real>(
    out: &mut [T],
    x: &[T],
    wv: T,
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    stride: usize,
    pad: usize,
    ky: usize,
    kx: usize,
) {
    for oy in 0..oh {
        let iy = (oy * stride + ky) as isize - pad as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let (ox_lo, ox_hi) = valid_ox_range(ow, w, stride, pad, kx);
        if ox_lo >= ox_hi {
            continue;
        }
        let x_row = &x[iy as usize * w..(iy as usize + 1) * w];
        let o_row = &mut out[oy * ow..oy * ow + ow];
        if stride == 1 {
            let shift = (ox_lo + kx) as isize - pad as isize;
            let xs = &x_row[shift as usize..shift as usize + (ox_hi - ox_lo)];
            let os = &mut o_row[ox_lo..ox_hi];
            for (o, &xv) in os.iter_mut().zip(xs) {
                *o += wv * xv;
            }
        } else {
            for ox in ox_lo..ox_hi {
                let ix = (ox * stride + kx) - pad;
                o_row[ox] += wv * x_row[ix];
            }
        }
    }
}

#[inline]
fn valid_ox_range(ow: usize, w: usize, stride: usize, pad: usize, kx: usize) -> (usize, usize) {
    // ox*stride + kx - pad in [0, w)
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx + stride - 1) / stride
    };
    let hi_num = w + pad;
    let hi = if hi_num > kx {
        ((hi_num - kx - 1) / stride + 1).min(ow)
    } else {
        0
    };
    (lo.min(ow), hi)
}

/// Gradients of [`conv2d`] w.r.t. input, weights, and bias.
pub fn conv2d_backward<T: Real>(
    input: &Tensor4<T>,
    weights: &Tensor4<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>, Vec<T>)> {
    let [n, in_ch, h, w] = input.shape();
    let [out_ch, _, kh, kw] = weights.shape();
    let [gn, goc, oh, ow] = grad_out.shape();
    if gn != n || goc != out_ch {
        return Err(Error::ShapeMismatch(format!(
            "conv2d_backward: grad_out {:?} does not match input {:?} / weights {:?}",
            grad_out.shape(),
            input.shape(),
            weights.shape()
        )));
    }
    let mut gx = Tensor4::zeros(input.shape());
    let mut gw = Tensor4::zeros(weights.shape());
    let mut gb = vec![T::zero(); out_ch];

    for b in 0..n {
        for oc in 0..out_ch {
            let g_plane = grad_out.plane(b, oc).to_vec();
            gb[oc] += g_plane.iter().copied().sum();
            for ic in 0..in_ch {
                let x_plane = input.plane(b, ic);
                let w_base = ((oc * in_ch + ic) * kh) * kw;
                let gx_plane = gx.plane_mut(b, ic);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = weights.data()[w_base + ky * kw + kx];
                        let mut wsum = T::zero();
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let (ox_lo, ox_hi) = valid_ox_range(ow, w, stride, pad, kx);
                            let row = iy as usize * w;
                            let g_row = &g_plane[oy * ow..oy * ow + ow];
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * stride + kx) - pad;
                                let g = g_row[ox];
                                wsum += g * x_plane[row + ix];
                                gx_plane[row + ix] += g * wv;
                            }
                        }
                        gw.data_mut()[w_base + ky * kw + kx] += wsum;
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

/// Four-neighbor bilinear interpolation of every channel of batch item
/// `b` at continuous `(x, y)`. Reads outside the map are zero.
pub fn bilinear_sample<T: Real>(map: &Tensor4<T>, b: usize, x: f64, y: f64) -> Vec<T> {
    let [_, c, h, w] = map.shape();
    let (x0, y0, fx, fy) = corner_of(x, y);
    let mut out = vec![T::zero(); c];
    let w00 = T::from_f64((1.0 - fx) * (1.0 - fy));
    let w01 = T::from_f64(fx * (1.0 - fy));
    let w10 = T::from_f64((1.0 - fx) * fy);
    let w11 = T::from_f64(fx * fy);
    for (ci, o) in out.iter_mut().enumerate() {
        let plane = map.plane(b, ci);
        let v = |yy: i64, xx: i64| -> T {
            if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                T::zero()
            } else {
                plane[yy as usize * w + xx as usize]
            }
        };
        *o = w00 * v(y0, x0) + w01 * v(y0, x0 + 1) + w10 * v(y0 + 1, x0) + w11 * v(y0 + 1, x0 + 1);
    }
    out
}

/// Backward of [`bilinear_sample`]: scatters `grad_out` into `map`'s
/// gradient buffer with the bilinear weights and returns the gradient
/// of the summed weighted output w.r.t. the sample coordinates
/// `(d/dx, d/dy)`.
pub fn bilinear_sample_backward<T: Real>(
    map: &mut Tensor4<T>,
    b: usize,
    x: f64,
    y: f64,
    grad_out: &[T],
) -> (T, T) {
    let [_, c, h, w] = map.shape();
    assert_eq!(grad_out.len(), c, "bilinear grad channel mismatch");
    let (x0, y0, fx, fy) = corner_of(x, y);
    let mut gx = T::zero();
    let mut gy = T::zero();
    let fxt = T::from_f64(fx);
    let fyt = T::from_f64(fy);
    let one = T::one();
    for ci in 0..c {
        let g = grad_out[ci];
        // Value as function of corners: scatter.
        let values = {
            let plane = map.plane(b, ci);
            let v = |yy: i64, xx: i64| -> T {
                if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                    T::zero()
                } else {
                    plane[yy as usize * w + xx as usize]
                }
            };
            [v(y0, x0), v(y0, x0 + 1), v(y0 + 1, x0), v(y0 + 1, x0 + 1)]
        };
        {
            let gplane = map.grad_plane_mut(b, ci);
            let mut scatter = |yy: i64, xx: i64, wgt: T| {
                if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 {
                    gplane[yy as usize * w + xx as usize] += g * wgt;
                }
            };
            scatter(y0, x0, (one - fxt) * (one - fyt));
            scatter(y0, x0 + 1, fxt * (one - fyt));
            scatter(y0 + 1, x0, (one - fxt) * fyt);
            scatter(y0 + 1, x0 + 1, fxt * fyt);
        }
        let [v00, v01, v10, v11] = values;
        gx += g * ((one - fyt) * (v01 - v00) + fyt * (v11 - v10));
        gy += g * ((one - fxt) * (v10 - v00) + fxt * (v11 - v01));
    }
    (gx, gy)
}

#[inline]
fn corner_of(x: f64, y: f64) -> (i64, i64, f64, f64) {
    let x0 = x.floor();
    let y0 = y.floor();
    (x0 as i64, y0 as i64, x - x0, y - y0)
}

/// Bilinear 2x upsampling aligned so `out(2i, 2j) = in(i, j)`; odd
/// indices interpolate neighbors, clamping at the far edge.
pub fn upsample2x<T: Real>(input: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = input.shape();
    let (oh, ow) = (h * 2, w * 2);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let half = T::from_f64(0.5);
    for b in 0..n {
        for ci in 0..c {
            let src = input.plane(b, ci);
            let dst = out.plane_mut(b, ci);
            for oy in 0..oh {
                let y0 = oy / 2;
                let y1 = (y0 + 1).min(h - 1);
                let row0 = &src[y0 * w..y0 * w + w];
                let row1 = &src[y1 * w..y1 * w + w];
                let d_row = &mut dst[oy * ow..oy * ow + ow];
                let odd_y = oy % 2 == 1;
                for ox in 0..ow {
                    let x0 = ox / 2;
                    let x1 = (x0 + 1).min(w - 1);
                    let v = match (odd_y, ox % 2 == 1) {
                        (false, false) => row0[x0],
                        (false, true) => half * (row0[x0] + row0[x1]),
                        (true, false) => half * (row0[x0] + row1[x0]),
                        (true, true) => {
                            half * half * (row0[x0] + row0[x1] + row1[x0] + row1[x1])
                        }
                    };
                    d_row[ox] = v;
                }
            }
        }
    }
    out
}

/// Backward of [`upsample2x`] (transpose scatter).
pub fn upsample2x_backward<T: Real>(input_shape: [usize; 4], grad_out: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = input_shape;
    let [_, _, oh, ow] = grad_out.shape();
    let mut gx = Tensor4::zeros(input_shape);
    let half = T::from_f64(0.5);
    let quarter = T::from_f64(0.25);
    for b in 0..n {
        for ci in 0..c {
            let g = grad_out.plane(b, ci);
            let dst = gx.plane_mut(b, ci);
            for oy in 0..oh {
                let y0 = oy / 2;
                let y1 = (y0 + 1).min(h - 1);
                let odd_y = oy % 2 == 1;
                for ox in 0..ow {
                    let x0 = ox / 2;
                    let x1 = (x0 + 1).min(w - 1);
                    let gv = g[oy * ow + ox];
                    match (odd_y, ox % 2 == 1) {
                        (false, false) => dst[y0 * w + x0] += gv,
                        (false, true) => {
                            dst[y0 * w + x0] += half * gv;
                            dst[y0 * w + x1] += half * gv;
                        }
                        (true, false) => {
                            dst[y0 * w + x0] += half * gv;
                            dst[y1 * w + x0] += half * gv;
                        }
                        (true, true) => {
                            dst[y0 * w + x0] += quarter * gv;
                            dst[y0 * w + x1] += quarter * gv;
                            dst[y1 * w + x0] += quarter * gv;
                            dst[y1 * w + x1] += quarter * gv;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Rearranges `block × block` spatial tiles into channels:
/// `(n, c, h, w) → (n, c·block², h/block, w/block)`.
pub fn space_to_depth<T: Real>(input: &Tensor4<T>, block: usize) -> Result<Tensor4<T>> {
    let [n, c, h, w] = input.shape();
    if block == 0 || h % block != 0 || w % block != 0 {
        return Err(Error::ShapeMismatch(format!(
            "space_to_depth: spatial size {}x{} not divisible by block {}",
            h, w, block
        )));
    }
    let (oh, ow) = (h / block, w / block);
    let mut out = Tensor4::zeros([n, c * block * block, oh, ow]);
    for b in 0..n {
        for ci in 0..c {
            let src = input.plane(b, ci);
            for by in 0..block {
                for bx in 0..block {
                    let oc = ci * block * block + by * block + bx;
                    let dst = out.plane_mut(b, oc);
                    for oy in 0..oh {
                        let iy = oy * block + by;
                        for ox in 0..ow {
                            dst[oy * ow + ox] = src[iy * w + ox * block + bx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse rearrangement of [`space_to_depth`]; also its exact backward
/// (the op is a permutation).
pub fn depth_to_space<T: Real>(input: &Tensor4<T>, block: usize) -> Result<Tensor4<T>> {
    let [n, c, h, w] = input.shape();
    if block == 0 || c % (block * block) != 0 {
        return Err(Error::ShapeMismatch(format!(
            "depth_to_space: channels {} not divisible by block² {}",
            c,
            block * block
        )));
    }
    let oc = c / (block * block);
    let (oh, ow) = (h * block, w * block);
    let mut out = Tensor4::zeros([n, oc, oh, ow]);
    for b in 0..n {
        for co in 0..oc {
            let dst = out.plane_mut(b, co);
            for by in 0..block {
                for bx in 0..block {
                    let ci = co * block * block + by * block + bx;
                    let src = input.plane(b, ci);
                    for y in 0..h {
                        for x in 0..w {
                            dst[(y * block + by) * ow + x * block + bx] = src[y * w + x];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Affine map `y = W·x + b` with `weights` stored as `(out, in, 1, 1)`.
pub fn fully_connected<T: Real>(
    input: &[T],
    weights: &Tensor4<T>,
    bias: &[T],
) -> Result<Vec<T>> {
    let [out_dim, in_dim, _, _] = weights.shape();
    if input.len() != in_dim || bias.len() != out_dim {
        return Err(Error::ShapeMismatch(format!(
            "fully_connected: input {} / bias {} vs weights {:?}",
            input.len(),
            bias.len(),
            weights.shape()
        )));
    }
    let wd = weights.data();
    let mut out = Vec::with_capacity(out_dim);
    for o in 0..out_dim {
        let row = &wd[o * in_dim..(o + 1) * in_dim];
        let mut acc = bias[o];
        for (wv, xv) in row.iter().zip(input) {
            acc += *wv * *xv;
        }
        out.push(acc);
    }
    Ok(out)
}

/// Gradients of [`fully_connected`]: `(d_input, d_weights, d_bias)`.
pub fn fully_connected_backward<T: Real>(
    input: &[T],
    weights: &Tensor4<T>,
    grad_out: &[T],
) -> (Vec<T>, Tensor4<T>, Vec<T>) {
    let [out_dim, in_dim, _, _] = weights.shape();
    let wd = weights.data();
    let mut gx = vec![T::zero(); in_dim];
    let mut gw = Tensor4::zeros(weights.shape());
    let gwd = gw.data_mut();
    for o in 0..out_dim {
        let g = grad_out[o];
        if g == T::zero() {
            continue;
        }
        let row = &wd[o * in_dim..(o + 1) * in_dim];
        let grow = &mut gwd[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            gx[i] += g * row[i];
            grow[i] += g * input[i];
        }
    }
    (gx, gw, grad_out.to_vec())
}

/// Elementwise logistic function.
pub fn sigmoid<T: Real>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Backward of [`sigmoid`], expressed through its output `s·(1−s)`.
pub fn sigmoid_backward<T: Real>(output: &Tensor4<T>, grad_out: &Tensor4<T>) -> Tensor4<T> {
    let mut gx = Tensor4::zeros(output.shape());
    let s = output.data();
    let g = grad_out.data();
    let gxd = gx.data_mut();
    for i in 0..s.len() {
        gxd[i] = g[i] * s[i] * (T::one() - s[i]);
    }
    gx
}

/// Concatenates tensors along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor4<T>]) -> Result<Tensor4<T>> {
    let [n, _, h, w] = parts[0].shape();
    let mut total_c = 0;
    for p in parts {
        let [pn, pc, ph, pw] = p.shape();
        if pn != n || ph != h || pw != w {
            return Err(Error::ShapeMismatch(format!(
                "concat_channels: {:?} does not match {:?}",
                p.shape(),
                parts[0].shape()
            )));
        }
        total_c += pc;
    }
    let mut out = Tensor4::zeros([n, total_c, h, w]);
    for b in 0..n {
        let mut co = 0;
        for p in parts {
            for c in 0..p.channels() {
                out.plane_mut(b, co).copy_from_slice(p.plane(b, c));
                co += 1;
            }
        }
    }
    Ok(out)
}

/// Splits a channel-concatenated gradient back into per-part tensors.
pub fn split_channels<T: Real>(grad: &Tensor4<T>, channel_counts: &[usize]) -> Vec<Tensor4<T>> {
    let [n, _, h, w] = grad.shape();
    let mut outs: Vec<Tensor4<T>> = channel_counts
        .iter()
        .map(|&c| Tensor4::zeros([n, c, h, w]))
        .collect();
    for b in 0..n {
        let mut co = 0;
        for (pi, &c) in channel_counts.iter().enumerate() {
            for ci in 0..c {
                outs[pi]
                    .plane_mut(b, ci)
                    .copy_from_slice(grad.plane(b, co));
                co += 1;
            }
        }
    }
    outs
}

/// Elementwise `max(0, x)`.
pub fn relu<T: Real>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward of [`relu`] with subgradient 0 at 0.
pub fn relu_backward<T: Real>(input: &Tensor4<T>, grad_out: &Tensor4<T>) -> Tensor4<T> {
    let mut gx = Tensor4::zeros(input.shape());
    let xd = input.data();
    let gd = grad_out.data();
    let gxd = gx.data_mut();
    for i in 0..xd.len() {
        if xd[i] > T::zero() {
            gxd[i] = gd[i];
        }
    }
    gx
}
