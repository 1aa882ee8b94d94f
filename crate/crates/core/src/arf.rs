//! Active rotating filters: each base filter is materialized in N
//! rotated clones that share the base's weights, producing an N-channel
//! oriented response per filter. Orientation max-pooling over those
//! channels yields rotation-invariant maps.

use crate::error::{Error, Result};
use crate::ops;
use crate::real::Real;
use crate::tensor::Tensor4;

/// Border cells of a 3×3 grid in clockwise order (row-major indices).
const BORDER_CYCLE_3X3: [usize; 8] = [0, 1, 2, 5, 8, 7, 6, 3];

/// Linear map realizing a clockwise rotation of a `k×k` filter grid by
/// `2π·step/N`: for each destination cell, the source cells and weights
/// whose combination produces it.
///
/// For 3×3 filters with N=8 the map is the exact circular shift of the
/// 8 border cells (center fixed); otherwise it bilinearly resamples the
/// rotated grid, reading outside the grid as zero.
pub fn rotation_map(k: usize, step: usize, n: usize) -> Vec<Vec<(usize, f64)>> {
    let step = step % n;
    if step == 0 {
        return (0..k * k).map(|i| vec![(i, 1.0)]).collect();
    }
    if k == 1 {
        return vec![vec![(0, 1.0)]];
    }
    if k == 3 && n == 8 {
        let mut map = vec![Vec::new(); 9];
        map[4].push((4, 1.0));
        for (i, &src) in BORDER_CYCLE_3X3.iter().enumerate() {
            let dst = BORDER_CYCLE_3X3[(i + step) % 8];
            map[dst].push((src, 1.0));
        }
        return map;
    }
    // Generic path: destination cell at grid offset p reads the base at
    // the clockwise-unrotated position R⁻¹·p, bilinearly.
    let alpha = 2.0 * std::f64::consts::PI * step as f64 / n as f64;
    let (sa, ca) = alpha.sin_cos();
    let c = (k as f64 - 1.0) / 2.0;
    let mut map = vec![Vec::new(); k * k];
    for r in 0..k {
        for col in 0..k {
            let x = col as f64 - c;
            let y = r as f64 - c;
            // inverse of the visual-clockwise rotation (y axis down)
            let sx = ca * x + sa * y + c;
            let sy = -sa * x + ca * y + c;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let (fx, fy) = (sx - x0, sy - y0);
            for (dy, dx, wgt) in [
                (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
                (0.0, 1.0, fx * (1.0 - fy)),
                (1.0, 0.0, (1.0 - fx) * fy),
                (1.0, 1.0, fx * fy),
            ] {
                let yy = y0 + dy;
                let xx = x0 + dx;
                if wgt > 1e-12 && yy >= 0.0 && xx >= 0.0 && (yy as usize) < k && (xx as usize) < k
                {
                    map[r * k + col].push((yy as usize * k + xx as usize, wgt));
                }
            }
        }
    }
    map
}

/// Rotates every `k×k` plane of `filter` clockwise by `2π·step/N`.
pub fn rotate_filter<T: Real>(filter: &Tensor4<T>, step: usize, n: usize) -> Tensor4<T> {
    let [m, c, kh, kw] = filter.shape();
    assert_eq!(kh, kw, "rotate_filter needs square filters");
    let map = rotation_map(kh, step, n);
    let mut out = Tensor4::zeros(filter.shape());
    for b in 0..m {
        for ch in 0..c {
            let src = filter.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for (d, sources) in map.iter().enumerate() {
                let mut acc = T::zero();
                for &(s, w) in sources {
                    acc += T::from_f64(w) * src[s];
                }
                dst[d] = acc;
            }
        }
    }
    out
}

/// A bank of M base filters, each carried in N rotated clones that
/// share the base weights. Trainable parameter count is the base
/// filter count `M·in_ch·k²`, independent of N.
#[derive(Debug, Clone)]
pub struct ArfBank<T> {
    /// Base filters, `(M, in_ch, k, k)`.
    pub base: Tensor4<T>,
    pub n_orient: usize,
}

impl<T: Real> ArfBank<T> {
    pub fn new(base: Tensor4<T>, n_orient: usize) -> Result<Self> {
        let [_, _, kh, kw] = base.shape();
        if kh != kw || n_orient == 0 {
            return Err(Error::InvalidArgument(format!(
                "ARF bank needs square filters and N ≥ 1, got {:?} with N={}",
                base.shape(),
                n_orient
            )));
        }
        Ok(ArfBank { base, n_orient })
    }

    pub fn num_filters(&self) -> usize {
        self.base.shape()[0]
    }

    /// Trainable parameter count (the weight-sharing economy claim).
    pub fn param_count(&self) -> usize {
        self.base.len()
    }

    /// All `M·N` rotated clones, filter-major, orientation-minor:
    /// clone `(m, j)` sits at output filter index `m·N + j`.
    pub fn materialize(&self) -> Tensor4<T> {
        let [m, c, k, _] = self.base.shape();
        let n = self.n_orient;
        let mut out = Tensor4::zeros([m * n, c, k, k]);
        for j in 0..n {
            let map = rotation_map(k, j, n);
            for fi in 0..m {
                for ch in 0..c {
                    let src = self.base.plane(fi, ch);
                    let dst = out.plane_mut(fi * n + j, ch);
                    for (d, sources) in map.iter().enumerate() {
                        let mut acc = T::zero();
                        for &(s, w) in sources {
                            acc += T::from_f64(w) * src[s];
                        }
                        dst[d] = acc;
                    }
                }
            }
        }
        out
    }

    /// Accumulates a gradient on the materialized clones back onto the
    /// shared base filters (transpose of [`Self::materialize`]).
    pub fn fold_grad(&self, grad_materialized: &Tensor4<T>) -> Result<Tensor4<T>> {
        let [m, c, k, _] = self.base.shape();
        let n = self.n_orient;
        if grad_materialized.shape() != [m * n, c, k, k] {
            return Err(Error::ShapeMismatch(format!(
                "fold_grad: clone gradient {:?} does not match bank {:?} with N={}",
                grad_materialized.shape(),
                self.base.shape(),
                n
            )));
        }
        let mut out = Tensor4::zeros(self.base.shape());
        for j in 0..n {
            let map = rotation_map(k, j, n);
            for fi in 0..m {
                for ch in 0..c {
                    let g = grad_materialized.plane(fi * n + j, ch);
                    let dst = out.plane_mut(fi, ch);
                    for (d, sources) in map.iter().enumerate() {
                        for &(s, w) in sources {
                            dst[s] += T::from_f64(w) * g[d];
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Oriented convolutional response: every rotated clone of every filter
/// correlated with the input (stride 1, same-size padding). Output has
/// `M·N` channels, filter-major, orientation-minor.
pub fn multi_oriented_response<T: Real>(
    input: &Tensor4<T>,
    bank: &ArfBank<T>,
) -> Result<Tensor4<T>> {
    let weights = bank.materialize();
    let k = weights.shape()[2];
    ops::conv2d(input, &weights, None, 1, k / 2)
}

/// Gradients of [`multi_oriented_response`] w.r.t. the input and the
/// shared base filters (clone gradients folded onto the base).
pub fn multi_oriented_response_backward<T: Real>(
    input: &Tensor4<T>,
    bank: &ArfBank<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let weights = bank.materialize();
    let k = weights.shape()[2];
    let (gx, gw, _gb) = ops::conv2d_backward(input, &weights, 1, k / 2, grad_out)?;
    let gbase = bank.fold_grad(&gw)?;
    Ok((gx, gbase))
}

/// Per-location max over each filter's N orientation channels,
/// reducing `M·N` channels to `M`. Also returns the argmax channel
/// offsets used to route gradients (ties pick the lowest orientation).
pub fn orientation_pool<T: Real>(
    response: &Tensor4<T>,
    n: usize,
) -> Result<(Tensor4<T>, Vec<u8>)> {
    let [b, c, h, w] = response.shape();
    if n == 0 || c % n != 0 {
        return Err(Error::ShapeMismatch(format!(
            "orientation_pool: channel count {} not divisible by N={}",
            c, n
        )));
    }
    let m = c / n;
    let mut out = Tensor4::zeros([b, m, h, w]);
    let mut argmax = vec![0u8; b * m * h * w];
    for bi in 0..b {
        for mi in 0..m {
            out.plane_mut(bi, mi)
                .copy_from_slice(response.plane(bi, mi * n));
            for j in 1..n {
                let cand = response.plane(bi, mi * n + j).to_vec();
                let best = out.plane_mut(bi, mi);
                let amax = &mut argmax[(bi * m + mi) * h * w..(bi * m + mi + 1) * h * w];
                for i in 0..best.len() {
                    if cand[i] > best[i] {
                        best[i] = cand[i];
                        amax[i] = j as u8;
                    }
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Routes pooled gradients back to the argmax orientation channel.
pub fn orientation_pool_backward<T: Real>(
    response_shape: [usize; 4],
    n: usize,
    argmax: &[u8],
    grad_out: &Tensor4<T>,
) -> Tensor4<T> {
    let [b, c, h, w] = response_shape;
    let m = c / n;
    let mut gx = Tensor4::zeros(response_shape);
    for bi in 0..b {
        for mi in 0..m {
            let g = grad_out.plane(bi, mi).to_vec();
            let amax = &argmax[(bi * m + mi) * h * w..(bi * m + mi + 1) * h * w];
            for i in 0..g.len() {
                let j = amax[i] as usize;
                gx.plane_mut(bi, mi * n + j)[i] += g[i];
            }
        }
    }
    gx
}

/// Visual-clockwise 90° rotation of each plane (square maps only);
/// used by the rotation-covariance tests.
pub fn rot90_cw<T: Real>(t: &Tensor4<T>) -> Tensor4<T> {
    let [b, c, h, w] = t.shape();
    assert_eq!(h, w, "rot90 requires square maps");
    let mut out = Tensor4::zeros([b, c, w, h]);
    for bi in 0..b {
        for ci in 0..c {
            let src = t.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for r in 0..w {
                for col in 0..h {
                    dst[r * h + col] = src[(h - 1 - col) * w + r];
                }
            }
        }
    }
    out
}
