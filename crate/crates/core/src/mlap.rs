//! Multilevel adaptive pooling: ring-like shape-adaptive sample
//! placement on enlarged proposals, bilinear center-of-bin sampling,
//! the ring-to-level arrangement (outer circles pooled from lower
//! feature levels), and the top-down level smoothing stack.

use crate::error::{Error, Result};
use crate::geometry::RotatedBox;
use crate::layers::{ConvLayer, Init};
use crate::ops;
use crate::real::Real;
use crate::tensor::{Param, Tensor4};
use rand::Rng;

/// Output grid side; the concentric rings of a 7×7 grid hold 24, 16,
/// and 8 cells plus the center.
pub const OUT_SIZE: usize = 7;
/// Ring rectangle sides as fractions of the proposal's.
pub const RING_FRACTIONS: [f64; 3] = [6.0 / 7.0, 4.0 / 7.0, 2.0 / 7.0];
/// Proposal enlargement applied before pooling for context.
pub const ENLARGE_FACTOR: f64 = 1.2;

/// How rings map onto feature levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    /// Outer ring from the lowest level, inner ring and center from the
    /// highest.
    Standard,
    /// End-for-end swap of the ring-to-level map.
    Reverse,
    /// Every sample pooled from all levels, channels concatenated.
    ChannelConcat,
}

/// Scales the proposal's sides by `factor`, keeping center and θ.
pub fn enlarge_proposal(box_: &RotatedBox, factor: f64) -> Result<RotatedBox> {
    if factor < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "enlargement factor must be ≥ 1, got {factor}"
        )));
    }
    Ok(box_.scaled(factor))
}

/// One pooled sample: proposal-local and image coordinates, its ring,
/// source level, and destination cell in the output grid.
#[derive(Debug, Clone, Copy)]
pub struct RingSample {
    /// Proposal-local coordinates (u along the w axis, v along h).
    pub u: f64,
    pub v: f64,
    /// Image coordinates after rotation and translation.
    pub x: f64,
    pub y: f64,
    /// 0 = outer, 1 = middle, 2 = inner (the center belongs to 2).
    pub ring: usize,
    /// Source feature level (index into the level set, lowest first).
    pub level: usize,
    /// Destination (row, col) in the output grid.
    pub cell: (usize, usize),
}

/// The ordered list of pooled sample coordinates for one proposal.
#[derive(Debug, Clone)]
pub struct RingPattern {
    pub out_size: usize,
    pub samples: Vec<RingSample>,
}

/// Number of cells on concentric ring `r` of a `k×k` grid.
fn ring_cell_count(k: usize, r: usize) -> usize {
    4 * (k - 1 - 2 * r)
}

/// Cells of ring `r` in clockwise order starting at the ring's
/// top-left cell.
fn ring_cells(k: usize, r: usize) -> Vec<(usize, usize)> {
    let hi = k - 1 - r;
    let mut cells = Vec::with_capacity(ring_cell_count(k, r));
    for c in r..=hi {
        cells.push((r, c));
    }
    for row in r + 1..=hi {
        cells.push((row, hi));
    }
    for c in (r..hi).rev() {
        cells.push((hi, c));
    }
    for row in (r + 1..hi).rev() {
        cells.push((row, r));
    }
    cells
}

/// Maps ring `r` (0 outer … 2 inner) onto one of `num_levels` feature
/// levels, lowest level first.
pub fn ring_to_level(ring: usize, num_levels: usize, arrangement: Arrangement) -> usize {
    let l = num_levels.max(1);
    let standard = ((ring as f64) * (l as f64 - 1.0) / 2.0).round() as usize;
    match arrangement {
        Arrangement::Standard | Arrangement::ChannelConcat => standard,
        Arrangement::Reverse => l - 1 - standard,
    }
}

/// Builds the sampling pattern for a proposal: on each ring rectangle
/// (side fractions 6/7, 4/7, 2/7 of the proposal), points sit at the
/// arc-length midpoints of equal-perimeter segments, starting at the
/// rectangle's top-left corner and proceeding clockwise in
/// proposal-local axes, plus one center point. Samples map onto the
/// matching concentric ring of the output grid in the same clockwise
/// order.
pub fn ring_sample_points(box_: &RotatedBox, out_size: usize) -> RingPattern {
    ring_pattern(box_, out_size, 3, Arrangement::Standard)
}

/// [`ring_sample_points`] with an explicit level count and arrangement.
pub fn ring_pattern(
    box_: &RotatedBox,
    out_size: usize,
    num_levels: usize,
    arrangement: Arrangement,
) -> RingPattern {
    assert!(out_size >= 3 && out_size % 2 == 1, "out grid must be odd");
    let k = out_size;
    let n_rings = k / 2;
    let (sin_t, cos_t) = box_.theta.sin_cos();
    let to_image = |u: f64, v: f64| -> (f64, f64) {
        (
            box_.cx + u * cos_t - v * sin_t,
            box_.cy + u * sin_t + v * cos_t,
        )
    };
    let mut samples = Vec::with_capacity(k * k);
    for r in 0..n_rings {
        let frac = (k - 1 - 2 * r) as f64 / k as f64;
        let rw = frac * box_.w;
        let rh = frac * box_.h;
        let n = ring_cell_count(k, r);
        let perimeter = 2.0 * (rw + rh);
        let cells = ring_cells(k, r);
        let level = ring_to_level(r, num_levels, arrangement);
        for (i, &cell) in cells.iter().enumerate().take(n) {
            let s = (i as f64 + 0.5) * perimeter / n as f64;
            let (u, v) = walk_rect_clockwise(rw, rh, s);
            let (x, y) = to_image(u, v);
            samples.push(RingSample {
                u,
                v,
                x,
                y,
                ring: r,
                level,
                cell,
            });
        }
    }
    // center point, assigned with the innermost ring's level
    let center_level = ring_to_level(n_rings - 1, num_levels, arrangement);
    let (x, y) = to_image(0.0, 0.0);
    samples.push(RingSample {
        u: 0.0,
        v: 0.0,
        x,
        y,
        ring: n_rings - 1,
        level: center_level,
        cell: (k / 2, k / 2),
    });
    RingPattern {
        out_size: k,
        samples,
    }
}

/// Point at arc length `s` along the rectangle `[-w/2, w/2]×[-h/2, h/2]`
/// walked clockwise from the top-left corner.
fn walk_rect_clockwise(w: f64, h: f64, s: f64) -> (f64, f64) {
    let (hw, hh) = (w / 2.0, h / 2.0);
    let mut s = s.rem_euclid(2.0 * (w + h));
    if s < w {
        return (-hw + s, -hh);
    }
    s -= w;
    if s < h {
        return (hw, -hh + s);
    }
    s -= h;
    if s < w {
        return (hw - s, hh);
    }
    s -= w;
    (-hw, hh - s)
}

/// Smoothed feature maps unified to one grid and channel count. Levels
/// are ordered lowest (finest original resolution) first.
#[derive(Debug, Clone)]
pub struct LevelSet<T> {
    pub maps: Vec<Tensor4<T>>,
    /// Effective image stride of each map (equal after unification).
    pub strides: Vec<f64>,
}

impl<T: Real> LevelSet<T> {
    pub fn num_levels(&self) -> usize {
        self.maps.len()
    }

    pub fn channels(&self) -> usize {
        self.maps[0].channels()
    }

    pub fn reset_grads(&mut self) {
        for m in &mut self.maps {
            m.reset_grad();
        }
    }
}

/// Pools one proposal: every sample bilinearly interpolated from its
/// designated level at `image_coords / stride − 0.5` (center-of-cell
/// convention, no quantization). Output is `(1, C, k, k)`, or
/// `(1, L·C, k, k)` for the channel-concat arrangement.
pub fn adaptive_pool<T: Real>(
    levels: &LevelSet<T>,
    batch: usize,
    pattern: &RingPattern,
    arrangement: Arrangement,
) -> Result<Tensor4<T>> {
    let k = pattern.out_size;
    let c = levels.channels();
    let l = levels.num_levels();
    for s in &pattern.samples {
        if s.level >= l {
            return Err(Error::ShapeMismatch(format!(
                "pattern references level {} but only {} levels exist",
                s.level, l
            )));
        }
    }
    let out_c = if arrangement == Arrangement::ChannelConcat {
        l * c
    } else {
        c
    };
    let mut out = Tensor4::zeros([1, out_c, k, k]);
    for s in &pattern.samples {
        let (row, col) = s.cell;
        let source_levels: &[usize] = match arrangement {
            Arrangement::ChannelConcat => &[],
            _ => std::slice::from_ref(&s.level),
        };
        if arrangement == Arrangement::ChannelConcat {
            for li in 0..l {
                let vals = sample_level(levels, li, batch, s.x, s.y);
                for (ci, v) in vals.into_iter().enumerate() {
                    *out.at_mut(0, li * c + ci, row, col) = v;
                }
            }
        } else {
            let li = source_levels[0];
            let vals = sample_level(levels, li, batch, s.x, s.y);
            for (ci, v) in vals.into_iter().enumerate() {
                *out.at_mut(0, ci, row, col) = v;
            }
        }
    }
    Ok(out)
}

fn sample_level<T: Real>(
    levels: &LevelSet<T>,
    li: usize,
    batch: usize,
    x: f64,
    y: f64,
) -> Vec<T> {
    let stride = levels.strides[li];
    ops::bilinear_sample(&levels.maps[li], batch, x / stride - 0.5, y / stride - 0.5)
}

/// Scatters the pooled gradient back into the level maps' gradient
/// buffers (bilinear weights, argmax-free: pooling is pure sampling).
pub fn adaptive_pool_backward<T: Real>(
    levels: &mut LevelSet<T>,
    batch: usize,
    pattern: &RingPattern,
    arrangement: Arrangement,
    grad_out: &Tensor4<T>,
) {
    let c = levels.channels();
    let l = levels.num_levels();
    for s in &pattern.samples {
        let (row, col) = s.cell;
        if arrangement == Arrangement::ChannelConcat {
            for li in 0..l {
                let g: Vec<T> = (0..c)
                    .map(|ci| grad_out.at(0, li * c + ci, row, col))
                    .collect();
                scatter_level(levels, li, batch, s.x, s.y, &g);
            }
        } else {
            let g: Vec<T> = (0..c).map(|ci| grad_out.at(0, ci, row, col)).collect();
            scatter_level(levels, s.level, batch, s.x, s.y, &g);
        }
    }
}

fn scatter_level<T: Real>(
    levels: &mut LevelSet<T>,
    li: usize,
    batch: usize,
    x: f64,
    y: f64,
    grad: &[T],
) {
    let stride = levels.strides[li];
    ops::bilinear_sample_backward(
        &mut levels.maps[li],
        batch,
        x / stride - 0.5,
        y / stride - 0.5,
        grad,
    );
}

/// Top-down smoothing stack: per-level 1×1 channel-matching laterals,
/// 2× upsampling of the higher level merged by addition, a 3×3
/// smoothing convolution, then unification of every level to the
/// smallest grid (space-to-depth) and a common channel count (1×1).
#[derive(Debug, Clone)]
pub struct LevelSmoother<T> {
    laterals: Vec<ConvLayer<T>>,
    smooths: Vec<ConvLayer<T>>,
    unifiers: Vec<ConvLayer<T>>,
    blocks: Vec<usize>,
    strides: Vec<f64>,
}

/// Intermediates for [`LevelSmoother::backward`].
pub struct SmootherCache<T> {
    raw: Vec<Tensor4<T>>,
    merged: Vec<Tensor4<T>>,
    folded: Vec<Tensor4<T>>,
}

impl<T: Real> LevelSmoother<T> {
    /// `raw_channels` and `strides` describe the backbone levels,
    /// lowest (largest map) first. All levels are unified to the last
    /// level's grid and `out_channels` channels.
    pub fn new(
        raw_channels: &[usize],
        strides: &[f64],
        lateral_channels: usize,
        out_channels: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if raw_channels.is_empty() || raw_channels.len() != strides.len() {
            return Err(Error::Config(format!(
                "smoother needs matching channel/stride lists, got {} vs {}",
                raw_channels.len(),
                strides.len()
            )));
        }
        let top_stride = *strides.last().unwrap();
        let mut laterals = Vec::new();
        let mut smooths = Vec::new();
        let mut unifiers = Vec::new();
        let mut blocks = Vec::new();
        for (i, &c) in raw_channels.iter().enumerate() {
            let block = (top_stride / strides[i]).round() as usize;
            if block == 0 || (strides[i] * block as f64 - top_stride).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "level stride {} does not divide the top stride {}",
                    strides[i], top_stride
                )));
            }
            laterals.push(ConvLayer::new(c, lateral_channels, 1, 1, 0, init, rng));
            smooths.push(ConvLayer::new(
                lateral_channels,
                lateral_channels,
                3,
                1,
                1,
                init,
                rng,
            ));
            unifiers.push(ConvLayer::new(
                lateral_channels * block * block,
                out_channels,
                1,
                1,
                0,
                init,
                rng,
            ));
            blocks.push(block);
        }
        Ok(LevelSmoother {
            laterals,
            smooths,
            unifiers,
            blocks,
            strides: strides.to_vec(),
        })
    }

    pub fn num_levels(&self) -> usize {
        self.laterals.len()
    }

    pub fn forward(&self, raw: &[Tensor4<T>]) -> Result<(LevelSet<T>, SmootherCache<T>)> {
        let n = self.num_levels();
        if raw.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "smoother built for {} levels, got {}",
                n,
                raw.len()
            )));
        }
        // top-down merge: lateral + 2x upsample of the higher level
        let mut merged: Vec<Option<Tensor4<T>>> = vec![None; n];
        for i in (0..n).rev() {
            let mut m = self.laterals[i].forward(&raw[i])?;
            if i + 1 < n {
                let up = ops::upsample2x(merged[i + 1].as_ref().unwrap());
                if up.shape() != m.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "upsampled level {:?} does not match lateral {:?}",
                        up.shape(),
                        m.shape()
                    )));
                }
                for (d, s) in m.data_mut().iter_mut().zip(up.data()) {
                    *d += *s;
                }
            }
            merged[i] = Some(m);
        }
        let merged: Vec<Tensor4<T>> = merged.into_iter().map(Option::unwrap).collect();
        let mut folded = Vec::with_capacity(n);
        let mut maps = Vec::with_capacity(n);
        let top_stride = *self.strides.last().unwrap();
        for i in 0..n {
            let smooth = self.smooths[i].forward(&merged[i])?;
            let fold = ops::space_to_depth(&smooth, self.blocks[i])?;
            let unified = self.unifiers[i].forward(&fold)?;
            folded.push(fold);
            maps.push(unified);
        }
        Ok((
            LevelSet {
                maps,
                strides: vec![top_stride; n],
            },
            SmootherCache {
                raw: raw.to_vec(),
                merged,
                folded,
            },
        ))
    }

    /// Backward from gradients on the unified level maps (read from the
    /// maps' own gradient buffers); returns gradients w.r.t. the raw
    /// backbone levels.
    pub fn backward(
        &mut self,
        cache: &SmootherCache<T>,
        levels: &LevelSet<T>,
    ) -> Result<Vec<Tensor4<T>>> {
        let n = self.num_levels();
        let mut g_merged: Vec<Tensor4<T>> = Vec::with_capacity(n);
        for i in 0..n {
            let g_unified = Tensor4::from_vec(
                levels.maps[i].shape(),
                levels.maps[i]
                    .grad()
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); levels.maps[i].len()]),
            )?;
            let g_fold = self.unifiers[i].backward(&cache.folded[i], &g_unified)?;
            let g_smooth = ops::depth_to_space(&g_fold, self.blocks[i])?;
            let g_m = self.smooths[i].backward(&cache.merged[i], &g_smooth)?;
            g_merged.push(g_m);
        }
        // distribute merge gradients down the top-down chain
        let mut g_raw = Vec::with_capacity(n);
        for i in 0..n {
            if i + 1 < n {
                let up_shape = cache.merged[i + 1].shape();
                let g_up = ops::upsample2x_backward(up_shape, &g_merged[i]);
                for (d, s) in g_merged[i + 1].data_mut().iter_mut().zip(g_up.data()) {
                    *d += *s;
                }
            }
            g_raw.push(self.laterals[i].backward(&cache.raw[i], &g_merged[i])?);
        }
        Ok(g_raw)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps = Vec::new();
        for l in &mut self.laterals {
            ps.extend(l.params_mut());
        }
        for s in &mut self.smooths {
            ps.extend(s.params_mut());
        }
        for u in &mut self.unifiers {
            ps.extend(u.params_mut());
        }
        ps
    }
}
