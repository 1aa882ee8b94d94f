//! Dual-branch rotated region proposal network: orientation-agnostic
//! anchors matched by orientation-agnostic IoU, six fixed orientation
//! bins matched by angular deviation, the tangent offset encoding, the
//! two-trunk head stack, proposal emission, and minibatch sampling.

use crate::error::{Error, Result};
use crate::geometry::{self, RotatedBox};
use crate::layers::{ConvLayer, Init};
use crate::ops;
use crate::real::Real;
use crate::tensor::{Param, Tensor4};
use rand::Rng;
use std::f64::consts::{FRAC_PI_2, PI};

/// Anchor scales from the reference configuration (pixels).
pub const PAPER_SCALES: [f64; 4] = [32.0, 64.0, 128.0, 256.0];
/// Anchor aspect ratios h:w — ships are narrow rectangles.
pub const PAPER_RATIOS: [f64; 2] = [0.25, 1.0 / 7.0];
/// Positive / definitely-negative thresholds on orientation-agnostic IoU.
pub const IOU_POSITIVE: f64 = 0.7;
pub const IOU_NEGATIVE: f64 = 0.3;
/// Positive / definitely-negative thresholds on angular deviation.
pub const ANGLE_POSITIVE: f64 = PI / 6.0;
pub const ANGLE_NEGATIVE: f64 = PI / 3.0;
/// Exponent clamp for decoded box sides.
pub const MAX_LOG_SIDE_RATIO: f64 = 4.135_166_556_742_356; // ln(1000/16)

/// Anchor scale/ratio configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSpec {
    pub scales: Vec<f64>,
    /// h:w ratios, each < 1 so `w` stays the long side.
    pub ratios: Vec<f64>,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        AnchorSpec {
            scales: PAPER_SCALES.to_vec(),
            ratios: PAPER_RATIOS.to_vec(),
        }
    }
}

impl AnchorSpec {
    pub fn anchors_per_location(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    /// Anchor sides for one (scale, ratio): `w·h = scale²`, `h/w = ratio`.
    pub fn sides(scale: f64, ratio: f64) -> (f64, f64) {
        let w = scale / ratio.sqrt();
        let h = scale * ratio.sqrt();
        (w, h)
    }
}

/// Dense grid of orientation-agnostic anchors (θ = 0) over a feature
/// map. Anchor order is location-major (row, column), spec-minor.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub stride: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub anchors_per_loc: usize,
    pub anchors: Vec<RotatedBox>,
}

impl AnchorGrid {
    #[inline]
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Location (row, col) and per-location slot of anchor `i`.
    #[inline]
    pub fn place(&self, i: usize) -> (usize, usize, usize) {
        let loc = i / self.anchors_per_loc;
        (loc / self.grid_w, loc % self.grid_w, i % self.anchors_per_loc)
    }
}

/// Anchors centered on `(j + 0.5)·stride, (i + 0.5)·stride` for every
/// feature-map location.
pub fn generate_anchors(feature_h: usize, feature_w: usize, stride: f64, spec: &AnchorSpec) -> AnchorGrid {
    let mut anchors = Vec::with_capacity(feature_h * feature_w * spec.anchors_per_location());
    for i in 0..feature_h {
        for j in 0..feature_w {
            let cy = (i as f64 + 0.5) * stride;
            let cx = (j as f64 + 0.5) * stride;
            for &scale in &spec.scales {
                for &ratio in &spec.ratios {
                    let (w, h) = AnchorSpec::sides(scale, ratio);
                    anchors.push(RotatedBox {
                        cx,
                        cy,
                        w,
                        h,
                        theta: 0.0,
                    });
                }
            }
        }
    }
    AnchorGrid {
        stride,
        grid_h: feature_h,
        grid_w: feature_w,
        anchors_per_loc: spec.anchors_per_location(),
        anchors,
    }
}

/// The fixed orientation bins: evenly spaced with interval π/6, offset
/// half an interval from −π/2 so they tile `[-π/2, π/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationSet {
    pub thetas: Vec<f64>,
}

impl Default for OrientationSet {
    fn default() -> Self {
        OrientationSet::with_bins(6)
    }
}

impl OrientationSet {
    pub fn with_bins(n: usize) -> Self {
        let interval = PI / n as f64;
        OrientationSet {
            thetas: (0..n)
                .map(|i| -FRAC_PI_2 + (i as f64 + 0.5) * interval)
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }
}

/// Orientation-agnostic assignment: per-anchor binary label `p₁*`, the
/// matched ground-truth index, and the best orientation-agnostic IoU.
#[derive(Debug, Clone)]
pub struct AgnosticAssignment {
    pub p1: Vec<bool>,
    pub matched_gt: Vec<Option<usize>>,
    pub best_iou: Vec<f64>,
}

/// Positive iff (I) the anchor has the highest orientation-agnostic IoU
/// with some ground truth, or (II) that IoU exceeds 0.7 with any ground
/// truth. Rule (I) guarantees every ground truth at least one positive.
pub fn assign_agnostic_labels(anchors: &[RotatedBox], gts: &[RotatedBox]) -> AgnosticAssignment {
    let n = anchors.len();
    let mut best_iou = vec![0.0f64; n];
    let mut matched = vec![None; n];
    let mut p1 = vec![false; n];
    if gts.is_empty() {
        return AgnosticAssignment {
            p1,
            matched_gt: matched,
            best_iou,
        };
    }
    let mut per_gt_best = vec![0.0f64; gts.len()];
    let mut iou_matrix = vec![0.0f64; n * gts.len()];
    for (ai, anchor) in anchors.iter().enumerate() {
        // cheap reject: anchors far from the gt cannot overlap
        for (gi, gt) in gts.iter().enumerate() {
            let reach = (anchor.w + gt.w + anchor.h + gt.h) * 0.5;
            if (anchor.cx - gt.cx).abs() > reach || (anchor.cy - gt.cy).abs() > reach {
                continue;
            }
            let iou = geometry::orientation_agnostic_iou(anchor, gt);
            iou_matrix[ai * gts.len() + gi] = iou;
            if iou > best_iou[ai] {
                best_iou[ai] = iou;
                matched[ai] = Some(gi);
            }
            per_gt_best[gi] = per_gt_best[gi].max(iou);
        }
        if best_iou[ai] > IOU_POSITIVE {
            p1[ai] = true;
        }
    }
    // rule (I): anchors achieving each gt's best IoU
    for (gi, &gbest) in per_gt_best.iter().enumerate() {
        if gbest > 0.0 {
            for ai in 0..n {
                if iou_matrix[ai * gts.len() + gi] >= gbest - 1e-9 {
                    p1[ai] = true;
                    if matched[ai].is_none() {
                        matched[ai] = Some(gi);
                    }
                }
            }
        } else {
            // degenerate: no anchor overlaps this gt; fall back to the
            // nearest center so the per-gt guarantee still holds
            let gt = &gts[gi];
            let nearest = (0..n)
                .min_by(|&a, &b| {
                    let da = (anchors[a].cx - gt.cx).hypot(anchors[a].cy - gt.cy);
                    let db = (anchors[b].cx - gt.cx).hypot(anchors[b].cy - gt.cy);
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            p1[nearest] = true;
            matched[nearest] = Some(gi);
        }
    }
    AgnosticAssignment {
        p1,
        matched_gt: matched,
        best_iou,
    }
}

/// Per-orientation labels for one ground-truth orientation: positive
/// iff the circular deviation (mod π, folded to `[0, π/2]`) is below
/// π/6.
pub fn orientation_labels(orients: &OrientationSet, gt_theta: f64) -> Vec<bool> {
    orients
        .thetas
        .iter()
        .map(|&t| geometry::angular_deviation(t, gt_theta) < ANGLE_POSITIVE)
        .collect()
}

/// Per-location orientation labels `p₂*`: positive where the location
/// owns a matched ground truth whose orientation deviates less than
/// π/6 from the bin.
pub fn assign_orientation_labels(
    orients: &OrientationSet,
    gts: &[RotatedBox],
    owned_gt_per_location: &[Option<usize>],
) -> Vec<Vec<bool>> {
    owned_gt_per_location
        .iter()
        .map(|owner| match owner {
            Some(gi) => orientation_labels(orients, gts[*gi].theta),
            None => vec![false; orients.len()],
        })
        .collect()
}

/// Classification label of one oriented anchor (anchor × orientation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrientedLabel {
    Positive,
    Negative,
    /// Neither positive nor definitely negative; excluded from the
    /// classification loss.
    Ignore,
}

/// Combines the agnostic and orientation labels into oriented-anchor
/// labels `p_c* ← p₁*·p₂*`, with the definitely-negative rule
/// `p_iou < 0.3 or Δθ > π/3` and everything else ignored. Output is
/// anchor-major, orientation-minor.
pub fn assign_oriented_labels(
    assignment: &AgnosticAssignment,
    gts: &[RotatedBox],
    orients: &OrientationSet,
) -> Vec<OrientedLabel> {
    let k = orients.len();
    let mut labels = Vec::with_capacity(assignment.p1.len() * k);
    for ai in 0..assignment.p1.len() {
        let p_iou = assignment.best_iou[ai];
        match assignment.matched_gt[ai] {
            Some(gi) => {
                let gt_theta = gts[gi].theta;
                for &bin in &orients.thetas {
                    let dev = geometry::angular_deviation(bin, gt_theta);
                    let label = if assignment.p1[ai] && dev < ANGLE_POSITIVE {
                        OrientedLabel::Positive
                    } else if p_iou < IOU_NEGATIVE || dev > ANGLE_NEGATIVE {
                        OrientedLabel::Negative
                    } else {
                        OrientedLabel::Ignore
                    };
                    labels.push(label);
                }
            }
            None => labels.extend(std::iter::repeat(OrientedLabel::Negative).take(k)),
        }
    }
    labels
}

/// Ground-truth offsets of `gt` relative to an anchor carrying the
/// predefined orientation `theta_a`:
///
/// `t_x = (x*−xᵃ)/wᵃ, t_y = (y*−yᵃ)/hᵃ, t_w = ln(w*/wᵃ),
///  t_h = ln(h*/hᵃ), t_θ = tan(θ*−θᵃ)`
///
/// The angle difference is folded circularly (mod π); a fold within
/// 1e-3 of ±π/2 is rejected (tangent singularity) — unreachable for
/// positive assignments, whose deviation is below π/6.
pub fn encode_offsets(
    gt: &RotatedBox,
    anchor: &RotatedBox,
    theta_a: f64,
) -> Result<([f64; 4], f64)> {
    let d_theta = fold_signed(gt.theta - theta_a);
    if d_theta.abs() >= FRAC_PI_2 - 1e-3 {
        return Err(Error::InvalidArgument(format!(
            "angle offset {d_theta:.4} too close to ±π/2 for the tangent encoding"
        )));
    }
    Ok((
        [
            (gt.cx - anchor.cx) / anchor.w,
            (gt.cy - anchor.cy) / anchor.h,
            (gt.w / anchor.w).ln(),
            (gt.h / anchor.h).ln(),
        ],
        d_theta.tan(),
    ))
}

/// Signed circular fold of an angle difference into `[-π/2, π/2)`.
fn fold_signed(d: f64) -> f64 {
    geometry::wrap_half_pi(d)
}

/// Exact inverse of [`encode_offsets`] (after the log-side clamp):
/// `x = t_x·wᵃ + xᵃ, …, θ = θᵃ + atan(t_θ)`, canonicalized.
pub fn decode_offsets(anchor: &RotatedBox, theta_a: f64, t: [f64; 4], t_theta: f64) -> RotatedBox {
    let w = anchor.w * t[2].min(MAX_LOG_SIDE_RATIO).exp();
    let h = anchor.h * t[3].min(MAX_LOG_SIDE_RATIO).exp();
    RotatedBox::new(
        t[0] * anchor.w + anchor.cx,
        t[1] * anchor.h + anchor.cy,
        w,
        h,
        theta_a + t_theta.atan(),
    )
    .expect("decoded sides are positive by construction")
}

/// A scored rotated-box candidate emitted by the proposal stage.
#[derive(Debug, Clone, Copy)]
pub struct Proposal {
    pub box_: RotatedBox,
    pub score: f64,
    /// Index of the source orientation-agnostic anchor.
    pub anchor: usize,
    /// Selected orientation bin.
    pub orientation: usize,
}

/// Head outputs for one image, all over the same grid:
/// `cls` `(A·K, H, W)` scores in (0,1), `reg_agn` `(A·4, H, W)`,
/// `reg_theta` `(K, H, W)`.
pub struct RpnHeadOutputs<T> {
    pub cls: Tensor4<T>,
    pub reg_agnostic: Tensor4<T>,
    pub reg_theta: Tensor4<T>,
}

/// The dual-branch head stack: a shared 3×3 trunk per branch, then 1×1
/// heads. Regression of `(x,y,w,h)` reads the rotation-invariant trunk,
/// θ regression the rotation-sensitive trunk, and classification reads
/// both (concatenated).
#[derive(Debug, Clone)]
pub struct RpnHeads<T> {
    pub trunk_agnostic: ConvLayer<T>,
    pub trunk_oriented: ConvLayer<T>,
    pub head_reg_agnostic: ConvLayer<T>,
    pub head_reg_theta: ConvLayer<T>,
    pub head_cls: ConvLayer<T>,
}

/// Intermediates kept for the backward pass.
pub struct RpnHeadsCache<T> {
    pooled: Tensor4<T>,
    prepool: Tensor4<T>,
    trunk_a_pre: Tensor4<T>,
    trunk_a: Tensor4<T>,
    trunk_o_pre: Tensor4<T>,
    trunk_o: Tensor4<T>,
    concat: Tensor4<T>,
    cls_prob: Tensor4<T>,
}

impl<T: Real> RpnHeads<T> {
    /// `pooled_ch`: rotation-invariant input channels; `prepool_ch`:
    /// rotation-sensitive input channels; `hidden`: trunk width.
    pub fn new(
        pooled_ch: usize,
        prepool_ch: usize,
        hidden: usize,
        anchors_per_loc: usize,
        orientations: usize,
        trunk_init: Init,
        head_init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        RpnHeads {
            trunk_agnostic: ConvLayer::new(pooled_ch, hidden, 3, 1, 1, trunk_init, rng),
            trunk_oriented: ConvLayer::new(prepool_ch, hidden, 3, 1, 1, trunk_init, rng),
            head_reg_agnostic: ConvLayer::new(hidden, anchors_per_loc * 4, 1, 1, 0, head_init, rng),
            head_reg_theta: ConvLayer::new(hidden, orientations, 1, 1, 0, head_init, rng),
            head_cls: ConvLayer::new(
                2 * hidden,
                anchors_per_loc * orientations,
                1,
                1,
                0,
                head_init,
                rng,
            ),
        }
    }

    /// Per-location output widths `(reg_agnostic, reg_theta, cls)`.
    pub fn output_widths(&self) -> (usize, usize, usize) {
        (
            self.head_reg_agnostic.weights.value.shape()[0],
            self.head_reg_theta.weights.value.shape()[0],
            self.head_cls.weights.value.shape()[0],
        )
    }

    pub fn forward(
        &self,
        pooled: &Tensor4<T>,
        prepool: &Tensor4<T>,
    ) -> Result<(RpnHeadOutputs<T>, RpnHeadsCache<T>)> {
        let trunk_a_pre = self.trunk_agnostic.forward(pooled)?;
        let trunk_a = ops::relu(&trunk_a_pre);
        let trunk_o_pre = self.trunk_oriented.forward(prepool)?;
        let trunk_o = ops::relu(&trunk_o_pre);
        let reg_agnostic = self.head_reg_agnostic.forward(&trunk_a)?;
        let reg_theta = self.head_reg_theta.forward(&trunk_o)?;
        let concat = ops::concat_channels(&[&trunk_a, &trunk_o])?;
        let cls_logit = self.head_cls.forward(&concat)?;
        let cls_prob = ops::sigmoid(&cls_logit);
        Ok((
            RpnHeadOutputs {
                cls: cls_prob.clone(),
                reg_agnostic,
                reg_theta,
            },
            RpnHeadsCache {
                pooled: pooled.clone(),
                prepool: prepool.clone(),
                trunk_a_pre,
                trunk_a,
                trunk_o_pre,
                trunk_o,
                concat,
                cls_prob,
            },
        ))
    }

    /// Backward from gradients on the three outputs (`g_cls` w.r.t. the
    /// post-sigmoid probabilities). Returns gradients for the two input
    /// feature maps `(d_pooled, d_prepool)`.
    pub fn backward(
        &mut self,
        cache: &RpnHeadsCache<T>,
        g_cls: &Tensor4<T>,
        g_reg_agnostic: &Tensor4<T>,
        g_reg_theta: &Tensor4<T>,
    ) -> Result<(Tensor4<T>, Tensor4<T>)> {
        let g_cls_logit = ops::sigmoid_backward(&cache.cls_prob, g_cls);
        let g_concat = self.head_cls.backward(&cache.concat, &g_cls_logit)?;
        let hidden = cache.trunk_a.channels();
        let parts = ops::split_channels(&g_concat, &[hidden, hidden]);

        let mut g_trunk_a = self
            .head_reg_agnostic
            .backward(&cache.trunk_a, g_reg_agnostic)?;
        add_into(&mut g_trunk_a, &parts[0]);
        let mut g_trunk_o = self.head_reg_theta.backward(&cache.trunk_o, g_reg_theta)?;
        add_into(&mut g_trunk_o, &parts[1]);

        let g_a_pre = ops::relu_backward(&cache.trunk_a_pre, &g_trunk_a);
        let g_o_pre = ops::relu_backward(&cache.trunk_o_pre, &g_trunk_o);
        let g_pooled = self.trunk_agnostic.backward(&cache.pooled, &g_a_pre)?;
        let g_prepool = self.trunk_oriented.backward(&cache.prepool, &g_o_pre)?;
        Ok((g_pooled, g_prepool))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut ps = self.trunk_agnostic.params_mut();
        ps.extend(self.trunk_oriented.params_mut());
        ps.extend(self.head_reg_agnostic.params_mut());
        ps.extend(self.head_reg_theta.params_mut());
        ps.extend(self.head_cls.params_mut());
        ps
    }
}

fn add_into<T: Real>(dst: &mut Tensor4<T>, src: &Tensor4<T>) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += *s;
    }
}

/// Per orientation-agnostic anchor, selects the highest-scoring
/// orientation clone, decodes it with the agnostic offsets plus that
/// clone's angle offset, then applies rotated NMS and a top-K cap.
/// Returned proposals are score-sorted (non-increasing).
pub fn generate_proposals<T: Real>(
    outputs: &RpnHeadOutputs<T>,
    batch_item: usize,
    grid: &AnchorGrid,
    orients: &OrientationSet,
    nms_threshold: f64,
    pre_nms_cap: usize,
    cap: usize,
) -> Vec<Proposal> {
    let k = orients.len();
    let mut candidates: Vec<Proposal> = Vec::with_capacity(grid.len());
    for ai in 0..grid.len() {
        let (row, col, slot) = grid.place(ai);
        // argmax orientation clone for this anchor
        let mut best_j = 0;
        let mut best_s = outputs.cls.at(batch_item, slot * k, row, col);
        for j in 1..k {
            let s = outputs.cls.at(batch_item, slot * k + j, row, col);
            if s > best_s {
                best_s = s;
                best_j = j;
            }
        }
        let t = [
            outputs.reg_agnostic.at(batch_item, slot * 4, row, col).as_f64(),
            outputs.reg_agnostic.at(batch_item, slot * 4 + 1, row, col).as_f64(),
            outputs.reg_agnostic.at(batch_item, slot * 4 + 2, row, col).as_f64(),
            outputs.reg_agnostic.at(batch_item, slot * 4 + 3, row, col).as_f64(),
        ];
        let t_theta = outputs.reg_theta.at(batch_item, best_j, row, col).as_f64();
        let decoded = decode_offsets(&grid.anchors[ai], orients.thetas[best_j], t, t_theta);
        candidates.push(Proposal {
            box_: decoded,
            score: best_s.as_f64(),
            anchor: ai,
            orientation: best_j,
        });
    }
    candidates.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    candidates.truncate(pre_nms_cap);
    let scored: Vec<(RotatedBox, f64)> = candidates.iter().map(|p| (p.box_, p.score)).collect();
    let keep = geometry::rotated_nms(&scored, nms_threshold);
    keep.into_iter()
        .take(cap)
        .map(|i| candidates[i])
        .collect()
}

/// Samples up to `total·fg_fraction` positives uniformly without
/// replacement and fills the remainder with definite negatives.
/// Ignored anchors are never selected. Returns indices into `labels`.
pub fn sample_minibatch(
    labels: &[OrientedLabel],
    total: usize,
    fg_fraction: f64,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let positives: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == OrientedLabel::Positive)
        .map(|(i, _)| i)
        .collect();
    let negatives: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == OrientedLabel::Negative)
        .map(|(i, _)| i)
        .collect();
    let fg_cap = ((total as f64) * fg_fraction).round() as usize;
    let n_pos = positives.len().min(fg_cap);
    let n_neg = negatives.len().min(total - n_pos);
    let mut selected = pick_without_replacement(&positives, n_pos, rng);
    selected.extend(pick_without_replacement(&negatives, n_neg, rng));
    selected
}

fn pick_without_replacement(pool: &[usize], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    if count >= pool.len() {
        return pool.to_vec();
    }
    rand::seq::index::sample(rng, pool.len(), count)
        .into_iter()
        .map(|i| pool[i])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn anchor_sides_for_scale32_ratio_quarter() {
        let (w, h) = AnchorSpec::sides(32.0, 0.25);
        assert!((w - 64.0).abs() < 1e-12);
        assert!((h - 16.0).abs() < 1e-12);
    }

    #[test]
    fn single_location_has_eight_anchors() {
        let grid = generate_anchors(1, 1, 16.0, &AnchorSpec::default());
        assert_eq!(grid.len(), 8);
        assert!(grid.anchors.iter().all(|a| a.cx == 8.0 && a.cy == 8.0));
        assert!(grid.anchors.iter().all(|a| a.theta == 0.0 && a.w > a.h));
    }

    #[test]
    fn regression_width_is_38_per_location() {
        let spec = AnchorSpec::default();
        let orients = OrientationSet::default();
        let reg_total = spec.anchors_per_location() * 4 + orients.len();
        assert_eq!(reg_total, 38);
    }

    #[test]
    fn orientation_bins_tile_half_circle() {
        let o = OrientationSet::default();
        assert_eq!(o.len(), 6);
        for (i, t) in o.thetas.iter().enumerate() {
            let expect = -FRAC_PI_2 + (i as f64 + 0.5) * PI / 6.0;
            assert!((t - expect).abs() < 1e-12);
            assert!((-FRAC_PI_2..FRAC_PI_2).contains(t));
        }
    }

    #[test]
    fn agnostic_assignment_basic() {
        let gt = RotatedBox::new(50.0, 50.0, 60.0, 15.0, 0.8).unwrap();
        let congruent = RotatedBox::new(50.0, 50.0, 60.0, 15.0, 0.0).unwrap();
        let far = RotatedBox::new(1050.0, 50.0, 60.0, 15.0, 0.0).unwrap();
        let a = assign_agnostic_labels(&[congruent, far], &[gt]);
        assert!(a.p1[0], "congruent concentric anchor is positive");
        assert!((a.best_iou[0] - 1.0).abs() < 1e-9);
        assert!(!a.p1[1] || a.best_iou[1] > 0.0, "far anchor only via fallback");
        assert_eq!(a.matched_gt[0], Some(0));
    }

    #[test]
    fn every_gt_gets_a_positive_anchor() {
        let grid = generate_anchors(8, 8, 16.0, &AnchorSpec {
            scales: vec![16.0, 32.0],
            ratios: vec![0.25],
        });
        let gts = vec![
            RotatedBox::new(30.0, 40.0, 40.0, 10.0, 0.5).unwrap(),
            RotatedBox::new(90.0, 90.0, 50.0, 12.0, -1.2).unwrap(),
        ];
        let a = assign_agnostic_labels(&grid.anchors, &gts);
        for gi in 0..gts.len() {
            assert!(
                (0..grid.len()).any(|ai| a.p1[ai] && a.matched_gt[ai] == Some(gi)),
                "gt {gi} has no positive anchor"
            );
        }
    }

    #[test]
    fn assignment_matches_brute_force_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let anchors: Vec<RotatedBox> = (0..20)
            .map(|_| {
                RotatedBox::new(
                    rng.gen_range(0.0..100.0),
                    rng.gen_range(0.0..100.0),
                    rng.gen_range(20.0..60.0),
                    rng.gen_range(8.0..20.0),
                    0.0,
                )
                .unwrap()
            })
            .collect();
        let gts: Vec<RotatedBox> = (0..5)
            .map(|_| {
                RotatedBox::new(
                    rng.gen_range(0.0..100.0),
                    rng.gen_range(0.0..100.0),
                    rng.gen_range(20.0..60.0),
                    rng.gen_range(8.0..20.0),
                    rng.gen_range(-1.5..1.5),
                )
                .unwrap()
            })
            .collect();
        let a = assign_agnostic_labels(&anchors, &gts);
        // independent re-evaluation of rules (I) and (II), including
        // the documented nearest-center fallback for ground truths that
        // overlap no anchor at all
        for (ai, anchor) in anchors.iter().enumerate() {
            let ious: Vec<f64> = gts
                .iter()
                .map(|gt| geometry::orientation_agnostic_iou(anchor, gt))
                .collect();
            let rule2 = ious.iter().any(|&v| v > IOU_POSITIVE);
            let mut rule1 = false;
            for (gi, gt) in gts.iter().enumerate() {
                let gt_best = anchors
                    .iter()
                    .map(|an| geometry::orientation_agnostic_iou(an, gt))
                    .fold(0.0f64, f64::max);
                if gt_best > 0.0 {
                    rule1 |= ious[gi] >= gt_best - 1e-9;
                } else {
                    let nearest = (0..anchors.len())
                        .min_by(|&x, &y| {
                            let dx = (anchors[x].cx - gt.cx).hypot(anchors[x].cy - gt.cy);
                            let dy = (anchors[y].cx - gt.cx).hypot(anchors[y].cy - gt.cy);
                            dx.partial_cmp(&dy).unwrap()
                        })
                        .unwrap();
                    rule1 |= nearest == ai;
                }
            }
            assert_eq!(a.p1[ai], rule1 || rule2, "anchor {ai}");
        }
    }

    #[test]
    fn assignment_invariant_to_gt_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let anchors: Vec<RotatedBox> = (0..30)
            .map(|_| {
                RotatedBox::new(
                    rng.gen_range(0.0..80.0),
                    rng.gen_range(0.0..80.0),
                    40.0,
                    10.0,
                    0.0,
                )
                .unwrap()
            })
            .collect();
        let gts: Vec<RotatedBox> = (0..4)
            .map(|_| {
                RotatedBox::new(
                    rng.gen_range(0.0..80.0),
                    rng.gen_range(0.0..80.0),
                    rng.gen_range(25.0..45.0),
                    rng.gen_range(8.0..14.0),
                    rng.gen_range(-1.5..1.5),
                )
                .unwrap()
            })
            .collect();
        let fwd = assign_agnostic_labels(&anchors, &gts);
        let mut rev = gts.clone();
        rev.reverse();
        let bwd = assign_agnostic_labels(&anchors, &rev);
        assert_eq!(fwd.p1, bwd.p1);
    }

    #[test]
    fn orientation_label_examples() {
        let o = OrientationSet::default();
        // gt exactly on a bin center → that bin positive
        let labels = orientation_labels(&o, o.thetas[2]);
        assert!(labels[2]);
        // gt at bin + π/4 → that bin negative (π/4 > π/6)
        let labels = orientation_labels(&o, o.thetas[2] + PI / 4.0);
        assert!(!labels[2]);
        // seam: gt near +π/2 matches the bin near −π/2 through folding
        let gt_theta = FRAC_PI_2 - 0.01;
        let labels = orientation_labels(&o, gt_theta);
        assert!(labels[0], "θ₀={} vs gt {}", o.thetas[0], gt_theta);
        assert!(labels[5]);
    }

    #[test]
    fn oriented_label_rule_table() {
        let orients = OrientationSet::default();
        // helper to build a one-anchor assignment with chosen p_iou/p1
        let build = |p1: bool, p_iou: f64, gt_theta: f64| {
            let assignment = AgnosticAssignment {
                p1: vec![p1],
                matched_gt: vec![Some(0)],
                best_iou: vec![p_iou],
            };
            let gts = vec![RotatedBox::new(0.0, 0.0, 40.0, 10.0, gt_theta).unwrap()];
            assign_oriented_labels(&assignment, &gts, &orients)
        };
        // p_iou = 0.9, Δθ = 0.1 → positive
        let theta_near_bin0 = orients.thetas[0] + 0.1;
        let l = build(true, 0.9, theta_near_bin0);
        assert_eq!(l[0], OrientedLabel::Positive);
        // p_iou = 0.2 → negative regardless of Δθ
        let l = build(false, 0.2, orients.thetas[0]);
        assert!(l.iter().all(|&x| x == OrientedLabel::Negative));
        // p_iou = 0.5, Δθ = π/4 → ignored
        let theta = orients.thetas[3] + PI / 4.0;
        let l = build(false, 0.5, theta);
        let dev = geometry::angular_deviation(orients.thetas[3], theta);
        assert!((dev - PI / 4.0).abs() < 1e-9);
        assert_eq!(l[3], OrientedLabel::Ignore);
    }

    #[test]
    fn encode_reference_values() {
        let anchor = RotatedBox::new(10.0, 20.0, 64.0, 16.0, 0.0).unwrap();
        let gt = anchor;
        let (t, tt) = encode_offsets(&gt, &anchor, gt.theta).unwrap();
        assert_eq!(t, [0.0; 4]);
        assert_eq!(tt, 0.0);

        let gt2 = RotatedBox::new(10.0, 20.0, 64.0, 16.0, PI / 6.0).unwrap();
        let (_, tt) = encode_offsets(&gt2, &anchor, 0.0).unwrap();
        assert!((tt - (PI / 6.0).tan()).abs() < 1e-12);
        assert!((tt - 0.5774).abs() < 1e-4);
    }

    #[test]
    fn encode_rejects_near_singularity() {
        let anchor = RotatedBox::new(0.0, 0.0, 40.0, 10.0, 0.0).unwrap();
        let gt = RotatedBox::new(0.0, 0.0, 40.0, 10.0, FRAC_PI_2 - 1e-5).unwrap();
        assert!(encode_offsets(&gt, &anchor, 0.0).is_err());
    }

    #[test]
    fn decode_reference_values() {
        let anchor = RotatedBox::new(5.0, 5.0, 40.0, 10.0, 0.0).unwrap();
        let same = decode_offsets(&anchor, 0.3, [0.0; 4], 0.0);
        assert!((same.cx - 5.0).abs() < 1e-12 && (same.theta - 0.3).abs() < 1e-12);
        // t_θ = 1 → θ = θᵃ + π/4
        let rot = decode_offsets(&anchor, 0.1, [0.0; 4], 1.0);
        assert!((rot.theta - (0.1 + PI / 4.0)).abs() < 1e-12);
        // side clamp guards exp overflow
        let big = decode_offsets(&anchor, 0.0, [0.0, 0.0, 100.0, 100.0], 0.0);
        assert!(big.w.is_finite() && big.h.is_finite());
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(
            acx in -50.0f64..50.0, acy in -50.0f64..50.0,
            aw in 10.0f64..80.0, ah in 4.0f64..40.0,
            dx in -0.4f64..0.4, dy in -0.4f64..0.4,
            sw in 0.5f64..2.0, sh in 0.5f64..2.0,
            theta_a in -1.5f64..1.5, d_theta in -1.0f64..1.0,
        ) {
            let anchor = RotatedBox::new(acx, acy, aw, ah, 0.0).unwrap();
            let gw = anchor.w * sw;
            let gh = (anchor.h * sh).min(gw - 1e-6); // keep w the long side
            let gt = RotatedBox::new(
                acx + dx * anchor.w, acy + dy * anchor.h, gw, gh.max(0.5), theta_a + d_theta,
            ).unwrap();
            let (t, tt) = encode_offsets(&gt, &anchor, theta_a).unwrap();
            let back = decode_offsets(&anchor, theta_a, t, tt);
            prop_assert!((back.cx - gt.cx).abs() < 1e-9);
            prop_assert!((back.cy - gt.cy).abs() < 1e-9);
            prop_assert!((back.w - gt.w).abs() < 1e-9);
            prop_assert!((back.h - gt.h).abs() < 1e-9);
            prop_assert!(geometry::angular_deviation(back.theta, gt.theta) < 1e-9);
            prop_assert!(back.w > 0.0 && back.h > 0.0);
            prop_assert!((-FRAC_PI_2..FRAC_PI_2).contains(&back.theta));
        }
    }

    #[test]
    fn minibatch_ratios() {
        let mut labels = vec![OrientedLabel::Positive; 100];
        labels.extend(vec![OrientedLabel::Negative; 500]);
        labels.extend(vec![OrientedLabel::Ignore; 50]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sel = sample_minibatch(&labels, 256, 0.25, &mut rng);
        assert_eq!(sel.len(), 256);
        let pos = sel.iter().filter(|&&i| labels[i] == OrientedLabel::Positive).count();
        assert_eq!(pos, 64);

        // shortage: 10 positives → 10 + 246
        let mut labels = vec![OrientedLabel::Positive; 10];
        labels.extend(vec![OrientedLabel::Negative; 500]);
        let sel = sample_minibatch(&labels, 256, 0.25, &mut rng);
        assert_eq!(sel.len(), 256);
        let pos = sel.iter().filter(|&&i| labels[i] == OrientedLabel::Positive).count();
        assert_eq!(pos, 10);
    }

    #[test]
    fn minibatch_never_samples_ignored() {
        let mut labels = vec![OrientedLabel::Ignore; 300];
        for i in 0..40 {
            labels[i * 7] = OrientedLabel::Positive;
        }
        for i in 0..100 {
            labels[i * 2 + 1] = OrientedLabel::Negative;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let sel = sample_minibatch(&labels, 64, 0.25, &mut rng);
            assert!(sel.iter().all(|&i| labels[i] != OrientedLabel::Ignore));
        }
    }

    #[test]
    fn proposals_select_argmax_orientation() {
        let spec = AnchorSpec {
            scales: vec![32.0],
            ratios: vec![0.25],
        };
        let grid = generate_anchors(1, 1, 16.0, &spec);
        let orients = OrientationSet::default();
        let mut cls = Tensor4::<f64>::zeros([1, 6, 1, 1]);
        for j in 0..6 {
            *cls.at_mut(0, j, 0, 0) = 0.1 + 0.1 * j as f64;
        }
        *cls.at_mut(0, 4, 0, 0) = 0.9;
        let outputs = RpnHeadOutputs {
            cls,
            reg_agnostic: Tensor4::zeros([1, 4, 1, 1]),
            reg_theta: Tensor4::zeros([1, 6, 1, 1]),
        };
        let props = generate_proposals(&outputs, 0, &grid, &orients, 0.7, 1000, 10);
        assert_eq!(props.len(), 1);
        assert_eq!(props[0].orientation, 4);
        assert!((props[0].box_.theta - orients.thetas[4]).abs() < 1e-12);
        assert!((props[0].score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn proposal_scores_non_increasing_and_capped() {
        let spec = AnchorSpec {
            scales: vec![24.0, 48.0],
            ratios: vec![0.25],
        };
        let grid = generate_anchors(4, 4, 16.0, &spec);
        let orients = OrientationSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n_anchor_ch = 2 * 6;
        let cls = Tensor4::from_fn([1, n_anchor_ch, 4, 4], || rng.gen_range(0.0..1.0));
        let reg_agnostic = Tensor4::from_fn([1, 8, 4, 4], || rng.gen_range(-0.2..0.2));
        let reg_theta = Tensor4::from_fn([1, 6, 4, 4], || rng.gen_range(-0.3..0.3));
        let outputs = RpnHeadOutputs {
            cls,
            reg_agnostic,
            reg_theta,
        };
        let props = generate_proposals(&outputs, 0, &grid, &orients, 0.7, 1000, 12);
        assert!(props.len() <= 12);
        for w in props.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        // cap larger than candidates → all survivors returned
        let all = generate_proposals(&outputs, 0, &grid, &orients, 0.7, 1000, 10_000);
        let scored: Vec<(RotatedBox, f64)> = {
            let mut c: Vec<Proposal> = (0..grid.len())
                .map(|ai| {
                    let (row, col, slot) = grid.place(ai);
                    let (mut bj, mut bs) = (0usize, outputs.cls.at(0, slot * 6, row, col));
                    for j in 1..6 {
                        let s = outputs.cls.at(0, slot * 6 + j, row, col);
                        if s > bs {
                            bs = s;
                            bj = j;
                        }
                    }
                    let t = [
                        outputs.reg_agnostic.at(0, slot * 4, row, col),
                        outputs.reg_agnostic.at(0, slot * 4 + 1, row, col),
                        outputs.reg_agnostic.at(0, slot * 4 + 2, row, col),
                        outputs.reg_agnostic.at(0, slot * 4 + 3, row, col),
                    ];
                    let tt = outputs.reg_theta.at(0, bj, row, col);
                    Proposal {
                        box_: decode_offsets(&grid.anchors[ai], orients.thetas[bj], t, tt),
                        score: bs,
                        anchor: ai,
                        orientation: bj,
                    }
                })
                .collect();
            c.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
            c.iter().map(|p| (p.box_, p.score)).collect()
        };
        let brute = geometry::rotated_nms(&scored, 0.7);
        assert_eq!(all.len(), brute.len());
        for (p, &bi) in all.iter().zip(brute.iter()) {
            assert!((p.score - scored[bi].1).abs() < 1e-12);
        }
    }
}
