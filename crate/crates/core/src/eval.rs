//! Detection metrics: greedy matching, precision/recall sweeps,
//! average precision (all-points interpolation), average recall over
//! IoU thresholds in [0.5, 1), and mean positive-proposal IoU.

use crate::geometry::{rotated_iou, RotatedBox};
use serde::Serialize;

/// Default IoU threshold for counting a detection as a true positive.
pub const MATCH_IOU: f64 = 0.5;
/// Average-recall thresholds: 0.50, 0.55, …, 0.95.
pub const AR_THRESHOLDS: usize = 10;

/// Outcome of matching one image's detections against its ground truth.
#[derive(Debug, Clone, Default)]
pub struct MatchResult {
    /// Per detection (score-sorted order): true positive flag.
    pub tp: Vec<bool>,
    /// Per detection: IoU with its matched ground truth (0 for FP).
    pub iou: Vec<f64>,
    /// Per ground truth: matched by some detection.
    pub gt_matched: Vec<bool>,
    /// Detection scores, aligned with `tp` and `iou`.
    pub scores: Vec<f64>,
}

impl MatchResult {
    pub fn num_tp(&self) -> usize {
        self.tp.iter().filter(|&&t| t).count()
    }

    pub fn num_fp(&self) -> usize {
        self.tp.len() - self.num_tp()
    }

    pub fn num_fn(&self) -> usize {
        self.gt_matched.iter().filter(|&&m| !m).count()
    }
}

/// Greedy one-to-one matching by descending detection score: each
/// detection claims the best still-unmatched ground truth with rotated
/// IoU above the threshold. Unmatched detections are false positives,
/// unmatched ground truths false negatives.
pub fn match_detections(
    detections: &[(RotatedBox, f64)],
    gts: &[RotatedBox],
    iou_threshold: f64,
) -> MatchResult {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b].1
            .partial_cmp(&detections[a].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut result = MatchResult {
        tp: vec![false; detections.len()],
        iou: vec![0.0; detections.len()],
        gt_matched: vec![false; gts.len()],
        scores: Vec::with_capacity(detections.len()),
    };
    let mut tp_sorted = vec![false; detections.len()];
    let mut iou_sorted = vec![0.0; detections.len()];
    for (rank, &di) in order.iter().enumerate() {
        let det = &detections[di].0;
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if result.gt_matched[gi] {
                continue;
            }
            let iou = rotated_iou(det, gt);
            if iou > iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, iou)) = best {
            result.gt_matched[gi] = true;
            tp_sorted[rank] = true;
            iou_sorted[rank] = iou;
        }
        result.scores.push(detections[di].1);
    }
    result.tp = tp_sorted;
    result.iou = iou_sorted;
    result
}

/// One point of the precision/recall sweep.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PrPoint {
    pub cutoff: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Sweeps the score cutoff down the pooled, score-sorted detections of
/// a dataset. With zero detections, precision is defined as 1 and
/// recall 0.
pub fn precision_recall(matches: &[MatchResult]) -> Vec<PrPoint> {
    let total_gt: usize = matches.iter().map(|m| m.gt_matched.len()).sum();
    let mut pooled: Vec<(f64, bool)> = matches
        .iter()
        .flat_map(|m| m.scores.iter().copied().zip(m.tp.iter().copied()))
        .collect();
    pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    if pooled.is_empty() {
        return vec![PrPoint {
            cutoff: f64::INFINITY,
            precision: 1.0,
            recall: 0.0,
        }];
    }
    let mut out = Vec::with_capacity(pooled.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for (score, is_tp) in pooled {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        out.push(PrPoint {
            cutoff: score,
            precision: tp as f64 / (tp + fp) as f64,
            recall: if total_gt == 0 {
                0.0
            } else {
                tp as f64 / total_gt as f64
            },
        });
    }
    out
}

/// Area under the precision envelope versus recall (all-points
/// interpolation: precision at each recall is replaced by the maximum
/// precision at any recall ≥ it).
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    // envelope, walking from high recall to low
    let mut envelope: Vec<(f64, f64)> = Vec::with_capacity(curve.len());
    let mut max_p = 0.0f64;
    for p in curve.iter().rev() {
        max_p = max_p.max(p.precision);
        envelope.push((p.recall, max_p));
    }
    envelope.reverse();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in envelope {
        if recall > prev_recall {
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
    }
    ap
}

/// Precision and recall at the final cutoff (all detections counted).
pub fn summary_counts(matches: &[MatchResult]) -> (usize, usize, usize) {
    let tp = matches.iter().map(|m| m.num_tp()).sum();
    let fp = matches.iter().map(|m| m.num_fp()).sum();
    let fnn = matches.iter().map(|m| m.num_fn()).sum();
    (tp, fp, fnn)
}

/// Average recall of the top-K proposals per image: the mean of recall
/// at IoU thresholds {0.50, 0.55, …, 0.95} (a discrete approximation of
/// integrating recall over IoU ∈ [0.5, 1]).
pub fn average_recall(per_image: &[(Vec<(RotatedBox, f64)>, Vec<RotatedBox>)], k: usize) -> f64 {
    let total_gt: usize = per_image.iter().map(|(_, g)| g.len()).sum();
    if total_gt == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for t in 0..AR_THRESHOLDS {
        let thr = 0.5 + t as f64 * 0.05;
        let mut matched = 0usize;
        for (proposals, gts) in per_image {
            let mut top: Vec<(RotatedBox, f64)> = proposals.clone();
            top.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
            top.truncate(k);
            let m = match_detections(&top, gts, thr);
            matched += m.gt_matched.iter().filter(|&&x| x).count();
        }
        sum += matched as f64 / total_gt as f64;
    }
    sum / AR_THRESHOLDS as f64
}

/// Mean best-match rotated IoU over proposals whose best IoU exceeds
/// 0.5. `None` when no proposal qualifies.
pub fn mean_positive_iou(
    per_image: &[(Vec<(RotatedBox, f64)>, Vec<RotatedBox>)],
) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (proposals, gts) in per_image {
        for (p, _) in proposals {
            let best = gts
                .iter()
                .map(|g| rotated_iou(p, g))
                .fold(0.0f64, f64::max);
            if best > 0.5 {
                sum += best;
                count += 1;
            }
        }
    }
    if count == 0 {
        None
    } else {
        Some(sum / count as f64)
    }
}

/// Serializes a PR curve as `cutoff,precision,recall` CSV.
pub fn pr_curve_csv(curve: &[PrPoint]) -> String {
    let mut s = String::from("cutoff,precision,recall\n");
    for p in curve {
        s.push_str(&format!("{},{},{}\n", p.cutoff, p.precision, p.recall));
    }
    s
}

/// Renders a PR curve as a standalone SVG plot.
pub fn pr_curve_svg(curve: &[PrPoint]) -> String {
    let (w, h, margin) = (480.0, 480.0, 48.0);
    let plot = w - 2.0 * margin;
    let map = |r: f64, p: f64| -> (f64, f64) {
        (margin + r * plot, h - margin - p * plot)
    };
    let mut path = String::new();
    let mut points: Vec<(f64, f64)> = vec![(0.0, 1.0)];
    points.extend(curve.iter().map(|p| (p.recall, p.precision)));
    for (i, &(r, p)) in points.iter().enumerate() {
        let (x, y) = map(r, p);
        path.push_str(if i == 0 { "M" } else { "L" });
        path.push_str(&format!("{x:.2},{y:.2} "));
    }
    let mut axes = String::new();
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let (x, y) = map(f, 0.0);
        axes.push_str(&format!(
            "<text x=\"{x:.0}\" y=\"{:.0}\" font-size=\"11\" text-anchor=\"middle\">{f:.1}</text>",
            h - margin + 16.0
        ));
        let (x2, y2) = map(0.0, f);
        axes.push_str(&format!(
            "<text x=\"{:.0}\" y=\"{y2:.0}\" font-size=\"11\" text-anchor=\"end\">{f:.1}</text>",
            margin - 6.0
        ));
        let _ = (y, x2);
    }
    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">
<rect width="{w}" height="{h}" fill="white"/>
<rect x="{margin}" y="{margin}" width="{plot}" height="{plot}" fill="none" stroke="#999"/>
<path d="{path}" fill="none" stroke="#1f6fb2" stroke-width="2"/>
{axes}
<text x="{:.0}" y="{:.0}" font-size="13" text-anchor="middle">recall</text>
<text x="14" y="{:.0}" font-size="13" text-anchor="middle" transform="rotate(-90 14 {:.0})">precision</text>
</svg>
"##,
        w / 2.0,
        h - 12.0,
        h / 2.0,
        h / 2.0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rb(cx: f64, cy: f64, w: f64, h: f64, t: f64) -> RotatedBox {
        RotatedBox::new(cx, cy, w, h, t).unwrap()
    }

    #[test]
    fn perfect_detections_all_tp() {
        let gts = vec![rb(10.0, 10.0, 20.0, 8.0, 0.2), rb(50.0, 50.0, 30.0, 10.0, -0.4)];
        let dets: Vec<(RotatedBox, f64)> = gts.iter().map(|&g| (g, 0.9)).collect();
        let m = match_detections(&dets, &gts, 0.5);
        assert_eq!(m.num_tp(), 2);
        assert_eq!(m.num_fp(), 0);
        assert_eq!(m.num_fn(), 0);
    }

    #[test]
    fn duplicate_detection_is_fp() {
        let gt = vec![rb(10.0, 10.0, 20.0, 8.0, 0.0)];
        let dets = vec![(gt[0], 0.9), (gt[0], 0.8)];
        let m = match_detections(&dets, &gt, 0.5);
        assert_eq!(m.num_tp(), 1);
        assert_eq!(m.num_fp(), 1);
    }

    #[test]
    fn matching_equals_brute_force_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let gts: Vec<RotatedBox> = (0..10)
                .map(|_| {
                    rb(
                        rng.gen_range(0.0..200.0),
                        rng.gen_range(0.0..200.0),
                        rng.gen_range(20.0..60.0),
                        rng.gen_range(8.0..20.0),
                        rng.gen_range(-1.5..1.5),
                    )
                })
                .collect();
            let dets: Vec<(RotatedBox, f64)> = (0..30)
                .map(|i| {
                    if i < 15 {
                        // perturbations of ground truths
                        let g = gts[i % gts.len()];
                        (
                            rb(
                                g.cx + rng.gen_range(-6.0..6.0),
                                g.cy + rng.gen_range(-6.0..6.0),
                                g.w * rng.gen_range(0.85..1.15),
                                g.h * rng.gen_range(0.85..1.15),
                                g.theta + rng.gen_range(-0.2..0.2),
                            ),
                            rng.gen_range(0.0..1.0),
                        )
                    } else {
                        (
                            rb(
                                rng.gen_range(0.0..200.0),
                                rng.gen_range(0.0..200.0),
                                rng.gen_range(20.0..60.0),
                                rng.gen_range(8.0..20.0),
                                rng.gen_range(-1.5..1.5),
                            ),
                            rng.gen_range(0.0..1.0),
                        )
                    }
                })
                .collect();
            let fast = match_detections(&dets, &gts, 0.5);

            // independent greedy reference
            let mut order: Vec<usize> = (0..dets.len()).collect();
            order.sort_by(|&a, &b| dets[b].1.partial_cmp(&dets[a].1).unwrap().then(a.cmp(&b)));
            let mut taken = vec![false; gts.len()];
            let mut ref_tp = Vec::new();
            for &di in &order {
                let mut best: Option<(usize, f64)> = None;
                for gi in 0..gts.len() {
                    if taken[gi] {
                        continue;
                    }
                    let iou = rotated_iou(&dets[di].0, &gts[gi]);
                    if iou > 0.5 && best.map_or(true, |(_, b)| iou > b) {
                        best = Some((gi, iou));
                    }
                }
                if let Some((gi, _)) = best {
                    taken[gi] = true;
                    ref_tp.push(true);
                } else {
                    ref_tp.push(false);
                }
            }
            assert_eq!(fast.tp, ref_tp);
        }
    }

    #[test]
    fn precision_recall_reference_point() {
        // 10 detections on 10 gts: 8 hits then 2 misses → P=0.8, R=0.8
        let gts: Vec<RotatedBox> = (0..10)
            .map(|i| rb(40.0 * i as f64, 0.0, 20.0, 8.0, 0.0))
            .collect();
        let mut dets: Vec<(RotatedBox, f64)> =
            gts.iter().take(8).map(|&g| (g, 0.9)).collect();
        dets.push((rb(5000.0, 0.0, 20.0, 8.0, 0.0), 0.8));
        dets.push((rb(6000.0, 0.0, 20.0, 8.0, 0.0), 0.7));
        let m = match_detections(&dets, &gts, 0.5);
        assert_eq!((m.num_tp(), m.num_fp(), m.num_fn()), (8, 2, 2));
        let curve = precision_recall(&[m]);
        let last = curve.last().unwrap();
        assert!((last.precision - 0.8).abs() < 1e-12);
        assert!((last.recall - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_detections_precision_one() {
        let m = MatchResult {
            tp: vec![],
            iou: vec![],
            gt_matched: vec![false; 3],
            scores: vec![],
        };
        let curve = precision_recall(&[m]);
        assert_eq!(curve.len(), 1);
        assert_eq!(curve[0].precision, 1.0);
        assert_eq!(curve[0].recall, 0.0);
        assert_eq!(average_precision(&curve), 0.0);
    }

    #[test]
    fn ap_of_perfect_detector_is_one() {
        let gts: Vec<RotatedBox> = (0..5)
            .map(|i| rb(50.0 * i as f64, 0.0, 20.0, 8.0, 0.1))
            .collect();
        let dets: Vec<(RotatedBox, f64)> = gts
            .iter()
            .enumerate()
            .map(|(i, &g)| (g, 0.9 - 0.01 * i as f64))
            .collect();
        let m = match_detections(&dets, &gts, 0.5);
        let ap = average_precision(&precision_recall(&[m]));
        assert!((ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ap_of_constant_half_precision() {
        // alternating TP/FP at every recall level: precision 0.5 when
        // each TP is followed by one FP; envelope is a 0.5 rectangle at
        // the tail, with higher precision at the head
        let curve: Vec<PrPoint> = (0..100)
            .map(|i| PrPoint {
                cutoff: 1.0 - i as f64 / 100.0,
                precision: 0.5,
                recall: (i + 1) as f64 / 100.0,
            })
            .collect();
        let ap = average_precision(&curve);
        assert!((ap - 0.5).abs() < 1e-9);
    }

    #[test]
    fn ap_three_point_hand_curve() {
        // envelope: precision 1.0 up to recall 0.2, then 0.6 to 0.5,
        // then 0.4 to 0.8 → AP = .2·1 + .3·.6 + .3·.4 = 0.5
        let curve = vec![
            PrPoint { cutoff: 0.9, precision: 1.0, recall: 0.2 },
            PrPoint { cutoff: 0.5, precision: 0.6, recall: 0.5 },
            PrPoint { cutoff: 0.2, precision: 0.4, recall: 0.8 },
        ];
        let ap = average_precision(&curve);
        assert!((ap - 0.5).abs() < 1e-12, "ap {ap}");
    }

    #[test]
    fn ap_invariant_under_monotone_score_transform() {
        let gts: Vec<RotatedBox> = (0..6)
            .map(|i| rb(60.0 * i as f64, 0.0, 24.0, 8.0, 0.0))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dets: Vec<(RotatedBox, f64)> = (0..12)
            .map(|i| {
                let score = 0.9 - 0.05 * i as f64;
                if i % 2 == 0 {
                    (gts[i / 2], score)
                } else {
                    (rb(9000.0 + i as f64 * 100.0, 0.0, 24.0, 8.0, 0.0), score)
                }
            })
            .collect();
        let _ = &mut rng;
        let ap1 = average_precision(&precision_recall(&[match_detections(&dets, &gts, 0.5)]));
        let transformed: Vec<(RotatedBox, f64)> = dets
            .iter()
            .map(|&(b, s)| (b, s.powi(3) * 10.0))
            .collect();
        let ap2 =
            average_precision(&precision_recall(&[match_detections(&transformed, &gts, 0.5)]));
        assert!((ap1 - ap2).abs() < 1e-12);
    }

    #[test]
    fn lower_scored_duplicate_cannot_increase_ap() {
        let gts = vec![rb(0.0, 0.0, 30.0, 10.0, 0.0)];
        let base = vec![(gts[0], 0.9)];
        let ap_base = average_precision(&precision_recall(&[match_detections(&base, &gts, 0.5)]));
        let with_dup = vec![(gts[0], 0.9), (gts[0], 0.5)];
        let ap_dup =
            average_precision(&precision_recall(&[match_detections(&with_dup, &gts, 0.5)]));
        assert!(ap_dup <= ap_base + 1e-12);
    }

    #[test]
    fn average_recall_references() {
        let gts = vec![rb(50.0, 50.0, 40.0, 12.0, 0.3)];
        // identical proposal → recall 1 at every threshold
        let exact = vec![(vec![(gts[0], 0.9)], gts.clone())];
        assert!((average_recall(&exact, 100) - 1.0).abs() < 1e-12);

        // a proposal at IoU ≈ 0.72 clears thresholds 0.50–0.70 only
        let mut shifted = gts[0];
        let mut lo = 0.0;
        let mut hi = 10.0;
        for _ in 0..60 {
            let mid = (lo + hi) / 2.0;
            let cand = rb(50.0 + mid, 50.0, 40.0, 12.0, 0.3);
            if rotated_iou(&cand, &gts[0]) > 0.72 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        shifted.cx += lo;
        let iou = rotated_iou(&shifted, &gts[0]);
        assert!((iou - 0.72).abs() < 1e-3, "tuned iou {iou}");
        let near = vec![(vec![(shifted, 0.9)], gts.clone())];
        let ar = average_recall(&near, 100);
        assert!((ar - 0.5).abs() < 1e-9, "ar {ar}");
    }

    #[test]
    fn average_recall_monotone_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gts: Vec<RotatedBox> = (0..5)
            .map(|i| rb(80.0 * i as f64, 40.0, 40.0, 12.0, rng.gen_range(-1.0..1.0)))
            .collect();
        let proposals: Vec<(RotatedBox, f64)> = (0..40)
            .map(|i| {
                let g = gts[i % gts.len()];
                (
                    rb(
                        g.cx + rng.gen_range(-8.0..8.0),
                        g.cy + rng.gen_range(-8.0..8.0),
                        g.w * rng.gen_range(0.8..1.2),
                        g.h * rng.gen_range(0.8..1.2),
                        g.theta + rng.gen_range(-0.15..0.15),
                    ),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        let data = vec![(proposals, gts)];
        let mut prev = 0.0;
        for k in [1, 5, 10, 20, 40] {
            let ar = average_recall(&data, k);
            assert!(ar >= prev - 1e-12, "AR must not decrease in K");
            prev = ar;
        }
    }

    #[test]
    fn mean_positive_iou_reference() {
        let gts = vec![rb(0.0, 0.0, 40.0, 10.0, 0.0)];
        // craft proposals with best IoU 0.6, 0.8, and one below 0.5
        let make_iou = |target: f64| -> RotatedBox {
            let mut lo = 0.0;
            let mut hi = 20.0;
            for _ in 0..60 {
                let mid = (lo + hi) / 2.0;
                let cand = rb(mid, 0.0, 40.0, 10.0, 0.0);
                if rotated_iou(&cand, &gts[0]) > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            rb(lo, 0.0, 40.0, 10.0, 0.0)
        };
        let p6 = make_iou(0.6);
        let p8 = make_iou(0.8);
        let far = rb(500.0, 0.0, 40.0, 10.0, 0.0);
        let data = vec![(vec![(p6, 0.9), (p8, 0.8), (far, 0.7)], gts.clone())];
        let m = mean_positive_iou(&data).unwrap();
        assert!((m - 0.7).abs() < 2e-3, "mean {m}");
        assert!(m > 0.5 && m <= 1.0);

        let none = vec![(vec![(far, 0.9)], gts)];
        assert!(mean_positive_iou(&none).is_none());
    }

    #[test]
    fn csv_and_svg_emission() {
        let curve = vec![
            PrPoint { cutoff: 0.9, precision: 1.0, recall: 0.5 },
            PrPoint { cutoff: 0.4, precision: 0.75, recall: 1.0 },
        ];
        let csv = pr_curve_csv(&curve);
        assert!(csv.starts_with("cutoff,precision,recall\n"));
        assert_eq!(csv.lines().count(), 3);
        let svg = pr_curve_svg(&curve);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("recall"));
    }
}
