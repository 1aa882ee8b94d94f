//! Training losses: smooth-L1 regression, focal-modulated binary
//! classification, and the multi-task composition used by both the
//! proposal stage and the detection head.

use crate::real::Real;
use serde::Serialize;

/// Probabilities are clamped to `[CLAMP, 1-CLAMP]` before the log.
pub const CLAMP: f64 = 1e-7;

/// `0.5·x²` for `|x| < 1`, `|x| − 0.5` otherwise.
pub fn smooth_l1<T: Real>(x: T) -> T {
    let one = T::one();
    let half = T::from_f64(0.5);
    if x.abs() < one {
        half * x * x
    } else {
        x.abs() - half
    }
}

/// Derivative of [`smooth_l1`]: `x` inside the unit interval, `±1`
/// outside (continuous at ±1).
pub fn smooth_l1_grad<T: Real>(x: T) -> T {
    let one = T::one();
    if x.abs() < one {
        x
    } else if x > T::zero() {
        one
    } else {
        -one
    }
}

/// Focal-modulated binary cross-entropy `−(1−p̂)^γ·ln(p̂)` where `p̂` is
/// the probability assigned to the true label. `gamma = 0` reduces to
/// plain cross-entropy.
pub fn focal_cls_loss<T: Real>(p: T, positive: bool, gamma: f64) -> T {
    let (l, _) = focal_cls_loss_grad(p, positive, gamma);
    l
}

/// [`focal_cls_loss`] together with its derivative w.r.t. `p`.
/// The derivative is zero in the clamped saturation zone.
pub fn focal_cls_loss_grad<T: Real>(p: T, positive: bool, gamma: f64) -> (T, T) {
    let pf = p.as_f64();
    let clamped = !(CLAMP..=1.0 - CLAMP).contains(&pf);
    let pf = pf.clamp(CLAMP, 1.0 - CLAMP);
    let p_hat = if positive { pf } else { 1.0 - pf };
    let loss = -(1.0 - p_hat).powf(gamma) * p_hat.ln();
    if clamped {
        return (T::from_f64(loss), T::zero());
    }
    // d/dp̂ [−(1−p̂)^γ ln p̂] = γ(1−p̂)^(γ−1) ln p̂ − (1−p̂)^γ / p̂
    let d_hat = if gamma == 0.0 {
        -1.0 / p_hat
    } else {
        gamma * (1.0 - p_hat).powf(gamma - 1.0) * p_hat.ln() - (1.0 - p_hat).powf(gamma) / p_hat
    };
    let dp = if positive { d_hat } else { -d_hat };
    (T::from_f64(loss), T::from_f64(dp))
}

/// Per-term loss breakdown and the sample counts that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct LossReport {
    pub cls: f64,
    pub reg1: f64,
    pub reg2: f64,
    pub total: f64,
    pub num_pos: usize,
    pub num_neg: usize,
}

impl LossReport {
    pub fn merged(&self, other: &LossReport) -> LossReport {
        LossReport {
            cls: self.cls + other.cls,
            reg1: self.reg1 + other.reg1,
            reg2: self.reg2 + other.reg2,
            total: self.total + other.total,
            num_pos: self.num_pos + other.num_pos,
            num_neg: self.num_neg + other.num_neg,
        }
    }
}

/// One sampled classification/regression unit: an oriented anchor in
/// the proposal stage, or a proposal in the detection head (where the
/// two enable flags coincide with the label).
#[derive(Debug, Clone, Copy)]
pub struct LossSample<T> {
    /// Predicted probability for the unit, already in (0, 1).
    pub score: T,
    /// Combined ground-truth label (drives the classification term).
    pub positive: bool,
    /// Box-regression enable (agnostic-anchor label p₁*).
    pub reg_box: bool,
    /// Angle-regression enable (orientation label p₂*, conjoined with p₁*).
    pub reg_theta: bool,
    pub t_pred: [T; 4],
    pub t_target: [T; 4],
    pub t_theta_pred: T,
    pub t_theta_target: T,
}

impl<T: Real> LossSample<T> {
    /// Classification-only sample (negatives, or images without boxes).
    pub fn negative(score: T) -> Self {
        LossSample {
            score,
            positive: false,
            reg_box: false,
            reg_theta: false,
            t_pred: [T::zero(); 4],
            t_target: [T::zero(); 4],
            t_theta_pred: T::zero(),
            t_theta_target: T::zero(),
        }
    }
}

/// Gradient of the composite loss w.r.t. one sample's head outputs.
#[derive(Debug, Clone, Copy)]
pub struct LossSampleGrad<T> {
    pub d_score: T,
    pub d_t: [T; 4],
    pub d_t_theta: T,
}

/// Multi-task loss over a sampled minibatch:
///
/// `L = mean(L_cls) + λ·(Σ reg_box L_reg1 / N₁ + Σ reg_box·reg_theta L_reg2 / N₂)`
///
/// The classification term is averaged over all samples; each
/// regression term is normalized by its own enabled count. Disabled
/// units contribute no regression loss regardless of their offsets.
pub fn composite_loss<T: Real>(
    samples: &[LossSample<T>],
    lambda: f64,
    gamma: f64,
) -> (LossReport, Vec<LossSampleGrad<T>>) {
    let n = samples.len();
    let mut grads = Vec::with_capacity(n);
    if n == 0 {
        return (LossReport::default(), grads);
    }
    let n_reg1 = samples.iter().filter(|s| s.reg_box).count();
    let n_reg2 = samples
        .iter()
        .filter(|s| s.reg_box && s.reg_theta)
        .count();
    let mut cls_sum = 0.0;
    let mut reg1_sum = 0.0;
    let mut reg2_sum = 0.0;
    let cls_w = 1.0 / n as f64;
    let reg1_w = if n_reg1 > 0 {
        lambda / n_reg1 as f64
    } else {
        0.0
    };
    let reg2_w = if n_reg2 > 0 {
        lambda / n_reg2 as f64
    } else {
        0.0
    };
    for s in samples {
        let (l_cls, d_cls) = focal_cls_loss_grad(s.score, s.positive, gamma);
        cls_sum += l_cls.as_f64();
        let mut g = LossSampleGrad {
            d_score: T::from_f64(cls_w) * d_cls,
            d_t: [T::zero(); 4],
            d_t_theta: T::zero(),
        };
        if s.reg_box {
            for i in 0..4 {
                let diff = s.t_target[i] - s.t_pred[i];
                reg1_sum += smooth_l1(diff).as_f64();
                // d/dt_pred smooth_l1(t* − t) = −smooth_l1'(t* − t)
                g.d_t[i] = -T::from_f64(reg1_w) * smooth_l1_grad(diff);
            }
            if s.reg_theta {
                let diff = s.t_theta_target - s.t_theta_pred;
                reg2_sum += smooth_l1(diff).as_f64();
                g.d_t_theta = -T::from_f64(reg2_w) * smooth_l1_grad(diff);
            }
        }
        grads.push(g);
    }
    let cls = cls_sum * cls_w;
    let reg1 = if n_reg1 > 0 {
        reg1_sum / n_reg1 as f64
    } else {
        0.0
    };
    let reg2 = if n_reg2 > 0 {
        reg2_sum / n_reg2 as f64
    } else {
        0.0
    };
    let num_pos = samples.iter().filter(|s| s.positive).count();
    let report = LossReport {
        cls,
        reg1,
        reg2,
        total: cls + lambda * (reg1 + reg2),
        num_pos,
        num_neg: n - num_pos,
    };
    (report, grads)
}

/// Proposal-stage multi-task loss (λ = 1, γ = 2 by default upstream).
pub fn rpn_loss<T: Real>(
    samples: &[LossSample<T>],
    lambda: f64,
    gamma: f64,
) -> (LossReport, Vec<LossSampleGrad<T>>) {
    composite_loss(samples, lambda, gamma)
}

/// Detection-head loss: same family, applied to second-stage outputs
/// where both regression enables equal the proposal's label.
pub fn detection_head_loss<T: Real>(
    samples: &[LossSample<T>],
    lambda: f64,
    gamma: f64,
) -> (LossReport, Vec<LossSampleGrad<T>>) {
    composite_loss(samples, lambda, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0f64), 0.0);
        assert_eq!(smooth_l1(0.5f64), 0.125);
        assert_eq!(smooth_l1(2.0f64), 1.5);
        assert_eq!(smooth_l1(-2.0f64), 1.5);
    }

    #[test]
    fn smooth_l1_derivative_continuous_at_one() {
        let eps = 1e-9;
        assert!((smooth_l1_grad(1.0 - eps) - 1.0f64).abs() < 1e-8);
        assert_eq!(smooth_l1_grad(1.0f64), 1.0);
        assert_eq!(smooth_l1_grad(-1.0f64), -1.0);
    }

    #[test]
    fn smooth_l1_even_and_convex() {
        for i in 0..50 {
            let x = -2.5 + i as f64 * 0.1;
            assert!((smooth_l1(x) - smooth_l1(-x)).abs() < 1e-15);
        }
        // convexity via midpoints
        for i in 0..20 {
            let a = -2.0 + i as f64 * 0.2;
            let b = a + 1.3;
            let mid = smooth_l1((a + b) / 2.0);
            assert!(mid <= (smooth_l1(a) + smooth_l1(b)) / 2.0 + 1e-12);
        }
    }

    #[test]
    fn focal_loss_reference_values() {
        // p = 0.5, positive, γ = 2 → 0.25·ln 2
        let v = focal_cls_loss(0.5f64, true, 2.0);
        assert!((v - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((v - 0.17329).abs() < 1e-5);

        // perfectly classified positive ≈ 0
        assert!(focal_cls_loss(1.0 - 1e-7, true, 2.0) < 1e-12);

        // γ = 0 is plain cross-entropy
        let p = 0.3f64;
        assert!((focal_cls_loss(p, true, 0.0) - (-p.ln())).abs() < 1e-12);
        assert!((focal_cls_loss(p, false, 0.0) - (-(1.0 - p).ln())).abs() < 1e-12);
    }

    #[test]
    fn focal_loss_nonnegative_and_decreasing_in_phat() {
        let mut prev = f64::INFINITY;
        for i in 1..100 {
            let p = i as f64 / 100.0;
            let l = focal_cls_loss(p, true, 2.0);
            assert!(l >= 0.0);
            assert!(l < prev, "not strictly decreasing at p={p}");
            prev = l;
        }
    }

    #[test]
    fn focal_grad_matches_finite_difference() {
        for (p, pos, gamma) in [
            (0.3, true, 2.0),
            (0.7, false, 2.0),
            (0.5, true, 0.0),
            (0.9, true, 2.0),
            (0.1, false, 0.0),
        ] {
            let (_, d) = focal_cls_loss_grad(p, pos, gamma);
            let mut f = |x: &[f64]| focal_cls_loss(x[0], pos, gamma);
            let mut xs = [p];
            let num = gradcheck::central_diff(&mut f, &mut xs, 0, 1e-6);
            assert!(
                gradcheck::relative_error(d, num) < 1e-6,
                "p={p} pos={pos} γ={gamma}: {d} vs {num}"
            );
        }
    }

    fn sample(
        score: f64,
        positive: bool,
        reg_box: bool,
        reg_theta: bool,
        t_pred: [f64; 4],
        t_target: [f64; 4],
        th_pred: f64,
        th_target: f64,
    ) -> LossSample<f64> {
        LossSample {
            score,
            positive,
            reg_box,
            reg_theta,
            t_pred,
            t_target,
            t_theta_pred: th_pred,
            t_theta_target: th_target,
        }
    }

    #[test]
    fn perfect_predictions_give_near_zero_total() {
        let s = sample(
            1.0 - 1e-7,
            true,
            true,
            true,
            [0.1, 0.2, -0.3, 0.0],
            [0.1, 0.2, -0.3, 0.0],
            0.4,
            0.4,
        );
        let (report, _) = rpn_loss(&[s, LossSample::negative(1e-7)], 1.0, 2.0);
        assert!(report.total < 1e-10, "{report:?}");
    }

    #[test]
    fn negative_anchor_contributes_no_regression() {
        let mut neg = LossSample::negative(0.4);
        neg.t_pred = [10.0, -10.0, 3.0, 3.0]; // garbage offsets must not matter
        let (with_garbage, grads) = rpn_loss(&[neg], 1.0, 2.0);
        assert_eq!(with_garbage.reg1, 0.0);
        assert_eq!(with_garbage.reg2, 0.0);
        assert!(grads[0].d_t.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn three_anchor_batch_matches_hand_evaluation() {
        // Hand-evaluated composite: one full positive, one box-only
        // anchor, one negative.
        let a = sample(0.8, true, true, true, [0.0; 4], [0.2, 0.0, 0.0, 0.0], 0.1, 0.5);
        let b = sample(0.3, false, true, false, [0.5, 0.0, 0.0, 0.0], [0.0; 4], 0.0, 0.0);
        let c = LossSample::negative(0.2);
        let (report, _) = rpn_loss(&[a, b, c], 1.0, 2.0);

        let cls_a = -(1.0f64 - 0.8).powi(2) * 0.8f64.ln();
        let cls_b = -(0.3f64).powi(2) * 0.7f64.ln();
        let cls_c = -(0.2f64).powi(2) * 0.8f64.ln();
        let cls = (cls_a + cls_b + cls_c) / 3.0;
        let reg1 = (0.5 * 0.2f64.powi(2) + 0.5 * 0.5f64.powi(2)) / 2.0;
        let reg2 = 0.5 * 0.4f64.powi(2) / 1.0;
        assert!((report.cls - cls).abs() < 1e-12);
        assert!((report.reg1 - reg1).abs() < 1e-12);
        assert!((report.reg2 - reg2).abs() < 1e-12);
        assert!((report.total - (cls + reg1 + reg2)).abs() < 1e-12);
        assert_eq!((report.num_pos, report.num_neg), (1, 2));
    }

    #[test]
    fn zero_positives_is_cls_only() {
        let (report, _) = rpn_loss(&[LossSample::negative(0.6f64)], 1.0, 2.0);
        assert_eq!(report.reg1, 0.0);
        assert_eq!(report.reg2, 0.0);
        assert!(report.total > 0.0);
        assert_eq!(report.total, report.cls);
    }

    #[test]
    fn composite_grads_match_finite_differences() {
        // pack the variable head outputs of two samples in a flat vector
        let build = |x: &[f64]| {
            vec![
                sample(x[0], true, true, true, [x[1], x[2], x[3], x[4]], [0.3, -0.2, 0.1, 0.0], x[5], 0.3),
                sample(x[6], false, true, false, [x[7], 0.0, 0.0, 0.0], [0.0; 4], 0.0, 0.0),
            ]
        };
        let mut x = vec![0.6, 0.1, -0.4, 1.6, 0.0, -0.2, 0.35, 0.9];
        let analytic: Vec<f64> = {
            let (_, g) = composite_loss(&build(&x), 1.0, 2.0);
            vec![
                g[0].d_score, g[0].d_t[0], g[0].d_t[1], g[0].d_t[2], g[0].d_t[3],
                g[0].d_t_theta, g[1].d_score, g[1].d_t[0],
            ]
        };
        let mut f = |x: &[f64]| composite_loss(&build(x), 1.0, 2.0).0.total;
        let idx: Vec<usize> = (0..x.len()).collect();
        let worst = gradcheck::max_rel_error(&mut f, &mut x, &analytic, &idx, 1e-6);
        assert!(worst < 1e-6, "worst rel err {worst}");
    }
}
