//! End-to-end detector: configurable convolutional backbone, the ARF
//! feature stack, the proposal network (dual-branch or single-branch
//! baseline), level smoothing, ring-like adaptive pooling, and the
//! fully-connected refinement heads — with a joint forward/backward
//! pass over both stages and Adam updates.

use crate::arf;
use crate::checkpoint;
use crate::config::{DetectorConfig, PoolingMode, RpnMode};
use crate::error::{Error, Result};
use crate::geometry::{self, RotatedBox};
use crate::layers::{ArfLayer, ConvLayer, FcLayer, Init};
use crate::losses::{self, LossReport, LossSample, LossSampleGrad};
use crate::mlap::{self, Arrangement, LevelSet, LevelSmoother, RingPattern, RingSample, SmootherCache};
use crate::ops;
use crate::real::Real;
use crate::rpn::{
    self, AgnosticAssignment, AnchorGrid, AnchorSpec, OrientationSet, OrientedLabel, Proposal,
    RpnHeadOutputs, RpnHeads, RpnHeadsCache,
};
use crate::tensor::{AdamParams, Param, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

/// A final, post-NMS detection.
#[derive(Debug, Clone, Copy)]
pub struct Detection {
    pub box_: RotatedBox,
    pub score: f64,
}

/// Loss breakdown of one training step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct StepReport {
    pub rpn: LossReport,
    pub det: LossReport,
    pub total: f64,
}

/// Backbone: a chain of stride-2 stem convolutions down to the first
/// level, then one convolution block per level (stride 2 between
/// levels). The top level always sits at stride 16.
#[derive(Debug, Clone)]
struct Backbone<T> {
    convs: Vec<ConvLayer<T>>,
    emits_level: Vec<bool>,
}

struct BackboneCache<T> {
    inputs: Vec<Tensor4<T>>,
    pre: Vec<Tensor4<T>>,
}

impl<T: Real> Backbone<T> {
    fn new(cfg: &DetectorConfig, init: Init, rng: &mut impl Rng) -> Self {
        let widths = &cfg.backbone_widths;
        let levels = widths.len();
        let stem_count = 5 - levels; // first level stride = 2^stem_count
        let mut convs = Vec::new();
        let mut emits_level = Vec::new();
        let mut in_ch = 3;
        for _ in 0..stem_count {
            convs.push(ConvLayer::new(in_ch, widths[0], 3, 2, 1, init, rng));
            emits_level.push(false);
            in_ch = widths[0];
        }
        for (i, &w) in widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            convs.push(ConvLayer::new(in_ch, w, 3, stride, 1, init, rng));
            emits_level.push(true);
            in_ch = w;
        }
        Backbone { convs, emits_level }
    }

    fn forward(&self, image: &Tensor4<T>) -> Result<(Vec<Tensor4<T>>, BackboneCache<T>)> {
        let [_, _, h, w] = image.shape();
        if h < 16 || w < 16 {
            return Err(Error::InvalidArgument(format!(
                "image {h}x{w} smaller than the top stride (16)"
            )));
        }
        let mut cache = BackboneCache {
            inputs: Vec::with_capacity(self.convs.len()),
            pre: Vec::with_capacity(self.convs.len()),
        };
        let mut levels = Vec::new();
        let mut x = image.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let pre = conv.forward(&x)?;
            let act = ops::relu(&pre);
            cache.inputs.push(x);
            cache.pre.push(pre);
            if self.emits_level[i] {
                levels.push(act.clone());
            }
            x = act;
        }
        Ok((levels, cache))
    }

    /// `grad_levels` holds one gradient per emitted level (zeros allowed).
    fn backward(&mut self, cache: &BackboneCache<T>, grad_levels: &[Tensor4<T>]) -> Result<()> {
        let mut level_idx = grad_levels.len();
        let mut g: Option<Tensor4<T>> = None;
        for i in (0..self.convs.len()).rev() {
            let mut g_act = match g.take() {
                Some(g) => g,
                None => Tensor4::zeros([
                    cache.pre[i].shape()[0],
                    cache.pre[i].shape()[1],
                    cache.pre[i].shape()[2],
                    cache.pre[i].shape()[3],
                ]),
            };
            if self.emits_level[i] {
                level_idx -= 1;
                for (d, s) in g_act
                    .data_mut()
                    .iter_mut()
                    .zip(grad_levels[level_idx].data())
                {
                    *d += *s;
                }
            }
            let g_pre = ops::relu_backward(&cache.pre[i], &g_act);
            g = Some(self.convs[i].backward(&cache.inputs[i], &g_pre)?);
        }
        Ok(())
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        self.convs
            .iter_mut()
            .enumerate()
            .flat_map(|(i, c)| {
                let (w, b) = (&mut c.weights, &mut c.bias);
                vec![
                    (format!("backbone.conv{i}.weight"), w),
                    (format!("backbone.conv{i}.bias"), b),
                ]
                .into_iter()
                .map(move |x| x)
            })
            .collect::<Vec<_>>()
    }
}

/// Single-regression baseline heads: one rotation-sensitive trunk, all
/// five offsets per oriented anchor from one regression output
/// (`A·K·5` channels) plus `A·K` classification scores.
#[derive(Debug, Clone)]
struct SingleHeads<T> {
    trunk: ConvLayer<T>,
    head_reg: ConvLayer<T>,
    head_cls: ConvLayer<T>,
}

struct SingleCache<T> {
    input: Tensor4<T>,
    pre: Tensor4<T>,
    act: Tensor4<T>,
    cls_prob: Tensor4<T>,
}

struct SingleOutputs<T> {
    cls: Tensor4<T>,
    reg: Tensor4<T>,
}

impl<T: Real> SingleHeads<T> {
    fn new(
        in_ch: usize,
        hidden: usize,
        anchors_per_loc: usize,
        orientations: usize,
        trunk_init: Init,
        head_init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        SingleHeads {
            trunk: ConvLayer::new(in_ch, hidden, 3, 1, 1, trunk_init, rng),
            head_reg: ConvLayer::new(
                hidden,
                anchors_per_loc * orientations * 5,
                1,
                1,
                0,
                head_init,
                rng,
            ),
            head_cls: ConvLayer::new(
                hidden,
                anchors_per_loc * orientations,
                1,
                1,
                0,
                head_init,
                rng,
            ),
        }
    }

    fn forward(&self, features: &Tensor4<T>) -> Result<(SingleOutputs<T>, SingleCache<T>)> {
        let pre = self.trunk.forward(features)?;
        let act = ops::relu(&pre);
        let reg = self.head_reg.forward(&act)?;
        let cls_logit = self.head_cls.forward(&act)?;
        let cls_prob = ops::sigmoid(&cls_logit);
        Ok((
            SingleOutputs {
                cls: cls_prob.clone(),
                reg,
            },
            SingleCache {
                input: features.clone(),
                pre,
                act,
                cls_prob,
            },
        ))
    }

    fn backward(
        &mut self,
        cache: &SingleCache<T>,
        g_cls: &Tensor4<T>,
        g_reg: &Tensor4<T>,
    ) -> Result<Tensor4<T>> {
        let g_logit = ops::sigmoid_backward(&cache.cls_prob, g_cls);
        let mut g_act = self.head_cls.backward(&cache.act, &g_logit)?;
        let g2 = self.head_reg.backward(&cache.act, g_reg)?;
        for (d, s) in g_act.data_mut().iter_mut().zip(g2.data()) {
            *d += *s;
        }
        let g_pre = ops::relu_backward(&cache.pre, &g_act);
        self.trunk.backward(&cache.input, &g_pre)
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out: Vec<(String, &mut Param<T>)> = Vec::new();
        out.push(("rpn.single.trunk.weight".into(), &mut self.trunk.weights));
        out.push(("rpn.single.trunk.bias".into(), &mut self.trunk.bias));
        out.push(("rpn.single.reg.weight".into(), &mut self.head_reg.weights));
        out.push(("rpn.single.reg.bias".into(), &mut self.head_reg.bias));
        out.push(("rpn.single.cls.weight".into(), &mut self.head_cls.weights));
        out.push(("rpn.single.cls.bias".into(), &mut self.head_cls.bias));
        out
    }
}

#[derive(Debug, Clone)]
enum RpnVariant<T> {
    Dual(RpnHeads<T>),
    Single(SingleHeads<T>),
}

enum RpnForward<T> {
    Dual {
        cache: RpnHeadsCache<T>,
        prepool_shape: [usize; 4],
        argmax: Vec<u8>,
    },
    Single {
        cache: SingleCache<T>,
    },
}

/// Per-roi second-stage activations and loss gradients.
struct RoiForward<T> {
    pattern: RingPattern,
    pooled: Tensor4<T>,
    fc1_pre: Vec<T>,
    fc1_act: Vec<T>,
    fc2_pre: Vec<T>,
    fc2_act: Vec<T>,
    cls_prob: T,
    grad: LossSampleGrad<T>,
}

/// Everything one image's forward pass keeps for the backward pass.
struct ImageForward<T> {
    bb_cache: BackboneCache<T>,
    level_shapes: Vec<[usize; 4]>,
    arf_inputs: Vec<Tensor4<T>>,
    arf_pre: Vec<Tensor4<T>>,
    rpn_fwd: RpnForward<T>,
    rpn_grad_cls: Tensor4<T>,
    rpn_grad_reg_a: Tensor4<T>,
    rpn_grad_reg_t: Tensor4<T>,
    smoother_cache: SmootherCache<T>,
    level_set: LevelSet<T>,
    rois: Vec<RoiForward<T>>,
}

/// Full state of a training forward pass (both images of a batch).
pub struct TrainForward<T> {
    images: Vec<ImageForward<T>>,
    pub report: StepReport,
}

#[derive(Debug, Clone)]
pub struct Detector<T: Real> {
    pub cfg: DetectorConfig,
    pub orients: OrientationSet,
    anchor_spec: AnchorSpec,
    backbone: Backbone<T>,
    arf_stack: Vec<ArfLayer<T>>,
    rpn: RpnVariant<T>,
    smoother: LevelSmoother<T>,
    fc1: FcLayer<T>,
    fc2: FcLayer<T>,
    det_cls: FcLayer<T>,
    det_reg: FcLayer<T>,
    global_step: u64,
}

impl<T: Real> Detector<T> {
    pub fn new(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let trunk_init = if cfg.he_backbone_init {
            Init::HeNormal
        } else {
            Init::Gaussian(cfg.head_init_sigma)
        };
        let head_init = Init::Gaussian(cfg.head_init_sigma);

        let backbone = Backbone::new(&cfg, trunk_init, &mut rng);
        let top_ch = *cfg.backbone_widths.last().unwrap();
        let mut arf_stack = Vec::new();
        let mut in_ch = top_ch;
        for _ in 0..cfg.arf_layers {
            let layer = ArfLayer::new(
                in_ch,
                cfg.arf_filters,
                3,
                cfg.arf_orientations,
                trunk_init,
                &mut rng,
            );
            in_ch = layer.out_channels();
            arf_stack.push(layer);
        }
        let prepool_ch = in_ch;
        let pooled_ch = cfg.arf_filters;
        let a_per = cfg.anchors_per_location();
        let rpn = match cfg.rpn_mode {
            RpnMode::Dual => RpnVariant::Dual(RpnHeads::new(
                pooled_ch,
                prepool_ch,
                cfg.rpn_hidden,
                a_per,
                cfg.orientation_bins,
                trunk_init,
                head_init,
                &mut rng,
            )),
            RpnMode::Single => RpnVariant::Single(SingleHeads::new(
                prepool_ch,
                cfg.rpn_hidden,
                a_per,
                cfg.orientation_bins,
                trunk_init,
                head_init,
                &mut rng,
            )),
        };

        let level_strides = cfg.level_strides();
        let used = cfg.pool_levels;
        let total = cfg.backbone_widths.len();
        let raw_channels: Vec<usize> = cfg.backbone_widths[total - used..].to_vec();
        let raw_strides: Vec<f64> = level_strides[total - used..].to_vec();
        let smoother = LevelSmoother::new(
            &raw_channels,
            &raw_strides,
            cfg.pool_lateral_channels,
            cfg.pool_channels,
            trunk_init,
            &mut rng,
        )?;

        let pool_c = match cfg.pool_arrangement {
            Arrangement::ChannelConcat => cfg.pool_channels * used,
            _ => cfg.pool_channels,
        };
        let flat = pool_c * cfg.pool_out_size * cfg.pool_out_size;
        let fc1 = FcLayer::new(flat, cfg.fc_dim, trunk_init, &mut rng);
        let fc2 = FcLayer::new(cfg.fc_dim, cfg.fc_dim, trunk_init, &mut rng);
        let det_cls = FcLayer::new(cfg.fc_dim, 1, head_init, &mut rng);
        let det_reg = FcLayer::new(cfg.fc_dim, 5, head_init, &mut rng);

        Ok(Detector {
            orients: OrientationSet::with_bins(cfg.orientation_bins),
            anchor_spec: AnchorSpec {
                scales: cfg.anchor_scales.clone(),
                ratios: cfg.anchor_ratios.clone(),
            },
            cfg,
            backbone,
            arf_stack,
            rpn,
            smoother,
            fc1,
            fc2,
            det_cls,
            det_reg,
            global_step: 0,
        })
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    /// Named mutable access to every trainable parameter.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = self.backbone.params_mut();
        for (i, l) in self.arf_stack.iter_mut().enumerate() {
            out.push((format!("arf.{i}.base"), &mut l.base));
        }
        match &mut self.rpn {
            RpnVariant::Dual(h) => {
                let names = [
                    "rpn.trunk_agnostic",
                    "rpn.trunk_oriented",
                    "rpn.reg_agnostic",
                    "rpn.reg_theta",
                    "rpn.cls",
                ];
                for (layer, name) in [
                    &mut h.trunk_agnostic,
                    &mut h.trunk_oriented,
                    &mut h.head_reg_agnostic,
                    &mut h.head_reg_theta,
                    &mut h.head_cls,
                ]
                .into_iter()
                .zip(names)
                {
                    out.push((format!("{name}.weight"), &mut layer.weights));
                    out.push((format!("{name}.bias"), &mut layer.bias));
                }
            }
            RpnVariant::Single(h) => out.extend(h.params_mut()),
        }
        for (i, p) in self.smoother.params_mut().into_iter().enumerate() {
            out.push((format!("smooth.{i}"), p));
        }
        for (layer, name) in [
            (&mut self.fc1, "head.fc1"),
            (&mut self.fc2, "head.fc2"),
            (&mut self.det_cls, "head.cls"),
            (&mut self.det_reg, "head.reg"),
        ] {
            out.push((format!("{name}.weight"), &mut layer.weights));
            out.push((format!("{name}.bias"), &mut layer.bias));
        }
        out
    }

    pub fn param_count(&mut self) -> usize {
        self.named_params_mut()
            .iter()
            .map(|(_, p)| p.value.len())
            .sum()
    }

    fn zero_grads(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    /// Shared feature extraction: backbone levels, ARF stack outputs
    /// (rotation-sensitive pre-pool map and rotation-invariant pooled
    /// map), and the caches for backward.
    #[allow(clippy::type_complexity)]
    fn features(
        &self,
        image: &Tensor4<T>,
    ) -> Result<(
        Vec<Tensor4<T>>,
        BackboneCache<T>,
        Vec<Tensor4<T>>,
        Vec<Tensor4<T>>,
        Tensor4<T>,
        Tensor4<T>,
        Vec<u8>,
    )> {
        let (levels, bb_cache) = self.backbone.forward(image)?;
        let mut arf_inputs = Vec::new();
        let mut arf_pre = Vec::new();
        let mut x = levels.last().unwrap().clone();
        for layer in &self.arf_stack {
            let pre = layer.forward(&x)?;
            let act = ops::relu(&pre);
            arf_inputs.push(x);
            arf_pre.push(pre);
            x = act;
        }
        let prepool = x;
        let (pooled, argmax) = arf::orientation_pool(&prepool, self.cfg.arf_orientations)?;
        Ok((levels, bb_cache, arf_inputs, arf_pre, prepool, pooled, argmax))
    }

    fn anchor_grid(&self, feature_h: usize, feature_w: usize) -> AnchorGrid {
        rpn::generate_anchors(feature_h, feature_w, 16.0, &self.anchor_spec)
    }

    /// Proposals for one image under the given caps (no gradients).
    pub fn propose(&self, image: &Tensor4<T>, training_caps: bool) -> Result<Vec<Proposal>> {
        let (_, _, _, _, prepool, pooled, _) = self.features(image)?;
        let grid = self.anchor_grid(prepool.height(), prepool.width());
        let (pre_cap, cap) = if training_caps {
            (self.cfg.rpn_train_pre_nms, self.cfg.rpn_train_cap)
        } else {
            (self.cfg.rpn_test_pre_nms, self.cfg.rpn_test_cap)
        };
        match &self.rpn {
            RpnVariant::Dual(heads) => {
                let (outputs, _) = heads.forward(&pooled, &prepool)?;
                Ok(rpn::generate_proposals(
                    &outputs,
                    0,
                    &grid,
                    &self.orients,
                    self.cfg.rpn_nms_threshold,
                    pre_cap,
                    cap,
                ))
            }
            RpnVariant::Single(heads) => {
                let (outputs, _) = heads.forward(&prepool)?;
                Ok(self.single_proposals(&outputs, &grid, pre_cap, cap))
            }
        }
    }

    fn single_proposals(
        &self,
        outputs: &SingleOutputs<T>,
        grid: &AnchorGrid,
        pre_cap: usize,
        cap: usize,
    ) -> Vec<Proposal> {
        let k = self.orients.len();
        let mut candidates = Vec::with_capacity(grid.len() * k);
        for ai in 0..grid.len() {
            let (row, col, slot) = grid.place(ai);
            for j in 0..k {
                let ch = (slot * k + j) * 5;
                let t = [
                    outputs.reg.at(0, ch, row, col).as_f64(),
                    outputs.reg.at(0, ch + 1, row, col).as_f64(),
                    outputs.reg.at(0, ch + 2, row, col).as_f64(),
                    outputs.reg.at(0, ch + 3, row, col).as_f64(),
                ];
                let tt = outputs.reg.at(0, ch + 4, row, col).as_f64();
                let score = outputs.cls.at(0, slot * k + j, row, col).as_f64();
                candidates.push(Proposal {
                    box_: rpn::decode_offsets(&grid.anchors[ai], self.orients.thetas[j], t, tt),
                    score,
                    anchor: ai,
                    orientation: j,
                });
            }
        }
        candidates.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        candidates.truncate(pre_cap);
        let scored: Vec<(RotatedBox, f64)> =
            candidates.iter().map(|p| (p.box_, p.score)).collect();
        geometry::rotated_nms(&scored, self.cfg.rpn_nms_threshold)
            .into_iter()
            .take(cap)
            .map(|i| candidates[i])
            .collect()
    }

    /// Joint forward over both stages for a training batch. Loss
    /// gradients w.r.t. head outputs are computed and stored; parameter
    /// state is untouched.
    pub fn train_forward(
        &self,
        batch: &[(Tensor4<T>, Vec<RotatedBox>)],
        step: u64,
    ) -> Result<TrainForward<T>> {
        let mut images = Vec::with_capacity(batch.len());
        let mut rpn_report = LossReport::default();
        let mut det_report = LossReport::default();
        for (img_idx, (image, gts)) in batch.iter().enumerate() {
            let mut rng_anchor = self.step_rng(step, 1000 + img_idx as u64);
            let mut rng_roi = self.step_rng(step, 2000 + img_idx as u64);

            let (levels, bb_cache, arf_inputs, arf_pre, prepool, pooled, argmax) =
                self.features(image)?;
            let grid = self.anchor_grid(prepool.height(), prepool.width());

            // proposal-stage loss + per-output gradients
            let (rpn_fwd, r_report, g_cls, g_reg_a, g_reg_t, proposals) = match &self.rpn {
                RpnVariant::Dual(heads) => {
                    let (outputs, cache) = heads.forward(&pooled, &prepool)?;
                    let assignment = rpn::assign_agnostic_labels(&grid.anchors, gts);
                    let labels = rpn::assign_oriented_labels(&assignment, gts, &self.orients);
                    let sampled = rpn::sample_minibatch(
                        &labels,
                        self.cfg.anchor_batch,
                        self.cfg.anchor_fg_fraction,
                        &mut rng_anchor,
                    );
                    let (samples, places) = self.build_rpn_samples(
                        &outputs,
                        &grid,
                        &assignment,
                        &labels,
                        gts,
                        &sampled,
                    )?;
                    let (report, grads) =
                        losses::rpn_loss(&samples, self.cfg.loss_lambda, self.cfg.focal_gamma);
                    let (g_cls, g_reg_a, g_reg_t) =
                        self.scatter_rpn_grads(&outputs, &places, &grads);
                    let proposals = rpn::generate_proposals(
                        &outputs,
                        0,
                        &grid,
                        &self.orients,
                        self.cfg.rpn_nms_threshold,
                        self.cfg.rpn_train_pre_nms,
                        self.cfg.rpn_train_cap,
                    );
                    (
                        RpnForward::Dual {
                            cache,
                            prepool_shape: prepool.shape(),
                            argmax,
                        },
                        report,
                        g_cls,
                        g_reg_a,
                        g_reg_t,
                        proposals,
                    )
                }
                RpnVariant::Single(heads) => {
                    let (outputs, cache) = heads.forward(&prepool)?;
                    let (labels, matched) = self.assign_single_labels(&grid, gts);
                    let sampled = rpn::sample_minibatch(
                        &labels,
                        self.cfg.anchor_batch,
                        self.cfg.anchor_fg_fraction,
                        &mut rng_anchor,
                    );
                    let (samples, places) = self.build_single_samples(
                        &outputs,
                        &grid,
                        &labels,
                        &matched,
                        gts,
                        &sampled,
                    )?;
                    let (report, grads) =
                        losses::rpn_loss(&samples, self.cfg.loss_lambda, self.cfg.focal_gamma);
                    let (g_cls, g_reg) = self.scatter_single_grads(&outputs, &places, &grads);
                    let proposals = self.single_proposals(
                        &outputs,
                        &grid,
                        self.cfg.rpn_train_pre_nms,
                        self.cfg.rpn_train_cap,
                    );
                    let zero = Tensor4::zeros([1, 1, 1, 1]);
                    (
                        RpnForward::Single { cache },
                        report,
                        g_cls,
                        g_reg,
                        zero,
                        proposals,
                    )
                }
            };
            rpn_report = rpn_report.merged(&r_report);

            // second stage on sampled rois
            let used = self.cfg.pool_levels;
            let total = levels.len();
            let raw: Vec<Tensor4<T>> = levels[total - used..].to_vec();
            let (mut level_set, smoother_cache) = self.smoother.forward(&raw)?;
            level_set.reset_grads();

            let roi_boxes = self.collect_training_rois(&proposals, gts, &mut rng_roi);
            let (rois, d_report) = self.second_stage(&level_set, &roi_boxes, gts, &mut rng_roi)?;
            det_report = det_report.merged(&d_report);

            images.push(ImageForward {
                bb_cache,
                level_shapes: levels.iter().map(|l| l.shape()).collect(),
                arf_inputs,
                arf_pre,
                rpn_fwd,
                rpn_grad_cls: g_cls,
                rpn_grad_reg_a: g_reg_a,
                rpn_grad_reg_t: g_reg_t,
                smoother_cache,
                level_set,
                rois,
            });
        }
        let total = rpn_report.total + det_report.total;
        Ok(TrainForward {
            images,
            report: StepReport {
                rpn: rpn_report,
                det: det_report,
                total,
            },
        })
    }

    /// Backpropagates a completed [`TrainForward`], accumulating into
    /// every parameter's gradient buffer.
    pub fn train_backward(&mut self, state: &mut TrainForward<T>) -> Result<()> {
        for img in &mut state.images {
            // second stage: roi heads → pooled grads → level grads
            for roi in &img.rois {
                let g = &roi.grad;
                let p = roi.cls_prob;
                let d_logit = g.d_score * p * (T::one() - p);
                let mut g_fc2_act = self.det_cls.backward(&roi.fc2_act, &[d_logit]);
                let mut d_reg = [T::zero(); 5];
                d_reg[..4].copy_from_slice(&g.d_t);
                d_reg[4] = g.d_t_theta;
                let g2 = self.det_reg.backward(&roi.fc2_act, &d_reg);
                for (a, b) in g_fc2_act.iter_mut().zip(g2) {
                    *a += b;
                }
                let g_fc2_pre = relu_back_vec(&roi.fc2_pre, &g_fc2_act);
                let g_fc1_act = self.fc2.backward(&roi.fc1_act, &g_fc2_pre);
                let g_fc1_pre = relu_back_vec(&roi.fc1_pre, &g_fc1_act);
                let g_flat = self.fc1.backward(roi.pooled.data(), &g_fc1_pre);
                let g_pooled = Tensor4::from_vec(roi.pooled.shape(), g_flat)?;
                mlap::adaptive_pool_backward(
                    &mut img.level_set,
                    0,
                    &roi.pattern,
                    self.effective_arrangement(),
                    &g_pooled,
                );
            }
            let g_raw = self.smoother.backward(&img.smoother_cache, &img.level_set)?;

            // proposal stage
            let g_prepool = match (&mut self.rpn, &img.rpn_fwd) {
                (
                    RpnVariant::Dual(heads),
                    RpnForward::Dual {
                        cache,
                        prepool_shape,
                        argmax,
                        ..
                    },
                ) => {
                    let (g_pooled, mut g_prepool) = heads.backward(
                        cache,
                        &img.rpn_grad_cls,
                        &img.rpn_grad_reg_a,
                        &img.rpn_grad_reg_t,
                    )?;
                    // pooled-map gradient routes to the pre-pool
                    // response through the orientation argmax
                    let routed = arf::orientation_pool_backward(
                        *prepool_shape,
                        self.cfg.arf_orientations,
                        argmax,
                        &g_pooled,
                    );
                    for (d, s) in g_prepool.data_mut().iter_mut().zip(routed.data()) {
                        *d += *s;
                    }
                    g_prepool
                }
                (RpnVariant::Single(heads), RpnForward::Single { cache, .. }) => {
                    heads.backward(cache, &img.rpn_grad_cls, &img.rpn_grad_reg_a)?
                }
                _ => unreachable!("variant mismatch"),
            };

            // ARF stack backward
            let mut g = g_prepool;
            for i in (0..self.arf_stack.len()).rev() {
                let g_pre = ops::relu_backward(&img.arf_pre[i], &g);
                g = self.arf_stack[i].backward(&img.arf_inputs[i], &g_pre)?;
            }

            // distribute level gradients: smoother raw levels are the
            // top `pool_levels`; the ARF input is the top level
            let total = img.level_shapes.len();
            let used = self.cfg.pool_levels;
            let mut grad_levels: Vec<Tensor4<T>> = img
                .level_shapes
                .iter()
                .map(|&s| Tensor4::zeros(s))
                .collect();
            for (i, graw) in g_raw.into_iter().enumerate() {
                let li = total - used + i;
                for (d, s) in grad_levels[li].data_mut().iter_mut().zip(graw.data()) {
                    *d += *s;
                }
            }
            for (d, s) in grad_levels[total - 1].data_mut().iter_mut().zip(g.data()) {
                *d += *s;
            }
            self.backbone.backward(&img.bb_cache, &grad_levels)?;
        }
        Ok(())
    }

    /// One training step: forward, backward, Adam update. Deterministic
    /// given the detector state, batch, and step index.
    pub fn train_step(
        &mut self,
        batch: &[(Tensor4<T>, Vec<RotatedBox>)],
        step: u64,
    ) -> Result<StepReport> {
        self.zero_grads();
        let mut state = self.train_forward(batch, step)?;
        self.train_backward(&mut state)?;
        let lr = if step < self.cfg.steps_first as u64 {
            self.cfg.lr_first
        } else {
            self.cfg.lr_second
        };
        let hp = AdamParams {
            lr,
            beta1: self.cfg.adam_beta1,
            beta2: self.cfg.adam_beta2,
            eps: 1e-8,
            weight_decay: self.cfg.weight_decay,
        };
        hp.validate()?;
        for (_, p) in self.named_params_mut() {
            p.adam_step(&hp);
        }
        self.global_step = step + 1;
        Ok(state.report)
    }

    /// Total loss of a batch without touching any state (used by the
    /// full-pipeline gradient checks).
    pub fn loss_only(&self, batch: &[(Tensor4<T>, Vec<RotatedBox>)], step: u64) -> Result<f64> {
        Ok(self.train_forward(batch, step)?.report.total)
    }

    fn effective_arrangement(&self) -> Arrangement {
        self.cfg.pool_arrangement
    }

    fn step_rng(&self, step: u64, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(
            self.cfg
                .seed
                .wrapping_add(step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
                ^ salt,
        )
    }

    /// Builds loss samples for the dual-branch stage; returns them with
    /// their map placement (anchor slot, orientation, row, col).
    #[allow(clippy::type_complexity)]
    fn build_rpn_samples(
        &self,
        outputs: &RpnHeadOutputs<T>,
        grid: &AnchorGrid,
        assignment: &AgnosticAssignment,
        labels: &[OrientedLabel],
        gts: &[RotatedBox],
        sampled: &[usize],
    ) -> Result<(Vec<LossSample<T>>, Vec<(usize, usize, usize, usize)>)> {
        let k = self.orients.len();
        let mut samples = Vec::with_capacity(sampled.len());
        let mut places = Vec::with_capacity(sampled.len());
        for &idx in sampled {
            let (ai, j) = (idx / k, idx % k);
            let (row, col, slot) = grid.place(ai);
            let score = outputs.cls.at(0, slot * k + j, row, col);
            let positive = labels[idx] == OrientedLabel::Positive;
            let p1 = assignment.p1[ai];
            let mut sample = LossSample {
                score,
                positive,
                reg_box: false,
                reg_theta: false,
                t_pred: [T::zero(); 4],
                t_target: [T::zero(); 4],
                t_theta_pred: T::zero(),
                t_theta_target: T::zero(),
            };
            if p1 {
                if let Some(gi) = assignment.matched_gt[ai] {
                    let gt = &gts[gi];
                    let anchor = &grid.anchors[ai];
                    // box offsets are orientation-free; encode against
                    // the gt's own θ to stay clear of the tan fold
                    let (t_box, _) = rpn::encode_offsets(gt, anchor, gt.theta)?;
                    sample.reg_box = true;
                    for c in 0..4 {
                        sample.t_pred[c] = outputs.reg_agnostic.at(0, slot * 4 + c, row, col);
                        sample.t_target[c] = T::from_f64(t_box[c]);
                    }
                    let dev = geometry::angular_deviation(self.orients.thetas[j], gt.theta);
                    if dev < self.cfg.angle_positive {
                        sample.reg_theta = true;
                        sample.t_theta_pred = outputs.reg_theta.at(0, j, row, col);
                        let (_, tt) = rpn::encode_offsets(gt, anchor, self.orients.thetas[j])?;
                        sample.t_theta_target = T::from_f64(tt);
                    }
                }
            }
            samples.push(sample);
            places.push((slot, j, row, col));
        }
        Ok((samples, places))
    }

    fn scatter_rpn_grads(
        &self,
        outputs: &RpnHeadOutputs<T>,
        places: &[(usize, usize, usize, usize)],
        grads: &[LossSampleGrad<T>],
    ) -> (Tensor4<T>, Tensor4<T>, Tensor4<T>) {
        let mut g_cls = Tensor4::zeros(outputs.cls.shape());
        let mut g_reg_a = Tensor4::zeros(outputs.reg_agnostic.shape());
        let mut g_reg_t = Tensor4::zeros(outputs.reg_theta.shape());
        let k = self.orients.len();
        for ((slot, j, row, col), g) in places.iter().zip(grads) {
            *g_cls.at_mut(0, slot * k + j, *row, *col) += g.d_score;
            for c in 0..4 {
                *g_reg_a.at_mut(0, slot * 4 + c, *row, *col) += g.d_t[c];
            }
            *g_reg_t.at_mut(0, *j, *row, *col) += g.d_t_theta;
        }
        (g_cls, g_reg_a, g_reg_t)
    }

    /// Baseline labels: standard rotated IoU between each oriented
    /// anchor (anchor × orientation bin) and the ground truth, with the
    /// same 0.7/0.3 thresholds and per-gt highest-IoU fallback.
    fn assign_single_labels(
        &self,
        grid: &AnchorGrid,
        gts: &[RotatedBox],
    ) -> (Vec<OrientedLabel>, Vec<Option<usize>>) {
        let k = self.orients.len();
        let n = grid.len() * k;
        let mut labels = vec![OrientedLabel::Negative; n];
        let mut matched: Vec<Option<usize>> = vec![None; n];
        if gts.is_empty() {
            return (labels, matched);
        }
        let mut best = vec![0.0f64; n];
        let mut per_gt_best = vec![0.0f64; gts.len()];
        let mut per_gt_arg = vec![0usize; gts.len()];
        for ai in 0..grid.len() {
            let anchor = &grid.anchors[ai];
            for (gi, gt) in gts.iter().enumerate() {
                let reach = (anchor.w + gt.w + anchor.h + gt.h) * 0.5;
                if (anchor.cx - gt.cx).abs() > reach || (anchor.cy - gt.cy).abs() > reach {
                    continue;
                }
                for j in 0..k {
                    let oriented = RotatedBox {
                        theta: self.orients.thetas[j],
                        ..*anchor
                    };
                    let iou = geometry::rotated_iou(&oriented, gt);
                    let idx = ai * k + j;
                    if iou > best[idx] {
                        best[idx] = iou;
                        matched[idx] = Some(gi);
                    }
                    if iou > per_gt_best[gi] {
                        per_gt_best[gi] = iou;
                        per_gt_arg[gi] = idx;
                    }
                }
            }
        }
        for idx in 0..n {
            labels[idx] = if best[idx] > self.cfg.label_iou_positive {
                OrientedLabel::Positive
            } else if best[idx] < self.cfg.label_iou_negative {
                OrientedLabel::Negative
            } else {
                OrientedLabel::Ignore
            };
        }
        for (gi, &idx) in per_gt_arg.iter().enumerate() {
            if per_gt_best[gi] > 0.0 {
                labels[idx] = OrientedLabel::Positive;
                matched[idx] = Some(gi);
            }
        }
        (labels, matched)
    }

    #[allow(clippy::type_complexity)]
    fn build_single_samples(
        &self,
        outputs: &SingleOutputs<T>,
        grid: &AnchorGrid,
        labels: &[OrientedLabel],
        matched: &[Option<usize>],
        gts: &[RotatedBox],
        sampled: &[usize],
    ) -> Result<(Vec<LossSample<T>>, Vec<(usize, usize, usize, usize)>)> {
        let k = self.orients.len();
        let mut samples = Vec::with_capacity(sampled.len());
        let mut places = Vec::with_capacity(sampled.len());
        for &idx in sampled {
            let (ai, j) = (idx / k, idx % k);
            let (row, col, slot) = grid.place(ai);
            let score = outputs.cls.at(0, slot * k + j, row, col);
            let positive = labels[idx] == OrientedLabel::Positive;
            let mut sample = LossSample {
                score,
                positive,
                reg_box: false,
                reg_theta: false,
                t_pred: [T::zero(); 4],
                t_target: [T::zero(); 4],
                t_theta_pred: T::zero(),
                t_theta_target: T::zero(),
            };
            if positive {
                if let Some(gi) = matched[idx] {
                    let gt = &gts[gi];
                    let anchor = &grid.anchors[ai];
                    if let Ok((t_box, tt)) =
                        rpn::encode_offsets(gt, anchor, self.orients.thetas[j])
                    {
                        sample.reg_box = true;
                        sample.reg_theta = true;
                        let ch = (slot * k + j) * 5;
                        for c in 0..4 {
                            sample.t_pred[c] = outputs.reg.at(0, ch + c, row, col);
                            sample.t_target[c] = T::from_f64(t_box[c]);
                        }
                        sample.t_theta_pred = outputs.reg.at(0, ch + 4, row, col);
                        sample.t_theta_target = T::from_f64(tt);
                    }
                }
            }
            samples.push(sample);
            places.push((slot, j, row, col));
        }
        Ok((samples, places))
    }

    fn scatter_single_grads(
        &self,
        outputs: &SingleOutputs<T>,
        places: &[(usize, usize, usize, usize)],
        grads: &[LossSampleGrad<T>],
    ) -> (Tensor4<T>, Tensor4<T>) {
        let mut g_cls = Tensor4::zeros(outputs.cls.shape());
        let mut g_reg = Tensor4::zeros(outputs.reg.shape());
        let k = self.orients.len();
        for ((slot, j, row, col), g) in places.iter().zip(grads) {
            *g_cls.at_mut(0, slot * k + j, *row, *col) += g.d_score;
            let ch = (slot * k + j) * 5;
            for c in 0..4 {
                *g_reg.at_mut(0, ch + c, *row, *col) += g.d_t[c];
            }
            *g_reg.at_mut(0, ch + 4, *row, *col) += g.d_t_theta;
        }
        (g_cls, g_reg)
    }

    /// Training roi set: RPN proposals plus (optionally) the ground
    /// truths and jittered copies, which stabilize the second stage
    /// before the proposal quality ramps up.
    fn collect_training_rois(
        &self,
        proposals: &[Proposal],
        gts: &[RotatedBox],
        rng: &mut ChaCha8Rng,
    ) -> Vec<RotatedBox> {
        let mut rois: Vec<RotatedBox> = proposals.iter().map(|p| p.box_).collect();
        if self.cfg.augment_gt_rois {
            for gt in gts {
                rois.push(*gt);
                for _ in 0..2 {
                    let jittered = RotatedBox::new(
                        gt.cx + rng.gen_range(-0.08..0.08) * gt.w,
                        gt.cy + rng.gen_range(-0.08..0.08) * gt.w,
                        gt.w * rng.gen_range(0.9..1.1),
                        (gt.h * rng.gen_range(0.9..1.1)).min(gt.w * 0.99),
                        gt.theta + rng.gen_range(-0.08..0.08),
                    );
                    if let Ok(b) = jittered {
                        rois.push(b);
                    }
                }
            }
        }
        rois
    }

    /// Labels, samples, pools, and runs the FC heads over the chosen
    /// rois; loss gradients are stored per roi for the backward pass.
    fn second_stage(
        &self,
        level_set: &LevelSet<T>,
        roi_boxes: &[RotatedBox],
        gts: &[RotatedBox],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<RoiForward<T>>, LossReport)> {
        // label by rotated IoU against any gt
        let mut entries: Vec<(RotatedBox, bool, Option<usize>)> = roi_boxes
            .iter()
            .map(|b| {
                let (mut best, mut arg) = (0.0f64, None);
                for (gi, gt) in gts.iter().enumerate() {
                    let iou = geometry::rotated_iou(b, gt);
                    if iou > best {
                        best = iou;
                        arg = Some(gi);
                    }
                }
                (*b, best > self.cfg.proposal_pos_iou, arg)
            })
            .collect();
        // sample with the configured foreground fraction
        let labels: Vec<OrientedLabel> = entries
            .iter()
            .map(|(_, pos, _)| {
                if *pos {
                    OrientedLabel::Positive
                } else {
                    OrientedLabel::Negative
                }
            })
            .collect();
        let chosen = rpn::sample_minibatch(
            &labels,
            self.cfg.rois_per_image,
            self.cfg.roi_fg_fraction,
            rng,
        );
        entries = chosen.iter().map(|&i| entries[i]).collect();

        let arrangement = self.effective_arrangement();
        let mut rois = Vec::with_capacity(entries.len());
        let mut samples = Vec::with_capacity(entries.len());
        for (box_, positive, gi) in &entries {
            let enlarged = mlap::enlarge_proposal(box_, self.cfg.proposal_enlargement)?;
            let pattern = self.build_pattern(&enlarged, level_set.num_levels());
            let pooled = mlap::adaptive_pool(level_set, 0, &pattern, arrangement)?;
            let fc1_pre = self.fc1.forward(pooled.data())?;
            let fc1_act = relu_vec(&fc1_pre);
            let fc2_pre = self.fc2.forward(&fc1_act)?;
            let fc2_act = relu_vec(&fc2_pre);
            let logit = self.det_cls.forward(&fc2_act)?[0];
            let prob = T::one() / (T::one() + (-logit).exp());
            let reg = self.det_reg.forward(&fc2_act)?;

            let mut sample = LossSample {
                score: prob,
                positive: *positive,
                reg_box: false,
                reg_theta: false,
                t_pred: [T::zero(); 4],
                t_target: [T::zero(); 4],
                t_theta_pred: reg[4],
                t_theta_target: T::zero(),
            };
            if *positive {
                if let Some(gi) = gi {
                    // offsets against the proposal treated as an
                    // oriented anchor (θᵃ = proposal θ)
                    if let Ok((t, tt)) = rpn::encode_offsets(&gts[*gi], box_, box_.theta) {
                        sample.reg_box = true;
                        sample.reg_theta = true;
                        for c in 0..4 {
                            sample.t_pred[c] = reg[c];
                            sample.t_target[c] = T::from_f64(t[c]);
                        }
                        sample.t_theta_target = T::from_f64(tt);
                    }
                }
            }
            samples.push(sample);
            rois.push(RoiForward {
                pattern,
                pooled,
                fc1_pre,
                fc1_act,
                fc2_pre,
                fc2_act,
                cls_prob: prob,
                grad: LossSampleGrad {
                    d_score: T::zero(),
                    d_t: [T::zero(); 4],
                    d_t_theta: T::zero(),
                },
            });
        }
        let gamma = if self.cfg.focal_second_stage {
            self.cfg.focal_gamma
        } else {
            0.0
        };
        let (report, grads) = losses::detection_head_loss(&samples, self.cfg.loss_lambda, gamma);
        for (roi, g) in rois.iter_mut().zip(grads) {
            roi.grad = g;
        }
        Ok((rois, report))
    }

    /// Sampling pattern for one enlarged proposal box under the
    /// configured pooling mode.
    fn build_pattern(&self, box_: &RotatedBox, num_levels: usize) -> RingPattern {
        match self.cfg.pooling_mode {
            PoolingMode::Adaptive => mlap::ring_pattern(
                box_,
                self.cfg.pool_out_size,
                num_levels,
                self.effective_arrangement(),
            ),
            PoolingMode::Typical => {
                typical_pattern(box_, self.cfg.pool_out_size, num_levels, self.effective_arrangement())
            }
        }
    }

    /// Full inference for one image: proposals at the test cap,
    /// enlargement, pooling, FC refinement, score filtering, bounds
    /// filtering, and final rotated NMS. Output is score-sorted.
    pub fn detect(&self, image: &Tensor4<T>) -> Result<Vec<Detection>> {
        if self.global_step == 0 {
            return Err(Error::NotReady(
                "detector has no trained weights (global step 0); load a checkpoint or train first"
                    .into(),
            ));
        }
        self.detect_untrained_ok(image)
    }

    /// [`Self::detect`] without the trained-weights guard (tests,
    /// overfit probes).
    pub fn detect_untrained_ok(&self, image: &Tensor4<T>) -> Result<Vec<Detection>> {
        let [_, _, img_h, img_w] = image.shape();
        let proposals = self.propose(image, false)?;
        let (levels, _, _, _, _, _, _) = self.features(image)?;
        let used = self.cfg.pool_levels;
        let total = levels.len();
        let raw: Vec<Tensor4<T>> = levels[total - used..].to_vec();
        let (level_set, _) = self.smoother.forward(&raw)?;

        let arrangement = self.effective_arrangement();
        let mut refined: Vec<(RotatedBox, f64)> = Vec::new();
        for p in &proposals {
            let enlarged = mlap::enlarge_proposal(&p.box_, self.cfg.proposal_enlargement)?;
            let pattern = self.build_pattern(&enlarged, level_set.num_levels());
            let pooled = mlap::adaptive_pool(&level_set, 0, &pattern, arrangement)?;
            let fc1 = relu_vec(&self.fc1.forward(pooled.data())?);
            let fc2 = relu_vec(&self.fc2.forward(&fc1)?);
            let logit = self.det_cls.forward(&fc2)?[0];
            let prob = (T::one() / (T::one() + (-logit).exp())).as_f64();
            if prob < self.cfg.report_threshold {
                continue;
            }
            let reg = self.det_reg.forward(&fc2)?;
            let t = [
                reg[0].as_f64(),
                reg[1].as_f64(),
                reg[2].as_f64(),
                reg[3].as_f64(),
            ];
            let box_ = rpn::decode_offsets(&p.box_, p.box_.theta, t, reg[4].as_f64());
            // keep detections within the image bounds plus 10% slack
            let (sx, sy) = (img_w as f64, img_h as f64);
            if box_.cx < -0.1 * sx
                || box_.cx > 1.1 * sx
                || box_.cy < -0.1 * sy
                || box_.cy > 1.1 * sy
            {
                continue;
            }
            refined.push((box_, prob));
        }
        let keep = geometry::rotated_nms(&refined, self.cfg.final_nms_threshold);
        Ok(keep
            .into_iter()
            .map(|i| Detection {
                box_: refined[i].0,
                score: refined[i].1,
            })
            .collect())
    }

    /// Serializes parameters, Adam state, the step counter, and the
    /// config into a checkpoint file.
    pub fn save_checkpoint(&mut self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let step = self.global_step;
        let cfg_toml = self.cfg.to_toml()?;
        let mut tensors: Vec<(String, Tensor4<T>)> = Vec::new();
        for (name, p) in self.named_params_mut() {
            tensors.push((name.clone(), p.value.clone()));
            let (m, v) = p.adam_state();
            let shape = p.value.shape();
            tensors.push((format!("adam.m.{name}"), Tensor4::from_vec(shape, m.to_vec())?));
            tensors.push((format!("adam.v.{name}"), Tensor4::from_vec(shape, v.to_vec())?));
        }
        let mut meta = extra.clone();
        meta.insert("step".into(), step.to_string());
        meta.insert("config".into(), cfg_toml);
        let refs: Vec<(String, &Tensor4<T>)> =
            tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
        checkpoint::save(path, &refs, &meta)
    }

    /// Restores parameters and optimizer state saved by
    /// [`Self::save_checkpoint`]; shapes are validated against this
    /// detector's architecture.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let (mut tensors, meta) = checkpoint::load(path)?;
        let step: u64 = meta
            .get("step")
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        for (name, p) in self.named_params_mut() {
            let shape = p.value.shape();
            let value = checkpoint::take_validated(&mut tensors, &name, shape)?;
            p.value = value.cast();
            let m = checkpoint::take_validated(&mut tensors, &format!("adam.m.{name}"), shape)?;
            let v = checkpoint::take_validated(&mut tensors, &format!("adam.v.{name}"), shape)?;
            p.restore_adam_state(
                m.cast::<T>().data().to_vec(),
                v.cast::<T>().data().to_vec(),
                step,
            )?;
        }
        self.global_step = step;
        Ok(())
    }

    /// Builds a detector from the config embedded in a checkpoint, then
    /// loads its weights.
    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let (_, meta) = checkpoint::load(path)?;
        let cfg_text = meta
            .get("config")
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no config".into()))?;
        let cfg = DetectorConfig::from_toml(cfg_text)?;
        let mut det = Detector::new(cfg)?;
        det.load_weights(path)?;
        Ok(det)
    }
}

/// Regular `k×k` rotated-grid pattern (typical ROI pooling): bin
/// centers on an even grid over the proposal, level chosen by the
/// cell's concentric ring so the multilevel comparison stays defined.
pub fn typical_pattern(
    box_: &RotatedBox,
    out_size: usize,
    num_levels: usize,
    arrangement: Arrangement,
) -> RingPattern {
    let k = out_size;
    let (sin_t, cos_t) = box_.theta.sin_cos();
    let mut samples = Vec::with_capacity(k * k);
    for row in 0..k {
        for col in 0..k {
            let u = ((col as f64 + 0.5) / k as f64 - 0.5) * box_.w;
            let v = ((row as f64 + 0.5) / k as f64 - 0.5) * box_.h;
            let ring = row.min(col).min(k - 1 - row).min(k - 1 - col).min(2);
            samples.push(RingSample {
                u,
                v,
                x: box_.cx + u * cos_t - v * sin_t,
                y: box_.cy + u * sin_t + v * cos_t,
                ring,
                level: mlap::ring_to_level(ring, num_levels, arrangement),
                cell: (row, col),
            });
        }
    }
    RingPattern {
        out_size: k,
        samples,
    }
}

fn relu_vec<T: Real>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect()
}

fn relu_back_vec<T: Real>(pre: &[T], g: &[T]) -> Vec<T> {
    pre.iter()
        .zip(g)
        .map(|(&p, &gv)| if p > T::zero() { gv } else { T::zero() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> DetectorConfig {
        DetectorConfig {
            backbone_widths: vec![6, 8, 10],
            arf_layers: 2,
            arf_filters: 4,
            rpn_hidden: 8,
            anchor_scales: vec![12.0, 20.0],
            anchor_ratios: vec![0.25],
            pool_lateral_channels: 6,
            pool_channels: 8,
            fc_dim: 16,
            rois_per_image: 8,
            rpn_train_pre_nms: 100,
            rpn_train_cap: 30,
            rpn_test_pre_nms: 60,
            rpn_test_cap: 10,
            anchor_batch: 32,
            ..DetectorConfig::desk()
        }
    }

    fn tiny_batch<T: Real>(seed: u64) -> Vec<(Tensor4<T>, Vec<RotatedBox>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Tensor4::from_fn([1, 3, 48, 48], || T::from_f64(rng.gen_range(-1.0..1.0)));
        let gts = vec![RotatedBox::new(22.0, 26.0, 24.0, 7.0, 0.5).unwrap()];
        vec![(image, gts)]
    }

    #[test]
    fn level_spatial_sizes_halve() {
        let det = Detector::<f32>::new(tiny_config()).unwrap();
        let image = Tensor4::zeros([1, 3, 64, 64]);
        let (levels, _) = det.backbone.forward(&image).unwrap();
        assert_eq!(levels.len(), 3);
        assert_eq!(levels[0].shape()[2], 16);
        assert_eq!(levels[1].shape()[2], 8);
        assert_eq!(levels[2].shape()[2], 4);
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let mut det = Detector::<f32>::new(tiny_config()).unwrap();
        for (_, p) in det.named_params_mut() {
            // zero the biases only
            if p.value.shape()[0] == 1 {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let image = Tensor4::zeros([1, 3, 48, 48]);
        let (levels, _) = det.backbone.forward(&image).unwrap();
        for l in &levels {
            assert!(l.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backbone_rejects_tiny_images() {
        let det = Detector::<f32>::new(tiny_config()).unwrap();
        let image = Tensor4::zeros([1, 3, 8, 8]);
        assert!(det.backbone.forward(&image).is_err());
    }

    #[test]
    fn train_step_is_deterministic() {
        let cfg = tiny_config();
        let batch = tiny_batch::<f32>(3);
        let mut a = Detector::<f32>::new(cfg.clone()).unwrap();
        let mut b = Detector::<f32>::new(cfg).unwrap();
        let ra = a.train_step(&batch, 0).unwrap();
        let rb = b.train_step(&batch, 0).unwrap();
        assert_eq!(ra, rb, "identical state/seed must give identical reports");
    }

    #[test]
    fn image_without_annotations_gives_cls_only_loss() {
        let mut det = Detector::<f32>::new(tiny_config()).unwrap();
        let mut batch = tiny_batch::<f32>(5);
        batch[0].1.clear();
        let report = det.train_step(&batch, 0).unwrap();
        assert_eq!(report.rpn.reg1, 0.0);
        assert_eq!(report.rpn.reg2, 0.0);
        assert_eq!(report.det.reg1, 0.0);
        assert!(report.total > 0.0);
    }

    #[test]
    fn minibatch_counts_honor_fg_ratio() {
        let mut det = Detector::<f32>::new(tiny_config()).unwrap();
        let batch = tiny_batch::<f32>(7);
        let report = det.train_step(&batch, 0).unwrap();
        let total = report.rpn.num_pos + report.rpn.num_neg;
        assert_eq!(total, 32);
        assert!(report.rpn.num_pos <= 8, "positives {}", report.rpn.num_pos);
    }

    #[test]
    fn untrained_detector_refuses_detect() {
        let det = Detector::<f32>::new(tiny_config()).unwrap();
        let image = Tensor4::zeros([1, 3, 48, 48]);
        assert!(matches!(det.detect(&image), Err(Error::NotReady(_))));
    }

    #[test]
    fn detections_sorted_and_in_bounds() {
        let mut det = Detector::<f32>::new(tiny_config()).unwrap();
        let batch = tiny_batch::<f32>(9);
        for step in 0..3 {
            det.train_step(&batch, step).unwrap();
        }
        let dets = det.detect(&batch[0].0).unwrap();
        for w in dets.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        for d in &dets {
            assert!(d.box_.cx >= -4.8 && d.box_.cx <= 52.8);
            assert!(d.box_.w > 0.0 && d.box_.h > 0.0);
        }
    }

    #[test]
    fn checkpoint_roundtrip_resumes_bit_identically() {
        use tempfile::tempdir;
        let cfg = tiny_config();
        let batch = tiny_batch::<f32>(11);
        let mut a = Detector::<f32>::new(cfg).unwrap();
        for step in 0..2 {
            a.train_step(&batch, step).unwrap();
        }
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        a.save_checkpoint(&path, &BTreeMap::new()).unwrap();

        let mut b = Detector::<f32>::from_checkpoint(&path).unwrap();
        assert_eq!(b.global_step(), 2);
        let ra = a.train_step(&batch, 2).unwrap();
        let rb = b.train_step(&batch, 2).unwrap();
        assert_eq!(ra, rb, "resumed step must reproduce bit-identically");
    }

    #[test]
    fn single_mode_builds_and_trains() {
        let mut cfg = tiny_config();
        cfg.rpn_mode = RpnMode::Single;
        let mut det = Detector::<f32>::new(cfg).unwrap();
        let batch = tiny_batch::<f32>(13);
        let report = det.train_step(&batch, 0).unwrap();
        assert!(report.total.is_finite());
        let props = det.propose(&batch[0].0, false).unwrap();
        for w in props.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn gradient_reachability_every_param() {
        let mut det = Detector::<f64>::new(tiny_config()).unwrap();
        let batch = tiny_batch::<f64>(15);
        det.zero_grads();
        let mut state = det.train_forward(&batch, 0).unwrap();
        det.train_backward(&mut state).unwrap();
        for (name, p) in det.named_params_mut() {
            let nonzero = p.grad.data().iter().any(|&g| g != 0.0);
            assert!(nonzero, "parameter {name} received no gradient");
        }
    }
}
