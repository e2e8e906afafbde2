//! Tube Proposal Network: actionness scoring over anchor boxes on the conv5
//! cube, positive/negative labeling, temporal skip pooling feature assembly
//! and per-frame bounding-box regression into 8-frame tube proposals.
//!
//! The conv5 cube collapses a clip's 8 frames into one slice, so box
//! proposals scored there carry no temporal order. Skip pooling restores it:
//! each positive conv5 box is mapped to an earlier feature cube that still
//! has one slice per frame, pooled as a straight tube, L2-normalized per
//! frame, concatenated with the (duplicated) conv5 descriptor and reduced by
//! a 1x1 convolution to the fc6 input width. Three fully-connected layers
//! then emit per-frame center/size displacements.

use std::collections::BTreeMap;

use rand::Rng;

use crate::anchors::AnchorSet;
use crate::cube::FeatureCube;
use crate::error::{Result, TcnnError};
use crate::geom::{iou, Box2D};
use crate::layers::{
    l2norm_backward, l2norm_forward, relu_backward, relu_forward, Conv1x1Grads, Conv1x1Layer,
    FCGrads, FCLayer,
};
use crate::loss::{bce_with_logit, sigmoid, smooth_l1};
use crate::net::{Backbone, BackboneGrads, NetConfig, ParamMap, SkipSource};
use crate::toi::{toi_pool_backward, toi_pool_forward, ToiArgmax, TubeOfInterest};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

/// One anchor placement on the conv5 grid with its actionness score.
#[derive(Debug, Clone)]
pub struct BoxProposal {
    /// Box on the conv5 grid, clamped to the feature map.
    pub box2d: Box2D,
    pub actionness: f64,
    /// Pre-sigmoid score, kept for the training loss.
    pub logit: f64,
    pub anchor_index: usize,
    pub grid_y: usize,
    pub grid_x: usize,
    pub label: Label,
    /// Index of the matched ground-truth box once labeled positive.
    pub matched_gt: Option<usize>,
}

/// An 8-frame box sequence for one clip, in original-frame coordinates.
#[derive(Debug, Clone)]
pub struct TubeProposal {
    pub clip_index: usize,
    pub frame_boxes: Vec<Box2D>,
    pub actionness: f64,
    /// The conv5-grid box this tube was refined from; the recognition head
    /// pools linked tubes at conv5 level through it.
    pub conv5_box: Box2D,
}

/// TPN-specific heads on top of the shared backbone.
#[derive(Debug, Clone)]
pub struct TpnHeads {
    /// Actionness scoring: conv5 channels -> one logit per anchor.
    pub score: Conv1x1Layer,
    /// Descriptor reduction to the fc6 input width; absent without a skip
    /// source (the conv5 descriptor already has that width).
    pub reduce: Option<Conv1x1Layer>,
    pub fc6: FCLayer,
    pub fc7: FCLayer,
    /// Per-frame (dx, dy, dw, dh).
    pub reg: FCLayer,
}

#[derive(Debug, Clone)]
pub struct TpnModel {
    pub cfg: NetConfig,
    pub backbone: Backbone,
    pub heads: TpnHeads,
    pub anchors: AnchorSet,
}

pub struct TpnGrads {
    pub backbone: BackboneGrads,
    pub score: Conv1x1Grads,
    pub reduce: Option<Conv1x1Grads>,
    pub fc6: FCGrads,
    pub fc7: FCGrads,
    pub reg: FCGrads,
}

impl TpnModel {
    pub fn init(cfg: NetConfig, anchors: AnchorSet, rng: &mut impl Rng) -> Self {
        let backbone = Backbone::init(&cfg, rng);
        let c5 = cfg.conv_channels[7];
        let score = Conv1x1Layer::init(anchors.len(), c5, rng);
        let reduce = match cfg.skip_source {
            SkipSource::None => None,
            _ => Some(Conv1x1Layer::init(cfg.reduced_dim(), cfg.descriptor_dim(), rng)),
        };
        let fc6 = FCLayer::init(cfg.fc_dim, cfg.reduced_dim(), rng);
        let fc7 = FCLayer::init(cfg.fc_dim, cfg.fc_dim, rng);
        let reg = FCLayer::init(4, cfg.fc_dim, rng);
        TpnModel {
            cfg,
            backbone,
            heads: TpnHeads {
                score,
                reduce,
                fc6,
                fc7,
                reg,
            },
            anchors,
        }
    }

    pub fn zero_grads(&self) -> TpnGrads {
        TpnGrads {
            backbone: self.backbone.zero_grads(),
            score: Conv1x1Grads {
                weights: vec![0.0; self.heads.score.weights.len()],
                bias: vec![0.0; self.heads.score.bias.len()],
            },
            reduce: self.heads.reduce.as_ref().map(|r| Conv1x1Grads {
                weights: vec![0.0; r.weights.len()],
                bias: vec![0.0; r.bias.len()],
            }),
            fc6: self.heads.fc6.zero_grads(),
            fc7: self.heads.fc7.zero_grads(),
            reg: self.heads.reg.zero_grads(),
        }
    }

    pub fn to_params(&self, prefix: &str) -> ParamMap {
        let mut p = ParamMap::new();
        collect_backbone(&mut p, prefix, &self.backbone);
        insert2(&mut p, format!("{prefix}.score.weights"), self.heads.score.out_channels, self.heads.score.in_channels, &self.heads.score.weights);
        insert1(&mut p, format!("{prefix}.score.bias"), &self.heads.score.bias);
        if let Some(r) = &self.heads.reduce {
            insert2(&mut p, format!("{prefix}.reduce.weights"), r.out_channels, r.in_channels, &r.weights);
            insert1(&mut p, format!("{prefix}.reduce.bias"), &r.bias);
        }
        collect_fc(&mut p, &format!("{prefix}.fc6"), &self.heads.fc6);
        collect_fc(&mut p, &format!("{prefix}.fc7"), &self.heads.fc7);
        collect_fc(&mut p, &format!("{prefix}.reg"), &self.heads.reg);
        let mut a = Vec::new();
        for b in &self.anchors.anchors {
            a.push(b.width);
            a.push(b.height);
        }
        p.insert(format!("{prefix}.anchors"), (vec![self.anchors.len() as u32, 2], a));
        p
    }

    pub fn load_params(&mut self, prefix: &str, p: &ParamMap) -> Result<()> {
        load_backbone(p, prefix, &mut self.backbone)?;
        take(p, &format!("{prefix}.score.weights"), &mut self.heads.score.weights)?;
        take(p, &format!("{prefix}.score.bias"), &mut self.heads.score.bias)?;
        if let Some(r) = &mut self.heads.reduce {
            take(p, &format!("{prefix}.reduce.weights"), &mut r.weights)?;
            take(p, &format!("{prefix}.reduce.bias"), &mut r.bias)?;
        }
        load_fc(p, &format!("{prefix}.fc6"), &mut self.heads.fc6)?;
        load_fc(p, &format!("{prefix}.fc7"), &mut self.heads.fc7)?;
        load_fc(p, &format!("{prefix}.reg"), &mut self.heads.reg)?;
        let key = format!("{prefix}.anchors");
        if let Some((dims, data)) = p.get(&key) {
            if dims.len() != 2 || dims[1] != 2 {
                return Err(TcnnError::Format {
                    path: key.into(),
                    msg: "anchor tensor must be k x 2".into(),
                });
            }
            self.anchors.anchors = data
                .chunks_exact(2)
                .map(|c| crate::anchors::AnchorBox {
                    width: c[0],
                    height: c[1],
                })
                .collect();
        }
        Ok(())
    }
}

fn insert1(p: &mut ParamMap, name: String, data: &[f64]) {
    p.insert(name, (vec![data.len() as u32], data.to_vec()));
}

fn insert2(p: &mut ParamMap, name: String, rows: usize, cols: usize, data: &[f64]) {
    p.insert(name, (vec![rows as u32, cols as u32], data.to_vec()));
}

fn collect_fc(p: &mut ParamMap, prefix: &str, fc: &FCLayer) {
    insert2(p, format!("{prefix}.weights"), fc.out_dim, fc.in_dim, &fc.weights);
    insert1(p, format!("{prefix}.bias"), &fc.bias);
}

fn load_fc(p: &ParamMap, prefix: &str, fc: &mut FCLayer) -> Result<()> {
    take(p, &format!("{prefix}.weights"), &mut fc.weights)?;
    take(p, &format!("{prefix}.bias"), &mut fc.bias)
}

pub(crate) fn collect_backbone(p: &mut ParamMap, prefix: &str, bb: &Backbone) {
    for (name, conv) in crate::net::CONV_NAMES.iter().zip(&bb.convs) {
        let (kd, kh, kw) = conv.kernel_dims;
        p.insert(
            format!("{prefix}.{name}.kernel"),
            (
                vec![
                    conv.out_channels as u32,
                    conv.in_channels as u32,
                    kd as u32,
                    kh as u32,
                    kw as u32,
                ],
                conv.kernel.clone(),
            ),
        );
        insert1(p, format!("{prefix}.{name}.bias"), &conv.bias);
    }
}

pub(crate) fn load_backbone(p: &ParamMap, prefix: &str, bb: &mut Backbone) -> Result<()> {
    for (name, conv) in crate::net::CONV_NAMES.iter().zip(&mut bb.convs) {
        take(p, &format!("{prefix}.{name}.kernel"), &mut conv.kernel)?;
        take(p, &format!("{prefix}.{name}.bias"), &mut conv.bias)?;
    }
    Ok(())
}

pub(crate) fn take(p: &ParamMap, name: &str, dst: &mut Vec<f64>) -> Result<()> {
    let (_, data) = p.get(name).ok_or_else(|| TcnnError::Format {
        path: name.into(),
        msg: "missing parameter".into(),
    })?;
    if data.len() != dst.len() {
        return Err(TcnnError::ShapeMismatch(format!(
            "parameter {name}: {} values, expected {}",
            data.len(),
            dst.len()
        )));
    }
    dst.copy_from_slice(data);
    Ok(())
}

/// Scores every anchor placement on the conv5 grid and keeps proposals with
/// actionness at or above `threshold` (pass 0.0 to keep all). Anchors are in
/// normalized image units and are scaled by the conv5 grid extent.
pub fn score_anchors(
    conv5: &FeatureCube,
    head: &Conv1x1Layer,
    anchors: &AnchorSet,
    threshold: f64,
) -> Result<Vec<BoxProposal>> {
    if anchors.is_empty() {
        return Err(TcnnError::InvalidArgument("empty anchor set".into()));
    }
    if conv5.depth() != 1 {
        return Err(TcnnError::ShapeMismatch(format!(
            "conv5 cube must have depth 1, got {}",
            conv5.depth()
        )));
    }
    let score_map = head.forward(conv5)?;
    let (h5, w5) = (conv5.height(), conv5.width());
    let mut out = Vec::new();
    for (a, anchor) in anchors.anchors.iter().enumerate() {
        for gy in 0..h5 {
            for gx in 0..w5 {
                let logit = score_map.at(a, 0, gy, gx);
                let actionness = sigmoid(logit);
                if actionness < threshold {
                    continue;
                }
                let b = Box2D::from_center(
                    gx as f64 + 0.5,
                    gy as f64 + 0.5,
                    anchor.width * w5 as f64,
                    anchor.height * h5 as f64,
                )
                .clamped(w5 as f64, h5 as f64);
                out.push(BoxProposal {
                    box2d: b,
                    actionness,
                    logit,
                    anchor_index: a,
                    grid_y: gy,
                    grid_x: gx,
                    label: Label::Negative,
                    matched_gt: None,
                });
            }
        }
    }
    Ok(out)
}

/// The anchor grid as unlabeled proposals with placeholder scores. Ordering
/// matches [`score_anchors`] with threshold 0 exactly (anchor-major, then
/// grid row, then column), so indices are interchangeable. Labeling and
/// sampling only need geometry; the training loss reads real logits from the
/// score map by grid position.
pub fn anchor_grid_proposals(cfg: &NetConfig, anchors: &AnchorSet) -> Vec<BoxProposal> {
    let (h5, w5) = cfg.conv5_grid();
    let mut out = Vec::with_capacity(anchors.len() * h5 * w5);
    for (a, anchor) in anchors.anchors.iter().enumerate() {
        for gy in 0..h5 {
            for gx in 0..w5 {
                let b = Box2D::from_center(
                    gx as f64 + 0.5,
                    gy as f64 + 0.5,
                    anchor.width * w5 as f64,
                    anchor.height * h5 as f64,
                )
                .clamped(w5 as f64, h5 as f64);
                out.push(BoxProposal {
                    box2d: b,
                    actionness: 0.5,
                    logit: 0.0,
                    anchor_index: a,
                    grid_y: gy,
                    grid_x: gx,
                    label: Label::Negative,
                    matched_gt: None,
                });
            }
        }
    }
    out
}

/// Applies the two positive rules: IoU > 0.7 with any ground truth, and the
/// per-ground-truth argmax (which guarantees at least one positive per box).
/// Everything else stays negative. Ties in the argmax go to the lowest
/// proposal index.
pub fn label_proposals(proposals: &mut [BoxProposal], gts: &[Box2D]) {
    for p in proposals.iter_mut() {
        p.label = Label::Negative;
        p.matched_gt = None;
    }
    if gts.is_empty() {
        return;
    }
    for p in proposals.iter_mut() {
        let mut best = 0.0;
        let mut best_gt = None;
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(&p.box2d, gt);
            if v > best {
                best = v;
                best_gt = Some(g);
            }
        }
        if best > 0.7 {
            p.label = Label::Positive;
            p.matched_gt = best_gt;
        }
    }
    for (g, gt) in gts.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        let mut best_i = None;
        for (i, p) in proposals.iter().enumerate() {
            let v = iou(&p.box2d, gt);
            if v > best {
                best = v;
                best_i = Some(i);
            }
        }
        if let Some(i) = best_i {
            proposals[i].label = Label::Positive;
            if proposals[i].matched_gt.is_none() {
                proposals[i].matched_gt = Some(g);
            }
        }
    }
}

/// Maps a conv5-grid box to an earlier cube's grid and replicates it across
/// every feature frame, forming a straight tube.
pub fn map_to_skip_layer(
    box5: &Box2D,
    conv5_hw: (usize, usize),
    skip_dims: (usize, usize, usize, usize),
) -> TubeOfInterest {
    let (h5, w5) = conv5_hw;
    let (_, sd, sh, sw) = skip_dims;
    let scaled = box5
        .scaled(sw as f64 / w5 as f64, sh as f64 / h5 as f64)
        .clamped(sw as f64, sh as f64);
    TubeOfInterest::straight(scaled, sd)
}

/// Everything the backward pass needs about one proposal's descriptors.
pub struct SkipFeatures {
    /// Skip tube pooling output and argmax, when a skip source is active.
    pub skip_pool: Option<(FeatureCube, ToiArgmax)>,
    pub conv5_pool: (FeatureCube, ToiArgmax),
    /// Per-frame raw skip vectorizations and their norms.
    pub skip_raw: Vec<Vec<f64>>,
    pub skip_norms: Vec<f64>,
    pub conv5_raw: Vec<f64>,
    pub conv5_norm: f64,
    /// Concatenated descriptors as a (desc_dim x frames x 1 x 1) cube.
    pub desc: FeatureCube,
    /// Post-reduction cube (reduced_dim x frames x 1 x 1); equals `desc`
    /// when no reduction layer is configured.
    pub reduced: FeatureCube,
}

impl SkipFeatures {
    pub fn frame_vec(&self, f: usize) -> Vec<f64> {
        let (c_n, d_n, _, _) = self.reduced.dims();
        (0..c_n).map(|c| self.reduced.data()[c * d_n + f]).collect()
    }
}

/// Pools, normalizes, concatenates and reduces the paired tubes of one
/// proposal into per-frame descriptors.
pub fn assemble_skip_features(
    cfg: &NetConfig,
    heads: &TpnHeads,
    tap: Option<&FeatureCube>,
    conv5: &FeatureCube,
    proposal_box: &Box2D,
) -> Result<SkipFeatures> {
    let frames = cfg.clip_len;
    let (h5, w5) = (conv5.height(), conv5.width());

    // conv5 side: pool the box itself (depth 1), flatten, normalize once.
    let tube5 = TubeOfInterest::straight(*proposal_box, 1);
    let (pool5, arg5) = toi_pool_forward(conv5, &tube5, cfg.toi5)?;
    let conv5_raw: Vec<f64> = pool5.data().to_vec();
    let (conv5_unit, conv5_norm) = l2norm_forward(&conv5_raw);

    // skip side: straight tube on the tapped cube, one slice per output frame.
    let (skip_pool, skip_raw, skip_norms, skip_units) = match tap {
        Some(tap_cube) => {
            let tube = map_to_skip_layer(proposal_box, (h5, w5), tap_cube.dims());
            let (pooled, arg) = toi_pool_forward(tap_cube, &tube, cfg.toi_skip)?;
            let (pc, pd, ph, pw) = pooled.dims();
            debug_assert_eq!(pd, frames);
            let mut raws = Vec::with_capacity(frames);
            let mut norms = Vec::with_capacity(frames);
            let mut units = Vec::with_capacity(frames);
            for f in 0..frames {
                let mut v = Vec::with_capacity(pc * ph * pw);
                for c in 0..pc {
                    for y in 0..ph {
                        for x in 0..pw {
                            v.push(pooled.at(c, f, y, x));
                        }
                    }
                }
                let (u, n) = l2norm_forward(&v);
                raws.push(v);
                norms.push(n);
                units.push(u);
            }
            (Some((pooled, arg)), raws, norms, units)
        }
        None => (None, Vec::new(), Vec::new(), Vec::new()),
    };

    // concatenate per frame into the descriptor cube
    let desc_dim = cfg.descriptor_dim();
    let mut desc = FeatureCube::zeros(desc_dim, frames, 1, 1);
    for f in 0..frames {
        let mut row = Vec::with_capacity(desc_dim);
        if let Some(u) = skip_units.get(f) {
            row.extend_from_slice(u);
        }
        row.extend_from_slice(&conv5_unit);
        debug_assert_eq!(row.len(), desc_dim);
        for (c, v) in row.into_iter().enumerate() {
            *desc.at_mut(c, f, 0, 0) = v;
        }
    }

    let reduced = match &heads.reduce {
        Some(r) => r.forward(&desc)?,
        None => desc.clone(),
    };

    Ok(SkipFeatures {
        skip_pool,
        conv5_pool: (pool5, arg5),
        skip_raw,
        skip_norms,
        conv5_raw,
        conv5_norm,
        desc,
        reduced,
    })
}

/// R-CNN box parameterization: shifts are relative to the box size, scales
/// are exponential, so widths stay positive.
pub fn apply_deltas(b: &Box2D, d: &[f64; 4]) -> Result<Box2D> {
    if d.iter().any(|v| !v.is_finite()) {
        return Err(TcnnError::Numerical(format!("non-finite deltas {d:?}")));
    }
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    let ncx = cx + d[0] * w;
    let ncy = cy + d[1] * h;
    let nw = w * d[2].exp();
    let nh = h * d[3].exp();
    Ok(Box2D::from_center(ncx, ncy, nw, nh))
}

/// Inverse of [`apply_deltas`]: the regression target that maps `from` onto `to`.
pub fn encode_deltas(from: &Box2D, to: &Box2D) -> [f64; 4] {
    let (fcx, fcy) = from.center();
    let (tcx, tcy) = to.center();
    let fw = from.width().max(1e-6);
    let fh = from.height().max(1e-6);
    [
        (tcx - fcx) / fw,
        (tcy - fcy) / fh,
        (to.width().max(1e-6) / fw).ln(),
        (to.height().max(1e-6) / fh).ln(),
    ]
}

/// Runs the regression stack on each frame descriptor and applies the deltas,
/// producing a tube in original-frame coordinates.
pub fn regress_boxes(
    cfg: &NetConfig,
    heads: &TpnHeads,
    features: &SkipFeatures,
    proposal: &BoxProposal,
    clip_index: usize,
) -> Result<TubeProposal> {
    let mut frame_boxes = Vec::with_capacity(cfg.clip_len);
    let (h5, w5) = cfg.conv5_grid();
    let sx = cfg.frame_width as f64 / w5 as f64;
    let sy = cfg.frame_height as f64 / h5 as f64;
    for f in 0..cfg.clip_len {
        let x = features.frame_vec(f);
        let h1 = relu_forward(&heads.fc6.forward(&x)?);
        let h2 = relu_forward(&heads.fc7.forward(&h1)?);
        let d = heads.reg.forward(&h2)?;
        let deltas = [d[0], d[1], d[2], d[3]];
        let refined = apply_deltas(&proposal.box2d, &deltas)?;
        let in_frame = refined
            .scaled(sx, sy)
            .clamped(cfg.frame_width as f64, cfg.frame_height as f64);
        frame_boxes.push(in_frame);
    }
    Ok(TubeProposal {
        clip_index,
        frame_boxes,
        actionness: proposal.actionness,
        conv5_box: proposal.box2d,
    })
}

/// Inference for one clip: score, threshold, cap to the strongest
/// `max_proposals`, then assemble and regress each survivor. If nothing
/// clears the threshold the single best proposal is kept so every clip
/// contributes to linking.
pub fn propose_clip(
    model: &TpnModel,
    clip: &FeatureCube,
    clip_index: usize,
    threshold: f64,
    max_proposals: usize,
) -> Result<Vec<TubeProposal>> {
    let (tap, conv5) = model.backbone.forward_features(clip, model.cfg.skip_source)?;
    propose_from_features(model, tap.as_ref(), &conv5, clip_index, threshold, max_proposals)
}

/// Same as [`propose_clip`] when the feature cubes are already available.
pub fn propose_from_features(
    model: &TpnModel,
    tap: Option<&FeatureCube>,
    conv5: &FeatureCube,
    clip_index: usize,
    threshold: f64,
    max_proposals: usize,
) -> Result<Vec<TubeProposal>> {
    let mut proposals = score_anchors(conv5, &model.heads.score, &model.anchors, 0.0)?;
    sort_by_actionness(&mut proposals);
    let keep: Vec<BoxProposal> = {
        let above: Vec<BoxProposal> = proposals
            .iter()
            .filter(|p| p.actionness >= threshold)
            .take(max_proposals)
            .cloned()
            .collect();
        if above.is_empty() {
            vec![proposals[0].clone()]
        } else {
            above
        }
    };
    let mut tubes = Vec::with_capacity(keep.len());
    for p in &keep {
        let feats = assemble_skip_features(&model.cfg, &model.heads, tap, conv5, &p.box2d)?;
        tubes.push(regress_boxes(&model.cfg, &model.heads, &feats, p, clip_index)?);
    }
    Ok(tubes)
}

fn sort_by_actionness(proposals: &mut [BoxProposal]) {
    proposals.sort_by(|a, b| {
        b.actionness
            .partial_cmp(&a.actionness)
            .unwrap()
            .then(a.grid_y.cmp(&b.grid_y))
            .then(a.grid_x.cmp(&b.grid_x))
            .then(a.anchor_index.cmp(&b.anchor_index))
    });
}

/// One sampled scoring target: proposal index and binary label.
#[derive(Debug, Clone, Copy)]
pub struct ScoreSample {
    pub proposal: usize,
    pub target: bool,
}

/// Regression work item: a positive proposal with its per-frame targets
/// (already encoded as deltas on the conv5 grid).
#[derive(Debug, Clone)]
pub struct RegressionSample {
    pub proposal: usize,
    pub targets: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TpnLossReport {
    pub total: f64,
    pub actionness: f64,
    pub regression: f64,
    pub num_scored: usize,
    pub num_regressed: usize,
}

/// Forward + backward of the composed TPN loss on one clip, for a fixed
/// sample. Returns the loss components and accumulates all parameter
/// gradients into `grads`. The gradient wrt the input clip is returned for
/// gradient checking.
pub fn tpn_clip_loss(
    model: &TpnModel,
    clip: &FeatureCube,
    proposals: &[BoxProposal],
    score_samples: &[ScoreSample],
    reg_samples: &[RegressionSample],
    grads: &mut TpnGrads,
) -> Result<(TpnLossReport, FeatureCube)> {
    let acts = model.backbone.forward(clip)?;
    let tap_idx = model.cfg.skip_source.conv_index();
    let tap = tap_idx.map(|i| &acts.conv_out[i]);
    let conv5 = acts.conv5();
    let (c5, _, h5, w5) = conv5.dims();

    // ---- actionness ----
    let score_map = model.heads.score.forward(conv5)?;
    let mut grad_score_map = FeatureCube::zeros(model.anchors.len(), 1, h5, w5);
    let mut act_loss = 0.0;
    if !score_samples.is_empty() {
        let scale = 1.0 / score_samples.len() as f64;
        for s in score_samples {
            let p = &proposals[s.proposal];
            let z = score_map.at(p.anchor_index, 0, p.grid_y, p.grid_x);
            let (l, g) = bce_with_logit(z, if s.target { 1.0 } else { 0.0 });
            act_loss += l * scale;
            *grad_score_map.at_mut(p.anchor_index, 0, p.grid_y, p.grid_x) += g * scale;
        }
    }
    let (mut grad_conv5, score_grads) = model.heads.score.backward(conv5, &grad_score_map)?;
    grads.score.accumulate(&score_grads);

    // ---- regression through skip assembly ----
    let mut reg_loss = 0.0;
    let mut grad_tap = tap.map(|t| FeatureCube::zeros(t.channels(), t.depth(), t.height(), t.width()));
    if !reg_samples.is_empty() {
        let frames = model.cfg.clip_len;
        let denom = (reg_samples.len() * frames * 4) as f64;
        for rs in reg_samples {
            let p = &proposals[rs.proposal];
            if rs.targets.len() != frames {
                return Err(TcnnError::ShapeMismatch(format!(
                    "regression sample has {} frame targets, clip length is {frames}",
                    rs.targets.len()
                )));
            }
            let feats =
                assemble_skip_features(&model.cfg, &model.heads, tap, conv5, &p.box2d)?;
            let (rc, rd, _, _) = feats.reduced.dims();
            debug_assert_eq!(rd, frames);
            let mut grad_reduced = FeatureCube::zeros(rc, rd, 1, 1);
            for f in 0..frames {
                let x = feats.frame_vec(f);
                let a6 = model.heads.fc6.forward(&x)?;
                let h6 = relu_forward(&a6);
                let a7 = model.heads.fc7.forward(&h6)?;
                let h7 = relu_forward(&a7);
                let d = model.heads.reg.forward(&h7)?;
                let mut gd = vec![0.0; 4];
                for k in 0..4 {
                    let (l, g) = smooth_l1(d[k] - rs.targets[f][k]);
                    reg_loss += l / denom;
                    gd[k] = g / denom;
                }
                let gh7 = model.heads.reg.backward(&h7, &gd, &mut grads.reg)?;
                let ga7 = relu_backward(&a7, &gh7);
                let gh6 = model.heads.fc7.backward(&h6, &ga7, &mut grads.fc7)?;
                let ga6 = relu_backward(&a6, &gh6);
                let gx = model.heads.fc6.backward(&x, &ga6, &mut grads.fc6)?;
                for (c, gv) in gx.into_iter().enumerate() {
                    *grad_reduced.at_mut(c, f, 0, 0) += gv;
                }
            }

            // descend through the reduction into the paired tubes
            let grad_desc = match (&model.heads.reduce, grads.reduce.as_mut()) {
                (Some(r), Some(rg)) => {
                    let (gd, g) = r.backward(&feats.desc, &grad_reduced)?;
                    rg.accumulate(&g);
                    gd
                }
                _ => grad_reduced,
            };

            let skip_len = feats.skip_raw.first().map_or(0, |v| v.len());
            let conv5_len = feats.conv5_raw.len();
            let mut grad_conv5_unit = vec![0.0; conv5_len];
            let mut grad_skip_pool = feats
                .skip_pool
                .as_ref()
                .map(|(pc, _)| FeatureCube::zeros(pc.channels(), pc.depth(), pc.height(), pc.width()));
            for f in 0..frames {
                let gvec: Vec<f64> = (0..grad_desc.channels())
                    .map(|c| grad_desc.at(c, f, 0, 0))
                    .collect();
                if skip_len > 0 {
                    let graw = l2norm_backward(
                        &feats.skip_raw[f],
                        feats.skip_norms[f],
                        &gvec[0..skip_len],
                    );
                    let gp = grad_skip_pool.as_mut().unwrap();
                    let (pc, _, ph, pw) = gp.dims();
                    let mut i = 0;
                    for c in 0..pc {
                        for y in 0..ph {
                            for x in 0..pw {
                                *gp.at_mut(c, f, y, x) += graw[i];
                                i += 1;
                            }
                        }
                    }
                }
                for (i, g) in gvec[skip_len..].iter().enumerate() {
                    grad_conv5_unit[i] += g;
                }
            }
            // conv5 tube was duplicated across frames; its normalization
            // gradient accumulates once over the summed frame grads
            let graw5 = l2norm_backward(&feats.conv5_raw, feats.conv5_norm, &grad_conv5_unit);
            let gp5 = FeatureCube::from_vec(
                c5,
                1,
                model.cfg.toi5.height,
                model.cfg.toi5.width,
                graw5,
            )?;
            let g_conv5_from_toi = toi_pool_backward(&gp5, &feats.conv5_pool.1)?;
            for (a, b) in grad_conv5.data_mut().iter_mut().zip(g_conv5_from_toi.data()) {
                *a += b;
            }
            if let (Some(gp), Some((_, arg))) = (&grad_skip_pool, &feats.skip_pool) {
                let g_tap = toi_pool_backward(gp, arg)?;
                let gt = grad_tap.as_mut().unwrap();
                for (a, b) in gt.data_mut().iter_mut().zip(g_tap.data()) {
                    *a += b;
                }
            }
        }
    }

    let skip_grad = match (tap_idx, &grad_tap) {
        (Some(i), Some(g)) => Some((i, g)),
        _ => None,
    };
    let (bb_grads, grad_input) = model.backbone.backward(&acts, grad_conv5, skip_grad)?;
    grads.backbone.accumulate(&bb_grads);

    Ok((
        TpnLossReport {
            total: act_loss + reg_loss,
            actionness: act_loss,
            regression: reg_loss,
            num_scored: score_samples.len(),
            num_regressed: reg_samples.len(),
        },
        grad_input,
    ))
}

impl Conv1x1Grads {
    pub fn accumulate(&mut self, other: &Conv1x1Grads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

impl FCGrads {
    pub fn accumulate(&mut self, other: &FCGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

impl TpnGrads {
    pub fn accumulate(&mut self, other: &TpnGrads) {
        self.backbone.accumulate(&other.backbone);
        self.score.accumulate(&other.score);
        if let (Some(a), Some(b)) = (self.reduce.as_mut(), other.reduce.as_ref()) {
            a.accumulate(b);
        }
        self.fc6.accumulate(&other.fc6);
        self.fc7.accumulate(&other.fc7);
        self.reg.accumulate(&other.reg);
    }
}

/// Maps per-frame ground-truth pixel boxes to the conv5 grid.
pub fn gt_boxes_on_conv5(cfg: &NetConfig, frame_boxes: &[Box2D]) -> Vec<Box2D> {
    let (h5, w5) = cfg.conv5_grid();
    let sx = w5 as f64 / cfg.frame_width as f64;
    let sy = h5 as f64 / cfg.frame_height as f64;
    let mut seen: Vec<Box2D> = Vec::new();
    for b in frame_boxes {
        let m = b.scaled(sx, sy).clamped(w5 as f64, h5 as f64);
        if !seen.iter().any(|s| *s == m) {
            seen.push(m);
        }
    }
    seen
}

/// Per-frame regression targets for a proposal against a ground-truth tube.
pub fn regression_targets(
    cfg: &NetConfig,
    proposal: &BoxProposal,
    gt_frames: &[Box2D],
) -> Vec<[f64; 4]> {
    let (h5, w5) = cfg.conv5_grid();
    let sx = w5 as f64 / cfg.frame_width as f64;
    let sy = h5 as f64 / cfg.frame_height as f64;
    gt_frames
        .iter()
        .map(|g| {
            let on5 = g.scaled(sx, sy).clamped(w5 as f64, h5 as f64);
            encode_deltas(&proposal.box2d, &on5)
        })
        .collect()
}

/// Class-count bookkeeping used by shape checks and the CLI report.
pub fn head_dims(cfg: &NetConfig) -> BTreeMap<String, Vec<usize>> {
    let mut m = BTreeMap::new();
    let c2 = cfg
        .skip_source
        .conv_index()
        .map(|i| cfg.conv_channels[i]);
    if let Some(c) = c2 {
        m.insert(
            "toi-skip".into(),
            vec![c, cfg.toi_skip.depth, cfg.toi_skip.height, cfg.toi_skip.width],
        );
    }
    m.insert(
        "toi-pool5".into(),
        vec![
            cfg.conv_channels[7],
            cfg.toi5.depth,
            cfg.toi5.height,
            cfg.toi5.width,
        ],
    );
    m.insert("1x1-conv".into(), vec![cfg.reduced_dim()]);
    m.insert("fc6".into(), vec![cfg.fc_dim]);
    m.insert("fc7".into(), vec![cfg.fc_dim]);
    m
}
