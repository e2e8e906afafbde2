//! Alternating four-stage optimization of the TPN and recognition networks:
//! initialize the TPN, initialize recognition from its proposals, update the
//! TPN with recognition-tuned shared weights, then finalize recognition.
//! Shared layers (the conv backbone plus fc6/fc7) are copied between the two
//! networks at stage boundaries and verified equal after each hand-off.
//!
//! Batch composition is balanced positive/negative sampling on trimmed data;
//! with negative-sample mining enabled (untrimmed data) the update stage
//! draws 32 positives, 16 random negatives and 16 hard negatives per batch,
//! where hard negatives are the highest-actionness boxes found in clips
//! without any annotation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::anchors::AnchorSet;
use crate::cube::FeatureCube;
use crate::detection::{recognition_loss, RecognitionGrads, RecognitionHead};
use crate::error::{Result, TcnnError};
use crate::exec;
use crate::geom::Box2D;
use crate::layers::{FCGrads, FCLayer};
use crate::net::{Backbone, BackboneGrads, NetConfig};
use crate::rng::substream;
use crate::synth::{cut_clip, SynthVideo};
use crate::tpn::{
    anchor_grid_proposals, gt_boxes_on_conv5, label_proposals, regression_targets, score_anchors,
    tpn_clip_loss, BoxProposal, Label, RegressionSample, ScoreSample, TpnGrads, TpnModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    InitTpn,
    InitRecog,
    UpdateTpn,
    FinalizeRecog,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::InitTpn,
        Stage::InitRecog,
        Stage::UpdateTpn,
        Stage::FinalizeRecog,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::InitTpn => "init_tpn",
            Stage::InitRecog => "init_recog",
            Stage::UpdateTpn => "update_tpn",
            Stage::FinalizeRecog => "finalize_recog",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub lr_after: f64,
    /// Batch index at which the learning rate drops.
    pub lr_drop_batches: usize,
    /// Batches per TPN stage.
    pub total_batches: usize,
    /// Batches per recognition stage.
    pub recog_batches: usize,
    pub clips_per_batch: usize,
    pub momentum: f64,
    /// Enables the negative-sample-mining batch composition in the update
    /// stage (for untrimmed data).
    pub mining: bool,
    pub hard_negative_pool: usize,
    /// Score samples drawn per positive clip under balanced sampling.
    pub samples_per_clip: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // 1/100 of the published 30k/50k schedule
        TrainConfig {
            lr_initial: 1e-3,
            lr_after: 1e-4,
            lr_drop_batches: 300,
            total_batches: 500,
            recog_batches: 150,
            clips_per_batch: 4,
            momentum: 0.9,
            mining: false,
            hard_negative_pool: 64,
            samples_per_clip: 32,
            seed: 0,
        }
    }
}

/// The learning rate is a pure function of the batch index.
pub fn learning_rate(cfg: &TrainConfig, batch: usize) -> f64 {
    if batch < cfg.lr_drop_batches {
        cfg.lr_initial
    } else {
        cfg.lr_after
    }
}

#[derive(Debug, Clone)]
pub struct LossRecord {
    pub stage: Stage,
    pub batch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// A clip location inside the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipRef {
    pub video: usize,
    pub start: usize,
}

/// Ground-truth boxes of a clip, one per frame, pixel coordinates.
pub fn clip_gt(video: &SynthVideo, start: usize, clip_len: usize) -> Vec<Option<Box2D>> {
    (0..clip_len)
        .map(|f| {
            video
                .annotation
                .frames
                .get(start + f)
                .copied()
                .flatten()
        })
        .collect()
}

/// Stride-1 clip references over every video, split into clips with and
/// without any annotated frame.
pub fn index_clips(videos: &[SynthVideo], clip_len: usize) -> (Vec<ClipRef>, Vec<ClipRef>) {
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    for (vi, v) in videos.iter().enumerate() {
        let t = v.annotation.frames.len();
        let starts: Vec<usize> = if t < clip_len {
            vec![0]
        } else {
            (0..=t - clip_len).collect()
        };
        for s in starts {
            let r = ClipRef { video: vi, start: s };
            if clip_gt(v, s, clip_len).iter().any(|b| b.is_some()) {
                positive.push(r);
            } else {
                negative.push(r);
            }
        }
    }
    (positive, negative)
}

/// Balanced score sampling: positives and negatives as close to 1:1 as
/// availability allows, deterministic under the RNG. Returns the samples and
/// whether the degenerate all-negative case was hit.
pub fn balanced_sample(
    proposals: &[BoxProposal],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<ScoreSample>, bool)> {
    if proposals.is_empty() {
        return Err(TcnnError::InvalidArgument("no proposals to sample".into()));
    }
    let pos: Vec<usize> = (0..proposals.len())
        .filter(|&i| proposals[i].label == Label::Positive)
        .collect();
    let neg: Vec<usize> = (0..proposals.len())
        .filter(|&i| proposals[i].label == Label::Negative)
        .collect();
    let half = (batch_size / 2).max(1);
    let n_pos = pos.len().min(half);
    let n_neg = neg.len().min(batch_size - n_pos);
    let mut samples = Vec::with_capacity(n_pos + n_neg);
    let picked_pos = pick(&pos, n_pos, rng);
    for i in picked_pos {
        samples.push(ScoreSample {
            proposal: i,
            target: true,
        });
    }
    for i in pick(&neg, n_neg, rng) {
        samples.push(ScoreSample {
            proposal: i,
            target: false,
        });
    }
    Ok((samples, n_pos == 0))
}

fn pick(pool: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n >= pool.len() {
        return pool.to_vec();
    }
    let mut v = pool.to_vec();
    v.shuffle(rng);
    v.truncate(n);
    v
}

/// One hard negative: a high-actionness box in an unannotated clip.
#[derive(Debug, Clone)]
pub struct HardNegativeBox {
    pub clip: ClipRef,
    pub proposal_index: usize,
    pub actionness: f64,
}

#[derive(Debug, Clone, Default)]
pub struct HardNegativePool {
    /// Sorted by actionness, highest first.
    pub boxes: Vec<HardNegativeBox>,
}

/// Scores every box in every negative clip and keeps the `pool_size` with
/// the highest actionness (low scores are probably image background). Ties
/// break by clip order then proposal index.
pub fn mine_hard_negatives(
    model: &TpnModel,
    videos: &[SynthVideo],
    negative_clips: &[ClipRef],
    pool_size: usize,
) -> Result<HardNegativePool> {
    if negative_clips.is_empty() {
        return Err(TcnnError::InvalidArgument("no negative clips".into()));
    }
    let cfg = &model.cfg;
    let work = negative_clips.len() * cfg.frame_height * cfg.frame_width * cfg.clip_len * 64;
    let scored: Vec<Result<Vec<HardNegativeBox>>> =
        exec::map_indexed(negative_clips.len(), work, |ci| {
            let r = negative_clips[ci];
            let clip = cut_clip(&videos[r.video].frames, r.start, cfg.clip_len);
            let (_, conv5) = model
                .backbone
                .forward_features(&clip.frames, crate::net::SkipSource::None)?;
            let props = score_anchors(&conv5, &model.heads.score, &model.anchors, 0.0)?;
            Ok(props
                .iter()
                .enumerate()
                .map(|(pi, p)| HardNegativeBox {
                    clip: r,
                    proposal_index: pi,
                    actionness: p.actionness,
                })
                .collect())
        });
    let mut all = Vec::new();
    for s in scored {
        all.extend(s?);
    }
    all.sort_by(|a, b| {
        b.actionness
            .partial_cmp(&a.actionness)
            .unwrap()
            .then(a.clip.video.cmp(&b.clip.video))
            .then(a.clip.start.cmp(&b.clip.start))
            .then(a.proposal_index.cmp(&b.proposal_index))
    });
    all.truncate(pool_size);
    Ok(HardNegativePool { boxes: all })
}

// ---------------------------------------------------------------------------
// optimizers
// ---------------------------------------------------------------------------

fn sgd(w: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, momentum: f64) {
    for i in 0..w.len() {
        v[i] = momentum * v[i] - lr * g[i];
        w[i] += v[i];
    }
}

pub struct TpnOptimizer {
    vel: TpnGrads,
    pub momentum: f64,
}

impl TpnOptimizer {
    pub fn new(model: &TpnModel, momentum: f64) -> Self {
        TpnOptimizer {
            vel: model.zero_grads(),
            momentum,
        }
    }

    pub fn step(&mut self, model: &mut TpnModel, grads: &TpnGrads, lr: f64) {
        for ((conv, v), g) in model
            .backbone
            .convs
            .iter_mut()
            .zip(&mut self.vel.backbone.convs)
            .zip(&grads.backbone.convs)
        {
            sgd(&mut conv.kernel, &mut v.kernel, &g.kernel, lr, self.momentum);
            sgd(&mut conv.bias, &mut v.bias, &g.bias, lr, self.momentum);
        }
        sgd(&mut model.heads.score.weights, &mut self.vel.score.weights, &grads.score.weights, lr, self.momentum);
        sgd(&mut model.heads.score.bias, &mut self.vel.score.bias, &grads.score.bias, lr, self.momentum);
        if let (Some(r), Some(rv), Some(rg)) = (
            model.heads.reduce.as_mut(),
            self.vel.reduce.as_mut(),
            grads.reduce.as_ref(),
        ) {
            sgd(&mut r.weights, &mut rv.weights, &rg.weights, lr, self.momentum);
            sgd(&mut r.bias, &mut rv.bias, &rg.bias, lr, self.momentum);
        }
        for (fc, (v, g)) in [
            (&mut model.heads.fc6, (&mut self.vel.fc6, &grads.fc6)),
            (&mut model.heads.fc7, (&mut self.vel.fc7, &grads.fc7)),
            (&mut model.heads.reg, (&mut self.vel.reg, &grads.reg)),
        ] {
            sgd(&mut fc.weights, &mut v.weights, &g.weights, lr, self.momentum);
            sgd(&mut fc.bias, &mut v.bias, &g.bias, lr, self.momentum);
        }
    }
}

pub struct RecogOptimizer {
    vel_backbone: BackboneGrads,
    vel_fc6: FCGrads,
    vel_fc7: FCGrads,
    vel_cls: FCGrads,
    pub momentum: f64,
}

impl RecogOptimizer {
    pub fn new(backbone: &Backbone, head: &RecognitionHead, momentum: f64) -> Self {
        RecogOptimizer {
            vel_backbone: backbone.zero_grads(),
            vel_fc6: head.fc6.zero_grads(),
            vel_fc7: head.fc7.zero_grads(),
            vel_cls: head.classifier.zero_grads(),
            momentum,
        }
    }

    pub fn step(
        &mut self,
        backbone: &mut Backbone,
        head: &mut RecognitionHead,
        gb: &BackboneGrads,
        gh: &RecognitionGrads,
        lr: f64,
    ) {
        for ((conv, v), g) in backbone
            .convs
            .iter_mut()
            .zip(&mut self.vel_backbone.convs)
            .zip(&gb.convs)
        {
            sgd(&mut conv.kernel, &mut v.kernel, &g.kernel, lr, self.momentum);
            sgd(&mut conv.bias, &mut v.bias, &g.bias, lr, self.momentum);
        }
        for (fc, (v, g)) in [
            (&mut head.fc6, (&mut self.vel_fc6, &gh.fc6)),
            (&mut head.fc7, (&mut self.vel_fc7, &gh.fc7)),
            (&mut head.classifier, (&mut self.vel_cls, &gh.classifier)),
        ] {
            sgd(&mut fc.weights, &mut v.weights, &g.weights, lr, self.momentum);
            sgd(&mut fc.bias, &mut v.bias, &g.bias, lr, self.momentum);
        }
    }
}

// ---------------------------------------------------------------------------
// shared-layer hand-offs
// ---------------------------------------------------------------------------

pub fn copy_shared_tpn_to_recog(
    tpn: &TpnModel,
    backbone: &mut Backbone,
    head: &mut RecognitionHead,
) {
    *backbone = tpn.backbone.clone();
    head.fc6 = tpn.heads.fc6.clone();
    head.fc7 = tpn.heads.fc7.clone();
}

pub fn copy_shared_recog_to_tpn(
    backbone: &Backbone,
    head: &RecognitionHead,
    tpn: &mut TpnModel,
) {
    tpn.backbone = backbone.clone();
    tpn.heads.fc6 = head.fc6.clone();
    tpn.heads.fc7 = head.fc7.clone();
}

pub fn shared_layers_equal(
    tpn: &TpnModel,
    backbone: &Backbone,
    head: &RecognitionHead,
) -> bool {
    let convs_eq = tpn
        .backbone
        .convs
        .iter()
        .zip(&backbone.convs)
        .all(|(a, b)| a.kernel == b.kernel && a.bias == b.bias);
    let fc_eq = |a: &FCLayer, b: &FCLayer| a.weights == b.weights && a.bias == b.bias;
    convs_eq && fc_eq(&tpn.heads.fc6, &head.fc6) && fc_eq(&tpn.heads.fc7, &head.fc7)
}

// ---------------------------------------------------------------------------
// stage runners
// ---------------------------------------------------------------------------

/// Work order for one clip inside a TPN batch.
struct ClipTask {
    clip_ref: ClipRef,
    score_samples: Vec<ScoreSample>,
    reg_samples: Vec<RegressionSample>,
    proposals: Vec<BoxProposal>,
}

/// Labels the anchor grid against a clip's ground truth; geometry only, no
/// forward pass needed.
fn labeled_grid(model: &TpnModel, videos: &[SynthVideo], r: ClipRef) -> (Vec<BoxProposal>, Vec<Option<Box2D>>) {
    let cfg = &model.cfg;
    let video = &videos[r.video];
    let gt = clip_gt(video, r.start, cfg.clip_len);
    let gt_present: Vec<Box2D> = gt.iter().flatten().copied().collect();
    let mut proposals = anchor_grid_proposals(cfg, &model.anchors);
    let gts5 = gt_boxes_on_conv5(cfg, &gt_present);
    label_proposals(&mut proposals, &gts5);
    (proposals, gt)
}

/// Per-clip regression samples for fully annotated clips, capped.
fn regression_for(
    cfg: &NetConfig,
    proposals: &[BoxProposal],
    gt: &[Option<Box2D>],
    cap: usize,
) -> Vec<RegressionSample> {
    if !gt.iter().all(|b| b.is_some()) {
        return Vec::new();
    }
    let gt_frames: Vec<Box2D> = gt.iter().map(|b| b.unwrap()).collect();
    let mut out = Vec::new();
    for (i, p) in proposals.iter().enumerate() {
        if p.label == Label::Positive {
            out.push(RegressionSample {
                proposal: i,
                targets: regression_targets(cfg, p, &gt_frames),
            });
            if out.len() == cap {
                break;
            }
        }
    }
    out
}

fn prepare_positive_clip(
    model: &TpnModel,
    videos: &[SynthVideo],
    r: ClipRef,
    samples_per_clip: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ClipTask> {
    let (proposals, gt) = labeled_grid(model, videos, r);
    let (score_samples, _) = balanced_sample(&proposals, samples_per_clip, rng)?;
    let reg_samples = regression_for(&model.cfg, &proposals, &gt, 4);
    Ok(ClipTask {
        clip_ref: r,
        score_samples,
        reg_samples,
        proposals,
    })
}

/// Runs the prepared clip tasks in parallel and reduces gradients in clip
/// order, then applies one SGD step.
fn run_tpn_batch(
    model: &mut TpnModel,
    videos: &[SynthVideo],
    tasks: Vec<ClipTask>,
    opt: &mut TpnOptimizer,
    lr: f64,
) -> Result<f64> {
    let cfg_len = model.cfg.clip_len;
    let model_ref = &*model;
    let work = tasks.len() * 1_000_000;
    let results: Vec<Result<(f64, TpnGrads)>> = exec::map_indexed(tasks.len(), work, |i| {
        let t = &tasks[i];
        let clip = cut_clip(&videos[t.clip_ref.video].frames, t.clip_ref.start, cfg_len);
        let mut grads = model_ref.zero_grads();
        let (report, _) = tpn_clip_loss(
            model_ref,
            &clip.frames,
            &t.proposals,
            &t.score_samples,
            &t.reg_samples,
            &mut grads,
        )?;
        Ok((report.total, grads))
    });

    let mut total = 0.0;
    let mut acc = model.zero_grads();
    let mut n = 0usize;
    for r in results {
        let (loss, g) = r?;
        total += loss;
        acc.accumulate(&g);
        n += 1;
    }
    if n == 0 {
        return Ok(0.0);
    }
    scale_tpn_grads(&mut acc, 1.0 / n as f64);
    opt.step(model, &acc, lr);
    Ok(total / n as f64)
}

fn scale_tpn_grads(g: &mut TpnGrads, s: f64) {
    for c in &mut g.backbone.convs {
        for v in c.kernel.iter_mut().chain(c.bias.iter_mut()) {
            *v *= s;
        }
    }
    for v in g.score.weights.iter_mut().chain(g.score.bias.iter_mut()) {
        *v *= s;
    }
    if let Some(r) = g.reduce.as_mut() {
        for v in r.weights.iter_mut().chain(r.bias.iter_mut()) {
            *v *= s;
        }
    }
    for fc in [&mut g.fc6, &mut g.fc7, &mut g.reg] {
        for v in fc.weights.iter_mut().chain(fc.bias.iter_mut()) {
            *v *= s;
        }
    }
}

/// The 32/16/16 mining batch composition: how many positives, random
/// negatives and hard negatives to draw given what is available. Slots that
/// positives cannot fill go to extra random negatives so the batch size
/// stays fixed.
pub fn plan_batch_counts(
    pos_available: usize,
    neg_available: usize,
    hard_available: usize,
) -> (usize, usize, usize) {
    let n_pos = pos_available.min(32);
    let n_rand = (16 + (32 - n_pos)).min(neg_available);
    let n_hard = hard_available.min(16);
    (n_pos, n_rand, n_hard)
}

/// A TPN training stage over positive clips, optionally mixing mined hard
/// negatives into each batch (32 positives / 16 random / 16 hard when the
/// pools suffice).
#[allow(clippy::too_many_arguments)]
fn train_tpn_stage(
    model: &mut TpnModel,
    videos: &[SynthVideo],
    positive_clips: &[ClipRef],
    hard_pool: Option<&HardNegativePool>,
    tc: &TrainConfig,
    stage: Stage,
    records: &mut Vec<LossRecord>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut opt = TpnOptimizer::new(model, tc.momentum);
    for batch in 0..tc.total_batches {
        let lr = learning_rate(tc, batch);
        let mut tasks = Vec::with_capacity(tc.clips_per_batch + 2);
        match hard_pool {
            None => {
                for _ in 0..tc.clips_per_batch {
                    let r = positive_clips[rng.random_range(0..positive_clips.len())];
                    tasks.push(prepare_positive_clip(model, videos, r, tc.samples_per_clip, rng)?);
                }
            }
            Some(pool) => {
                // gather labeled grids for the batch's positive clips
                let mut grids = Vec::with_capacity(tc.clips_per_batch);
                for _ in 0..tc.clips_per_batch {
                    let r = positive_clips[rng.random_range(0..positive_clips.len())];
                    grids.push((r, labeled_grid(model, videos, r)));
                }
                let pos_avail: usize = grids
                    .iter()
                    .map(|(_, (props, _))| {
                        props.iter().filter(|p| p.label == Label::Positive).count()
                    })
                    .sum();
                let neg_avail: usize = grids
                    .iter()
                    .map(|(_, (props, _))| {
                        props.iter().filter(|p| p.label == Label::Negative).count()
                    })
                    .sum();
                let (mut pos_budget, mut rand_budget, hard_n) =
                    plan_batch_counts(pos_avail, neg_avail, pool.boxes.len());
                let per_clip_rand = rand_budget.div_ceil(grids.len().max(1));
                for (r, (proposals, gt)) in grids {
                    let pos: Vec<usize> = (0..proposals.len())
                        .filter(|&i| proposals[i].label == Label::Positive)
                        .collect();
                    let neg: Vec<usize> = (0..proposals.len())
                        .filter(|&i| proposals[i].label == Label::Negative)
                        .collect();
                    let take_pos = pos.len().min(pos_budget);
                    let take_neg = per_clip_rand.min(rand_budget).min(neg.len());
                    let mut score_samples = Vec::with_capacity(take_pos + take_neg);
                    for i in pick(&pos, take_pos, rng) {
                        score_samples.push(ScoreSample {
                            proposal: i,
                            target: true,
                        });
                    }
                    for i in pick(&neg, take_neg, rng) {
                        score_samples.push(ScoreSample {
                            proposal: i,
                            target: false,
                        });
                    }
                    pos_budget -= take_pos;
                    rand_budget -= take_neg;
                    let reg_samples = regression_for(&model.cfg, &proposals, &gt, 4);
                    tasks.push(ClipTask {
                        clip_ref: r,
                        score_samples,
                        reg_samples,
                        proposals,
                    });
                }
                // hard negatives, grouped by clip to bound forward passes
                let mut by_clip: Vec<(ClipRef, Vec<usize>)> = Vec::new();
                for b in &pool.boxes {
                    match by_clip.iter_mut().find(|(c, _)| *c == b.clip) {
                        Some((_, v)) => v.push(b.proposal_index),
                        None => by_clip.push((b.clip, vec![b.proposal_index])),
                    }
                }
                by_clip.shuffle(rng);
                let mut hard_budget = hard_n;
                for (clip_ref, prop_idxs) in by_clip {
                    if hard_budget == 0 {
                        break;
                    }
                    let proposals = anchor_grid_proposals(&model.cfg, &model.anchors);
                    let take = prop_idxs.len().min(hard_budget);
                    let score_samples: Vec<ScoreSample> = prop_idxs[..take]
                        .iter()
                        .map(|&i| ScoreSample {
                            proposal: i,
                            target: false,
                        })
                        .collect();
                    hard_budget -= take;
                    tasks.push(ClipTask {
                        clip_ref,
                        score_samples,
                        reg_samples: Vec::new(),
                        proposals,
                    });
                }
            }
        }
        let loss = run_tpn_batch(model, videos, tasks, &mut opt, lr)?;
        records.push(LossRecord {
            stage,
            batch,
            loss,
            lr,
        });
    }
    Ok(())
}

/// Recognition training cases for one video: conv5-grid boxes per clip with
/// a class target (0 = background).
struct VideoPack {
    video: usize,
    clip_starts: Vec<usize>,
    cases: Vec<(Vec<Box2D>, usize)>,
}

/// Proposes and links with the frozen TPN once per video, labels the top
/// sequences by tube overlap with the ground truth, and adds the
/// ground-truth tube itself as a clean positive (proposals are still rough
/// when recognition training starts, which would starve the action classes).
fn build_video_packs(
    tpn: &TpnModel,
    videos: &[SynthVideo],
    tc: &TrainConfig,
) -> Result<Vec<VideoPack>> {
    use crate::linking::top_k_sequences;
    use crate::synth::{clip_divide, ClipMode};

    let cfg = &tpn.cfg;
    let work = videos.len() * 1_000_000;
    let packs: Vec<Result<VideoPack>> = exec::map_indexed(videos.len(), work, |vi| {
        let v = &videos[vi];
        let clips = clip_divide(&v.frames, cfg.clip_len, ClipMode::TestNonOverlapping)?;
        let mut per_clip = Vec::with_capacity(clips.len());
        for (ci, clip) in clips.iter().enumerate() {
            per_clip.push(crate::tpn::propose_clip(tpn, &clip.frames, ci, 0.0, 4)?);
        }
        let gt_tube = v.annotation.tube();
        let sequences = top_k_sequences(&per_clip, 2)?;
        let mut cases: Vec<(Vec<Box2D>, usize)> = Vec::new();
        for seq in &sequences {
            let frames: Vec<(usize, Box2D)> = seq
                .tube_indices
                .iter()
                .enumerate()
                .flat_map(|(ci, &p)| {
                    let start = clips[ci].start_frame;
                    per_clip[ci][p]
                        .frame_boxes
                        .iter()
                        .enumerate()
                        .map(move |(f, b)| (start + f, *b))
                        .collect::<Vec<_>>()
                })
                .filter(|(f, _)| *f < v.annotation.frames.len())
                .collect();
            let overlap = crate::detection::sequence_iou(&frames, &gt_tube);
            let label = if overlap >= 0.5 {
                v.annotation.class_label
            } else {
                0
            };
            let boxes: Vec<Box2D> = seq
                .tube_indices
                .iter()
                .enumerate()
                .map(|(ci, &p)| per_clip[ci][p].conv5_box)
                .collect();
            cases.push((boxes, label));
        }
        if v.annotation.frames.iter().all(|b| b.is_some()) {
            let (h5, w5) = cfg.conv5_grid();
            let sx = w5 as f64 / cfg.frame_width as f64;
            let sy = h5 as f64 / cfg.frame_height as f64;
            let gt_boxes: Vec<Box2D> = clips
                .iter()
                .map(|c| {
                    let mid = (c.start_frame + cfg.clip_len / 2)
                        .min(v.annotation.frames.len() - 1);
                    let b = v.annotation.frames[mid]
                        .unwrap_or_else(|| v.annotation.frames[c.start_frame].unwrap());
                    b.scaled(sx, sy).clamped(w5 as f64, h5 as f64)
                })
                .collect();
            cases.push((gt_boxes, v.annotation.class_label));
        }
        Ok(VideoPack {
            video: vi,
            clip_starts: clips.iter().map(|c| c.start_frame).collect(),
            cases,
        })
    });
    let _ = tc;
    packs.into_iter().collect()
}

/// Recognition training stage: fit cross-entropy end to end through ToI
/// pooling and the recognition backbone on the precomputed sequence cases.
#[allow(clippy::too_many_arguments)]
fn train_recog_stage(
    tpn: &TpnModel,
    backbone: &mut Backbone,
    head: &mut RecognitionHead,
    videos: &[SynthVideo],
    tc: &TrainConfig,
    stage: Stage,
    records: &mut Vec<LossRecord>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let cfg = &tpn.cfg;
    if tc.recog_batches == 0 {
        return Ok(());
    }
    let packs = build_video_packs(tpn, videos, tc)?;
    let mut opt = RecogOptimizer::new(backbone, head, tc.momentum);
    let videos_per_batch = tc.clips_per_batch.max(1);

    for batch in 0..tc.recog_batches {
        let lr = learning_rate(tc, batch);
        let picked: Vec<usize> = (0..videos_per_batch)
            .map(|_| rng.random_range(0..packs.len()))
            .collect();

        let bb_ref = &*backbone;
        let head_ref = &*head;
        let work = picked.len() * 1_000_000;
        type VideoGrad = (f64, usize, BackboneGrads, RecognitionGrads);
        let results: Vec<Result<VideoGrad>> = exec::map_indexed(picked.len(), work, |bi| {
            let pack = &packs[picked[bi]];
            let v = &videos[pack.video];
            let mut gb = bb_ref.zero_grads();
            let mut gh = head_ref.zero_grads();
            let mut total = 0.0;
            let mut count = 0usize;

            let mut acts = Vec::with_capacity(pack.clip_starts.len());
            for &start in &pack.clip_starts {
                let clip = cut_clip(&v.frames, start, cfg.clip_len);
                acts.push(bb_ref.forward(&clip.frames)?);
            }
            let conv5s: Vec<&FeatureCube> = acts.iter().map(|a| a.conv5()).collect();
            let seq_cube = crate::detection::concat_conv5(&conv5s)?;
            let d = conv5s[0].depth();

            for (case_idx, (boxes_per_clip, label)) in pack.cases.iter().enumerate() {
                let boxes: Vec<Box2D> = boxes_per_clip
                    .iter()
                    .flat_map(|b| std::iter::repeat(*b).take(d))
                    .collect();
                let mut drop_rng = crate::rng::substream_indexed(
                    tc.seed,
                    "dropout",
                    ((batch * videos_per_batch + bi) * 64 + case_idx) as u64,
                );
                let (loss, gcube) = recognition_loss(
                    cfg,
                    head_ref,
                    &seq_cube,
                    &boxes,
                    *label,
                    Some(&mut drop_rng),
                    &mut gh,
                )?;
                total += loss;
                count += 1;
                for (ci, act) in acts.iter().enumerate() {
                    let (c5c, _, h5c, w5c) = act.conv5().dims();
                    let mut gclip = FeatureCube::zeros(c5c, d, h5c, w5c);
                    for ch in 0..c5c {
                        for di in 0..d {
                            let src = gcube.frame(ch, ci * d + di);
                            let dst = gclip.index(ch, di, 0, 0);
                            gclip.data_mut()[dst..dst + src.len()].copy_from_slice(src);
                        }
                    }
                    let (g, _) = bb_ref.backward(act, gclip, None)?;
                    gb.accumulate(&g);
                }
            }
            Ok((total, count, gb, gh))
        });

        let mut gb = backbone.zero_grads();
        let mut gh = head.zero_grads();
        let mut total = 0.0;
        let mut count = 0usize;
        for r in results {
            let (t, c, b, h) = r?;
            total += t;
            count += c;
            gb.accumulate(&b);
            gh.fc6.accumulate(&h.fc6);
            gh.fc7.accumulate(&h.fc7);
            gh.classifier.accumulate(&h.classifier);
        }

        let loss = if count > 0 {
            let s = 1.0 / count as f64;
            for c in &mut gb.convs {
                for v in c.kernel.iter_mut().chain(c.bias.iter_mut()) {
                    *v *= s;
                }
            }
            for fc in [&mut gh.fc6, &mut gh.fc7, &mut gh.classifier] {
                for v in fc.weights.iter_mut().chain(fc.bias.iter_mut()) {
                    *v *= s;
                }
            }
            opt.step(backbone, head, &gb, &gh, lr);
            total / count as f64
        } else {
            0.0
        };
        records.push(LossRecord {
            stage,
            batch,
            loss,
            lr,
        });
    }
    Ok(())
}

/// The trained pair of networks.
pub struct TrainedModels {
    pub tpn: TpnModel,
    pub recog_backbone: Backbone,
    pub recog_head: RecognitionHead,
    pub records: Vec<LossRecord>,
    pub hard_pool: Option<HardNegativePool>,
}

/// Runs the four alternating stages. With zero batches the returned
/// parameters equal the initialization.
pub fn alternate_train(
    videos: &[SynthVideo],
    cfg: &NetConfig,
    anchors: &AnchorSet,
    tc: &TrainConfig,
) -> Result<TrainedModels> {
    if videos.is_empty() {
        return Err(TcnnError::InvalidArgument("empty dataset".into()));
    }
    let mut init_rng = substream(tc.seed, "model-init");
    let mut tpn = TpnModel::init(cfg.clone(), anchors.clone(), &mut init_rng);
    let mut recog_backbone = tpn.backbone.clone();
    let mut recog_head = RecognitionHead::init(cfg, &mut init_rng);
    recog_head.fc6 = tpn.heads.fc6.clone();
    recog_head.fc7 = tpn.heads.fc7.clone();

    let (positive_clips, negative_clips) = index_clips(videos, cfg.clip_len);
    if positive_clips.is_empty() {
        return Err(TcnnError::InvalidArgument(
            "dataset has no annotated clips".into(),
        ));
    }
    let mut records = Vec::new();
    let mut rng = substream(tc.seed, "train");

    // stage 1: initialize TPN on positive clips only
    train_tpn_stage(
        &mut tpn,
        videos,
        &positive_clips,
        None,
        tc,
        Stage::InitTpn,
        &mut records,
        &mut rng,
    )?;

    // mine hard negatives once the TPN can score boxes
    let hard_pool = if tc.mining && !negative_clips.is_empty() {
        Some(mine_hard_negatives(
            &tpn,
            videos,
            &negative_clips,
            tc.hard_negative_pool,
        )?)
    } else {
        None
    };

    // stage 2: initialize recognition from TPN proposals
    copy_shared_tpn_to_recog(&tpn, &mut recog_backbone, &mut recog_head);
    debug_assert!(shared_layers_equal(&tpn, &recog_backbone, &recog_head));
    train_recog_stage(
        &tpn,
        &mut recog_backbone,
        &mut recog_head,
        videos,
        tc,
        Stage::InitRecog,
        &mut records,
        &mut rng,
    )?;

    // stage 3: update TPN with recognition-tuned shared weights
    copy_shared_recog_to_tpn(&recog_backbone, &recog_head, &mut tpn);
    debug_assert!(shared_layers_equal(&tpn, &recog_backbone, &recog_head));
    train_tpn_stage(
        &mut tpn,
        videos,
        &positive_clips,
        hard_pool.as_ref(),
        tc,
        Stage::UpdateTpn,
        &mut records,
        &mut rng,
    )?;

    // stage 4: finalize recognition with the updated TPN
    copy_shared_tpn_to_recog(&tpn, &mut recog_backbone, &mut recog_head);
    debug_assert!(shared_layers_equal(&tpn, &recog_backbone, &recog_head));
    train_recog_stage(
        &tpn,
        &mut recog_backbone,
        &mut recog_head,
        videos,
        tc,
        Stage::FinalizeRecog,
        &mut records,
        &mut rng,
    )?;

    Ok(TrainedModels {
        tpn,
        recog_backbone,
        recog_head,
        records,
        hard_pool,
    })
}
