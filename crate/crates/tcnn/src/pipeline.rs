//! End-to-end detection: clip division, tube proposals, linking,
//! recognition and NMS, plus full-model checkpointing.

use std::path::Path;

use crate::anchors::AnchorSet;
use crate::cube::FeatureCube;
use crate::detection::{
    classify_sequence, nms_sequences, Detection, RecognitionHead,
};
use crate::error::Result;
use crate::formats::PipelineConfig;
use crate::geom::Box2D;
use crate::linking::top_k_sequences;
use crate::net::{load_checkpoint, save_checkpoint, Backbone, NetConfig, ParamMap, SkipSource};
use crate::rng::substream;
use crate::synth::{clip_divide, ClipMode, SynthVideo};
use crate::toi::TubeOfInterest;
use crate::tpn::{propose_from_features, TpnModel};
use crate::training::TrainedModels;

/// Everything needed to run detection: the proposal network and the
/// recognition network (each with its own copy of the shared layers).
pub struct DetectModel {
    pub tpn: TpnModel,
    pub recog_backbone: Backbone,
    pub recog_head: RecognitionHead,
}

impl DetectModel {
    pub fn init(cfg: &NetConfig, anchors: AnchorSet, seed: u64) -> Self {
        let mut rng = substream(seed, "model-init");
        let tpn = TpnModel::init(cfg.clone(), anchors, &mut rng);
        let recog_backbone = tpn.backbone.clone();
        let mut recog_head = RecognitionHead::init(cfg, &mut rng);
        recog_head.fc6 = tpn.heads.fc6.clone();
        recog_head.fc7 = tpn.heads.fc7.clone();
        DetectModel {
            tpn,
            recog_backbone,
            recog_head,
        }
    }

    pub fn from_trained(t: TrainedModels) -> Self {
        DetectModel {
            tpn: t.tpn,
            recog_backbone: t.recog_backbone,
            recog_head: t.recog_head,
        }
    }

    pub fn to_params(&self) -> ParamMap {
        let mut p = self.tpn.to_params("tpn");
        crate::tpn::collect_backbone(&mut p, "recog", &self.recog_backbone);
        self.recog_head.to_params("recog", &mut p);
        p
    }

    pub fn load_params(&mut self, p: &ParamMap) -> Result<()> {
        self.tpn.load_params("tpn", p)?;
        crate::tpn::load_backbone(p, "recog", &mut self.recog_backbone)?;
        self.recog_head.load_params("recog", p)
    }

    /// Saves parameters plus the pipeline configuration that shaped them.
    pub fn save(&self, dir: &Path, cfg: &PipelineConfig) -> Result<()> {
        save_checkpoint(dir, &self.to_params())?;
        cfg.write(&dir.join("config.txt"))
    }

    pub fn load(dir: &Path) -> Result<(Self, PipelineConfig)> {
        let pc = PipelineConfig::read(&dir.join("config.txt"))?;
        let net = pc.net_config()?;
        let params = load_checkpoint(dir)?;
        // anchor count shapes the scoring head, so read the anchors first
        let (dims, data) = params.get("tpn.anchors").ok_or_else(|| {
            crate::error::TcnnError::Format {
                path: dir.join("manifest.txt"),
                msg: "checkpoint missing tpn.anchors".into(),
            }
        })?;
        if dims.len() != 2 || dims[1] != 2 {
            return Err(crate::error::TcnnError::Format {
                path: dir.join("manifest.txt"),
                msg: "tpn.anchors must be k x 2".into(),
            });
        }
        let anchors = AnchorSet {
            anchors: data
                .chunks_exact(2)
                .map(|c| crate::anchors::AnchorBox {
                    width: c[0],
                    height: c[1],
                })
                .collect(),
        };
        let mut model = DetectModel::init(&net, anchors, pc.seed);
        model.load_params(&params)?;
        Ok((model, pc))
    }
}

/// Runtime detection thresholds.
#[derive(Debug, Clone, Copy)]
pub struct DetectParams {
    pub actionness_threshold: f64,
    pub nms_threshold: f64,
    pub top_k: usize,
    pub proposals_per_clip: usize,
}

impl From<&PipelineConfig> for DetectParams {
    fn from(c: &PipelineConfig) -> Self {
        DetectParams {
            actionness_threshold: c.actionness_threshold,
            nms_threshold: c.nms_threshold,
            top_k: c.top_k,
            proposals_per_clip: c.proposals_per_clip,
        }
    }
}

/// Full detection for one video: non-overlapping clips through the TPN,
/// exact top-K linking, recognition of every linked sequence, and class-wise
/// NMS. Background classifications are dropped.
pub fn detect_video(
    model: &DetectModel,
    frames: &FeatureCube,
    video_id: &str,
    params: &DetectParams,
) -> Result<Vec<Detection>> {
    let cfg = &model.tpn.cfg;
    let total_frames = frames.depth();
    let clips = clip_divide(frames, cfg.clip_len, ClipMode::TestNonOverlapping)?;

    let mut per_clip = Vec::with_capacity(clips.len());
    let mut recog_conv5 = Vec::with_capacity(clips.len());
    for (ci, clip) in clips.iter().enumerate() {
        let (tap, conv5) = model
            .tpn
            .backbone
            .forward_features(&clip.frames, cfg.skip_source)?;
        let tubes = propose_from_features(
            &model.tpn,
            tap.as_ref(),
            &conv5,
            ci,
            params.actionness_threshold,
            params.proposals_per_clip,
        )?;
        per_clip.push(tubes);
        let (_, rc5) = model
            .recog_backbone
            .forward_features(&clip.frames, SkipSource::None)?;
        recog_conv5.push(rc5);
    }

    let sequences = top_k_sequences(&per_clip, params.top_k)?;
    let conv5_refs: Vec<&FeatureCube> = recog_conv5.iter().collect();

    let mut detections = Vec::new();
    for seq in &sequences {
        let boxes: Vec<Box2D> = seq
            .tube_indices
            .iter()
            .enumerate()
            .map(|(ci, &p)| per_clip[ci][p].conv5_box)
            .collect();
        let probs = classify_sequence(cfg, &model.recog_head, &conv5_refs, &boxes)?;
        let (class_id, confidence) = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, &p)| (i, p))
            .unwrap();
        if class_id == 0 {
            continue;
        }
        let mut det_frames = Vec::with_capacity(clips.len() * cfg.clip_len);
        for (ci, &p) in seq.tube_indices.iter().enumerate() {
            for (f, b) in per_clip[ci][p].frame_boxes.iter().enumerate() {
                let frame = clips[ci].start_frame + f;
                if frame < total_frames {
                    det_frames.push((frame, *b));
                }
            }
        }
        detections.push(Detection {
            video_id: video_id.to_string(),
            class_id,
            confidence,
            frames: det_frames,
        });
    }

    Ok(nms_sequences(&detections, params.nms_threshold))
}

/// Detects over a set of videos; output ordered by (video, confidence desc).
pub fn detect_videos(
    model: &DetectModel,
    videos: &[SynthVideo],
    params: &DetectParams,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for v in videos {
        out.extend(detect_video(model, &v.frames, &v.id, params)?);
    }
    out.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then(b.confidence.partial_cmp(&a.confidence).unwrap())
            .then(a.class_id.cmp(&b.class_id))
    });
    Ok(out)
}

/// The pooling-as-classifier variant: the whole video is one tube of
/// full-frame boxes over the concatenated conv5 cubes, pooled to depth 1 and
/// classified. Returns the argmax action class (background excluded, since
/// every video in this protocol has a label).
pub fn classify_video(model: &DetectModel, frames: &FeatureCube) -> Result<usize> {
    let cfg = &model.tpn.cfg;
    let clips = clip_divide(frames, cfg.clip_len, ClipMode::TestNonOverlapping)?;
    let mut recog_conv5 = Vec::with_capacity(clips.len());
    for clip in &clips {
        let (_, c5) = model
            .recog_backbone
            .forward_features(&clip.frames, SkipSource::None)?;
        recog_conv5.push(c5);
    }
    let conv5_refs: Vec<&FeatureCube> = recog_conv5.iter().collect();
    let (h5, w5) = cfg.conv5_grid();
    let full = TubeOfInterest::full(1, h5, w5).boxes[0];
    let boxes = vec![full; clips.len()];
    let probs = classify_sequence(cfg, &model.recog_head, &conv5_refs, &boxes)?;
    let best = probs
        .iter()
        .enumerate()
        .skip(1)
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(1);
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::AnchorBox;
    use crate::synth::{generate, SynthSpec};

    fn small_model() -> (DetectModel, SynthSpec) {
        let spec = SynthSpec {
            num_videos: 2,
            frames_per_video: 18,
            frame_height: 36,
            frame_width: 48,
            seed: 21,
            ..SynthSpec::default()
        };
        let mut cfg = NetConfig::tiny(spec.num_classes);
        cfg.in_channels = 3;
        cfg.frame_height = 36;
        cfg.frame_width = 48;
        let anchors = AnchorSet {
            anchors: vec![
                AnchorBox {
                    width: 0.4,
                    height: 0.4,
                },
                AnchorBox {
                    width: 0.7,
                    height: 0.7,
                },
            ],
        };
        (DetectModel::init(&cfg, anchors, 3), spec)
    }

    #[test]
    fn detect_handles_short_video_via_padding() {
        let (model, _) = small_model();
        let frames = FeatureCube::zeros(3, 5, 36, 48);
        let params = DetectParams {
            actionness_threshold: 0.5,
            nms_threshold: 0.3,
            top_k: 4,
            proposals_per_clip: 3,
        };
        let dets = detect_video(&model, &frames, "v0", &params).unwrap();
        for d in &dets {
            for (f, _) in &d.frames {
                assert!(*f < 5, "padded frames must not appear in detections");
            }
        }
    }

    #[test]
    fn detections_sorted_by_video_then_confidence() {
        let (model, spec) = small_model();
        let videos = generate(&spec).unwrap();
        let params = DetectParams {
            actionness_threshold: 0.0,
            nms_threshold: 0.3,
            top_k: 4,
            proposals_per_clip: 3,
        };
        let dets = detect_videos(&model, &videos, &params).unwrap();
        for w in dets.windows(2) {
            assert!(
                w[0].video_id < w[1].video_id
                    || (w[0].video_id == w[1].video_id
                        && w[0].confidence >= w[1].confidence)
            );
        }
    }

    #[test]
    fn checkpoint_save_load_preserves_model() {
        let dir = tempfile::tempdir().unwrap();
        let (model, _) = small_model();
        let mut pc = PipelineConfig::default();
        pc.num_classes = 3;
        let ck = dir.path().join("ck");
        model.save(&ck, &pc).unwrap();
        let params = load_checkpoint(&ck).unwrap();
        let mut model2 = {
            let (m, _) = small_model();
            m
        };
        model2.load_params(&params).unwrap();
        for (a, b) in model
            .tpn
            .backbone
            .convs
            .iter()
            .zip(&model2.tpn.backbone.convs)
        {
            // stored as f32, so compare at that precision
            for (x, y) in a.kernel.iter().zip(&b.kernel) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        assert_eq!(
            model.tpn.anchors.anchors.len(),
            model2.tpn.anchors.anchors.len()
        );
    }
}
