//! Recognition over linked sequences and final detection output.
//!
//! A linked tube (one proposal per clip, variable spatial size) is pooled at
//! conv5 level to a fixed bin grid, flattened, and pushed through
//! fc6 -> relu -> fc7 -> relu -> dropout -> classifier -> softmax over N+1
//! classes with background at index 0. Greedy class-wise non-maximum
//! suppression on spatio-temporal tube IoU produces the final detections.

use rand::Rng;

use crate::cube::FeatureCube;
use crate::error::{Result, TcnnError};
use crate::geom::{iou, Box2D};
use crate::layers::{relu_backward, relu_forward, FCGrads, FCLayer};
use crate::loss::{cross_entropy, softmax};
use crate::net::{NetConfig, ParamMap};
use crate::toi::{toi_pool_backward, toi_pool_forward, ToiArgmax, TubeOfInterest};

/// fc6/fc7 + classifier over N+1 classes, with inverted dropout between
/// fc7 and the classifier during training.
#[derive(Debug, Clone)]
pub struct RecognitionHead {
    pub fc6: FCLayer,
    pub fc7: FCLayer,
    pub classifier: FCLayer,
    pub dropout: f64,
}

impl RecognitionHead {
    pub fn init(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        RecognitionHead {
            fc6: FCLayer::init(cfg.fc_dim, cfg.reduced_dim(), rng),
            fc7: FCLayer::init(cfg.fc_dim, cfg.fc_dim, rng),
            classifier: FCLayer::init(cfg.num_classes + 1, cfg.fc_dim, rng),
            dropout: cfg.dropout,
        }
    }

    pub fn to_params(&self, prefix: &str, p: &mut ParamMap) {
        for (name, fc) in [
            ("fc6", &self.fc6),
            ("fc7", &self.fc7),
            ("classifier", &self.classifier),
        ] {
            p.insert(
                format!("{prefix}.{name}.weights"),
                (vec![fc.out_dim as u32, fc.in_dim as u32], fc.weights.clone()),
            );
            p.insert(
                format!("{prefix}.{name}.bias"),
                (vec![fc.bias.len() as u32], fc.bias.clone()),
            );
        }
    }

    pub fn load_params(&mut self, prefix: &str, p: &ParamMap) -> Result<()> {
        for (name, fc) in [
            ("fc6", &mut self.fc6),
            ("fc7", &mut self.fc7),
            ("classifier", &mut self.classifier),
        ] {
            crate::tpn::take(p, &format!("{prefix}.{name}.weights"), &mut fc.weights)?;
            crate::tpn::take(p, &format!("{prefix}.{name}.bias"), &mut fc.bias)?;
        }
        Ok(())
    }
}

pub struct RecognitionGrads {
    pub fc6: FCGrads,
    pub fc7: FCGrads,
    pub classifier: FCGrads,
}

impl RecognitionHead {
    pub fn zero_grads(&self) -> RecognitionGrads {
        RecognitionGrads {
            fc6: self.fc6.zero_grads(),
            fc7: self.fc7.zero_grads(),
            classifier: self.classifier.zero_grads(),
        }
    }
}

/// Concatenates per-clip conv5 cubes along the temporal axis.
pub fn concat_conv5(cubes: &[&FeatureCube]) -> Result<FeatureCube> {
    let first = cubes
        .first()
        .ok_or_else(|| TcnnError::InvalidArgument("no clips".into()))?;
    let (c, d, h, w) = first.dims();
    if cubes.iter().any(|q| q.dims() != (c, d, h, w)) {
        return Err(TcnnError::ShapeMismatch(
            "conv5 cubes differ across clips".into(),
        ));
    }
    let m = cubes.len();
    let mut out = FeatureCube::zeros(c, d * m, h, w);
    for ci in 0..c {
        for (t, cube) in cubes.iter().enumerate() {
            for di in 0..d {
                let src = cube.frame(ci, di);
                let dst = out.index(ci, t * d + di, 0, 0);
                out.data_mut()[dst..dst + h * w].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

/// Forward cache for the recognition pass over one sequence.
pub struct RecognitionForward {
    pub pooled_arg: ToiArgmax,
    pub flat: Vec<f64>,
    pub a6: Vec<f64>,
    pub h6: Vec<f64>,
    pub a7: Vec<f64>,
    pub h7: Vec<f64>,
    /// Inverted-dropout scale mask; all ones at inference.
    pub mask: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Runs the head over a linked tube. `seq_cube` is the temporal
/// concatenation of the clips' conv5 cubes and `boxes` holds one conv5-grid
/// box per concatenated slice. Dropout fires only when an RNG is supplied.
pub fn recognition_forward(
    cfg: &NetConfig,
    head: &RecognitionHead,
    seq_cube: &FeatureCube,
    boxes: &[Box2D],
    dropout_rng: Option<&mut dyn rand::RngCore>,
) -> Result<RecognitionForward> {
    let tube = TubeOfInterest::new(boxes.to_vec());
    let (pooled, arg) = toi_pool_forward(seq_cube, &tube, cfg.toi5)?;
    let flat: Vec<f64> = pooled.data().to_vec();
    let a6 = head.fc6.forward(&flat)?;
    let h6 = relu_forward(&a6);
    let a7 = head.fc7.forward(&h6)?;
    let h7 = relu_forward(&a7);
    let mask: Vec<f64> = match dropout_rng {
        Some(rng) if head.dropout > 0.0 => {
            let keep = 1.0 - head.dropout;
            (0..h7.len())
                .map(|_| {
                    if rng.next_u64() as f64 / (u64::MAX as f64) < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        _ => vec![1.0; h7.len()],
    };
    let dropped: Vec<f64> = h7.iter().zip(&mask).map(|(v, m)| v * m).collect();
    let logits = head.classifier.forward(&dropped)?;
    let probs = softmax(&logits);
    Ok(RecognitionForward {
        pooled_arg: arg,
        flat,
        a6,
        h6,
        a7,
        h7,
        mask,
        logits,
        probs,
    })
}

/// Class distribution over N+1 for a linked sequence at inference.
pub fn classify_sequence(
    cfg: &NetConfig,
    head: &RecognitionHead,
    conv5_cubes: &[&FeatureCube],
    boxes_per_clip: &[Box2D],
) -> Result<Vec<f64>> {
    if conv5_cubes.len() != boxes_per_clip.len() {
        return Err(TcnnError::ShapeMismatch(format!(
            "{} clips vs {} boxes",
            conv5_cubes.len(),
            boxes_per_clip.len()
        )));
    }
    let seq_cube = concat_conv5(conv5_cubes)?;
    let d_per_clip = conv5_cubes[0].depth();
    let boxes: Vec<Box2D> = boxes_per_clip
        .iter()
        .flat_map(|b| std::iter::repeat(*b).take(d_per_clip))
        .collect();
    let fwd = recognition_forward(cfg, head, &seq_cube, &boxes, None)?;
    Ok(fwd.probs)
}

/// Cross-entropy loss + gradients for one sequence. Returns the loss and the
/// gradient wrt the concatenated conv5 cube.
pub fn recognition_loss(
    cfg: &NetConfig,
    head: &RecognitionHead,
    seq_cube: &FeatureCube,
    boxes: &[Box2D],
    target: usize,
    dropout_rng: Option<&mut dyn rand::RngCore>,
    grads: &mut RecognitionGrads,
) -> Result<(f64, FeatureCube)> {
    let fwd = recognition_forward(cfg, head, seq_cube, boxes, dropout_rng)?;
    let (loss, glogits) = cross_entropy(&fwd.logits, target);
    let dropped: Vec<f64> = fwd.h7.iter().zip(&fwd.mask).map(|(v, m)| v * m).collect();
    let gdrop = head
        .classifier
        .backward(&dropped, &glogits, &mut grads.classifier)?;
    let gh7: Vec<f64> = gdrop.iter().zip(&fwd.mask).map(|(g, m)| g * m).collect();
    let ga7 = relu_backward(&fwd.a7, &gh7);
    let gh6 = head.fc7.backward(&fwd.h6, &ga7, &mut grads.fc7)?;
    let ga6 = relu_backward(&fwd.a6, &gh6);
    let gflat = head.fc6.backward(&fwd.flat, &ga6, &mut grads.fc6)?;
    let gpooled = FeatureCube::from_vec(
        seq_cube.channels(),
        cfg.toi5.depth,
        cfg.toi5.height,
        cfg.toi5.width,
        gflat,
    )?;
    let gcube = toi_pool_backward(&gpooled, &fwd.pooled_arg)?;
    Ok((loss, gcube))
}

/// A final classified detection. `frames` holds (frame index, box) pairs in
/// original coordinates, ordered by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub video_id: String,
    pub class_id: usize,
    pub confidence: f64,
    pub frames: Vec<(usize, Box2D)>,
}

/// Spatio-temporal tube IoU: mean per-frame box IoU over the union of the
/// two frame sets, counting 0 on frames covered by only one tube.
pub fn sequence_iou(a: &[(usize, Box2D)], b: &[(usize, Box2D)]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let amap: std::collections::BTreeMap<usize, &Box2D> =
        a.iter().map(|(f, b)| (*f, b)).collect();
    let bmap: std::collections::BTreeMap<usize, &Box2D> =
        b.iter().map(|(f, b)| (*f, b)).collect();
    let frames: std::collections::BTreeSet<usize> =
        amap.keys().chain(bmap.keys()).copied().collect();
    let mut total = 0.0;
    for f in &frames {
        if let (Some(x), Some(y)) = (amap.get(f), bmap.get(f)) {
            total += iou(x, y);
        }
    }
    total / frames.len() as f64
}

/// Greedy class-wise NMS. Detections are processed in descending confidence
/// (ties by input order); a survivor suppresses later detections of the same
/// video and class whose sequence IoU exceeds the threshold.
pub fn nms_sequences(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| {
        detections[j]
            .confidence
            .partial_cmp(&detections[i].confidence)
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut suppressed = vec![false; detections.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(detections[i].clone());
        for &j in &order[pos + 1..] {
            if suppressed[j] {
                continue;
            }
            if detections[i].video_id == detections[j].video_id
                && detections[i].class_id == detections[j].class_id
                && sequence_iou(&detections[i].frames, &detections[j].frames) > iou_threshold
            {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Backbone;
    use crate::rng::substream;
    use rand::Rng;

    #[test]
    fn zero_classifier_gives_uniform_distribution() {
        let cfg = NetConfig::tiny(3);
        let mut rng = substream(61, "recog-uniform");
        let mut head = RecognitionHead::init(&cfg, &mut rng);
        head.classifier = FCLayer::zeros(4, cfg.fc_dim);
        let bb = Backbone::init(&cfg, &mut rng);
        let clip = FeatureCube::zeros(2, 8, 24, 32);
        let (_, conv5) = bb.forward_features(&clip, cfg.skip_source).unwrap();
        let probs = classify_sequence(
            &cfg,
            &head,
            &[&conv5, &conv5],
            &[Box2D::new(0.0, 0.0, 2.0, 2.0), Box2D::new(0.0, 0.0, 2.0, 2.0)],
        )
        .unwrap();
        assert_eq!(probs.len(), 4);
        for p in &probs {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_output_sums_to_one_on_random_weights() {
        let cfg = NetConfig::tiny(2);
        let mut rng = substream(62, "recog-sum");
        let head = RecognitionHead::init(&cfg, &mut rng);
        let bb = Backbone::init(&cfg, &mut rng);
        let data = (0..2 * 8 * 24 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let clip = FeatureCube::from_vec(2, 8, 24, 32, data).unwrap();
        let (_, conv5) = bb.forward_features(&clip, cfg.skip_source).unwrap();
        let probs =
            classify_sequence(&cfg, &head, &[&conv5], &[Box2D::new(0.0, 0.5, 1.5, 2.0)]).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(probs.iter().all(|&p| p >= 0.0));
    }

    fn det(video: &str, class: usize, conf: f64, frames: &[(usize, Box2D)]) -> Detection {
        Detection {
            video_id: video.into(),
            class_id: class,
            confidence: conf,
            frames: frames.to_vec(),
        }
    }

    fn unit_box(x: f64) -> Box2D {
        Box2D::new(x, 0.0, x + 10.0, 10.0)
    }

    #[test]
    fn identical_sequences_iou_one() {
        let frames: Vec<(usize, Box2D)> = (0..8).map(|f| (f, unit_box(0.0))).collect();
        assert_eq!(sequence_iou(&frames, &frames), 1.0);
    }

    #[test]
    fn disjoint_sequences_iou_zero() {
        let a: Vec<(usize, Box2D)> = (0..8).map(|f| (f, unit_box(0.0))).collect();
        let b: Vec<(usize, Box2D)> = (0..8).map(|f| (f, unit_box(100.0))).collect();
        assert_eq!(sequence_iou(&a, &b), 0.0);
    }

    #[test]
    fn half_temporal_overlap_gives_half() {
        let a: Vec<(usize, Box2D)> = (0..8).map(|f| (f, unit_box(0.0))).collect();
        let b: Vec<(usize, Box2D)> = (4..12).map(|f| (f, unit_box(0.0))).collect();
        // union 12 frames, 4 with perfect overlap
        assert!((sequence_iou(&a, &b) - 4.0 / 12.0).abs() < 1e-12);
        let c: Vec<(usize, Box2D)> = (0..4).map(|f| (f, unit_box(0.0))).collect();
        assert!((sequence_iou(&a, &c) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sequence_iou_symmetric() {
        let a: Vec<(usize, Box2D)> = (0..6).map(|f| (f, unit_box(f as f64))).collect();
        let b: Vec<(usize, Box2D)> = (2..9).map(|f| (f, unit_box(1.0))).collect();
        assert_eq!(sequence_iou(&a, &b), sequence_iou(&b, &a));
    }

    #[test]
    fn nms_keeps_highest_of_duplicates() {
        let frames: Vec<(usize, Box2D)> = (0..8).map(|f| (f, unit_box(0.0))).collect();
        let dets = vec![
            det("v0", 1, 0.8, &frames),
            det("v0", 1, 0.9, &frames),
        ];
        let out = nms_sequences(&dets, 0.3);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].confidence, 0.9);
    }

    #[test]
    fn nms_spares_disjoint_and_other_classes() {
        let a: Vec<(usize, Box2D)> = (0..8).map(|f| (f, unit_box(0.0))).collect();
        let b: Vec<(usize, Box2D)> = (0..8).map(|f| (f, unit_box(100.0))).collect();
        let dets = vec![
            det("v0", 1, 0.9, &a),
            det("v0", 1, 0.8, &b),
            det("v0", 2, 0.7, &a),
            det("v1", 1, 0.6, &a),
        ];
        let out = nms_sequences(&dets, 0.3);
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn nms_matches_greedy_oracle() {
        let mut rng = substream(63, "nms-oracle");
        for _ in 0..30 {
            let dets: Vec<Detection> = (0..rng.random_range(1..20))
                .map(|_| {
                    let x = rng.random_range(0.0..30.0);
                    let start = rng.random_range(0..4usize);
                    let frames: Vec<(usize, Box2D)> = (start..start + 8)
                        .map(|f| (f, unit_box(x)))
                        .collect();
                    det(
                        if rng.random::<f64>() < 0.5 { "v0" } else { "v1" },
                        rng.random_range(1..3),
                        rng.random_range(0.0..1.0),
                        &frames,
                    )
                })
                .collect();
            let got = nms_sequences(&dets, 0.3);

            // reference: literal greedy
            let mut pool: Vec<(usize, &Detection)> = dets.iter().enumerate().collect();
            pool.sort_by(|a, b| {
                b.1.confidence
                    .partial_cmp(&a.1.confidence)
                    .unwrap()
                    .then(a.0.cmp(&b.0))
            });
            let mut want: Vec<Detection> = Vec::new();
            let mut alive: Vec<(usize, &Detection)> = pool.clone();
            while let Some((_, top)) = alive.first().copied() {
                want.push(top.clone());
                alive.retain(|(_, d)| {
                    !(std::ptr::eq(*d, top)
                        || (d.video_id == top.video_id
                            && d.class_id == top.class_id
                            && sequence_iou(&d.frames, &top.frames) > 0.3))
                });
            }
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn nms_output_is_subset_with_no_overlapping_survivors() {
        let mut rng = substream(64, "nms-subset");
        let dets: Vec<Detection> = (0..15)
            .map(|_| {
                let x = rng.random_range(0.0..20.0);
                let frames: Vec<(usize, Box2D)> = (0..8).map(|f| (f, unit_box(x))).collect();
                det("v0", 1, rng.random_range(0.0..1.0), &frames)
            })
            .collect();
        let out = nms_sequences(&dets, 0.3);
        for d in &out {
            assert!(dets.contains(d));
        }
        for i in 0..out.len() {
            for j in i + 1..out.len() {
                if out[i].class_id == out[j].class_id {
                    assert!(sequence_iou(&out[i].frames, &out[j].frames) <= 0.3);
                }
            }
        }
    }
}
