//! Detection metrics: frame-mAP, video-mAP at IoU threshold alpha, ROC/AUC
//! and video-level classification accuracy.
//!
//! Average precision uses all-point interpolation (area under the exact
//! precision envelope). Matching is greedy in confidence order: a candidate
//! takes the unmatched same-class ground truth with the highest IoU when
//! that IoU clears alpha. The ROC protocol counts false positives per video
//! on the x axis, truncates the curve at a configurable FPR and normalizes
//! the trapezoid area by the truncation.

use std::collections::{BTreeMap, BTreeSet};

use crate::detection::{sequence_iou, Detection};
use crate::error::{Result, TcnnError};
use crate::geom::{iou, Box2D};
use crate::synth::VideoAnnotation;

#[derive(Debug, Clone)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap: f64,
    pub num_gt: usize,
    /// (confidence threshold, recall, precision) points in rank order.
    pub curve: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct MapResult {
    pub per_class: Vec<ClassAp>,
    pub mean: f64,
    /// Classes that had detections but no ground truth; their AP is
    /// undefined and excluded from the mean.
    pub skipped_classes: Vec<usize>,
}

/// All-point interpolated AP from a ranked TP/FP sequence.
fn average_precision(hits: &[bool], confs: &[f64], num_gt: usize) -> (f64, Vec<(f64, f64, f64)>) {
    if num_gt == 0 {
        return (0.0, Vec::new());
    }
    let mut curve = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        curve.push((confs[k], tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // precision envelope, integrated over recall steps
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(_, r, _)) in curve.iter().enumerate() {
        if r > prev_recall {
            let env = curve[i..]
                .iter()
                .map(|&(_, _, p)| p)
                .fold(f64::NEG_INFINITY, f64::max);
            ap += (r - prev_recall) * env;
            prev_recall = r;
        }
    }
    (ap, curve)
}

fn classes_in(annotations: &[VideoAnnotation], detections: &[Detection]) -> BTreeSet<usize> {
    let mut s: BTreeSet<usize> = annotations.iter().map(|a| a.class_label).collect();
    s.extend(detections.iter().map(|d| d.class_id));
    s.remove(&0);
    s
}

/// Frame-level mean average precision at IoU threshold `alpha`.
pub fn frame_map(
    detections: &[Detection],
    annotations: &[VideoAnnotation],
    alpha: f64,
) -> MapResult {
    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    for class in classes_in(annotations, detections) {
        // ground truth boxes of this class per (video, frame)
        let mut gt: BTreeMap<(String, usize), Vec<(Box2D, bool)>> = BTreeMap::new();
        let mut num_gt = 0usize;
        for a in annotations.iter().filter(|a| a.class_label == class) {
            for (f, b) in a.frames.iter().enumerate() {
                if let Some(b) = b {
                    gt.entry((a.video_id.clone(), f)).or_default().push((*b, false));
                    num_gt += 1;
                }
            }
        }
        if num_gt == 0 {
            skipped.push(class);
            continue;
        }
        // all frame boxes of this class, ranked by confidence
        let mut cands: Vec<(f64, String, usize, Box2D, usize)> = Vec::new();
        for (di, d) in detections.iter().enumerate() {
            if d.class_id != class {
                continue;
            }
            for &(f, b) in &d.frames {
                cands.push((d.confidence, d.video_id.clone(), f, b, di));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
                .then(a.4.cmp(&b.4))
        });
        let mut matched = gt;
        let mut hits = Vec::with_capacity(cands.len());
        let confs: Vec<f64> = cands.iter().map(|c| c.0).collect();
        for (_, video, frame, b, _) in &cands {
            let hit = match matched.get_mut(&(video.clone(), *frame)) {
                Some(slots) => {
                    let mut best = -1.0;
                    let mut best_i = None;
                    for (i, (g, used)) in slots.iter().enumerate() {
                        if !used {
                            let v = iou(b, g);
                            if v > best {
                                best = v;
                                best_i = Some(i);
                            }
                        }
                    }
                    match best_i {
                        Some(i) if best >= alpha => {
                            slots[i].1 = true;
                            true
                        }
                        _ => false,
                    }
                }
                None => false,
            };
            hits.push(hit);
        }
        let (ap, curve) = average_precision(&hits, &confs, num_gt);
        per_class.push(ClassAp {
            class_id: class,
            ap,
            num_gt,
            curve,
        });
    }

    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    MapResult {
        per_class,
        mean,
        skipped_classes: skipped,
    }
}

/// Video-level (tube) mean average precision at spatio-temporal IoU `alpha`.
pub fn video_map(
    detections: &[Detection],
    annotations: &[VideoAnnotation],
    alpha: f64,
) -> MapResult {
    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    for class in classes_in(annotations, detections) {
        let tubes: Vec<(&VideoAnnotation, Vec<(usize, Box2D)>)> = annotations
            .iter()
            .filter(|a| a.class_label == class)
            .map(|a| (a, a.tube()))
            .collect();
        let num_gt = tubes.len();
        if num_gt == 0 {
            skipped.push(class);
            continue;
        }
        let mut order: Vec<usize> = (0..detections.len())
            .filter(|&i| detections[i].class_id == class)
            .collect();
        order.sort_by(|&i, &j| {
            detections[j]
                .confidence
                .partial_cmp(&detections[i].confidence)
                .unwrap()
                .then(detections[i].video_id.cmp(&detections[j].video_id))
                .then(i.cmp(&j))
        });
        let mut used = vec![false; tubes.len()];
        let mut hits = Vec::with_capacity(order.len());
        let confs: Vec<f64> = order.iter().map(|&i| detections[i].confidence).collect();
        for &i in &order {
            let d = &detections[i];
            let mut best = -1.0;
            let mut best_t = None;
            for (t, (a, tube)) in tubes.iter().enumerate() {
                if used[t] || a.video_id != d.video_id {
                    continue;
                }
                let v = sequence_iou(&d.frames, tube);
                if v > best {
                    best = v;
                    best_t = Some(t);
                }
            }
            let hit = match best_t {
                Some(t) if best >= alpha => {
                    used[t] = true;
                    true
                }
                _ => false,
            };
            hits.push(hit);
        }
        let (ap, curve) = average_precision(&hits, &confs, num_gt);
        per_class.push(ClassAp {
            class_id: class,
            ap,
            num_gt,
            curve,
        });
    }
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    MapResult {
        per_class,
        mean,
        skipped_classes: skipped,
    }
}

#[derive(Debug, Clone)]
pub struct RocResult {
    /// (confidence threshold, fpr, tpr) points at each distinct confidence
    /// threshold, descending.
    pub points: Vec<(f64, f64, f64)>,
    pub auc: f64,
    pub fpr_max: f64,
}

/// Class-aware detection ROC over ground-truth tubes. True positive rate is
/// the fraction of tubes matched (tube IoU >= alpha, class must agree);
/// false positives are normalized per video. The curve is truncated at
/// `fpr_max` and the trapezoid area normalized by it.
pub fn roc_auc(
    detections: &[Detection],
    annotations: &[VideoAnnotation],
    alpha: f64,
    fpr_max: f64,
) -> Result<RocResult> {
    let tubes: Vec<(&VideoAnnotation, Vec<(usize, Box2D)>)> = annotations
        .iter()
        .filter(|a| a.class_label != 0 && a.frames.iter().any(|f| f.is_some()))
        .map(|a| (a, a.tube()))
        .collect();
    if tubes.is_empty() {
        return Err(TcnnError::InvalidArgument(
            "no annotated ground truth".into(),
        ));
    }
    let num_videos = annotations
        .iter()
        .map(|a| a.video_id.clone())
        .collect::<BTreeSet<_>>()
        .len();

    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| {
        detections[j]
            .confidence
            .partial_cmp(&detections[i].confidence)
            .unwrap()
            .then(detections[i].video_id.cmp(&detections[j].video_id))
            .then(i.cmp(&j))
    });

    let mut used = vec![false; tubes.len()];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points = Vec::new();
    let mut idx = 0;
    while idx < order.len() {
        // process the whole tie group before emitting a point
        let conf = detections[order[idx]].confidence;
        while idx < order.len() && detections[order[idx]].confidence == conf {
            let d = &detections[order[idx]];
            let mut best = -1.0;
            let mut best_t = None;
            for (t, (a, tube)) in tubes.iter().enumerate() {
                if used[t] || a.video_id != d.video_id || a.class_label != d.class_id {
                    continue;
                }
                let v = sequence_iou(&d.frames, tube);
                if v > best {
                    best = v;
                    best_t = Some(t);
                }
            }
            match best_t {
                Some(t) if best >= alpha => {
                    used[t] = true;
                    tp += 1;
                }
                _ => fp += 1,
            }
            idx += 1;
        }
        points.push((
            conf,
            fp as f64 / num_videos as f64,
            tp as f64 / tubes.len() as f64,
        ));
    }

    // integrate the polyline from the origin, truncated at fpr_max
    let mut auc = 0.0;
    let mut prev = (0.0f64, 0.0f64);
    for &(_, x, y) in &points {
        if x >= fpr_max {
            // interpolate the crossing
            let t = if x > prev.0 {
                (fpr_max - prev.0) / (x - prev.0)
            } else {
                0.0
            };
            let ycross = prev.1 + t * (y - prev.1);
            auc += (fpr_max - prev.0) * (prev.1 + ycross) / 2.0;
            prev = (fpr_max, ycross);
            break;
        }
        auc += (x - prev.0) * (prev.1 + y) / 2.0;
        prev = (x, y);
    }
    if prev.0 < fpr_max {
        // no more detections: the curve continues flat
        auc += (fpr_max - prev.0) * prev.1;
    }
    Ok(RocResult {
        points,
        auc: auc / fpr_max,
        fpr_max,
    })
}

/// Fraction of videos whose predicted class matches the label.
pub fn video_classification_accuracy(
    predictions: &[(String, usize)],
    labels: &[(String, usize)],
) -> Result<f64> {
    let lmap: BTreeMap<&str, usize> = labels.iter().map(|(v, c)| (v.as_str(), *c)).collect();
    if predictions.is_empty() {
        return Err(TcnnError::InvalidArgument("no predictions".into()));
    }
    let mut correct = 0usize;
    for (v, c) in predictions {
        match lmap.get(v.as_str()) {
            Some(want) => {
                if want == c {
                    correct += 1;
                }
            }
            None => {
                return Err(TcnnError::InvalidArgument(format!(
                    "prediction for unknown video id {v}"
                )))
            }
        }
    }
    Ok(correct as f64 / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box(x: f64) -> Box2D {
        Box2D::new(x, 0.0, x + 10.0, 10.0)
    }

    fn annot(video: &str, class: usize, frames: usize) -> VideoAnnotation {
        VideoAnnotation {
            video_id: video.into(),
            class_label: class,
            frames: (0..frames).map(|_| Some(unit_box(5.0))).collect(),
        }
    }

    fn det_for(a: &VideoAnnotation, conf: f64) -> Detection {
        Detection {
            video_id: a.video_id.clone(),
            class_id: a.class_label,
            confidence: conf,
            frames: a.tube(),
        }
    }

    #[test]
    fn perfect_single_detection_ap_one() {
        let a = annot("v0", 1, 8);
        let d = det_for(&a, 0.9);
        let r = frame_map(&[d.clone()], &[a.clone()], 0.5);
        assert_eq!(r.mean, 1.0);
        let rv = video_map(&[d], &[a], 0.5);
        assert_eq!(rv.mean, 1.0);
    }

    #[test]
    fn no_detections_ap_zero() {
        let a = annot("v0", 1, 8);
        let r = frame_map(&[], &[a.clone()], 0.5);
        assert_eq!(r.mean, 0.0);
        assert_eq!(video_map(&[], &[a], 0.5).mean, 0.0);
    }

    #[test]
    fn half_covering_detection_flips_with_alpha() {
        let a = annot("v0", 1, 8);
        let mut d = det_for(&a, 0.9);
        d.frames.truncate(4); // covers half the tube perfectly -> seq iou 0.5
        let at_02 = video_map(&[d.clone()], &[a.clone()], 0.2);
        assert_eq!(at_02.mean, 1.0);
        let at_06 = video_map(&[d], &[a], 0.6);
        assert_eq!(at_06.mean, 0.0);
    }

    #[test]
    fn ap_invariant_under_monotone_confidence_transform() {
        let a1 = annot("v0", 1, 8);
        let a2 = annot("v1", 1, 8);
        let d1 = det_for(&a1, 0.9);
        let mut d2 = det_for(&a2, 0.5);
        d2.frames = (0..8).map(|f| (f, unit_box(100.0))).collect(); // FP
        let base = frame_map(&[d1.clone(), d2.clone()], &[a1.clone(), a2.clone()], 0.5);
        let mut e1 = d1.clone();
        let mut e2 = d2.clone();
        e1.confidence = e1.confidence.powf(3.0) + 1.0;
        e2.confidence = e2.confidence.powf(3.0) + 1.0;
        let tr = frame_map(&[e1, e2], &[a1, a2], 0.5);
        assert!((base.mean - tr.mean).abs() < 1e-15);
    }

    #[test]
    fn map_monotone_in_alpha() {
        use rand::Rng;
        let mut rng = crate::rng::substream(71, "map-mono");
        for _ in 0..20 {
            let annots: Vec<VideoAnnotation> = (0..3)
                .map(|i| VideoAnnotation {
                    video_id: format!("v{i}"),
                    class_label: rng.random_range(1..3),
                    frames: (0..8)
                        .map(|_| {
                            let x = rng.random_range(0.0..30.0);
                            Some(Box2D::new(x, 0.0, x + 10.0, 10.0))
                        })
                        .collect(),
                })
                .collect();
            let dets: Vec<Detection> = (0..6)
                .map(|i| {
                    let a = &annots[i % 3];
                    let jitter = rng.random_range(-6.0..6.0);
                    Detection {
                        video_id: a.video_id.clone(),
                        class_id: rng.random_range(1..3),
                        confidence: rng.random_range(0.0..1.0),
                        frames: a
                            .tube()
                            .into_iter()
                            .map(|(f, b)| {
                                (f, Box2D::new(b.x1 + jitter, b.y1, b.x2 + jitter, b.y2))
                            })
                            .collect(),
                    }
                })
                .collect();
            let lo = frame_map(&dets, &annots, 0.3).mean;
            let hi = frame_map(&dets, &annots, 0.6).mean;
            assert!(lo >= hi - 1e-12, "frame mAP not monotone: {lo} vs {hi}");
            let lov = video_map(&dets, &annots, 0.3).mean;
            let hiv = video_map(&dets, &annots, 0.6).mean;
            assert!(lov >= hiv - 1e-12, "video mAP not monotone: {lov} vs {hiv}");
        }
    }

    #[test]
    fn perfect_detector_auc_one() {
        let annots = vec![annot("v0", 1, 8), annot("v1", 2, 8)];
        let dets: Vec<Detection> = annots.iter().map(|a| det_for(a, 0.9)).collect();
        let r = roc_auc(&dets, &annots, 0.5, 0.6).unwrap();
        assert!((r.auc - 1.0).abs() < 1e-12, "auc = {}", r.auc);
    }

    #[test]
    fn empty_detector_auc_zero() {
        let annots = vec![annot("v0", 1, 8)];
        let r = roc_auc(&[], &annots, 0.5, 0.6).unwrap();
        assert_eq!(r.auc, 0.0);
    }

    #[test]
    fn roc_rejects_empty_ground_truth() {
        assert!(roc_auc(&[], &[], 0.5, 0.6).is_err());
    }

    #[test]
    fn classification_accuracy_counts() {
        let labels = vec![
            ("v0".to_string(), 1),
            ("v1".to_string(), 2),
            ("v2".to_string(), 1),
            ("v3".to_string(), 3),
        ];
        let preds = vec![
            ("v0".to_string(), 1),
            ("v1".to_string(), 2),
            ("v2".to_string(), 2),
            ("v3".to_string(), 3),
        ];
        assert_eq!(video_classification_accuracy(&preds, &labels).unwrap(), 0.75);
        let all_right = video_classification_accuracy(&labels, &labels).unwrap();
        assert_eq!(all_right, 1.0);
        let wrong: Vec<(String, usize)> =
            labels.iter().map(|(v, c)| (v.clone(), c + 10)).collect();
        assert_eq!(video_classification_accuracy(&wrong, &labels).unwrap(), 0.0);
        let bad = vec![("nope".to_string(), 1)];
        assert!(video_classification_accuracy(&bad, &labels).is_err());
    }
}
