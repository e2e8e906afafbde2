//! Data-driven anchor boxes: k-means over training-set box dimensions.
//!
//! The clustering distance is 1 - IoU with both boxes placed concentric,
//! which is scale-appropriate for box shapes, with k-means++ seeding from an
//! explicit seed. The centroid update is the per-cluster mean, accepted only
//! when it does not increase that cluster's summed distance, so the
//! objective is non-increasing every iteration. Empty clusters are reseeded
//! from the box farthest from its assigned centroid.

use rand::Rng;

use crate::error::{Result, TcnnError};
use crate::exec;
use crate::rng::substream;

/// A prior box shape in normalized image units (fraction of frame size).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorBox {
    pub width: f64,
    pub height: f64,
}

/// The learned anchor shapes, sorted by area.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub anchors: Vec<AnchorBox>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// IoU of two boxes sharing a center.
pub fn concentric_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    let union = a.0 * a.1 + b.0 * b.1 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn distance(b: (f64, f64), c: (f64, f64)) -> f64 {
    1.0 - concentric_iou(b, c)
}

/// Mean 1-IoU from each box to its nearest centroid.
pub fn kmeans_objective(boxes: &[(f64, f64)], centroids: &[(f64, f64)]) -> f64 {
    let total: f64 = boxes
        .iter()
        .map(|&b| {
            centroids
                .iter()
                .map(|&c| distance(b, c))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / boxes.len() as f64
}

fn nearest(b: (f64, f64), centroids: &[(f64, f64)]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, &c) in centroids.iter().enumerate() {
        let d = distance(b, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, best_d)
}

/// k-means++ seeding.
fn seed_centroids(boxes: &[(f64, f64)], k: usize, rng: &mut impl Rng) -> Vec<(f64, f64)> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(boxes[rng.random_range(0..boxes.len())]);
    while centroids.len() < k {
        let d2: Vec<f64> = boxes
            .iter()
            .map(|&b| {
                let (_, d) = nearest(b, &centroids);
                d * d
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            boxes[rng.random_range(0..boxes.len())]
        } else {
            let mut t = rng.random_range(0.0..total);
            let mut pick = boxes.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if t < d {
                    pick = i;
                    break;
                }
                t -= d;
            }
            boxes[pick]
        };
        centroids.push(next);
    }
    centroids
}

/// Clusters `(width, height)` pairs into `k` anchors. Deterministic for a
/// fixed seed; converges when assignments stop changing or after 100
/// iterations.
pub fn kmeans_anchors(boxes: &[(f64, f64)], k: usize, seed: u64) -> Result<AnchorSet> {
    kmeans_anchors_impl(boxes, k, seed, true).map(|(set, _)| set)
}

/// Like [`kmeans_anchors`] but also returns the objective recorded after
/// every iteration, which is non-increasing.
pub fn kmeans_anchors_trace(
    boxes: &[(f64, f64)],
    k: usize,
    seed: u64,
) -> Result<(AnchorSet, Vec<f64>)> {
    kmeans_anchors_impl(boxes, k, seed, true)
}

/// Sequential twin for the benchmark suite.
pub fn kmeans_anchors_seq(boxes: &[(f64, f64)], k: usize, seed: u64) -> Result<AnchorSet> {
    kmeans_anchors_impl(boxes, k, seed, false).map(|(set, _)| set)
}

fn kmeans_anchors_impl(
    boxes: &[(f64, f64)],
    k: usize,
    seed: u64,
    parallel: bool,
) -> Result<(AnchorSet, Vec<f64>)> {
    if k == 0 {
        return Err(TcnnError::InvalidArgument("k must be >= 1".into()));
    }
    if boxes.is_empty() {
        return Err(TcnnError::InvalidArgument("no boxes to cluster".into()));
    }
    if boxes.len() < k {
        return Err(TcnnError::InvalidArgument(format!(
            "insufficient boxes: {} boxes for k = {k}",
            boxes.len()
        )));
    }
    if boxes.iter().any(|&(w, h)| w <= 0.0 || h <= 0.0) {
        return Err(TcnnError::InvalidArgument(
            "box dimensions must be positive".into(),
        ));
    }

    let mut rng = substream(seed, "kmeans-anchors");
    let mut centroids = seed_centroids(boxes, k, &mut rng);
    let mut assign = vec![usize::MAX; boxes.len()];
    let mut trace = Vec::new();

    for _iter in 0..100 {
        let work = if parallel { boxes.len() * k * 8 } else { 0 };
        let new_assign: Vec<(usize, f64)> =
            exec::map_indexed(boxes.len(), work, |i| nearest(boxes[i], &centroids));

        // Reseed empty clusters from the farthest boxes (distinct picks);
        // replacing an unused centroid can only lower the objective.
        let mut counts = vec![0usize; k];
        for &(a, _) in &new_assign {
            counts[a] += 1;
        }
        let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empties.is_empty() {
            let mut order: Vec<usize> = (0..boxes.len()).collect();
            order.sort_by(|&a, &b| new_assign[b].1.partial_cmp(&new_assign[a].1).unwrap());
            for (c, &far) in empties.iter().zip(&order) {
                centroids[*c] = boxes[far];
            }
            continue;
        }

        let changed = new_assign
            .iter()
            .zip(&assign)
            .any(|(&(a, _), &b)| a != b);
        assign = new_assign.iter().map(|&(a, _)| a).collect();

        // Mean update, accepted per cluster only when it does not increase
        // that cluster's summed distance.
        for c in 0..k {
            let members: Vec<(f64, f64)> = boxes
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(&b, _)| b)
                .collect();
            let n = members.len() as f64;
            let mean = (
                members.iter().map(|m| m.0).sum::<f64>() / n,
                members.iter().map(|m| m.1).sum::<f64>() / n,
            );
            let old_cost: f64 = members.iter().map(|&m| distance(m, centroids[c])).sum();
            let new_cost: f64 = members.iter().map(|&m| distance(m, mean)).sum();
            if new_cost <= old_cost {
                centroids[c] = mean;
            }
        }

        trace.push(kmeans_objective(boxes, &centroids));
        if !changed {
            break;
        }
    }

    let mut anchors: Vec<AnchorBox> = centroids
        .into_iter()
        .map(|(w, h)| AnchorBox {
            width: w,
            height: h,
        })
        .collect();
    anchors.sort_by(|a, b| {
        (a.width * a.height)
            .partial_cmp(&(b.width * b.height))
            .unwrap()
            .then(a.width.partial_cmp(&b.width).unwrap())
    });
    Ok((AnchorSet { anchors }, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn single_cluster_of_identical_boxes() {
        let boxes = vec![(0.3, 0.4); 10];
        let set = kmeans_anchors(&boxes, 1, 0).unwrap();
        assert_eq!(set.len(), 1);
        assert!((set.anchors[0].width - 0.3).abs() < 1e-12);
        assert!((set.anchors[0].height - 0.4).abs() < 1e-12);
    }

    #[test]
    fn two_separated_clusters_recovered() {
        let mut boxes = vec![(0.1, 0.1); 50];
        boxes.extend(vec![(0.8, 0.8); 50]);
        let set = kmeans_anchors(&boxes, 2, 42).unwrap();
        assert!((set.anchors[0].width - 0.1).abs() < 1e-6);
        assert!((set.anchors[0].height - 0.1).abs() < 1e-6);
        assert!((set.anchors[1].width - 0.8).abs() < 1e-6);
        assert!((set.anchors[1].height - 0.8).abs() < 1e-6);
        // no reassignment improves the objective
        let cents: Vec<(f64, f64)> = set.anchors.iter().map(|a| (a.width, a.height)).collect();
        let obj = kmeans_objective(&boxes, &cents);
        assert!(obj < 1e-9);
    }

    #[test]
    fn twelve_anchors_from_log_uniform_boxes() {
        let mut rng = crate::rng::substream(7, "anchor-test");
        let boxes: Vec<(f64, f64)> = (0..500)
            .map(|_| {
                let w = (-3.0 * rng.random::<f64>()).exp();
                let h = (-3.0 * rng.random::<f64>()).exp();
                (w, h)
            })
            .collect();
        let set = kmeans_anchors(&boxes, 12, 3).unwrap();
        assert_eq!(set.len(), 12);
        for pair in set.anchors.windows(2) {
            assert!(pair[0] != pair[1], "anchors must be distinct");
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let mut rng = crate::rng::substream(8, "anchor-det");
        let boxes: Vec<(f64, f64)> = (0..100)
            .map(|_| (rng.random_range(0.05..0.9), rng.random_range(0.05..0.9)))
            .collect();
        let a = kmeans_anchors(&boxes, 5, 9).unwrap();
        let b = kmeans_anchors(&boxes, 5, 9).unwrap();
        assert_eq!(a, b);
        let c = kmeans_anchors_seq(&boxes, 5, 9).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn objective_non_increasing() {
        let mut rng = crate::rng::substream(17, "anchor-mono");
        for run in 0..10 {
            let boxes: Vec<(f64, f64)> = (0..80)
                .map(|_| (rng.random_range(0.02..0.9), rng.random_range(0.02..0.9)))
                .collect();
            let (_, trace) = kmeans_anchors_trace(&boxes, 6, run).unwrap();
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "objective rose: {:?}", w);
            }
        }
    }

    #[test]
    fn rejects_insufficient_boxes() {
        let boxes = vec![(0.5, 0.5); 3];
        assert!(kmeans_anchors(&boxes, 4, 0).is_err());
        assert!(kmeans_anchors(&[], 1, 0).is_err());
    }

    #[test]
    fn concentric_iou_basics() {
        assert!((concentric_iou((0.5, 0.5), (0.5, 0.5)) - 1.0).abs() < 1e-12);
        let v = concentric_iou((0.2, 0.2), (0.4, 0.4));
        assert!((v - 0.25).abs() < 1e-12);
    }
}
