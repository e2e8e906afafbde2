//! Linking per-clip tube proposals into video-length sequences.
//!
//! A sequence takes one proposal per clip; its score is the mean actionness
//! of the chosen proposals plus the mean overlap across adjacent clip
//! transitions, where a transition's overlap is the IoU between the last
//! frame of one tube and the first frame of the next. The score decomposes
//! per node and per edge, so an exact k-best dynamic program over the clip
//! chain returns the true top-K of the exhaustive enumeration, in order.
//!
//! Candidate sums fold left in clip order, exactly like the standalone score
//! routine, so DP scores are bit-identical to recomputation and ties resolve
//! purely by the lexicographic rule.

use crate::error::{Result, TcnnError};
use crate::geom::iou;
use crate::tpn::TubeProposal;

/// One proposal index per clip plus the sequence score.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkedSequence {
    pub tube_indices: Vec<usize>,
    pub score: f64,
}

/// IoU between the last frame of `a` and the first frame of `b`.
pub fn transition_overlap(a: &TubeProposal, b: &TubeProposal) -> f64 {
    match (a.frame_boxes.last(), b.frame_boxes.first()) {
        (Some(x), Some(y)) => iou(x, y),
        _ => 0.0,
    }
}

/// Sequence score: mean actionness plus mean transition overlap. With a
/// single clip there are no transitions and the overlap term is defined
/// as zero.
pub fn sequence_score(actionness: &[f64], overlaps: &[f64]) -> Result<f64> {
    let m = actionness.len();
    if m == 0 {
        return Err(TcnnError::InvalidArgument("empty sequence".into()));
    }
    if overlaps.len() + 1 != m {
        return Err(TcnnError::ShapeMismatch(format!(
            "{m} actionness values need {} overlaps, got {}",
            m - 1,
            overlaps.len()
        )));
    }
    let sum_a: f64 = actionness.iter().sum();
    let mut s = sum_a / m as f64;
    if m > 1 {
        let sum_o: f64 = overlaps.iter().sum();
        s += sum_o / (m - 1) as f64;
    }
    Ok(s)
}

#[derive(Clone)]
struct Candidate {
    sum_a: f64,
    sum_o: f64,
    indices: Vec<u32>,
}

impl Candidate {
    fn score(&self, m: usize) -> f64 {
        let mut s = self.sum_a / m as f64;
        if m > 1 {
            s += self.sum_o / (m - 1) as f64;
        }
        s
    }
}

fn better(a: &Candidate, b: &Candidate, m: usize) -> std::cmp::Ordering {
    b.score(m)
        .partial_cmp(&a.score(m))
        .unwrap()
        .then_with(|| a.indices.cmp(&b.indices))
}

/// Exact top-K linking. Returns `min(K, product of per-clip proposal counts)`
/// sequences in descending score order, ties broken by lexicographic
/// proposal indices.
pub fn top_k_sequences(
    per_clip: &[Vec<TubeProposal>],
    k: usize,
) -> Result<Vec<LinkedSequence>> {
    let m = per_clip.len();
    if m == 0 {
        return Err(TcnnError::InvalidArgument("no clips to link".into()));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    for (i, props) in per_clip.iter().enumerate() {
        if props.is_empty() {
            return Err(TcnnError::InvalidArgument(format!(
                "clip {i} has no proposals"
            )));
        }
    }

    // dp[p] = up to k best partial candidates ending at proposal p
    let mut dp: Vec<Vec<Candidate>> = per_clip[0]
        .iter()
        .enumerate()
        .map(|(p, tube)| {
            vec![Candidate {
                sum_a: tube.actionness,
                sum_o: 0.0,
                indices: vec![p as u32],
            }]
        })
        .collect();

    for t in 1..m {
        let mut next: Vec<Vec<Candidate>> = Vec::with_capacity(per_clip[t].len());
        for (q, tube) in per_clip[t].iter().enumerate() {
            let mut pool: Vec<Candidate> = Vec::new();
            for (p, prev_tube) in per_clip[t - 1].iter().enumerate() {
                let ov = transition_overlap(prev_tube, tube);
                for cand in &dp[p] {
                    let mut indices = cand.indices.clone();
                    indices.push(q as u32);
                    pool.push(Candidate {
                        sum_a: cand.sum_a + tube.actionness,
                        sum_o: cand.sum_o + ov,
                        indices,
                    });
                }
            }
            pool.sort_by(|a, b| better(a, b, m));
            pool.truncate(k);
            next.push(pool);
        }
        dp = next;
    }

    let mut all: Vec<Candidate> = dp.into_iter().flatten().collect();
    all.sort_by(|a, b| better(a, b, m));
    all.truncate(k);
    Ok(all
        .into_iter()
        .map(|c| {
            let score = c.score(m);
            LinkedSequence {
                tube_indices: c.indices.iter().map(|&i| i as usize).collect(),
                score,
            }
        })
        .collect())
}

/// Exhaustive enumeration of every sequence, used as the oracle in tests and
/// by callers that want the full space when it is small.
pub fn enumerate_all_sequences(per_clip: &[Vec<TubeProposal>]) -> Result<Vec<LinkedSequence>> {
    let m = per_clip.len();
    if m == 0 {
        return Err(TcnnError::InvalidArgument("no clips to link".into()));
    }
    for (i, props) in per_clip.iter().enumerate() {
        if props.is_empty() {
            return Err(TcnnError::InvalidArgument(format!(
                "clip {i} has no proposals"
            )));
        }
    }
    let mut seqs: Vec<Vec<usize>> = vec![Vec::new()];
    for props in per_clip {
        let mut next = Vec::with_capacity(seqs.len() * props.len());
        for s in &seqs {
            for p in 0..props.len() {
                let mut t = s.clone();
                t.push(p);
                next.push(t);
            }
        }
        seqs = next;
    }
    let mut out = Vec::with_capacity(seqs.len());
    for indices in seqs {
        let actionness: Vec<f64> = indices
            .iter()
            .enumerate()
            .map(|(t, &p)| per_clip[t][p].actionness)
            .collect();
        let overlaps: Vec<f64> = (1..m)
            .map(|t| transition_overlap(&per_clip[t - 1][indices[t - 1]], &per_clip[t][indices[t]]))
            .collect();
        let score = sequence_score(&actionness, &overlaps)?;
        out.push(LinkedSequence {
            tube_indices: indices,
            score,
        });
    }
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.tube_indices.cmp(&b.tube_indices))
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Box2D;
    use crate::rng::substream;
    use rand::Rng;

    fn tube(clip: usize, actionness: f64, first: Box2D, last: Box2D) -> TubeProposal {
        let mut frame_boxes = vec![first; 8];
        frame_boxes[7] = last;
        TubeProposal {
            clip_index: clip,
            frame_boxes,
            actionness,
            conv5_box: first,
        }
    }

    fn random_instance(rng: &mut impl Rng, m: usize, max_p: usize) -> Vec<Vec<TubeProposal>> {
        (0..m)
            .map(|t| {
                (0..rng.random_range(1..=max_p))
                    .map(|_| {
                        let x = rng.random_range(0.0..50.0);
                        let y = rng.random_range(0.0..50.0);
                        let b1 = Box2D::new(x, y, x + rng.random_range(2.0..20.0), y + rng.random_range(2.0..20.0));
                        let x2 = rng.random_range(0.0..50.0);
                        let y2 = rng.random_range(0.0..50.0);
                        let b2 = Box2D::new(x2, y2, x2 + rng.random_range(2.0..20.0), y2 + rng.random_range(2.0..20.0));
                        tube(t, rng.random_range(0.0..1.0), b1, b2)
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn perfect_scores_give_two() {
        let s = sequence_score(&[1.0, 1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(s, 2.0);
    }

    #[test]
    fn hand_arithmetic_two_clips() {
        let s = sequence_score(&[0.5, 0.5], &[0.5]).unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn single_clip_drops_overlap_term() {
        let s = sequence_score(&[0.7], &[]).unwrap();
        assert_eq!(s, 0.7);
    }

    #[test]
    fn score_matches_independent_recomputation() {
        let mut rng = substream(51, "link-score");
        for _ in 0..20 {
            let a: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
            let o: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            let s = sequence_score(&a, &o).unwrap();
            let want = a.iter().sum::<f64>() / 4.0 + o.iter().sum::<f64>() / 3.0;
            assert!((s - want).abs() < 1e-15);
        }
    }

    #[test]
    fn score_is_monotone_in_components() {
        let base = sequence_score(&[0.4, 0.5, 0.6], &[0.3, 0.2]).unwrap();
        let up_a = sequence_score(&[0.4, 0.9, 0.6], &[0.3, 0.2]).unwrap();
        let up_o = sequence_score(&[0.4, 0.5, 0.6], &[0.3, 0.7]).unwrap();
        assert!(up_a > base);
        assert!(up_o > base);
    }

    #[test]
    fn length_mismatch_is_error() {
        assert!(sequence_score(&[0.5, 0.5], &[]).is_err());
        assert!(sequence_score(&[], &[]).is_err());
    }

    #[test]
    fn three_clips_two_proposals_enumerates_eight() {
        let mut rng = substream(52, "link-eight");
        let per_clip = random_instance(&mut rng, 3, 2);
        let per_clip: Vec<Vec<TubeProposal>> = per_clip
            .into_iter()
            .map(|mut v| {
                while v.len() < 2 {
                    v.push(v[0].clone());
                }
                v
            })
            .collect();
        let all = enumerate_all_sequences(&per_clip).unwrap();
        assert_eq!(all.len(), 8);
    }

    #[test]
    fn single_clip_top1_is_max_actionness() {
        let b = Box2D::new(0.0, 0.0, 2.0, 2.0);
        let per_clip = vec![vec![
            tube(0, 0.3, b, b),
            tube(0, 0.9, b, b),
            tube(0, 0.5, b, b),
        ]];
        let out = top_k_sequences(&per_clip, 1).unwrap();
        assert_eq!(out[0].tube_indices, vec![1]);
        assert_eq!(out[0].score, 0.9);
    }

    #[test]
    fn dp_matches_brute_force_exactly() {
        let mut rng = substream(53, "link-dp");
        for _ in 0..100 {
            let m = rng.random_range(1..=5);
            let per_clip = random_instance(&mut rng, m, 6);
            let k = rng.random_range(1..=10);
            let dp = top_k_sequences(&per_clip, k).unwrap();
            let brute = enumerate_all_sequences(&per_clip).unwrap();
            let want: Vec<_> = brute.into_iter().take(k).collect();
            assert_eq!(dp.len(), want.len());
            for (a, b) in dp.iter().zip(&want) {
                assert_eq!(a.tube_indices, b.tube_indices);
                assert_eq!(a.score, b.score, "scores must be bit-identical");
            }
        }
    }

    #[test]
    fn dp_breaks_ties_lexicographically() {
        let b = Box2D::new(0.0, 0.0, 4.0, 4.0);
        // identical proposals: all sequences tie, order must be lexicographic
        let per_clip = vec![
            vec![tube(0, 0.5, b, b), tube(0, 0.5, b, b)],
            vec![tube(1, 0.5, b, b), tube(1, 0.5, b, b)],
        ];
        let out = top_k_sequences(&per_clip, 4).unwrap();
        let idx: Vec<Vec<usize>> = out.iter().map(|s| s.tube_indices.clone()).collect();
        assert_eq!(idx, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
    }

    #[test]
    fn returned_scores_non_increasing() {
        let mut rng = substream(54, "link-desc");
        let per_clip = random_instance(&mut rng, 4, 5);
        let out = top_k_sequences(&per_clip, 10).unwrap();
        for w in out.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn empty_clip_rejected() {
        let b = Box2D::new(0.0, 0.0, 2.0, 2.0);
        let per_clip = vec![vec![tube(0, 0.5, b, b)], vec![]];
        assert!(top_k_sequences(&per_clip, 5).is_err());
    }

    #[test]
    fn linked_sequence_score_recomputes_from_parts() {
        let mut rng = substream(55, "link-recompute");
        let per_clip = random_instance(&mut rng, 4, 4);
        for seq in top_k_sequences(&per_clip, 5).unwrap() {
            let a: Vec<f64> = seq
                .tube_indices
                .iter()
                .enumerate()
                .map(|(t, &p)| per_clip[t][p].actionness)
                .collect();
            let o: Vec<f64> = (1..4)
                .map(|t| {
                    transition_overlap(
                        &per_clip[t - 1][seq.tube_indices[t - 1]],
                        &per_clip[t][seq.tube_indices[t]],
                    )
                })
                .collect();
            let s = sequence_score(&a, &o).unwrap();
            assert!((s - seq.score).abs() < 1e-9);
        }
    }
}
