//! Branch fusion and scene-graph assembly: score fusion, candidate pair
//! selection, per-class non-maximum suppression, and triplet ranking.

use crate::datamodel::{compute_iou, BoundingBox, PredictedTriplet, TaskMode, NON_RELATIONSHIP};
use crate::error::{Error, Result};
use crate::tensor::softmax;

/// Final per-pair predicate distribution: softmax of the summed branch logits.
pub fn fuse_scores(relation_logits: &[f64], object_branch_logits: &[f64]) -> Vec<f64> {
    assert_eq!(
        relation_logits.len(),
        object_branch_logits.len(),
        "fuse_scores expects equal logit lengths"
    );
    let summed: Vec<f64> = relation_logits
        .iter()
        .zip(object_branch_logits.iter())
        .map(|(a, b)| a + b)
        .collect();
    softmax(&summed)
}

/// Candidate ordered pairs for relation prediction. Classification tasks use
/// every ordered pair; simulated detection keeps only overlapping boxes.
pub fn candidate_pairs(boxes: &[BoundingBox], mode: TaskMode) -> Vec<(usize, usize)> {
    let n = boxes.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if mode == TaskMode::SGGenSim && compute_iou(&boxes[i], &boxes[j]) <= 0.0 {
                continue;
            }
            pairs.push((i, j));
        }
    }
    pairs
}

/// A scored, classified box entering non-maximum suppression.
#[derive(Debug, Clone)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class: usize,
    pub score: f64,
}

/// Greedy per-class suppression by descending score. Returns the kept input
/// indices in their original order.
pub fn per_class_nms(detections: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then(a.cmp(&b))
    });
    let mut suppressed = vec![false; detections.len()];
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        for &j in &order[rank + 1..] {
            if suppressed[j] || detections[j].class != detections[i].class {
                continue;
            }
            if compute_iou(&detections[i].bbox, &detections[j].bbox) >= iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    (0..detections.len()).filter(|&i| !suppressed[i]).collect()
}

/// Fused predicate distribution for one ordered pair.
#[derive(Debug, Clone)]
pub struct PairPrediction {
    pub subj: usize,
    pub obj: usize,
    /// Softmax over all predicates (index 0 included but never emitted).
    pub probs: Vec<f64>,
}

/// Final per-object decision feeding triplet confidence.
#[derive(Debug, Clone)]
pub struct ObjectDecision {
    pub bbox: BoundingBox,
    pub label: usize,
    pub score: f64,
}

/// Rank candidate triplets by `subject score * predicate prob * object score`.
///
/// Constrained mode keeps only each pair's argmax predicate before ranking;
/// unconstrained mode ranks every (pair, predicate) entry. Predicate 0 is an
/// absence marker and is never emitted. Ties break lexicographically on
/// `(subj, obj, predicate)` for determinism.
pub fn rank_triplets(
    pairs: &[PairPrediction],
    objects: &[ObjectDecision],
    k: usize,
    constrained: bool,
) -> Result<Vec<PredictedTriplet>> {
    if k < 1 {
        return Err(Error::Config(format!("top-K must be at least 1 (got {k})")));
    }
    let mut entries: Vec<PredictedTriplet> = Vec::new();
    for pair in pairs {
        let subject = &objects[pair.subj];
        let object = &objects[pair.obj];
        let predicates: Vec<usize> = if constrained {
            let best = (0..pair.probs.len())
                .filter(|&p| p != NON_RELATIONSHIP)
                .max_by(|&a, &b| pair.probs[a].total_cmp(&pair.probs[b]).then(b.cmp(&a)));
            best.into_iter().collect()
        } else {
            (0..pair.probs.len())
                .filter(|&p| p != NON_RELATIONSHIP)
                .collect()
        };
        for p in predicates {
            entries.push(PredictedTriplet {
                subj_idx: pair.subj,
                obj_idx: pair.obj,
                subj_box: subject.bbox,
                obj_box: object.bbox,
                subj_label: subject.label,
                pred_label: p,
                obj_label: object.label,
                confidence: subject.score * pair.probs[p] * object.score,
            });
        }
    }
    entries.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.subj_idx.cmp(&b.subj_idx))
            .then(a.obj_idx.cmp(&b.obj_idx))
            .then(a.pred_label.cmp(&b.pred_label))
    });
    entries.truncate(k);
    Ok(entries)
}
