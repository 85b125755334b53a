//! Triplet matching and the recall / mean-recall metric suite.
//!
//! Recall@K averages per-image recall of the top-K ranked triplets; mean
//! Recall@K computes recall per predicate class and averages over classes,
//! which makes it sensitive to tail-class performance that plain recall
//! hides. Both are reported with and without the graph constraint.

use crate::datamodel::{compute_iou, BoundingBox, PredictedTriplet};
use crate::error::{Error, Result};

pub const METRIC_KS: [usize; 3] = [20, 50, 100];
pub const MATCH_IOU: f64 = 0.5;

/// One ground-truth triplet with its boxes in image coordinates.
#[derive(Debug, Clone)]
pub struct GtTriplet {
    pub subj_box: BoundingBox,
    pub obj_box: BoundingBox,
    pub subj_label: usize,
    pub pred_label: usize,
    pub obj_label: usize,
}

/// Match outcome for one image: for each ground-truth triplet, the rank of
/// the prediction that claimed it (if any). Matching is greedy in rank order
/// and one-to-one in both directions.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub matched_rank: Vec<Option<usize>>,
    pub gt_predicates: Vec<usize>,
}

impl MatchResult {
    pub fn num_gt(&self) -> usize {
        self.gt_predicates.len()
    }

    pub fn matched_within(&self, k: usize) -> usize {
        self.matched_rank
            .iter()
            .filter(|r| matches!(r, Some(rank) if *rank < k))
            .count()
    }
}

/// Greedy rank-order matching: a prediction claims the first unmatched
/// ground-truth triplet whose three labels agree and whose subject and object
/// boxes both reach the IoU threshold.
pub fn match_triplets(
    predictions: &[PredictedTriplet],
    ground_truth: &[GtTriplet],
    iou_threshold: f64,
) -> MatchResult {
    let mut matched_rank = vec![None; ground_truth.len()];
    let mut taken = vec![false; ground_truth.len()];
    for (rank, pred) in predictions.iter().enumerate() {
        for (g, gt) in ground_truth.iter().enumerate() {
            if taken[g] {
                continue;
            }
            if pred.subj_label != gt.subj_label
                || pred.pred_label != gt.pred_label
                || pred.obj_label != gt.obj_label
            {
                continue;
            }
            if compute_iou(&pred.subj_box, &gt.subj_box) < iou_threshold
                || compute_iou(&pred.obj_box, &gt.obj_box) < iou_threshold
            {
                continue;
            }
            taken[g] = true;
            matched_rank[g] = Some(rank);
            break;
        }
    }
    MatchResult {
        matched_rank,
        gt_predicates: ground_truth.iter().map(|g| g.pred_label).collect(),
    }
}

/// All per-image match results for one ranking mode.
#[derive(Debug, Clone, Default)]
pub struct ModeEval {
    pub images: Vec<MatchResult>,
}

impl ModeEval {
    /// R@K: mean over images (with ground truth) of the fraction matched
    /// within the top K.
    pub fn recall_at(&self, k: usize) -> f64 {
        let mut total = 0.0;
        let mut images = 0usize;
        for image in &self.images {
            if image.num_gt() == 0 {
                continue;
            }
            total += image.matched_within(k) as f64 / image.num_gt() as f64;
            images += 1;
        }
        if images == 0 {
            0.0
        } else {
            total / images as f64
        }
    }

    /// Per-class recall at K, pooled over images: (predicate, gt count,
    /// recall). Classes with zero ground truth are omitted.
    pub fn per_predicate_recall(&self, k: usize, num_predicates: usize) -> Vec<(usize, usize, f64)> {
        let mut gt_counts = vec![0usize; num_predicates];
        let mut hit_counts = vec![0usize; num_predicates];
        for image in &self.images {
            for (g, &pred) in image.gt_predicates.iter().enumerate() {
                gt_counts[pred] += 1;
                if matches!(image.matched_rank[g], Some(rank) if rank < k) {
                    hit_counts[pred] += 1;
                }
            }
        }
        (0..num_predicates)
            .filter(|&p| gt_counts[p] > 0)
            .map(|p| (p, gt_counts[p], hit_counts[p] as f64 / gt_counts[p] as f64))
            .collect()
    }

    /// mR@K: mean over predicate classes of per-class recall. The default
    /// pools ground-truth instances per class across images; the per-image
    /// variant averages each class's per-image recall first.
    pub fn mean_recall_at(&self, k: usize, num_predicates: usize, per_image: bool) -> f64 {
        if !per_image {
            let per_class = self.per_predicate_recall(k, num_predicates);
            if per_class.is_empty() {
                return 0.0;
            }
            return per_class.iter().map(|(_, _, r)| r).sum::<f64>() / per_class.len() as f64;
        }
        let mut sums = vec![0.0f64; num_predicates];
        let mut image_counts = vec![0usize; num_predicates];
        for image in &self.images {
            let mut gt = vec![0usize; num_predicates];
            let mut hit = vec![0usize; num_predicates];
            for (g, &pred) in image.gt_predicates.iter().enumerate() {
                gt[pred] += 1;
                if matches!(image.matched_rank[g], Some(rank) if rank < k) {
                    hit[pred] += 1;
                }
            }
            for p in 0..num_predicates {
                if gt[p] > 0 {
                    sums[p] += hit[p] as f64 / gt[p] as f64;
                    image_counts[p] += 1;
                }
            }
        }
        let classes: Vec<f64> = (0..num_predicates)
            .filter(|&p| image_counts[p] > 0)
            .map(|p| sums[p] / image_counts[p] as f64)
            .collect();
        if classes.is_empty() {
            0.0
        } else {
            classes.iter().sum::<f64>() / classes.len() as f64
        }
    }
}

/// Full metric report for one task over both ranking modes.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub task: String,
    pub num_predicates: usize,
    pub constrained: ModeEval,
    pub unconstrained: ModeEval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub task: String,
    pub mode: String,
    pub k: usize,
    pub metric: String,
    pub value: f64,
}

impl MetricReport {
    pub fn rows(&self) -> Vec<MetricRow> {
        let mut rows = Vec::new();
        for (mode, eval) in [
            ("constrained", &self.constrained),
            ("unconstrained", &self.unconstrained),
        ] {
            for &k in &METRIC_KS {
                rows.push(MetricRow {
                    task: self.task.clone(),
                    mode: mode.into(),
                    k,
                    metric: "recall".into(),
                    value: eval.recall_at(k),
                });
                rows.push(MetricRow {
                    task: self.task.clone(),
                    mode: mode.into(),
                    k,
                    metric: "mean_recall".into(),
                    value: eval.mean_recall_at(k, self.num_predicates, false),
                });
            }
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,mode,k,metric,value\n");
        for row in self.rows() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.task, row.mode, row.k, row.metric, row.value
            ));
        }
        out
    }

    /// Per-predicate breakdown CSV (constrained mode, K = 100), mirroring the
    /// per-relation improvement analysis axis.
    pub fn per_predicate_csv(&self) -> String {
        let mut out = String::from("predicate,gt_count,recall\n");
        for (p, gt, r) in self.constrained.per_predicate_recall(100, self.num_predicates) {
            out.push_str(&format!("{p},{gt},{r}\n"));
        }
        out
    }
}

pub fn parse_report_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line.trim() != "task,mode,k,metric,value" {
                return Err(Error::Data(format!("unexpected report header `{line}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            return Err(Error::Data(format!("report row {} malformed", i + 1)));
        }
        rows.push(MetricRow {
            task: cells[0].into(),
            mode: cells[1].into(),
            k: cells[2]
                .parse()
                .map_err(|_| Error::Data(format!("report row {}: bad K", i + 1)))?,
            metric: cells[3].into(),
            value: cells[4]
                .parse()
                .map_err(|_| Error::Data(format!("report row {}: bad value", i + 1)))?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredicateRecallRow {
    pub predicate: usize,
    pub gt_count: usize,
    pub recall: f64,
}

pub fn parse_per_predicate_csv(text: &str) -> Result<Vec<PredicateRecallRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line.trim() != "predicate,gt_count,recall" {
                return Err(Error::Data(format!("unexpected per-predicate header `{line}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(Error::Data(format!("per-predicate row {} malformed", i + 1)));
        }
        let parse_err = |what: &str| Error::Data(format!("per-predicate row {}: bad {what}", i + 1));
        rows.push(PredicateRecallRow {
            predicate: cells[0].parse().map_err(|_| parse_err("predicate"))?,
            gt_count: cells[1].parse().map_err(|_| parse_err("gt_count"))?,
            recall: cells[2].parse().map_err(|_| parse_err("recall"))?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn gt(s: usize, p: usize, o: usize) -> GtTriplet {
        GtTriplet {
            subj_box: bb(s as f64 * 20.0, 0.0, s as f64 * 20.0 + 10.0, 10.0),
            obj_box: bb(o as f64 * 20.0, 30.0, o as f64 * 20.0 + 10.0, 40.0),
            subj_label: s,
            pred_label: p,
            obj_label: o,
        }
    }

    fn pred_matching(g: &GtTriplet, confidence: f64) -> PredictedTriplet {
        PredictedTriplet {
            subj_idx: 0,
            obj_idx: 1,
            subj_box: g.subj_box,
            obj_box: g.obj_box,
            subj_label: g.subj_label,
            pred_label: g.pred_label,
            obj_label: g.obj_label,
            confidence,
        }
    }

    // GT: (man=0, on=1, horse=1) and (man=0, wearing=3, hat=2);
    // ranked predictions hit, miss ("near"=2), hit.
    fn hand_example() -> MatchResult {
        let gts = vec![gt(0, 1, 1), gt(0, 3, 2)];
        let mut miss = pred_matching(&gts[0], 0.8);
        miss.pred_label = 2;
        let predictions = vec![
            pred_matching(&gts[0], 0.9),
            miss,
            pred_matching(&gts[1], 0.7),
        ];
        match_triplets(&predictions, &gts, MATCH_IOU)
    }

    #[test]
    fn hand_example_recall_values() {
        let eval = ModeEval {
            images: vec![hand_example()],
        };
        assert_eq!(eval.recall_at(1), 0.5);
        assert_eq!(eval.recall_at(2), 0.5);
        assert_eq!(eval.recall_at(3), 1.0);
        assert_eq!(eval.mean_recall_at(3, 4, false), 1.0);
        assert_eq!(eval.mean_recall_at(3, 4, true), 1.0);
    }

    #[test]
    fn identical_prediction_matches_at_its_rank() {
        let gts = vec![gt(1, 2, 3)];
        let preds = vec![pred_matching(&gts[0], 0.9)];
        let result = match_triplets(&preds, &gts, MATCH_IOU);
        assert_eq!(result.matched_rank, vec![Some(0)]);
    }

    #[test]
    fn low_iou_blocks_a_label_match() {
        let gts = vec![gt(1, 2, 3)];
        let mut pred = pred_matching(&gts[0], 0.9);
        // shift the subject box so IoU drops below 0.5
        pred.subj_box = bb(
            gts[0].subj_box.x1 + 6.0,
            gts[0].subj_box.y1,
            gts[0].subj_box.x2 + 6.0,
            gts[0].subj_box.y2,
        );
        assert!(compute_iou(&pred.subj_box, &gts[0].subj_box) < 0.5);
        let result = match_triplets(&[pred], &gts, MATCH_IOU);
        assert_eq!(result.matched_rank, vec![None]);
    }

    #[test]
    fn greedy_matching_is_one_to_one() {
        let gts = vec![gt(1, 2, 3)];
        let preds = vec![pred_matching(&gts[0], 0.9), pred_matching(&gts[0], 0.8)];
        let result = match_triplets(&preds, &gts, MATCH_IOU);
        // only the higher-ranked prediction consumes the single ground truth
        assert_eq!(result.matched_rank, vec![Some(0)]);
        assert_eq!(result.matched_within(1), 1);
        assert_eq!(result.matched_within(2), 1);
    }

    #[test]
    fn all_wrong_predictions_score_zero() {
        let gts = vec![gt(1, 2, 3), gt(2, 1, 3)];
        let mut wrong = pred_matching(&gts[0], 0.9);
        wrong.pred_label = 3;
        let eval = ModeEval {
            images: vec![match_triplets(&[wrong], &gts, MATCH_IOU)],
        };
        for k in [1, 2, 3] {
            assert_eq!(eval.recall_at(k), 0.0);
            assert_eq!(eval.mean_recall_at(k, 4, false), 0.0);
        }
    }

    #[test]
    fn full_prediction_set_reaches_recall_one_in_any_order() {
        let gts = vec![gt(0, 1, 1), gt(1, 2, 0), gt(0, 3, 2)];
        let preds = vec![
            pred_matching(&gts[2], 0.9),
            pred_matching(&gts[0], 0.8),
            pred_matching(&gts[1], 0.7),
        ];
        let eval = ModeEval {
            images: vec![match_triplets(&preds, &gts, MATCH_IOU)],
        };
        assert_eq!(eval.recall_at(3), 1.0);
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let eval = ModeEval {
            images: vec![hand_example()],
        };
        let mut last_r = 0.0;
        let mut last_mr = 0.0;
        for k in 1..=5 {
            let r = eval.recall_at(k);
            let mr = eval.mean_recall_at(k, 4, false);
            assert!(r >= last_r);
            assert!(mr >= last_mr);
            last_r = r;
            last_mr = mr;
        }
    }

    #[test]
    fn zero_gt_images_are_skipped() {
        let empty = match_triplets(&[], &[], MATCH_IOU);
        let eval = ModeEval {
            images: vec![empty, hand_example()],
        };
        assert_eq!(eval.recall_at(3), 1.0);
    }

    #[test]
    fn head_only_predictor_shows_metric_gap() {
        // 9 head instances recalled, 1 tail instance each for 5 tail classes missed
        let mut images = Vec::new();
        for _ in 0..3 {
            let gts: Vec<GtTriplet> = (0..3).map(|_| gt(0, 1, 1)).collect();
            let preds: Vec<PredictedTriplet> =
                gts.iter().map(|g| pred_matching(g, 0.9)).collect();
            images.push(match_triplets(&preds, &gts, MATCH_IOU));
        }
        for tail in 2..7 {
            let gts = vec![gt(0, tail, 1)];
            images.push(match_triplets(&[], &gts, MATCH_IOU));
        }
        let eval = ModeEval { images };
        let r = eval.recall_at(10);
        let mr = eval.mean_recall_at(10, 8, false);
        assert!(r > 0.3, "head-dominated recall should stay high: {r}");
        // only the head class is ever recalled, so mR collapses to 1/#classes
        assert!((mr - 1.0 / 6.0).abs() < 1e-12, "mr = {mr}");
    }

    #[test]
    fn per_predicate_recalls_average_to_mean_recall() {
        let eval = ModeEval {
            images: vec![hand_example(), hand_example()],
        };
        for k in [1, 2, 3] {
            let per_class = eval.per_predicate_recall(k, 4);
            let mean: f64 =
                per_class.iter().map(|(_, _, r)| r).sum::<f64>() / per_class.len() as f64;
            assert!((mean - eval.mean_recall_at(k, 4, false)).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trips() {
        let report = MetricReport {
            task: "predcls".into(),
            num_predicates: 4,
            constrained: ModeEval {
                images: vec![hand_example()],
            },
            unconstrained: ModeEval {
                images: vec![hand_example()],
            },
        };
        let rows = parse_report_csv(&report.to_csv()).unwrap();
        assert_eq!(rows, report.rows());
        let per_pred = parse_per_predicate_csv(&report.per_predicate_csv()).unwrap();
        assert_eq!(per_pred.len(), 2);
        assert_eq!(per_pred[0].predicate, 1);
        assert_eq!(per_pred[0].gt_count, 1);
    }
}
