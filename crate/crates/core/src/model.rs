//! Full model assembly: parameter construction, the per-scene forward pass
//! through both branches, inference, and dataset evaluation.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ablation::AblationConfig;
use crate::datamodel::{
    compute_iou, encode_spatial_features, project_object_features, BoundingBox, DatasetMeta,
    ObjectProjector, ObjectProposal, SceneAnnotation, SpatialEncoder, TaskMode, NON_RELATIONSHIP,
    SPATIAL_RAW_DIM,
};
use crate::error::{Error, Result};
use crate::fusion::{
    candidate_pairs, per_class_nms, rank_triplets, Detection, ObjectDecision, PairPrediction,
};
use crate::metrics::{match_triplets, GtTriplet, MetricReport, ModeEval, MATCH_IOU};
use crate::nn::{Forward, Linear, Mlp, ParamPool};
use crate::object_resgcn::{
    aggregate_object_context, contextual_coefficients, object_branch_relation_logits,
    predict_object_classes, ObjectBranchParams,
};
use crate::prior::{CooccurrenceMatrix, FrequencyBaseline};
use crate::relation_resgcn::{
    build_relation_nodes, edge_weights, message_passing, prior_context, relation_branch_logits,
    RelationBranchParams,
};
use crate::synthgen::FeatureOracle;
use crate::tape::NodeId;
use crate::tensor::Tensor;

pub const NMS_IOU: f64 = 0.3;

/// Every dimensional knob of the architecture. Class counts come from the
/// dataset; the rest default to desk scale.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub num_object_classes: usize,
    pub num_predicates: usize,
    /// Appearance feature length d_f.
    pub feature_dim: usize,
    /// Raw union feature length d_u.
    pub union_dim: usize,
    /// Shared object feature space d.
    pub object_dim: usize,
    /// Hidden width of the object aggregation.
    pub hidden_dim: usize,
    /// Relation node feature space d_r.
    pub relation_dim: usize,
    /// Spatial embedding d_b.
    pub spatial_dim: usize,
    pub spatial_hidden: usize,
    /// Shared attention space for edge weights.
    pub attention_dim: usize,
    /// Prior context width d_q.
    pub context_dim: usize,
    /// Per-class combiner width.
    pub per_class_dim: usize,
    /// Prior propagation rounds.
    pub prior_steps: usize,
    /// Restrict object-context neighborhoods to overlapping boxes in the
    /// simulated-detection task.
    pub context_overlap_only: bool,
}

impl ModelConfig {
    pub fn for_meta(meta: &DatasetMeta) -> Self {
        let (feature_dim, union_dim) = meta
            .generator
            .as_ref()
            .map(|g| (g.feature_dim, g.union_dim))
            .unwrap_or((64, 64));
        ModelConfig {
            num_object_classes: meta.num_object_classes,
            num_predicates: meta.num_predicates,
            feature_dim,
            union_dim,
            object_dim: 64,
            hidden_dim: 64,
            relation_dim: 64,
            spatial_dim: 32,
            spatial_hidden: 32,
            attention_dim: 64,
            context_dim: 32,
            per_class_dim: 8,
            prior_steps: 1,
            context_overlap_only: false,
        }
    }

    /// Small dimensions for fast numeric checks.
    pub fn tiny(num_object_classes: usize, num_predicates: usize) -> Self {
        ModelConfig {
            num_object_classes,
            num_predicates,
            feature_dim: 5,
            union_dim: 5,
            object_dim: 4,
            hidden_dim: 4,
            relation_dim: 4,
            spatial_dim: 3,
            spatial_hidden: 4,
            attention_dim: 3,
            context_dim: 3,
            per_class_dim: 2,
            prior_steps: 1,
            context_overlap_only: false,
        }
    }
}

/// All learnable tensors of both branches plus the input projections,
/// registered under stable names.
#[derive(Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub pool: ParamPool,
    pub projector: ObjectProjector,
    pub union_proj: Linear,
    pub spatial: SpatialEncoder,
    pub object: ObjectBranchParams,
    pub relation: RelationBranchParams,
}

impl ModelParams {
    pub fn new(config: ModelConfig, num_heads: usize, seed: u64) -> Self {
        let mut pool = ParamPool::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projector = ObjectProjector {
            linear: Linear::new(
                &mut pool,
                &mut rng,
                "input.projector",
                ObjectProjector::input_dim(config.feature_dim, config.num_object_classes),
                config.object_dim,
                true,
            ),
            d_f: config.feature_dim,
            num_object_classes: config.num_object_classes,
        };
        let union_proj = Linear::new(
            &mut pool,
            &mut rng,
            "input.union_proj",
            config.union_dim,
            config.object_dim,
            true,
        );
        let spatial = SpatialEncoder {
            mlp: Mlp::new(
                &mut pool,
                &mut rng,
                "input.spatial",
                SPATIAL_RAW_DIM,
                config.spatial_hidden,
                config.spatial_dim,
            ),
        };
        let object = ObjectBranchParams::new(
            &mut pool,
            &mut rng,
            config.object_dim,
            config.hidden_dim,
            num_heads,
            config.num_object_classes,
            config.num_predicates,
        );
        let relation = RelationBranchParams::new(
            &mut pool,
            &mut rng,
            config.object_dim,
            config.relation_dim,
            config.spatial_dim,
            config.attention_dim,
            config.context_dim,
            config.per_class_dim,
            config.num_predicates,
        );
        ModelParams {
            config,
            pool,
            projector,
            union_proj,
            spatial,
            object,
            relation,
        }
    }
}

/// Assembled model: parameters, ablation wiring, and the prior matrix.
#[derive(Debug)]
pub struct Model {
    pub params: ModelParams,
    pub ablation: AblationConfig,
    pub prior: CooccurrenceMatrix,
}

/// Everything the model sees for one image under a given task mode.
#[derive(Debug, Clone)]
pub struct SceneInputs {
    pub mode: TaskMode,
    pub width: f64,
    pub height: f64,
    /// Boxes the model observes (ground truth, or jittered in SGGenSim).
    pub boxes: Vec<BoundingBox>,
    pub proposals: Vec<ObjectProposal>,
    pub gt_labels: Vec<usize>,
    /// Raw union features for every ordered pair.
    pub union_raw: HashMap<(usize, usize), Vec<f64>>,
}

/// Materialize model inputs for a scene from the feature oracle.
pub fn scene_inputs(
    oracle: &FeatureOracle,
    scene: &SceneAnnotation,
    mode: TaskMode,
) -> SceneInputs {
    let n = scene.objects.len();
    let boxes: Vec<BoundingBox> = (0..n)
        .map(|i| match mode {
            TaskMode::SGGenSim => oracle.jittered_box(scene, i),
            _ => scene.objects[i].bounding_box(),
        })
        .collect();
    let proposals: Vec<ObjectProposal> = (0..n)
        .map(|i| ObjectProposal {
            appearance: oracle.object_appearance(scene, i),
            bbox: boxes[i],
            class_scores: oracle.class_scores(scene, i),
        })
        .collect();
    let mut union_raw = HashMap::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                union_raw.insert((i, j), oracle.union_features(scene, i, j));
            }
        }
    }
    SceneInputs {
        mode,
        width: scene.width as f64,
        height: scene.height as f64,
        boxes,
        proposals,
        gt_labels: scene.objects.iter().map(|o| o.class).collect(),
        union_raw,
    }
}

/// Projected union feature nodes, created once per pair per tape.
#[derive(Debug, Default)]
pub struct UnionCache {
    nodes: HashMap<(usize, usize), NodeId>,
}

#[derive(Debug, Clone)]
pub struct ObjectStage {
    pub x_raw: Vec<NodeId>,
    pub x_refined: Vec<NodeId>,
    pub object_logits: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct RelationStage {
    pub pairs: Vec<(usize, usize)>,
    /// Summed branch logits per pair (unnormalized).
    pub fused_logits: Vec<NodeId>,
}

impl Model {
    pub fn begin(&self) -> Forward<'_> {
        Forward::new(&self.params.pool)
    }

    fn union_node(
        &self,
        fw: &mut Forward,
        inputs: &SceneInputs,
        cache: &mut UnionCache,
        pair: (usize, usize),
    ) -> NodeId {
        if let Some(&id) = cache.nodes.get(&pair) {
            return id;
        }
        let raw = fw.leaf(Tensor::vector(&inputs.union_raw[&pair]));
        let id = self.params.union_proj.apply(fw, raw);
        cache.nodes.insert(pair, id);
        id
    }

    /// Object stage: input projection, optional context aggregation, and
    /// object logits.
    pub fn forward_objects(
        &self,
        fw: &mut Forward,
        inputs: &SceneInputs,
        cache: &mut UnionCache,
    ) -> Result<ObjectStage> {
        let n = inputs.proposals.len();
        let mut x_raw = Vec::with_capacity(n);
        for proposal in &inputs.proposals {
            x_raw.push(project_object_features(
                fw,
                &self.params.projector,
                proposal,
                inputs.width,
                inputs.height,
            )?);
        }

        let x_refined = if self.ablation.use_object_branch && n >= 2 {
            let neighbors: Vec<Vec<usize>> = (0..n)
                .map(|i| {
                    (0..n)
                        .filter(|&j| {
                            j != i
                                && (!(self.params.config.context_overlap_only
                                    && inputs.mode == TaskMode::SGGenSim)
                                    || compute_iou(&inputs.boxes[i], &inputs.boxes[j]) > 0.0)
                        })
                        .collect()
                })
                .collect();
            let mut coefficients = HashMap::new();
            for (i, row) in neighbors.iter().enumerate() {
                for &j in row {
                    let u = self.union_node(fw, inputs, cache, (i, j));
                    let s = contextual_coefficients(
                        fw,
                        &self.params.object,
                        x_raw[i],
                        x_raw[j],
                        u,
                        self.ablation.single_node_coefficients,
                    );
                    coefficients.insert((i, j), s);
                }
            }
            aggregate_object_context(fw, &self.params.object, &x_raw, &coefficients, &neighbors)
        } else {
            x_raw.clone()
        };

        let object_logits = x_refined
            .iter()
            .map(|&x| self.params.object.object_classifier.apply(fw, x))
            .collect();
        Ok(ObjectStage {
            x_raw,
            x_refined,
            object_logits,
        })
    }

    /// Relation stage over a candidate pair list; returns fused logits.
    pub fn forward_relations(
        &self,
        fw: &mut Forward,
        inputs: &SceneInputs,
        cache: &mut UnionCache,
        stage: &ObjectStage,
        pairs: &[(usize, usize)],
    ) -> Result<RelationStage> {
        if pairs.is_empty() {
            return Ok(RelationStage {
                pairs: Vec::new(),
                fused_logits: Vec::new(),
            });
        }

        let object_branch: Option<Vec<NodeId>> = if self.ablation.use_object_branch {
            let mut logits = Vec::with_capacity(pairs.len());
            for &(i, j) in pairs {
                let u = self.union_node(fw, inputs, cache, (i, j));
                logits.push(object_branch_relation_logits(
                    fw,
                    &self.params.object,
                    stage.x_refined[i],
                    stage.x_refined[j],
                    u,
                    stage.x_raw[i],
                    stage.x_raw[j],
                ));
            }
            Some(logits)
        } else {
            None
        };

        let relation_branch: Option<Vec<NodeId>> = if self.ablation.use_relation_branch {
            let mut spatial_nodes = HashMap::new();
            for &(i, j) in pairs {
                let node = encode_spatial_features(
                    fw,
                    &self.params.spatial,
                    &inputs.boxes[i],
                    &inputs.boxes[j],
                    inputs.width,
                    inputs.height,
                )?;
                spatial_nodes.insert((i, j), node);
            }
            let mut union_nodes = HashMap::new();
            for &(i, j) in pairs {
                union_nodes.insert((i, j), self.union_node(fw, inputs, cache, (i, j)));
            }
            let nodes = build_relation_nodes(
                fw,
                &self.params.relation,
                &stage.x_refined,
                pairs,
                &|i, j| union_nodes[&(i, j)],
                &|i, j| spatial_nodes[&(i, j)],
            );
            let edges = edge_weights(fw, &self.params.relation, &nodes);
            let context = if self.ablation.use_prior {
                prior_context(
                    fw,
                    &self.params.relation,
                    &nodes,
                    &self.prior,
                    self.params.config.prior_steps,
                )
            } else {
                (0..nodes.len())
                    .map(|_| fw.tape.zeros(self.params.config.context_dim))
                    .collect()
            };
            let refined = message_passing(fw, &self.params.relation, &nodes, &edges, &context);
            Some(relation_branch_logits(fw, &self.params.relation, &refined))
        } else {
            None
        };

        let fused_logits = match (object_branch, relation_branch) {
            (Some(o), Some(r)) => o
                .into_iter()
                .zip(r)
                .map(|(a, b)| fw.tape.add(a, b))
                .collect(),
            (Some(o), None) => o,
            (None, Some(r)) => r,
            (None, None) => unreachable!("ablation validation keeps one branch"),
        };
        Ok(RelationStage {
            pairs: pairs.to_vec(),
            fused_logits,
        })
    }

    /// Inference for one scene: object decisions (with per-class NMS in the
    /// simulated-detection mode), candidate pairs, and fused predicate
    /// probabilities.
    pub fn infer_scene(
        &self,
        oracle: &FeatureOracle,
        scene: &SceneAnnotation,
        mode: TaskMode,
    ) -> Result<SceneInference> {
        let inputs = scene_inputs(oracle, scene, mode);
        let mut fw = self.begin();
        let mut cache = UnionCache::default();
        let stage = self.forward_objects(&mut fw, &inputs, &mut cache)?;

        let decisions: Vec<ObjectDecision> = stage
            .object_logits
            .iter()
            .enumerate()
            .map(|(i, &logits)| {
                let prediction = predict_object_classes(
                    fw.tape.value(logits).data(),
                    mode,
                    Some(inputs.gt_labels[i]),
                );
                ObjectDecision {
                    bbox: inputs.boxes[i],
                    label: prediction.label,
                    score: prediction.score,
                }
            })
            .collect();

        let active: Vec<usize> = if mode == TaskMode::SGGenSim {
            let detections: Vec<Detection> = decisions
                .iter()
                .map(|d| Detection {
                    bbox: d.bbox,
                    class: d.label,
                    score: d.score,
                })
                .collect();
            per_class_nms(&detections, NMS_IOU)
        } else {
            (0..decisions.len()).collect()
        };

        let active_boxes: Vec<BoundingBox> = active.iter().map(|&i| inputs.boxes[i]).collect();
        let pairs: Vec<(usize, usize)> = candidate_pairs(&active_boxes, mode)
            .into_iter()
            .map(|(a, b)| (active[a], active[b]))
            .collect();

        let relations = self.forward_relations(&mut fw, &inputs, &mut cache, &stage, &pairs)?;
        if !fw.tape.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite activation while scoring image `{}`",
                scene.id
            )));
        }
        let pair_predictions = relations
            .pairs
            .iter()
            .zip(relations.fused_logits.iter())
            .map(|(&(i, j), &logits)| PairPrediction {
                subj: i,
                obj: j,
                probs: crate::tensor::softmax(fw.tape.value(logits).data()),
            })
            .collect();
        Ok(SceneInference {
            objects: decisions,
            pairs: pair_predictions,
        })
    }

    /// Metric report over a set of scenes.
    pub fn evaluate_on(
        &self,
        oracle: &FeatureOracle,
        scenes: &[SceneAnnotation],
        mode: TaskMode,
        task_name: &str,
    ) -> Result<MetricReport> {
        let mut constrained = ModeEval::default();
        let mut unconstrained = ModeEval::default();
        for scene in scenes {
            let inference = self.infer_scene(oracle, scene, mode)?;
            let gts = gt_triplets(scene);
            for (eval, is_constrained) in
                [(&mut constrained, true), (&mut unconstrained, false)]
            {
                let ranked =
                    rank_triplets(&inference.pairs, &inference.objects, 100, is_constrained)?;
                eval.images.push(match_triplets(&ranked, &gts, MATCH_IOU));
            }
        }
        Ok(MetricReport {
            task: task_name.to_string(),
            num_predicates: self.params.config.num_predicates,
            constrained,
            unconstrained,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SceneInference {
    pub objects: Vec<ObjectDecision>,
    pub pairs: Vec<PairPrediction>,
}

/// Ground-truth triplets of a scene (true boxes and labels).
pub fn gt_triplets(scene: &SceneAnnotation) -> Vec<GtTriplet> {
    scene
        .relations
        .iter()
        .filter(|r| r.predicate != NON_RELATIONSHIP)
        .map(|r| GtTriplet {
            subj_box: scene.objects[r.subj].bounding_box(),
            obj_box: scene.objects[r.obj].bounding_box(),
            subj_label: scene.objects[r.subj].class,
            pred_label: r.predicate,
            obj_label: scene.objects[r.obj].class,
        })
        .collect()
}

/// Evaluate the frequency baseline with the same ranking and matching
/// machinery as the model.
pub fn evaluate_frequency_baseline(
    baseline: &FrequencyBaseline,
    oracle: &FeatureOracle,
    scenes: &[SceneAnnotation],
    mode: TaskMode,
    task_name: &str,
    num_predicates: usize,
) -> Result<MetricReport> {
    let mut constrained = ModeEval::default();
    let mut unconstrained = ModeEval::default();
    for scene in scenes {
        let inputs = scene_inputs(oracle, scene, mode);
        let decisions: Vec<ObjectDecision> = (0..scene.objects.len())
            .map(|i| {
                let prediction = predict_object_classes(
                    // baseline has no learned object model; detector-style
                    // scores stand in for its independent object predictions
                    &inputs.proposals[i].class_scores.iter().map(|s| s.ln()).collect::<Vec<_>>(),
                    mode,
                    Some(inputs.gt_labels[i]),
                );
                ObjectDecision {
                    bbox: inputs.boxes[i],
                    label: prediction.label,
                    score: prediction.score,
                }
            })
            .collect();
        let pairs: Vec<PairPrediction> = candidate_pairs(&inputs.boxes, mode)
            .into_iter()
            .map(|(i, j)| PairPrediction {
                subj: i,
                obj: j,
                probs: baseline.distribution(decisions[i].label, decisions[j].label),
            })
            .collect();
        let gts = gt_triplets(scene);
        for (eval, is_constrained) in [(&mut constrained, true), (&mut unconstrained, false)] {
            let ranked = rank_triplets(&pairs, &decisions, 100, is_constrained)?;
            eval.images.push(match_triplets(&ranked, &gts, MATCH_IOU));
        }
    }
    Ok(MetricReport {
        task: task_name.to_string(),
        num_predicates,
        constrained,
        unconstrained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ablation::assemble;
    use crate::synthgen::GeneratorConfig;

    fn tiny_setup(seed: u64) -> (crate::datamodel::Dataset, FeatureOracle) {
        let config = GeneratorConfig {
            seed,
            num_images: 6,
            objects_min: 3,
            objects_max: 4,
            num_object_classes: 4,
            num_predicates: 5,
            feature_dim: 5,
            union_dim: 5,
            relations_per_image: 4,
            ..GeneratorConfig::default()
        };
        let dataset = crate::synthgen::generate_dataset(&config).unwrap();
        let oracle = FeatureOracle::for_dataset(&dataset).unwrap();
        (dataset, oracle)
    }

    fn tiny_model(seed: u64, ablation: AblationConfig, prior: CooccurrenceMatrix) -> Model {
        let config = ModelConfig::tiny(4, 5);
        let params = ModelParams::new(config, ablation.num_heads, seed);
        assemble(params, ablation, prior).unwrap()
    }

    #[test]
    fn full_forward_produces_finite_fused_logits() {
        let (dataset, oracle) = tiny_setup(21);
        let prior = crate::prior::build_cooccurrence(&dataset).unwrap();
        let model = tiny_model(3, AblationConfig::default(), prior);
        let inference = model
            .infer_scene(&oracle, &dataset.images[0], TaskMode::PredCls)
            .unwrap();
        let n = dataset.images[0].objects.len();
        assert_eq!(inference.pairs.len(), n * (n - 1));
        for pair in &inference.pairs {
            assert!((pair.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        // PredCls supplies ground truth with unit scores
        for (d, obj) in inference.objects.iter().zip(dataset.images[0].objects.iter()) {
            assert_eq!(d.label, obj.class);
            assert_eq!(d.score, 1.0);
        }
    }

    #[test]
    fn prior_off_means_matrix_is_inert() {
        let (dataset, oracle) = tiny_setup(22);
        let ablation = AblationConfig {
            use_prior: false,
            ..AblationConfig::default()
        };
        let a = tiny_model(5, ablation.clone(), CooccurrenceMatrix::identity(5));
        let wild = CooccurrenceMatrix::from_rows(
            5,
            (0..25).map(|i| (i % 7) as f64 / 7.0).collect::<Vec<_>>(),
        )
        .unwrap();
        let b = tiny_model(5, ablation, wild);
        let ia = a
            .infer_scene(&oracle, &dataset.images[1], TaskMode::PredCls)
            .unwrap();
        let ib = b
            .infer_scene(&oracle, &dataset.images[1], TaskMode::PredCls)
            .unwrap();
        for (pa, pb) in ia.pairs.iter().zip(ib.pairs.iter()) {
            assert_eq!(pa.probs, pb.probs);
        }
    }

    #[test]
    fn prior_on_means_matrix_matters() {
        let (dataset, oracle) = tiny_setup(23);
        let a = tiny_model(5, AblationConfig::default(), CooccurrenceMatrix::identity(5));
        let wild = CooccurrenceMatrix::from_rows(
            5,
            (0..25).map(|i| (i % 7) as f64 / 7.0).collect::<Vec<_>>(),
        )
        .unwrap();
        let b = tiny_model(5, AblationConfig::default(), wild);
        let ia = a
            .infer_scene(&oracle, &dataset.images[1], TaskMode::PredCls)
            .unwrap();
        let ib = b
            .infer_scene(&oracle, &dataset.images[1], TaskMode::PredCls)
            .unwrap();
        let same = ia
            .pairs
            .iter()
            .zip(ib.pairs.iter())
            .all(|(pa, pb)| pa.probs == pb.probs);
        assert!(!same);
    }

    #[test]
    fn branch_ablations_change_the_fusion() {
        let (dataset, oracle) = tiny_setup(24);
        let prior = crate::prior::build_cooccurrence(&dataset).unwrap();
        let full = tiny_model(7, AblationConfig::default(), prior.clone());
        let no_rel = tiny_model(
            7,
            AblationConfig {
                use_relation_branch: false,
                ..AblationConfig::default()
            },
            prior.clone(),
        );
        let no_obj = tiny_model(
            7,
            AblationConfig {
                use_object_branch: false,
                ..AblationConfig::default()
            },
            prior,
        );
        let scene = &dataset.images[2];
        let f = full.infer_scene(&oracle, scene, TaskMode::PredCls).unwrap();
        let r = no_rel.infer_scene(&oracle, scene, TaskMode::PredCls).unwrap();
        let o = no_obj.infer_scene(&oracle, scene, TaskMode::PredCls).unwrap();
        assert_ne!(f.pairs[0].probs, r.pairs[0].probs);
        assert_ne!(f.pairs[0].probs, o.pairs[0].probs);
    }

    #[test]
    fn head_count_never_changes_output_dims() {
        let (dataset, oracle) = tiny_setup(25);
        let prior = crate::prior::build_cooccurrence(&dataset).unwrap();
        for heads in [1usize, 2, 4, 8] {
            let model = tiny_model(
                9,
                AblationConfig {
                    num_heads: heads,
                    ..AblationConfig::default()
                },
                prior.clone(),
            );
            let inference = model
                .infer_scene(&oracle, &dataset.images[0], TaskMode::PredCls)
                .unwrap();
            assert_eq!(inference.pairs[0].probs.len(), 5);
        }
    }

    #[test]
    fn sgcls_predicts_labels_from_logits() {
        let (dataset, oracle) = tiny_setup(26);
        let prior = crate::prior::build_cooccurrence(&dataset).unwrap();
        let model = tiny_model(11, AblationConfig::default(), prior);
        let inference = model
            .infer_scene(&oracle, &dataset.images[0], TaskMode::SGCls)
            .unwrap();
        for d in &inference.objects {
            assert!(d.score > 0.0 && d.score <= 1.0);
            assert!(d.label < 4);
        }
    }

    #[test]
    fn sggen_sim_uses_jittered_boxes_and_overlap_pairs() {
        let (dataset, oracle) = tiny_setup(27);
        let prior = crate::prior::build_cooccurrence(&dataset).unwrap();
        let model = tiny_model(13, AblationConfig::default(), prior);
        let scene = &dataset.images[0];
        let inference = model
            .infer_scene(&oracle, scene, TaskMode::SGGenSim)
            .unwrap();
        // jitter moves boxes off the annotated corners
        let gt_box = scene.objects[0].bounding_box();
        let seen_box = inference.objects[0].bbox;
        assert_ne!(gt_box, seen_box);
        // every returned pair overlaps
        for pair in &inference.pairs {
            let iou = compute_iou(
                &inference.objects[pair.subj].bbox,
                &inference.objects[pair.obj].bbox,
            );
            assert!(iou > 0.0);
        }
    }

    #[test]
    fn evaluation_report_is_monotone_in_k() {
        let (dataset, oracle) = tiny_setup(28);
        let prior = crate::prior::build_cooccurrence(&dataset).unwrap();
        let model = tiny_model(15, AblationConfig::default(), prior);
        let report = model
            .evaluate_on(&oracle, &dataset.images, TaskMode::PredCls, "predcls")
            .unwrap();
        let r20 = report.constrained.recall_at(20);
        let r50 = report.constrained.recall_at(50);
        let r100 = report.constrained.recall_at(100);
        assert!(r20 <= r50 && r50 <= r100);
        // unconstrained ranking dominates constrained
        for k in [20, 50, 100] {
            assert!(report.unconstrained.recall_at(k) >= report.constrained.recall_at(k) - 1e-12);
        }
    }

    #[test]
    fn baseline_evaluation_emits_same_schema() {
        let (dataset, oracle) = tiny_setup(29);
        let baseline = crate::prior::frequency_baseline(&dataset).unwrap();
        let report = evaluate_frequency_baseline(
            &baseline,
            &oracle,
            &dataset.images,
            TaskMode::PredCls,
            "predcls",
            5,
        )
        .unwrap();
        let rows = report.rows();
        assert_eq!(rows.len(), 12);
        assert!(rows.iter().all(|r| r.value.is_finite()));
    }
}
