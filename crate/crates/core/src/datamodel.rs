//! Core domain types shared by every stage: boxes, scene annotations,
//! dataset serialization, and the learnable input projections.
//!
//! Boxes use corner form `(x1, y1, x2, y2)` with `x1 <= x2`, `y1 <= y2` and
//! `area = max(0, x2-x1) * max(0, y2-y1)`. The intersection of disjoint boxes
//! is encoded as the all-zero box so downstream spatial features stay
//! well-defined everywhere.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Forward, Linear, Mlp};
use crate::synthgen::GeneratorConfig;
use crate::tape::NodeId;
use crate::tensor::Tensor;

/// Predicate index reserved for "no relationship between this ordered pair".
pub const NON_RELATIONSHIP: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoundingBox { x1, y1, x2, y2 };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::Data(format!("non-finite box coordinates {b:?}")));
        }
        if x1 > x2 || y1 > y2 {
            return Err(Error::Data(format!("inverted box corners {b:?}")));
        }
        Ok(b)
    }

    pub fn zero() -> Self {
        BoundingBox {
            x1: 0.0,
            y1: 0.0,
            x2: 0.0,
            y2: 0.0,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    /// Coordinates divided by image width/height, as a flat `[x1,y1,x2,y2]`.
    pub fn normalized(&self, width: f64, height: f64) -> [f64; 4] {
        [
            self.x1 / width,
            self.y1 / height,
            self.x2 / width,
            self.y2 / height,
        ]
    }

    pub fn clamp_to(&self, width: f64, height: f64) -> BoundingBox {
        BoundingBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }
}

/// Intersection-over-union; 0 for disjoint or degenerate pairs.
pub fn compute_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection_box(a, b).area();
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Smallest rectangle covering both boxes.
pub fn union_box(a: &BoundingBox, b: &BoundingBox) -> BoundingBox {
    BoundingBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    }
}

/// Overlap rectangle, or the all-zero box when the inputs are disjoint.
pub fn intersection_box(a: &BoundingBox, b: &BoundingBox) -> BoundingBox {
    let x1 = a.x1.max(b.x1);
    let y1 = a.y1.max(b.y1);
    let x2 = a.x2.min(b.x2);
    let y2 = a.y2.min(b.y2);
    if x1 >= x2 || y1 >= y2 {
        BoundingBox::zero()
    } else {
        BoundingBox { x1, y1, x2, y2 }
    }
}

/// One detected or annotated object: raw appearance features, box in image
/// coordinates, and detector-style class confidence scores (sum 1).
#[derive(Debug, Clone)]
pub struct ObjectProposal {
    pub appearance: Vec<f64>,
    pub bbox: BoundingBox,
    pub class_scores: Vec<f64>,
}

impl ObjectProposal {
    pub fn validate(&self, d_f: usize, num_object_classes: usize) -> Result<()> {
        if self.appearance.len() != d_f {
            return Err(Error::Data(format!(
                "appearance length {} != configured {}",
                self.appearance.len(),
                d_f
            )));
        }
        if self.class_scores.len() != num_object_classes {
            return Err(Error::Data(format!(
                "class score length {} != {} classes",
                self.class_scores.len(),
                num_object_classes
            )));
        }
        let sum: f64 = self.class_scores.iter().sum();
        if self.class_scores.iter().any(|&s| s < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!(
                "class scores must be nonnegative and sum to 1 (sum {sum})"
            )));
        }
        Ok(())
    }
}

/// Evaluation regime: how much ground truth the model is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskMode {
    /// Ground-truth boxes and labels supplied; predict predicates only.
    PredCls,
    /// Ground-truth boxes supplied; predict labels and predicates.
    SGCls,
    /// Jitter-perturbed boxes, no labels; simulated detection.
    SGGenSim,
}

impl TaskMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "predcls" => Ok(TaskMode::PredCls),
            "sgcls" => Ok(TaskMode::SGCls),
            "sggen-sim" => Ok(TaskMode::SGGenSim),
            other => Err(Error::Config(format!(
                "unknown task `{other}` (expected predcls, sgcls, or sggen-sim)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskMode::PredCls => "predcls",
            TaskMode::SGCls => "sgcls",
            TaskMode::SGGenSim => "sggen-sim",
        }
    }
}

/// A ranked (subject, predicate, object) prediction. The confidence is the
/// product of the three element scores.
#[derive(Debug, Clone)]
pub struct PredictedTriplet {
    pub subj_idx: usize,
    pub obj_idx: usize,
    pub subj_box: BoundingBox,
    pub obj_box: BoundingBox,
    pub subj_label: usize,
    pub pred_label: usize,
    pub obj_label: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub class: usize,
}

impl ObjectAnnotation {
    pub fn bounding_box(&self) -> BoundingBox {
        BoundingBox {
            x1: self.bbox[0],
            y1: self.bbox[1],
            x2: self.bbox[2],
            y2: self.bbox[3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationAnnotation {
    pub subj: usize,
    pub obj: usize,
    pub predicate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<ObjectAnnotation>,
    pub relations: Vec<RelationAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_object_classes: usize,
    pub num_predicates: usize,
    /// Present on generated corpora; lets consumers rebuild the feature
    /// oracle from the file alone.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub images: Vec<SceneAnnotation>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        for image in &self.images {
            for (i, obj) in image.objects.iter().enumerate() {
                if obj.class >= self.meta.num_object_classes {
                    return Err(Error::DatasetValidation {
                        image: image.id.clone(),
                        detail: format!(
                            "object {i} class {} out of range (C^o = {})",
                            obj.class, self.meta.num_object_classes
                        ),
                    });
                }
                BoundingBox::new(obj.bbox[0], obj.bbox[1], obj.bbox[2], obj.bbox[3]).map_err(
                    |e| Error::DatasetValidation {
                        image: image.id.clone(),
                        detail: format!("object {i}: {e}"),
                    },
                )?;
            }
            for (k, rel) in image.relations.iter().enumerate() {
                if rel.subj >= image.objects.len() || rel.obj >= image.objects.len() {
                    return Err(Error::DatasetValidation {
                        image: image.id.clone(),
                        detail: format!(
                            "relation {k} references object index out of range ({}, {})",
                            rel.subj, rel.obj
                        ),
                    });
                }
                if rel.subj == rel.obj {
                    return Err(Error::DatasetValidation {
                        image: image.id.clone(),
                        detail: format!("relation {k} is a self-loop on object {}", rel.subj),
                    });
                }
                if rel.predicate >= self.meta.num_predicates {
                    return Err(Error::DatasetValidation {
                        image: image.id.clone(),
                        detail: format!(
                            "relation {k} predicate {} out of range (C^r = {})",
                            rel.predicate, self.meta.num_predicates
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("dataset serialization");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Dataset> {
        let dataset: Dataset = serde_json::from_str(text)
            .map_err(|e| Error::Data(format!("dataset parse error: {e}")))?;
        dataset.validate()?;
        Ok(dataset)
    }
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, dataset.to_json()).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Dataset::from_json(&text)
}

/// Learnable projection of `[appearance ; normalized box ; class scores]`
/// into the shared object feature space.
#[derive(Debug, Clone)]
pub struct ObjectProjector {
    pub linear: Linear,
    pub d_f: usize,
    pub num_object_classes: usize,
}

impl ObjectProjector {
    pub fn input_dim(d_f: usize, num_object_classes: usize) -> usize {
        d_f + 4 + num_object_classes
    }

    pub fn raw_input(
        &self,
        proposal: &ObjectProposal,
        width: f64,
        height: f64,
    ) -> Result<Tensor> {
        proposal.validate(self.d_f, self.num_object_classes)?;
        let mut data = Vec::with_capacity(self.linear.in_dim);
        data.extend_from_slice(&proposal.appearance);
        data.extend_from_slice(&proposal.bbox.normalized(width, height));
        data.extend_from_slice(&proposal.class_scores);
        Ok(Tensor::vector(&data))
    }
}

/// x_i = W [f^o_i ; b_i ; s_i] + b.
pub fn project_object_features(
    fw: &mut Forward,
    projector: &ObjectProjector,
    proposal: &ObjectProposal,
    width: f64,
    height: f64,
) -> Result<NodeId> {
    let raw = projector.raw_input(proposal, width, height)?;
    let x = fw.leaf(raw);
    Ok(projector.linear.apply(fw, x))
}

/// Learnable two-layer perceptron over the 16 normalized coordinates of
/// `[b_i, b_j, union, intersection]`.
#[derive(Debug, Clone)]
pub struct SpatialEncoder {
    pub mlp: Mlp,
}

pub const SPATIAL_RAW_DIM: usize = 16;

/// The raw 16-vector feeding the spatial encoder.
pub fn spatial_raw_features(
    b_i: &BoundingBox,
    b_j: &BoundingBox,
    width: f64,
    height: f64,
) -> Result<Tensor> {
    if width <= 0.0 || height <= 0.0 {
        return Err(Error::Data(format!(
            "image dimensions must be positive (got {width} x {height})"
        )));
    }
    let union = union_box(b_i, b_j);
    let inter = intersection_box(b_i, b_j);
    let mut data = Vec::with_capacity(SPATIAL_RAW_DIM);
    for b in [b_i, b_j, &union, &inter] {
        data.extend_from_slice(&b.normalized(width, height));
    }
    Ok(Tensor::vector(&data))
}

/// x^b for an ordered pair of boxes.
pub fn encode_spatial_features(
    fw: &mut Forward,
    encoder: &SpatialEncoder,
    b_i: &BoundingBox,
    b_j: &BoundingBox,
    width: f64,
    height: f64,
) -> Result<NodeId> {
    let raw = spatial_raw_features(b_i, b_j, width, height)?;
    let x = fw.leaf(raw);
    Ok(encoder.mlp.apply(fw, x))
}
