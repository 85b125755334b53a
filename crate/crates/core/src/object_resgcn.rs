//! Object-level context branch.
//!
//! Cross-attention couples subject, object, and union-region features; the
//! gated products are projected into per-head contextual coefficients that
//! weight a residual aggregation over every other object in the image. The
//! refined features feed the object classifier and the object-branch
//! relation logits (pair fusion plus subject/object skip classifiers).

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::datamodel::TaskMode;
use crate::nn::{Forward, LayerNorm, Linear, Param, ParamPool};
use crate::tape::NodeId;
use crate::tensor::softmax;

/// The four projection matrices of the gated cross-attention block.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub w_s: Param,
    pub w_o: Param,
    pub w_ca_s: Param,
    pub w_ca_o: Param,
    pub dim: usize,
}

impl CrossAttention {
    pub fn new(pool: &mut ParamPool, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        let mat = |pool: &mut ParamPool, rng: &mut ChaCha8Rng, suffix: &str| {
            let lin = Linear::new(pool, rng, &format!("{name}.{suffix}"), dim, dim, false);
            lin.w
        };
        CrossAttention {
            w_s: mat(pool, rng, "w_s"),
            w_o: mat(pool, rng, "w_o"),
            w_ca_s: mat(pool, rng, "w_ca_s"),
            w_ca_o: mat(pool, rng, "w_ca_o"),
            dim,
        }
    }
}

/// Gated bilinear interaction of an ordered feature pair:
/// `(W_s x_i ⊙ σ(W_ca_o x_j) + W_s x_i) ⊙ (W_o x_j ⊙ σ(W_ca_s x_i) + W_o x_j)`.
pub fn cross_attention(fw: &mut Forward, ca: &CrossAttention, x_i: NodeId, x_j: NodeId) -> NodeId {
    assert_eq!(fw.tape.value(x_i).rows(), ca.dim, "cross attention dim");
    assert_eq!(fw.tape.value(x_j).rows(), ca.dim, "cross attention dim");
    let w_s = fw.param(ca.w_s);
    let w_o = fw.param(ca.w_o);
    let w_ca_s = fw.param(ca.w_ca_s);
    let w_ca_o = fw.param(ca.w_ca_o);

    let s_i = fw.tape.matvec(w_s, x_i);
    let gate_j = fw.tape.matvec(w_ca_o, x_j);
    let gate_j = fw.tape.sigmoid(gate_j);
    let gated_i = fw.tape.mul(s_i, gate_j);
    let left = fw.tape.add(gated_i, s_i);

    let o_j = fw.tape.matvec(w_o, x_j);
    let gate_i = fw.tape.matvec(w_ca_s, x_i);
    let gate_i = fw.tape.sigmoid(gate_i);
    let gated_j = fw.tape.mul(o_j, gate_i);
    let right = fw.tape.add(gated_j, o_j);

    fw.tape.mul(left, right)
}

/// Fusion operator `x (+) y = ReLU(Wx x + Wy y) - (Wx x - Wy y)^2`,
/// squared elementwise.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub w_x: Param,
    pub w_y: Param,
    pub dim: usize,
}

impl Fusion {
    pub fn new(pool: &mut ParamPool, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Self {
        let w_x = Linear::new(pool, rng, &format!("{name}.w_x"), dim, dim, false).w;
        let w_y = Linear::new(pool, rng, &format!("{name}.w_y"), dim, dim, false).w;
        Fusion { w_x, w_y, dim }
    }
}

pub fn fuse(fw: &mut Forward, f: &Fusion, x: NodeId, y: NodeId) -> NodeId {
    let w_x = fw.param(f.w_x);
    let w_y = fw.param(f.w_y);
    let px = fw.tape.matvec(w_x, x);
    let py = fw.tape.matvec(w_y, y);
    let sum = fw.tape.add(px, py);
    let rect = fw.tape.relu(sum);
    let diff = fw.tape.sub(px, py);
    let sq = fw.tape.mul(diff, diff);
    fw.tape.sub(rect, sq)
}

#[derive(Debug, Clone)]
pub struct ObjectBranchParams {
    pub ca: CrossAttention,
    /// Stacked per-head coefficient projections, one d-dim row per head.
    pub heads: Param,
    pub num_heads: usize,
    pub w1: Param,
    pub w2: Param,
    pub w3: Param,
    pub ln: LayerNorm,
    pub object_classifier: Linear,
    pub pair_classifier: Linear,
    pub subject_skip: Linear,
    pub object_skip: Linear,
    pub fuse_pair: Fusion,
    pub fuse_union: Fusion,
    pub dim: usize,
    pub hidden_dim: usize,
}

impl ObjectBranchParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pool: &mut ParamPool,
        rng: &mut ChaCha8Rng,
        dim: usize,
        hidden_dim: usize,
        num_heads: usize,
        num_object_classes: usize,
        num_predicates: usize,
    ) -> Self {
        let ca = CrossAttention::new(pool, rng, "object.ca", dim);
        let heads = Linear::new(pool, rng, "object.heads", dim, num_heads, false).w;
        let w1 = Linear::new(pool, rng, "object.w1", dim, dim, false).w;
        let w2 = Linear::new(pool, rng, "object.w2", num_heads * dim, hidden_dim, false).w;
        let w3 = Linear::new(pool, rng, "object.w3", hidden_dim, dim, false).w;
        let ln = LayerNorm::new(pool, "object.ln", hidden_dim);
        ObjectBranchParams {
            ca,
            heads,
            num_heads,
            w1,
            w2,
            w3,
            ln,
            object_classifier: Linear::new(pool, rng, "object.classifier", dim, num_object_classes, true),
            pair_classifier: Linear::new(pool, rng, "object.pair_classifier", dim, num_predicates, true),
            subject_skip: Linear::new(pool, rng, "object.subject_skip", dim, num_predicates, true),
            object_skip: Linear::new(pool, rng, "object.object_skip", dim, num_predicates, true),
            fuse_pair: Fusion::new(pool, rng, "object.fuse_pair", dim),
            fuse_union: Fusion::new(pool, rng, "object.fuse_union", dim),
            dim,
            hidden_dim,
        }
    }
}

/// Per-head coefficients in (0,1)^N for an ordered pair.
///
/// The inner features chain two cross-attention applications:
/// `CA(CA(x_i, x_j), u_ij)` by default, or `CA(CA(x_i, x_i), u_ij)` when
/// `literal_inner` is set (the single-node variant kept for ablation).
pub fn contextual_coefficients(
    fw: &mut Forward,
    params: &ObjectBranchParams,
    x_i: NodeId,
    x_j: NodeId,
    u_ij: NodeId,
    literal_inner: bool,
) -> NodeId {
    let first = if literal_inner {
        cross_attention(fw, &params.ca, x_i, x_i)
    } else {
        cross_attention(fw, &params.ca, x_i, x_j)
    };
    let inner = cross_attention(fw, &params.ca, first, u_ij);
    let heads = fw.param(params.heads);
    let pre = fw.tape.matvec(heads, inner);
    fw.tape.sigmoid(pre)
}

/// Residual aggregation over each object's neighborhood:
/// `x_i + ReLU(W3 LN(W2 Σ_j s_ij ⊗ (W1 x_j)))` with the empty neighborhood
/// passing features through unchanged.
pub fn aggregate_object_context(
    fw: &mut Forward,
    params: &ObjectBranchParams,
    xs: &[NodeId],
    coefficients: &HashMap<(usize, usize), NodeId>,
    neighbors: &[Vec<usize>],
) -> Vec<NodeId> {
    let w1 = fw.param(params.w1);
    let values: Vec<NodeId> = xs.iter().map(|&x| fw.tape.matvec(w1, x)).collect();
    let w2 = fw.param(params.w2);
    let w3 = fw.param(params.w3);

    xs.iter()
        .enumerate()
        .map(|(i, &x_i)| {
            let terms: Vec<NodeId> = neighbors[i]
                .iter()
                .map(|&j| {
                    let s = coefficients[&(i, j)];
                    fw.tape.kron(s, values[j])
                })
                .collect();
            if terms.is_empty() {
                return x_i;
            }
            let pooled = fw.tape.sum(&terms);
            let hidden = fw.tape.matvec(w2, pooled);
            let normed = params.ln.apply(fw, hidden);
            let projected = fw.tape.matvec(w3, normed);
            let rectified = fw.tape.relu(projected);
            fw.tape.add(x_i, rectified)
        })
        .collect()
}

/// Softmax object prediction with the task-mode contract applied.
#[derive(Debug, Clone)]
pub struct ObjectPrediction {
    pub probs: Vec<f64>,
    pub label: usize,
    pub score: f64,
}

pub fn predict_object_classes(
    logits: &[f64],
    mode: TaskMode,
    ground_truth: Option<usize>,
) -> ObjectPrediction {
    let probs = softmax(logits);
    match (mode, ground_truth) {
        (TaskMode::PredCls, Some(label)) => ObjectPrediction {
            probs,
            label,
            score: 1.0,
        },
        _ => {
            let label = (0..probs.len())
                .max_by(|&a, &b| probs[a].partial_cmp(&probs[b]).unwrap())
                .unwrap_or(0);
            let score = probs[label];
            ObjectPrediction { probs, label, score }
        }
    }
}

/// Object-branch relation logits for an ordered pair:
/// pair classifier over `(x̂_i (+) x̂_j) (+) u_ij` plus the subject-only and
/// object-only skip logits computed from the raw projected features.
#[allow(clippy::too_many_arguments)]
pub fn object_branch_relation_logits(
    fw: &mut Forward,
    params: &ObjectBranchParams,
    xhat_i: NodeId,
    xhat_j: NodeId,
    u_ij: NodeId,
    x_i_raw: NodeId,
    x_j_raw: NodeId,
) -> NodeId {
    let pair = fuse(fw, &params.fuse_pair, xhat_i, xhat_j);
    let r_ij = fuse(fw, &params.fuse_union, pair, u_ij);
    let logits = params.pair_classifier.apply(fw, r_ij);
    let s_skip = params.subject_skip.apply(fw, x_i_raw);
    let o_skip = params.object_skip.apply(fw, x_j_raw);
    let with_subject = fw.tape.add(logits, s_skip);
    fw.tape.add(with_subject, o_skip)
}
