//! Relation-level context branch.
//!
//! Each candidate ordered pair becomes a relation node carrying visual
//! features (projected `[x̂_i ; u_ij ; x̂_j]`) and spatial features (encoded
//! box geometry). Nodes exchange messages weighted by appearance/geometric
//! similarity, and every node additionally receives co-occurrence-prior
//! context aggregated from all other nodes. A residual update keeps the
//! original relation features from being overwhelmed by the context.

use rand_chacha::ChaCha8Rng;

use crate::nn::{Forward, LayerNorm, Linear, Param, ParamPool};
use crate::prior::CooccurrenceMatrix;
use crate::tape::NodeId;

#[derive(Debug, Clone)]
pub struct RelationBranchParams {
    /// Projection of the 3d concatenation into relation feature space.
    pub node_proj: Linear,
    /// W_V: value map for neighbor messages.
    pub value_map: Param,
    /// W_K / W_Q: key and query maps into the shared attention space.
    pub key_map: Param,
    pub query_map: Param,
    /// W_G: geometric map from spatial features into the attention space.
    pub geo_map: Param,
    /// Prior-update map applied to the bidirectional aggregate (no bias so an
    /// empty neighborhood yields an exactly-zero hidden state).
    pub prior_update: Param,
    /// Per-class combiner of initial and final hidden states.
    pub per_class_combiner: Linear,
    /// Cross-class combiner concatenating all per-class features.
    pub cross_class_combiner: Linear,
    /// Message transform inside the residual update.
    pub message_transform: Linear,
    pub ln: LayerNorm,
    pub classifier: Linear,
    pub relation_dim: usize,
    pub attention_dim: usize,
    pub context_dim: usize,
    pub per_class_dim: usize,
    pub num_predicates: usize,
}

impl RelationBranchParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pool: &mut ParamPool,
        rng: &mut ChaCha8Rng,
        object_dim: usize,
        relation_dim: usize,
        spatial_dim: usize,
        attention_dim: usize,
        context_dim: usize,
        per_class_dim: usize,
        num_predicates: usize,
    ) -> Self {
        let mat = |pool: &mut ParamPool, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize| {
            Linear::new(pool, rng, name, i, o, false).w
        };
        RelationBranchParams {
            node_proj: Linear::new(pool, rng, "relation.node_proj", 3 * object_dim, relation_dim, true),
            value_map: mat(pool, rng, "relation.value", relation_dim, relation_dim),
            key_map: mat(pool, rng, "relation.key", relation_dim, attention_dim),
            query_map: mat(pool, rng, "relation.query", relation_dim, attention_dim),
            geo_map: mat(pool, rng, "relation.geo", spatial_dim, attention_dim),
            prior_update: mat(pool, rng, "relation.prior_update", 2 * relation_dim, relation_dim),
            per_class_combiner: Linear::new(
                pool,
                rng,
                "relation.per_class",
                2 * relation_dim,
                per_class_dim,
                true,
            ),
            cross_class_combiner: Linear::new(
                pool,
                rng,
                "relation.cross_class",
                num_predicates * per_class_dim,
                context_dim,
                true,
            ),
            message_transform: Linear::new(
                pool,
                rng,
                "relation.transform",
                relation_dim + context_dim,
                relation_dim,
                true,
            ),
            ln: LayerNorm::new(pool, "relation.ln", relation_dim + context_dim),
            classifier: Linear::new(pool, rng, "relation.classifier", relation_dim, num_predicates, true),
            relation_dim,
            attention_dim,
            context_dim,
            per_class_dim,
            num_predicates,
        }
    }
}

/// Relation nodes for one image: ordered pair identities plus their visual
/// and spatial feature nodes.
#[derive(Debug, Clone)]
pub struct RelationNodes {
    pub pairs: Vec<(usize, usize)>,
    pub visual: Vec<NodeId>,
    pub spatial: Vec<NodeId>,
}

impl RelationNodes {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// One node per candidate pair; visual features are the learnable projection
/// of `[x̂_i ; u_ij ; x̂_j]` (applied exactly once).
pub fn build_relation_nodes(
    fw: &mut Forward,
    params: &RelationBranchParams,
    refined: &[NodeId],
    pairs: &[(usize, usize)],
    union_features: &dyn Fn(usize, usize) -> NodeId,
    spatial: &dyn Fn(usize, usize) -> NodeId,
) -> RelationNodes {
    let mut visual = Vec::with_capacity(pairs.len());
    let mut spatial_nodes = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        let u = union_features(i, j);
        let cat = fw.tape.concat(&[refined[i], u, refined[j]]);
        visual.push(params.node_proj.apply(fw, cat));
        spatial_nodes.push(spatial(i, j));
    }
    RelationNodes {
        pairs: pairs.to_vec(),
        visual,
        spatial: spatial_nodes,
    }
}

/// Normalized edge weights. `e[i][j]` is `None` exactly where the geometric
/// gate is zero (or on the diagonal); a row whose gates are all zero stays
/// entirely `None`.
pub fn edge_weights(
    fw: &mut Forward,
    params: &RelationBranchParams,
    nodes: &RelationNodes,
) -> Vec<Vec<Option<NodeId>>> {
    let n = nodes.len();
    let scale = 1.0 / (params.attention_dim as f64).sqrt();
    let key = fw.param(params.key_map);
    let query = fw.param(params.query_map);
    let geo = fw.param(params.geo_map);

    let keys: Vec<NodeId> = nodes.visual.iter().map(|&v| fw.tape.matvec(key, v)).collect();
    let queries: Vec<NodeId> = nodes
        .visual
        .iter()
        .map(|&v| fw.tape.matvec(query, v))
        .collect();
    let geos: Vec<NodeId> = nodes
        .spatial
        .iter()
        .map(|&s| fw.tape.matvec(geo, s))
        .collect();

    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut terms: Vec<Option<NodeId>> = vec![None; n];
        let mut live = Vec::new();
        for j in 0..n {
            if j == i {
                continue;
            }
            let raw = fw.tape.dot(geos[i], geos[j]);
            let scaled = fw.tape.scale_const(raw, scale);
            let gate = fw.tape.relu(scaled);
            if fw.tape.value(gate).item() == 0.0 {
                continue;
            }
            let appearance = fw.tape.dot(keys[i], queries[j]);
            let appearance = fw.tape.scale_const(appearance, scale);
            let boosted = fw.tape.exp(appearance);
            let term = fw.tape.mul(gate, boosted);
            terms[j] = Some(term);
            live.push(term);
        }
        if live.is_empty() {
            rows.push(vec![None; n]);
            continue;
        }
        let denom = fw.tape.sum(&live);
        rows.push(
            terms
                .into_iter()
                .map(|t| t.map(|term| fw.tape.div(term, denom)))
                .collect(),
        );
    }
    rows
}

/// Bidirectional prior aggregates `a_ic` for every node and class:
/// `[Σ_{j≠i} Σ_{c'} M[c',c] q_{jc'} ; Σ_{j≠i} Σ_{c'} M[c,c'] q_{jc'}]`
/// divided by `max(1, n_r - 1)`.
///
/// `states[j][c]` holds the current hidden state of node j for class c; the
/// per-class partial sums make this linear in the class count instead of
/// quadratic in nodes times classes.
fn prior_aggregates(
    fw: &mut Forward,
    params: &RelationBranchParams,
    states: &[Vec<NodeId>],
    prior: &CooccurrenceMatrix,
    class_uniform: bool,
) -> Vec<Vec<NodeId>> {
    let n = states.len();
    let classes = params.num_predicates;
    let norm = 1.0 / ((n as f64) - 1.0).max(1.0);

    if class_uniform {
        // every class shares one state per node, so both double sums collapse
        // to a column/row sum of M times the neighborhood total
        let all: Vec<NodeId> = states.iter().map(|s| s[0]).collect();
        let total = fw.tape.sum(&all);
        return (0..n)
            .map(|i| {
                let rest = fw.tape.sub(total, states[i][0]);
                let rest = fw.tape.scale_const(rest, norm);
                (0..classes)
                    .map(|c| {
                        let left = fw.tape.scale_const(rest, prior.column_sum(c));
                        let right = fw.tape.scale_const(rest, prior.row_sum(c));
                        fw.tape.concat(&[left, right])
                    })
                    .collect()
            })
            .collect();
    }

    // generic path: per-class totals, then M-weighted combinations
    let totals: Vec<NodeId> = (0..classes)
        .map(|c| {
            let column: Vec<NodeId> = states.iter().map(|s| s[c]).collect();
            fw.tape.sum(&column)
        })
        .collect();
    (0..n)
        .map(|i| {
            let rests: Vec<NodeId> = (0..classes)
                .map(|c| fw.tape.sub(totals[c], states[i][c]))
                .collect();
            (0..classes)
                .map(|c| {
                    let mut left_terms = Vec::new();
                    let mut right_terms = Vec::new();
                    for c_prime in 0..classes {
                        let into = prior.prob(c_prime, c);
                        if into != 0.0 {
                            left_terms.push(fw.tape.scale_const(rests[c_prime], into));
                        }
                        let outof = prior.prob(c, c_prime);
                        if outof != 0.0 {
                            right_terms.push(fw.tape.scale_const(rests[c_prime], outof));
                        }
                    }
                    let dim = params.relation_dim;
                    let left = if left_terms.is_empty() {
                        fw.tape.zeros(dim)
                    } else {
                        fw.tape.sum(&left_terms)
                    };
                    let left = fw.tape.scale_const(left, norm);
                    let right = if right_terms.is_empty() {
                        fw.tape.zeros(dim)
                    } else {
                        fw.tape.sum(&right_terms)
                    };
                    let right = fw.tape.scale_const(right, norm);
                    fw.tape.concat(&[left, right])
                })
                .collect()
        })
        .collect()
}

/// Co-occurrence-prior context per node.
///
/// Hidden states start at the node's visual features for every class, run
/// `steps` tanh propagation rounds over the prior graph, and the initial and
/// final states are combined per class and then across classes.
pub fn prior_context(
    fw: &mut Forward,
    params: &RelationBranchParams,
    nodes: &RelationNodes,
    prior: &CooccurrenceMatrix,
    steps: usize,
) -> Vec<NodeId> {
    assert!(steps >= 1, "prior propagation needs at least one step");
    assert_eq!(prior.size(), params.num_predicates, "prior size mismatch");
    let n = nodes.len();
    let classes = params.num_predicates;
    let update = fw.param(params.prior_update);

    let mut states: Vec<Vec<NodeId>> = nodes
        .visual
        .iter()
        .map(|&v| vec![v; classes])
        .collect();
    for step in 0..steps {
        if step == 0 {
            // class-uniform initial states collapse both double sums to
            // column/row sums of M times the neighborhood mean, so the
            // update needs two matvecs per node instead of one per class:
            // W_q [a ; b] = W_q [a ; 0] + W_q [0 ; b]
            let norm = 1.0 / ((n as f64) - 1.0).max(1.0);
            let all: Vec<NodeId> = states.iter().map(|s| s[0]).collect();
            let total = fw.tape.sum(&all);
            states = (0..n)
                .map(|i| {
                    let rest = fw.tape.sub(total, states[i][0]);
                    let rest = fw.tape.scale_const(rest, norm);
                    let zero = fw.tape.zeros(params.relation_dim);
                    let into_half = fw.tape.concat(&[rest, zero]);
                    let outof_half = fw.tape.concat(&[zero, rest]);
                    let left = fw.tape.matvec(update, into_half);
                    let right = fw.tape.matvec(update, outof_half);
                    (0..classes)
                        .map(|c| {
                            let a = fw.tape.scale_const(left, prior.column_sum(c));
                            let b = fw.tape.scale_const(right, prior.row_sum(c));
                            let pre = fw.tape.add(a, b);
                            fw.tape.tanh(pre)
                        })
                        .collect()
                })
                .collect();
            continue;
        }
        let aggregates = prior_aggregates(fw, params, &states, prior, false);
        states = aggregates
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|a| {
                        let pre = fw.tape.matvec(update, a);
                        fw.tape.tanh(pre)
                    })
                    .collect()
            })
            .collect();
    }

    (0..n)
        .map(|i| {
            let per_class: Vec<NodeId> = (0..classes)
                .map(|c| {
                    let cat = fw.tape.concat(&[nodes.visual[i], states[i][c]]);
                    params.per_class_combiner.apply(fw, cat)
                })
                .collect();
            let all = fw.tape.concat(&per_class);
            params.cross_class_combiner.apply(fw, all)
        })
        .collect()
}

/// Residual message passing:
/// `x̂^r_i = x^r_i + ReLU(transform(LN([Σ_{j≠i} e_ij (W_V x^r_j) ; q̂_i])))`.
pub fn message_passing(
    fw: &mut Forward,
    params: &RelationBranchParams,
    nodes: &RelationNodes,
    edges: &[Vec<Option<NodeId>>],
    context: &[NodeId],
) -> Vec<NodeId> {
    let value = fw.param(params.value_map);
    let values: Vec<NodeId> = nodes
        .visual
        .iter()
        .map(|&v| fw.tape.matvec(value, v))
        .collect();

    nodes
        .visual
        .iter()
        .enumerate()
        .map(|(i, &x_i)| {
            let terms: Vec<NodeId> = edges[i]
                .iter()
                .enumerate()
                .filter_map(|(j, e)| e.map(|eid| fw.tape.scale_by(values[j], eid)))
                .collect();
            let message = if terms.is_empty() {
                fw.tape.zeros(params.relation_dim)
            } else {
                fw.tape.sum(&terms)
            };
            let cat = fw.tape.concat(&[message, context[i]]);
            let normed = params.ln.apply(fw, cat);
            let transformed = params.message_transform.apply(fw, normed);
            let rectified = fw.tape.relu(transformed);
            fw.tape.add(x_i, rectified)
        })
        .collect()
}

/// Unnormalized relation logits per node; normalization happens at fusion.
pub fn relation_branch_logits(
    fw: &mut Forward,
    params: &RelationBranchParams,
    refined: &[NodeId],
) -> Vec<NodeId> {
    refined
        .iter()
        .map(|&x| params.classifier.apply(fw, x))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;
    use rand::SeedableRng;

    const D: usize = 3; // object dim
    const DR: usize = 4; // relation dim
    const DB: usize = 2; // spatial dim
    const DA: usize = 2; // attention dim
    const DQ: usize = 3; // context dim
    const DPC: usize = 2; // per-class dim
    const CR: usize = 3; // predicates

    fn tiny_params(seed: u64) -> (ParamPool, RelationBranchParams) {
        let mut pool = ParamPool::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params =
            RelationBranchParams::new(&mut pool, &mut rng, D, DR, DB, DA, DQ, DPC, CR);
        (pool, params)
    }

    fn set(pool: &mut ParamPool, p: Param, t: Tensor) {
        assert_eq!(pool.value(p).shape(), t.shape());
        *pool.value_mut(p) = t;
    }

    fn random_nodes(
        fw: &mut Forward,
        _params: &RelationBranchParams,
        rng: &mut ChaCha8Rng,
        n: usize,
    ) -> RelationNodes {
        let pairs: Vec<(usize, usize)> = (0..n).map(|k| (k, (k + 1) % (n + 1))).collect();
        let visual = (0..n)
            .map(|_| {
                fw.leaf(Tensor::vector(
                    &(0..DR).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
                ))
            })
            .collect();
        let spatial = (0..n)
            .map(|_| {
                fw.leaf(Tensor::vector(
                    &(0..DB).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
                ))
            })
            .collect();
        RelationNodes {
            pairs,
            visual,
            spatial,
        }
    }

    #[test]
    fn all_pairs_of_three_objects_give_six_nodes() {
        let (pool, params) = tiny_params(1);
        let mut fw = Forward::new(&pool);
        let refined: Vec<NodeId> = (0..3)
            .map(|i| fw.leaf(Tensor::vector(&[i as f64, 0.5, -0.5])))
            .collect();
        let pairs: Vec<(usize, usize)> = (0..3)
            .flat_map(|i| (0..3).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        let us: Vec<Tensor> = (0..pairs.len())
            .map(|k| Tensor::vector(&[k as f64, 1.0, 0.0]))
            .collect();
        let mut fw2 = Forward::new(&pool);
        let refined2: Vec<NodeId> = refined
            .iter()
            .map(|&id| {
                let v = fw.tape.value(id).clone();
                fw2.leaf(v)
            })
            .collect();
        let u_leafs: Vec<NodeId> = us.iter().map(|u| fw2.leaf(u.clone())).collect();
        let s_leafs: Vec<NodeId> = (0..pairs.len())
            .map(|_| fw2.leaf(Tensor::zeros(DB, 1)))
            .collect();
        let pair_index: std::collections::HashMap<(usize, usize), usize> =
            pairs.iter().cloned().zip(0..).collect();
        let nodes = build_relation_nodes(
            &mut fw2,
            &params,
            &refined2,
            &pairs,
            &|i, j| u_leafs[pair_index[&(i, j)]],
            &|i, j| s_leafs[pair_index[&(i, j)]],
        );
        assert_eq!(nodes.len(), 6);
        // concatenation feeds a 3d-input projection
        assert_eq!(params.node_proj.in_dim, 3 * D);
        assert_eq!(fw2.tape.value(nodes.visual[0]).rows(), DR);
    }

    #[test]
    fn zero_features_zero_bias_give_zero_visual() {
        let (mut pool, params) = tiny_params(2);
        // bias already zero-initialized; zero the projection to be safe about inputs only
        let mut fw = Forward::new(&pool);
        let z = fw.leaf(Tensor::zeros(D, 1));
        let zu = fw.leaf(Tensor::zeros(D, 1));
        let zs = fw.leaf(Tensor::zeros(DB, 1));
        let nodes = build_relation_nodes(
            &mut fw,
            &params,
            &[z, z],
            &[(0, 1)],
            &|_, _| zu,
            &|_, _| zs,
        );
        assert_eq!(fw.tape.value(nodes.visual[0]).data(), &[0.0; DR]);
        let _ = &mut pool;
    }

    #[test]
    fn empty_pair_list_is_valid() {
        let (pool, params) = tiny_params(3);
        let mut fw = Forward::new(&pool);
        let x = fw.leaf(Tensor::zeros(D, 1));
        let nodes = build_relation_nodes(&mut fw, &params, &[x], &[], &|_, _| x, &|_, _| x);
        assert!(nodes.is_empty());
        let edges = edge_weights(&mut fw, &params, &nodes);
        assert!(edges.is_empty());
    }

    #[test]
    fn single_live_gate_takes_all_weight() {
        let (mut pool, params) = tiny_params(4);
        // identity geometric map so gates are raw box-feature dot products
        set(&mut pool, params.geo_map, {
            let mut t = Tensor::zeros(DA, DB);
            t.set(0, 0, 1.0);
            t.set(1, 1, 1.0);
            t
        });
        let mut fw = Forward::new(&pool);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut nodes = random_nodes(&mut fw, &params, &mut rng, 3);
        // node 0 aligns with node 1, is orthogonal to node 2
        nodes.spatial[0] = fw.leaf(Tensor::vector(&[1.0, 0.0]));
        nodes.spatial[1] = fw.leaf(Tensor::vector(&[2.0, 0.0]));
        nodes.spatial[2] = fw.leaf(Tensor::vector(&[0.0, 1.0]));
        let edges = edge_weights(&mut fw, &params, &nodes);
        let e01 = edges[0][1].expect("live edge");
        assert!((fw.tape.value(e01).item() - 1.0).abs() < 1e-12);
        assert!(edges[0][2].is_none());
    }

    #[test]
    fn equal_gates_and_affinities_split_evenly() {
        let (pool, params) = tiny_params(5);
        let mut fw = Forward::new(&pool);
        let v = fw.leaf(Tensor::vector(&[0.5, -0.2, 0.8, 0.1]));
        let s = fw.leaf(Tensor::vector(&[0.7, 0.3]));
        let nodes = RelationNodes {
            pairs: vec![(0, 1), (1, 2), (2, 3), (3, 0)],
            visual: vec![v; 4],
            spatial: vec![s; 4],
        };
        let edges = edge_weights(&mut fw, &params, &nodes);
        for j in 1..4 {
            let e = edges[0][j].expect("live edge");
            assert!((fw.tape.value(e).item() - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn edge_weights_match_direct_evaluation() {
        let (pool, params) = tiny_params(6);
        let mut fw = Forward::new(&pool);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let nodes = random_nodes(&mut fw, &params, &mut rng, 4);
        let edges = edge_weights(&mut fw, &params, &nodes);

        let scale = 1.0 / (DA as f64).sqrt();
        let key = pool.value(params.key_map);
        let query = pool.value(params.query_map);
        let geo = pool.value(params.geo_map);
        let xs: Vec<Tensor> = nodes
            .visual
            .iter()
            .map(|&v| fw.tape.value(v).clone())
            .collect();
        let bs: Vec<Tensor> = nodes
            .spatial
            .iter()
            .map(|&v| fw.tape.value(v).clone())
            .collect();
        for i in 0..4 {
            let mut expected = vec![0.0; 4];
            let mut denom = 0.0;
            for j in 0..4 {
                if j == i {
                    continue;
                }
                let wg = Tensor::dot(&geo.matvec(&bs[i]), &geo.matvec(&bs[j])).max(0.0) * scale;
                let wr = Tensor::dot(&key.matvec(&xs[i]), &query.matvec(&xs[j])) * scale;
                expected[j] = wg * wr.exp();
                denom += expected[j];
            }
            for j in 0..4 {
                let got = edges[i][j].map(|e| fw.tape.value(e).item()).unwrap_or(0.0);
                let want = if denom > 0.0 { expected[j] / denom } else { 0.0 };
                assert!((got - want).abs() < 1e-9, "e[{i}][{j}] {got} vs {want}");
            }
        }
    }

    #[test]
    fn edge_rows_are_stochastic_where_live() {
        let (pool, params) = tiny_params(7);
        let mut fw = Forward::new(&pool);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let nodes = random_nodes(&mut fw, &params, &mut rng, 5);
        let edges = edge_weights(&mut fw, &params, &nodes);
        for row in &edges {
            let sum: f64 = row
                .iter()
                .filter_map(|e| e.map(|id| fw.tape.value(id).item()))
                .sum();
            if sum > 0.0 {
                assert!((sum - 1.0).abs() < 1e-6);
            }
            for e in row.iter().flatten() {
                assert!(fw.tape.value(*e).item() >= 0.0);
            }
        }
    }

    #[test]
    fn single_node_prior_hidden_state_is_zero() {
        let (pool, params) = tiny_params(8);
        let mut fw = Forward::new(&pool);
        let v = fw.leaf(Tensor::vector(&[0.4, -0.6, 0.2, 0.9]));
        let s = fw.leaf(Tensor::vector(&[0.1, 0.1]));
        let nodes = RelationNodes {
            pairs: vec![(0, 1)],
            visual: vec![v],
            spatial: vec![s],
        };
        let prior = CooccurrenceMatrix::identity(CR);
        // aggregates are zero, so tanh(W_q * 0) = 0 and the context reduces
        // to the zero-hidden-state combination
        let context = prior_context(&mut fw, &params, &nodes, &prior, 1);
        let zero_hidden = fw.leaf(Tensor::zeros(DR, 1));
        let cat = fw.tape.concat(&[v, zero_hidden]);
        let pc = params.per_class_combiner.apply(&mut fw, cat);
        let all = fw.tape.concat(&vec![pc; CR]);
        let expected = params.cross_class_combiner.apply(&mut fw, all);
        assert_eq!(
            fw.tape.value(context[0]).data(),
            fw.tape.value(expected).data()
        );
    }

    #[test]
    fn identity_prior_two_nodes_aggregates_the_other_node() {
        let (pool, params) = tiny_params(9);
        let mut fw = Forward::new(&pool);
        let v0 = fw.leaf(Tensor::vector(&[1.0, 2.0, 3.0, 4.0]));
        let v1 = fw.leaf(Tensor::vector(&[-1.0, 0.5, 0.0, 2.0]));
        let states = vec![vec![v0; CR], vec![v1; CR]];
        let prior = CooccurrenceMatrix::identity(CR);
        let aggs = prior_aggregates(&mut fw, &params, &states, &prior, true);
        // a_0c = [q_1c ; q_1c] for every class under the identity prior
        let v1_data = fw.tape.value(v1).data().to_vec();
        for c in 0..CR {
            let a = fw.tape.value(aggs[0][c]);
            assert_eq!(a.rows(), 2 * DR);
            for k in 0..DR {
                assert!((a.data()[k] - v1_data[k]).abs() < 1e-12);
                assert!((a.data()[DR + k] - v1_data[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prior_aggregates_match_quadruple_loop_oracle() {
        let (pool, params) = tiny_params(10);
        let mut fw = Forward::new(&pool);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 3;
        let vs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..DR).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let leafs: Vec<NodeId> = vs.iter().map(|v| fw.leaf(Tensor::vector(v))).collect();
        let states: Vec<Vec<NodeId>> = leafs.iter().map(|&l| vec![l; CR]).collect();
        // the hand corpus values, padded into a 3x3 block
        let prior = CooccurrenceMatrix::from_rows(
            CR,
            vec![
                1.0, 2.0 / 3.0, 0.5, //
                1.0, 1.0, 1.0, //
                0.0, 0.5, 1.0,
            ],
        )
        .unwrap();

        let aggs = prior_aggregates(&mut fw, &params, &states, &prior, true);
        let norm = 1.0 / (n as f64 - 1.0);
        for i in 0..n {
            for c in 0..CR {
                let mut left = vec![0.0; DR];
                let mut right = vec![0.0; DR];
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    for c_prime in 0..CR {
                        for k in 0..DR {
                            left[k] += prior.prob(c_prime, c) * vs[j][k];
                            right[k] += prior.prob(c, c_prime) * vs[j][k];
                        }
                    }
                }
                let got = fw.tape.value(aggs[i][c]);
                for k in 0..DR {
                    assert!((got.data()[k] - norm * left[k]).abs() < 1e-9);
                    assert!((got.data()[DR + k] - norm * right[k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn two_step_propagation_matches_brute_force() {
        let (pool, params) = tiny_params(11);
        let mut fw = Forward::new(&pool);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let nodes = random_nodes(&mut fw, &params, &mut rng, 3);
        let prior = CooccurrenceMatrix::from_rows(
            CR,
            vec![
                1.0, 0.25, 0.5, //
                0.75, 1.0, 0.0, //
                0.1, 0.9, 1.0,
            ],
        )
        .unwrap();
        let context = prior_context(&mut fw, &params, &nodes, &prior, 2);

        // value-level two-step replay
        let wq = pool.value(params.prior_update);
        let n = nodes.len();
        let norm = 1.0 / (n as f64 - 1.0);
        let initial: Vec<Vec<f64>> = nodes
            .visual
            .iter()
            .map(|&v| fw.tape.value(v).data().to_vec())
            .collect();
        let mut states: Vec<Vec<Vec<f64>>> =
            initial.iter().map(|v| vec![v.clone(); CR]).collect();
        for _ in 0..2 {
            let mut next = vec![vec![vec![0.0; DR]; CR]; n];
            for i in 0..n {
                for c in 0..CR {
                    let mut a = vec![0.0; 2 * DR];
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        for c_prime in 0..CR {
                            for k in 0..DR {
                                a[k] += prior.prob(c_prime, c) * states[j][c_prime][k];
                                a[DR + k] += prior.prob(c, c_prime) * states[j][c_prime][k];
                            }
                        }
                    }
                    for v in &mut a {
                        *v *= norm;
                    }
                    let pre = wq.matvec(&Tensor::vector(&a));
                    next[i][c] = pre.data().iter().map(|v| v.tanh()).collect();
                }
            }
            states = next;
        }
        for i in 0..n {
            let per_class: Vec<f64> = (0..CR)
                .flat_map(|c| {
                    let mut cat = initial[i].clone();
                    cat.extend_from_slice(&states[i][c]);
                    params
                        .per_class_combiner
                        .apply_value(&pool, &Tensor::vector(&cat))
                        .data()
                        .to_vec()
                })
                .collect();
            let expected = params
                .cross_class_combiner
                .apply_value(&pool, &Tensor::vector(&per_class));
            for (a, b) in fw.tape.value(context[i]).data().iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn prior_matrix_is_live_in_the_context() {
        let (pool, params) = tiny_params(12);
        let mut fw = Forward::new(&pool);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let nodes = random_nodes(&mut fw, &params, &mut rng, 3);
        let identity = CooccurrenceMatrix::identity(CR);
        let other = CooccurrenceMatrix::from_rows(
            CR,
            vec![
                1.0, 0.9, 0.1, //
                0.2, 1.0, 0.8, //
                0.3, 0.4, 1.0,
            ],
        )
        .unwrap();
        let a = prior_context(&mut fw, &params, &nodes, &identity, 1);
        let b = prior_context(&mut fw, &params, &nodes, &other, 1);
        let same = a
            .iter()
            .zip(b.iter())
            .all(|(&x, &y)| fw.tape.value(x).data() == fw.tape.value(y).data());
        assert!(!same, "changing M must change the context");
    }

    #[test]
    fn residual_identity_under_zero_transform() {
        let (mut pool, params) = tiny_params(13);
        let shape = pool.value(params.message_transform.w).shape();
        set(&mut pool, params.message_transform.w, Tensor::zeros(shape.0, shape.1));
        let mut fw = Forward::new(&pool);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let nodes = random_nodes(&mut fw, &params, &mut rng, 3);
        let edges = edge_weights(&mut fw, &params, &nodes);
        let prior = CooccurrenceMatrix::identity(CR);
        let context = prior_context(&mut fw, &params, &nodes, &prior, 1);
        let out = message_passing(&mut fw, &params, &nodes, &edges, &context);
        for (x, xhat) in nodes.visual.iter().zip(out.iter()) {
            assert_eq!(fw.tape.value(*x).data(), fw.tape.value(*xhat).data());
        }
    }

    #[test]
    fn dead_row_and_zero_context_pass_through_at_init() {
        // freshly initialized transform has zero bias; LN of the zero
        // concatenation is the zero bias vector, so the residual is exact
        let (pool, params) = tiny_params(14);
        let mut fw = Forward::new(&pool);
        let v = fw.leaf(Tensor::vector(&[0.3, -0.8, 0.5, 0.0]));
        let nodes = RelationNodes {
            pairs: vec![(0, 1)],
            visual: vec![v],
            spatial: vec![fw.leaf(Tensor::zeros(DB, 1))],
        };
        let edges = vec![vec![None]];
        let context = vec![fw.leaf(Tensor::zeros(DQ, 1))];
        let out = message_passing(&mut fw, &params, &nodes, &edges, &context);
        assert_eq!(fw.tape.value(out[0]).data(), fw.tape.value(v).data());
    }

    #[test]
    fn message_passing_matches_direct_summation() {
        let (pool, params) = tiny_params(16);
        let mut fw = Forward::new(&pool);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let nodes = random_nodes(&mut fw, &params, &mut rng, 3);
        let edges = edge_weights(&mut fw, &params, &nodes);
        let prior = CooccurrenceMatrix::identity(CR);
        let context = prior_context(&mut fw, &params, &nodes, &prior, 1);
        let out = message_passing(&mut fw, &params, &nodes, &edges, &context);

        let wv = pool.value(params.value_map);
        for i in 0..3 {
            let mut msg = vec![0.0; DR];
            for j in 0..3 {
                if let Some(e) = edges[i][j] {
                    let ev = fw.tape.value(e).item();
                    let vj = wv.matvec(fw.tape.value(nodes.visual[j]));
                    for k in 0..DR {
                        msg[k] += ev * vj.data()[k];
                    }
                }
            }
            let mut cat = msg.clone();
            cat.extend_from_slice(fw.tape.value(context[i]).data());
            let t = Tensor::vector(&cat);
            let n = t.rows() as f64;
            let mu = t.data().iter().sum::<f64>() / n;
            let var = t.data().iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let sigma = (var + 1e-5).sqrt();
            let gain = pool.value(params.ln.gain);
            let bias = pool.value(params.ln.bias);
            let normed: Vec<f64> = t
                .data()
                .iter()
                .zip(gain.data().iter())
                .zip(bias.data().iter())
                .map(|((&x, &g), &b)| g * (x - mu) / sigma + b)
                .collect();
            let transformed = params
                .message_transform
                .apply_value(&pool, &Tensor::vector(&normed));
            let expected: Vec<f64> = fw
                .tape
                .value(nodes.visual[i])
                .data()
                .iter()
                .zip(transformed.data().iter())
                .map(|(&x, &t)| x + t.max(0.0))
                .collect();
            for (a, b) in fw.tape.value(out[i]).data().iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn relation_logits_match_matvec_oracle() {
        let (pool, params) = tiny_params(18);
        let mut fw = Forward::new(&pool);
        let x = Tensor::vector(&[0.5, -1.0, 0.25, 0.75]);
        let leaf = fw.leaf(x.clone());
        let logits = relation_branch_logits(&mut fw, &params, &[leaf]);
        let expected = params.classifier.apply_value(&pool, &x);
        assert_eq!(fw.tape.value(logits[0]).data(), expected.data());
        assert!(fw.tape.value(logits[0]).all_finite());
    }
}
