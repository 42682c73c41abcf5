//! Heterogeneous graph-attention learner for binary strategies.
//!
//! The encoder projects robot features `[p, p_goal]` and obstacle features
//! `[center, alpha, L, W]` into a shared width-`d` space and runs a stack of
//! attention layers with separate transform/attention parameters per edge
//! type (robot-robot, robot-obstacle, obstacle-robot, obstacle-obstacle; a
//! node attends to itself through its own type). Per coupling edge, the two
//! endpoint embeddings are concatenated and decoded by a type-specific MLP
//! into `4H` logits, one per big-M bit over the horizon.
//!
//! Everything is `f64` and hand-differentiated; `grad` carries the exact
//! backward pass and is validated against central finite differences.

mod grad;
mod train;

pub use grad::{grad_batch, loss_batch, NetGrads};
pub use train::{
    evaluate_accuracy, load_model, record_graph, save_model, train, write_metrics_csv,
    EpochAccuracy, EpochMetrics, GatError, ModelFile, TrainConfig, TrainOutcome,
};

use crate::micp::BinaryAssignment;
use crate::scene::{ObstacleParams, RobotParams, SceneGraph};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Directed relation types in the heterogeneous graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rel {
    RobotRobot = 0,
    RobotObstacle = 1,
    ObstacleRobot = 2,
    ObstacleObstacle = 3,
}

pub const NUM_RELS: usize = 4;

/// Architecture hyperparameters; `horizon` fixes the decoder output width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Shared embedding width d.
    pub hidden: usize,
    /// Number of attention layers.
    pub gat_layers: usize,
    /// Hidden layers in each decoder MLP.
    pub decoder_layers: usize,
    pub decoder_width: usize,
    pub horizon: usize,
    /// Opt-in: append the robot's velocity to its feature vector.
    pub append_velocity: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            gat_layers: 2,
            decoder_layers: 4,
            decoder_width: 256,
            horizon: 20,
            append_velocity: false,
        }
    }
}

impl NetConfig {
    pub fn robot_feature_dim(&self) -> usize {
        if self.append_velocity {
            6
        } else {
            4
        }
    }

    pub fn obstacle_feature_dim(&self) -> usize {
        5
    }

    pub fn logits_per_edge(&self) -> usize {
        4 * self.horizon
    }
}

/// Per-layer attention parameters, indexed by [`Rel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatLayerParams {
    pub w: Vec<DMatrix<f64>>,
    pub a: Vec<DVector<f64>>,
}

/// A plain MLP with rectifier hidden activations and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Mlp {
    fn glorot(rng: &mut ChaCha8Rng, dims: &[usize]) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for win in dims.windows(2) {
            weights.push(glorot_matrix(rng, win[1], win[0]));
            biases.push(DVector::zeros(win[1]));
        }
        Self { weights, biases }
    }

    /// Forward pass returning all layer pre-activations and activations.
    pub fn forward_cached(&self, input: &DVector<f64>) -> (Vec<DVector<f64>>, DVector<f64>) {
        let mut activations = vec![input.clone()];
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * activations.last().unwrap() + b;
            if l < last {
                z.apply(|v| *v = v.max(0.0));
            }
            activations.push(z);
        }
        let out = activations.last().unwrap().clone();
        (activations, out)
    }

    pub fn forward(&self, input: &DVector<f64>) -> DVector<f64> {
        self.forward_cached(input).1
    }
}

/// All learnable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub config: NetConfig,
    /// Projection of robot features into the shared space.
    pub proj_robot: DMatrix<f64>,
    pub proj_obstacle: DMatrix<f64>,
    pub layers: Vec<GatLayerParams>,
    pub decoder_rr: Mlp,
    pub decoder_ro: Mlp,
}

fn glorot_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit))
}

impl NetParams {
    /// Seeded Glorot initialization.
    pub fn init(config: &NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let proj_robot = glorot_matrix(&mut rng, d, config.robot_feature_dim());
        let proj_obstacle = glorot_matrix(&mut rng, d, config.obstacle_feature_dim());
        let layers = (0..config.gat_layers)
            .map(|_| GatLayerParams {
                w: (0..NUM_RELS).map(|_| glorot_matrix(&mut rng, d, d)).collect(),
                a: (0..NUM_RELS)
                    .map(|_| {
                        let limit = (6.0 / (2 * d) as f64).sqrt();
                        DVector::from_fn(2 * d, |_, _| rng.gen_range(-limit..limit))
                    })
                    .collect(),
            })
            .collect();
        let mut decoder_dims = vec![2 * d];
        decoder_dims.extend(std::iter::repeat(config.decoder_width).take(config.decoder_layers));
        decoder_dims.push(config.logits_per_edge());
        let decoder_rr = Mlp::glorot(&mut rng, &decoder_dims);
        let decoder_ro = Mlp::glorot(&mut rng, &decoder_dims);
        Self {
            config: config.clone(),
            proj_robot,
            proj_obstacle,
            layers,
            decoder_rr,
            decoder_ro,
        }
    }
}

/// Raw node features of one scene, robots first.
#[derive(Debug, Clone)]
pub struct SceneFeatures {
    pub robot: Vec<DVector<f64>>,
    pub obstacle: Vec<DVector<f64>>,
}

impl SceneFeatures {
    pub fn new(robots: &[RobotParams], obstacles: &[ObstacleParams], config: &NetConfig) -> Self {
        let robot = robots
            .iter()
            .map(|r| {
                let mut f = vec![r.p[0], r.p[1], r.goal[0], r.goal[1]];
                if config.append_velocity {
                    f.extend_from_slice(&r.v);
                }
                DVector::from_vec(f)
            })
            .collect();
        let obstacle = obstacles
            .iter()
            .map(|o| {
                DVector::from_vec(vec![
                    o.center[0],
                    o.center[1],
                    o.alpha,
                    o.half_length,
                    o.half_width,
                ])
            })
            .collect();
        Self { robot, obstacle }
    }
}

/// Projects one node's features into the shared space: `mu = Phi * theta`.
pub fn project(features: &DVector<f64>, is_robot: bool, params: &NetParams) -> DVector<f64> {
    let phi = if is_robot {
        &params.proj_robot
    } else {
        &params.proj_obstacle
    };
    assert_eq!(
        phi.ncols(),
        features.len(),
        "feature dimension mismatch for {} node",
        if is_robot { "robot" } else { "obstacle" }
    );
    phi * features
}

pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

pub(crate) fn elu_deriv(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

const LEAKY_SLOPE: f64 = 0.2;

pub(crate) fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub(crate) fn leaky_relu_deriv(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Incoming message lists per node: `(source, relation)`, self included.
pub(crate) fn incoming_edges(graph: &SceneGraph) -> Vec<Vec<(usize, Rel)>> {
    let nr = graph.num_robots;
    let n = graph.num_nodes();
    let mut inc: Vec<Vec<(usize, Rel)>> = vec![Vec::new(); n];
    for (node, list) in inc.iter_mut().enumerate() {
        let rel = if node < nr {
            Rel::RobotRobot
        } else {
            Rel::ObstacleObstacle
        };
        list.push((node, rel));
    }
    for &(i, j) in &graph.edges_rr {
        inc[j].push((i, Rel::RobotRobot));
        inc[i].push((j, Rel::RobotRobot));
    }
    for &(r, o) in &graph.edges_ro {
        inc[nr + o].push((r, Rel::RobotObstacle));
    }
    for &(o, r) in &graph.edges_or {
        inc[r].push((nr + o, Rel::ObstacleRobot));
    }
    for &(a, b) in &graph.edges_oo {
        inc[nr + b].push((nr + a, Rel::ObstacleObstacle));
    }
    for list in &mut inc {
        list.sort_by_key(|&(m, rel)| (m, rel as usize));
    }
    inc
}

/// Cached forward state of one attention layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    /// Input embeddings.
    pub h: Vec<DVector<f64>>,
    /// Per node: incoming entries `(source, rel, g_src, g_tgt, raw, alpha)`.
    pub entries: Vec<Vec<EdgeCache>>,
    /// Pre-activation aggregate per node.
    pub pre: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct EdgeCache {
    pub source: usize,
    pub rel: Rel,
    pub g_src: DVector<f64>,
    pub g_tgt: DVector<f64>,
    pub raw_score: f64,
    pub alpha: f64,
}

/// One attention layer: per-type transforms and scores, softmax over the
/// neighborhood including the node itself, ELU output.
pub fn gat_layer_forward(
    embeddings: &[DVector<f64>],
    graph: &SceneGraph,
    layer: &GatLayerParams,
) -> Vec<DVector<f64>> {
    gat_layer_forward_cached(embeddings, &incoming_edges(graph), layer).1
}

pub(crate) fn gat_layer_forward_cached(
    embeddings: &[DVector<f64>],
    incoming: &[Vec<(usize, Rel)>],
    layer: &GatLayerParams,
) -> (LayerCache, Vec<DVector<f64>>) {
    let d = embeddings.first().map(|e| e.len()).unwrap_or(0);
    let n = embeddings.len();
    let mut entries: Vec<Vec<EdgeCache>> = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n);

    for node in 0..n {
        let list = &incoming[node];
        let mut cache: Vec<EdgeCache> = Vec::with_capacity(list.len());
        for &(src, rel) in list {
            let w = &layer.w[rel as usize];
            let a = &layer.a[rel as usize];
            let g_src = w * &embeddings[src];
            let g_tgt = w * &embeddings[node];
            let mut score = 0.0;
            for i in 0..d {
                score += a[i] * g_src[i] + a[d + i] * g_tgt[i];
            }
            cache.push(EdgeCache {
                source: src,
                rel,
                g_src,
                g_tgt,
                raw_score: score,
                alpha: 0.0,
            });
        }
        // Softmax over the neighborhood (numerically shifted).
        let max_s = cache
            .iter()
            .map(|e| leaky_relu(e.raw_score))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for e in &mut cache {
            e.alpha = (leaky_relu(e.raw_score) - max_s).exp();
            total += e.alpha;
        }
        let mut agg = DVector::zeros(d);
        for e in &mut cache {
            e.alpha /= total;
            agg += &e.g_src * e.alpha;
        }
        let mut activated = agg.clone();
        activated.apply(|v| *v = elu(*v));
        entries.push(cache);
        pre.push(agg);
        out.push(activated);
    }
    (
        LayerCache { h: embeddings.to_vec(), entries, pre },
        out,
    )
}

/// Full encoder cache: every layer's state plus the final embeddings.
#[derive(Debug, Clone)]
pub(crate) struct EncodeCache {
    pub layers: Vec<LayerCache>,
    pub embeddings: Vec<DVector<f64>>,
}

/// Projection followed by the attention stack; returns one embedding per
/// node, robots first.
pub fn encode(
    features: &SceneFeatures,
    graph: &SceneGraph,
    params: &NetParams,
) -> Vec<DVector<f64>> {
    encode_cached(features, graph, params).embeddings
}

pub(crate) fn encode_cached(
    features: &SceneFeatures,
    graph: &SceneGraph,
    params: &NetParams,
) -> EncodeCache {
    let mut h: Vec<DVector<f64>> = features
        .robot
        .iter()
        .map(|f| project(f, true, params))
        .chain(features.obstacle.iter().map(|f| project(f, false, params)))
        .collect();
    let incoming = incoming_edges(graph);
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (cache, out) = gat_layer_forward_cached(&h, &incoming, layer);
        layers.push(cache);
        h = out;
    }
    EncodeCache { layers, embeddings: h }
}

/// Decodes one edge's logits from the two endpoint embeddings.
pub fn decode_edge(
    first: &DVector<f64>,
    second: &DVector<f64>,
    is_rr: bool,
    params: &NetParams,
) -> DVector<f64> {
    let d = params.config.hidden;
    assert_eq!(first.len(), d, "embedding width mismatch");
    assert_eq!(second.len(), d, "embedding width mismatch");
    let mut input = DVector::zeros(2 * d);
    input.rows_mut(0, d).copy_from(first);
    input.rows_mut(d, d).copy_from(second);
    let mlp = if is_rr {
        &params.decoder_rr
    } else {
        &params.decoder_ro
    };
    mlp.forward(&input)
}

/// Logits for every coupling edge of a scene, RR edges first then RO, in
/// graph order (the same layout as `MicpInstance::edges`).
pub fn forward_scene(
    robots: &[RobotParams],
    obstacles: &[ObstacleParams],
    graph: &SceneGraph,
    params: &NetParams,
) -> Vec<DVector<f64>> {
    let features = SceneFeatures::new(robots, obstacles, &params.config);
    let emb = encode(&features, graph, params);
    let nr = graph.num_robots;
    let mut out = Vec::with_capacity(graph.edges_rr.len() + graph.edges_ro.len());
    for &(i, j) in &graph.edges_rr {
        out.push(decode_edge(&emb[i], &emb[j], true, params));
    }
    for &(r, o) in &graph.edges_ro {
        out.push(decode_edge(&emb[r], &emb[nr + o], false, params));
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Thresholded predictions with the cardinality repair: when all four bits of
/// an (edge, step) come out 1, the lowest-logit bit is cleared.
pub fn predict_binaries(
    robots: &[RobotParams],
    obstacles: &[ObstacleParams],
    graph: &SceneGraph,
    params: &NetParams,
    threshold: f64,
) -> BinaryAssignment {
    let logits = forward_scene(robots, obstacles, graph, params);
    let h = params.config.horizon;
    let mut edges = Vec::new();
    for &(i, j) in &graph.edges_rr {
        edges.push(crate::micp::EdgeKey::Rr { i, j });
    }
    for &(r, o) in &graph.edges_ro {
        edges.push(crate::micp::EdgeKey::Ro { robot: r, obstacle: o });
    }
    let mut assignment = BinaryAssignment::zeros(edges, h);
    for (e, edge_logits) in logits.iter().enumerate() {
        for k in 1..=h {
            let base = (k - 1) * 4;
            let mut bits = [0u8; 4];
            for m in 0..4 {
                bits[m] = u8::from(sigmoid(edge_logits[base + m]) > threshold);
            }
            if bits.iter().all(|&b| b == 1) {
                let lowest = (0..4)
                    .min_by(|&a, &b| {
                        edge_logits[base + a]
                            .partial_cmp(&edge_logits[base + b])
                            .unwrap()
                    })
                    .unwrap();
                bits[lowest] = 0;
            }
            for m in 0..4 {
                assignment.set(e, k, m, bits[m]);
            }
        }
    }
    assignment
}

/// Mean binary cross-entropy over every bit in the batch, from raw logits.
pub fn bce_loss(logits: &[DVector<f64>], targets: &[Vec<u8>]) -> f64 {
    assert_eq!(logits.len(), targets.len(), "batch shape mismatch");
    let mut total = 0.0;
    let mut count = 0usize;
    for (z, t) in logits.iter().zip(targets) {
        assert_eq!(z.len(), t.len(), "edge logit/target shape mismatch");
        for (zi, &ti) in z.iter().zip(t) {
            total += bce_one(*zi, f64::from(ti));
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Numerically stable `BCE(sigmoid(z), t)`.
pub(crate) fn bce_one(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{build_graph, Workspace};
    use approx::assert_abs_diff_eq;

    fn tiny_config(h: usize) -> NetConfig {
        NetConfig {
            hidden: 8,
            gat_layers: 2,
            decoder_layers: 2,
            decoder_width: 16,
            horizon: h,
            append_velocity: false,
        }
    }

    fn four_node_scene() -> (Vec<RobotParams>, Vec<ObstacleParams>, SceneGraph) {
        let robots = vec![
            RobotParams::at_rest([-0.5, 0.0], [0.5, 0.0]),
            RobotParams::at_rest([0.5, 0.1], [-0.5, 0.1]),
        ];
        let obstacles = vec![
            ObstacleParams { center: [0.0, 0.8], alpha: 0.3, half_length: 0.3, half_width: 0.2 },
            ObstacleParams { center: [0.0, -0.8], alpha: -0.2, half_length: 0.25, half_width: 0.25 },
        ];
        let graph = build_graph(&robots, &obstacles, &Workspace::default());
        (robots, obstacles, graph)
    }

    #[test]
    fn projection_is_matrix_vector_product() {
        let config = tiny_config(2);
        let params = NetParams::init(&config, 7);
        let theta = DVector::from_row_slice(&[0.3, -0.7, 1.1, 0.2]);
        let mu = project(&theta, true, &params);
        // Independent recomputation.
        for r in 0..config.hidden {
            let mut acc = 0.0;
            for c in 0..4 {
                acc += params.proj_robot[(r, c)] * theta[c];
            }
            assert_abs_diff_eq!(mu[r], acc, epsilon = 1e-14);
        }
        // Zero features map to zero.
        let zero = project(&DVector::zeros(4), true, &params);
        assert_abs_diff_eq!(zero.amax(), 0.0);
        // A single unit entry copies one column.
        let mut params2 = params.clone();
        params2.proj_robot.fill(0.0);
        params2.proj_robot[(3, 1)] = 1.0;
        let picked = project(&theta, true, &params2);
        assert_abs_diff_eq!(picked[3], theta[1]);
        assert_abs_diff_eq!(picked.sum(), theta[1]);
    }

    #[test]
    fn identical_features_attend_equally() {
        let robots = vec![
            RobotParams::at_rest([0.2, 0.2], [1.0, 1.0]),
            RobotParams::at_rest([0.2, 0.2], [1.0, 1.0]),
        ];
        let graph = build_graph(&robots, &[], &Workspace::default());
        let config = tiny_config(1);
        let params = NetParams::init(&config, 3);
        let features = SceneFeatures::new(&robots, &[], &config);
        let h: Vec<DVector<f64>> = features
            .robot
            .iter()
            .map(|f| project(f, true, &params))
            .collect();
        let (cache, _) = gat_layer_forward_cached(&h, &incoming_edges(&graph), &params.layers[0]);
        for node in 0..2 {
            assert_eq!(cache.entries[node].len(), 2);
            for e in &cache.entries[node] {
                assert_abs_diff_eq!(e.alpha, 0.5, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn isolated_node_uses_self_only() {
        let robots = vec![RobotParams::at_rest([0.1, -0.3], [1.0, 1.0])];
        let graph = build_graph(&robots, &[], &Workspace::default());
        let config = tiny_config(1);
        let params = NetParams::init(&config, 5);
        let features = SceneFeatures::new(&robots, &[], &config);
        let h = project(&features.robot[0], true, &params);
        let out = gat_layer_forward(&[h.clone()], &graph, &params.layers[0]);
        let mut expected = &params.layers[0].w[Rel::RobotRobot as usize] * &h;
        expected.apply(|v| *v = elu(*v));
        assert!((out[0].clone() - expected).amax() < 1e-12);
    }

    #[test]
    fn hand_computed_line_graph_forward() {
        // 3 robots in a line with hand-picked small integer weights, d = 1.
        // All nodes share W = [2], a = [1, 1]. Features: 1, 2, 3.
        let config = NetConfig {
            hidden: 1,
            gat_layers: 1,
            decoder_layers: 1,
            decoder_width: 2,
            horizon: 1,
            append_velocity: false,
        };
        let mut params = NetParams::init(&config, 0);
        for rel in 0..NUM_RELS {
            params.layers[0].w[rel] = DMatrix::from_element(1, 1, 2.0);
            params.layers[0].a[rel] = DVector::from_row_slice(&[1.0, 1.0]);
        }
        // Line graph: 0-1, 1-2 (node 2 not adjacent to 0).
        let graph = SceneGraph {
            num_robots: 3,
            num_obstacles: 0,
            edges_rr: vec![(0, 1), (1, 2)],
            edges_ro: vec![],
            edges_or: vec![],
            edges_oo: vec![],
            adjacency: vec![vec![0, 1, 0], vec![1, 0, 1], vec![0, 1, 1]],
        };
        let h = vec![
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 2.0),
            DVector::from_element(1, 3.0),
        ];
        let out = gat_layer_forward(&h, &graph, &params.layers[0]);
        // Node 0: sources {0, 1}: g = 2, 4; scores = g_src + g_tgt = 4, 6.
        // alpha = softmax([4, 6]); output = elu(2*a0 + 4*a1).
        let e0 = (4.0f64).exp();
        let e1 = (6.0f64).exp();
        let expected0 = elu((2.0 * e0 + 4.0 * e1) / (e0 + e1));
        assert_abs_diff_eq!(out[0][0], expected0, epsilon = 1e-12);
        // Node 1: sources {0, 1, 2}: g = 2, 4, 6; g_tgt = 4.
        let s: Vec<f64> = [2.0, 4.0, 6.0].iter().map(|g| g + 4.0).collect();
        let exps: Vec<f64> = s.iter().map(|v| v.exp()).collect();
        let total: f64 = exps.iter().sum();
        let expected1 = elu((2.0 * exps[0] + 4.0 * exps[1] + 6.0 * exps[2]) / total);
        assert_abs_diff_eq!(out[1][0], expected1, epsilon = 1e-12);
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let (robots, obstacles, graph) = four_node_scene();
        let config = tiny_config(2);
        let params = NetParams::init(&config, 11);
        let features = SceneFeatures::new(&robots, &obstacles, &config);
        let cache = encode_cached(&features, &graph, &params);
        for layer in &cache.layers {
            for entries in &layer.entries {
                let total: f64 = entries.iter().map(|e| e.alpha).sum();
                assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
                for e in entries {
                    assert!(e.alpha > 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_layers_returns_projection() {
        let (robots, obstacles, graph) = four_node_scene();
        let mut config = tiny_config(2);
        config.gat_layers = 0;
        let params = NetParams::init(&config, 2);
        let features = SceneFeatures::new(&robots, &obstacles, &config);
        let emb = encode(&features, &graph, &params);
        for (i, f) in features.robot.iter().enumerate() {
            assert!((emb[i].clone() - project(f, true, &params)).amax() < 1e-14);
        }
    }

    #[test]
    fn encode_is_permutation_equivariant() {
        let (robots, obstacles, graph) = four_node_scene();
        let config = tiny_config(2);
        let params = NetParams::init(&config, 13);
        let features = SceneFeatures::new(&robots, &obstacles, &config);
        let emb = encode(&features, &graph, &params);

        // Swap the two robots (and rewrite edge indices accordingly).
        let robots_swapped: Vec<_> = robots.iter().rev().cloned().collect();
        let graph_swapped =
            build_graph(&robots_swapped, &obstacles, &Workspace::default());
        let features_swapped = SceneFeatures::new(&robots_swapped, &obstacles, &config);
        let emb_swapped = encode(&features_swapped, &graph_swapped, &params);
        assert!((emb[0].clone() - emb_swapped[1].clone()).amax() < 1e-10);
        assert!((emb[1].clone() - emb_swapped[0].clone()).amax() < 1e-10);
        assert!((emb[2].clone() - emb_swapped[2].clone()).amax() < 1e-10);
    }

    #[test]
    fn decoder_matches_external_mlp() {
        let config = tiny_config(3);
        let params = NetParams::init(&config, 21);
        let d = config.hidden;
        let mu1 = DVector::from_fn(d, |i, _| (i as f64 * 0.37).sin());
        let mu2 = DVector::from_fn(d, |i, _| (i as f64 * 0.73).cos());
        let out = decode_edge(&mu1, &mu2, true, &params);
        assert_eq!(out.len(), 12);
        // External recomputation with explicit loops.
        let mut x: Vec<f64> = mu1.iter().chain(mu2.iter()).copied().collect();
        let mlp = &params.decoder_rr;
        for (l, (w, b)) in mlp.weights.iter().zip(&mlp.biases).enumerate() {
            let mut next = vec![0.0; w.nrows()];
            for r in 0..w.nrows() {
                let mut acc = b[r];
                for c in 0..w.ncols() {
                    acc += w[(r, c)] * x[c];
                }
                next[r] = if l + 1 < mlp.weights.len() { acc.max(0.0) } else { acc };
            }
            x = next;
        }
        for i in 0..out.len() {
            assert_abs_diff_eq!(out[i], x[i], epsilon = 1e-12);
        }
        // Zero weights produce zero logits.
        let mut zeroed = params.clone();
        for w in &mut zeroed.decoder_rr.weights {
            w.fill(0.0);
        }
        for b in &mut zeroed.decoder_rr.biases {
            b.fill(0.0);
        }
        let z = decode_edge(&mu1, &mu2, true, &zeroed);
        assert_abs_diff_eq!(z.amax(), 0.0);
    }

    #[test]
    fn prediction_thresholding_and_repair() {
        let logits = DVector::from_row_slice(&[10.0, -10.0, -10.0, -10.0]);
        let bits: Vec<u8> = logits.iter().map(|&z| u8::from(sigmoid(z) > 0.5)).collect();
        assert_eq!(bits, vec![1, 0, 0, 0]);

        // Repair rule on sigmoids (0.9, 0.8, 0.7, 0.6): all pass 0.5, the
        // lowest (0.6) is cleared.
        let z = |p: f64| (p / (1.0 - p)).ln();
        let (robots, obstacles, graph) = four_node_scene();
        let config = tiny_config(1);
        let mut params = NetParams::init(&config, 1);
        // Zero decoders, then set RR biases so logits are the target values.
        for w in &mut params.decoder_rr.weights {
            w.fill(0.0);
        }
        for b in &mut params.decoder_rr.biases {
            b.fill(0.0);
        }
        let last = params.decoder_rr.biases.len() - 1;
        params.decoder_rr.biases[last] =
            DVector::from_row_slice(&[z(0.9), z(0.8), z(0.7), z(0.6)]);
        let assignment = predict_binaries(&robots, &obstacles, &graph, &params, 0.5);
        assert_eq!(
            [
                assignment.get(0, 1, 0),
                assignment.get(0, 1, 1),
                assignment.get(0, 1, 2),
                assignment.get(0, 1, 3)
            ],
            [1, 1, 1, 0]
        );
        assert!(assignment.validate().is_ok());
    }

    #[test]
    fn loss_reference_values() {
        // Confident correct predictions: loss below 1e-4 at logit 10.
        let logits = vec![DVector::from_row_slice(&[10.0, -10.0])];
        let targets = vec![vec![1u8, 0u8]];
        assert!(bce_loss(&logits, &targets) <= 1e-4);
        // Uniform predictions: ln 2 per bit.
        let logits = vec![DVector::from_row_slice(&[0.0, 0.0, 0.0])];
        let targets = vec![vec![1, 0, 1]];
        assert_abs_diff_eq!(bce_loss(&logits, &targets), (2.0f64).ln(), epsilon = 1e-12);
        // Independent recomputation on random values.
        let logits = vec![DVector::from_row_slice(&[0.3, -1.2, 2.0, 0.7])];
        let targets = vec![vec![0, 1, 1, 0]];
        let mut expected = 0.0;
        for (z, t) in logits[0].iter().zip(&targets[0]) {
            let p = sigmoid(*z);
            expected += -(f64::from(*t) * p.ln() + (1.0 - f64::from(*t)) * (1.0 - p).ln());
        }
        expected /= 4.0;
        assert_abs_diff_eq!(bce_loss(&logits, &targets), expected, epsilon = 1e-10);
    }
}
