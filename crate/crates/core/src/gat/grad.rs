//! Exact gradients of the cross-entropy loss through the decoder MLPs, the
//! attention layers (including the softmax), and the projections.

use super::{
    bce_one, elu_deriv, encode_cached, leaky_relu_deriv, sigmoid, EncodeCache, GatLayerParams,
    LayerCache, Mlp, NetParams, SceneFeatures,
};
use crate::scene::{ObstacleParams, RobotParams, SceneGraph};
use nalgebra::{DMatrix, DVector};

/// One labeled scene: the unit of batching for training and gradients.
#[derive(Debug, Clone)]
pub struct Sample {
    pub robots: Vec<RobotParams>,
    pub obstacles: Vec<ObstacleParams>,
    pub graph: SceneGraph,
    /// Target bits per edge (RR edges first, then RO), each 4H long.
    pub targets: Vec<Vec<u8>>,
}

/// Gradient container with the same tensor shapes as [`NetParams`].
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub proj_robot: DMatrix<f64>,
    pub proj_obstacle: DMatrix<f64>,
    pub layers: Vec<GatLayerParams>,
    pub decoder_rr: Mlp,
    pub decoder_ro: Mlp,
}

fn zero_mlp(mlp: &Mlp) -> Mlp {
    Mlp {
        weights: mlp.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
        biases: mlp.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
    }
}

impl NetGrads {
    pub fn zeros_like(params: &NetParams) -> Self {
        Self {
            proj_robot: DMatrix::zeros(params.proj_robot.nrows(), params.proj_robot.ncols()),
            proj_obstacle: DMatrix::zeros(
                params.proj_obstacle.nrows(),
                params.proj_obstacle.ncols(),
            ),
            layers: params
                .layers
                .iter()
                .map(|l| GatLayerParams {
                    w: l.w.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
                    a: l.a.iter().map(|a| DVector::zeros(a.len())).collect(),
                })
                .collect(),
            decoder_rr: zero_mlp(&params.decoder_rr),
            decoder_ro: zero_mlp(&params.decoder_ro),
        }
    }

    pub fn add(&mut self, other: &NetGrads) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for x in t {
                *x *= factor;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.proj_robot.as_slice(), self.proj_obstacle.as_slice()];
        for layer in &self.layers {
            for w in &layer.w {
                out.push(w.as_slice());
            }
            for a in &layer.a {
                out.push(a.as_slice());
            }
        }
        for mlp in [&self.decoder_rr, &self.decoder_ro] {
            for w in &mlp.weights {
                out.push(w.as_slice());
            }
            for b in &mlp.biases {
                out.push(b.as_slice());
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.proj_robot.as_mut_slice(),
            self.proj_obstacle.as_mut_slice(),
        ];
        for layer in &mut self.layers {
            for w in &mut layer.w {
                out.push(w.as_mut_slice());
            }
            for a in &mut layer.a {
                out.push(a.as_mut_slice());
            }
        }
        for mlp in [&mut self.decoder_rr, &mut self.decoder_ro] {
            for w in &mut mlp.weights {
                out.push(w.as_mut_slice());
            }
            for b in &mut mlp.biases {
                out.push(b.as_mut_slice());
            }
        }
        out
    }
}

impl NetParams {
    /// Named flat views over every parameter tensor, used by the optimizer
    /// and the finite-difference checks.
    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<(&'static str, &mut [f64])> = vec![
            ("proj_robot", self.proj_robot.as_mut_slice()),
            ("proj_obstacle", self.proj_obstacle.as_mut_slice()),
        ];
        for layer in &mut self.layers {
            for w in &mut layer.w {
                out.push(("gat_w", w.as_mut_slice()));
            }
            for a in &mut layer.a {
                out.push(("gat_a", a.as_mut_slice()));
            }
        }
        for (name, mlp) in [("dec_rr", &mut self.decoder_rr), ("dec_ro", &mut self.decoder_ro)] {
            for w in &mut mlp.weights {
                out.push((name, w.as_mut_slice()));
            }
            for b in &mut mlp.biases {
                out.push((name, b.as_mut_slice()));
            }
        }
        out
    }
}

/// MLP backward from the output gradient; returns the input gradient.
fn mlp_backward(
    mlp: &Mlp,
    grads: &mut Mlp,
    activations: &[DVector<f64>],
    mut d_out: DVector<f64>,
) -> DVector<f64> {
    let last = mlp.weights.len() - 1;
    for l in (0..mlp.weights.len()).rev() {
        if l < last {
            // Hidden activations are rectified; the stored value is post-ReLU.
            for (dz, post) in d_out.iter_mut().zip(activations[l + 1].iter()) {
                if *post <= 0.0 {
                    *dz = 0.0;
                }
            }
        }
        grads.weights[l] += &d_out * activations[l].transpose();
        grads.biases[l] += &d_out;
        d_out = mlp.weights[l].transpose() * d_out;
    }
    d_out
}

/// One attention layer backward; returns gradients w.r.t. the layer inputs.
fn layer_backward(
    layer: &GatLayerParams,
    grads: &mut GatLayerParams,
    cache: &LayerCache,
    d_out: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let n = cache.h.len();
    let d = cache.h.first().map(|v| v.len()).unwrap_or(0);
    let mut d_h: Vec<DVector<f64>> = vec![DVector::zeros(d); n];

    for node in 0..n {
        let entries = &cache.entries[node];
        if entries.is_empty() {
            continue;
        }
        let mut ds = d_out[node].clone();
        for (v, pre) in ds.iter_mut().zip(cache.pre[node].iter()) {
            *v *= elu_deriv(*pre);
        }

        // Softmax backward over the neighborhood.
        let d_alpha: Vec<f64> = entries.iter().map(|e| ds.dot(&e.g_src)).collect();
        let mix: f64 = entries
            .iter()
            .zip(&d_alpha)
            .map(|(e, da)| e.alpha * da)
            .sum();

        for (e, da) in entries.iter().zip(&d_alpha) {
            let rel = e.rel as usize;
            let de = e.alpha * (da - mix);
            let draw = de * leaky_relu_deriv(e.raw_score);
            let a = &layer.a[rel];

            // Score terms.
            for i in 0..d {
                grads.a[rel][i] += draw * e.g_src[i];
                grads.a[rel][d + i] += draw * e.g_tgt[i];
            }
            let mut dg_src = &ds * e.alpha;
            for i in 0..d {
                dg_src[i] += draw * a[i];
            }
            let dg_tgt = DVector::from_fn(d, |i, _| draw * a[d + i]);

            grads.w[rel] += &dg_src * cache.h[e.source].transpose();
            grads.w[rel] += &dg_tgt * cache.h[node].transpose();
            d_h[e.source] += layer.w[rel].transpose() * dg_src;
            d_h[node] += layer.w[rel].transpose() * dg_tgt;
        }
    }
    d_h
}

/// Forward + backward for one sample. Returns the summed bit loss, the bit
/// count, and accumulates gradients of the *sum* into `grads`.
fn backward_sample(params: &NetParams, sample: &Sample, grads: &mut NetGrads) -> (f64, usize) {
    let features = SceneFeatures::new(&sample.robots, &sample.obstacles, &params.config);
    let cache: EncodeCache = encode_cached(&features, &sample.graph, params);
    let emb = &cache.embeddings;
    let nr = sample.graph.num_robots;
    let d = params.config.hidden;

    let mut edges: Vec<(usize, usize, bool)> = Vec::new();
    for &(i, j) in &sample.graph.edges_rr {
        edges.push((i, j, true));
    }
    for &(r, o) in &sample.graph.edges_ro {
        edges.push((r, nr + o, false));
    }
    assert_eq!(edges.len(), sample.targets.len(), "target/edge count mismatch");

    let mut loss_sum = 0.0;
    let mut bits = 0usize;
    let mut d_emb: Vec<DVector<f64>> = vec![DVector::zeros(d); emb.len()];

    for ((na, nb, is_rr), target) in edges.iter().zip(&sample.targets) {
        let mut input = DVector::zeros(2 * d);
        input.rows_mut(0, d).copy_from(&emb[*na]);
        input.rows_mut(d, d).copy_from(&emb[*nb]);
        let (mlp, mlp_grads) = if *is_rr {
            (&params.decoder_rr, &mut grads.decoder_rr)
        } else {
            (&params.decoder_ro, &mut grads.decoder_ro)
        };
        let (activations, logits) = mlp.forward_cached(&input);
        assert_eq!(logits.len(), target.len(), "logit/target shape mismatch");

        let mut d_logits = DVector::zeros(logits.len());
        for (i, (&z, &t)) in logits.iter().zip(target.iter()).enumerate() {
            loss_sum += bce_one(z, f64::from(t));
            d_logits[i] = sigmoid(z) - f64::from(t);
            bits += 1;
        }
        let d_input = mlp_backward(mlp, mlp_grads, &activations, d_logits);
        d_emb[*na] += d_input.rows(0, d);
        d_emb[*nb] += d_input.rows(d, d);
    }

    // Through the attention stack.
    let mut d_h = d_emb;
    for l in (0..params.layers.len()).rev() {
        d_h = layer_backward(&params.layers[l], &mut grads.layers[l], &cache.layers[l], &d_h);
    }

    // Projections.
    for (i, f) in features.robot.iter().enumerate() {
        grads.proj_robot += &d_h[i] * f.transpose();
    }
    for (o, f) in features.obstacle.iter().enumerate() {
        grads.proj_obstacle += &d_h[nr + o] * f.transpose();
    }
    (loss_sum, bits)
}

/// Mean cross-entropy over the batch and its exact gradient.
pub fn grad_batch(params: &NetParams, batch: &[Sample]) -> (f64, NetGrads) {
    let (loss_sum, bits, mut grads) = grad_batch_sums(params, batch);
    if bits > 0 {
        grads.scale(1.0 / bits as f64);
        (loss_sum / bits as f64, grads)
    } else {
        (0.0, grads)
    }
}

/// Unnormalized variant: summed loss, bit count, gradient of the sum.
pub fn grad_batch_sums(params: &NetParams, batch: &[Sample]) -> (f64, usize, NetGrads) {
    let mut grads = NetGrads::zeros_like(params);
    let mut loss_sum = 0.0;
    let mut bits = 0usize;
    for sample in batch {
        let (l, b) = backward_sample(params, sample, &mut grads);
        loss_sum += l;
        bits += b;
    }
    (loss_sum, bits, grads)
}

/// Loss only (used by the finite-difference oracle in tests).
pub fn loss_batch(params: &NetParams, batch: &[Sample]) -> f64 {
    let mut loss_sum = 0.0;
    let mut bits = 0usize;
    for sample in batch {
        let logits = super::forward_scene(&sample.robots, &sample.obstacles, &sample.graph, params);
        for (z, t) in logits.iter().zip(&sample.targets) {
            for (zi, &ti) in z.iter().zip(t) {
                loss_sum += bce_one(*zi, f64::from(ti));
                bits += 1;
            }
        }
    }
    if bits == 0 {
        0.0
    } else {
        loss_sum / bits as f64
    }
}
