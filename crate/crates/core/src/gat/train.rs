//! Training loop: adaptive-moment optimizer, deterministic batching, and
//! per-epoch validation metrics; model file I/O.

use super::grad::{grad_batch_sums, NetGrads, Sample};
use super::{forward_scene, sigmoid, NetConfig, NetParams};
use crate::oracle::{DatasetManifest, DatasetRecord};
use crate::scene::SceneGraph;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatError {
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("loss became NaN at epoch {epoch} (batch {batch})")]
    NanLoss { epoch: usize, batch: usize },
    #[error("dataset/manifest mismatch: {0}")]
    BadSplit(String),
    #[error("model file: {0}")]
    BadModel(String),
}

/// Optimizer and architecture hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: usize,
    pub gat_layers: usize,
    pub decoder_layers: usize,
    pub decoder_width: usize,
    pub append_velocity: bool,
    /// Prediction threshold used for accuracy metrics.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 40,
            seed: 0,
            hidden: 64,
            gat_layers: 2,
            decoder_layers: 4,
            decoder_width: 256,
            append_velocity: false,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn net_config(&self, horizon: usize) -> NetConfig {
        NetConfig {
            hidden: self.hidden,
            gat_layers: self.gat_layers,
            decoder_layers: self.decoder_layers,
            decoder_width: self.decoder_width,
            horizon,
            append_velocity: self.append_velocity,
        }
    }
}

/// Validation metrics per epoch. Accuracies are split by edge type and
/// reported both per bit and per whole-edge strategy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub bit_acc_rr: f64,
    pub bit_acc_ro: f64,
    pub edge_acc_rr: f64,
    pub edge_acc_ro: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetParams,
    pub history: Vec<EpochMetrics>,
    /// Epoch whose parameters were kept (best mean per-bit validation
    /// accuracy).
    pub best_epoch: usize,
}

/// Rebuilds the heterogeneous graph of a dataset record from its stored edge
/// lists (no distance recomputation).
pub fn record_graph(record: &DatasetRecord) -> SceneGraph {
    let nr = record.robots.len();
    let no = record.obstacles.len();
    let edges_or = record.edges_ro.iter().map(|&(r, o)| (o, r)).collect();
    let mut edges_oo = Vec::new();
    for a in 0..no {
        for b in 0..no {
            if a != b {
                edges_oo.push((a, b));
            }
        }
    }
    let n = nr + no;
    let mut adjacency = vec![vec![0u8; n]; n];
    for &(i, j) in &record.edges_rr {
        adjacency[i][j] = 1;
        adjacency[j][i] = 1;
    }
    for &(r, o) in &record.edges_ro {
        adjacency[r][nr + o] = 1;
        adjacency[nr + o][r] = 1;
    }
    for &(a, b) in &edges_oo {
        adjacency[nr + a][nr + b] = 1;
    }
    SceneGraph {
        num_robots: nr,
        num_obstacles: no,
        edges_rr: record.edges_rr.clone(),
        edges_ro: record.edges_ro.clone(),
        edges_or,
        edges_oo,
        adjacency,
    }
}

fn sample_from_record(record: &DatasetRecord) -> Sample {
    Sample {
        robots: record.robots.clone(),
        obstacles: record.obstacles.clone(),
        graph: record_graph(record),
        targets: record.labels.clone(),
    }
}

struct Adam {
    m: NetGrads,
    v: NetGrads,
    t: usize,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &NetParams, lr: f64) -> Self {
        Self {
            m: NetGrads::zeros_like(params),
            v: NetGrads::zeros_like(params),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut NetParams, grads: &NetGrads) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        let g_tensors = grads.tensors();
        let m_tensors = self.m.tensors_mut();
        for (m, g) in m_tensors.into_iter().zip(&g_tensors) {
            for (mi, gi) in m.iter_mut().zip(g.iter()) {
                *mi = Self::BETA1 * *mi + (1.0 - Self::BETA1) * gi;
            }
        }
        let v_tensors = self.v.tensors_mut();
        for (v, g) in v_tensors.into_iter().zip(&g_tensors) {
            for (vi, gi) in v.iter_mut().zip(g.iter()) {
                *vi = Self::BETA2 * *vi + (1.0 - Self::BETA2) * gi * gi;
            }
        }
        let m_tensors = self.m.tensors();
        let v_tensors = self.v.tensors();
        for ((p, m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(m_tensors)
            .zip(v_tensors)
        {
            for ((pi, mi), vi) in p.1.iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *pi -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
            }
        }
    }
}

/// Deterministic chunked batch gradient: the batch is split into a fixed
/// number of chunks whose partial sums are combined in order, so results do
/// not depend on the worker count.
fn batch_gradient(params: &NetParams, batch: &[Sample]) -> (f64, NetGrads) {
    const CHUNKS: usize = 8;
    let chunk_size = batch.len().div_ceil(CHUNKS).max(1);
    let partials: Vec<(f64, usize, NetGrads)> = batch
        .par_chunks(chunk_size)
        .map(|chunk| grad_batch_sums(params, chunk))
        .collect();
    let mut loss_sum = 0.0;
    let mut bits = 0usize;
    let mut grads = NetGrads::zeros_like(params);
    for (l, b, g) in partials {
        loss_sum += l;
        bits += b;
        grads.add(&g);
    }
    if bits > 0 {
        grads.scale(1.0 / bits as f64);
        (loss_sum / bits as f64, grads)
    } else {
        (0.0, grads)
    }
}

/// Accuracy counters over a sample set, by edge type.
pub fn evaluate_accuracy(
    params: &NetParams,
    samples: &[Sample],
    threshold: f64,
) -> (f64, EpochAccuracy) {
    let per_sample: Vec<(f64, usize, EpochAccuracy)> = samples
        .par_iter()
        .map(|sample| {
            let logits = forward_scene(&sample.robots, &sample.obstacles, &sample.graph, params);
            let nrr = sample.graph.edges_rr.len();
            let mut acc = EpochAccuracy::default();
            let mut loss = 0.0;
            let mut bits = 0usize;
            for (e, (z, t)) in logits.iter().zip(&sample.targets).enumerate() {
                let is_rr = e < nrr;
                let mut edge_exact = true;
                for (zi, &ti) in z.iter().zip(t) {
                    loss += super::bce_one(*zi, f64::from(ti));
                    bits += 1;
                    let predicted = u8::from(sigmoid(*zi) > threshold);
                    let correct = predicted == ti;
                    edge_exact &= correct;
                    if is_rr {
                        acc.rr_bits += 1;
                        acc.rr_correct += usize::from(correct);
                    } else {
                        acc.ro_bits += 1;
                        acc.ro_correct += usize::from(correct);
                    }
                }
                if is_rr {
                    acc.rr_edges += 1;
                    acc.rr_edges_exact += usize::from(edge_exact);
                } else {
                    acc.ro_edges += 1;
                    acc.ro_edges_exact += usize::from(edge_exact);
                }
            }
            (loss, bits, acc)
        })
        .collect();

    let mut total = EpochAccuracy::default();
    let mut loss_sum = 0.0;
    let mut bit_count = 0usize;
    for (l, b, acc) in per_sample {
        loss_sum += l;
        bit_count += b;
        total.merge(&acc);
    }
    let loss = if bit_count > 0 { loss_sum / bit_count as f64 } else { 0.0 };
    (loss, total)
}

#[derive(Debug, Clone, Default)]
pub struct EpochAccuracy {
    pub rr_bits: usize,
    pub rr_correct: usize,
    pub ro_bits: usize,
    pub ro_correct: usize,
    pub rr_edges: usize,
    pub rr_edges_exact: usize,
    pub ro_edges: usize,
    pub ro_edges_exact: usize,
}

impl EpochAccuracy {
    fn merge(&mut self, other: &Self) {
        self.rr_bits += other.rr_bits;
        self.rr_correct += other.rr_correct;
        self.ro_bits += other.ro_bits;
        self.ro_correct += other.ro_correct;
        self.rr_edges += other.rr_edges;
        self.rr_edges_exact += other.rr_edges_exact;
        self.ro_edges += other.ro_edges;
        self.ro_edges_exact += other.ro_edges_exact;
    }

    pub fn bit_acc_rr(&self) -> f64 {
        ratio(self.rr_correct, self.rr_bits)
    }

    pub fn bit_acc_ro(&self) -> f64 {
        ratio(self.ro_correct, self.ro_bits)
    }

    pub fn edge_acc_rr(&self) -> f64 {
        ratio(self.rr_edges_exact, self.rr_edges)
    }

    pub fn edge_acc_ro(&self) -> f64 {
        ratio(self.ro_edges_exact, self.ro_edges)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Trains on the manifest's train split, validating on its val split each
/// epoch; returns the parameters of the best-validation epoch.
pub fn train(
    records: &[DatasetRecord],
    manifest: &DatasetManifest,
    config: &TrainConfig,
) -> Result<TrainOutcome, GatError> {
    let bad = |i: &usize| *i >= records.len();
    if manifest.train_indices.iter().any(bad) || manifest.val_indices.iter().any(bad) {
        return Err(GatError::BadSplit(format!(
            "split references records beyond the dataset ({} records)",
            records.len()
        )));
    }
    let train_samples: Vec<Sample> = manifest
        .train_indices
        .iter()
        .map(|&i| sample_from_record(&records[i]))
        .collect();
    let val_samples: Vec<Sample> = manifest
        .val_indices
        .iter()
        .map(|&i| sample_from_record(&records[i]))
        .collect();

    let net_config = config.net_config(manifest.horizon);
    let mut params = NetParams::init(&net_config, config.seed);
    let mut adam = Adam::new(&params, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e);

    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, NetParams)> = None;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size.max(1)).enumerate() {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train_samples[i].clone()).collect();
            let (loss, grads) = batch_gradient(&params, &batch);
            if !loss.is_finite() {
                return Err(GatError::NanLoss { epoch, batch: batch_idx });
            }
            adam.step(&mut params, &grads);
            epoch_loss += loss;
            batches += 1;
        }
        let train_loss = if batches > 0 { epoch_loss / batches as f64 } else { 0.0 };

        let (val_loss, acc) = evaluate_accuracy(&params, &val_samples, config.threshold);
        let metrics = EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            bit_acc_rr: acc.bit_acc_rr(),
            bit_acc_ro: acc.bit_acc_ro(),
            edge_acc_rr: acc.edge_acc_rr(),
            edge_acc_ro: acc.edge_acc_ro(),
        };
        let score = 0.5 * (metrics.bit_acc_rr + metrics.bit_acc_ro);
        let improved = best.as_ref().map(|(s, _, _)| score > *s).unwrap_or(true);
        if improved {
            best = Some((score, epoch, params.clone()));
        }
        history.push(metrics);
    }

    let (_, best_epoch, best_params) = best.unwrap_or((0.0, 0, params));
    Ok(TrainOutcome { params: best_params, history, best_epoch })
}

/// Versioned model container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    pub config_digest: String,
    pub seed: u64,
    pub params: NetParams,
}

pub fn save_model(path: &Path, model: &ModelFile) -> Result<(), GatError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let json = serde_json::to_string(model).map_err(|e| GatError::BadModel(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelFile, GatError> {
    let text = std::fs::read_to_string(path)?;
    let model: ModelFile =
        serde_json::from_str(&text).map_err(|e| GatError::BadModel(e.to_string()))?;
    if model.version != 1 {
        return Err(GatError::BadModel(format!("unsupported version {}", model.version)));
    }
    Ok(model)
}

/// Writes the per-epoch metrics as CSV.
pub fn write_metrics_csv(path: &Path, history: &[EpochMetrics]) -> Result<(), GatError> {
    let mut out = String::from(
        "epoch,train_loss,val_loss,bit_acc_rr,bit_acc_ro,edge_acc_rr,edge_acc_ro\n",
    );
    for m in history {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            m.epoch, m.train_loss, m.val_loss, m.bit_acc_rr, m.bit_acc_ro, m.edge_acc_rr,
            m.edge_acc_ro
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{generate_dataset, load_dataset, DataGenConfig};
    use crate::micp::MicpConfig;

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            learning_rate: 3e-3,
            batch_size: 8,
            epochs: 60,
            seed: 5,
            hidden: 16,
            gat_layers: 2,
            decoder_layers: 2,
            decoder_width: 32,
            append_velocity: false,
            threshold: 0.5,
        }
    }

    #[test]
    fn overfits_a_handful_of_records() {
        let cfg = DataGenConfig {
            robots_range: (2, 3),
            obstacles_range: (0, 1),
            micp: MicpConfig { horizon: 3, ..Default::default() },
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let summary = generate_dataset(&cfg, 14, 123, &path).unwrap();
        let records = load_dataset(&path).unwrap();
        assert!(summary.manifest.records >= 10, "need enough feasible records");

        // Train on everything and measure train accuracy (memorization).
        let mut manifest = summary.manifest.clone();
        manifest.train_indices = (0..records.len()).collect();
        manifest.val_indices = (0..records.len()).collect();
        let outcome = train(&records, &manifest, &tiny_train_config()).unwrap();
        let last = outcome.history.last().unwrap();
        let best = outcome
            .history
            .iter()
            .map(|m| 0.5 * (m.bit_acc_rr + m.bit_acc_ro))
            .fold(0.0f64, f64::max);
        assert!(
            best >= 0.99,
            "memorization accuracy {best} (last epoch: {last:?})"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = DataGenConfig {
            robots_range: (2, 2),
            obstacles_range: (0, 0),
            micp: MicpConfig { horizon: 2, ..Default::default() },
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let summary = generate_dataset(&cfg, 10, 55, &path).unwrap();
        let records = load_dataset(&path).unwrap();
        let mut config = tiny_train_config();
        config.epochs = 3;
        let a = train(&records, &summary.manifest, &config).unwrap();
        let b = train(&records, &summary.manifest, &config).unwrap();
        for (ma, mb) in a.history.iter().zip(&b.history) {
            assert_eq!(ma.train_loss.to_bits(), mb.train_loss.to_bits());
            assert_eq!(ma.val_loss.to_bits(), mb.val_loss.to_bits());
        }
    }

    #[test]
    fn model_round_trip() {
        let config = NetConfig {
            hidden: 4,
            gat_layers: 1,
            decoder_layers: 1,
            decoder_width: 4,
            horizon: 2,
            append_velocity: false,
        };
        let params = NetParams::init(&config, 9);
        let model = ModelFile {
            version: 1,
            config_digest: "abc".into(),
            seed: 9,
            params: params.clone(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.params, params);
        assert_eq!(back.config_digest, "abc");
    }
}
