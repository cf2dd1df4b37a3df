//! Training schedule: joint optimization of network weights (cross-entropy)
//! and agent weights (policy gradient), policy freeze at a configured
//! epoch, masked fine-tuning of the survivor subnetwork, and a physical
//! prune at the very end.
//!
//! Determinism contract: every random draw comes from a stream keyed by
//! (master seed, epoch, batch), so an interrupted run resumed from a
//! checkpoint retraces the uninterrupted run exactly.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentBank, Granularity};
use crate::data::{atomic_write, Dataset};
use crate::error::{Error, Result};
use crate::graph::{
    argmax_rows, attach_gates, batched_accuracy, build_resnet_tiny, build_vgg_tiny, forward,
    init_params, GraphSpec, MaskSet, ModelParams,
};
use crate::ops::{adam_step, softmax_xent, BnStats, Mode};
use crate::prune::{compression_report, kept_sets, prune, CompressionReport, PruneOutcome};
use crate::reward::{compute_rewards, reinforce_gradient, RewardConfig};
use crate::tensor::{ParamState, Tensor};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Vgg,
    Resnet,
}

/// Which architecture to train, desk-scale by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub arch: Arch,
    pub plan: Vec<usize>,
    pub fc_width: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            arch: Arch::Vgg,
            plan: vec![8, 16],
            fc_width: 32,
        }
    }
}

impl NetworkSpec {
    pub fn build(&self, input_shape: (usize, usize, usize), classes: usize) -> Result<GraphSpec> {
        match self.arch {
            Arch::Vgg => build_vgg_tiny(&self.plan, self.fc_width, classes, input_shape),
            Arch::Resnet => build_resnet_tiny(&self.plan, classes, input_shape),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub network: NetworkSpec,
    pub epochs: usize,
    /// Agents stop updating at the start of this epoch; the deterministic
    /// threshold mask is fixed and fine-tuning begins.
    pub policy_stop_epoch: usize,
    pub batch_size: usize,
    pub network_lr: f64,
    pub policy_lr: f64,
    /// Penalty for wrong predictions in the accuracy reward.
    pub penalty: f64,
    pub seed: u64,
    pub granularity: Granularity,
    pub joint_training: bool,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // 60/45 scales the original 300/260 schedule to desk-size runs
        TrainConfig {
            network: NetworkSpec::default(),
            epochs: 60,
            policy_stop_epoch: 45,
            batch_size: 64,
            network_lr: 1e-3,
            policy_lr: 0.01,
            penalty: 100.0,
            seed: 0,
            granularity: Granularity::PerSample,
            joint_training: true,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.policy_stop_epoch == 0 || self.policy_stop_epoch > self.epochs {
            return Err(Error::Config {
                reason: format!(
                    "policy_stop_epoch must lie in 1..=epochs, got {}/{}",
                    self.policy_stop_epoch, self.epochs
                ),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Config {
                reason: "batch_size must be at least 1".into(),
            });
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config {
                reason: format!("threshold must lie in (0,1), got {}", self.threshold),
            });
        }
        if self.penalty < 0.0 {
            return Err(Error::Config {
                reason: "penalty must be non-negative".into(),
            });
        }
        if self.network_lr <= 0.0 || self.policy_lr < 0.0 {
            return Err(Error::Config {
                reason: "learning rates must be positive".into(),
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Deterministic stream seeds
// ---------------------------------------------------------------------------

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SALT_INIT: u64 = 0x01;
const SALT_SHUFFLE: u64 = 0x02;
const SALT_MASK: u64 = 0x03;

fn stream_seed(master: u64, salt: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master ^ salt).wrapping_add(a)).wrapping_add(b))
}

pub const RNG_ALGO: &str = "chacha8";
pub const RNG_SCHEME: &str = "per-epoch-batch-v1";

/// How the run derives its random streams; stored in checkpoints so a
/// resumed run can verify it speaks the same dialect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngRecord {
    pub algo: String,
    pub master_seed: u64,
    pub scheme: String,
}

impl RngRecord {
    fn new(master_seed: u64) -> Self {
        RngRecord {
            algo: RNG_ALGO.into(),
            master_seed,
            scheme: RNG_SCHEME.into(),
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub mean_r_acc: f64,
    pub mean_r_c: f64,
    pub kept_fraction: f64,
    pub eval_acc: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,batch,loss,train_acc,mean_R_acc,mean_R_C,kept_fraction,eval_acc";

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let eval = r.eval_acc.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch, r.batch, r.loss, r.train_acc, r.mean_r_acc, r.mean_r_c, r.kept_fraction, eval
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to reproduce or continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub graph: GraphSpec,
    pub params: ModelParams,
    pub bank: AgentBank,
    pub config: TrainConfig,
    pub epoch: usize,
    pub rng: RngRecord,
}

#[derive(Serialize, Deserialize)]
struct TensorDoc {
    shape: Vec<usize>,
    data: String,
}

fn encode_f32(data: &[f32]) -> String {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_f32(text: &str, expected: usize) -> Result<Vec<f32>> {
    let bytes = B64.decode(text).map_err(|e| Error::Json {
        reason: format!("bad base64 parameter block: {e}"),
    })?;
    if bytes.len() != expected * 4 {
        return Err(Error::Json {
            reason: format!(
                "parameter block holds {} bytes, expected {}",
                bytes.len(),
                expected * 4
            ),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl TensorDoc {
    fn from_tensor(t: &Tensor) -> Self {
        TensorDoc {
            shape: t.shape.clone(),
            data: encode_f32(&t.data),
        }
    }

    fn to_tensor(&self) -> Result<Tensor> {
        let n: usize = self.shape.iter().product();
        Tensor::from_vec(&self.shape, decode_f32(&self.data, n)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ParamDoc {
    value: TensorDoc,
    gradient: TensorDoc,
    moment1: TensorDoc,
    moment2: TensorDoc,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct BnDoc {
    channels: usize,
    running_mean: String,
    running_var: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    version: u32,
    graph: GraphSpec,
    params: Vec<ParamDoc>,
    bn_stats: Vec<BnDoc>,
    bank: AgentBank,
    config: TrainConfig,
    epoch: usize,
    rng: RngRecord,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

pub fn checkpoint_to_json(ckpt: &Checkpoint) -> Result<String> {
    let doc = CheckpointDoc {
        version: CHECKPOINT_VERSION,
        graph: ckpt.graph.clone(),
        params: ckpt
            .params
            .states
            .iter()
            .map(|s| ParamDoc {
                value: TensorDoc::from_tensor(&s.value),
                gradient: TensorDoc::from_tensor(&s.gradient),
                moment1: TensorDoc::from_tensor(&s.moment1),
                moment2: TensorDoc::from_tensor(&s.moment2),
                step: s.step,
            })
            .collect(),
        bn_stats: ckpt
            .params
            .bn
            .iter()
            .map(|b| BnDoc {
                channels: b.running_mean.len(),
                running_mean: encode_f32(&b.running_mean),
                running_var: encode_f32(&b.running_var),
            })
            .collect(),
        bank: ckpt.bank.clone(),
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        rng: ckpt.rng.clone(),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Json {
        reason: e.to_string(),
    })
}

pub fn checkpoint_from_json(text: &str) -> Result<Checkpoint> {
    let probe: VersionProbe = serde_json::from_str(text).map_err(|e| Error::Json {
        reason: e.to_string(),
    })?;
    if probe.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            actual: probe.version,
        });
    }
    let doc: CheckpointDoc = serde_json::from_str(text).map_err(|e| Error::Json {
        reason: e.to_string(),
    })?;
    let states = doc
        .params
        .iter()
        .map(|p| {
            Ok(ParamState {
                value: p.value.to_tensor()?,
                gradient: p.gradient.to_tensor()?,
                moment1: p.moment1.to_tensor()?,
                moment2: p.moment2.to_tensor()?,
                step: p.step,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bn = doc
        .bn_stats
        .iter()
        .map(|b| {
            Ok(BnStats {
                running_mean: decode_f32(&b.running_mean, b.channels)?,
                running_var: decode_f32(&b.running_var, b.channels)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    doc.graph.validate()?;
    Ok(Checkpoint {
        graph: doc.graph,
        params: ModelParams { states, bn },
        bank: doc.bank,
        config: doc.config,
        epoch: doc.epoch,
        rng: doc.rng,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    atomic_write(path, checkpoint_to_json(ckpt)?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    checkpoint_from_json(&text)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Accuracy over a dataset in inference mode, optionally masked.
pub fn evaluate(
    graph: &GraphSpec,
    model: &ModelParams,
    dataset: &Dataset,
    masks: Option<&MaskSet>,
) -> Result<f64> {
    dataset.validate()?;
    if dataset.classes > graph.class_count {
        return Err(Error::Config {
            reason: format!(
                "dataset has {} classes but the model emits {} logits",
                dataset.classes, graph.class_count
            ),
        });
    }
    let mut scratch = model.clone();
    batched_accuracy(
        graph,
        &mut scratch,
        &dataset.images,
        &dataset.labels,
        masks,
        256,
    )
}

// ---------------------------------------------------------------------------
// The trainer
// ---------------------------------------------------------------------------

/// Build the gated network a config describes for a given dataset shape.
pub fn build_network(
    config: &TrainConfig,
    input_shape: (usize, usize, usize),
    classes: usize,
) -> Result<(GraphSpec, ModelParams, AgentBank)> {
    let graph = config.network.build(input_shape, classes)?;
    let (gated, bank) = attach_gates(&graph)?;
    let model = init_params(&gated, stream_seed(config.seed, SALT_INIT, 0, 0));
    Ok((gated, model, bank))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub report: CompressionReport,
    pub pruned: PruneOutcome,
}

struct Trainer<'d> {
    graph: GraphSpec,
    model: ModelParams,
    bank: AgentBank,
    config: TrainConfig,
    train_set: &'d Dataset,
    eval_set: &'d Dataset,
    frozen_masks: Option<MaskSet>,
    metrics: Vec<MetricsRow>,
}

impl<'d> Trainer<'d> {
    /// The fixed fine-tune masks are a pure function of the (frozen) bank,
    /// so a resumed run can rederive them without touching any state.
    fn derive_frozen_masks(&mut self) {
        if self.frozen_masks.is_some() {
            return;
        }
        let kept = kept_sets(&self.bank, self.config.threshold);
        let flags: Vec<Vec<bool>> = self
            .graph
            .gate_groups
            .iter()
            .zip(&kept)
            .map(|(g, k)| (0..g.channels).map(|c| k.contains(&c)).collect())
            .collect();
        self.frozen_masks = Some(MaskSet::from_kept(&flags));
    }

    /// Runs exactly once, when training crosses the policy-stop boundary:
    /// fresh optimizer state for the fine-tune phase, so stale momentum
    /// cannot keep nudging weights whose channels just went dark.
    fn freeze_transition(&mut self) {
        self.derive_frozen_masks();
        for s in &mut self.model.states {
            s.reset_moments();
        }
    }

    fn gather_batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = self.train_set.input_shape();
        let sample = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * sample);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.train_set.images.data[i * sample..(i + 1) * sample]);
            labels.push(self.train_set.labels[i]);
        }
        (
            Tensor {
                shape: vec![indices.len(), c, h, w],
                data,
            },
            labels,
        )
    }

    fn run(&mut self, start_epoch: usize) -> Result<()> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let n = self.train_set.len();
        if start_epoch > self.config.policy_stop_epoch {
            // resuming inside the fine-tune phase: the moment reset already
            // happened before the checkpoint was written
            self.derive_frozen_masks();
        }
        for epoch in start_epoch..self.config.epochs {
            if epoch == self.config.policy_stop_epoch {
                self.freeze_transition();
            }
            let policy_phase = epoch < self.config.policy_stop_epoch;
            let mut indices: Vec<usize> = (0..n).collect();
            let mut shuffle_rng = rand_chacha::ChaCha8Rng::seed_from_u64(stream_seed(
                self.config.seed,
                SALT_SHUFFLE,
                epoch as u64,
                0,
            ));
            indices.shuffle(&mut shuffle_rng);

            let batches: Vec<&[usize]> = indices.chunks(self.config.batch_size).collect();
            let last_batch = batches.len() - 1;
            for (bi, chunk) in batches.iter().enumerate() {
                let (batch, labels) = self.gather_batch(chunk);
                let row = if policy_phase {
                    self.policy_batch(epoch, bi, batch, labels)?
                } else {
                    self.finetune_batch(epoch, bi, batch, labels)?
                };
                let mut row = row;
                if bi == last_batch {
                    let eval_masks = if policy_phase {
                        None
                    } else {
                        self.frozen_masks.clone()
                    };
                    row.eval_acc = Some(evaluate(
                        &self.graph,
                        &self.model,
                        self.eval_set,
                        eval_masks.as_ref(),
                    )?);
                }
                self.metrics.push(row);
            }
        }
        Ok(())
    }

    /// Sampled-mask step: one shared forward feeds both the cross-entropy
    /// update (when joint training is on) and the reward computation.
    fn policy_batch(
        &mut self,
        epoch: usize,
        batch_idx: usize,
        batch: Tensor,
        labels: Vec<usize>,
    ) -> Result<MetricsRow> {
        let bn = batch.shape[0];
        let sample = self.bank.sample_actions(
            stream_seed(self.config.seed, SALT_MASK, epoch as u64, batch_idx as u64),
            bn,
            self.config.granularity,
        );
        let masks = MaskSet::from_actions(&sample);
        let kept_fraction = masks.kept_fraction();
        let (logits, cache) = forward(
            &self.graph,
            &mut self.model,
            &batch,
            Some(&masks),
            Mode::Train,
        )?;
        let preds = argmax_rows(&logits);
        let train_acc = preds.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64
            / labels.len() as f64;
        let (loss, dlogits) = softmax_xent(&logits, &labels)?;
        if self.config.joint_training {
            crate::graph::backward(&self.graph, &mut self.model, &cache, &dlogits)?;
            for s in &mut self.model.states {
                adam_step(s, self.config.network_lr);
            }
        }
        let rewards = compute_rewards(
            &sample,
            &preds,
            &labels,
            RewardConfig::new(self.config.penalty)?,
        )?;
        let ascent = reinforce_gradient(&sample, &rewards.combined, bn)?;
        let descent: Vec<Vec<f64>> = ascent
            .iter()
            .map(|g| g.iter().map(|&v| -v).collect())
            .collect();
        self.bank.adam_step(&descent, self.config.policy_lr)?;

        let mean_r_acc = rewards.accuracy.iter().sum::<f64>() / rewards.accuracy.len() as f64;
        let comp_total: f64 = rewards.compression.iter().flatten().sum();
        let comp_count: usize = rewards.compression.iter().map(Vec::len).sum();
        Ok(MetricsRow {
            epoch,
            batch: batch_idx,
            loss,
            train_acc,
            mean_r_acc,
            mean_r_c: comp_total / comp_count.max(1) as f64,
            kept_fraction,
            eval_acc: None,
        })
    }

    /// Post-freeze step: the threshold mask is fixed; only the survivor
    /// subnetwork trains (masked channels receive zero gradient).
    fn finetune_batch(
        &mut self,
        epoch: usize,
        batch_idx: usize,
        batch: Tensor,
        labels: Vec<usize>,
    ) -> Result<MetricsRow> {
        let masks = self.frozen_masks.clone().expect("frozen at policy stop");
        let kept_fraction = masks.kept_fraction();
        let (logits, cache) = forward(
            &self.graph,
            &mut self.model,
            &batch,
            Some(&masks),
            Mode::Train,
        )?;
        let preds = argmax_rows(&logits);
        let correct = preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
        let train_acc = correct as f64 / labels.len() as f64;
        let (loss, dlogits) = softmax_xent(&logits, &labels)?;
        crate::graph::backward(&self.graph, &mut self.model, &cache, &dlogits)?;
        for s in &mut self.model.states {
            adam_step(s, self.config.network_lr);
        }
        // report the reward terms the frozen mask implies
        let wrong = labels.len() - correct;
        let mean_r_acc = (correct as f64 - self.config.penalty * wrong as f64) / labels.len() as f64;
        let dropped: f64 = masks
            .planes
            .iter()
            .map(|p| p.channels as f64 - p.data.iter().map(|&v| f64::from(v)).sum::<f64>() / p.rows as f64)
            .sum();
        Ok(MetricsRow {
            epoch,
            batch: batch_idx,
            loss,
            train_acc,
            mean_r_acc,
            mean_r_c: dropped / self.graph.gate_groups.len().max(1) as f64,
            kept_fraction,
            eval_acc: None,
        })
    }

    fn into_outcome(self) -> Result<TrainOutcome> {
        let checkpoint = Checkpoint {
            graph: self.graph,
            params: self.model,
            bank: self.bank,
            config: self.config.clone(),
            epoch: self.config.epochs,
            rng: RngRecord::new(self.config.seed),
        };
        let pruned = prune(
            &checkpoint.graph,
            &checkpoint.params,
            &checkpoint.bank,
            self.config.threshold,
        )?;
        let accuracy_before = evaluate(&checkpoint.graph, &checkpoint.params, self.eval_set, None)?;
        let accuracy_after = evaluate(&pruned.graph, &pruned.params, self.eval_set, None)?;
        let report = compression_report(
            &checkpoint.graph,
            &pruned.graph,
            Some(accuracy_before),
            Some(accuracy_after),
        );
        Ok(TrainOutcome {
            checkpoint,
            metrics: self.metrics,
            report,
            pruned,
        })
    }
}

fn check_datasets(train_set: &Dataset, eval_set: &Dataset) -> Result<()> {
    train_set.validate()?;
    eval_set.validate()?;
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::EmptyInput { what: "dataset" });
    }
    if train_set.classes != eval_set.classes {
        return Err(Error::Config {
            reason: format!(
                "train set has {} classes, eval set {}",
                train_set.classes, eval_set.classes
            ),
        });
    }
    if train_set.input_shape() != eval_set.input_shape() {
        return Err(Error::Config {
            reason: "train and eval image shapes differ".into(),
        });
    }
    Ok(())
}

/// Run the full schedule from scratch: policy + network training until the
/// policy stop epoch, masked fine-tuning afterwards, physical prune at the
/// end.
pub fn train(
    config: &TrainConfig,
    train_set: &Dataset,
    eval_set: &Dataset,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_datasets(train_set, eval_set)?;
    let (graph, model, bank) = build_network(config, train_set.input_shape(), train_set.classes)?;
    let mut trainer = Trainer {
        graph,
        model,
        bank,
        config: config.clone(),
        train_set,
        eval_set,
        frozen_masks: None,
        metrics: Vec::new(),
    };
    trainer.run(0)?;
    trainer.into_outcome()
}

/// Continue a checkpointed run until `epochs`. With the same datasets this
/// reproduces the uninterrupted run's remaining metrics exactly.
pub fn continue_train(
    checkpoint: Checkpoint,
    epochs: usize,
    train_set: &Dataset,
    eval_set: &Dataset,
) -> Result<TrainOutcome> {
    if checkpoint.rng.algo != RNG_ALGO || checkpoint.rng.scheme != RNG_SCHEME {
        return Err(Error::Config {
            reason: format!(
                "checkpoint uses rng {}/{}, this build implements {}/{}",
                checkpoint.rng.algo, checkpoint.rng.scheme, RNG_ALGO, RNG_SCHEME
            ),
        });
    }
    if epochs < checkpoint.epoch {
        return Err(Error::Config {
            reason: format!(
                "cannot continue to epoch {epochs}, checkpoint is already at {}",
                checkpoint.epoch
            ),
        });
    }
    let mut config = checkpoint.config.clone();
    config.epochs = epochs;
    config.validate()?;
    check_datasets(train_set, eval_set)?;
    let start = checkpoint.epoch;
    let mut trainer = Trainer {
        graph: checkpoint.graph,
        model: checkpoint.params,
        bank: checkpoint.bank,
        config,
        train_set,
        eval_set,
        frozen_masks: None,
        metrics: Vec::new(),
    };
    trainer.run(start)?;
    trainer.into_outcome()
}

/// Plain maskless training of an already-built model (used to fine-tune a
/// searched architecture, and to train ungated baselines).
pub fn fine_tune(
    graph: &GraphSpec,
    model: &mut ModelParams,
    train_set: &Dataset,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<()> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    train_set.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput { what: "dataset" });
    }
    let (c, h, w) = train_set.input_shape();
    let sample = c * h * w;
    for epoch in 0..epochs {
        let mut indices: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(stream_seed(
            seed,
            SALT_SHUFFLE,
            epoch as u64,
            1,
        ));
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(64) {
            let mut data = Vec::with_capacity(chunk.len() * sample);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                data.extend_from_slice(&train_set.images.data[i * sample..(i + 1) * sample]);
                labels.push(train_set.labels[i]);
            }
            let batch = Tensor {
                shape: vec![chunk.len(), c, h, w],
                data,
            };
            let (logits, cache) = forward(graph, model, &batch, None, Mode::Train)?;
            let (_, dlogits) = softmax_xent(&logits, &labels)?;
            crate::graph::backward(graph, model, &cache, &dlogits)?;
            for s in &mut model.states {
                adam_step(s, lr);
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Penalty sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub penalty: f64,
    pub seed: u64,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub params_pruned_rate: f64,
    pub flops_pruned_rate: f64,
}

/// Train once per (penalty, seed) pair and report every outcome triple;
/// no automatic winner selection.
pub fn sweep(
    base: &TrainConfig,
    penalties: &[f64],
    seeds: &[u64],
    train_set: &Dataset,
    eval_set: &Dataset,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &penalty in penalties {
        for &seed in seeds {
            let mut config = base.clone();
            config.penalty = penalty;
            config.seed = seed;
            let outcome = train(&config, train_set, eval_set)?;
            rows.push(SweepRow {
                penalty,
                seed,
                accuracy_before: outcome.report.accuracy_before.unwrap_or(0.0),
                accuracy_after: outcome.report.accuracy_after.unwrap_or(0.0),
                params_pruned_rate: outcome.report.params_pruned_rate,
                flops_pruned_rate: outcome.report.flops_pruned_rate,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "penalty,seed,accuracy_before,accuracy_after,params_pruned_rate,flops_pruned_rate\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.penalty,
            r.seed,
            r.accuracy_before,
            r.accuracy_after,
            r.params_pruned_rate,
            r.flops_pruned_rate
        ));
    }
    out
}

pub const DEFAULT_PENALTY_GRID: [f64; 6] = [5.0, 10.0, 50.0, 100.0, 200.0, 500.0];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_data;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            network: NetworkSpec {
                arch: Arch::Vgg,
                plan: vec![3],
                fc_width: 4,
            },
            epochs: 2,
            policy_stop_epoch: 1,
            batch_size: 8,
            penalty: 10.0,
            seed: 42,
            ..TrainConfig::default()
        }
    }

    fn tiny_data() -> (Dataset, Dataset) {
        (
            synth_data(1, 24, 3, (1, 4, 4)).unwrap(),
            synth_data(2, 12, 3, (1, 4, 4)).unwrap(),
        )
    }

    #[test]
    fn config_validation_edges() {
        let mut c = tiny_config();
        c.policy_stop_epoch = 0;
        assert!(c.validate().is_err());
        c = tiny_config();
        c.policy_stop_epoch = c.epochs + 1;
        assert!(c.validate().is_err());
        c = tiny_config();
        c.threshold = 1.0;
        assert!(c.validate().is_err());
        c = tiny_config();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let (train_set, eval_set) = tiny_data();
        let cfg = tiny_config();
        let a = train(&cfg, &train_set, &eval_set).unwrap();
        let b = train(&cfg, &train_set, &eval_set).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(
            checkpoint_to_json(&a.checkpoint).unwrap(),
            checkpoint_to_json(&b.checkpoint).unwrap()
        );
        assert_eq!(metrics_to_csv(&a.metrics), metrics_to_csv(&b.metrics));
    }

    #[test]
    fn metrics_rows_strictly_increasing() {
        let (train_set, eval_set) = tiny_data();
        let out = train(&tiny_config(), &train_set, &eval_set).unwrap();
        for pair in out.metrics.windows(2) {
            assert!((pair[0].epoch, pair[0].batch) < (pair[1].epoch, pair[1].batch));
        }
    }

    #[test]
    fn agents_frozen_after_policy_stop() {
        let (train_set, eval_set) = tiny_data();
        let mut short = tiny_config();
        short.epochs = 1;
        short.policy_stop_epoch = 1;
        let mut long = tiny_config();
        long.epochs = 3;
        long.policy_stop_epoch = 1;
        let a = train(&short, &train_set, &eval_set).unwrap();
        let b = train(&long, &train_set, &eval_set).unwrap();
        // two extra fine-tune epochs left every agent weight untouched
        assert_eq!(a.checkpoint.bank.groups, b.checkpoint.bank.groups);
    }

    #[test]
    fn agent_update_count_matches_schedule() {
        let (train_set, eval_set) = tiny_data();
        let cfg = tiny_config();
        let out = train(&cfg, &train_set, &eval_set).unwrap();
        let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
        assert_eq!(
            out.checkpoint.bank.step,
            (cfg.policy_stop_epoch * batches_per_epoch) as u64
        );
    }

    #[test]
    fn policy_only_training_never_touches_network_weights() {
        let (train_set, eval_set) = tiny_data();
        let mut cfg = tiny_config();
        cfg.joint_training = false;
        cfg.epochs = 2;
        cfg.policy_stop_epoch = 2; // no fine-tune epochs either
        let out = train(&cfg, &train_set, &eval_set).unwrap();
        let (_, init_model, init_bank) =
            build_network(&cfg, train_set.input_shape(), train_set.classes).unwrap();
        assert_eq!(out.checkpoint.params.states, init_model.states);
        // while the agents did move
        assert_ne!(out.checkpoint.bank.groups, init_bank.groups);
    }

    #[test]
    fn overfit_two_point_toy_reaches_perfect_accuracy() {
        let mut images = Tensor::zeros(&[2, 1, 4, 4]);
        for i in 0..16 {
            images.data[i] = 1.0; // class 0: bright
            images.data[16 + i] = 0.0; // class 1: dark
        }
        let ds = Dataset {
            images,
            labels: vec![0, 1],
            classes: 2,
            split: "toy".into(),
        };
        let mut cfg = tiny_config();
        cfg.network.plan = vec![4];
        cfg.network.fc_width = 8;
        cfg.epochs = 40;
        cfg.policy_stop_epoch = 40;
        cfg.policy_lr = 0.0; // keep every gate near its 0.99 init
        cfg.batch_size = 2;
        cfg.network_lr = 0.01;
        let out = train(&cfg, &ds, &ds).unwrap();
        let acc = evaluate(&out.checkpoint.graph, &out.checkpoint.params, &ds, None).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn default_blobs_are_separable_within_twenty_epochs() {
        let ds = synth_data(12, 240, 4, (1, 8, 8)).unwrap();
        let graph = build_vgg_tiny(&[4], 8, ds.classes, ds.input_shape()).unwrap();
        let mut model = init_params(&graph, 70);
        fine_tune(&graph, &mut model, &ds, 20, 0.01, 6).unwrap();
        let acc = evaluate(&graph, &model, &ds, None).unwrap();
        assert!(acc >= 0.99, "train accuracy {acc} after 20 epochs");
    }

    #[test]
    fn untrained_model_is_at_chance_on_permuted_labels() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut ds = synth_data(9, 2000, 10, (1, 8, 8)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        ds.labels.shuffle(&mut rng);
        let cfg = TrainConfig {
            seed: 5,
            ..TrainConfig::default()
        };
        let (graph, model, _) = build_network(&cfg, ds.input_shape(), ds.classes).unwrap();
        let acc = evaluate(&graph, &model, &ds, None).unwrap();
        assert!((acc - 0.1).abs() <= 0.03, "chance level, got {acc}");
        // evaluate is exactly one minus the independently counted error rate
        let mut scratch = model.clone();
        let (logits, _) = forward(
            &graph,
            &mut scratch,
            &ds.images,
            None,
            Mode::Inference,
        )
        .unwrap();
        let errors = argmax_rows(&logits)
            .iter()
            .zip(&ds.labels)
            .filter(|(p, y)| p != y)
            .count();
        assert!((acc - (1.0 - errors as f64 / ds.len() as f64)).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_forward() {
        let (train_set, eval_set) = tiny_data();
        let out = train(&tiny_config(), &train_set, &eval_set).unwrap();
        let text = checkpoint_to_json(&out.checkpoint).unwrap();
        let loaded = checkpoint_from_json(&text).unwrap();
        assert_eq!(loaded, out.checkpoint);
        let batch = Tensor::from_vec(
            &[2, 1, 4, 4],
            train_set.images.data[..32].to_vec(),
        )
        .unwrap();
        let (a, _) = forward(
            &out.checkpoint.graph,
            &mut out.checkpoint.params.clone(),
            &batch,
            None,
            Mode::Inference,
        )
        .unwrap();
        let (b, _) = forward(
            &loaded.graph,
            &mut loaded.params.clone(),
            &batch,
            None,
            Mode::Inference,
        )
        .unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn checkpoint_version_guard() {
        let (train_set, eval_set) = tiny_data();
        let out = train(&tiny_config(), &train_set, &eval_set).unwrap();
        let text = checkpoint_to_json(&out.checkpoint).unwrap();
        let bumped = text.replacen("\"version\": 1", "\"version\": 7", 1);
        let err = checkpoint_from_json(&bumped).unwrap_err();
        assert_eq!(
            err,
            Error::VersionMismatch {
                expected: 1,
                actual: 7
            }
        );
        let err = checkpoint_from_json("{ not json").unwrap_err();
        assert!(matches!(err, Error::Json { .. }));
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let (train_set, eval_set) = tiny_data();
        let mut full_cfg = tiny_config();
        full_cfg.epochs = 5;
        full_cfg.policy_stop_epoch = 2;
        let full = train(&full_cfg, &train_set, &eval_set).unwrap();

        // interrupt both at the freeze boundary and inside the fine-tune
        // phase; the latter must not redo the boundary's moment reset
        for cut in [2usize, 3] {
            let mut cut_cfg = full_cfg.clone();
            cut_cfg.epochs = cut;
            let partial = train(&cut_cfg, &train_set, &eval_set).unwrap();
            let text = checkpoint_to_json(&partial.checkpoint).unwrap();
            let loaded = checkpoint_from_json(&text).unwrap();
            let resumed = continue_train(loaded, 5, &train_set, &eval_set).unwrap();

            let tail: Vec<&MetricsRow> =
                full.metrics.iter().filter(|r| r.epoch >= cut).collect();
            let resumed_rows: Vec<&MetricsRow> = resumed.metrics.iter().collect();
            assert_eq!(tail.len(), resumed_rows.len());
            for (a, b) in tail.iter().zip(&resumed_rows) {
                assert_eq!(a, b);
            }
            assert_eq!(
                checkpoint_to_json(&full.checkpoint).unwrap(),
                checkpoint_to_json(&resumed.checkpoint).unwrap()
            );
        }
    }

    #[test]
    fn empty_eval_set_rejected() {
        let (train_set, _) = tiny_data();
        let empty = Dataset {
            images: Tensor::zeros(&[0, 1, 4, 4]),
            labels: vec![],
            classes: 3,
            split: "empty".into(),
        };
        let err = train(&tiny_config(), &train_set, &empty).unwrap_err();
        assert!(matches!(err, Error::EmptyInput { .. }));
    }

    #[test]
    fn class_count_mismatch_rejected() {
        let (train_set, _) = tiny_data();
        let other = synth_data(3, 20, 5, (1, 4, 4)).unwrap();
        let err = train(&tiny_config(), &train_set, &other).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }
}
