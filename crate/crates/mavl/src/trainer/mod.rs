//! Deterministic training loop wiring corpus, model, and losses, with
//! head-mode ablation switches, checkpointing, early stopping, and a
//! JSON-lines step log.
//!
//! Determinism contract: per-sample gradients are computed in parallel but
//! reduced in sample order, every random stream is derived statelessly from
//! `(seed, epoch)`, and checkpoints capture the full optimizer state, so
//! identical seeds give bit-identical checkpoints and an interrupted run
//! resumed from its last checkpoint equals the uninterrupted one.

pub mod ablate;

use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::corpus::split::{load_split, LoadedSample, SplitKind};
use crate::corpus::{CorpusError, MultiLabelTarget};
use crate::eval::{evaluate_samples, EvalConfig, EvalError, HeadChoice};
use crate::kb::{KbError, KnowledgeBase, HEALTHY_NAME};
use crate::losses::{self, LossWeights, PositiveSet};
use crate::model::checkpoint::{self, Checkpoint};
use crate::model::graph;
use crate::model::{AspectQuerySet, Model, ModelConfig, ModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad training config: {0}")]
    Config(String),
    #[error("loss became non-finite at step {step}")]
    NaNLoss { step: u64 },
    #[error("checkpoint config hash {got} does not match current config {expected}")]
    ConfigMismatch { expected: String, got: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    Dual,
    ContrastiveOnly,
    SupervisedOnly,
}

impl HeadMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dual" => Some(HeadMode::Dual),
            "contrastive-only" | "con" | "single-con" => Some(HeadMode::ContrastiveOnly),
            "supervised-only" | "sup" | "single-sup" => Some(HeadMode::SupervisedOnly),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

/// Full training configuration, including the model dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub weights: LossWeights,
    pub head_mode: HeadMode,
    /// Early-stopping patience in epochs without validation improvement.
    pub patience: usize,
    /// Query positions per disease (aspect-count ablation); `0` means the
    /// knowledge base's full set.
    pub aspect_count: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 2e-3,
            schedule: Schedule::Cosine,
            seed: 1,
            weights: LossWeights::default(),
            head_mode: HeadMode::Dual,
            patience: 5,
            aspect_count: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if !(self.weights.alpha >= 0.0 && self.weights.beta >= 0.0 && self.weights.gamma >= 0.0) {
            return Err(TrainError::Config("loss weights must be non-negative".into()));
        }
        match self.head_mode {
            HeadMode::Dual if self.weights.alpha == 0.0 && self.weights.beta == 0.0 => {
                Err(TrainError::Config("dual mode needs a non-zero loss weight".into()))
            }
            HeadMode::ContrastiveOnly if self.weights.alpha == 0.0 => {
                Err(TrainError::Config("contrastive-only mode needs alpha > 0".into()))
            }
            HeadMode::SupervisedOnly if self.weights.beta == 0.0 => {
                Err(TrainError::Config("supervised-only mode needs beta > 0".into()))
            }
            _ => Ok(()),
        }
    }

    /// Mode-forced loss weights: single-head modes zero out the other
    /// pathway's terms.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        match self.head_mode {
            HeadMode::Dual => {}
            HeadMode::ContrastiveOnly => {
                w.beta = 0.0;
                w.gamma = 0.0;
            }
            HeadMode::SupervisedOnly => {
                w.alpha = 0.0;
            }
        }
        w
    }

    /// Resolve the model for a given knowledge base: query positions default
    /// to the KB's full set, the classifier shape follows, and the model
    /// carries the same temperature the losses train with.
    pub fn resolved_model_config(&self, kb: &KnowledgeBase) -> ModelConfig {
        let mut model = self.model.clone();
        model.query_positions =
            if self.aspect_count == 0 { kb.query_len() } else { self.aspect_count.min(kb.query_len()) };
        model.init_seed = self.seed;
        model.tau = self.weights.tau;
        model
    }

    /// Hash of the canonical JSON form; resuming checks it.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
    }
}

/// One JSON-lines record per optimizer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub l_cl: f64,
    pub l_sup: f64,
    pub l_loc: f64,
    pub total: f64,
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>, TrainError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Config(format!("bad log line: {e}"))))
        .collect()
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub best_metric: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainMeta {
    kind: String,
    config_hash: String,
    config: TrainConfig,
    /// Model config after KB-dependent resolution (query positions, seed).
    model_config: ModelConfig,
    epoch: usize,
    step: u64,
    best_metric: f64,
    best_epoch: usize,
    epochs_without_improvement: usize,
    touched: Vec<String>,
    text_hash: String,
    rng_seed: u64,
}

struct AdamState {
    m: IndexMap<String, Array2<f64>>,
    v: IndexMap<String, Array2<f64>>,
    step: u64,
    touched: std::collections::BTreeSet<String>,
}

impl AdamState {
    fn new(model: &Model) -> Self {
        let zero =
            |m: &Model| -> IndexMap<String, Array2<f64>> {
                m.params.iter().map(|(n, a)| (n.clone(), Array2::zeros(a.dim()))).collect()
            };
        Self { m: zero(model), v: zero(model), step: 0, touched: Default::default() }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-sample forward/backward result.
struct SampleGrad {
    parts: [f64; 3],
    grads: Vec<(String, Array2<f64>)>,
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    weights: LossWeights,
    model: Model,
    kb: &'a KnowledgeBase,
    /// Knowledge-base indices of the training vocabulary.
    seen_kb_indices: Vec<usize>,
    query_sets: Vec<AspectQuerySet>,
    /// Contrastive vocabulary: every seen disease plus the reserved healthy
    /// entry (last row), which is the positive for lesion-free samples.
    aspect_embeddings: Array3<f64>,
    location_table: Array2<f64>,
    adam: AdamState,
    total_steps: u64,
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a TrainConfig, kb: &'a KnowledgeBase, n_train: usize) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = Model::new(cfg.resolved_model_config(kb))?;
        let seen = kb.seen_diseases();
        if seen.is_empty() {
            return Err(TrainError::Config("knowledge base has no seen diseases".into()));
        }
        let seen_kb_indices: Vec<usize> =
            seen.iter().map(|d| kb.disease_index(&d.name).unwrap()).collect();
        let query_sets: Vec<AspectQuerySet> = seen
            .iter()
            .map(|d| model.query_set(kb, &d.name))
            .collect::<Result<_, _>>()?;
        let q = model.config.query_positions;
        let d = model.config.dim;
        let healthy = model
            .query_set(kb, HEALTHY_NAME)
            .map_err(|_| TrainError::Config(format!("knowledge base lacks a {HEALTHY_NAME:?} entry")))?;
        let mut aspect_embeddings = Array3::<f64>::zeros((seen.len() + 1, q, d));
        for (j, set) in query_sets.iter().enumerate() {
            aspect_embeddings
                .index_axis_mut(ndarray::Axis(0), j)
                .assign(&set.embeddings);
        }
        aspect_embeddings
            .index_axis_mut(ndarray::Axis(0), seen.len())
            .assign(&healthy.embeddings);
        let location_table = model.location_table(kb)?;
        let steps_per_epoch = n_train.div_ceil(cfg.batch_size) as u64;
        let total_steps = steps_per_epoch * cfg.epochs as u64;
        let adam = AdamState::new(&model);
        Ok(Self {
            cfg,
            weights: cfg.effective_weights(),
            model,
            kb,
            seen_kb_indices,
            query_sets,
            aspect_embeddings,
            location_table,
            adam,
            total_steps,
        })
    }

    fn learning_rate(&self, step: u64) -> f64 {
        match self.cfg.schedule {
            Schedule::Constant => self.cfg.learning_rate,
            Schedule::Cosine => {
                let t = step as f64 / self.total_steps.max(1) as f64;
                self.cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    /// Positive set of a sample, in contrastive-vocabulary positions. A
    /// sample with no positively present disease is a positive example of
    /// the healthy category (the last vocabulary row).
    fn positives(&self, target: &MultiLabelTarget) -> PositiveSet {
        let mut indices: Vec<usize> = self
            .seen_kb_indices
            .iter()
            .enumerate()
            .filter_map(|(p, &j)| (target.presence[j] == 1).then_some(p))
            .collect();
        if indices.is_empty() {
            indices.push(self.seen_kb_indices.len());
        }
        PositiveSet { indices }
    }

    /// Located positives of a sample: (vocabulary position, location index).
    fn located(&self, target: &MultiLabelTarget) -> Vec<(usize, usize)> {
        self.seen_kb_indices
            .iter()
            .enumerate()
            .filter_map(|(p, &j)| target.location_index[j].map(|l| (p, l)))
            .collect()
    }

    /// Forward/backward for one sample. `cl_scale` and `flat_scale` fold the
    /// batch averaging into the per-sample total so gradients accumulate by
    /// plain summation.
    fn sample_grad(
        &self,
        sample: &LoadedSample,
        dropout_seed: u64,
        cl_scale: f64,
        flat_scale: f64,
    ) -> Result<SampleGrad, TrainError> {
        let mut tape = Tape::new();
        let bound = graph::bind_with_dropout(&mut tape, &self.model, true, Some(dropout_seed));
        let cells = graph::encode_cells(&mut tape, &bound, &sample.image);

        let mut parts = [0.0f64; 3];
        let mut terms: Vec<Var> = Vec::new();

        // contrastive pathway
        if self.weights.alpha > 0.0 {
            let positives = self.positives(&sample.target);
            if !positives.is_empty() {
                let pooled = graph::attention_pool(&mut tape, &bound, cells);
                let f_value = tape.value(pooled.feature).row(0).to_owned();
                let (value, grad) = losses::contrastive_loss(
                    f_value.view(),
                    &self.aspect_embeddings,
                    &positives,
                    self.weights.tau,
                )
                .expect("positive set checked non-empty");
                parts[0] = value;
                let grad_row = grad.insert_axis(ndarray::Axis(0));
                let cl = tape.custom_scalar(pooled.feature, value, grad_row);
                let scaled = tape.scale(cl, self.weights.alpha * cl_scale);
                terms.push(scaled);
            }
        }

        // supervised pathway: grounding, classification, location
        if self.weights.beta > 0.0 || self.weights.gamma > 0.0 {
            let kv = graph::precompute_kv(&mut tape, &bound, cells);
            let n = self.query_sets.len();
            let located = self.located(&sample.target);
            let loc_scale = if located.is_empty() { 0.0 } else { 1.0 / located.len() as f64 };

            let mut logit_vars = Vec::with_capacity(n);
            let mut loc_vars = Vec::with_capacity(n);
            let mut logit_values = Array2::<f64>::zeros((n, 2));
            for (p, set) in self.query_sets.iter().enumerate() {
                let grounded = graph::ground(&mut tape, &bound, &set.embeddings, cells, Some(&kv));
                let lg = graph::classify(&mut tape, &bound, grounded.features);
                let v = tape.value(lg);
                logit_values[(p, 0)] = v[(0, 0)];
                logit_values[(p, 1)] = v[(0, 1)];
                logit_vars.push(lg);
                loc_vars.push(grounded.location);
            }

            if self.weights.beta > 0.0 {
                let presence: Vec<u8> = self
                    .seen_kb_indices
                    .iter()
                    .map(|&j| sample.target.presence[j])
                    .collect();
                let mut reduced = MultiLabelTarget::empty(n);
                reduced.presence = presence;
                let (value, grad) = losses::supervised_loss(&logit_values, &reduced);
                parts[1] = value;
                for (p, &lg) in logit_vars.iter().enumerate() {
                    let grad_row = grad.row(p).to_owned().insert_axis(ndarray::Axis(0));
                    let row_loss =
                        losses::supervised_loss_row_value(logit_values.row(p), reduced.presence[p]);
                    let contribution = row_loss / n as f64;
                    let c = tape.custom_scalar(lg, contribution, grad_row);
                    let scaled = tape.scale(c, self.weights.beta * flat_scale);
                    terms.push(scaled);
                }
            }

            if self.weights.gamma > 0.0 && !located.is_empty() {
                let mut total = 0.0;
                for &(p, l) in &located {
                    let anchor = tape.value(loc_vars[p]).row(0).to_owned();
                    let (value, grad) =
                        losses::location_infonce(anchor.view(), &self.location_table, l, self.weights.tau);
                    total += value * loc_scale;
                    let grad_row = grad.insert_axis(ndarray::Axis(0)) * loc_scale;
                    let c = tape.custom_scalar(loc_vars[p], value * loc_scale, grad_row);
                    let scaled = tape.scale(c, self.weights.gamma * flat_scale);
                    terms.push(scaled);
                }
                parts[2] = total;
            }
        }

        if terms.is_empty() {
            return Ok(SampleGrad { parts, grads: Vec::new() });
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t);
        }
        let total_value = tape.scalar_value(total);
        if !total_value.is_finite() {
            return Err(TrainError::NaNLoss { step: self.adam.step });
        }

        let mut grads = tape.backward(total);
        let mut named = Vec::new();
        for (name, var) in bound.named_vars() {
            if let Some(g) = grads.take(var) {
                named.push((name, g));
            }
        }
        Ok(SampleGrad { parts, grads: named })
    }

    /// One optimizer step over a batch. Returns the logged record.
    fn step(&mut self, batch: &[&LoadedSample], epoch: usize) -> Result<LogRecord, TrainError> {
        let step = self.adam.step;
        let lr = self.learning_rate(step);
        let n_cl = if self.weights.alpha > 0.0 {
            batch.iter().filter(|s| !self.positives(&s.target).is_empty()).count()
        } else {
            0
        };
        let cl_scale = if n_cl == 0 { 0.0 } else { 1.0 / n_cl as f64 };
        let flat_scale = 1.0 / batch.len() as f64;

        let results: Result<Vec<SampleGrad>, TrainError> = batch
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let dropout_seed = mix(self.cfg.seed, step.wrapping_add(i as u64 * 0x1000));
                self.sample_grad(s, dropout_seed, cl_scale, flat_scale)
            })
            .collect();
        let results = results?;

        // ordered reduction by sample position
        let mut acc: IndexMap<String, Array2<f64>> = IndexMap::new();
        let mut parts = [0.0f64; 3];
        for r in &results {
            parts[0] += r.parts[0] * cl_scale;
            parts[1] += r.parts[1] * flat_scale;
            parts[2] += r.parts[2] * flat_scale;
            for (name, g) in &r.grads {
                match acc.get_mut(name) {
                    Some(a) => *a += g,
                    None => {
                        acc.insert(name.clone(), g.clone());
                    }
                }
            }
        }

        let total = losses::total_loss(&self.weights, parts[0], parts[1], parts[2]);
        if !total.is_finite() {
            return Err(TrainError::NaNLoss { step });
        }

        // Adam update in parameter registration order
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let names: Vec<String> = self.model.params.names().cloned().collect();
        for name in names {
            let grad = acc.get(&name);
            if grad.is_none() && !self.adam.touched.contains(&name) {
                continue;
            }
            self.adam.touched.insert(name.clone());
            let zero = Array2::zeros(self.model.params.get(&name).dim());
            let g = grad.unwrap_or(&zero);
            let m = self.adam.m.get_mut(&name).unwrap();
            let v = self.adam.v.get_mut(&name).unwrap();
            m.zip_mut_with(g, |mv, &gv| *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv);
            v.zip_mut_with(g, |vv, &gv| *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv);
            let (m, v) = (&self.adam.m[&name], &self.adam.v[&name]);
            let mut delta = Array2::zeros(m.dim());
            ndarray::Zip::from(&mut delta).and(m).and(v).for_each(|d, &mv, &vv| {
                *d = lr * (mv / bc1) / ((vv / bc2).sqrt() + ADAM_EPS);
            });
            self.model.params.update(&name, |p| *p -= &delta);
        }

        Ok(LogRecord {
            step,
            epoch,
            lr,
            l_cl: parts[0],
            l_sup: parts[1],
            l_loc: parts[2],
            total,
        })
    }

    /// Validation macro-AUC for early stopping: the supervised head in dual
    /// and supervised-only modes; the contrastive head when that is the only
    /// trained pathway.
    fn validation_metric(&self, valid: &[LoadedSample]) -> Result<f64, TrainError> {
        let head = match self.cfg.head_mode {
            HeadMode::ContrastiveOnly => HeadChoice::Contrastive,
            _ => HeadChoice::Supervised,
        };
        let cfg = EvalConfig {
            head,
            diseases: Some(
                self.kb.seen_diseases().iter().map(|d| d.name.clone()).collect(),
            ),
            ..EvalConfig::default()
        };
        let reports = evaluate_samples(&self.model, self.kb, valid, "valid", &cfg)?;
        Ok(reports[0].macro_auc)
    }

    fn checkpoint(&self, epoch: usize, best: (f64, usize), stale: usize) -> Checkpoint {
        let meta = TrainMeta {
            kind: "mavl-train-state".into(),
            config_hash: self.cfg.hash(),
            config: self.cfg.clone(),
            model_config: self.model.config.clone(),
            epoch,
            step: self.adam.step,
            best_metric: best.0,
            best_epoch: best.1,
            epochs_without_improvement: stale,
            touched: self.adam.touched.iter().cloned().collect(),
            text_hash: format!("{:016x}", self.model.text.parameter_hash()),
            rng_seed: self.cfg.seed,
        };
        let mut arrays = IndexMap::new();
        for (name, value) in self.model.params.iter() {
            arrays.insert(name.clone(), value.as_ref().clone());
        }
        for (name, value) in &self.adam.m {
            arrays.insert(format!("adam.m.{name}"), value.clone());
        }
        for (name, value) in &self.adam.v {
            arrays.insert(format!("adam.v.{name}"), value.clone());
        }
        Checkpoint { meta: serde_json::to_value(&meta).expect("meta serializes"), arrays }
    }

    fn restore(&mut self, ckpt: &Checkpoint, meta: &TrainMeta) -> Result<(), TrainError> {
        for (name, _) in self.model.params.iter().map(|(n, v)| (n.clone(), v.clone())).collect::<Vec<_>>() {
            let stored = ckpt
                .arrays
                .get(&name)
                .ok_or_else(|| TrainError::CorruptCheckpoint(format!("missing array {name:?}")))?;
            self.model.params.update(&name, |p| *p = stored.clone());
            let m = ckpt
                .arrays
                .get(&format!("adam.m.{name}"))
                .ok_or_else(|| TrainError::CorruptCheckpoint(format!("missing moment for {name:?}")))?;
            let v = ckpt
                .arrays
                .get(&format!("adam.v.{name}"))
                .ok_or_else(|| TrainError::CorruptCheckpoint(format!("missing moment for {name:?}")))?;
            self.adam.m.insert(name.clone(), m.clone());
            self.adam.v.insert(name.clone(), v.clone());
        }
        self.adam.step = meta.step;
        self.adam.touched = meta.touched.iter().cloned().collect();
        Ok(())
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic epoch shuffle.
fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(mix(seed, 0xE90C_0000 + epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Train from scratch. Writes `best.ckpt`, `last.ckpt`, and `train_log.jsonl`
/// under `out_dir`.
pub fn train(
    cfg: &TrainConfig,
    corpus_dir: &Path,
    kb: &KnowledgeBase,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train_log.jsonl");
    let log = std::fs::File::create(&log_path)?;
    run_loop(cfg, corpus_dir, kb, out_dir, None, log)
}

/// Resume from `last.ckpt`. The stored config hash must match `cfg`;
/// continuation is bitwise identical to the uninterrupted run.
pub fn resume(
    cfg: &TrainConfig,
    checkpoint_path: &Path,
    corpus_dir: &Path,
    kb: &KnowledgeBase,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    std::fs::create_dir_all(out_dir)?;
    let ckpt = checkpoint::load(checkpoint_path)
        .map_err(|e| TrainError::CorruptCheckpoint(e.to_string()))?;
    let meta: TrainMeta = serde_json::from_value(ckpt.meta.clone())
        .map_err(|e| TrainError::CorruptCheckpoint(format!("bad metadata: {e}")))?;
    if meta.config_hash != cfg.hash() {
        return Err(TrainError::ConfigMismatch { expected: cfg.hash(), got: meta.config_hash });
    }
    let log_path = out_dir.join("train_log.jsonl");
    let log = std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
    run_loop(cfg, corpus_dir, kb, out_dir, Some((ckpt, meta)), log)
}

fn run_loop(
    cfg: &TrainConfig,
    corpus_dir: &Path,
    kb: &KnowledgeBase,
    out_dir: &Path,
    resume_from: Option<(Checkpoint, TrainMeta)>,
    log: std::fs::File,
) -> Result<TrainOutcome, TrainError> {
    let train_set = load_split(corpus_dir, SplitKind::Train)?;
    let valid_set = load_split(corpus_dir, SplitKind::Valid)?;
    if train_set.is_empty() {
        return Err(TrainError::Config("empty training split".into()));
    }

    let mut trainer = Trainer::new(cfg, kb, train_set.len())?;
    let text_hash_before = trainer.model.text.parameter_hash();
    let mut log = std::io::BufWriter::new(log);

    let best_path = out_dir.join("best.ckpt");
    let last_path = out_dir.join("last.ckpt");

    let mut start_epoch = 0usize;
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut stale = 0usize;
    if let Some((ckpt, meta)) = resume_from {
        trainer.restore(&ckpt, &meta)?;
        start_epoch = meta.epoch;
        best_metric = meta.best_metric;
        best_epoch = meta.best_epoch;
        stale = meta.epochs_without_improvement;
    }

    let mut epochs_run = start_epoch;
    for epoch in start_epoch..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LoadedSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let record = trainer.step(&batch, epoch)?;
            serde_json::to_writer(&mut log, &record)
                .map_err(|e| TrainError::Config(format!("log write: {e}")))?;
            log.write_all(b"\n")?;
        }
        log.flush()?;
        epochs_run = epoch + 1;

        let metric = trainer.validation_metric(&valid_set)?;
        if metric > best_metric {
            best_metric = metric;
            best_epoch = epoch + 1;
            stale = 0;
            checkpoint::save(&best_path, &trainer.checkpoint(epoch + 1, (best_metric, best_epoch), stale))?;
        } else {
            stale += 1;
        }
        checkpoint::save(&last_path, &trainer.checkpoint(epoch + 1, (best_metric, best_epoch), stale))?;

        if stale >= cfg.patience {
            break;
        }
    }

    assert_eq!(
        trainer.model.text.parameter_hash(),
        text_hash_before,
        "frozen text tower must not change during training"
    );

    Ok(TrainOutcome {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        log_path: out_dir.join("train_log.jsonl"),
        best_metric,
        best_epoch,
        epochs_run,
    })
}

/// Load a trained model from a checkpoint written by [`train`].
pub fn load_model(checkpoint_path: &Path) -> Result<(Model, TrainConfig), TrainError> {
    let ckpt = checkpoint::load(checkpoint_path)
        .map_err(|e| TrainError::CorruptCheckpoint(e.to_string()))?;
    let meta: TrainMeta = serde_json::from_value(ckpt.meta.clone())
        .map_err(|e| TrainError::CorruptCheckpoint(format!("bad metadata: {e}")))?;
    let mut model = Model::new(meta.model_config.clone())?;
    for (name, _) in model.params.iter().map(|(n, v)| (n.clone(), v.clone())).collect::<Vec<_>>() {
        let stored = ckpt
            .arrays
            .get(&name)
            .ok_or_else(|| TrainError::CorruptCheckpoint(format!("missing array {name:?}")))?;
        model.params.update(&name, |p| *p = stored.clone());
    }
    Ok((model, meta.config))
}
