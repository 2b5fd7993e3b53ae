//! Minibatch training over users with Adam, validation-based model
//! selection and checkpointing.
//!
//! Every user step draws its negatives and dropout masks from its own
//! stream keyed by `(seed, epoch, user)`, and per-user gradients are summed
//! in batch order, so results do not depend on the thread count.

mod adam;
mod checkpoint;

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{Catalog, DatasetSplit, Session};
use crate::error::{Error, Result};
use crate::eval::{evaluate_cases, CutoffMetrics, EvalCase, EvalReport, DEFAULT_CUTOFFS};
use crate::model::{Model, ModelConfig};
use crate::nn::ForwardCtx;
use crate::objective::{sequence_loss, LossConfig};
use crate::params::Gradients;

pub use adam::{Adam, BETA1, BETA2, EPSILON};
pub use checkpoint::{config_hash, hex_digest, Checkpoint, FORMAT_VERSION, MAGIC};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Fraction of users whose last training session is held out for
    /// validation.
    pub val_fraction: f64,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
    pub model: ModelConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 0.001,
            epochs: 200,
            optimizer: Optimizer::Adam,
            seed: 42,
            val_fraction: 0.1,
            eval_every: 1,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate = {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction = {} outside [0, 1)", self.val_fraction)));
        }
        self.model.validate()?;
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Summed loss over all supervised positives, the optimized quantity.
    pub loss_sum: f64,
    /// Loss per positive.
    pub loss: f64,
    pub retrieval: f64,
    pub rank: f64,
    pub positives: usize,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<Vec<CutoffMetrics>>,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Stable digest of a split's statistics and catalog size.
pub fn dataset_hash(split: &DatasetSplit) -> String {
    let stats = serde_json::to_string(&split.stats).expect("stats serialize");
    hex_digest(format!("{}|{stats}", split.catalog_size).as_bytes())
}

fn user_stream(seed: u64, epoch: usize, user: usize, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(((epoch as u64) << 32) | user as u64);
    rng
}

const NEGATIVES_SALT: u64 = 0x6e65_6761_7469_7665;
const DROPOUT_SALT: u64 = 0x6472_6f70_6f75_7421;
const SHUFFLE_SALT: u64 = 0x7368_7566_666c_6521;

/// One user's training sequence and, for validation users, a held-out case.
struct Example<'a> {
    user: usize,
    train: &'a [Session],
    validation: Option<(&'a [Session], Vec<u32>)>,
}

fn examples<'a>(split: &'a DatasetSplit, cfg: &TrainConfig) -> Vec<Example<'a>> {
    let n = split.users.len();
    let want = if cfg.eval_every == 0 {
        0
    } else {
        ((n as f64) * cfg.val_fraction).ceil() as usize
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT));
    let mut held = vec![false; n];
    for &u in order.iter().filter(|&&u| split.users[u].train.len() >= 2).take(want) {
        held[u] = true;
    }
    split
        .users
        .iter()
        .enumerate()
        .map(|(u, us)| {
            if held[u] {
                let (ctx, last) = us.train.split_at(us.train.len() - 1);
                Example {
                    user: u,
                    train: ctx,
                    validation: Some((ctx, last[0].positives().collect())),
                }
            } else {
                Example {
                    user: u,
                    train: &us.train,
                    validation: None,
                }
            }
        })
        .collect()
}

struct StepResult {
    grads: Gradients<f32>,
    loss: f64,
    retrieval: f64,
    rank: f64,
    positives: usize,
}

fn user_step(model: &Model<f32>, cfg: &TrainConfig, epoch: usize, ex: &Example<'_>) -> Result<Option<StepResult>> {
    let mut neg_rng = user_stream(cfg.seed, epoch, ex.user, NEGATIVES_SALT);
    let mut drop_rng = user_stream(cfg.seed, epoch, ex.user, DROPOUT_SALT);
    let mut ctx = ForwardCtx::train(&mut drop_rng, model.config.sse.dropout);
    let mut g = Graph::new(&model.params);
    let Some(parts) = sequence_loss(model, &mut g, ex.train, &cfg.loss, &mut neg_rng, &mut ctx)? else {
        return Ok(None);
    };
    let grads = g.backward(parts.total)?;
    Ok(Some(StepResult {
        grads,
        loss: g.value(parts.total).item() as f64,
        retrieval: g.value(parts.retrieval).item() as f64,
        rank: g.value(parts.rank).item() as f64,
        positives: parts.num_positives,
    }))
}

fn validate(model: &Model<f32>, examples: &[Example<'_>]) -> Result<Option<Vec<CutoffMetrics>>> {
    let cases: Vec<EvalCase<'_>> = examples
        .iter()
        .filter_map(|e| e.validation.as_ref())
        .map(|(ctx, targets)| EvalCase { context: ctx, targets })
        .collect();
    if cases.is_empty() {
        return Ok(None);
    }
    let users = evaluate_cases(model, &cases, &DEFAULT_CUTOFFS)?;
    let report = EvalReport::from_users(crate::data::Protocol::LeaveOneSessionOut, &DEFAULT_CUTOFFS, &users, "");
    Ok(Some(report.metrics))
}

/// Lexicographic selection key: Recall@500, then NDCG@10, then Recall@10.
fn selection_key(metrics: &[CutoffMetrics]) -> [f64; 3] {
    let get = |k: usize, f: fn(&CutoffMetrics) -> f64| metrics.iter().find(|m| m.k == k).map_or(0.0, f);
    [get(500, |m| m.recall), get(10, |m| m.ndcg), get(10, |m| m.recall)]
}

/// Trains on every user's training view. Runs on the current rayon pool;
/// `on_epoch` sees each epoch's log as soon as it is complete.
pub fn train(
    split: &DatasetSplit,
    catalog: &Catalog,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.users.is_empty() {
        return Err(Error::Degenerate("no users to train on".into()));
    }
    if catalog.len() != split.catalog_size {
        return Err(Error::ConfigMismatch {
            field: "catalog_size".into(),
            expected: split.catalog_size.to_string(),
            found: catalog.len().to_string(),
        });
    }
    let data_hash = dataset_hash(split);
    let mut model: Model<f32> = Model::new(cfg.model.clone(), catalog, cfg.seed)?;
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let examples = examples(split, cfg);
    info!(
        "training {} users ({} validation), {} parameters",
        examples.len(),
        examples.iter().filter(|e| e.validation.is_some()).count(),
        model.params.num_values()
    );

    let mut best: Option<([f64; 3], Checkpoint)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut retrieval, mut rank, mut positives) = (0.0, 0.0, 0.0, 0usize);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<Option<StepResult>>> = chunk
                .par_iter()
                .map(|&i| user_step(&model, cfg, epoch, &examples[i]))
                .collect();
            let mut grads = Gradients::new();
            let mut batch_loss = 0.0;
            for r in results {
                if let Some(step) = r? {
                    grads.merge(step.grads);
                    batch_loss += step.loss;
                    retrieval += step.retrieval;
                    rank += step.rank;
                    positives += step.positives;
                }
            }
            if !batch_loss.is_finite() || !grads.global_norm().is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch,
                    param_norm: model.params.global_norm(),
                });
            }
            loss_sum += batch_loss;
            if !grads.is_empty() {
                adam.update(&mut model.params, &grads);
            }
        }
        let per = positives.max(1) as f64;
        let validation = if cfg.eval_every > 0 && epoch % cfg.eval_every == 0 {
            validate(&model, &examples)?
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            loss_sum,
            loss: loss_sum / per,
            retrieval: retrieval / per,
            rank: rank / per,
            positives,
            seconds: started.elapsed().as_secs_f64(),
            validation,
        };
        debug!("epoch {epoch}: loss {:.5} ({:.2}s)", entry.loss, entry.seconds);
        if let Some(v) = &entry.validation {
            let key = selection_key(v);
            if best.as_ref().is_none_or(|(b, _)| key > *b) {
                best = Some((key, Checkpoint::from_model(&model, cfg, &data_hash, epoch, Some(&adam))));
            }
        }
        on_epoch(&entry);
        log.push(entry);
    }
    let last = Checkpoint::from_model(&model, cfg, &data_hash, cfg.epochs, Some(&adam));
    let best = best.map_or_else(|| last.clone(), |(_, c)| c);
    let model = best.model()?;
    Ok(TrainOutcome { model, best, last, log })
}

impl TrainOutcome {
    /// Writes `best.ckpt`, `last.ckpt` and `metrics.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.best.save(&dir.join("best.ckpt"))?;
        self.last.save(&dir.join("last.ckpt"))?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?);
        for entry in &self.log {
            writeln!(f, "{}", serde_json::to_string(entry)?)?;
        }
        f.flush()?;
        Ok(())
    }
}
