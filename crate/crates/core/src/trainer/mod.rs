//! Joint training with fixed routing, checkpoints and evaluation.

mod checkpoint;
mod eval;
mod optim;
mod pilot;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grouping::{build_routing, compute_difficulty, random_routing, read_difficulty, RoutingTable};
use crate::losses::{instance_objective, LossWeights};
use crate::numgrad::{Gradients, Tape};
use crate::posenet::{Capacity, ModelConfig, PoseNet};
use crate::synthdata::Instance;

pub use checkpoint::{
    checkpoint_path, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, Manifest,
    TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use eval::{evaluate, evaluate_errors, pose_errors, CategoryEval, EvalReport, Predictor, RoutedModel, Thresholds};
pub use optim::{adam_step, cyclic_lr, AdamConfig, StepDelta};
pub use pilot::{PilotRunner, PILOT_EPOCHS, PILOT_FRACTION};

/// Independent seed for stream `tag`, item `index` of a master seed.
pub fn stream_seed(master: u64, tag: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TAG_INIT: u64 = 1;
const TAG_EPOCH: u64 = 2;
pub(crate) const TAG_RANDOM_ROUTING: u64 = 3;
pub(crate) const TAG_PILOT: u64 = 4;

/// Model widths; branch count and capacities come from the routing table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub d: usize,
    pub k_kpt: usize,
    pub k_n: usize,
    pub heads: usize,
    pub encoder_hidden: usize,
    pub head_hidden: usize,
    pub recon_points: usize,
}

impl ModelShape {
    pub fn desk(n: usize) -> Self {
        Self::from_config(&ModelConfig::desk(n, vec![Capacity::H]))
    }

    pub fn tiny() -> Self {
        Self::from_config(&ModelConfig::tiny(vec![Capacity::H]))
    }

    fn from_config(c: &ModelConfig) -> Self {
        Self {
            d: c.d,
            k_kpt: c.k_kpt,
            k_n: c.k_n,
            heads: c.heads,
            encoder_hidden: c.encoder_hidden,
            head_hidden: c.head_hidden,
            recon_points: c.recon_points,
        }
    }

    pub fn model_config(&self, alpha: Vec<Capacity>) -> ModelConfig {
        ModelConfig {
            d: self.d,
            k_kpt: self.k_kpt,
            g: alpha.len(),
            alpha,
            k_n: self.k_n,
            heads: self.heads,
            encoder_hidden: self.encoder_hidden,
            head_hidden: self.head_hidden,
            recon_points: self.recon_points,
        }
    }
}

/// Where the category-to-branch routing comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RoutingSource {
    /// Fully shared baseline: one high-capacity branch.
    None,
    /// A routing JSON written by the grouping step.
    File { path: PathBuf },
    /// Random groups with quantile sizes; `difficulty` is a JSON of rates.
    Random { difficulty: PathBuf },
    Quantile { difficulty: PathBuf },
    QuantileRefine { difficulty: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub lr_min: f64,
    pub lr_max: f64,
    /// Steps per full triangle.
    pub cycle: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { lr_min: 2e-5, lr_max: 5e-4, cycle: 600 }
    }
}

impl LrSchedule {
    /// Four times the default range. The desk budget of 30 short epochs
    /// learns rotation too slowly at the default rates.
    pub fn desk() -> Self {
        Self { lr_min: 8e-5, lr_max: 2e-3, cycle: 600 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Schema version, must be 1.
    pub v: u32,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    pub model: ModelShape,
    #[serde(default)]
    pub loss: LossWeights,
    pub routing: RoutingSource,
    /// Group count for quantile and random routing.
    #[serde(default = "default_g")]
    pub g: usize,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub lr: LrSchedule,
    #[serde(default)]
    pub adam: AdamConfig,
    pub seed: u64,
    /// Evaluate on the test split every this many epochs (0 disables).
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub thresholds: Thresholds,
}

fn default_g() -> usize {
    3
}

impl TrainConfig {
    pub fn new(n: usize, routing: RoutingSource, seed: u64) -> Self {
        Self {
            v: 1,
            dataset: None,
            model: ModelShape::desk(n),
            loss: LossWeights::default(),
            routing,
            g: default_g(),
            epochs: 30,
            batch_size: 16,
            lr: LrSchedule::default(),
            adam: AdamConfig::default(),
            seed,
            eval_every: 0,
            thresholds: Thresholds::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.v != 1 {
            return Err(Error::Config(format!("unsupported config version {}", self.v)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        let lr = &self.lr;
        if !(lr.lr_min > 0.0 && lr.lr_min < lr.lr_max && lr.lr_max.is_finite()) || lr.cycle < 2 {
            return Err(Error::Config(format!("invalid learning-rate schedule {lr:?}")));
        }
        self.adam.validate()?;
        self.loss.validate()?;
        self.thresholds.validate()?;
        self.model.model_config(vec![Capacity::H]).validate()
    }

    /// SHA-256 of the canonical JSON form, lowercase hex.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Builds the routing table the config asks for. Pilot-refined routing
/// trains short pilot models on `train_set`.
pub fn resolve_routing(cfg: &TrainConfig, k: usize, train_set: &[Instance]) -> Result<RoutingTable> {
    let table = match &cfg.routing {
        RoutingSource::None => RoutingTable::shared(k),
        RoutingSource::File { path } => RoutingTable::read(path)?,
        RoutingSource::Random { difficulty } => {
            let d = compute_difficulty(&read_difficulty(difficulty)?, k)?;
            let mut t = random_routing(&d, cfg.g, stream_seed(cfg.seed, TAG_RANDOM_ROUTING, 0))?;
            t.provenance.reference = difficulty.display().to_string();
            t
        }
        RoutingSource::Quantile { difficulty } => {
            let d = compute_difficulty(&read_difficulty(difficulty)?, k)?;
            build_routing(&d, cfg.g, None, &difficulty.display().to_string(), cfg.seed)?
        }
        RoutingSource::QuantileRefine { difficulty } => {
            let d = compute_difficulty(&read_difficulty(difficulty)?, k)?;
            let mut pilot = PilotRunner::new(cfg, &d, k, train_set)?;
            build_routing(&d, cfg.g, Some(&mut pilot), &difficulty.display().to_string(), cfg.seed)?
        }
    };
    table.validate(k)?;
    Ok(table)
}

/// What the observer sees after every optimizer step.
pub struct StepInfo<'a> {
    pub epoch: usize,
    /// Global step, starting at 0.
    pub step: usize,
    pub category: usize,
    pub group: usize,
    pub loss: f64,
    pub lr: f64,
    pub grads: &'a Gradients<f64>,
    pub deltas: &'a [StepDelta],
    pub model: &'a PoseNet<f64>,
}

pub type Observer<'a> = dyn FnMut(&StepInfo) -> Result<()> + 'a;

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Run directory; checkpoints and `metrics.csv` are written here.
    pub out_dir: Option<PathBuf>,
    /// Test instances for periodic evaluation.
    pub eval_set: Option<&'a [Instance]>,
    pub observer: Option<Box<Observer<'a>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
    pub rates: Option<Vec<Option<f64>>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PoseNet<f64>,
    pub routing: RoutingTable,
    pub metrics: Vec<EpochMetrics>,
    pub checkpoints: Vec<PathBuf>,
    pub config_hash: String,
}

/// Single-category mini-batches for one epoch: each category's instances
/// are shuffled and chunked, then the batch list is shuffled.
pub fn epoch_batches(train_set: &[Instance], k: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, TAG_EPOCH, epoch as u64));
    let mut batches = Vec::new();
    for c in 0..k {
        let mut idx: Vec<usize> = (0..train_set.len()).filter(|&i| train_set[i].category == c).collect();
        idx.shuffle(&mut rng);
        batches.extend(idx.chunks(batch_size).map(|b| b.to_vec()));
    }
    batches.shuffle(&mut rng);
    batches
}

/// Mean total loss over a single-category batch on one tape.
pub fn batch_loss(
    model: &PoseNet<f64>,
    tape: &mut Tape<f64>,
    batch: &[&Instance],
    group: usize,
    w: &LossWeights,
) -> Result<crate::numgrad::Var> {
    let v = tape.bind(&model.store);
    let mut sum = None;
    for inst in batch {
        let obj = instance_objective(model, tape, &v, &inst.observed, &inst.pose, group, w)?;
        sum = Some(match sum {
            None => obj.total,
            Some(s) => tape.add(s, obj.total)?,
        });
    }
    let sum = sum.ok_or_else(|| Error::Config("empty batch".into()))?;
    tape.scalar_mul(sum, 1.0 / batch.len() as f64)
}

pub fn new_model(cfg: &TrainConfig, routing: &RoutingTable) -> Result<PoseNet<f64>> {
    PoseNet::new(cfg.model.model_config(routing.alpha.clone()), stream_seed(cfg.seed, TAG_INIT, 0))
}

/// Trains from scratch under a fixed routing table.
pub fn train(
    cfg: &TrainConfig,
    k: usize,
    train_set: &[Instance],
    routing: &RoutingTable,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    routing.validate(k)?;
    if train_set.is_empty() {
        return Err(Error::MissingData("empty training split".into()));
    }
    if let Some(c) = train_set.iter().map(|i| i.category).find(|&c| c >= k) {
        return Err(Error::Routing(format!("instance of category {c} but routing covers {k}")));
    }
    let config_hash = cfg.hash()?;
    let mut model = new_model(cfg, routing)?;
    let ckpt_dir = opts.out_dir.as_ref().map(|d| d.join("checkpoints"));
    if let Some(d) = &ckpt_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::new();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let batches = epoch_batches(train_set, k, cfg.batch_size, cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr.lr_min;
        for idx in &batches {
            let batch: Vec<&Instance> = idx.iter().map(|&i| &train_set[i]).collect();
            let category = batch[0].category;
            let group = routing.gamma[category];
            let mut tape = Tape::new();
            let loss = batch_loss(&model, &mut tape, &batch, group, &cfg.loss)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}, step {step}")));
            }
            let grads = tape.backward(loss, &model.store)?;
            lr = cyclic_lr(step, cfg.lr.lr_min, cfg.lr.lr_max, cfg.lr.cycle);
            let deltas = adam_step(&mut model.store, &grads, lr, &cfg.adam);
            if let Some(obs) = opts.observer.as_mut() {
                obs(&StepInfo { epoch, step, category, group, loss: value, lr, grads: &grads, deltas: &deltas, model: &model })?;
            }
            loss_sum += value * batch.len() as f64;
            step += 1;
        }
        let mean_loss = loss_sum / train_set.len() as f64;
        let rates = match opts.eval_set {
            Some(set) if cfg.eval_every > 0 && epoch % cfg.eval_every == 0 => {
                let report = evaluate(&RoutedModel { model: &model, routing }, set, k, cfg.thresholds)?;
                Some(report.categories.iter().map(|c| c.rate).collect())
            }
            _ => None,
        };
        metrics.push(EpochMetrics { epoch, mean_loss, lr, rates });
        if let Some(d) = &ckpt_dir {
            let path = checkpoint_path(d, epoch);
            save_checkpoint(&path, &model, routing, epoch, &config_hash)?;
            checkpoints.push(path);
        }
        if let Some(d) = &opts.out_dir {
            write_metrics_csv(&d.join("metrics.csv"), &metrics, k)?;
        }
    }
    Ok(TrainOutcome { model, routing: routing.clone(), metrics, checkpoints, config_hash })
}

/// Writes `epoch,mean_loss,lr` plus `rate_c<i>` columns when any epoch was
/// evaluated; unevaluated cells are empty.
pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics], k: usize) -> Result<()> {
    let with_rates = metrics.iter().any(|m| m.rates.is_some());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["epoch".to_string(), "mean_loss".into(), "lr".into()];
    if with_rates {
        header.extend((0..k).map(|c| format!("rate_c{c}")));
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for m in metrics {
        let mut row = vec![m.epoch.to_string(), format!("{:e}", m.mean_loss), format!("{:e}", m.lr)];
        if with_rates {
            for c in 0..k {
                let cell = m.rates.as_ref().and_then(|r| r[c]).map(|x| x.to_string()).unwrap_or_default();
                row.push(cell);
            }
        }
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}
