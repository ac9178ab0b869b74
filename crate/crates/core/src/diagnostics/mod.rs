//! Checkpoint replay and gradient contention analysis.

mod analysis;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};

pub use analysis::*;

use crate::error::{Error, Result};
use crate::grouping::RoutingTable;
use crate::losses::LossWeights;
use crate::numgrad::{Block, Tape};
use crate::posenet::PoseNet;
use crate::synthdata::Instance;
use crate::trainer::{batch_loss, csv_err, load_checkpoint};

/// Default number of replay batches per category.
pub const DEFAULT_BATCHES_PER_CATEGORY: usize = 8;

/// Fixed replay subset: single-category batches of training indices, in
/// replay order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayPlan {
    pub batches: Vec<(usize, Vec<usize>)>,
}

impl ReplayPlan {
    /// Draws `per_category` batches of `batch_size` for every category by
    /// seeded sampling without replacement (with reuse only when the
    /// category is too small).
    pub fn sample(train_set: &[Instance], k: usize, per_category: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if per_category == 0 || batch_size == 0 {
            return Err(Error::Config("replay plan needs at least one batch of one instance".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut batches = Vec::with_capacity(k * per_category);
        for c in 0..k {
            let idx: Vec<usize> = (0..train_set.len()).filter(|&i| train_set[i].category == c).collect();
            if idx.is_empty() {
                return Err(Error::MissingData(format!("category {c} has no training instances for replay")));
            }
            let mut pool = Vec::new();
            for _ in 0..per_category {
                let mut b = Vec::with_capacity(batch_size);
                while b.len() < batch_size {
                    if pool.is_empty() {
                        pool = idx.clone();
                        pool.shuffle(&mut rng);
                    }
                    b.push(pool.pop().expect("refilled"));
                }
                batches.push((c, b));
            }
        }
        Ok(Self { batches })
    }

    pub fn counts(&self, k: usize) -> Vec<usize> {
        let mut n = vec![0; k];
        for (c, _) in &self.batches {
            if *c < k {
                n[*c] += 1;
            }
        }
        n
    }
}

/// Diagnostic parameter blocks of a model: `psi`, `phi` (every branch),
/// `omega`, plus `phi_<g>` per branch when there is more than one.
pub fn block_names(g: usize) -> Vec<String> {
    let mut names = vec!["psi".to_string(), "phi".into(), "omega".into()];
    if g > 1 {
        names.extend((1..=g).map(|i| format!("phi_{i}")));
    }
    names
}

fn in_block(name: &str, b: Block) -> bool {
    match (name, b) {
        ("psi", Block::Psi) | ("omega", Block::Omega) | ("phi", Block::Phi(_)) => true,
        (n, Block::Phi(g)) => n.strip_prefix("phi_").and_then(|s| s.parse::<usize>().ok()) == Some(g + 1),
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockGradients {
    pub block: String,
    /// Mean gradient of each category's batches.
    pub per_category: Vec<Vec<f64>>,
    /// Mean gradient over every batch of the other categories.
    pub complement: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryGradientTable {
    pub epoch: usize,
    pub k: usize,
    /// Batches per category in the replay.
    pub counts: Vec<usize>,
    pub blocks: Vec<BlockGradients>,
}

impl CategoryGradientTable {
    pub fn block(&self, name: &str) -> Option<&BlockGradients> {
        self.blocks.iter().find(|b| b.block == name)
    }
}

/// One forward and backward pass per planned batch at fixed parameters;
/// nothing is updated.
pub fn replay_collect(
    model: &PoseNet<f64>,
    routing: &RoutingTable,
    train_set: &[Instance],
    plan: &ReplayPlan,
    weights: &LossWeights,
    epoch: usize,
) -> Result<CategoryGradientTable> {
    let k = routing.gamma.len();
    let counts = plan.counts(k);
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::MissingData(format!("category {c} has no batch in the replay subset")));
    }
    let names = block_names(model.cfg.g);
    let mut batch_grads: Vec<(usize, Vec<Vec<f64>>)> = Vec::with_capacity(plan.batches.len());
    for (c, idx) in &plan.batches {
        if *c >= k {
            return Err(Error::Routing(format!("replay batch of category {c} but routing covers {k}")));
        }
        let batch: Vec<&Instance> = idx
            .iter()
            .map(|&i| train_set.get(i).ok_or_else(|| Error::MissingData(format!("replay index {i} out of range"))))
            .collect::<Result<_>>()?;
        if let Some(bad) = batch.iter().find(|i| i.category != *c) {
            return Err(Error::MissingData(format!("replay batch for category {c} holds category {}", bad.category)));
        }
        let mut tape = Tape::new();
        let loss = batch_loss(model, &mut tape, &batch, routing.gamma[*c], weights)?;
        let grads = tape.backward(loss, &model.store)?;
        let flat = names.iter().map(|n| grads.flatten(&model.store, |b| in_block(n, b))).collect();
        batch_grads.push((*c, flat));
    }
    let blocks = names
        .iter()
        .enumerate()
        .map(|(bi, name)| {
            let len = batch_grads[0].1[bi].len();
            let mean_over = |pick: &dyn Fn(usize) -> bool| {
                let mut sum = vec![0.0; len];
                let mut n = 0usize;
                for (c, flat) in &batch_grads {
                    if pick(*c) {
                        for (s, x) in sum.iter_mut().zip(&flat[bi]) {
                            *s += x;
                        }
                        n += 1;
                    }
                }
                sum.into_iter().map(|s| s / n as f64).collect::<Vec<f64>>()
            };
            BlockGradients {
                block: name.clone(),
                per_category: (0..k).map(|c| mean_over(&|x| x == c)).collect(),
                complement: (0..k).map(|c| mean_over(&|x| x != c)).collect(),
            }
        })
        .collect();
    Ok(CategoryGradientTable { epoch, k, counts, blocks })
}

fn ser_ratio<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*x)
    }
}

fn de_ratio<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum R {
        N(f64),
        S(String),
    }
    match R::deserialize(d)? {
        R::N(x) => Ok(x),
        R::S(s) if s == "inf" => Ok(f64::INFINITY),
        R::S(s) => Err(serde::de::Error::custom(format!("bad ratio {s:?}"))),
    }
}

/// Contention metrics of one block at one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: String,
    pub params: usize,
    /// Mean pairwise cosine over unordered defined pairs.
    pub mu_cc: Option<f64>,
    pub var_cc: Option<f64>,
    /// Pairs left out because a category gradient was zero.
    pub excluded_pairs: usize,
    /// `1 − S_ca(c)`.
    pub n_c: Vec<Option<f64>>,
    pub nbar: Option<f64>,
    pub s_cc: Vec<Vec<Option<f64>>>,
    pub s_ca: Vec<Option<f64>>,
    /// `inf` when the shared component vanishes.
    #[serde(serialize_with = "ser_ratio", deserialize_with = "de_ratio")]
    pub r_theta: f64,
    pub uv_residual: Vec<f64>,
    pub alpha: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
    pub rho_mean: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentionReport {
    pub epoch: usize,
    pub weighting: Weighting,
    pub blocks: Vec<BlockReport>,
}

impl ContentionReport {
    pub fn block(&self, name: &str) -> Option<&BlockReport> {
        self.blocks.iter().find(|b| b.block == name)
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn block_report(gs: &[Vec<f64>], counts: &[usize], name: &str, weighting: Weighting) -> Result<BlockReport> {
    let k = gs.len();
    let mut warnings = Vec::new();
    let mut s = vec![vec![None; k]; k];
    let mut pairs = Vec::new();
    let mut excluded = 0;
    for i in 0..k {
        for j in i..k {
            match s_cc(&gs[i], &gs[j]) {
                Ok(x) => {
                    let x = if i == j { 1.0 } else { x };
                    s[i][j] = Some(x);
                    s[j][i] = Some(x);
                    if i != j {
                        pairs.push(x);
                    }
                }
                Err(Error::Numerical(_)) => {
                    if i != j {
                        excluded += 1;
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }
    if excluded > 0 {
        warnings.push(format!("{excluded} category pairs excluded for zero gradients"));
    }
    let mu = mean(&pairs);
    let var = mu.map(|m| pairs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / pairs.len() as f64);
    let s_ca_v: Vec<Option<f64>> = (0..k)
        .map(|c| match s_ca(c, gs, weighting, counts) {
            Ok(x) => Ok(Some(x)),
            Err(Error::Numerical(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let n_c: Vec<Option<f64>> = s_ca_v.iter().map(|x| x.map(|v| 1.0 - v)).collect();
    let defined: Vec<f64> = n_c.iter().flatten().copied().collect();
    if defined.len() < k {
        warnings.push(format!("{} categories without a defined category-to-all score", k - defined.len()));
    }
    let dec = decompose(gs)?;
    let r_theta = heterogeneity_ratio(&dec.u, &dec.v);
    if r_theta.is_infinite() {
        warnings.push("shared gradient component is zero; heterogeneity ratio is infinite".into());
    }
    let forms = normalized_forms(&dec.u, &dec.v).ok();
    let rho_mean = forms.as_ref().and_then(|f| {
        let rs: Vec<f64> =
            (0..k).flat_map(|i| (i + 1..k).filter_map(move |j| f.rho_cc[i][j])).collect();
        mean(&rs)
    });
    Ok(BlockReport {
        block: name.to_string(),
        params: gs.first().map_or(0, Vec::len),
        mu_cc: mu,
        var_cc: var,
        excluded_pairs: excluded,
        nbar: mean(&defined),
        n_c,
        s_cc: s,
        s_ca: s_ca_v,
        r_theta,
        uv_residual: dec.uv,
        alpha: forms.as_ref().map(|f| f.alpha.clone()),
        beta: forms.as_ref().map(|f| f.beta.clone()),
        rho_mean,
        warnings,
    })
}

pub fn contention_stats(table: &CategoryGradientTable, weighting: Weighting) -> Result<ContentionReport> {
    let blocks = table
        .blocks
        .iter()
        .map(|b| block_report(&b.per_category, &table.counts, &b.block, weighting))
        .collect::<Result<_>>()?;
    Ok(ContentionReport { epoch: table.epoch, weighting, blocks })
}

/// Checkpoint files of a run directory in epoch order.
pub fn list_checkpoints(rundir: &Path) -> Result<Vec<PathBuf>> {
    let dir = rundir.join("checkpoints");
    let rd = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(&dir, e))?.path();
        if p.extension().is_some_and(|x| x == "ckpt") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DiagnoseOptions {
    pub subset_seed: u64,
    pub batches_per_category: usize,
    pub batch_size: usize,
    pub weighting: Weighting,
    pub loss: LossWeights,
    /// Only replay checkpoints whose epoch passes this filter.
    pub min_epoch: usize,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        Self {
            subset_seed: 11,
            batches_per_category: DEFAULT_BATCHES_PER_CATEGORY,
            batch_size: 16,
            weighting: Weighting::Uniform,
            loss: LossWeights::default(),
            min_epoch: 0,
        }
    }
}

/// Replays every checkpoint of a run on one fixed subset and writes the
/// reports to `out` when given.
pub fn diagnose_run(
    checkpoints: &[PathBuf],
    train_set: &[Instance],
    k: usize,
    opts: &DiagnoseOptions,
    out: Option<&Path>,
) -> Result<Vec<ContentionReport>> {
    let plan = ReplayPlan::sample(train_set, k, opts.batches_per_category, opts.batch_size, opts.subset_seed)?;
    let mut reports = Vec::new();
    for path in checkpoints {
        let ck = load_checkpoint(path)?;
        if ck.manifest.epoch < opts.min_epoch {
            continue;
        }
        ck.routing.validate(k)?;
        let table = replay_collect(&ck.model, &ck.routing, train_set, &plan, &opts.loss, ck.manifest.epoch)?;
        let report = contention_stats(&table, opts.weighting)?;
        if let Some(dir) = out {
            write_report(dir, &report)?;
        }
        reports.push(report);
    }
    if let Some(dir) = out {
        write_timeseries(&dir.join("timeseries.csv"), &reports)?;
    }
    Ok(reports)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_real).unwrap_or_default()
}

fn fmt_real(x: f64) -> String {
    if x.is_infinite() {
        "inf".into()
    } else {
        x.to_string()
    }
}

/// `report_epoch_NNNN.json` and one `scc_epoch_NNNN_<block>.csv` per block.
pub fn write_report(dir: &Path, report: &ContentionReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("report_epoch_{:04}.json", report.epoch));
    let json = serde_json::to_string_pretty(report)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    for b in &report.blocks {
        let path = dir.join(format!("scc_epoch_{:04}_{}.csv", report.epoch, b.block));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        let k = b.s_cc.len();
        let mut header = vec!["category".to_string()];
        header.extend((0..k).map(|c| format!("c{c}")));
        w.write_record(&header).map_err(|e| csv_err(&path, e))?;
        for (i, row) in b.s_cc.iter().enumerate() {
            let mut rec = vec![format!("c{i}")];
            rec.extend(row.iter().map(|x| fmt_opt(*x)));
            w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// `epoch,block,mu_cc,var_cc,nbar,r_theta`, one row per (epoch, block).
pub fn write_timeseries(path: &Path, reports: &[ContentionReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["epoch", "block", "mu_cc", "var_cc", "nbar", "r_theta"]).map_err(|e| csv_err(path, e))?;
    for r in reports {
        for b in &r.blocks {
            w.write_record([
                r.epoch.to_string(),
                b.block.clone(),
                fmt_opt(b.mu_cc),
                fmt_opt(b.var_cc),
                fmt_opt(b.nbar),
                fmt_real(b.r_theta),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Mean of a block metric over reports with `epoch > last − window`.
pub fn window_mean(reports: &[ContentionReport], block: &str, window: usize, f: impl Fn(&BlockReport) -> Option<f64>) -> Option<f64> {
    let last = reports.iter().map(|r| r.epoch).max()?;
    let xs: Vec<f64> = reports
        .iter()
        .filter(|r| r.epoch + window > last)
        .filter_map(|r| r.block(block).and_then(&f))
        .collect();
    mean(&xs)
}
