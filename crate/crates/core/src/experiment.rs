//! Paired multi-seed comparison of the shared baseline, difficulty-routed
//! branches and randomly routed branches on one dataset.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::{diagnose_run, list_checkpoints, window_mean, ContentionReport, DiagnoseOptions};
use crate::error::{Error, Result};
use crate::grouping::{write_difficulty, RoutingTable};
use crate::synthdata::{DataConfig, Dataset, Heterogeneity, PoseProfile};
use crate::trainer::{
    evaluate, resolve_routing, train, EvalReport, LrSchedule, RoutedModel, RoutingSource, TrainConfig, TrainOptions,
};

pub const BLOCKS: [&str; 3] = ["psi", "phi", "omega"];

/// Points per instance in the desk campaign.
pub const DESK_POINTS: usize = 256;

/// Graded six-category dataset with the narrow pose profile.
pub fn desk_data_config(seed: u64) -> DataConfig {
    let mut dc = DataConfig::new(6, DESK_POINTS, seed, Heterogeneity::Graded);
    dc.pose_profile = PoseProfile::narrow();
    dc
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    /// Template for every run; routing and seed are replaced per arm.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Trailing epochs averaged for the contention metrics.
    pub window: usize,
    pub diag: DiagnoseOptions,
    pub work_dir: PathBuf,
}

impl CampaignConfig {
    /// 30 epochs, batch 16, desk learning rates, G=3, five seeds and a
    /// ten-epoch window.
    pub fn desk(work_dir: impl Into<PathBuf>) -> Self {
        let mut train = TrainConfig::new(DESK_POINTS, RoutingSource::None, 0);
        train.lr = LrSchedule::desk();
        Self { train, seeds: vec![1, 2, 3, 4, 5], window: 10, diag: DiagnoseOptions::default(), work_dir: work_dir.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub mu_cc: Option<f64>,
    pub nbar: Option<f64>,
    pub r_theta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub arm: String,
    pub seed: u64,
    pub routing: RoutingTable,
    pub eval: EvalReport,
    /// Trailing-window contention per block; empty when not diagnosed.
    pub contention: BTreeMap<String, WindowStats>,
}

impl RunSummary {
    pub fn block(&self, name: &str) -> Result<WindowStats> {
        self.contention.get(name).copied().ok_or_else(|| Error::MissingData(format!("no contention for block {name}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Reference success rates that drove the routing.
    pub reference_rates: BTreeMap<usize, f64>,
    pub baseline: RunSummary,
    pub decomposed: RunSummary,
    pub random: RunSummary,
}

fn window_stats(reports: &[ContentionReport], window: usize) -> BTreeMap<String, WindowStats> {
    let names: Vec<String> = reports.first().map(|r| r.blocks.iter().map(|b| b.block.clone()).collect()).unwrap_or_default();
    names
        .into_iter()
        .map(|n| {
            let s = WindowStats {
                mu_cc: window_mean(reports, &n, window, |b| b.mu_cc),
                nbar: window_mean(reports, &n, window, |b| b.nbar),
                r_theta: window_mean(reports, &n, window, |b| Some(b.r_theta)),
            };
            (n, s)
        })
        .collect()
}

fn run_arm(
    cfg: &CampaignConfig,
    data: &Dataset,
    seed: u64,
    arm: &str,
    routing_src: RoutingSource,
    diagnose: bool,
) -> Result<(RunSummary, crate::posenet::PoseNet<f64>)> {
    let k = data.header.k;
    let train_set = data.split("train")?;
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    tc.routing = routing_src;
    let routing = resolve_routing(&tc, k, train_set)?;
    let dir = cfg.work_dir.join(format!("seed_{seed}")).join(arm);
    let out = train(&tc, k, train_set, &routing, TrainOptions { out_dir: Some(dir.clone()), ..Default::default() })?;
    let eval = evaluate(&RoutedModel { model: &out.model, routing: &routing }, data.split("test")?, k, tc.thresholds)?;
    let contention = if diagnose {
        let mut opts = cfg.diag.clone();
        opts.min_epoch = tc.epochs.saturating_sub(cfg.window) + 1;
        let reports = diagnose_run(&list_checkpoints(&dir)?, train_set, k, &opts, Some(&dir.join("diag")))?;
        window_stats(&reports, cfg.window)
    } else {
        BTreeMap::new()
    };
    Ok((RunSummary { arm: arm.into(), seed, routing, eval, contention }, out.model))
}

/// One seed of the comparison. The shared baseline doubles as the
/// reference estimator: its success rates on the training split give the
/// difficulty proxy for both routed arms.
pub fn run_seed(cfg: &CampaignConfig, data: &Dataset, seed: u64) -> Result<SeedResult> {
    let k = data.header.k;
    let seed_dir = cfg.work_dir.join(format!("seed_{seed}"));
    fs::create_dir_all(&seed_dir).map_err(|e| Error::io(&seed_dir, e))?;
    let (baseline, base_model) = run_arm(cfg, data, seed, "baseline", RoutingSource::None, true)?;
    let reference = evaluate(
        &RoutedModel { model: &base_model, routing: &baseline.routing },
        data.split("train")?,
        k,
        cfg.train.thresholds,
    )?;
    let reference_rates = reference.rates();
    let dpath = seed_dir.join("difficulty.json");
    write_difficulty(&dpath, &reference_rates)?;
    let (decomposed, _) =
        run_arm(cfg, data, seed, "decomposed", RoutingSource::QuantileRefine { difficulty: dpath.clone() }, true)?;
    let (random, _) = run_arm(cfg, data, seed, "random", RoutingSource::Random { difficulty: dpath }, false)?;
    let result = SeedResult { seed, reference_rates, baseline, decomposed, random };
    write_json(&seed_dir.join("summary.json"), &result)?;
    Ok(result)
}

impl SeedResult {
    /// Whether φ has the lowest μ_cc and the highest N̄ and r_θ of the
    /// three blocks in the baseline.
    pub fn phi_most_contended(&self) -> Result<bool> {
        let stats: Vec<WindowStats> = BLOCKS.iter().map(|b| self.baseline.block(b)).collect::<Result<_>>()?;
        let get = |f: fn(&WindowStats) -> Option<f64>| -> Result<Vec<f64>> {
            stats.iter().map(|s| f(s).ok_or_else(|| Error::MissingData("undefined window metric".into()))).collect()
        };
        let (mu, nbar, r) = (get(|s| s.mu_cc)?, get(|s| s.nbar)?, get(|s| s.r_theta)?);
        Ok(mu[1] < mu[0] && mu[1] < mu[2] && nbar[1] > nbar[0] && nbar[1] > nbar[2] && r[1] > r[0] && r[1] > r[2])
    }

    /// Whether the decomposed backbone has strictly higher μ_cc and strictly
    /// lower N̄ than the baseline backbone.
    pub fn backbone_relieved(&self) -> Result<bool> {
        let (b, d) = (self.baseline.block("psi")?, self.decomposed.block("psi")?);
        Ok(match (b.mu_cc, d.mu_cc, b.nbar, d.nbar) {
            (Some(bm), Some(dm), Some(bn), Some(dn)) => dm > bm && dn < bn,
            _ => false,
        })
    }
}

pub fn run_campaign(cfg: &CampaignConfig, data: &Dataset) -> Result<Vec<SeedResult>> {
    cfg.seeds.iter().map(|&s| run_seed(cfg, data, s)).collect()
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(path, e))
}
