use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{evaluate_errors, stream_seed, train, RoutedModel, TrainConfig, TrainOptions, TAG_PILOT};
use crate::error::Result;
use crate::grouping::{allocate_capacity, DifficultyTable, Pilot, Provenance, RoutingTable};
use crate::synthdata::Instance;

pub const PILOT_EPOCHS: usize = 3;
pub const PILOT_FRACTION: f64 = 0.25;
const HELD_OUT_PER_CATEGORY: usize = 25;

/// Boundary-refinement pilot: a short training run on a fixed quarter of
/// the training split, scored on held-out training instances of the
/// category under test. The score is the negated mean of the three pose
/// errors, each divided by its success threshold, so it stays informative
/// when short runs succeed on nothing.
pub struct PilotRunner {
    cfg: TrainConfig,
    d: DifficultyTable,
    k: usize,
    subset: Vec<Instance>,
    held_out: Vec<Instance>,
}

impl PilotRunner {
    pub fn new(cfg: &TrainConfig, d: &DifficultyTable, k: usize, train_set: &[Instance]) -> Result<Self> {
        let mut subset = Vec::new();
        let mut held_out = Vec::new();
        for c in 0..k {
            let mut idx: Vec<usize> = (0..train_set.len()).filter(|&i| train_set[i].category == c).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, TAG_PILOT, c as u64)));
            let n = ((idx.len() as f64 * PILOT_FRACTION).round() as usize).max(1).min(idx.len());
            subset.extend(idx[..n].iter().map(|&i| train_set[i].clone()));
            held_out.extend(idx[n..].iter().take(HELD_OUT_PER_CATEGORY).map(|&i| train_set[i].clone()));
        }
        let mut cfg = cfg.clone();
        cfg.epochs = PILOT_EPOCHS;
        cfg.eval_every = 0;
        cfg.seed = stream_seed(cfg.seed, TAG_PILOT, u64::MAX);
        Ok(Self { cfg, d: d.clone(), k, subset, held_out })
    }
}

impl Pilot for PilotRunner {
    fn score(&mut self, gamma: &[usize], category: usize) -> Result<f64> {
        let (alpha, _) = allocate_capacity(gamma, &self.d, self.cfg.g);
        let routing = RoutingTable {
            gamma: gamma.to_vec(),
            alpha,
            provenance: Provenance { method: "pilot".into(), ..Provenance::default() },
        };
        let out = train(&self.cfg, self.k, &self.subset, &routing, TrainOptions::default())?;
        let held: Vec<Instance> = self.held_out.iter().filter(|i| i.category == category).cloned().collect();
        let errs = evaluate_errors(&RoutedModel { model: &out.model, routing: &routing }, &held)?;
        let th = self.cfg.thresholds;
        let total: f64 = errs.iter().map(|(r, t, s)| r / th.rot_deg.max(1e-12) + t / th.trans.max(1e-12) + s / th.scale.max(1e-12)).sum();
        Ok(-total / (3.0 * errs.len().max(1) as f64))
    }
}
