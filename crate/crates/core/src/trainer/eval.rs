use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{geodesic_deg, norm, sub};
use crate::grouping::RoutingTable;
use crate::posenet::{PoseNet, PosePrediction};
use crate::synthdata::{Instance, Pose};

/// Success thresholds: rotation in degrees, translation in scene units,
/// scale as a relative error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub rot_deg: f64,
    pub trans: f64,
    pub scale: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { rot_deg: 10.0, trans: 0.1, scale: 0.15 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if [self.rot_deg, self.trans, self.scale].iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Config(format!("thresholds must be >= 0, got {self:?}")));
        }
        Ok(())
    }

    /// Parses `"rot,trans,scale"`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("thresholds {s:?}: {e}")))?;
        let [rot_deg, trans, scale] = parts[..] else {
            return Err(Error::Config(format!("thresholds {s:?}: expected three comma-separated values")));
        };
        let t = Self { rot_deg, trans, scale };
        t.validate()?;
        Ok(t)
    }
}

pub trait Predictor {
    fn predict(&self, inst: &Instance) -> Result<PosePrediction>;
}

/// A model paired with the routing table that picks its branch.
pub struct RoutedModel<'a> {
    pub model: &'a PoseNet<f64>,
    pub routing: &'a RoutingTable,
}

impl Predictor for RoutedModel<'_> {
    fn predict(&self, inst: &Instance) -> Result<PosePrediction> {
        let g = *self
            .routing
            .gamma
            .get(inst.category)
            .ok_or_else(|| Error::Routing(format!("category {} is not routed", inst.category)))?;
        self.model.predict(&inst.observed, g)
    }
}

/// Rotation error in degrees, translation error, largest relative scale error.
pub fn pose_errors(pred: &PosePrediction, gt: &Pose) -> (f64, f64, f64) {
    let rot = geodesic_deg(&pred.r, &gt.r);
    let trans = norm(sub(pred.t, gt.t));
    let scale = (0..3).map(|i| ((pred.s[i] - gt.s[i]) / gt.s[i]).abs()).fold(0.0, f64::max);
    (rot, trans, scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEval {
    pub category: usize,
    pub count: usize,
    pub successes: usize,
    /// `None` when the split holds no instance of this category.
    pub rate: Option<f64>,
    pub mean_rot_deg: Option<f64>,
    pub mean_trans: Option<f64>,
    pub mean_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Thresholds,
    pub categories: Vec<CategoryEval>,
    /// Categories absent from the split.
    pub missing: Vec<usize>,
}

impl EvalReport {
    /// Mean rate over categories that were present.
    pub fn mean_rate(&self) -> f64 {
        let r: Vec<f64> = self.categories.iter().filter_map(|c| c.rate).collect();
        if r.is_empty() {
            return 0.0;
        }
        r.iter().sum::<f64>() / r.len() as f64
    }

    /// `{category: rate}` for present categories, as consumed by grouping.
    pub fn rates(&self) -> std::collections::BTreeMap<usize, f64> {
        self.categories.iter().filter_map(|c| c.rate.map(|r| (c.category, r))).collect()
    }
}

/// Pose errors of every instance, in order.
pub fn evaluate_errors(pred: &dyn Predictor, set: &[Instance]) -> Result<Vec<(f64, f64, f64)>> {
    set.iter().map(|inst| Ok(pose_errors(&pred.predict(inst)?, &inst.pose))).collect()
}

/// Success iff every error is strictly below its threshold.
pub fn evaluate(pred: &dyn Predictor, set: &[Instance], k: usize, th: Thresholds) -> Result<EvalReport> {
    th.validate()?;
    let mut acc = vec![(0usize, 0usize, 0.0, 0.0, 0.0); k];
    for inst in set {
        if inst.category >= k {
            return Err(Error::Routing(format!("instance of category {} with k={k}", inst.category)));
        }
        let p = pred.predict(inst)?;
        let (r, t, s) = pose_errors(&p, &inst.pose);
        if !(r.is_finite() && t.is_finite() && s.is_finite()) {
            return Err(Error::Numerical(format!("non-finite pose error for category {}", inst.category)));
        }
        let a = &mut acc[inst.category];
        a.0 += 1;
        a.1 += usize::from(r < th.rot_deg && t < th.trans && s < th.scale);
        a.2 += r;
        a.3 += t;
        a.4 += s;
    }
    let mut categories = Vec::with_capacity(k);
    let mut missing = Vec::new();
    for (c, &(n, ok, r, t, s)) in acc.iter().enumerate() {
        if n == 0 {
            missing.push(c);
        }
        let mean = |x: f64| (n > 0).then(|| x / n as f64);
        categories.push(CategoryEval {
            category: c,
            count: n,
            successes: ok,
            rate: mean(ok as f64),
            mean_rot_deg: mean(r),
            mean_trans: mean(t),
            mean_scale: mean(s),
        });
    }
    Ok(EvalReport { thresholds: th, categories, missing })
}
