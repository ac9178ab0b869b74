//! Branch supervision, pose loss and the routed total objective, all built
//! on a tape so they can be differentiated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::{Tape, Tensor, Var};
use crate::posenet::{BranchVars, PoseVars};
use crate::scalar::Scalar;
use crate::synthdata::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cd: f64,
    pub lambda_div: f64,
    pub lambda_recon: f64,
    pub lambda_nocs: f64,
    pub lambda_main: f64,
    pub lambda_g: f64,
    /// Diversity margin, scene units.
    pub th: f64,
    /// Smooth-L1 transition.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cd: 3.0,
            lambda_div: 10.0,
            lambda_recon: 15.0,
            lambda_nocs: 3.0,
            lambda_main: 0.6,
            lambda_g: 1.0,
            th: 0.01,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_cd: 0.0,
            lambda_div: 0.0,
            lambda_recon: 0.0,
            lambda_nocs: 0.0,
            lambda_main: 0.0,
            lambda_g: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda_cd, self.lambda_div, self.lambda_recon, self.lambda_nocs, self.lambda_main, self.lambda_g];
        if l.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {l:?}")));
        }
        if !(self.th > 0.0 && self.th.is_finite()) || !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("th and beta must be positive".into()));
        }
        Ok(())
    }
}

fn constant_rows<T: Scalar>(t: &mut Tape<T>, rows: usize, row: &[f64]) -> Result<Var> {
    let data = (0..rows).flat_map(|_| row.iter().map(|&x| T::lit(x))).collect();
    Ok(t.constant(Tensor::new(vec![rows, row.len()], data)?))
}

/// Mean over keypoints of the squared distance to the nearest point.
pub fn chamfer_one_sided<T: Scalar>(t: &mut Tape<T>, p_kpt: Var, p: Var) -> Result<Var> {
    let d = t.pairwise_sq_distances(p_kpt, p)?;
    let m = t.min_axis(d, 1)?;
    t.mean_all(m)
}

/// Sum of the two directional mean nearest-neighbour squared distances.
pub fn chamfer_symmetric<T: Scalar>(t: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = t.pairwise_sq_distances(a, b)?;
    let ab = t.min_axis(d, 1)?;
    let ba = t.min_axis(d, 0)?;
    let ab = t.mean_all(ab)?;
    let ba = t.mean_all(ba)?;
    t.add(ab, ba)
}

/// Hinge on pairwise keypoint distance: `Σ_{i≠j} max(0, th − ‖p_i − p_j‖)`
/// averaged over the ordered pairs.
pub fn diversity_margin<T: Scalar>(t: &mut Tape<T>, p_kpt: Var, th: f64) -> Result<Var> {
    let k = t.value(p_kpt).rows();
    if k < 2 {
        return Err(Error::shape("diversity_margin", format!("need at least 2 keypoints, got {k}")));
    }
    let (mut is, mut js) = (Vec::with_capacity(k * (k - 1)), Vec::with_capacity(k * (k - 1)));
    for i in 0..k {
        for j in 0..k {
            if i != j {
                is.push(i);
                js.push(j);
            }
        }
    }
    let pi = t.gather_rows(p_kpt, &is)?;
    let pj = t.gather_rows(p_kpt, &js)?;
    let diff = t.sub(pi, pj)?;
    let dist = t.row_norm(diff)?;
    let th_c = constant_rows(t, is.len(), &[th])?;
    let gap = t.sub(th_c, dist)?;
    let hinge = t.max_with_zero(gap)?;
    t.mean_all(hinge)
}

/// Symmetric Chamfer between the decoded cloud and the observed points.
pub fn reconstruction_loss<T: Scalar>(t: &mut Tape<T>, decoded: Var, p: Var) -> Result<Var> {
    chamfer_symmetric(t, decoded, p)
}

/// Differentiable `nocs_of` applied to each keypoint row.
pub fn nocs_target<T: Scalar>(t: &mut Tape<T>, p_kpt: Var, pose: &Pose) -> Result<Var> {
    if pose.s.iter().any(|&s| s <= 0.0) {
        return Err(Error::Numerical(format!("non-positive scale {:?}", pose.s)));
    }
    let k = t.value(p_kpt).rows();
    let neg_t = t.constant(Tensor::new(vec![1, 3], pose.t.map(|x| T::lit(-x)).to_vec())?);
    let centred = t.bias_add(p_kpt, neg_t)?;
    let r = t.constant(Tensor::new(vec![3, 3], pose.r.iter().flatten().map(|&x| T::lit(x)).collect())?);
    let rotated = t.matmul(centred, r)?;
    let inv_s = constant_rows(t, k, &pose.s.map(|s| 1.0 / s))?;
    t.mul(rotated, inv_s)
}

/// Smooth-L1 between predicted NOCS and the keypoints mapped through the
/// ground-truth inverse pose, averaged over all entries.
pub fn nocs_loss<T: Scalar>(t: &mut Tape<T>, nocs_pred: Var, p_kpt: Var, pose: &Pose, beta: f64) -> Result<Var> {
    let target = nocs_target(t, p_kpt, pose)?;
    let l = t.smooth_l1(nocs_pred, target, T::lit(beta))?;
    t.mean_all(l)
}

/// Individual branch terms, unweighted.
#[derive(Debug, Clone, Copy)]
pub struct BranchTerms {
    pub cd: Var,
    pub div: Var,
    pub recon: Var,
    pub nocs: Var,
}

pub fn branch_terms<T: Scalar>(t: &mut Tape<T>, out: &BranchVars, p: Var, pose: &Pose, w: &LossWeights) -> Result<BranchTerms> {
    Ok(BranchTerms {
        cd: chamfer_one_sided(t, out.kp.p_kpt, p)?,
        div: diversity_margin(t, out.kp.p_kpt, w.th)?,
        recon: reconstruction_loss(t, out.recon, p)?,
        nocs: nocs_loss(t, out.nocs, out.kp.p_kpt, pose, w.beta)?,
    })
}

/// Weighted combination `λ_cd L_cd + λ_div L_div + λ_recon L_recon + λ_nocs L_nocs`.
pub fn combine_branch<T: Scalar>(t: &mut Tape<T>, terms: &BranchTerms, w: &LossWeights) -> Result<Var> {
    let parts = [
        (terms.cd, w.lambda_cd),
        (terms.div, w.lambda_div),
        (terms.recon, w.lambda_recon),
        (terms.nocs, w.lambda_nocs),
    ];
    let mut acc: Option<Var> = None;
    for (v, lambda) in parts {
        let s = t.scalar_mul(v, T::lit(lambda))?;
        acc = Some(match acc {
            Some(a) => t.add(a, s)?,
            None => s,
        });
    }
    Ok(acc.expect("four terms"))
}

pub fn branch_loss<T: Scalar>(t: &mut Tape<T>, out: &BranchVars, p: Var, pose: &Pose, w: &LossWeights) -> Result<Var> {
    let terms = branch_terms(t, out, p, pose, w)?;
    combine_branch(t, &terms, w)
}

fn l2_of_difference<T: Scalar>(t: &mut Tape<T>, a: Var, target: &[f64]) -> Result<Var> {
    let n = t.value(a).len();
    let flat = t.reshape(a, 1, n)?;
    let c = t.constant(Tensor::new(vec![1, n], target.iter().map(|&x| T::lit(x)).collect())?);
    let d = t.sub(flat, c)?;
    t.row_norm(d)
}

/// `‖R − R_gt‖_F + ‖t − t_gt‖ + ‖s − s_gt‖`.
pub fn main_loss<T: Scalar>(t: &mut Tape<T>, pred: &PoseVars, gt: &Pose) -> Result<Var> {
    let r_gt: Vec<f64> = gt.r.iter().flatten().copied().collect();
    let lr = l2_of_difference(t, pred.r, &r_gt)?;
    let lt = l2_of_difference(t, pred.t, &gt.t)?;
    let ls = l2_of_difference(t, pred.s, &gt.s)?;
    let a = t.add(lr, lt)?;
    t.add(a, ls)
}

/// `λ_main · main + λ_g · branch`.
pub fn total_loss<T: Scalar>(t: &mut Tape<T>, main: Var, branch: Var, w: &LossWeights) -> Result<Var> {
    let m = t.scalar_mul(main, T::lit(w.lambda_main))?;
    let b = t.scalar_mul(branch, T::lit(w.lambda_g))?;
    t.add(m, b)
}

/// Every loss node of one routed instance.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub forward: crate::posenet::Forward,
    pub terms: BranchTerms,
    pub branch: Var,
    pub main: Var,
    pub total: Var,
}

/// Forward pass through branch `g` followed by the total objective.
pub fn instance_objective<T: Scalar>(
    model: &crate::posenet::PoseNet<T>,
    t: &mut Tape<T>,
    v: &[Var],
    points: &[crate::geom::Vec3],
    pose: &Pose,
    g: usize,
    w: &LossWeights,
) -> Result<Objective> {
    let forward = model.forward(t, v, points, g)?;
    let terms = branch_terms(t, &forward.branch, forward.p, pose, w)?;
    let branch = combine_branch(t, &terms, w)?;
    let main = main_loss(t, &forward.pose, pose)?;
    let total = total_loss(t, main, branch, w)?;
    Ok(Objective { forward, terms, branch, main, total })
}
