//! Interaction metrics and the mean-plus-deviation decomposition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sq_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

fn is_zero(a: &[f64]) -> bool {
    a.iter().all(|&x| x == 0.0)
}

fn clamp_unit(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// `⟨a, b⟩ / (‖a‖‖b‖)` with one square root where the product of squared
/// norms is representable, so parallel inputs give exactly ±1.
fn cos_from(ab: f64, aa: f64, bb: f64) -> f64 {
    let p = aa * bb;
    let c = if p.is_normal() { ab / p.sqrt() } else { ab / (aa.sqrt() * bb.sqrt()) };
    clamp_unit(c)
}

/// Cosine similarity between two category gradients.
pub fn s_cc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("s_cc", format!("lengths {} and {}", a.len(), b.len())));
    }
    if is_zero(a) || is_zero(b) {
        return Err(Error::Numerical("cosine of a zero gradient vector is undefined".into()));
    }
    Ok(cos_from(dot(a, b), sq_norm(a), sq_norm(b)))
}

/// How the other categories are averaged into `g_¬c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Uniform,
    /// Weighted by each category's batch count.
    Frequency,
}

/// Weighted mean of every vector except `c`.
pub fn mean_of_others(c: usize, gs: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if gs.len() < 2 {
        return Err(Error::Config("need at least two categories".into()));
    }
    if weights.len() != gs.len() {
        return Err(Error::shape("mean_of_others", "one weight per category expected"));
    }
    let len = gs[0].len();
    let mut out = vec![0.0; len];
    let mut total = 0.0;
    for (j, g) in gs.iter().enumerate() {
        if j == c {
            continue;
        }
        if g.len() != len {
            return Err(Error::shape("mean_of_others", "unequal vector lengths"));
        }
        for (o, x) in out.iter_mut().zip(g) {
            *o += weights[j] * x;
        }
        total += weights[j];
    }
    if !(total > 0.0) {
        return Err(Error::Numerical("other categories carry no weight".into()));
    }
    for o in &mut out {
        *o /= total;
    }
    Ok(out)
}

fn weights_for(w: Weighting, n: usize, counts: &[usize]) -> Vec<f64> {
    match w {
        Weighting::Uniform => vec![1.0; n],
        Weighting::Frequency => counts.iter().map(|&n| n as f64).collect(),
    }
}

/// Cosine of `g_c` against the mean of the other categories. `counts` is
/// only read for frequency weighting.
pub fn s_ca(c: usize, gs: &[Vec<f64>], weighting: Weighting, counts: &[usize]) -> Result<f64> {
    let others = mean_of_others(c, gs, &weights_for(weighting, gs.len(), counts))?;
    s_cc(&gs[c], &others)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// Mean gradient over categories.
    pub u: Vec<f64>,
    /// Centred residuals `g_c − u`.
    pub v: Vec<Vec<f64>>,
    /// `⟨u, v_c⟩`, the orthogonality residual.
    pub uv: Vec<f64>,
}

pub fn decompose(gs: &[Vec<f64>]) -> Result<Decomposition> {
    let k = gs.len();
    if k == 0 {
        return Err(Error::Config("no category gradients".into()));
    }
    let len = gs[0].len();
    if gs.iter().any(|g| g.len() != len) {
        return Err(Error::shape("decompose", "unequal vector lengths"));
    }
    let u: Vec<f64> = (0..len).map(|i| gs.iter().map(|g| g[i]).sum::<f64>() / k as f64).collect();
    let v: Vec<Vec<f64>> = gs.iter().map(|g| g.iter().zip(&u).map(|(x, m)| x - m).collect()).collect();
    let uv = v.iter().map(|vc| dot(&u, vc)).collect();
    Ok(Decomposition { u, v, uv })
}

/// `mean_c ‖v_c‖² / ‖u‖²`; infinite when `u = 0` and some deviation is not.
pub fn heterogeneity_ratio(u: &[f64], v: &[Vec<f64>]) -> f64 {
    let mean = v.iter().map(|x| sq_norm(x)).sum::<f64>() / v.len().max(1) as f64;
    let uu = sq_norm(u);
    if uu == 0.0 {
        return if mean == 0.0 { 0.0 } else { f64::INFINITY };
    }
    mean / uu
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosedForm {
    /// Keeps every `⟨u, v⟩` cross term.
    Exact,
    /// Drops the cross terms.
    Approx,
}

/// Cosine of `u + a` and `u + b` evaluated from inner products.
pub fn closed_form_pair(u: &[f64], a: &[f64], b: &[f64], mode: ClosedForm) -> f64 {
    let uu = sq_norm(u);
    let ab = dot(a, b);
    let (aa, bb) = (sq_norm(a), sq_norm(b));
    let (ua, ub) = match mode {
        ClosedForm::Exact => (dot(u, a), dot(u, b)),
        ClosedForm::Approx => (0.0, 0.0),
    };
    (uu + ua + ub + ab) / ((uu + 2.0 * ua + aa).sqrt() * (uu + 2.0 * ub + bb).sqrt())
}

pub fn closed_form_scc(u: &[f64], vc: &[f64], vc2: &[f64], mode: ClosedForm) -> f64 {
    closed_form_pair(u, vc, vc2, mode)
}

/// Category-to-all analog; `v_not_c` is the mean deviation of the others.
pub fn closed_form_sca(u: &[f64], vc: &[f64], v_not_c: &[f64], mode: ClosedForm) -> f64 {
    closed_form_pair(u, vc, v_not_c, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedForms {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Deviation correlations; `None` on the diagonal or for a zero deviation.
    pub rho_cc: Vec<Vec<Option<f64>>>,
    pub rho_c_not_c: Vec<Option<f64>>,
    /// Rewritten-form predictions of the pairwise and category-to-all cosines.
    pub pred_scc: Vec<Vec<f64>>,
    pub pred_sca: Vec<f64>,
}

fn correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    let (aa, bb) = (sq_norm(a), sq_norm(b));
    (aa > 0.0 && bb > 0.0).then(|| cos_from(dot(a, b), aa, bb))
}

fn rewritten(rho: Option<f64>, a: f64, b: f64) -> f64 {
    (1.0 + rho.unwrap_or(0.0) * (a * b).sqrt()) / ((1.0 + a) * (1.0 + b)).sqrt()
}

/// Normalized deviation magnitudes, correlations and the predictions they
/// give. `v_¬c` is the uniform mean of the other deviations.
pub fn normalized_forms(u: &[f64], v: &[Vec<f64>]) -> Result<NormalizedForms> {
    let k = v.len();
    let uu = sq_norm(u);
    if uu == 0.0 {
        return Err(Error::Numerical("shared component is zero".into()));
    }
    let ones = vec![1.0; k];
    let v_not: Vec<Vec<f64>> = (0..k).map(|c| mean_of_others(c, v, &ones)).collect::<Result<_>>()?;
    let alpha: Vec<f64> = v.iter().map(|x| sq_norm(x) / uu).collect();
    let beta: Vec<f64> = v_not.iter().map(|x| sq_norm(x) / uu).collect();
    let rho_cc: Vec<Vec<Option<f64>>> =
        (0..k).map(|i| (0..k).map(|j| if i == j { None } else { correlation(&v[i], &v[j]) }).collect()).collect();
    let rho_c_not_c: Vec<Option<f64>> = (0..k).map(|c| correlation(&v[c], &v_not[c])).collect();
    let pred_scc = (0..k)
        .map(|i| (0..k).map(|j| if i == j { 1.0 } else { rewritten(rho_cc[i][j], alpha[i], alpha[j]) }).collect())
        .collect();
    let pred_sca = (0..k).map(|c| rewritten(rho_c_not_c[c], alpha[c], beta[c])).collect();
    Ok(NormalizedForms { alpha, beta, rho_cc, rho_c_not_c, pred_scc, pred_sca })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub r: f64,
    pub mean_scc: f64,
    pub predicted: f64,
}

/// Random orthonormal vectors in `dim` dimensions.
fn orthonormal(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        // two passes of Gram-Schmidt keep the set orthogonal to rounding
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&x, b);
                for (xi, bi) in x.iter_mut().zip(b) {
                    *xi -= p * bi;
                }
            }
        }
        let n = sq_norm(&x).sqrt();
        if n > 1e-6 {
            basis.push(x.into_iter().map(|xi| xi / n).collect());
        }
    }
    basis
}

/// For every `r`, builds `trials` random tables of `k` categories with a
/// shared component and mutually orthogonal deviations of squared norm
/// `r ‖u‖²`, and reports the mean pairwise cosine next to `1/(1+r)`.
pub fn scaling_law_check(rs: &[f64], trials: usize, k: usize, dim: usize, seed: u64) -> Result<Vec<ScalingRow>> {
    if k < 2 || dim < k + 1 || trials == 0 {
        return Err(Error::Config(format!("scaling check needs k >= 2, dim > k and trials > 0 (k={k}, dim={dim})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(rs.len());
    for &r in rs {
        if !(r >= 0.0) {
            return Err(Error::Config(format!("ratio {r} must be >= 0")));
        }
        let mut total = 0.0;
        let mut pairs = 0usize;
        for _ in 0..trials {
            let basis = orthonormal(k + 1, dim, &mut rng);
            let mag = (-3.0f64 + 6.0 * rand::Rng::random::<f64>(&mut rng)).exp2();
            let gs: Vec<Vec<f64>> = (1..=k)
                .map(|c| basis[0].iter().zip(&basis[c]).map(|(a, b)| mag * (a + r.sqrt() * b)).collect())
                .collect();
            for i in 0..k {
                for j in i + 1..k {
                    total += s_cc(&gs[i], &gs[j])?;
                    pairs += 1;
                }
            }
        }
        rows.push(ScalingRow { r, mean_scc: total / pairs as f64, predicted: 1.0 / (1.0 + r) });
    }
    Ok(rows)
}
