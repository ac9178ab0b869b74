//! Static difficulty-aware routing: quantile grouping of categories by a
//! difficulty proxy, pilot-driven boundary refinement, and capacity
//! allocation by comparison with the median difficulty.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posenet::Capacity;

/// Confidence `T_c` and difficulty `d(c) = 1 − T_c`, indexed by category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyTable {
    pub confidence: Vec<f64>,
    pub difficulty: Vec<f64>,
}

impl DifficultyTable {
    pub fn k(&self) -> usize {
        self.difficulty.len()
    }

    /// Table built directly from difficulties (confidence is derived).
    pub fn from_difficulty(d: Vec<f64>) -> Self {
        Self { confidence: d.iter().map(|x| 1.0 - x).collect(), difficulty: d }
    }

    pub fn median(&self) -> f64 {
        let mut s = self.difficulty.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        }
    }
}

/// `d(c) = 1 − T_c` for every category `0..k`.
pub fn compute_difficulty(rates: &BTreeMap<usize, f64>, k: usize) -> Result<DifficultyTable> {
    let mut confidence = Vec::with_capacity(k);
    for c in 0..k {
        let t = *rates.get(&c).ok_or_else(|| Error::MissingData(format!("no success rate for category {c}")))?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("success rate {t} for category {c} outside [0, 1]")));
        }
        confidence.push(t);
    }
    if let Some(extra) = rates.keys().find(|&&c| c >= k) {
        return Err(Error::Config(format!("success rate given for unknown category {extra}")));
    }
    let difficulty = confidence.iter().map(|t| 1.0 - t).collect();
    Ok(DifficultyTable { confidence, difficulty })
}

/// Reads `{category_id: T_c}` JSON.
pub fn read_difficulty(path: impl AsRef<Path>) -> Result<BTreeMap<usize, f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: BTreeMap<String, f64> = serde_json::from_str(&text)?;
    raw.into_iter()
        .map(|(k, v)| k.parse::<usize>().map(|k| (k, v)).map_err(|_| Error::Config(format!("category id `{k}` is not an integer"))))
        .collect()
}

/// Writes `{category_id: T_c}` JSON.
pub fn write_difficulty(path: impl AsRef<Path>, rates: &BTreeMap<usize, f64>) -> Result<()> {
    let path = path.as_ref();
    let raw: BTreeMap<String, f64> = rates.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    fs::write(path, serde_json::to_string_pretty(&raw)?).map_err(|e| Error::io(path, e))
}

/// `b_g = ⌊gK/G⌋` for `g = 0..=G`.
pub fn boundaries(k: usize, g: usize) -> Vec<usize> {
    (0..=g).map(|i| i * k / g).collect()
}

/// Categories in ascending difficulty, ties by ascending id.
pub fn difficulty_order(d: &DifficultyTable) -> Vec<usize> {
    let mut order: Vec<usize> = (0..d.k()).collect();
    order.sort_by(|&a, &b| d.difficulty[a].total_cmp(&d.difficulty[b]).then(a.cmp(&b)));
    order
}

/// Zero-based group of every category: sorted ranks `(b_{g−1}, b_g]` go to
/// group `g`.
pub fn quantile_partition(d: &DifficultyTable, g: usize) -> Result<Vec<usize>> {
    let k = d.k();
    if g < 1 || g > k {
        return Err(Error::Config(format!("group count {g} must lie in [1, {k}]")));
    }
    let b = boundaries(k, g);
    let order = difficulty_order(d);
    let mut gamma = vec![0; k];
    for grp in 0..g {
        for &c in &order[b[grp]..b[grp + 1]] {
            gamma[c] = grp;
        }
    }
    Ok(gamma)
}

/// Scores a candidate routing for the refinement check; higher is better.
pub trait Pilot {
    /// Validation score of `category` when routed by `gamma`.
    fn score(&mut self, gamma: &[usize], category: usize) -> Result<f64>;
}

impl<F: FnMut(&[usize], usize) -> Result<f64>> Pilot for F {
    fn score(&mut self, gamma: &[usize], category: usize) -> Result<f64> {
        self(gamma, category)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineStep {
    /// One-based internal boundary index.
    pub boundary: usize,
    pub category: usize,
    pub s_g: f64,
    pub s_g_plus_1: f64,
    pub moved: bool,
}

/// Boundary refinement. At each internal boundary `g` (in order), the
/// hardest category of group `g` moves to group `g+1` iff its pilot score
/// there is strictly higher. `gamma` is updated in place between
/// boundaries.
pub fn boundary_refine(
    gamma0: &[usize],
    d: &DifficultyTable,
    g: usize,
    pilot: &mut dyn Pilot,
) -> Result<(Vec<usize>, Vec<RefineStep>)> {
    let k = d.k();
    let b = boundaries(k, g);
    let order = difficulty_order(d);
    let mut gamma = gamma0.to_vec();
    let mut log = Vec::new();
    for grp in 1..g {
        let c = order[b[grp] - 1];
        let mut here = gamma.clone();
        here[c] = grp - 1;
        let mut there = gamma.clone();
        there[c] = grp;
        let wrap = |e: Error| Error::Pilot { boundary: grp, reason: e.to_string() };
        let s_g = pilot.score(&here, c).map_err(wrap)?;
        let s_next = pilot.score(&there, c).map_err(wrap)?;
        if !s_g.is_finite() || !s_next.is_finite() {
            return Err(Error::Pilot { boundary: grp, reason: format!("non-finite scores {s_g}, {s_next}") });
        }
        let moved = s_next > s_g;
        gamma = if moved { there } else { here };
        log.push(RefineStep { boundary: grp, category: c, s_g, s_g_plus_1: s_next, moved });
    }
    Ok((gamma, log))
}

/// `H` for groups whose mean difficulty is strictly below the median of all
/// category difficulties, `L` otherwise. Empty groups get `L` and a warning.
pub fn allocate_capacity(gamma: &[usize], d: &DifficultyTable, g: usize) -> (Vec<Capacity>, Vec<String>) {
    let median = d.median();
    let mut warnings = Vec::new();
    let alpha = (0..g)
        .map(|grp| {
            let members: Vec<f64> = (0..gamma.len()).filter(|&c| gamma[c] == grp).map(|c| d.difficulty[c]).collect();
            if members.is_empty() {
                warnings.push(format!("group {} is empty", grp + 1));
                return Capacity::L;
            }
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            if mean < median {
                Capacity::H
            } else {
                Capacity::L
            }
        })
        .collect();
    (alpha, warnings)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    /// `quantile`, `quantile+refine`, `random`, or `shared`.
    pub method: String,
    /// Identifies the estimator that produced the difficulty proxy.
    pub reference: String,
    pub seed: u64,
    pub difficulty: Vec<f64>,
    pub refinement_log: Vec<RefineStep>,
    pub warnings: Vec<String>,
}

/// Fixed category→group map plus per-group capacities. Serialized with
/// one-based group ids keyed by category id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "RoutingJson", try_from = "RoutingJson")]
pub struct RoutingTable {
    /// Zero-based group per category.
    pub gamma: Vec<usize>,
    /// Capacity per zero-based group.
    pub alpha: Vec<Capacity>,
    pub provenance: Provenance,
}

#[derive(Clone, Serialize, Deserialize)]
struct RoutingJson {
    gamma: BTreeMap<String, usize>,
    alpha: BTreeMap<String, Capacity>,
    provenance: Provenance,
}

impl RoutingTable {
    /// Single shared high-capacity branch.
    pub fn shared(k: usize) -> Self {
        Self {
            gamma: vec![0; k],
            alpha: vec![Capacity::H],
            provenance: Provenance { method: "shared".into(), ..Provenance::default() },
        }
    }

    pub fn g(&self) -> usize {
        self.alpha.len()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.g()];
        for &g in &self.gamma {
            s[g] += 1;
        }
        s
    }

    /// Checks that every category `0..k` is routed to an existing group.
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.gamma.len() != k {
            return Err(Error::Routing(format!("routing covers {} categories, dataset has {k}", self.gamma.len())));
        }
        if let Some((c, g)) = self.gamma.iter().enumerate().find(|(_, &g)| g >= self.g()) {
            return Err(Error::Routing(format!("category {c} routed to missing group {}", g + 1)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let j: RoutingJson = serde_json::from_str(text)?;
        Self::try_from(j)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

impl From<RoutingTable> for RoutingJson {
    fn from(t: RoutingTable) -> Self {
        RoutingJson {
            gamma: t.gamma.iter().enumerate().map(|(c, g)| (c.to_string(), g + 1)).collect(),
            alpha: t.alpha.iter().enumerate().map(|(g, a)| ((g + 1).to_string(), *a)).collect(),
            provenance: t.provenance,
        }
    }
}

impl TryFrom<RoutingJson> for RoutingTable {
    type Error = Error;

    fn try_from(j: RoutingJson) -> Result<Self> {
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Routing(format!("bad key `{s}`")));
        let k = j.gamma.len();
        let mut gamma = vec![usize::MAX; k];
        for (c, g) in &j.gamma {
            let c = parse(c)?;
            if c >= k || *g == 0 {
                return Err(Error::Routing(format!("invalid entry {c} -> {g}")));
            }
            gamma[c] = g - 1;
        }
        let g = j.alpha.len();
        let mut alpha = vec![Capacity::L; g];
        let mut seen = vec![false; g];
        for (grp, a) in &j.alpha {
            let grp = parse(grp)?;
            if grp == 0 || grp > g {
                return Err(Error::Routing(format!("group {grp} outside 1..={g}")));
            }
            alpha[grp - 1] = *a;
            seen[grp - 1] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Routing("alpha does not cover every group".into()));
        }
        let t = RoutingTable { gamma, alpha, provenance: j.provenance };
        t.validate(k)?;
        Ok(t)
    }
}

/// Quantile grouping plus capacity allocation, optionally refined by a
/// pilot.
pub fn build_routing(
    d: &DifficultyTable,
    g: usize,
    pilot: Option<&mut dyn Pilot>,
    reference: &str,
    seed: u64,
) -> Result<RoutingTable> {
    let gamma0 = quantile_partition(d, g)?;
    let (gamma, log, method) = match pilot {
        Some(p) => {
            let (gm, log) = boundary_refine(&gamma0, d, g, p)?;
            (gm, log, "quantile+refine")
        }
        None => (gamma0, Vec::new(), "quantile"),
    };
    let (alpha, warnings) = allocate_capacity(&gamma, d, g);
    Ok(RoutingTable {
        gamma,
        alpha,
        provenance: Provenance {
            method: method.into(),
            reference: reference.into(),
            seed,
            difficulty: d.difficulty.clone(),
            refinement_log: log,
            warnings,
        },
    })
}

/// Random assignment with the same group sizes as quantile grouping;
/// capacities follow the usual median rule on the resulting groups.
pub fn random_routing(d: &DifficultyTable, g: usize, seed: u64) -> Result<RoutingTable> {
    let k = d.k();
    if g < 1 || g > k {
        return Err(Error::Config(format!("group count {g} must lie in [1, {k}]")));
    }
    let b = boundaries(k, g);
    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut gamma = vec![0; k];
    for grp in 0..g {
        for &c in &perm[b[grp]..b[grp + 1]] {
            gamma[c] = grp;
        }
    }
    let (alpha, warnings) = allocate_capacity(&gamma, d, g);
    Ok(RoutingTable {
        gamma,
        alpha,
        provenance: Provenance {
            method: "random".into(),
            reference: String::new(),
            seed,
            difficulty: d.difficulty.clone(),
            refinement_log: Vec::new(),
            warnings,
        },
    })
}
