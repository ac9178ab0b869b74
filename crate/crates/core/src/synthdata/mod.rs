//! Synthetic object categories: perturbed superellipsoid surfaces under
//! random 9DoF poses.

mod io;

pub use io::{decode_dataset, encode_dataset, read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Mat3, Vec3};

/// How shape parameters vary across categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heterogeneity {
    Uniform,
    Graded,
}

/// Shape family of one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub id: usize,
    /// Range of the latitude exponent.
    pub e1: (f64, f64),
    /// Range of the longitude exponent.
    pub e2: (f64, f64),
    /// Radial bump amplitude, below 0.3.
    pub amplitude: f64,
    pub frequency: u32,
    /// Semi-axis lengths before normalization.
    pub axes: Vec3,
    /// Generator metadata; never read by the model.
    pub difficulty_rank: usize,
}

/// Builds `k` category specs.
///
/// `Graded` widens the exponent ranges and raises the bump amplitude
/// linearly with the category index; `Uniform` repeats one spec.
pub fn make_category_specs(k: usize, profile: Heterogeneity, seed: u64) -> Result<Vec<CategorySpec>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 categories, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_base = |rng: &mut ChaCha8Rng| {
        let c1 = rng.random_range(0.6..1.2);
        let c2 = rng.random_range(0.6..1.2);
        let axes = [1.0, rng.random_range(0.6..0.8), rng.random_range(0.35..0.5)];
        (c1, c2, axes)
    };
    let shared = draw_base(&mut rng);
    let mut specs = Vec::with_capacity(k);
    for id in 0..k {
        let (c1, c2, axes, t) = match profile {
            Heterogeneity::Uniform => (shared.0, shared.1, shared.2, 0.5),
            Heterogeneity::Graded => {
                let (c1, c2, axes) = draw_base(&mut rng);
                (c1, c2, axes, id as f64 / (k - 1) as f64)
            }
        };
        let width = 0.1 + 1.1 * t;
        let range = |c: f64| ((c - 0.5 * width).max(0.2), c + 0.5 * width);
        specs.push(CategorySpec {
            id,
            e1: range(c1),
            e2: range(c2),
            amplitude: 0.25 * t,
            frequency: 3 + (t * 3.0).round() as u32,
            axes,
            difficulty_rank: match profile {
                Heterogeneity::Uniform => 0,
                Heterogeneity::Graded => id,
            },
        });
    }
    Ok(specs)
}

/// Ground-truth transform `x = R (s ⊙ p) + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub r: Mat3,
    pub t: Vec3,
    pub s: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { r: geom::IDENTITY, t: [0.0; 3], s: [1.0; 3] }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        let x = geom::mat_vec(&self.r, [self.s[0] * p[0], self.s[1] * p[1], self.s[2] * p[2]]);
        [x[0] + self.t[0], x[1] + self.t[1], x[2] + self.t[2]]
    }

    /// Inverse map `(Rᵀ (x − t)) ⊘ s`.
    pub fn nocs_of(&self, x: Vec3) -> Result<Vec3> {
        if self.s.iter().any(|&v| v <= 0.0) {
            return Err(Error::Numerical(format!("non-positive scale {:?}", self.s)));
        }
        let q = geom::mat_t_vec(&self.r, geom::sub(x, self.t));
        Ok([q[0] / self.s[0], q[1] / self.s[1], q[2] / self.s[2]])
    }
}

/// Free-function form of [`Pose::nocs_of`].
pub fn nocs_of(x: Vec3, pose: &Pose) -> Result<Vec3> {
    pose.nocs_of(x)
}

/// Distribution of ground-truth poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoseProfile {
    /// 180 gives rotations uniform over SO(3); smaller values draw a uniform
    /// axis and an angle uniform in `[0, max]`.
    pub rotation_max_deg: f64,
    /// Translations uniform in `[-range, range]^3`.
    pub translation_range: f64,
    /// Per-axis log-uniform scale bounds.
    pub scale_range: (f64, f64),
}

impl Default for PoseProfile {
    fn default() -> Self {
        Self { rotation_max_deg: 180.0, translation_range: 1.0, scale_range: (0.5, 2.0) }
    }
}

impl PoseProfile {
    /// Rotations up to 30° about a uniform axis and per-axis scales in
    /// `[0.8, 1.25]`, the range the desk-scale model learns within 30
    /// epochs.
    pub fn narrow() -> Self {
        Self { rotation_max_deg: 30.0, translation_range: 1.0, scale_range: (0.8, 1.25) }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(0.0..=180.0).contains(&self.rotation_max_deg) {
            return Err(Error::Config(format!("rotation_max_deg {} outside [0, 180]", self.rotation_max_deg)));
        }
        if !(self.translation_range >= 0.0) {
            return Err(Error::Config("translation_range must be >= 0".into()));
        }
        if !(0.5 <= lo && lo <= hi && hi <= 2.0) {
            return Err(Error::Config(format!("scale_range {:?} must lie within [0.5, 2]", self.scale_range)));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Pose {
        let r = if self.rotation_max_deg >= 180.0 {
            uniform_rotation(rng)
        } else {
            let axis: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
            let n = geom::norm(axis).max(1e-300);
            let angle = rng.random_range(0.0..=self.rotation_max_deg.to_radians());
            geom::axis_angle([axis[0] / n, axis[1] / n, axis[2] / n], angle)
        };
        let tr = self.translation_range;
        let t = [0; 3].map(|_| if tr > 0.0 { rng.random_range(-tr..=tr) } else { 0.0 });
        let (lo, hi) = (self.scale_range.0.ln(), self.scale_range.1.ln());
        let s = [0; 3].map(|_| if hi > lo { rng.random_range(lo..=hi).exp() } else { lo.exp() });
        Pose { r, t, s }
    }
}

/// Rotation drawn uniformly over SO(3) from a uniform unit quaternion.
pub fn uniform_rotation(rng: &mut impl Rng) -> Mat3 {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    geom::quat_to_mat([a * (tau * u2).sin(), a * (tau * u2).cos(), b * (tau * u3).sin(), b * (tau * u3).cos()])
}

/// One synthetic object observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub category: usize,
    pub seed: u32,
    /// N×3, in `[-0.5, 0.5]^3`.
    pub canonical: Vec<Vec3>,
    pub pose: Pose,
    /// N×3, scene frame.
    pub observed: Vec<Vec3>,
    pub sigma: f64,
}

fn signed_pow(x: f64, e: f64) -> f64 {
    x.signum() * x.abs().powf(e)
}

/// Samples one instance with poses from the default (uniform) profile.
pub fn sample_instance(spec: &CategorySpec, n: usize, sigma: f64, seed: u32) -> Result<Instance> {
    sample_instance_with(spec, n, sigma, seed, &PoseProfile::default())
}

/// Samples one instance. Canonical points are rounded to the nearest `f32`
/// after normalization so that stored datasets are exact.
pub fn sample_instance_with(
    spec: &CategorySpec,
    n: usize,
    sigma: f64,
    seed: u32,
    profile: &PoseProfile,
) -> Result<Instance> {
    if n < 8 {
        return Err(Error::Config(format!("need at least 8 points, got {n}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(((spec.id as u64) << 32) | seed as u64);
    let e1 = rng.random_range(spec.e1.0..=spec.e1.1);
    let e2 = rng.random_range(spec.e2.0..=spec.e2.1);
    let f = spec.frequency as f64;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut pts: Vec<Vec3> = (0..n)
        .map(|_| {
            let eta: f64 = rng.random_range(-std::f64::consts::FRAC_PI_2..=std::f64::consts::FRAC_PI_2);
            let om: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let (ce, se) = (eta.cos(), eta.sin());
            let (co, so) = (om.cos(), om.sin());
            let bump = 1.0 + spec.amplitude * (f * eta).sin() * (f * om + phase).sin();
            [
                bump * spec.axes[0] * signed_pow(ce, e1) * signed_pow(co, e2),
                bump * spec.axes[1] * signed_pow(ce, e1) * signed_pow(so, e2),
                bump * spec.axes[2] * signed_pow(se, e1),
            ]
        })
        .collect();
    let extent = pts.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if extent <= 0.0 {
        return Err(Error::Numerical("degenerate sampled surface".into()));
    }
    for p in &mut pts {
        for v in p.iter_mut() {
            *v = (*v / extent * 0.5) as f32 as f64;
        }
    }
    let pose = profile.sample(&mut rng);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let observed = pts
        .iter()
        .map(|&p| {
            let x = pose.apply(p);
            if sigma > 0.0 {
                [x[0] + noise.sample(&mut rng), x[1] + noise.sample(&mut rng), x[2] + noise.sample(&mut rng)]
            } else {
                x
            }
        })
        .collect();
    Ok(Instance { category: spec.id, seed, canonical: pts, pose, observed, sigma })
}

/// Named contiguous run of instances in a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub name: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub k: usize,
    pub g_default: usize,
    pub n: usize,
    pub seed: u64,
    pub sigma: f64,
    pub heterogeneity: Heterogeneity,
    pub pose_profile: PoseProfile,
    pub specs: Vec<CategorySpec>,
    /// Instances are stored split after split, in this order.
    pub splits: Vec<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub instances: Vec<Instance>,
}

impl Dataset {
    /// Instances of the named split.
    pub fn split(&self, name: &str) -> Result<&[Instance]> {
        let mut start = 0;
        for s in &self.header.splits {
            if s.name == name {
                return Ok(&self.instances[start..start + s.count]);
            }
            start += s.count;
        }
        Err(Error::MissingData(format!("split `{name}` not in dataset")))
    }

    /// Instance count per category within a split.
    pub fn counts(&self, split: &str) -> Result<Vec<usize>> {
        let mut c = vec![0; self.header.k];
        for inst in self.split(split)? {
            c[inst.category] += 1;
        }
        Ok(c)
    }
}

fn default_g() -> usize {
    3
}
fn default_train() -> usize {
    400
}
fn default_test() -> usize {
    100
}

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub v: u32,
    pub k: usize,
    pub n: usize,
    pub seed: u64,
    pub heterogeneity: Heterogeneity,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default = "default_g")]
    pub g_default: usize,
    #[serde(default = "default_train")]
    pub train_per_category: usize,
    #[serde(default = "default_test")]
    pub test_per_category: usize,
    #[serde(default)]
    pub pose_profile: PoseProfile,
}

impl DataConfig {
    /// Default sizes for `k` categories of `n` points.
    pub fn new(k: usize, n: usize, seed: u64, heterogeneity: Heterogeneity) -> Self {
        Self {
            v: 1,
            k,
            n,
            seed,
            heterogeneity,
            sigma: 0.0,
            g_default: default_g(),
            train_per_category: default_train(),
            test_per_category: default_test(),
            pose_profile: PoseProfile::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.v != 1 {
            return Err(Error::Config(format!("unsupported config schema v={} (expected 1)", self.v)));
        }
        if self.n < 8 {
            return Err(Error::Config(format!("n must be >= 8, got {}", self.n)));
        }
        if self.k > u16::MAX as usize {
            return Err(Error::Config("too many categories".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config("sigma must be >= 0".into()));
        }
        self.pose_profile.validate()
    }
}

fn record_seed(master: u64, split: u64, cat: usize, i: usize) -> u32 {
    // splitmix64 finalizer over the packed coordinates
    let mut z = master ^ (split << 62) ^ ((cat as u64) << 40) ^ i as u64;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    (z ^ (z >> 31)) as u32
}

/// Generates the train and test splits. Observed coordinates are rounded to
/// `f32`, the storage precision.
pub fn generate_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let specs = make_category_specs(cfg.k, cfg.heterogeneity, cfg.seed)?;
    let mut instances = Vec::with_capacity(cfg.k * (cfg.train_per_category + cfg.test_per_category));
    let mut splits = Vec::new();
    for (si, (name, per)) in [("train", cfg.train_per_category), ("test", cfg.test_per_category)].into_iter().enumerate() {
        for spec in &specs {
            for i in 0..per {
                let seed = record_seed(cfg.seed, si as u64, spec.id, i);
                let mut inst = sample_instance_with(spec, cfg.n, cfg.sigma, seed, &cfg.pose_profile)?;
                for p in &mut inst.observed {
                    for v in p.iter_mut() {
                        *v = *v as f32 as f64;
                    }
                }
                instances.push(inst);
            }
        }
        splits.push(Split { name: name.to_string(), count: per * specs.len() });
    }
    Ok(Dataset {
        header: DatasetHeader {
            k: cfg.k,
            g_default: cfg.g_default,
            n: cfg.n,
            seed: cfg.seed,
            sigma: cfg.sigma,
            heterogeneity: cfg.heterogeneity,
            pose_profile: cfg.pose_profile.clone(),
            specs,
            splits,
        },
        instances,
    })
}
