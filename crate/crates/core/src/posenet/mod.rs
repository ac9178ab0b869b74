//! Shared point encoder, routed correspondence branches of high or low
//! capacity, and the shared pose head.

mod config;
mod layers;

pub use config::{Capacity, ModelConfig};
pub use layers::{Linear, Mlp};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::{Mat3, Vec3};
use crate::numgrad::{Block, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;
use layers::{f32_grid, uniform};

/// Per-branch keypoint proposal: learned queries refined by cross-attention
/// over the point features.
#[derive(Debug, Clone)]
pub struct KeypointExtractor {
    pub queries: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct HighBranch {
    pub extract: KeypointExtractor,
    pub offset_mlp: Mlp,
    pub query_mlp: Mlp,
    pub local_mlp: Mlp,
    pub pair_mlp: Mlp,
    pub fuse_mlp: Mlp,
    pub nocs_mlp: Mlp,
    pub decoder: Mlp,
}

#[derive(Debug, Clone)]
pub struct LowBranch {
    pub extract: KeypointExtractor,
    pub geo_mlp: Mlp,
    pub local_bias_mlp: Mlp,
    pub global_bias_mlp: Mlp,
    pub wq: ParamId,
    pub wk: ParamId,
    pub nocs_mlp: Mlp,
    pub decoder: Mlp,
}

#[derive(Debug, Clone)]
pub enum Branch {
    High(HighBranch),
    Low(LowBranch),
}

#[derive(Debug, Clone)]
pub struct PoseHead {
    pub rotation: Mlp,
    pub translation: Mlp,
    pub log_scale: Mlp,
}

/// Keypoint extraction results on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Keypoints {
    pub q_ins: Var,
    pub affinity: Var,
    pub w: Var,
    pub p_kpt: Var,
    pub f_kpt: Var,
}

/// Branch outputs on the tape.
#[derive(Debug, Clone, Copy)]
pub struct BranchVars {
    pub kp: Keypoints,
    pub f_hat: Var,
    pub nocs: Var,
    /// Decoded point cloud, `recon_points × 3`.
    pub recon: Var,
    /// Low branch only: plain attention logits and the biased logits, both
    /// `(k_kpt·k_n) × heads`.
    pub attn_logits: Option<(Var, Var)>,
}

#[derive(Debug, Clone, Copy)]
pub struct PoseVars {
    pub raw_rotation: Var,
    pub r: Var,
    pub t: Var,
    pub s: Var,
    /// Gram–Schmidt fell back to a fixed completion.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub p: Var,
    pub f: Var,
    pub branch: BranchVars,
    pub pose: PoseVars,
}

/// Concrete branch outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput<T> {
    pub p_kpt: Tensor<T>,
    pub f_kpt: Tensor<T>,
    pub f_hat: Tensor<T>,
    pub nocs: Tensor<T>,
    pub w: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosePrediction {
    pub r: Mat3,
    pub raw_rotation: [f64; 6],
    pub t: Vec3,
    pub s: Vec3,
}

/// Constant matrices used for pooling and head broadcasting.
#[derive(Debug, Clone)]
struct Consts<T> {
    neighbour_mean: Tensor<T>,
    neighbour_sum: Tensor<T>,
    pair_mean: Tensor<T>,
    head_sum: Tensor<T>,
    head_spread: Tensor<T>,
    rep: Vec<usize>,
    pair_i: Vec<usize>,
    pair_j: Vec<usize>,
}

impl<T: Scalar> Consts<T> {
    fn new(cfg: &ModelConfig) -> Self {
        let (k, kn, d, h) = (cfg.k_kpt, cfg.k_n, cfg.d, cfg.heads);
        let mut neighbour_mean = vec![T::zero(); k * k * kn];
        let mut neighbour_sum = vec![T::zero(); k * k * kn];
        for i in 0..k {
            for j in 0..kn {
                neighbour_mean[i * k * kn + i * kn + j] = T::one() / T::lit(kn as f64);
                neighbour_sum[i * k * kn + i * kn + j] = T::one();
            }
        }
        let mut pair_mean = vec![T::zero(); k * k * k];
        for i in 0..k {
            for j in 0..k {
                pair_mean[i * k * k + i * k + j] = T::one() / T::lit(k as f64);
            }
        }
        let per = d / h;
        let mut head_sum = vec![T::zero(); d * h];
        for c in 0..d {
            head_sum[c * h + c / per] = T::one();
        }
        let head_sum = Tensor::from_raw(vec![d, h], head_sum);
        Self {
            neighbour_mean: Tensor::from_raw(vec![k, k * kn], neighbour_mean),
            neighbour_sum: Tensor::from_raw(vec![k, k * kn], neighbour_sum),
            pair_mean: Tensor::from_raw(vec![k, k * k], pair_mean),
            head_spread: head_sum.transposed(),
            head_sum,
            rep: (0..k).flat_map(|i| std::iter::repeat_n(i, kn)).collect(),
            pair_i: (0..k).flat_map(|i| std::iter::repeat_n(i, k)).collect(),
            pair_j: (0..k).flat_map(|_| 0..k).collect(),
        }
    }
}

pub const POINT_FEATURES: usize = 13;

/// Encoder input features `[p, d, ‖d‖, d_x², d_y², d_z², d_x d_y, d_x d_z,
/// d_y d_z]` with `d = p − centroid`, `N × 13`. The second-order terms put
/// the point covariance, and with it the object's orientation, within
/// linear reach of the pooled features.
pub fn point_features<T: Scalar>(points: &[Vec3]) -> Result<Tensor<T>> {
    if points.is_empty() {
        return Err(Error::shape("point_features", "no points"));
    }
    // summed in sorted order so the centroid does not depend on row order
    let n = points.len() as f64;
    let c = [0, 1, 2].map(|k| {
        let mut xs: Vec<f64> = points.iter().map(|p| p[k]).collect();
        xs.sort_by(f64::total_cmp);
        xs.iter().sum::<f64>() / n
    });
    let mut data = Vec::with_capacity(points.len() * POINT_FEATURES);
    for p in points {
        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        data.extend([p[0], p[1], p[2], d[0], d[1], d[2], r].map(T::lit));
        data.extend(
            [d[0] * d[0], d[1] * d[1], d[2] * d[2], d[0] * d[1], d[0] * d[2], d[1] * d[2]].map(T::lit),
        );
    }
    Tensor::new(vec![points.len(), POINT_FEATURES], data)
}

pub fn points_tensor<T: Scalar>(points: &[Vec3]) -> Result<Tensor<T>> {
    Tensor::new(vec![points.len(), 3], points.iter().flat_map(|p| p.map(T::lit)).collect())
}

/// Indices of the `k_n` points nearest each keypoint, row-major
/// `(keypoint, rank)`. Ties resolve to the lower point index.
pub fn knn_indices<T: Scalar>(p_kpt: &Tensor<T>, p: &Tensor<T>, k_n: usize) -> Result<Vec<usize>> {
    let n = p.rows();
    if n < k_n {
        return Err(Error::shape("knn", format!("{n} points for {k_n} neighbours")));
    }
    let mut out = Vec::with_capacity(p_kpt.rows() * k_n);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..p_kpt.rows() {
        let q = p_kpt.row(i);
        order.clear();
        order.extend((0..n).map(|j| {
            let r = p.row(j);
            let d: f64 = (0..3).map(|k| (r[k] - q[k]).as_f64().powi(2)).sum();
            (d, j)
        }));
        order.select_nth_unstable_by(k_n - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut first: Vec<_> = order[..k_n].to_vec();
        first.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend(first.iter().map(|&(_, j)| j));
    }
    Ok(out)
}

/// The full model: parameters plus the layer structure that indexes them.
#[derive(Debug, Clone)]
pub struct PoseNet<T> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Mlp,
    pub branches: Vec<Branch>,
    pub head: PoseHead,
    consts: Consts<T>,
}

impl<T: Scalar> PoseNet<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        // Separate streams per part: the encoder and head start identical
        // under every routing, and all branches of one capacity share their
        // initial values.
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        let mut store = ParamStore::new();
        let d = cfg.d;
        let encoder = Mlp::new(&mut store, &mut stream(0), "encoder", Block::Psi, &[POINT_FEATURES, cfg.encoder_hidden, cfg.encoder_hidden, d])?;
        let mut branches = Vec::with_capacity(cfg.g);
        for (g, cap) in cfg.alpha.iter().enumerate() {
            branches.push(match cap {
                Capacity::H => Branch::High(Self::high(&mut store, &mut stream(2), &cfg, g)?),
                Capacity::L => Branch::Low(Self::low(&mut store, &mut stream(3), &cfg, g)?),
            });
        }
        let mut rng = stream(1);
        let hh = cfg.head_hidden;
        let fin = d + 6;
        let rotation = Mlp::new(&mut store, &mut rng, "head.rotation", Block::Omega, &[fin, hh, 6])?;
        let translation = Mlp::new(&mut store, &mut rng, "head.translation", Block::Omega, &[fin, hh, 3])?;
        let log_scale = Mlp::new(&mut store, &mut rng, "head.log_scale", Block::Omega, &[fin, hh, 3])?;
        store.set_value(rotation.output_bias(), Tensor::new(vec![1, 6], [1.0, 0.0, 0.0, 0.0, 1.0, 0.0].map(T::lit).to_vec())?)?;
        let consts = Consts::new(&cfg);
        Ok(Self { cfg, store, encoder, branches, head: PoseHead { rotation, translation, log_scale }, consts })
    }

    fn extractor(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig, g: usize) -> Result<KeypointExtractor> {
        let (d, block, name) = (cfg.d, Block::Phi(g), format!("branch{}", g + 1));
        let a = (3.0 / d as f64).sqrt();
        Ok(KeypointExtractor {
            queries: store.add(format!("{name}.queries"), block, uniform(rng, cfg.k_kpt, d, 1.0))?,
            wq: store.add(format!("{name}.ca.wq"), block, uniform(rng, d, d, a))?,
            wk: store.add(format!("{name}.ca.wk"), block, uniform(rng, d, d, a))?,
            wv: store.add(format!("{name}.ca.wv"), block, uniform(rng, d, d, a))?,
            ln_gain: store.add(format!("{name}.ca.ln_gain"), block, Tensor::new(vec![1, d], vec![T::one(); d])?)?,
            ln_bias: store.add(format!("{name}.ca.ln_bias"), block, Tensor::zeros(&[1, d]))?,
        })
    }

    fn high(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig, g: usize) -> Result<HighBranch> {
        let (d, block, name) = (cfg.d, Block::Phi(g), format!("branch{}", g + 1));
        let extract = Self::extractor(store, rng, cfg, g)?;
        let mut mlp = |suffix: &str, dims: &[usize]| Mlp::new(store, rng, &format!("{name}.{suffix}"), block, dims);
        Ok(HighBranch {
            extract,
            offset_mlp: mlp("offset", &[3, d, d])?,
            query_mlp: mlp("query", &[2 * d, d, d])?,
            local_mlp: mlp("local", &[d, d, d])?,
            pair_mlp: mlp("pair", &[3, d, d])?,
            fuse_mlp: mlp("fuse", &[3 * d, d, d])?,
            nocs_mlp: mlp("nocs", &[d, d, 3])?,
            decoder: mlp("decoder", &[d, d, 3 * cfg.recon_points])?,
        })
    }

    fn low(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ModelConfig, g: usize) -> Result<LowBranch> {
        let (d, h, block, name) = (cfg.d, cfg.heads, Block::Phi(g), format!("branch{}", g + 1));
        let dg = (d / 4).max(4);
        let extract = Self::extractor(store, rng, cfg, g)?;
        let a = (3.0 / d as f64).sqrt();
        let wq = store.add(format!("{name}.attn.wq"), block, uniform(rng, d, d, a))?;
        let wk = store.add(format!("{name}.attn.wk"), block, uniform(rng, d, d, a))?;
        let mut mlp = |suffix: &str, dims: &[usize]| Mlp::new(store, rng, &format!("{name}.{suffix}"), block, dims);
        Ok(LowBranch {
            extract,
            geo_mlp: mlp("geo", &[3, dg, dg])?,
            local_bias_mlp: mlp("bias_local", &[dg, dg, h])?,
            global_bias_mlp: mlp("bias_global", &[dg, dg, h])?,
            wq,
            wk,
            nocs_mlp: mlp("nocs", &[d, d / 2, 3])?,
            decoder: mlp("decoder", &[d, d, 3 * cfg.recon_points])?,
        })
    }

    pub fn param_count(&self, block: Block) -> usize {
        self.store.count(|b| b == block)
    }

    /// Shared per-point features, `N × D`.
    pub fn encode_points(&self, t: &mut Tape<T>, v: &[Var], x: Var) -> Result<Var> {
        self.encoder.forward(t, v, x)
    }

    fn extractor_of(&self, g: usize) -> Result<&KeypointExtractor> {
        match self.branches.get(g) {
            Some(Branch::High(b)) => Ok(&b.extract),
            Some(Branch::Low(b)) => Ok(&b.extract),
            None => Err(Error::Routing(format!("branch {} does not exist (g={})", g + 1, self.cfg.g))),
        }
    }

    /// Cross-attention refined queries, affinities, soft assignments and
    /// pooled keypoint coordinates/features for branch `g`.
    pub fn extract_keypoints(&self, t: &mut Tape<T>, v: &[Var], f: Var, p: Var, g: usize) -> Result<Keypoints> {
        let e = self.extractor_of(g)?;
        let q = v[e.queries.0];
        let qq = t.matmul(q, v[e.wq.0])?;
        let kk = t.matmul(f, v[e.wk.0])?;
        let vv = t.matmul(f, v[e.wv.0])?;
        let kt = t.transpose(kk)?;
        let logits = t.matmul(qq, kt)?;
        let logits = t.scalar_mul(logits, T::one() / T::lit(self.cfg.d as f64).sqrt())?;
        let att = t.row_softmax(logits)?;
        let ca = t.matmul(att, vv)?;
        let pre = t.add(q, ca)?;
        let q_ins = t.layer_norm(pre, Some(v[e.ln_gain.0]), Some(v[e.ln_bias.0]), T::lit(1e-5))?;
        let ft = t.transpose(f)?;
        let affinity = t.matmul(q_ins, ft)?;
        let w = t.row_softmax(affinity)?;
        let p_kpt = t.matmul(w, p)?;
        let f_kpt = t.matmul(w, f)?;
        Ok(Keypoints { q_ins, affinity, w, p_kpt, f_kpt })
    }

    /// Neighbour features, coordinate offsets and repeated-keypoint helper.
    fn neighbourhood(&self, t: &mut Tape<T>, f: Var, p: Var, kp: &Keypoints) -> Result<(Var, Var)> {
        let idx = knn_indices(t.value(kp.p_kpt), t.value(p), self.cfg.k_n)?;
        let p_nb = t.gather_rows(p, &idx)?;
        let f_nb = t.gather_rows(f, &idx)?;
        let centre = t.gather_rows(kp.p_kpt, &self.consts.rep)?;
        let dp = t.sub(p_nb, centre)?;
        Ok((f_nb, dp))
    }

    fn high_forward(&self, b: &HighBranch, t: &mut Tape<T>, v: &[Var], f: Var, p: Var, kp: Keypoints) -> Result<BranchVars> {
        let (k, kn, c) = (self.cfg.k_kpt, self.cfg.k_n, &self.consts);
        let (f_nb, dp) = self.neighbourhood(t, f, p, &kp)?;
        let alpha = b.offset_mlp.forward(t, v, dp)?;
        let pool = t.constant(c.neighbour_mean.clone());
        let f_l = t.matmul(pool, alpha)?;
        let qin = t.concat(&[kp.f_kpt, f_l])?;
        let query = b.query_mlp.forward(t, v, qin)?;
        let q_rep = t.gather_rows(query, &c.rep)?;
        let prod = t.mul(q_rep, f_nb)?;
        let a = t.sum_axis(prod, 1)?;
        let a = t.reshape(a, k, kn)?;
        let a = t.row_softmax(a)?;
        let a = t.reshape(a, k * kn, 1)?;
        let weighted = t.mul_rows(f_nb, a)?;
        let sum = t.constant(c.neighbour_sum.clone());
        let agg = t.matmul(sum, weighted)?;
        let agg = t.add(agg, kp.f_kpt)?;
        let f_local = b.local_mlp.forward(t, v, agg)?;

        let pj = t.gather_rows(kp.p_kpt, &c.pair_j)?;
        let pi = t.gather_rows(kp.p_kpt, &c.pair_i)?;
        let pd = t.sub(pj, pi)?;
        let beta = b.pair_mlp.forward(t, v, pd)?;
        let pair_pool = t.constant(c.pair_mean.clone());
        let f_global_i = t.matmul(pair_pool, beta)?;
        let f_global = t.mean_axis(f_local, 0)?;
        let f_global = t.gather_rows(f_global, &vec![0; k])?;
        let fused = t.concat(&[f_local, f_global, f_global_i])?;
        let f_hat = b.fuse_mlp.forward(t, v, fused)?;
        let nocs = b.nocs_mlp.forward(t, v, f_hat)?;
        let recon = self.decode(&b.decoder, t, v, f_hat)?;
        Ok(BranchVars { kp, f_hat, nocs, recon, attn_logits: None })
    }

    fn low_forward(
        &self,
        b: &LowBranch,
        t: &mut Tape<T>,
        v: &[Var],
        f: Var,
        p: Var,
        kp: Keypoints,
        with_bias: bool,
    ) -> Result<BranchVars> {
        let (k, kn, h, c) = (self.cfg.k_kpt, self.cfg.k_n, self.cfg.heads, &self.consts);
        let (f_nb, dp) = self.neighbourhood(t, f, p, &kp)?;
        let geo = b.geo_mlp.forward(t, v, dp)?;
        let pool = t.constant(c.neighbour_mean.clone());
        let geo_bar = t.matmul(pool, geo)?;

        let q = t.matmul(kp.f_kpt, v[b.wq.0])?;
        let q_rep = t.gather_rows(q, &c.rep)?;
        let key = t.matmul(f_nb, v[b.wk.0])?;
        let prod = t.mul(q_rep, key)?;
        let head_sum = t.constant(c.head_sum.clone());
        let plain = t.matmul(prod, head_sum)?;
        let plain = t.scalar_mul(plain, T::one() / T::lit((self.cfg.d / h) as f64).sqrt())?;
        let logits = if with_bias {
            let b_local = b.local_bias_mlp.forward(t, v, geo)?;
            t.add(plain, b_local)?
        } else {
            plain
        };
        // softmax over neighbours for each (keypoint, head)
        let by_head = t.transpose(logits)?;
        let by_head = t.reshape(by_head, h * k, kn)?;
        let wts = t.row_softmax(by_head)?;
        let wts = t.reshape(wts, h, k * kn)?;
        let wts = t.transpose(wts)?;
        let spread = t.constant(c.head_spread.clone());
        let wts = t.matmul(wts, spread)?;
        let weighted = t.mul(wts, f_nb)?;
        let sum = t.constant(c.neighbour_sum.clone());
        let agg = t.matmul(sum, weighted)?;
        let f_local = t.add(agg, kp.f_kpt)?;
        let f_hat = if with_bias {
            let b_global = b.global_bias_mlp.forward(t, v, geo_bar)?;
            let spread = t.constant(c.head_spread.clone());
            let b_global = t.matmul(b_global, spread)?;
            t.add(f_local, b_global)?
        } else {
            f_local
        };
        let nocs = b.nocs_mlp.forward(t, v, f_hat)?;
        let recon = self.decode(&b.decoder, t, v, f_hat)?;
        Ok(BranchVars { kp, f_hat, nocs, recon, attn_logits: Some((plain, logits)) })
    }

    fn decode(&self, decoder: &Mlp, t: &mut Tape<T>, v: &[Var], f_hat: Var) -> Result<Var> {
        let pooled = t.mean_axis(f_hat, 0)?;
        let out = decoder.forward(t, v, pooled)?;
        t.reshape(out, self.cfg.recon_points, 3)
    }

    /// Runs branch `g` on encoded features.
    pub fn branch_forward(&self, t: &mut Tape<T>, v: &[Var], f: Var, p: Var, g: usize) -> Result<BranchVars> {
        self.branch_forward_with(t, v, f, p, g, true)
    }

    /// As [`Self::branch_forward`]; `geometry_bias = false` drops both
    /// geometric bias terms of a low-capacity branch.
    pub fn branch_forward_with(
        &self,
        t: &mut Tape<T>,
        v: &[Var],
        f: Var,
        p: Var,
        g: usize,
        geometry_bias: bool,
    ) -> Result<BranchVars> {
        let n = t.value(p).rows();
        if n < self.cfg.k_n {
            return Err(Error::shape("branch", format!("{n} points for k_n={}", self.cfg.k_n)));
        }
        let kp = self.extract_keypoints(t, v, f, p, g)?;
        match &self.branches[g] {
            Branch::High(b) => self.high_forward(b, t, v, f, p, kp),
            Branch::Low(b) => self.low_forward(b, t, v, f, p, kp, geometry_bias),
        }
    }

    /// Regresses rotation, translation and scale from the pooled branch
    /// outputs.
    pub fn pose_head(&self, t: &mut Tape<T>, v: &[Var], out: &BranchVars) -> Result<PoseVars> {
        let cat = t.concat(&[out.f_hat, out.kp.p_kpt, out.nocs])?;
        let pooled = t.mean_axis(cat, 0)?;
        let raw_rotation = self.head.rotation.forward(t, v, pooled)?;
        let tr = self.head.translation.forward(t, v, pooled)?;
        let log_s = self.head.log_scale.forward(t, v, pooled)?;
        let s = t.exp(log_s)?;
        let (r, degenerate) = gram_schmidt(t, raw_rotation)?;
        Ok(PoseVars { raw_rotation, r, t: tr, s, degenerate })
    }

    /// Full forward pass of one instance through branch `g`.
    pub fn forward(&self, t: &mut Tape<T>, v: &[Var], points: &[Vec3], g: usize) -> Result<Forward> {
        if points.len() < self.cfg.k_n + 1 {
            return Err(Error::shape("encode_points", format!("{} points for k_n={}", points.len(), self.cfg.k_n)));
        }
        let x = t.constant(point_features(points)?);
        let p = t.constant(points_tensor(points)?);
        let f = self.encode_points(t, v, x)?;
        let branch = self.branch_forward(t, v, f, p, g)?;
        let pose = self.pose_head(t, v, &branch)?;
        Ok(Forward { p, f, branch, pose })
    }

    /// Pose prediction for one instance without keeping the tape.
    pub fn predict(&self, points: &[Vec3], g: usize) -> Result<PosePrediction> {
        let mut t = Tape::new();
        let v = t.bind(&self.store);
        let out = self.forward(&mut t, &v, points, g)?;
        Ok(read_pose(&t, &out.pose))
    }

    pub fn branch_output(&self, t: &Tape<T>, b: &BranchVars) -> BranchOutput<T> {
        BranchOutput {
            p_kpt: t.value(b.kp.p_kpt).clone(),
            f_kpt: t.value(b.kp.f_kpt).clone(),
            f_hat: t.value(b.f_hat).clone(),
            nocs: t.value(b.nocs).clone(),
            w: t.value(b.kp.w).clone(),
        }
    }

    /// Rounds every parameter to the nearest `f32`.
    pub fn round_to_storage(&mut self) {
        for p in self.store.iter_mut() {
            for x in p.value.data_mut() {
                *x = f32_grid(x.as_f64());
            }
        }
    }
}

pub fn read_pose<T: Scalar>(t: &Tape<T>, p: &PoseVars) -> PosePrediction {
    let r = t.value(p.r);
    let raw = t.value(p.raw_rotation).data();
    let tv = t.value(p.t).data();
    let sv = t.value(p.s).data();
    PosePrediction {
        r: [0, 1, 2].map(|i| [0, 1, 2].map(|j| r.at(i, j).as_f64())),
        raw_rotation: [0, 1, 2, 3, 4, 5].map(|i| raw[i].as_f64()),
        t: [0, 1, 2].map(|i| tv[i].as_f64()),
        s: [0, 1, 2].map(|i| sv[i].as_f64()),
    }
}

/// Orthonormal frame from a `1 × 6` vector; columns of the result are the
/// normalized first vector, the orthogonalized second, and their cross
/// product. Returns whether a fixed completion replaced a degenerate input.
pub fn gram_schmidt<T: Scalar>(t: &mut Tape<T>, raw: Var) -> Result<(Var, bool)> {
    let a1 = t.gather_cols(raw, &[0, 1, 2])?;
    let a2 = t.gather_cols(raw, &[3, 4, 5])?;
    let mut degenerate = false;
    let n1 = t.row_norm(a1)?;
    let b1 = if t.value(n1).item().as_f64() <= 1e-12 {
        degenerate = true;
        t.note(raw, "zero first rotation vector");
        t.constant(Tensor::new(vec![1, 3], vec![T::one(), T::zero(), T::zero()])?)
    } else {
        t.div_rows(a1, n1)?
    };
    let project = |t: &mut Tape<T>, x: Var| -> Result<Var> {
        let prod = t.mul(b1, x)?;
        let dot = t.sum_axis(prod, 1)?;
        let along = t.mul_rows(b1, dot)?;
        t.sub(x, along)
    };
    let mut u2 = project(t, a2)?;
    let n2 = t.row_norm(u2)?;
    let n_a2 = t.value(a2).data().iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let n2v = t.value(n2).item().as_f64();
    let n2 = if n2v <= 1e-9 * n_a2.max(1e-300) || n2v <= 1e-12 {
        degenerate = true;
        t.note(raw, "parallel rotation vectors");
        let b = t.value(b1).data();
        let axis = (0..3).min_by(|&i, &j| b[i].abs().as_f64().total_cmp(&b[j].abs().as_f64())).unwrap_or(0);
        let mut e = vec![T::zero(); 3];
        e[axis] = T::one();
        let e = t.constant(Tensor::new(vec![1, 3], e)?);
        u2 = project(t, e)?;
        t.row_norm(u2)?
    } else {
        n2
    };
    let b2 = t.div_rows(u2, n2)?;
    let x1 = t.gather_cols(b1, &[1, 2, 0])?;
    let y1 = t.gather_cols(b2, &[2, 0, 1])?;
    let x2 = t.gather_cols(b1, &[2, 0, 1])?;
    let y2 = t.gather_cols(b2, &[1, 2, 0])?;
    let c1 = t.mul(x1, y1)?;
    let c2 = t.mul(x2, y2)?;
    let b3 = t.sub(c1, c2)?;
    let rows = t.concat(&[b1, b2, b3])?;
    let rows = t.reshape(rows, 3, 3)?;
    Ok((t.transpose(rows)?, degenerate))
}
