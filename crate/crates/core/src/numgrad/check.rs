//! Gradient checking of tape-built functions against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fd::gradients_agree;
use super::tape::{OpKind, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub checked: usize,
    /// Coordinates within the kink margin of a non-smooth point.
    pub skipped: usize,
    /// Largest relative error among coordinates with gradient above 1e-6.
    pub max_rel_err: f64,
    /// (input index, flat coordinate, analytic, numeric)
    pub failures: Vec<(usize, usize, f64, f64)>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn merge(&mut self, other: &CheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.failures.extend_from_slice(&other.failures);
    }
}

/// Tolerances for [`check_function`].
#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub eps: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// A coordinate is skipped when shifting it by this much changes the
    /// tape's kink signature.
    pub kink_margin: f64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, rel_tol: 1e-4, abs_floor: 1e-7, kink_margin: 1e-3 }
    }
}

/// Checks d(loss)/d(input) for every input of `build`, which receives one
/// differentiable leaf per entry of `inputs` and returns a scalar.
pub fn check_function(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    opts: CheckOptions,
) -> Result<CheckReport> {
    let run = |vals: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.var(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };
    let (tape, vars, loss) = run(inputs)?;
    let centre = tape.kink_signature();
    let grads = tape.grads(loss)?;

    let mut report = CheckReport::default();
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads[v.index()].clone().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            let mut eval = |delta: f64| -> Result<(f64, u64)> {
                probe[i].data_mut()[k] = orig + delta;
                let (t, _, l) = run(&probe)?;
                probe[i].data_mut()[k] = orig;
                Ok((t.value(l).item(), t.kink_signature()))
            };
            let (_, s_hi) = eval(opts.kink_margin)?;
            let (_, s_lo) = eval(-opts.kink_margin)?;
            let (up, s_up) = eval(opts.eps)?;
            let (down, s_down) = eval(-opts.eps)?;
            if [s_hi, s_lo, s_up, s_down].iter().any(|&s| s != centre) {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic.data()[k];
            report.checked += 1;
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            if scale > 1e-6 {
                report.max_rel_err = report.max_rel_err.max(diff / scale);
            }
            if !gradients_agree(a, numeric, opts.rel_tol, opts.abs_floor) {
                report.failures.push((i, k, a, numeric));
            }
        }
    }
    Ok(report)
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_raw(vec![r, c], (0..r * c).map(|_| rng.random_range(lo..hi)).collect())
}

/// Every op kind that has a backward rule.
pub const DIFFERENTIABLE_OPS: &[OpKind] = &[
    OpKind::MatMul,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::ScalarMul,
    OpKind::BiasAdd,
    OpKind::Relu,
    OpKind::MaxZero,
    OpKind::RowSoftmax,
    OpKind::LayerNorm,
    OpKind::Concat,
    OpKind::GatherRows,
    OpKind::GatherCols,
    OpKind::MeanAxis,
    OpKind::SumAxis,
    OpKind::SumAll,
    OpKind::SquaredL2,
    OpKind::SmoothL1,
    OpKind::PairwiseSqDist,
    OpKind::MinAxis,
    OpKind::Transpose,
    OpKind::Reshape,
    OpKind::Exp,
    OpKind::RowNorm,
    OpKind::MulRows,
    OpKind::DivRows,
];

/// Gradient check of a single op on random inputs drawn from `seed`. The op
/// output is contracted with a random constant weight to form a scalar.
pub fn check_op(kind: OpKind, seed: u64, opts: CheckOptions) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |r, c| random(&mut rng, r, c, -1.0, 1.0);
    let (inputs, axis): (Vec<Tensor<f64>>, usize) = match kind {
        OpKind::MatMul => (vec![r(3, 4), r(4, 2)], 0),
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::SmoothL1 => (vec![r(3, 4), r(3, 4)], 0),
        OpKind::BiasAdd => (vec![r(3, 4), r(1, 4)], 0),
        OpKind::LayerNorm => (vec![r(3, 5), r(1, 5), r(1, 5)], 0),
        OpKind::Concat => (vec![r(3, 2), r(3, 3)], 0),
        OpKind::GatherRows => (vec![r(4, 3)], 0),
        OpKind::MeanAxis | OpKind::SumAxis | OpKind::MinAxis => (vec![r(3, 4)], (seed % 2) as usize),
        OpKind::PairwiseSqDist => (vec![r(3, 3), r(4, 3)], 0),
        OpKind::MulRows => (vec![r(3, 4), r(3, 1)], 0),
        OpKind::DivRows => {
            let x = r(3, 4);
            let s = r(3, 1).map(|v| if v < 0.0 { v - 0.5 } else { v + 0.5 });
            (vec![x, s], 0)
        }
        _ => (vec![r(3, 4)], 0),
    };
    let build = move |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let out = match kind {
            OpKind::MatMul => t.matmul(v[0], v[1])?,
            OpKind::Add => t.add(v[0], v[1])?,
            OpKind::Sub => t.sub(v[0], v[1])?,
            OpKind::Mul => t.mul(v[0], v[1])?,
            OpKind::ScalarMul => t.scalar_mul(v[0], 1.7)?,
            OpKind::BiasAdd => t.bias_add(v[0], v[1])?,
            OpKind::Relu => t.relu(v[0])?,
            OpKind::MaxZero => t.max_with_zero(v[0])?,
            OpKind::RowSoftmax => t.row_softmax(v[0])?,
            OpKind::LayerNorm => t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)?,
            OpKind::Concat => t.concat(&[v[0], v[1]])?,
            OpKind::GatherRows => t.gather_rows(v[0], &[2, 0, 2, 3])?,
            OpKind::GatherCols => t.gather_cols(v[0], &[1, 1, 3])?,
            OpKind::MeanAxis => t.mean_axis(v[0], axis)?,
            OpKind::SumAxis => t.sum_axis(v[0], axis)?,
            OpKind::SumAll => t.sum_all(v[0])?,
            OpKind::SquaredL2 => t.squared_l2(v[0])?,
            OpKind::SmoothL1 => t.smooth_l1(v[0], v[1], 0.5)?,
            OpKind::PairwiseSqDist => t.pairwise_sq_distances(v[0], v[1])?,
            OpKind::MinAxis => t.min_axis(v[0], axis)?,
            OpKind::Transpose => t.transpose(v[0])?,
            OpKind::Reshape => t.reshape(v[0], 2, 6)?,
            OpKind::Exp => t.exp(v[0])?,
            OpKind::RowNorm => t.row_norm(v[0])?,
            OpKind::MulRows => t.mul_rows(v[0], v[1])?,
            OpKind::DivRows => t.div_rows(v[0], v[1])?,
            OpKind::Leaf | OpKind::Param => t.squared_l2(v[0])?,
        };
        // Deterministic contraction weights derived from the output shape.
        let shape = t.value(out).shape().to_vec();
        let n = shape.iter().product::<usize>();
        let w: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.7548776662466927).fract() - 0.5).collect();
        let w = t.constant(Tensor::from_raw(shape, w));
        let prod = t.mul(out, w)?;
        t.sum_all(prod)
    };
    check_function(&inputs, build, opts)
}

/// Checks d(loss)/d(param) for every parameter of `store` whose block
/// matches `pred`. `build` receives the bound parameter leaves.
pub fn check_params(
    store: &super::ParamStore<f64>,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    opts: CheckOptions,
    pred: impl Fn(super::Block) -> bool,
) -> Result<CheckReport> {
    check_params_where(store, build, opts, |p, _| pred(p.block))
}

/// As [`check_params`], but only the coordinates `(param, flat index)` that
/// `pick` accepts are probed.
pub fn check_params_where(
    store: &super::ParamStore<f64>,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    opts: CheckOptions,
    pick: impl Fn(&super::Param<f64>, usize) -> bool,
) -> Result<CheckReport> {
    let run = |s: &super::ParamStore<f64>| -> Result<(Tape<f64>, Var)> {
        let mut tape = Tape::new();
        let vars = tape.bind(s);
        let loss = build(&mut tape, &vars)?;
        Ok((tape, loss))
    };
    let (tape, loss) = run(store)?;
    let centre = tape.kink_signature();
    let grads = tape.backward(loss, store)?;
    let mut work = store.clone();
    let mut report = CheckReport::default();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for k in 0..store.value(id).len() {
            if !pick(store.get(id), k) {
                continue;
            }
            let orig = store.value(id).data()[k];
            let mut eval = |delta: f64| -> Result<(f64, u64)> {
                work.get_mut(id).value.data_mut()[k] = orig + delta;
                let (t, l) = run(&work)?;
                work.get_mut(id).value.data_mut()[k] = orig;
                Ok((t.value(l).item(), t.kink_signature()))
            };
            let (_, s_hi) = eval(opts.kink_margin)?;
            let (_, s_lo) = eval(-opts.kink_margin)?;
            let (up, s_up) = eval(opts.eps)?;
            let (down, s_down) = eval(-opts.eps)?;
            if [s_hi, s_lo, s_up, s_down].iter().any(|&s| s != centre) {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = grads.get(id).data()[k];
            report.checked += 1;
            let diff = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            if scale > 1e-6 {
                report.max_rel_err = report.max_rel_err.max(diff / scale);
            }
            if !gradients_agree(a, numeric, opts.rel_tol, opts.abs_floor) {
                report.failures.push((id.0, k, a, numeric));
            }
        }
    }
    Ok(report)
}
