use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numgrad::{Block, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Rounds through `f32` so stored checkpoints are exact.
pub(crate) fn f32_grid<T: Scalar>(x: f64) -> T {
    T::lit(x as f32 as f64)
}

pub(crate) fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, a: f64) -> Tensor<T> {
    let data = (0..rows * cols).map(|_| f32_grid(rng.random_range(-a..a))).collect();
    Tensor::new(vec![rows, cols], data).expect("finite init")
}

/// Affine map `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        block: Block,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = store.add(format!("{name}.w"), block, uniform(rng, fan_in, fan_out, a))?;
        let b = store.add(format!("{name}.b"), block, Tensor::zeros(&[1, fan_out]))?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, v: &[Var], x: Var) -> Result<Var> {
        let h = t.matmul(x, v[self.w.0])?;
        t.bias_add(h, v[self.b.0])
    }
}

/// Stack of [`Linear`] layers with relu between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        block: Block,
        dims: &[usize],
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), block, w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<T: Scalar>(&self, t: &mut Tape<T>, v: &[Var], mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(t, v, x)?;
            if i < last {
                x = t.relu(x)?;
            }
        }
        Ok(x)
    }

    pub fn output_bias(&self) -> ParamId {
        self.layers.last().expect("non-empty mlp").b
    }
}
