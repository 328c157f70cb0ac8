//! Small parameterized building blocks shared by the models.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Seeded generator used for all parameter initialization.
pub type InitRng = rand_chacha::ChaCha8Rng;

pub fn init_rng(seed: u64) -> InitRng {
    use rand::SeedableRng;
    InitRng::seed_from_u64(seed)
}

/// Uniform(-bound, bound) tensor.
pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Affine map over the last axis: `x @ W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights ~ U(±1/√in), bias zero.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[in_dim, out_dim], bound, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, tape.param(self.weight)?)?;
        match self.bias {
            Some(b) => tape.add(y, tape.param(b)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps: Self::EPS,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, x: Var) -> Result<Var> {
        tape.layer_norm(x, tape.param(self.gamma)?, tape.param(self.beta)?, self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_shapes_and_bias() {
        let mut store = ParamStore::new();
        let mut rng = init_rng(0);
        let lin = Linear::new(&mut store, "l", 3, 2, true, &mut rng);
        store.get_mut(lin.bias.unwrap()).data_mut().copy_from_slice(&[1.0, -1.0]);
        let tape = Tape::with_params(&store);
        let x = tape.constant(Tensor::zeros(&[4, 5, 3]));
        let y = lin.forward(&tape, x).unwrap();
        assert_eq!(tape.shape(y), vec![4, 5, 2]);
        assert_eq!(&tape.value(y).data()[..2], &[1.0, -1.0]);
    }

    #[test]
    fn init_is_seeded() {
        let a = uniform(&[8], 1.0, &mut init_rng(3));
        let b = uniform(&[8], 1.0, &mut init_rng(3));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
    }
}
