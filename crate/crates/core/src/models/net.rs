use rand::Rng;

use crate::autodiff::{Shape, Tensor, Var};
use crate::error::Result;
use crate::estimators::{GroupRole, ParamSet};

/// Deterministic layers between stochastic layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Linear,
    /// Two tanh layers of the given width.
    Tanh2 { width: usize },
}

/// Dense network whose weights live in a shared [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    /// `(weight, bias)` group indices, input to output.
    layers: Vec<(usize, usize)>,
}

impl Mlp {
    /// Adds the groups for `in_dim -> out_dim` to `params`. Weights are
    /// `U(±1/√fan_in)`, biases zero.
    pub fn build<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        nonlinearity: Nonlinearity,
        role: GroupRole,
        rng: &mut R,
    ) -> Mlp {
        let dims = match nonlinearity {
            Nonlinearity::Linear => vec![in_dim, out_dim],
            Nonlinearity::Tanh2 { width } => vec![in_dim, width, width, out_dim],
        };
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, d)| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                let wi = params.push(
                    format!("{prefix}.w{l}"),
                    Tensor::matrix(fan_in, fan_out, w).expect("sized"),
                    role,
                );
                let bi = params.push(format!("{prefix}.b{l}"), Tensor::zeros(Shape::Vector(fan_out)), role);
                (wi, bi)
            })
            .collect();
        Mlp { layers }
    }

    pub fn forward<'t>(&self, p: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        let mut h = *x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(&p[w])?.add(&p[b])?;
            if l + 1 < self.layers.len() {
                h = h.tanh()?;
            }
        }
        Ok(h)
    }

    /// Group index of the output bias.
    pub fn output_bias(&self) -> usize {
        self.layers.last().expect("at least one layer").1
    }
}
