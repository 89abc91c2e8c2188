use rand::Rng;

use crate::autodiff::{Shape, Tensor, Var};
use crate::error::{Error, Result};
use crate::estimators::{GroupRole, ParamSet, StochasticObjective};

/// A random test objective over layered Bernoulli units.
///
/// Layer 0 has free logits; layer `i > 0` has logits `(2b_{i-1} - 1) W_i + c_i`.
/// `f` is a two-layer tanh network of all samples (mapped to `{-1, 1}`),
/// plus an optional explicit dependence `κ Σ_j θ_j b_j` on the first layer's
/// probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomNet {
    params: ParamSet,
    sizes: Vec<usize>,
    hidden: usize,
    theta_coupling: f64,
}

impl RandomNet {
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], hidden: usize, rng: &mut R) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) || hidden == 0 {
            return Err(Error::InvalidArgument(format!(
                "random net needs positive sizes, got layers {sizes:?} hidden {hidden}"
            )));
        }
        let mut u = |n: usize, scale: f64| -> Vec<f64> { (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect() };
        let mut params = ParamSet::new();
        params.push("p0.c", Tensor::vector(u(sizes[0], 1.5)), GroupRole::Sampling);
        for i in 1..sizes.len() {
            let (a, b) = (sizes[i - 1], sizes[i]);
            params.push(format!("p{i}.w"), Tensor::matrix(a, b, u(a * b, 1.0))?, GroupRole::Sampling);
            params.push(format!("p{i}.c"), Tensor::vector(u(b, 0.5)), GroupRole::Sampling);
        }
        for (i, &n) in sizes.iter().enumerate() {
            params.push(format!("f.w1.{i}"), Tensor::matrix(n, hidden, u(n * hidden, 1.0))?, GroupRole::Objective);
        }
        params.push("f.b1", Tensor::vector(u(hidden, 0.5)), GroupRole::Objective);
        params.push("f.w2", Tensor::matrix(hidden, 1, u(hidden, 1.5))?, GroupRole::Objective);
        params.push("f.b2", Tensor::vector(u(1, 0.5)), GroupRole::Objective);
        Ok(RandomNet {
            params,
            sizes: sizes.to_vec(),
            hidden,
            theta_coupling: 0.0,
        })
    }

    /// Adds `κ Σ_j θ_j b_j` to `f`, making it depend on `θ` directly.
    pub fn with_theta_coupling(mut self, kappa: f64) -> Self {
        self.theta_coupling = kappa;
        self
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Index of the first `f` group.
    fn f_start(&self) -> usize {
        1 + 2 * (self.sizes.len() - 1)
    }

    pub fn input(rows: usize) -> Tensor {
        Tensor::zeros(Shape::Matrix(rows, 0))
    }
}

fn signed<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    x.scale(2.0)?.shift(-1.0)
}

impl StochasticObjective for RandomNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn layer_sizes(&self) -> Vec<usize> {
        self.sizes.clone()
    }

    fn logits<'t>(&self, p: &[Var<'t>], input: &Tensor, layer: usize, prev: Option<&Var<'t>>) -> Result<Var<'t>> {
        let n = self.sizes[layer];
        if layer == 0 {
            return p[0].reshape(Shape::Matrix(1, n))?.broadcast_to(Shape::Matrix(input.rows(), n));
        }
        let prev = prev.ok_or_else(|| Error::InvalidArgument(format!("layer {layer} needs the previous sample")))?;
        let w = 1 + 2 * (layer - 1);
        signed(prev)?.matmul(&p[w])?.add(&p[w + 1])
    }

    fn evaluate<'t>(&self, p: &[Var<'t>], input: &Tensor, samples: &[Var<'t>]) -> Result<Var<'t>> {
        if samples.len() != self.sizes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} samples for {} layers",
                samples.len(),
                self.sizes.len()
            )));
        }
        let fs = self.f_start();
        let layers = self.sizes.len();
        let mut pre = p[fs + layers];
        for (i, s) in samples.iter().enumerate() {
            pre = signed(s)?.matmul(&p[fs + i])?.add(&pre)?;
        }
        let out = pre.tanh()?.matmul(&p[fs + layers + 1])?.add(&p[fs + layers + 2])?;
        let mut f = out.reshape(Shape::Vector(input.rows()))?;
        if self.theta_coupling != 0.0 {
            let n = self.sizes[0];
            let theta = p[0].sigmoid()?.reshape(Shape::Matrix(1, n))?;
            f = f.add(&samples[0].mul(&theta)?.sum_cols()?.scale(self.theta_coupling)?)?;
        }
        Ok(f)
    }
}
