//! Baselines subtracted from the learning signal.

use rand::Rng;

use super::objective::{GroupRole, ParamSet};
use crate::autodiff::{Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A `b`-independent baseline `c(x)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Baseline {
    Constant(f64),
    Net(BaselineNet),
}

impl Baseline {
    /// Baseline value per row of `features`.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<f64>> {
        match self {
            Baseline::Constant(c) => Ok(vec![*c; features.rows()]),
            Baseline::Net(net) => net.predict(features),
        }
    }
}

/// Small MLP mapping centered conditioning input to a scalar per row.
/// With `hidden = 0` it is affine.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineNet {
    pub params: ParamSet,
    in_dim: usize,
    hidden: usize,
}

impl BaselineNet {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let mut dense = |name: &str, fan_in: usize, fan_out: usize, params: &mut ParamSet| {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            params.push(
                format!("baseline.{name}.w"),
                Tensor::matrix(fan_in, fan_out, w).expect("sized"),
                GroupRole::Objective,
            );
            params.push(format!("baseline.{name}.b"), Tensor::zeros(Shape::Vector(fan_out)), GroupRole::Objective);
        };
        if hidden == 0 {
            dense("out", in_dim, 1, &mut params);
        } else {
            dense("h", in_dim, hidden, &mut params);
            dense("out", hidden, 1, &mut params);
        }
        BaselineNet { params, in_dim, hidden }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    fn forward<'t>(&self, p: &[Var<'t>], x: &Var<'t>) -> Result<Var<'t>> {
        let rows = x.shape().dims2().0;
        let out = if self.hidden == 0 {
            x.matmul(&p[0])?.add(&p[1])?
        } else {
            let h = x.matmul(&p[0])?.add(&p[1])?.tanh()?;
            h.matmul(&p[2])?.add(&p[3])?
        };
        out.reshape(Shape::Vector(rows))
    }

    fn check(&self, features: &Tensor) -> Result<()> {
        if features.cols() != self.in_dim || features.shape().rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "baseline",
                lhs: features.shape(),
                rhs: Shape::Matrix(features.rows(), self.in_dim),
            });
        }
        Ok(())
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<f64>> {
        self.check(features)?;
        let tape = Tape::new();
        let p = self.params.on_tape(&tape);
        let x = tape.constant(features.clone());
        Ok(self.forward(&p, &x)?.value().into_data())
    }

    /// Gradient of `mean((c(x) - target)²)` with respect to the baseline parameters.
    pub fn regression_gradient(&self, features: &Tensor, target: &[f64]) -> Result<Vec<Tensor>> {
        self.check(features)?;
        let tape = Tape::new();
        let p = self.params.on_tape(&tape);
        let x = tape.constant(features.clone());
        let c = self.forward(&p, &x)?;
        let loss = c.add_const(Tensor::vector(target.iter().map(|t| -t).collect()))?.square()?.mean()?;
        Ok(tape.backward(&loss, &p)?.into_tensors())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn affine_net_regression_gradient() {
        let mut net = BaselineNet::new(2, 0, &mut seeded(1));
        net.params.group_mut(0).value = Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap();
        net.params.group_mut(1).value = Tensor::vector(vec![0.5]);
        let x = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(net.predict(&x).unwrap(), vec![1.5, -1.5]);
        // residuals (1.5 - 1, -1.5 - 0) = (0.5, -1.5); d/dc mean r² = r
        let g = net.regression_gradient(&x, &[1.0, 0.0]).unwrap();
        assert_eq!(g[1].data(), &[0.5 - 1.5]);
        assert_eq!(g[0].data(), &[0.5, -3.0]);
    }

    #[test]
    fn zero_width_input_uses_bias_only() {
        let net = BaselineNet::new(0, 0, &mut seeded(2));
        let x = Tensor::zeros(Shape::Matrix(3, 0));
        assert_eq!(net.predict(&x).unwrap(), vec![0.0; 3]);
        let g = net.regression_gradient(&x, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(g[1].data(), &[-2.0]);
    }

    #[test]
    fn hidden_layer_shapes() {
        let net = BaselineNet::new(5, 7, &mut seeded(3));
        let x = Tensor::full(Shape::Matrix(4, 5), 0.1);
        assert_eq!(net.predict(&x).unwrap().len(), 4);
        assert!(net.predict(&Tensor::zeros(Shape::Matrix(4, 3))).is_err());
    }
}
