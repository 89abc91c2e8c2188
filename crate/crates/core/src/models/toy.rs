use crate::autodiff::{Shape, Tensor, Var};
use crate::error::{Error, Result};
use crate::estimators::{GroupRole, ParamSet, StochasticObjective};

/// `(x - t)²` elementwise, for hard or relaxed `x`.
pub fn toy_loss<'t>(x: &Var<'t>, t: f64) -> Result<Var<'t>> {
    check_target(t)?;
    x.shift(-t)?.square()
}

/// `E_{p(b)}[(b - t)²] = θ(1 - t)² + (1 - θ)t²`.
pub fn toy_expected_loss(theta: f64, t: f64) -> f64 {
    theta * (1.0 - t).powi(2) + (1.0 - theta) * t * t
}

fn check_target(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::OutOfUnitInterval { what: "t", value: t })
    }
}

/// Minimize `Σ_j E[(b_j - t)²]` over independent Bernoulli units with logits `α`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyProblem {
    params: ParamSet,
    t: f64,
}

impl ToyProblem {
    pub fn new(t: f64, alpha: Vec<f64>) -> Result<Self> {
        check_target(t)?;
        if alpha.is_empty() || alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidArgument("toy logits must be finite and non-empty".into()));
        }
        let mut params = ParamSet::new();
        params.push("alpha", Tensor::vector(alpha), GroupRole::Sampling);
        Ok(ToyProblem { params, t })
    }

    pub fn scalar(t: f64, theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::OutOfUnitInterval {
                what: "θ",
                value: theta,
            });
        }
        ToyProblem::new(t, vec![crate::autodiff::logit(theta)])
    }

    pub fn target(&self) -> f64 {
        self.t
    }

    pub fn alpha(&self) -> &[f64] {
        self.params.group(0).value.data()
    }

    pub fn theta(&self) -> Vec<f64> {
        self.alpha().iter().map(|&a| crate::autodiff::sigmoid(a)).collect()
    }

    pub fn expected_loss(&self) -> f64 {
        self.theta().iter().map(|&th| toy_expected_loss(th, self.t)).sum()
    }

    /// The single conditioning row the toy problem is evaluated on.
    pub fn input() -> Tensor {
        Tensor::zeros(Shape::Matrix(1, 0))
    }
}

impl StochasticObjective for ToyProblem {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn layer_sizes(&self) -> Vec<usize> {
        vec![self.params.group(0).value.len()]
    }

    fn logits<'t>(&self, p: &[Var<'t>], input: &Tensor, _layer: usize, _prev: Option<&Var<'t>>) -> Result<Var<'t>> {
        let n = p[0].shape().numel();
        p[0].reshape(Shape::Matrix(1, n))?.broadcast_to(Shape::Matrix(input.rows(), n))
    }

    fn evaluate<'t>(&self, _p: &[Var<'t>], _input: &Tensor, samples: &[Var<'t>]) -> Result<Var<'t>> {
        toy_loss(&samples[0], self.t)?.sum_cols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn loss_values() {
        let tape = Tape::new();
        let b = tape.constant(Tensor::scalar(0.0));
        assert!((toy_loss(&b, 0.45).unwrap().item() - 0.2025).abs() < 1e-15);
        assert!((toy_expected_loss(0.5, 0.45) - 0.2525).abs() < 1e-15);
        assert!((toy_expected_loss(0.0, 0.45) - 0.2025).abs() < 1e-15);
        assert!(toy_loss(&b, 1.0).is_err());
        assert!(ToyProblem::new(0.0, vec![0.0]).is_err());
    }
}
