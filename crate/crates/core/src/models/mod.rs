//! Objectives `f(b, θ)`: the scalar toy loss, random layered test networks,
//! and sigmoid belief networks.

mod net;
mod random_net;
mod sbn;
mod toy;

pub use net::{Mlp, Nonlinearity};
pub use random_net::RandomNet;
pub use sbn::{Sbn, SbnSpec, SbnTask};
pub use toy::{toy_expected_loss, toy_loss, ToyProblem};

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::estimators::{Noise, StochasticObjective};
use crate::reparam::log_prob_bernoulli_rows;

/// `log(1/k Σ_i exp(log w_i))` per row, where `log w_i` is `f` at the i-th
/// hard sample. For variational objectives `f = log p(x,b) - log q(b|x)`, so
/// this is the k-sample importance-weighted bound.
pub fn multisample_bound<O: StochasticObjective + ?Sized, R: Rng + ?Sized>(
    obj: &O,
    input: &Tensor,
    k: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let rows = input.rows();
    let sizes = obj.layer_sizes();
    let mut log_w: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let noise = Noise::draw(rng, rows, &sizes);
        log_w.push(hard_objective(obj, input, &noise)?);
    }
    Ok((0..rows)
        .map(|r| {
            let m = log_w.iter().map(|w| w[r]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = log_w.iter().map(|w| (w[r] - m).exp()).sum();
            m + (s / k as f64).ln()
        })
        .collect())
}

/// Per-row `f` at the hard sample `b = H(g(u, θ))` drawn from `noise`.
pub fn hard_objective<O: StochasticObjective + ?Sized>(obj: &O, input: &Tensor, noise: &Noise) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let p = obj.params().on_tape(&tape);
    let samples = hard_samples(obj, &p, input, noise)?;
    Ok(obj.evaluate(&p, input, &samples)?.value().into_data())
}

fn hard_samples<'t, O: StochasticObjective + ?Sized>(
    obj: &O,
    p: &[Var<'t>],
    input: &Tensor,
    noise: &Noise,
) -> Result<Vec<Var<'t>>> {
    let tape = p[0].tape();
    let mut out: Vec<Var<'t>> = Vec::new();
    for (i, u) in noise.u.iter().enumerate() {
        let alpha = obj.logits(p, input, i, out.last())?.value();
        let b: Vec<f64> = alpha
            .data()
            .iter()
            .zip(u.data())
            .map(|(&a, &u)| if a + crate::autodiff::logit(u) >= 0.0 { 1.0 } else { 0.0 })
            .collect();
        out.push(tape.constant(Tensor::new(alpha.shape(), b)?));
    }
    Ok(out)
}

/// Per-row `log p(b)` of one configuration under the sampling distribution.
pub fn sample_log_prob<'t, O: StochasticObjective + ?Sized>(
    obj: &O,
    p: &[Var<'t>],
    input: &Tensor,
    samples: &[Var<'t>],
) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for (i, b) in samples.iter().enumerate() {
        let prev = if i == 0 { None } else { Some(&samples[i - 1]) };
        let alpha = obj.logits(p, input, i, prev)?;
        let lp = log_prob_bernoulli_rows(b, &alpha)?;
        total = Some(match total {
            None => lp,
            Some(t) => t.add(&lp)?,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("objective has no stochastic layers".into()))
}
