use rand::Rng;

use super::net::{Mlp, Nonlinearity};
use crate::autodiff::{logit, Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::estimators::{GroupRole, ParamSet, Sense, StochasticObjective};
use crate::reparam::log_prob_bernoulli_rows;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SbnSpec {
    pub stochastic_layers: usize,
    pub units_per_layer: usize,
    pub deterministic: Nonlinearity,
    pub observation_dim: usize,
}

impl SbnSpec {
    fn validate(&self) -> Result<()> {
        let width_ok = match self.deterministic {
            Nonlinearity::Linear => true,
            Nonlinearity::Tanh2 { width } => width > 0,
        };
        if self.stochastic_layers == 0 || self.units_per_layer == 0 || self.observation_dim == 0 || !width_ok {
            return Err(Error::InvalidArgument(format!("SBN sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SbnTask {
    /// `log p(x, b) - log q(b | x)` with `b ~ q(b | x)`.
    Generative,
    /// `log p(x | b)` with `b ~ p(b | c)`; the first `context_dim` input
    /// columns are `c`, the rest are `x`.
    StructuredPrediction { context_dim: usize },
}

/// Sigmoid belief network. Layer 0 is the stochastic layer next to the data.
/// Binary values enter every network as `2b - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sbn {
    spec: SbnSpec,
    task: SbnTask,
    params: ParamSet,
    /// Sampling networks: `q(b_0 | x)` / `p(b_0 | c)`, then `b_{i-1} -> b_i`.
    up: Vec<Mlp>,
    /// Generative networks `b_{i+1} -> b_i` (generative task only).
    down: Vec<Mlp>,
    /// Top-layer prior logits (generative task only).
    prior: Option<usize>,
    /// Network producing the observation logits.
    out: Mlp,
    /// Training mean of the conditioning input (centering for the inference network).
    input_mean: Vec<f64>,
}

const MEAN_CLAMP: f64 = 1e-3;

impl Sbn {
    /// Generative model. `data_mean` is the per-pixel training mean; it sets
    /// the output bias and centers the inference-network input.
    pub fn generative<R: Rng + ?Sized>(spec: SbnSpec, data_mean: &[f64], rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (d, n, nl) = (spec.observation_dim, spec.units_per_layer, spec.deterministic);
        check_len("data mean", data_mean.len(), d)?;
        let mut params = ParamSet::new();
        let mut up = vec![Mlp::build(&mut params, "q0", d, n, nl, GroupRole::Sampling, rng)];
        for i in 1..spec.stochastic_layers {
            up.push(Mlp::build(&mut params, &format!("q{i}"), n, n, nl, GroupRole::Sampling, rng));
        }
        let prior = Some(params.push("p.prior", Tensor::zeros(Shape::Vector(n)), GroupRole::Objective));
        let down = (0..spec.stochastic_layers - 1)
            .map(|i| Mlp::build(&mut params, &format!("p{i}"), n, n, nl, GroupRole::Objective, rng))
            .collect();
        let out = Mlp::build(&mut params, "px", n, d, nl, GroupRole::Objective, rng);
        init_output_bias(&mut params, &out, data_mean);
        Ok(Sbn {
            spec,
            task: SbnTask::Generative,
            params,
            up,
            down,
            prior,
            out,
            input_mean: data_mean.to_vec(),
        })
    }

    /// Conditional model of `x` given `c`. `target_mean` sets the output bias.
    pub fn structured<R: Rng + ?Sized>(
        spec: SbnSpec,
        context_dim: usize,
        target_mean: &[f64],
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        if context_dim == 0 {
            return Err(Error::InvalidArgument("context dimension must be positive".into()));
        }
        let (d, n, nl) = (spec.observation_dim, spec.units_per_layer, spec.deterministic);
        check_len("target mean", target_mean.len(), d)?;
        let mut params = ParamSet::new();
        let mut up = vec![Mlp::build(&mut params, "pc0", context_dim, n, nl, GroupRole::Sampling, rng)];
        for i in 1..spec.stochastic_layers {
            up.push(Mlp::build(&mut params, &format!("pc{i}"), n, n, nl, GroupRole::Sampling, rng));
        }
        let out = Mlp::build(&mut params, "px", n, d, nl, GroupRole::Objective, rng);
        init_output_bias(&mut params, &out, target_mean);
        Ok(Sbn {
            spec,
            task: SbnTask::StructuredPrediction { context_dim },
            params,
            up,
            down: Vec::new(),
            prior: None,
            out,
            input_mean: vec![0.0; context_dim],
        })
    }

    pub fn spec(&self) -> SbnSpec {
        self.spec
    }

    pub fn task(&self) -> SbnTask {
        self.task
    }

    /// Expected number of input columns.
    pub fn input_dim(&self) -> usize {
        match self.task {
            SbnTask::Generative => self.spec.observation_dim,
            SbnTask::StructuredPrediction { context_dim } => context_dim + self.spec.observation_dim,
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape().rank() != 2 || input.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "sbn input",
                lhs: input.shape(),
                rhs: Shape::Matrix(input.rows(), self.input_dim()),
            });
        }
        Ok(())
    }

    /// `(conditioning, target)` columns of the input.
    fn split(&self, input: &Tensor) -> (Tensor, Tensor) {
        match self.task {
            SbnTask::Generative => (input.clone(), input.clone()),
            SbnTask::StructuredPrediction { context_dim } => split_cols(input, context_dim),
        }
    }

    /// Network input for the first sampling layer.
    fn first_layer_input(&self, cond: &Tensor) -> Tensor {
        match self.task {
            SbnTask::Generative => {
                let d = cond.cols();
                let mut t = cond.clone();
                for (i, x) in t.data_mut().iter_mut().enumerate() {
                    *x -= self.input_mean[i % d];
                }
                t
            }
            SbnTask::StructuredPrediction { .. } => cond.map(|c| 2.0 * c - 1.0),
        }
    }

    /// Per-row `log p(x, b)` (generative) or `log p(x | b)` (structured).
    pub fn log_joint<'t>(&self, p: &[Var<'t>], input: &Tensor, samples: &[Var<'t>]) -> Result<Var<'t>> {
        self.check_input(input)?;
        self.check_samples(samples)?;
        let (_, x) = self.split(input);
        let tape = p[0].tape();
        let last = samples.len() - 1;
        let obs_from = match self.task {
            SbnTask::Generative => &samples[0],
            SbnTask::StructuredPrediction { .. } => &samples[last],
        };
        let x_logits = self.out.forward(p, &signed(obs_from)?)?;
        let mut total = log_prob_bernoulli_rows(&tape.constant(x), &x_logits)?;
        if let Some(prior) = self.prior {
            let n = self.spec.units_per_layer;
            let top = p[prior]
                .reshape(Shape::Matrix(1, n))?
                .broadcast_to(Shape::Matrix(input.rows(), n))?;
            total = total.add(&log_prob_bernoulli_rows(&samples[last], &top)?)?;
            for (i, net) in self.down.iter().enumerate() {
                let logits = net.forward(p, &signed(&samples[i + 1])?)?;
                total = total.add(&log_prob_bernoulli_rows(&samples[i], &logits)?)?;
            }
        }
        Ok(total)
    }

    /// Per-row `log q(b | x)` of the sampling distribution.
    pub fn log_q<'t>(&self, p: &[Var<'t>], input: &Tensor, samples: &[Var<'t>]) -> Result<Var<'t>> {
        super::sample_log_prob(self, p, input, samples)
    }

    /// Single-sample bound per row: `log p(x, b) - log q(b | x)` or `log p(x | b)`.
    pub fn elbo<'t>(&self, p: &[Var<'t>], input: &Tensor, samples: &[Var<'t>]) -> Result<Var<'t>> {
        match self.task {
            SbnTask::Generative => self.log_joint(p, input, samples)?.sub(&self.log_q(p, input, samples)?),
            SbnTask::StructuredPrediction { .. } => self.log_joint(p, input, samples),
        }
    }

    /// Exact per-row `log p(x)` (or `log p(x | c)`) by enumerating every latent configuration.
    pub fn exact_log_marginal(&self, input: &Tensor) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let n = self.spec.units_per_layer;
        let layers = self.spec.stochastic_layers;
        let bits = n * layers;
        if bits > 20 {
            return Err(Error::OutcomeOverflow {
                outcomes: 1u128 << bits.min(127),
                cap: 1 << 20,
            });
        }
        let rows = input.rows();
        let tape = Tape::new();
        let p = self.params.on_tape(&tape);
        let mut terms: Vec<Vec<f64>> = Vec::with_capacity(1 << bits);
        for code in 0u64..(1u64 << bits) {
            let samples: Vec<Var<'_>> = (0..layers)
                .map(|l| {
                    let bitsv: Vec<f64> = (0..n).map(|j| ((code >> (l * n + j)) & 1) as f64).collect();
                    let data = bitsv.iter().copied().cycle().take(rows * n).collect();
                    tape.constant(Tensor::matrix(rows, n, data).expect("sized"))
                })
                .collect();
            let lp = match self.task {
                SbnTask::Generative => self.log_joint(&p, input, &samples)?,
                SbnTask::StructuredPrediction { .. } => self
                    .log_joint(&p, input, &samples)?
                    .add(&super::sample_log_prob(self, &p, input, &samples)?)?,
            };
            terms.push(lp.value().into_data());
        }
        Ok((0..rows)
            .map(|r| {
                let m = terms.iter().map(|t| t[r]).fold(f64::NEG_INFINITY, f64::max);
                m + terms.iter().map(|t| (t[r] - m).exp()).sum::<f64>().ln()
            })
            .collect())
    }

    fn check_samples(&self, samples: &[Var<'_>]) -> Result<()> {
        if samples.len() != self.spec.stochastic_layers {
            return Err(Error::InvalidArgument(format!(
                "{} samples for {} stochastic layers",
                samples.len(),
                self.spec.stochastic_layers
            )));
        }
        Ok(())
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::InvalidArgument(format!("{what} has length {got}, expected {want}")));
    }
    Ok(())
}

fn init_output_bias(params: &mut ParamSet, out: &Mlp, mean: &[f64]) {
    let bias = mean.iter().map(|&m| logit(m.clamp(MEAN_CLAMP, 1.0 - MEAN_CLAMP))).collect();
    params.group_mut(out.output_bias()).value = Tensor::vector(bias);
}

fn signed<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    x.scale(2.0)?.shift(-1.0)
}

fn split_cols(input: &Tensor, at: usize) -> (Tensor, Tensor) {
    let (rows, cols) = (input.rows(), input.cols());
    let mut left = Vec::with_capacity(rows * at);
    let mut right = Vec::with_capacity(rows * (cols - at));
    for r in 0..rows {
        let row = input.row(r);
        left.extend_from_slice(&row[..at]);
        right.extend_from_slice(&row[at..]);
    }
    (
        Tensor::matrix(rows, at, left).expect("sized"),
        Tensor::matrix(rows, cols - at, right).expect("sized"),
    )
}

impl StochasticObjective for Sbn {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn layer_sizes(&self) -> Vec<usize> {
        vec![self.spec.units_per_layer; self.spec.stochastic_layers]
    }

    fn sense(&self) -> Sense {
        Sense::Maximize
    }

    fn logits<'t>(&self, p: &[Var<'t>], input: &Tensor, layer: usize, prev: Option<&Var<'t>>) -> Result<Var<'t>> {
        if layer == 0 {
            self.check_input(input)?;
            let (cond, _) = self.split(input);
            let x = p[0].tape().constant(self.first_layer_input(&cond));
            return self.up[0].forward(p, &x);
        }
        let prev = prev.ok_or_else(|| Error::InvalidArgument(format!("layer {layer} needs the previous sample")))?;
        self.up[layer].forward(p, &signed(prev)?)
    }

    fn evaluate<'t>(&self, p: &[Var<'t>], input: &Tensor, samples: &[Var<'t>]) -> Result<Var<'t>> {
        self.elbo(p, input, samples)
    }

    fn baseline_features(&self, input: &Tensor) -> Tensor {
        let (cond, _) = self.split(input);
        self.first_layer_input(&cond)
    }
}
