//! The interface between estimators and models.

use crate::autodiff::{Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Whether a parameter group enters the sampling distribution `p(b)` or only `f`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupRole {
    Sampling,
    Objective,
}

/// Direction the trainer moves the objective in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub value: Tensor,
    pub role: GroupRole,
}

/// Ordered list of named parameter groups (one per weight matrix or bias vector).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    groups: Vec<ParamGroup>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, role: GroupRole) -> usize {
        self.groups.push(ParamGroup {
            name: name.into(),
            value,
            role,
        });
        self.groups.len() - 1
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, i: usize) -> &ParamGroup {
        &self.groups[i]
    }

    pub fn group_mut(&mut self, i: usize) -> &mut ParamGroup {
        &mut self.groups[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.groups.iter().map(|g| g.value.len()).sum()
    }

    /// Records every group as a differentiable leaf on `tape`, in order.
    pub fn on_tape<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.groups.iter().map(|g| tape.param(g.value.clone())).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.groups.iter().flat_map(|g| g.value.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut at = 0;
        for g in &mut self.groups {
            let n = g.value.len();
            g.value.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.groups.iter().map(|g| Tensor::zeros(g.value.shape())).collect()
    }
}

/// A layered stochastic objective `E_{p(b|θ)}[f(b, θ)]`.
///
/// Latents are sampled layer by layer: layer `i` has logits that depend on
/// the (hard or relaxed) sample of layer `i - 1`. All tensors carry one row
/// per minibatch element, and `f` is evaluated per row.
pub trait StochasticObjective: Sync {
    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    /// Units per stochastic layer, in sampling order.
    fn layer_sizes(&self) -> Vec<usize>;

    fn sense(&self) -> Sense {
        Sense::Minimize
    }

    /// Logits of layer `layer`, shape `[rows, n_layer]`. `prev` is the sample
    /// of the previous layer (absent for the first layer).
    fn logits<'t>(
        &self,
        params: &[Var<'t>],
        input: &Tensor,
        layer: usize,
        prev: Option<&Var<'t>>,
    ) -> Result<Var<'t>>;

    /// Per-row objective, shape `[rows]`, at one sample per layer. Samples may
    /// be hard `{0,1}` values or relaxed values in `(0,1)`.
    fn evaluate<'t>(&self, params: &[Var<'t>], input: &Tensor, samples: &[Var<'t>]) -> Result<Var<'t>>;

    /// Conditioning features for input-dependent baselines.
    fn baseline_features(&self, input: &Tensor) -> Tensor {
        Tensor::zeros(Shape::Matrix(input.rows(), 0))
    }
}
