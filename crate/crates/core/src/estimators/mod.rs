//! Single-sample gradient estimators for `d/dθ E_{p(b|θ)}[f(b, θ)]`.
//!
//! Every estimator is expressed through two scalar surrogates built on one
//! tape: `A`, whose gradient is the uncorrected part of the estimate, and `C`,
//! whose gradient is the control-variate part. The estimate for group `g` is
//! `∇A - η_g ∇C`, which keeps it exactly affine in `η`.

mod adapt;
mod baseline;
mod objective;

pub use adapt::ControlVariateState;
pub use baseline::{Baseline, BaselineNet};
pub use objective::{GroupRole, ParamGroup, ParamSet, Sense, StochasticObjective};

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{logit, sigmoid, Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::reparam::{
    conditional_uniform_logit_var, conditional_z_var, couple_scalar, log_prob_bernoulli_rows, modified_multiplier,
    relax, uniform_tensor, Temperature,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    Reinforce,
    Nvil,
    Muprop,
    SimpleMuprop,
    Concrete,
    Rebar,
    RebarModified,
    RebarAlt,
    RebarMultilayer,
    RebarCoupledMultilayer,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 10] = [
        EstimatorKind::Reinforce,
        EstimatorKind::Nvil,
        EstimatorKind::Muprop,
        EstimatorKind::SimpleMuprop,
        EstimatorKind::Concrete,
        EstimatorKind::Rebar,
        EstimatorKind::RebarModified,
        EstimatorKind::RebarAlt,
        EstimatorKind::RebarMultilayer,
        EstimatorKind::RebarCoupledMultilayer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Reinforce => "reinforce",
            EstimatorKind::Nvil => "nvil",
            EstimatorKind::Muprop => "muprop",
            EstimatorKind::SimpleMuprop => "simple_muprop",
            EstimatorKind::Concrete => "concrete",
            EstimatorKind::Rebar => "rebar",
            EstimatorKind::RebarModified => "rebar_modified",
            EstimatorKind::RebarAlt => "rebar_alt",
            EstimatorKind::RebarMultilayer => "rebar_multilayer",
            EstimatorKind::RebarCoupledMultilayer => "rebar_coupled_multilayer",
        }
    }

    pub fn is_unbiased(self) -> bool {
        self != EstimatorKind::Concrete
    }

    /// Whether the estimate depends on the temperature.
    pub fn uses_temperature(self) -> bool {
        matches!(
            self,
            EstimatorKind::Concrete
                | EstimatorKind::Rebar
                | EstimatorKind::RebarModified
                | EstimatorKind::RebarAlt
                | EstimatorKind::RebarMultilayer
                | EstimatorKind::RebarCoupledMultilayer
        )
    }

    /// Whether the estimate has a control-variate part scaled by `η`.
    pub fn uses_eta(self) -> bool {
        !matches!(self, EstimatorKind::Reinforce | EstimatorKind::Nvil | EstimatorKind::Concrete)
    }

    /// Whether the estimator handles more than one stochastic layer.
    pub fn supports_multilayer(self) -> bool {
        matches!(
            self,
            EstimatorKind::Reinforce
                | EstimatorKind::Nvil
                | EstimatorKind::SimpleMuprop
                | EstimatorKind::Concrete
                | EstimatorKind::RebarMultilayer
                | EstimatorKind::RebarCoupledMultilayer
        )
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown estimator `{s}`")))
    }
}

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const DEFAULT_FD_STEP: f64 = 1e-3;
/// Scale on the control variate inside the baseline's regression target.
/// A flexible `c(x)` can absorb `η E[cv | x]`, so a target that moved with `η`
/// would leave the pair unidentified and let `η` drift; fixing the scale here
/// pins the baseline and leaves `η` to the variance objective alone.
pub const BASELINE_TARGET_ETA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub temperature: Temperature,
    /// One scaling per parameter group. For `muprop` this is the scaling of the linear term.
    pub eta: Vec<f64>,
    /// Use the modified relaxation `σ_λ(z_λ)`; implied by `rebar_modified`.
    pub modified_relaxation: bool,
    pub adapt_eta: bool,
    pub adapt_lambda: bool,
    /// Step in `log λ` for the finite-difference temperature gradient.
    pub lambda_fd_step: f64,
    pub check_finite: bool,
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind, groups: usize) -> Self {
        EstimatorConfig {
            kind,
            temperature: Temperature::from_psi(DEFAULT_LAMBDA.ln()),
            eta: vec![1.0; groups],
            modified_relaxation: false,
            adapt_eta: false,
            adapt_lambda: false,
            lambda_fd_step: DEFAULT_FD_STEP,
            check_finite: true,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        self.temperature = Temperature::new(lambda)?;
        Ok(self)
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta.iter_mut().for_each(|e| *e = eta);
        self
    }

    pub fn lambda(&self) -> f64 {
        self.temperature.lambda()
    }

    pub fn modified(&self) -> bool {
        self.kind == EstimatorKind::RebarModified || self.modified_relaxation
    }

    pub fn validate(&self, groups: usize) -> Result<()> {
        if self.eta.len() != groups {
            return Err(Error::InvalidArgument(format!(
                "{} η values for {} parameter groups",
                self.eta.len(),
                groups
            )));
        }
        if let Some(e) = self.eta.iter().find(|e| !e.is_finite()) {
            return Err(Error::InvalidArgument(format!("η must be finite, got {e}")));
        }
        let lambda = self.lambda();
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("λ must be positive, got {lambda}")));
        }
        if !(self.lambda_fd_step > 0.0 && self.lambda_fd_step <= 0.1) {
            return Err(Error::InvalidArgument(format!(
                "finite-difference step must lie in (0, 0.1], got {}",
                self.lambda_fd_step
            )));
        }
        Ok(())
    }
}

/// The uniform draws behind one estimate: one `[rows, n_layer]` tensor per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub u: Vec<Tensor>,
}

impl Noise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, rows: usize, layer_sizes: &[usize]) -> Self {
        Noise {
            u: layer_sizes
                .iter()
                .map(|&n| uniform_tensor(rng, Shape::Matrix(rows, n)))
                .collect(),
        }
    }

    fn check(&self, rows: usize, layer_sizes: &[usize]) -> Result<()> {
        if self.u.len() != layer_sizes.len() {
            return Err(Error::InvalidArgument(format!(
                "noise has {} layers, model has {}",
                self.u.len(),
                layer_sizes.len()
            )));
        }
        for (u, &n) in self.u.iter().zip(layer_sizes) {
            if u.shape() != Shape::Matrix(rows, n) {
                return Err(Error::ShapeMismatch {
                    op: "noise",
                    lhs: u.shape(),
                    rhs: Shape::Matrix(rows, n),
                });
            }
        }
        Ok(())
    }
}

/// One single-sample gradient estimate of `E[f]` (ascent direction of `f`).
#[derive(Clone, Debug, PartialEq)]
pub struct GradEstimate {
    /// `base - η ⊙ cv`, one tensor per parameter group.
    pub grads: Vec<Tensor>,
    pub base: Vec<Tensor>,
    pub cv: Vec<Tensor>,
    /// Gradient of the baseline's squared-error loss, when a baseline network is in use.
    pub baseline_grads: Vec<Tensor>,
    /// Minibatch mean of the bracketed coefficient of the score term.
    pub learning_signal: f64,
    /// Minibatch mean of the control-variate evaluation.
    pub cv_value: f64,
    /// Minibatch mean of `f` at the hard sample.
    pub objective: f64,
}

impl GradEstimate {
    pub fn flat(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

/// Draws noise and computes one estimate.
pub fn estimate_with_rng<O: StochasticObjective + ?Sized, R: Rng + ?Sized>(
    obj: &O,
    input: &Tensor,
    cfg: &EstimatorConfig,
    baseline: Option<&Baseline>,
    rng: &mut R,
) -> Result<GradEstimate> {
    let noise = Noise::draw(rng, input.rows(), &obj.layer_sizes());
    estimate(obj, input, &noise, cfg, baseline)
}

/// One estimate from explicit noise. Pure: nothing in `obj`, `cfg` or `baseline` changes.
pub fn estimate<O: StochasticObjective + ?Sized>(
    obj: &O,
    input: &Tensor,
    noise: &Noise,
    cfg: &EstimatorConfig,
    baseline: Option<&Baseline>,
) -> Result<GradEstimate> {
    cfg.validate(obj.params().len())?;
    let sizes = obj.layer_sizes();
    noise.check(input.rows(), &sizes)?;
    if sizes.len() > 1 && !cfg.kind.supports_multilayer() {
        return Err(Error::Unsupported(format!(
            "{} handles a single stochastic layer; use rebar_multilayer or rebar_coupled_multilayer",
            cfg.kind
        )));
    }
    let est = match cfg.kind {
        EstimatorKind::RebarAlt => rebar_alt(obj, input, noise, cfg, baseline)?,
        _ => surrogate_estimate(obj, input, noise, cfg, baseline)?,
    };
    if !est.objective.is_finite() {
        return Err(Error::NonFiniteEstimate {
            estimator: cfg.kind.name(),
            what: "objective",
        });
    }
    if est.grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFiniteEstimate {
            estimator: cfg.kind.name(),
            what: "gradient",
        });
    }
    Ok(est)
}

/// Hard sample of every layer, drawn with the coupled `(b, v)` from `u`.
struct HardPass<'t> {
    alphas: Vec<Var<'t>>,
    b: Vec<Tensor>,
    v: Vec<Tensor>,
    b_vars: Vec<Var<'t>>,
    /// `Σ_i log p(b_i | b_{i-1})` per row.
    logp_total: Var<'t>,
    logp: Vec<Var<'t>>,
}

fn hard_pass<'t, O: StochasticObjective + ?Sized>(
    obj: &O,
    p: &[Var<'t>],
    input: &Tensor,
    noise: &Noise,
) -> Result<HardPass<'t>> {
    let tape = p
        .first()
        .map(|v| v.tape())
        .ok_or_else(|| Error::InvalidArgument("objective has no parameters".into()))?;
    let mut pass = HardPass {
        alphas: Vec::new(),
        b: Vec::new(),
        v: Vec::new(),
        b_vars: Vec::new(),
        logp_total: tape.scalar(0.0),
        logp: Vec::new(),
    };
    for (i, u) in noise.u.iter().enumerate() {
        let alpha = obj.logits(p, input, i, pass.b_vars.last())?;
        if alpha.shape() != u.shape() {
            return Err(Error::ShapeMismatch {
                op: "logits",
                lhs: alpha.shape(),
                rhs: u.shape(),
            });
        }
        let (b, v) = alpha.with_value(|a| couple_tensor(u, a));
        let b_var = tape.constant(b.clone());
        let logp = log_prob_bernoulli_rows(&b_var, &alpha)?;
        pass.logp_total = if i == 0 { logp } else { pass.logp_total.add(&logp)? };
        pass.logp.push(logp);
        pass.alphas.push(alpha);
        pass.b.push(b);
        pass.v.push(v);
        pass.b_vars.push(b_var);
    }
    Ok(pass)
}

fn couple_tensor(u: &Tensor, alpha: &Tensor) -> (Tensor, Tensor) {
    let (b, v): (Vec<f64>, Vec<f64>) = u
        .data()
        .iter()
        .zip(alpha.data())
        .map(|(&u, &a)| couple_scalar(u, a))
        .unzip();
    let shape = u.shape();
    (
        Tensor::new(shape, b).expect("same shape"),
        Tensor::new(shape, v).expect("same shape"),
    )
}

/// `k·α + logit(u)`
fn relaxed_logit<'t>(alpha: &Var<'t>, u: &Tensor, k: f64) -> Result<Var<'t>> {
    let a = if k == 1.0 { *alpha } else { alpha.scale(k)? };
    a.add_const(u.map(logit))
}

/// Completes `prefix` (hard samples of the layers before `first`) with the
/// relaxed sample `first` and relaxed samples of every later layer.
#[allow(clippy::too_many_arguments)]
fn relaxed_tail<'t, O: StochasticObjective + ?Sized>(
    obj: &O,
    p: &[Var<'t>],
    input: &Tensor,
    noise: &Noise,
    prefix: &[Var<'t>],
    first: Var<'t>,
    lambda: f64,
    k: f64,
) -> Result<Vec<Var<'t>>> {
    let mut samples = prefix.to_vec();
    samples.push(first);
    for j in samples.len()..noise.u.len() {
        let alpha = obj.logits(p, input, j, samples.last())?;
        samples.push(relax(&relaxed_logit(&alpha, &noise.u[j], k)?, lambda)?);
    }
    Ok(samples)
}

/// `μ_0 = σ(α_0)`, `μ_i = σ(α_i(μ_{i-1}))`, as constants.
fn mean_field<O: StochasticObjective + ?Sized>(obj: &O, input: &Tensor) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let p = obj.params().on_tape(&tape);
    let mut out: Vec<Var<'_>> = Vec::new();
    for i in 0..obj.layer_sizes().len() {
        let alpha = obj.logits(&p, input, i, out.last())?;
        out.push(alpha.sigmoid()?.detach());
    }
    Ok(out.iter().map(|v| v.value()).collect())
}

fn eta_reference(obj_params: &ParamSet, eta: &[f64]) -> f64 {
    let sampling: Vec<f64> = obj_params
        .groups()
        .iter()
        .zip(eta)
        .filter(|(g, _)| g.role == GroupRole::Sampling)
        .map(|(_, &e)| e)
        .collect();
    let pool = if sampling.is_empty() { eta.to_vec() } else { sampling };
    pool.iter().sum::<f64>() / pool.len().max(1) as f64
}

fn rows_const<'t>(tape: &'t Tape, values: &[f64]) -> Var<'t> {
    tape.constant(Tensor::vector(values.to_vec()))
}

fn accumulate<'t>(acc: Option<Var<'t>>, term: Var<'t>) -> Result<Option<Var<'t>>> {
    Ok(Some(match acc {
        None => term,
        Some(a) => a.add(&term)?,
    }))
}

fn combine(base: &[Tensor], cv: &[Tensor], eta: &[f64]) -> Vec<Tensor> {
    base.iter()
        .zip(cv)
        .zip(eta)
        .map(|((a, c), &e)| {
            let data = a.data().iter().zip(c.data()).map(|(a, c)| a - e * c).collect();
            Tensor::new(a.shape(), data).expect("same shape")
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

struct Baselined {
    values: Vec<f64>,
}

fn baseline_values<O: StochasticObjective + ?Sized>(
    obj: &O,
    input: &Tensor,
    kind: EstimatorKind,
    baseline: Option<&Baseline>,
    rows: usize,
) -> Result<Baselined> {
    let values = match (kind, baseline) {
        (EstimatorKind::Reinforce | EstimatorKind::Concrete, _) | (_, None) => vec![0.0; rows],
        (_, Some(b)) => b.predict(&obj.baseline_features(input))?,
    };
    Ok(Baselined { values })
}

fn baseline_gradients<O: StochasticObjective + ?Sized>(
    obj: &O,
    input: &Tensor,
    kind: EstimatorKind,
    baseline: Option<&Baseline>,
    target: &[f64],
) -> Result<Vec<Tensor>> {
    match (kind, baseline) {
        (EstimatorKind::Reinforce | EstimatorKind::Concrete, _) => Ok(Vec::new()),
        (_, Some(Baseline::Net(net))) => net.regression_gradient(&obj.baseline_features(input), target),
        _ => Ok(Vec::new()),
    }
}

fn surrogate_estimate<O: StochasticObjective + ?Sized>(
    obj: &O,
    input: &Tensor,
    noise: &Noise,
    cfg: &EstimatorConfig,
    baseline: Option<&Baseline>,
) -> Result<GradEstimate> {
    use EstimatorKind as K;
    let kind = cfg.kind;
    let layers = noise.u.len();
    let lambda = cfg.lambda();
    let k = if cfg.modified() { modified_multiplier(lambda) } else { 1.0 };

    let tape = Tape::new();
    tape.set_check_finite(cfg.check_finite);
    let p = obj.params().on_tape(&tape);
    let hard = hard_pass(obj, &p, input, noise)?;
    let f = obj.evaluate(&p, input, &hard.b_vars)?;
    let f_val = f.value().into_data();
    let rows = f_val.len();
    let c = baseline_values(obj, input, kind, baseline, rows)?.values;

    // b-independent offset that is not scaled by η (MuProp's f(b̄))
    let mut offset = vec![0.0; rows];
    // per-layer control-variate coefficient of the score term
    let mut cv_signal: Vec<Vec<f64>> = Vec::new();
    // pathwise part of the C surrogate, per row
    let mut pathwise: Option<Var<'_>> = None;
    let mut relaxed_objective: Option<Var<'_>> = None;

    match kind {
        K::Reinforce | K::Nvil => {}
        K::SimpleMuprop => {
            let mu: Vec<Var<'_>> = mean_field(obj, input)?.into_iter().map(|t| tape.constant(t)).collect();
            let f_mean = obj.evaluate(&p, input, &mu)?.value().into_data();
            cv_signal = vec![f_mean; layers];
        }
        K::Muprop => {
            let theta = hard.alphas[0].value().map(sigmoid);
            let mtape = Tape::new();
            let mp = obj.params().on_tape(&mtape);
            let bbar = mtape.param(theta.clone());
            let fm = obj.evaluate(&mp, input, &[bbar])?;
            let fprime = mtape
                .backward(&fm.sum()?, &[bbar])?
                .into_tensors()
                .pop()
                .expect("one gradient");
            offset = fm.value().into_data();
            let n = theta.cols();
            let lin: Vec<f64> = (0..rows)
                .map(|r| {
                    (0..n)
                        .map(|j| fprime.get(r, j) * (hard.b[0].get(r, j) - theta.get(r, j)))
                        .sum()
                })
                .collect();
            cv_signal = vec![lin];
            // E[f'ᵀ(b - b̄)] = f'ᵀθ - const, differentiated with f' held fixed
            let corr = hard.alphas[0].sigmoid()?.mul_const(fprime)?.sum_cols()?.neg()?;
            pathwise = Some(corr);
        }
        K::Concrete => {
            let z0 = relaxed_logit(&hard.alphas[0], &noise.u[0], 1.0)?;
            let samples = relaxed_tail(obj, &p, input, noise, &[], relax(&z0, lambda)?, lambda, 1.0)?;
            relaxed_objective = Some(obj.evaluate(&p, input, &samples)?);
        }
        K::Rebar | K::RebarModified | K::RebarMultilayer => {
            for i in 0..layers {
                let alpha = &hard.alphas[i];
                let prefix = &hard.b_vars[..i];
                let z = relaxed_logit(alpha, &noise.u[i], k)?;
                let mut zt = conditional_z_var(&hard.v[i], &hard.b[i], alpha)?;
                if k != 1.0 {
                    zt = zt.add(&alpha.scale(k - 1.0)?)?;
                }
                let rel = relaxed_tail(obj, &p, input, noise, prefix, relax(&z, lambda)?, lambda, k)?;
                let cond = relaxed_tail(obj, &p, input, noise, prefix, relax(&zt, lambda)?, lambda, k)?;
                let f_rel = obj.evaluate(&p, input, &rel)?;
                let f_cond = obj.evaluate(&p, input, &cond)?;
                cv_signal.push(f_cond.value().into_data());
                pathwise = accumulate(pathwise, f_cond.sub(&f_rel)?)?;
            }
        }
        K::RebarCoupledMultilayer => {
            let mut rel: Vec<Var<'_>> = Vec::new();
            let mut cond: Vec<Var<'_>> = Vec::new();
            for i in 0..layers {
                let a_rel = obj.logits(&p, input, i, rel.last())?;
                let a_cond = obj.logits(&p, input, i, cond.last())?;
                let z = relaxed_logit(&a_rel, &noise.u[i], k)?;
                // ũ is the conditional uniform under the hard logits; in value it equals u
                let lu = conditional_uniform_logit_var(&hard.v[i], &hard.b[i], &hard.alphas[i])?;
                let zt = if k == 1.0 { a_cond } else { a_cond.scale(k)? }.add(&lu)?;
                rel.push(relax(&z, lambda)?);
                cond.push(relax(&zt, lambda)?);
            }
            let f_rel = obj.evaluate(&p, input, &rel)?;
            let f_cond = obj.evaluate(&p, input, &cond)?;
            cv_signal = vec![f_cond.value().into_data(); layers];
            pathwise = Some(f_cond.sub(&f_rel)?);
        }
        K::RebarAlt => unreachable!("handled separately"),
    }

    let eta_ref = eta_reference(obj.params(), &cfg.eta);
    let cv_avg: Vec<f64> = if cv_signal.is_empty() {
        vec![0.0; rows]
    } else {
        (0..rows)
            .map(|r| cv_signal.iter().map(|s| s[r]).sum::<f64>() / cv_signal.len() as f64)
            .collect()
    };
    let target: Vec<f64> = (0..rows)
        .map(|r| f_val[r] - offset[r] - BASELINE_TARGET_ETA * cv_avg[r])
        .collect();
    let signal: Vec<f64> = (0..rows)
        .map(|r| f_val[r] - offset[r] - eta_ref * cv_avg[r] - c[r])
        .collect();

    let a_sur = match relaxed_objective {
        Some(fr) => fr.mean()?,
        None => {
            let coef: Vec<f64> = (0..rows).map(|r| f_val[r] - c[r] - offset[r]).collect();
            rows_const(&tape, &coef).mul(&hard.logp_total)?.add(&f)?.mean()?
        }
    };
    let base = tape.backward(&a_sur, &p)?.into_tensors();

    let mut c_rows = pathwise;
    for (i, s) in cv_signal.iter().enumerate() {
        c_rows = accumulate(c_rows, rows_const(&tape, s).mul(&hard.logp[i])?)?;
    }
    let cv = match c_rows {
        Some(cr) => tape.backward(&cr.mean()?, &p)?.into_tensors(),
        None => obj.params().zeros_like(),
    };
    let grads = combine(&base, &cv, &cfg.eta);
    let baseline_grads = baseline_gradients(obj, input, kind, baseline, &target)?;

    Ok(GradEstimate {
        grads,
        base,
        cv,
        baseline_grads,
        learning_signal: mean(&signal),
        cv_value: mean(&cv_avg),
        objective: mean(&f_val),
    })
}

/// REBAR assembled from the split into a reparameterizable term and a
/// residual: `η ∇E_z[f(σ_λ(z))] + E_b[(f(b) - η E_{z|b}[f(σ_λ(z))]) ∇log p(b) - η ∇E_{z|b}[f(σ_λ(z))]]`.
/// Each piece lives on its own tape and the conditional sample goes through
/// the inverse coupling instead of the closed form.
fn rebar_alt<O: StochasticObjective + ?Sized>(
    obj: &O,
    input: &Tensor,
    noise: &Noise,
    cfg: &EstimatorConfig,
    baseline: Option<&Baseline>,
) -> Result<GradEstimate> {
    let lambda = cfg.lambda();
    let k = if cfg.modified() { modified_multiplier(lambda) } else { 1.0 };
    let u = &noise.u[0];

    // reparameterizable term
    let rel_grad = {
        let tape = Tape::new();
        tape.set_check_finite(cfg.check_finite);
        let p = obj.params().on_tape(&tape);
        let alpha = obj.logits(&p, input, 0, None)?;
        let z = relaxed_logit(&alpha, u, k)?;
        let f_rel = obj.evaluate(&p, input, &[relax(&z, lambda)?])?;
        tape.backward(&f_rel.mean()?, &p)?.into_tensors()
    };

    // conditional term, z̃ = kα + logit(ũ)
    let (cond_grad, f_cond) = {
        let tape = Tape::new();
        tape.set_check_finite(cfg.check_finite);
        let p = obj.params().on_tape(&tape);
        let alpha = obj.logits(&p, input, 0, None)?;
        let (b, v) = alpha.with_value(|a| couple_tensor(u, a));
        let zt = alpha.scale(k)?.add(&conditional_uniform_logit_var(&v, &b, &alpha)?)?;
        let f_cond = obj.evaluate(&p, input, &[relax(&zt, lambda)?])?;
        (
            tape.backward(&f_cond.mean()?, &p)?.into_tensors(),
            f_cond.value().into_data(),
        )
    };

    // score terms at the hard sample
    let tape = Tape::new();
    tape.set_check_finite(cfg.check_finite);
    let p = obj.params().on_tape(&tape);
    let hard = hard_pass(obj, &p, input, noise)?;
    let f = obj.evaluate(&p, input, &hard.b_vars)?;
    let f_val = f.value().into_data();
    let rows = f_val.len();
    let c = baseline_values(obj, input, cfg.kind, baseline, rows)?.values;
    let coef: Vec<f64> = (0..rows).map(|r| f_val[r] - c[r]).collect();
    let score_f = tape
        .backward(&rows_const(&tape, &coef).mul(&hard.logp_total)?.add(&f)?.mean()?, &p)?
        .into_tensors();
    let score_cv = tape
        .backward(&rows_const(&tape, &f_cond).mul(&hard.logp_total)?.mean()?, &p)?
        .into_tensors();

    let mut grads = Vec::with_capacity(p.len());
    let mut cv = Vec::with_capacity(p.len());
    for g in 0..p.len() {
        let e = cfg.eta[g];
        let shape = score_f[g].shape();
        let n = score_f[g].len();
        let (sf, sc, gr, gc) = (
            score_f[g].data(),
            score_cv[g].data(),
            rel_grad[g].data(),
            cond_grad[g].data(),
        );
        grads.push(Tensor::new(shape, (0..n).map(|j| e * gr[j] + (sf[j] - e * sc[j]) - e * gc[j]).collect())?);
        cv.push(Tensor::new(shape, (0..n).map(|j| sc[j] + gc[j] - gr[j]).collect())?);
    }

    let eta_ref = eta_reference(obj.params(), &cfg.eta);
    let target: Vec<f64> = (0..rows).map(|r| f_val[r] - BASELINE_TARGET_ETA * f_cond[r]).collect();
    let signal: Vec<f64> = (0..rows).map(|r| f_val[r] - eta_ref * f_cond[r] - c[r]).collect();
    let baseline_grads = baseline_gradients(obj, input, cfg.kind, baseline, &target)?;
    Ok(GradEstimate {
        grads,
        base: score_f,
        cv,
        baseline_grads,
        learning_signal: mean(&signal),
        cv_value: mean(&f_cond),
        objective: mean(&f_val),
    })
}
