//! Sampling and reparameterization primitives for binary and categorical latents.
//!
//! Binary units use the Logistic reparameterization `z = α + logit(u)` with
//! `b = H(z)`. The conditional `z | b` is drawn from a second uniform `v`
//! through a closed form that keeps the sign of `z` consistent with `b`.
//! Categorical units use Gumbel-max with a truncated-Gumbel conditional.
//!
//! Plain-slice functions are used for sampling and checks; the `*_var`
//! variants record the same formulas on a [`Tape`](crate::autodiff::Tape) so
//! they can be differentiated with respect to the logits.

use rand::Rng;

use crate::autodiff::{logit, sigmoid, softplus, Shape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Bernoulli parameters stored as logits `α = log θ/(1-θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitParam {
    alpha: Vec<f64>,
}

impl LogitParam {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if let Some(a) = alpha.iter().find(|a| !a.is_finite()) {
            return Err(Error::InvalidArgument(format!("logit must be finite, got {a}")));
        }
        Ok(LogitParam { alpha })
    }

    pub fn from_probs(theta: &[f64]) -> Result<Self> {
        for &t in theta {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::OutOfUnitInterval {
                    what: "theta",
                    value: t,
                });
            }
        }
        LogitParam::new(theta.iter().map(|&t| logit(t)).collect())
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn theta(&self) -> Vec<f64> {
        self.alpha.iter().map(|&a| sigmoid(a)).collect()
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinarySample {
    pub b: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalSample {
    pub b: Vec<f64>,
    pub z: Vec<f64>,
    pub p: Vec<f64>,
}

impl CategoricalSample {
    pub fn hot_index(&self) -> usize {
        self.b.iter().position(|&x| x == 1.0).unwrap_or(0)
    }
}

/// Relaxation temperature, stored as `ψ = log λ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature {
    psi: f64,
}

impl Temperature {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {lambda}")));
        }
        Ok(Temperature { psi: lambda.ln() })
    }

    pub fn from_psi(psi: f64) -> Self {
        Temperature { psi }
    }

    pub fn psi(&self) -> f64 {
        self.psi
    }

    pub fn lambda(&self) -> f64 {
        self.psi.exp()
    }
}

fn check_unit(what: &'static str, xs: &[f64]) -> Result<()> {
    match xs.iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
        Some(&value) => Err(Error::OutOfUnitInterval { what, value }),
        None => Ok(()),
    }
}

/// `z = α + logit(u)`.
pub fn sample_z(u: &[f64], theta: &LogitParam) -> Result<Vec<f64>> {
    check_unit("u", u)?;
    Ok(u.iter().zip(theta.alpha()).map(|(&u, &a)| a + logit(u)).collect())
}

pub fn sample_binary<R: Rng + ?Sized>(rng: &mut R, theta: &LogitParam) -> BinarySample {
    let u = rng::uniforms(rng, theta.len());
    let z: Vec<f64> = u.iter().zip(theta.alpha()).map(|(&u, &a)| a + logit(u)).collect();
    BinarySample {
        b: hard_threshold(&z),
        z,
        u,
    }
}

/// `H(z)`, with `z = 0` mapped to 1.
pub fn hard_threshold(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&z| if z >= 0.0 { 1.0 } else { 0.0 }).collect()
}

pub fn relax_value(z: f64, lambda: f64) -> f64 {
    sigmoid(z / lambda)
}

/// `σ(z / λ)` on the tape.
pub fn relax<'t>(z: &Var<'t>, lambda: f64) -> Result<Var<'t>> {
    z.scale(1.0 / lambda)?.sigmoid()
}

/// `σ(z / λ)` with `λ` itself a tape value.
pub fn relax_var<'t>(z: &Var<'t>, lambda: &Var<'t>) -> Result<Var<'t>> {
    z.div(lambda)?.sigmoid()
}

/// Draw of `z | b` for binary `b`:
/// `log(v/(1-v) · 1/(1-θ) + 1)` if `b = 1`, `-log(v/(1-v) · 1/θ + 1)` if `b = 0`.
pub fn conditional_z(v: &[f64], b: &[f64], theta: &LogitParam) -> Result<Vec<f64>> {
    check_unit("v", v)?;
    Ok(v.iter()
        .zip(b)
        .zip(theta.alpha())
        .map(|((&v, &b), &a)| conditional_z_scalar(v, b, a))
        .collect())
}

fn conditional_z_scalar(v: f64, b: f64, alpha: f64) -> f64 {
    // 1/(1-θ) = 1 + e^α and 1/θ = 1 + e^-α, so both branches are s·softplus(logit v + softplus(s α)).
    let s = if b >= 0.5 { 1.0 } else { -1.0 };
    s * softplus(logit(v) + softplus(s * alpha))
}

/// Tape version of [`conditional_z`]; `v` and `b` are constants, `alpha` carries the gradient.
pub fn conditional_z_var<'t>(v: &Tensor, b: &Tensor, alpha: &Var<'t>) -> Result<Var<'t>> {
    let tape = alpha.tape();
    let sign = b.map(|b| if b >= 0.5 { 1.0 } else { -1.0 });
    let logit_v = v.map(logit);
    let s = tape.constant(sign);
    alpha.mul(&s)?.softplus()?.add_const(logit_v)?.softplus()?.mul(&s)
}

/// Common-random-numbers coupling: from one uniform `u` produce the hard
/// sample `b = H(g(u, θ))` and the `v` for which `g̃(v, b, θ) = g(u, θ)`.
///
/// With `u' = 1 - θ`: `v = (u - u')/(1 - u')` when `b = 1` and
/// `v = 1 - u/u'` when `b = 0`.
pub fn couple_uv(u: &[f64], theta: &LogitParam) -> Result<(Vec<f64>, Vec<f64>)> {
    check_unit("u", u)?;
    let mut b = Vec::with_capacity(u.len());
    let mut v = Vec::with_capacity(u.len());
    for (&u, &a) in u.iter().zip(theta.alpha()) {
        let (bi, vi) = couple_scalar(u, a);
        b.push(bi);
        v.push(vi);
    }
    Ok((b, v))
}

pub(crate) fn couple_scalar(u: f64, alpha: f64) -> (f64, f64) {
    let z = alpha + logit(u);
    let b = if z >= 0.0 { 1.0 } else { 0.0 };
    // u' = σ(-α), 1 - u' = σ(α)
    let v = if b == 1.0 {
        (u - sigmoid(-alpha)) / sigmoid(alpha)
    } else {
        (sigmoid(-alpha) - u) / sigmoid(-alpha)
    };
    (b, rng::clamp_unit(v))
}

/// `logit(ũ)` where `ũ` is the uniform that, under logits `α`, reproduces `b`
/// from the conditional draw `v`. Equals `g̃(v, b, θ) - α` but is evaluated
/// through the inverse coupling rather than the closed form.
pub fn conditional_uniform_logit_var<'t>(v: &Tensor, b: &Tensor, alpha: &Var<'t>) -> Result<Var<'t>> {
    let tape = alpha.tape();
    let sign = b.map(|b| if b >= 0.5 { 1.0 } else { -1.0 });
    let s = tape.constant(sign);
    let a = alpha.mul(&s)?;
    // s · [log(σ(-a) + v σ(a)) − log σ(a) − log(1 − v)]
    let inner = a.neg()?.sigmoid()?.add(&a.sigmoid()?.mul_const(v.clone())?)?.log()?;
    let log_one_minus_v = v.map(|v| (-v).ln_1p());
    inner.sub(&a.log_sigmoid()?)?.sub(&tape.constant(log_one_minus_v))?.mul(&s)
}

/// Scale applied to the logits in the modified relaxation: `(λ² + λ + 1)/(λ + 1)`.
pub fn modified_multiplier(lambda: f64) -> f64 {
    (lambda * lambda + lambda + 1.0) / (lambda + 1.0)
}

/// `z_λ = (λ² + λ + 1)/(λ + 1) · α + logit(u)`.
pub fn modified_z(u: &[f64], theta: &LogitParam, lambda: Temperature) -> Result<Vec<f64>> {
    check_unit("u", u)?;
    let m = modified_multiplier(lambda.lambda());
    Ok(u.iter().zip(theta.alpha()).map(|(&u, &a)| m * a + logit(u)).collect())
}

/// `Σ b log θ + (1 - b) log(1 - θ) = Σ b α - softplus(α)`, summed over all entries.
pub fn log_prob_bernoulli<'t>(b: &Tensor, alpha: &Var<'t>) -> Result<Var<'t>> {
    alpha.mul_const(b.clone())?.sub(&alpha.softplus()?)?.sum()
}

/// Per-row Bernoulli log-probability of `b` (shape `[rows, n]`) under logits `alpha`.
pub fn log_prob_bernoulli_rows<'t>(b: &Var<'t>, alpha: &Var<'t>) -> Result<Var<'t>> {
    alpha.mul(b)?.sub(&alpha.softplus()?)?.sum_cols()
}

pub fn log_prob_bernoulli_value(b: &[f64], theta: &LogitParam) -> f64 {
    b.iter().zip(theta.alpha()).map(|(&b, &a)| b * a - softplus(a)).sum()
}

const SIMPLEX_TOL: f64 = 1e-12;

fn check_simplex(p: &[f64]) -> Result<()> {
    if p.len() < 2 {
        return Err(Error::InvalidSimplex(format!("need at least 2 outcomes, got {}", p.len())));
    }
    if let Some(x) = p.iter().find(|&&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::InvalidSimplex(format!("entry {x} is not positive")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidSimplex(format!("entries sum to {total}")));
    }
    Ok(())
}

/// Gumbel-max: `z_i = log p_i - log(-log u_i)`, `b = onehot(argmax z)`, ties to the lowest index.
pub fn gumbel_max_sample(u: &[f64], p: &[f64]) -> Result<CategoricalSample> {
    check_simplex(p)?;
    check_unit("u", u)?;
    if u.len() != p.len() {
        return Err(Error::InvalidArgument(format!(
            "{} uniforms for {} categories",
            u.len(),
            p.len()
        )));
    }
    let z: Vec<f64> = u.iter().zip(p).map(|(&u, &p)| p.ln() - (-u.ln()).ln()).collect();
    let k = argmax(&z);
    let mut b = vec![0.0; p.len()];
    b[k] = 1.0;
    Ok(CategoricalSample { b, z, p: p.to_vec() })
}

pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in z.iter().enumerate().skip(1) {
        if x > z[best] {
            best = i;
        }
    }
    best
}

/// Draw of `z | b` for one-hot `b` with hot index `k`: `z_k` is a standard
/// Gumbel and every other coordinate is `Gumbel(log p_i)` truncated at `z_k`,
/// `z_i = -log(-(log v_i)/p_i - log v_k)`.
pub fn truncated_gumbel_conditional(v: &[f64], b: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    check_simplex(p)?;
    check_unit("v", v)?;
    if b.len() != p.len() || v.len() != p.len() {
        return Err(Error::InvalidOneHot(format!(
            "lengths differ: b={}, v={}, p={}",
            b.len(),
            v.len(),
            p.len()
        )));
    }
    let ones = b.iter().filter(|&&x| x == 1.0).count();
    if ones != 1 || b.iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::InvalidOneHot(format!("{b:?}")));
    }
    let k = b.iter().position(|&x| x == 1.0).unwrap_or(0);
    let top = -v[k].ln();
    Ok((0..p.len())
        .map(|i| {
            if i == k {
                -top.ln()
            } else {
                -(-v[i].ln() / p[i] + top).ln()
            }
        })
        .collect())
}

pub fn uniform_tensor<R: Rng + ?Sized>(rng: &mut R, shape: Shape) -> Tensor {
    let data = rng::uniforms(rng, shape.numel());
    Tensor::new(shape, data).expect("shape and data agree")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn lp(theta: &[f64]) -> LogitParam {
        LogitParam::from_probs(theta).unwrap()
    }

    #[test]
    fn sample_z_examples() {
        assert_eq!(sample_z(&[0.5], &lp(&[0.5])).unwrap(), vec![0.0]);
        let z = sample_z(&[0.5], &lp(&[0.7])).unwrap()[0];
        assert!((z - 0.847_297_860_387_203_8).abs() < 1e-12);
        assert!(matches!(
            sample_z(&[0.0], &lp(&[0.5])),
            Err(Error::OutOfUnitInterval { what: "u", .. })
        ));
        assert!(sample_z(&[1.0], &lp(&[0.5])).is_err());
    }

    #[test]
    fn hard_threshold_ties_to_one() {
        assert_eq!(hard_threshold(&[0.3, -0.2, 0.0]), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn relax_examples() {
        let t = Tape::new();
        let z = t.constant(Tensor::vector(vec![0.0, 1.0]));
        assert_eq!(relax(&z, 3.7).unwrap().value().data()[0], 0.5);
        let r = relax(&z, 0.1).unwrap().value().data()[1];
        assert!((r - 0.999_954_602_131_297_6).abs() < 1e-12);
        assert!((relax_value(1.0, 1e9) - 0.5).abs() < 1e-9);
        let lam = t.param(Tensor::scalar(0.1));
        let r2 = relax_var(&z, &lam).unwrap().value().data()[1];
        assert!((r - r2).abs() < 1e-15);
    }

    #[test]
    fn conditional_z_examples() {
        let z = conditional_z(&[0.5], &[1.0], &lp(&[0.5])).unwrap()[0];
        assert!((z - 3f64.ln()).abs() < 1e-12);
        let z0 = conditional_z(&[0.5], &[0.0], &lp(&[0.5])).unwrap()[0];
        assert!((z0 + 3f64.ln()).abs() < 1e-12);
        assert!(conditional_z(&[1.0], &[1.0], &lp(&[0.5])).is_err());
    }

    #[test]
    fn conditional_z_matches_closed_form() {
        for &(v, b, th) in &[(0.2, 1.0, 0.3), (0.9, 0.0, 0.8), (0.01, 1.0, 0.99), (0.7, 0.0, 0.05)] {
            let w: f64 = v / (1.0 - v);
            let expect = if b == 1.0 {
                (w / (1.0 - th) + 1.0).ln()
            } else {
                -(w / th + 1.0).ln()
            };
            let got = conditional_z(&[v], &[b], &lp(&[th])).unwrap()[0];
            assert!((got - expect).abs() < 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn couple_examples() {
        let (b, v) = couple_uv(&[0.65], &lp(&[0.7])).unwrap();
        assert_eq!(b, vec![1.0]);
        assert!((v[0] - 0.5).abs() < 1e-12);
        let zt = conditional_z(&v, &b, &lp(&[0.7])).unwrap()[0];
        let z = sample_z(&[0.65], &lp(&[0.7])).unwrap()[0];
        assert!((zt - z).abs() < 1e-12);

        let (b, v) = couple_uv(&[0.25], &lp(&[0.5])).unwrap();
        assert_eq!(b, vec![0.0]);
        assert!((v[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn couple_b0_branch_is_an_inverse() {
        // θ = 0.3: u' = 0.7; u = 0.14 gives b = 0 and v = 1 - 0.14/0.7 = 0.8.
        let (b, v) = couple_uv(&[0.14], &lp(&[0.3])).unwrap();
        assert_eq!(b, vec![0.0]);
        assert!((v[0] - 0.8).abs() < 1e-12);
        let zt = conditional_z(&v, &b, &lp(&[0.3])).unwrap()[0];
        let z = sample_z(&[0.14], &lp(&[0.3])).unwrap()[0];
        assert!((zt - z).abs() < 1e-12);
    }

    #[test]
    fn conditional_uniform_route_matches_closed_form() {
        let t = Tape::new();
        let alpha = t.param(Tensor::vector(vec![-1.3, 0.4, 2.2, -0.1]));
        let v = Tensor::vector(vec![0.3, 0.9, 0.05, 0.6]);
        let b = Tensor::vector(vec![1.0, 0.0, 1.0, 0.0]);
        let direct = conditional_z_var(&v, &b, &alpha).unwrap();
        let via_u = alpha.add(&conditional_uniform_logit_var(&v, &b, &alpha).unwrap()).unwrap();
        for (x, y) in direct.value().data().iter().zip(via_u.value().data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let gd = t.backward(&direct.sum().unwrap(), &[alpha]).unwrap();
        let gu = t.backward(&via_u.sum().unwrap(), &[alpha]).unwrap();
        for (x, y) in gd.get(&alpha).unwrap().data().iter().zip(gu.get(&alpha).unwrap().data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn modified_z_examples() {
        assert_eq!(modified_multiplier(1.0), 1.5);
        let th = lp(&[0.3]);
        let z = modified_z(&[0.4], &th, Temperature::new(1.0).unwrap()).unwrap()[0];
        assert!((z - (1.5 * logit(0.3) + logit(0.4))).abs() < 1e-12);
        let big = Temperature::new(1e6).unwrap();
        let zl = modified_z(&[0.4], &th, big).unwrap()[0];
        assert!((relax_value(zl, 1e6) - 0.3).abs() < 1e-4);
    }

    #[test]
    fn log_prob_examples() {
        let t = Tape::new();
        let alpha = t.param(Tensor::vector(vec![0.0]));
        let lp1 = log_prob_bernoulli(&Tensor::vector(vec![1.0]), &alpha).unwrap();
        assert!((lp1.item() - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn temperature_is_positive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        let t = Temperature::new(0.1).unwrap();
        assert!((t.lambda() - 0.1).abs() < 1e-15);
        assert_eq!(Temperature::from_psi(t.psi()), t);
    }

    #[test]
    fn gumbel_examples() {
        let e = (-1f64).exp();
        let p = [0.2, 0.3, 0.5];
        let s = gumbel_max_sample(&[e, e, e], &p).unwrap();
        for (z, p) in s.z.iter().zip(&p) {
            assert!((z - p.ln()).abs() < 1e-12);
        }
        assert_eq!(s.hot_index(), 2);
        assert!(gumbel_max_sample(&[0.5, 0.5], &[0.5, 0.6]).is_err());
        assert!(gumbel_max_sample(&[0.5], &[1.0]).is_err());
    }

    #[test]
    fn truncated_gumbel_examples() {
        let e = (-1f64).exp();
        let z = truncated_gumbel_conditional(&[e, 0.3, 0.8], &[1.0, 0.0, 0.0], &[0.2, 0.3, 0.5]).unwrap();
        assert!(z[0].abs() < 1e-12);
        assert_eq!(argmax(&z), 0);
        assert!(truncated_gumbel_conditional(&[0.5, 0.5], &[1.0, 1.0], &[0.5, 0.5]).is_err());
        assert!(truncated_gumbel_conditional(&[0.5, 0.5], &[0.0, 0.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
