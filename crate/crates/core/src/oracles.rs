//! Brute-force references: exact gradients by enumeration, quadrature of the
//! one-dimensional relaxed objective, and Monte Carlo means with standard errors.

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::autodiff::{logit, sigmoid, Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::estimators::StochasticObjective;
use crate::models::sample_log_prob;
use crate::rng::{StreamKey, StreamRng};

pub const MAX_OUTCOMES: u128 = 1 << 20;

#[derive(Clone, Debug, PartialEq)]
pub struct EnumerationResult {
    /// Minibatch mean of `E_{p(b)}[f(b, θ)]`.
    pub exact_objective: f64,
    /// `d/dθ` of `exact_objective`, one tensor per parameter group.
    pub exact_grad: Vec<Tensor>,
    /// `Σ_b p(b)` per row; equals 1 up to rounding.
    pub total_probability: Vec<f64>,
}

impl EnumerationResult {
    pub fn flat_grad(&self) -> Vec<f64> {
        self.exact_grad.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

const ENUM_BLOCK: u64 = 64;

/// `Σ_b p(b) f(b, θ)` and its gradient `Σ_b p(b) [∇f(b, θ) + f(b, θ) ∇log p(b)]`,
/// summed over every joint configuration of every stochastic layer.
pub fn exact_gradient_enum<O: StochasticObjective + ?Sized>(obj: &O, input: &Tensor) -> Result<EnumerationResult> {
    let sizes = obj.layer_sizes();
    let bits: usize = sizes.iter().sum();
    let outcomes: u128 = if bits >= 127 { u128::MAX } else { 1u128 << bits };
    if outcomes > MAX_OUTCOMES {
        return Err(Error::OutcomeOverflow {
            outcomes,
            cap: MAX_OUTCOMES,
        });
    }
    let outcomes = outcomes as u64;
    let rows = input.rows();
    let groups = obj.params().len();
    let blocks = outcomes.div_ceil(ENUM_BLOCK);

    // each block returns [objective, Σp per row..., flat gradient...]
    let partials: Vec<Vec<f64>> = (0..blocks)
        .into_par_iter()
        .map(|blk| -> Result<Vec<f64>> {
            let mut acc: Option<Vec<f64>> = None;
            for code in blk * ENUM_BLOCK..((blk + 1) * ENUM_BLOCK).min(outcomes) {
                let part = enumerate_one(obj, input, &sizes, code, rows)?;
                match acc.as_mut() {
                    None => acc = Some(part),
                    Some(a) => a.iter_mut().zip(&part).for_each(|(a, p)| *a += p),
                }
            }
            Ok(acc.expect("non-empty block"))
        })
        .collect::<Result<_>>()?;
    let total = pairwise_sum(partials);

    let exact_objective = total[0];
    let total_probability = total[1..1 + rows].to_vec();
    let mut at = 1 + rows;
    let exact_grad = (0..groups)
        .map(|g| {
            let shape = obj.params().group(g).value.shape();
            let n = shape.numel();
            let t = Tensor::new(shape, total[at..at + n].to_vec()).expect("sized");
            at += n;
            t
        })
        .collect();
    Ok(EnumerationResult {
        exact_objective,
        exact_grad,
        total_probability,
    })
}

fn enumerate_one<O: StochasticObjective + ?Sized>(
    obj: &O,
    input: &Tensor,
    sizes: &[usize],
    code: u64,
    rows: usize,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let p = obj.params().on_tape(&tape);
    let mut offset = 0;
    let samples: Vec<Var<'_>> = sizes
        .iter()
        .map(|&n| {
            let bits: Vec<f64> = (0..n).map(|j| ((code >> (offset + j)) & 1) as f64).collect();
            offset += n;
            let data = bits.iter().copied().cycle().take(rows * n).collect();
            tape.constant(Tensor::matrix(rows, n, data).expect("sized"))
        })
        .collect();
    let prob = sample_log_prob(obj, &p, input, &samples)?.exp()?;
    let f = obj.evaluate(&p, input, &samples)?;
    let weighted = prob.mul(&f)?.mean()?;
    let grads = tape.backward(&weighted, &p)?;
    let mut out = Vec::with_capacity(1 + rows + obj.params().num_scalars());
    out.push(weighted.item());
    out.extend(prob.value().into_data());
    for g in grads.iter() {
        out.extend_from_slice(g.data());
    }
    Ok(out)
}

/// Elementwise sum of equal-length vectors in a fixed binary-tree order.
pub fn pairwise_sum(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    if parts.is_empty() {
        return Vec::new();
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.iter_mut().zip(&b).for_each(|(a, b)| *a += b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().expect("one left")
}

/// Streaming per-component mean and variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Welford {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(dim: usize) -> Self {
        Welford {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = x - *m;
            *m += d / n;
            *s += d * (x - *m);
        }
    }

    /// Combines two accumulators (parallel variance formula).
    pub fn merge(&mut self, other: &Welford) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
        }
        self.n += other.n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased sample variance per component.
    pub fn variance(&self) -> Vec<f64> {
        let d = (self.n.max(2) - 1) as f64;
        self.m2.iter().map(|s| s / d).collect()
    }

    pub fn stderr(&self) -> Vec<f64> {
        let n = self.n.max(1) as f64;
        self.variance().iter().map(|v| (v / n).sqrt()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub variance: Vec<f64>,
    pub n: u64,
}

pub const MC_MIN_SAMPLES: usize = 10_000;
const MC_CHUNK: usize = 2048;

/// Mean and standard error of `n_samples` draws of `sample`. Chunk `i` draws
/// from the stream `(seed, 0, i, 0)` and chunks are merged in index order, so
/// the result does not depend on the thread count.
pub fn mc_mean<F>(sample: F, n_samples: usize, seed: u64) -> Result<McEstimate>
where
    F: Fn(&mut StreamRng) -> Result<Vec<f64>> + Sync,
{
    if n_samples < MC_MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "mc_mean needs at least {MC_MIN_SAMPLES} samples, got {n_samples}"
        )));
    }
    let chunks = n_samples.div_ceil(MC_CHUNK);
    let parts: Vec<Welford> = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<Welford> {
            let mut rng = StreamKey::new(seed, 0, c as u64, 0).rng();
            let count = MC_CHUNK.min(n_samples - c * MC_CHUNK);
            let mut w: Option<Welford> = None;
            for _ in 0..count {
                let x = sample(&mut rng)?;
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteEstimate {
                        estimator: "mc_mean",
                        what: "sample",
                    });
                }
                w.get_or_insert_with(|| Welford::new(x.len())).push(&x);
            }
            Ok(w.expect("chunk is non-empty"))
        })
        .collect::<Result<_>>()?;
    let mut total = Welford::new(parts[0].mean.len());
    for p in &parts {
        total.merge(p);
    }
    Ok(McEstimate {
        mean: total.mean.clone(),
        stderr: total.stderr(),
        variance: total.variance(),
        n: total.n,
    })
}

/// Two-sided z threshold that keeps the family-wise false-failure rate of
/// `m` comparisons equal to that of a single 4σ comparison.
pub fn bonferroni_z(m: usize) -> f64 {
    let normal = Normal::standard();
    let per_test = 2.0 * normal.cdf(-4.0) / m.max(1) as f64;
    normal.inverse_cdf(1.0 - per_test / 2.0).max(4.0)
}

/// Largest `|a - b| / sqrt(se_a² + se_b²)` over components. Differences at
/// rounding level (relative 1e-12) count as zero, so deterministic components
/// do not produce infinite scores.
pub fn max_z_score(a: &[f64], se_a: &[f64], b: &[f64], se_b: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..a.len() {
        let diff = (a[i] - b[i]).abs();
        if diff <= 1e-12 * (1.0 + a[i].abs() + b[i].abs()) {
            continue;
        }
        let se = (se_a[i].powi(2) + se_b[i].powi(2)).sqrt();
        let z = if se > 0.0 {
            diff / se
        } else {
            f64::INFINITY
        };
        worst = worst.max(z);
    }
    worst
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureResult {
    /// `E_u[f(σ_λ(g(u, θ)))]`
    pub objective: f64,
    /// Derivative of the objective in `θ`.
    pub grad_theta: f64,
    /// Derivative of the objective in `α = logit θ`.
    pub grad_alpha: f64,
}

pub const QUADRATURE_TOL: f64 = 1e-8;

/// Quadrature of the relaxed objective of one Bernoulli unit over `u ∈ (0, 1)`.
/// `f` acts elementwise on a vector of relaxed values. The interval is split
/// into panels around the threshold point so that sharp relaxations resolve;
/// the result is rejected if doubling `n_points` moves it by more than `1e-8`.
pub fn relaxed_quadrature_1d<F>(f: F, theta: f64, lambda: f64, n_points: usize) -> Result<QuadratureResult>
where
    F: for<'t> Fn(&Var<'t>) -> Result<Var<'t>>,
{
    if n_points < 64 {
        return Err(Error::InvalidArgument(format!("need at least 64 points, got {n_points}")));
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::OutOfUnitInterval {
            what: "θ",
            value: theta,
        });
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("λ must be positive, got {lambda}")));
    }
    let coarse = quadrature_panels(&f, theta, lambda, n_points)?;
    let fine = quadrature_panels(&f, theta, lambda, 2 * n_points)?;
    let delta = (coarse.objective - fine.objective)
        .abs()
        .max((coarse.grad_alpha - fine.grad_alpha).abs());
    if delta > QUADRATURE_TOL {
        return Err(Error::QuadratureNotConverged { delta });
    }
    Ok(coarse)
}

fn quadrature_panels<F>(f: &F, theta: f64, lambda: f64, n: usize) -> Result<QuadratureResult>
where
    F: for<'t> Fn(&Var<'t>) -> Result<Var<'t>>,
{
    let alpha = logit(theta);
    let mut breaks = vec![0.0, 1.0];
    let mut zs = vec![0.0];
    for j in -2..=10 {
        let s = 2f64.powi(j);
        zs.extend([lambda * s, -lambda * s, s, -s]);
    }
    for z in zs {
        let u = sigmoid(z - alpha);
        if u > 0.0 && u < 1.0 {
            breaks.push(u);
        }
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-15);

    let (gx, gw) = gauss_legendre(n);
    let mut nodes = Vec::with_capacity(n * breaks.len());
    let mut weights = Vec::with_capacity(n * breaks.len());
    for win in breaks.windows(2) {
        let (a, b) = (win[0], win[1]);
        let (mid, half) = (0.5 * (a + b), 0.5 * (b - a));
        for (x, w) in gx.iter().zip(&gw) {
            let u = mid + half * x;
            if u > 0.0 && u < 1.0 {
                nodes.push(logit(u));
                weights.push(w * half);
            }
        }
    }
    let tape = Tape::new();
    let a = tape.param(Tensor::scalar(alpha));
    let k = nodes.len();
    let z = a.broadcast_to(Shape::Vector(k))?.add_const(Tensor::vector(nodes))?;
    let x = z.scale(1.0 / lambda)?.sigmoid()?;
    let total = f(&x)?.mul_const(Tensor::vector(weights))?.sum()?;
    let grad_alpha = tape.backward(&total, &[a])?.into_tensors()[0].item();
    Ok(QuadratureResult {
        objective: total.item(),
        grad_theta: grad_alpha / (theta * (1.0 - theta)),
        grad_alpha,
    })
}

/// Golden-section search for the minimizer of a unimodal `f` on `[lo, hi]`.
pub fn golden_section_min(mut f: impl FnMut(f64) -> Result<f64>, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d)?;
        }
    }
    Ok(0.5 * (a + b))
}

/// Minimizer over `θ` of the relaxed objective, by golden-section search on the quadrature.
pub fn relaxed_argmin_1d<F>(f: F, lambda: f64, n_points: usize) -> Result<f64>
where
    F: for<'t> Fn(&Var<'t>) -> Result<Var<'t>>,
{
    golden_section_min(
        |th| relaxed_quadrature_1d(&f, th, lambda, n_points).map(|q| q.objective),
        1e-6,
        1.0 - 1e-6,
        1e-7,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{toy_expected_loss, toy_loss, ToyProblem};
    use crate::rng::{seeded, standard_normal};
    use rand::Rng;

    #[test]
    fn gauss_legendre_is_exact_for_polynomials() {
        let (x, w) = gauss_legendre(8);
        let s: f64 = w.iter().sum();
        assert!((s - 2.0).abs() < 1e-14);
        // ∫ x^14 = 2/15
        let m: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert!((m - 2.0 / 15.0).abs() < 1e-14);
    }

    #[test]
    fn toy_enumeration_is_linear_in_theta() {
        for theta in [0.1, 0.5, 0.8] {
            let toy = ToyProblem::scalar(0.45, theta).unwrap();
            let r = exact_gradient_enum(&toy, &ToyProblem::input()).unwrap();
            assert!((r.exact_objective - toy_expected_loss(theta, 0.45)).abs() < 1e-14);
            let dalpha = 0.10 * theta * (1.0 - theta);
            assert!((r.exact_grad[0].item() - dalpha).abs() < 1e-14);
            assert!((r.total_probability[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pairwise_sum_order_is_fixed() {
        let parts: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64, 1.0]).collect();
        assert_eq!(pairwise_sum(parts), vec![21.0, 7.0]);
    }

    #[test]
    fn welford_matches_two_pass() {
        let mut rng = seeded(5);
        for _ in 0..1000 {
            let n = rng.random_range(2..50);
            let xs: Vec<f64> = (0..n).map(|_| 3.0 + 10.0 * standard_normal(&mut rng)).collect();
            let mut w = Welford::new(1);
            for &x in &xs {
                w.push(&[x]);
            }
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((w.mean()[0] - mean).abs() < 1e-12 * mean.abs().max(1.0));
            assert!((w.variance()[0] - var).abs() < 1e-12 * var.max(1.0));
        }
    }

    #[test]
    fn welford_merge_equals_single_stream() {
        let mut rng = seeded(6);
        let xs: Vec<f64> = (0..500).map(|_| standard_normal(&mut rng)).collect();
        let mut all = Welford::new(1);
        let mut a = Welford::new(1);
        let mut b = Welford::new(1);
        for (i, &x) in xs.iter().enumerate() {
            all.push(&[x]);
            if i < 123 { a.push(&[x]) } else { b.push(&[x]) }
        }
        a.merge(&b);
        assert!((a.mean()[0] - all.mean()[0]).abs() < 1e-14);
        assert!((a.variance()[0] - all.variance()[0]).abs() < 1e-12);
    }

    #[test]
    fn mc_mean_constant_and_normal() {
        let c = mc_mean(|_| Ok(vec![2.5, -1.0]), 10_000, 1).unwrap();
        assert_eq!(c.mean, vec![2.5, -1.0]);
        assert_eq!(c.stderr, vec![0.0, 0.0]);
        let z = mc_mean(|r| Ok(vec![standard_normal(r)]), 1_000_000, 2).unwrap();
        assert!(z.mean[0].abs() < 4e-3);
        assert!(mc_mean(|_| Ok(vec![f64::NAN]), 10_000, 3).is_err());
        assert!(mc_mean(|_| Ok(vec![0.0]), 100, 3).is_err());
    }

    #[test]
    fn mc_mean_is_reproducible() {
        let f = |r: &mut StreamRng| Ok(vec![r.random::<f64>()]);
        assert_eq!(mc_mean(f, 20_000, 9).unwrap(), mc_mean(f, 20_000, 9).unwrap());
    }

    #[test]
    fn bonferroni_threshold_grows_with_comparisons() {
        assert_eq!(bonferroni_z(1), 4.0);
        let z = bonferroni_z(100);
        assert!(z > 4.5 && z < 5.5, "{z}");
    }

    #[test]
    fn ks_of_identical_and_shifted_samples() {
        let a: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(ks_distance(&a, &a), 0.0);
        let b: Vec<f64> = a.iter().map(|x| x + 50.0).collect();
        assert!((ks_distance(&a, &b) - 0.5).abs() < 1e-12);
    }

    fn toy(t: f64) -> impl for<'t> Fn(&Var<'t>) -> Result<Var<'t>> {
        move |x| toy_loss(x, t)
    }

    #[test]
    fn quadrature_tight_relaxation_matches_discrete() {
        for theta in [0.2, 0.5, 0.7] {
            let q = relaxed_quadrature_1d(toy(0.45), theta, 1e-4, 64).unwrap();
            assert!((q.objective - toy_expected_loss(theta, 0.45)).abs() < 1e-4, "{q:?}");
        }
    }

    #[test]
    fn quadrature_saturated_relaxation() {
        for theta in [0.1, 0.6] {
            let q = relaxed_quadrature_1d(toy(0.45), theta, 1e6, 64).unwrap();
            assert!((q.objective - 0.0025).abs() < 1e-6, "{q:?}");
        }
    }

    #[test]
    fn quadrature_gradient_matches_finite_difference() {
        let h = 1e-5;
        let at = |th: f64| relaxed_quadrature_1d(toy(0.45), th, 1.0, 64).unwrap().objective;
        let q = relaxed_quadrature_1d(toy(0.45), 0.4, 1.0, 64).unwrap();
        let fd = (at(0.4 + h) - at(0.4 - h)) / (2.0 * h);
        assert!((q.grad_theta - fd).abs() < 1e-7, "{} vs {fd}", q.grad_theta);
    }

    #[test]
    fn concrete_fixed_point_is_interior() {
        let th = relaxed_argmin_1d(toy(0.45), 1.0, 64).unwrap();
        assert!(th > 0.01 && th < 0.99, "{th}");
        let q = relaxed_quadrature_1d(toy(0.45), th, 1.0, 64).unwrap();
        assert!(q.grad_theta.abs() < 1e-5);
    }
}
