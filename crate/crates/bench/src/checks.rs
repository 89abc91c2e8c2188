//! Oracle and property checks shared by the `selftest` verb and the acceptance suite.
//!
//! Each check returns its measured statistic; callers compare against their
//! own tolerances.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rebar_core::autodiff::{finite_diff_gradient, sigmoid, Shape, Tape, Tensor, Var};
use rebar_core::estimators::{estimate, Baseline, EstimatorConfig, EstimatorKind, Noise, StochasticObjective};
use rebar_core::models::RandomNet;
use rebar_core::oracles::{bonferroni_z, exact_gradient_enum, ks_distance, max_z_score, mc_mean};
use rebar_core::reparam::{
    argmax, conditional_z, couple_uv, gumbel_max_sample, log_prob_bernoulli, truncated_gumbel_conditional, LogitParam,
};
use rebar_core::rng::{uniform, StreamKey};
use rebar_core::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckOutcome {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// `‖a - b‖∞ / ‖a‖∞`.
pub fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn config(kind: EstimatorKind, obj: &dyn StochasticObjective, lambda: f64, eta: f64) -> Result<EstimatorConfig> {
    Ok(EstimatorConfig::new(kind, obj.params().len())
        .with_lambda(lambda)?
        .with_eta(eta))
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnbiasedCase {
    pub kind: EstimatorKind,
    pub lambda: f64,
    pub eta: f64,
    pub samples: u64,
    pub max_z: f64,
    pub threshold: f64,
}

impl UnbiasedCase {
    pub fn passed(&self) -> bool {
        self.max_z < self.threshold
    }
}

/// Monte Carlo means of every unbiased estimator against exact enumeration
/// on a random net over 4 units with a two-layer `f`.
///
/// Samples are drawn `rows` at a time; each draw is the mean of `rows`
/// independent single-sample estimates, so standard errors stay exact.
/// Settings an estimator ignores (λ without a temperature, η without a
/// control variate) reuse the first computed result.
pub fn unbiasedness_suite(
    lambdas: &[f64],
    etas: &[f64],
    samples: usize,
    rows: usize,
    seed: u64,
) -> Result<Vec<UnbiasedCase>> {
    let net = RandomNet::new(&[4], 6, &mut StreamKey::new(seed, 0, 0, 0).rng())?;
    let exact = exact_gradient_enum(&net, &RandomNet::input(1))?.flat_grad();
    let input = RandomNet::input(rows);
    let sizes = net.layer_sizes();
    let baseline = Baseline::Constant(0.3);
    let threshold = bonferroni_z(exact.len());
    let zeros = vec![0.0; exact.len()];
    let draws = samples.div_ceil(rows);
    let mut out = Vec::new();
    for kind in EstimatorKind::ALL.into_iter().filter(|k| k.is_unbiased()) {
        let mut cache: Vec<((usize, usize), f64)> = Vec::new();
        for (li, &lambda) in lambdas.iter().enumerate() {
            for (ei, &eta) in etas.iter().enumerate() {
                let key = (
                    if kind.uses_temperature() { li } else { 0 },
                    if kind.uses_eta() { ei } else { 0 },
                );
                let max_z = match cache.iter().find(|(k, _)| *k == key) {
                    Some((_, z)) => *z,
                    None => {
                        let c = config(kind, &net, lambda, eta)?;
                        let stream = seed ^ (kind as u64) << 32 ^ (li as u64) << 16 ^ ei as u64;
                        let mc = mc_mean(
                            |rng| {
                                let noise = Noise::draw(rng, rows, &sizes);
                                Ok(estimate(&net, &input, &noise, &c, Some(&baseline))?.flat())
                            },
                            draws,
                            stream,
                        )?;
                        let z = max_z_score(&mc.mean, &mc.stderr, &exact, &zeros);
                        cache.push((key, z));
                        z
                    }
                };
                out.push(UnbiasedCase {
                    kind,
                    lambda,
                    eta,
                    samples: (draws * rows) as u64,
                    max_z,
                    threshold,
                });
            }
        }
    }
    Ok(out)
}

/// Largest `|g̃(v, b, θ) - g(u, θ)| / max(1, |g(u, θ)|)` over random `(u, θ)`.
pub fn coupling_identity(n: usize, seed: u64) -> Result<f64> {
    let mut rng = StreamKey::new(seed, 0, 0, 0).rng();
    let u: Vec<f64> = (0..n).map(|_| uniform(&mut rng)).collect();
    let theta: Vec<f64> = (0..n).map(|_| rng.random_range(1e-3..1.0 - 1e-3)).collect();
    let lp = LogitParam::from_probs(&theta)?;
    let z: Vec<f64> = u.iter().zip(lp.alpha()).map(|(&u, &a)| a + (u / (1.0 - u)).ln()).collect();
    let (b, v) = couple_uv(&u, &lp)?;
    let z_tilde = conditional_z(&v, &b, &lp)?;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        if (z[i] >= 0.0) != (b[i] == 1.0) {
            return Ok(f64::INFINITY);
        }
        worst = worst.max((z_tilde[i] - z[i]).abs() / z[i].abs().max(1.0));
    }
    Ok(worst)
}

/// Largest relative gap between modified REBAR at `λ = 10⁶` and SimpleMuProp,
/// per sample, over `draws` draws on a few random nets.
pub fn muprop_limit(draws: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let per_net = 100;
    for d in 0..draws {
        let net_id = (d / per_net) as u64;
        let net = RandomNet::new(&[4], 5, &mut StreamKey::new(seed, net_id, 0, 0).rng())?;
        let input = RandomNet::input(1);
        let noise = Noise::draw(&mut StreamKey::new(seed, net_id, d as u64, 1).rng(), 1, &net.layer_sizes());
        let mut modified = config(EstimatorKind::Rebar, &net, 1e6, 1.0)?;
        modified.modified_relaxation = true;
        let a = estimate(&net, &input, &noise, &modified, None)?;
        let b = estimate(&net, &input, &noise, &config(EstimatorKind::SimpleMuprop, &net, 1e6, 1.0)?, None)?;
        worst = worst.max(rel_inf(&b.flat(), &a.flat()));
    }
    Ok(worst)
}

/// Largest relative gap between `rebar` and `rebar_alt` on shared noise over
/// random nets, temperatures, scalings and relaxations.
pub fn rebar_alt_equivalence(configs: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..configs {
        let mut rng = StreamKey::new(seed, i as u64, 0, 0).rng();
        let n = rng.random_range(1..=5);
        let hidden = rng.random_range(2..=8);
        let kappa = rng.random_range(-1.0..1.0);
        let net = RandomNet::new(&[n], hidden, &mut rng)?.with_theta_coupling(kappa);
        let rows = rng.random_range(1..=3);
        let input = RandomNet::input(rows);
        let lambda = (rng.random_range(-3.0f64..3.0)).exp();
        let eta = rng.random_range(0.0..2.0);
        let mut a = config(EstimatorKind::Rebar, &net, lambda, eta)?;
        a.modified_relaxation = rng.random::<bool>();
        let mut b = a.clone();
        b.kind = EstimatorKind::RebarAlt;
        let noise = Noise::draw(&mut rng, rows, &net.layer_sizes());
        let baseline = Baseline::Constant(rng.random_range(-1.0..1.0));
        let ra = estimate(&net, &input, &noise, &a, Some(&baseline))?;
        let rb = estimate(&net, &input, &noise, &b, Some(&baseline))?;
        worst = worst.max(rel_inf(&ra.flat(), &rb.flat()));
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Square,
    Softplus,
    Scale,
    Shift,
    Select,
    LogSigmoid,
    AddConst,
    MulConst,
}

const OPS: [Op; 17] = [
    Op::Add,
    Op::Sub,
    Op::Mul,
    Op::Div,
    Op::Neg,
    Op::Exp,
    Op::Log,
    Op::Sigmoid,
    Op::Tanh,
    Op::Square,
    Op::Softplus,
    Op::Scale,
    Op::Shift,
    Op::Select,
    Op::LogSigmoid,
    Op::AddConst,
    Op::MulConst,
];

/// A random expression over parameters `x [r, c]`, `w [c, k]`, `v [k]`, `s [1]`.
/// The skeleton always uses matmul, broadcasting, reshape and every reduction;
/// the middle is a random chain of elementwise ops.
struct RandomExpr {
    r: usize,
    c: usize,
    k: usize,
    chain: Vec<(Op, f64)>,
    constant: Vec<f64>,
    mask: Vec<bool>,
}

impl RandomExpr {
    fn new<R: Rng + ?Sized>(rng: &mut R, forced: Op) -> Self {
        let (r, c, k) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3));
        let mut chain: Vec<(Op, f64)> = (0..rng.random_range(3..=6))
            .map(|_| (OPS[rng.random_range(0..OPS.len())], rng.random_range(-1.5..1.5)))
            .collect();
        let at = rng.random_range(0..=chain.len());
        chain.insert(at, (forced, rng.random_range(-1.5..1.5)));
        RandomExpr {
            r,
            c,
            k,
            chain,
            constant: (0..r * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
            mask: (0..r * k).map(|_| rng.random::<bool>()).collect(),
        }
    }

    fn sizes(&self) -> [usize; 4] {
        [self.r * self.c, self.c * self.k, self.k, 1]
    }

    fn shapes(&self) -> [Shape; 4] {
        [
            Shape::Matrix(self.r, self.c),
            Shape::Matrix(self.c, self.k),
            Shape::Vector(self.k),
            Shape::Vector(1),
        ]
    }

    fn split(&self, flat: &[f64]) -> Vec<Tensor> {
        let mut at = 0;
        self.shapes()
            .iter()
            .zip(self.sizes())
            .map(|(&shape, n)| {
                let t = Tensor::new(shape, flat[at..at + n].to_vec()).expect("sized");
                at += n;
                t
            })
            .collect()
    }

    fn build<'t>(&self, p: &[Var<'t>]) -> Result<Var<'t>> {
        let shape = Shape::Matrix(self.r, self.k);
        let konst = Tensor::new(shape, self.constant.clone())?;
        let base = p[0].matmul(&p[1])?.add(&p[2])?;
        let mut h = base;
        for &(op, a) in &self.chain {
            h = match op {
                Op::Add => h.add(&base)?,
                Op::Sub => h.sub(&base.scale(a)?)?,
                Op::Mul => h.mul(&base)?,
                Op::Div => h.div(&base.square()?.shift(1.0)?)?,
                Op::Neg => h.neg()?,
                Op::Exp => h.tanh()?.exp()?,
                Op::Log => h.softplus()?.shift(0.1)?.log()?,
                Op::Sigmoid => h.sigmoid()?,
                Op::Tanh => h.tanh()?,
                Op::Square => h.tanh()?.square()?,
                Op::Softplus => h.softplus()?,
                Op::Scale => h.scale(a)?,
                Op::Shift => h.shift(a)?,
                Op::Select => h.select(&self.mask, &base.scale(a)?)?,
                Op::LogSigmoid => h.log_sigmoid()?,
                Op::AddConst => h.add_const(konst.clone())?,
                Op::MulConst => h.mul_const(konst.clone())?,
            };
        }
        let s = p[3].reshape(Shape::Matrix(1, 1))?.broadcast_to(Shape::Matrix(self.r, 1))?;
        let rows = h.sum_cols()?.reshape(Shape::Matrix(self.r, 1))?.mul(&s)?;
        rows.mean()?.add(&h.sum()?.scale(0.1)?)
    }

    fn value(&self, flat: &[f64]) -> f64 {
        let tape = Tape::new();
        let p: Vec<Var> = self.split(flat).into_iter().map(|t| tape.param(t)).collect();
        self.build(&p).map(|v| v.item()).unwrap_or(f64::NAN)
    }

    fn gradient(&self, flat: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p: Vec<Var> = self.split(flat).into_iter().map(|t| tape.param(t)).collect();
        let out = self.build(&p)?;
        Ok(tape
            .backward(&out, &p)?
            .into_tensors()
            .into_iter()
            .flat_map(Tensor::into_data)
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    /// Largest `‖autodiff - fd‖∞ / max(‖fd‖∞, 1e-8)` over networks.
    pub max_rel: f64,
    pub networks: usize,
    /// Number of distinct elementwise ops exercised (out of 17).
    pub ops_covered: usize,
    /// Largest `|∂/∂α log p(b) - (b - θ)|`.
    pub score_error: f64,
}

pub fn gradient_integrity(networks: usize, seed: u64) -> Result<GradientReport> {
    let mut covered = BTreeSet::new();
    let mut max_rel: f64 = 0.0;
    for i in 0..networks {
        let mut rng = StreamKey::new(seed, i as u64, 0, 0).rng();
        let expr = RandomExpr::new(&mut rng, OPS[i % OPS.len()]);
        covered.extend(expr.chain.iter().map(|(op, _)| *op));
        let n: usize = expr.sizes().iter().sum();
        let at: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ad = expr.gradient(&at)?;
        let fd = finite_diff_gradient(|x| expr.value(x), &at, 1e-5)?;
        let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-8);
        let err = ad.iter().zip(&fd).fold(0.0f64, |m, (a, f)| m.max((a - f).abs()));
        max_rel = max_rel.max(err / scale);
    }

    let mut rng = StreamKey::new(seed, u64::MAX, 0, 0).rng();
    let mut score_error: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=6);
        let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..8.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| f64::from(rng.random::<bool>())).collect();
        let tape = Tape::new();
        let a = tape.param(Tensor::vector(alpha.clone()));
        let lp = log_prob_bernoulli(&Tensor::vector(b.clone()), &a)?;
        let g = tape.backward(&lp, &[a])?.into_tensors().remove(0);
        for ((g, b), a) in g.data().iter().zip(&b).zip(&alpha) {
            score_error = score_error.max((g - (b - sigmoid(*a))).abs());
        }
    }
    Ok(GradientReport {
        max_rel,
        networks,
        ops_covered: covered.len(),
        score_error,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalReport {
    /// Largest `|freq - p| / sqrt(p(1 - p)/n)` over sizes and categories.
    pub max_freq_z: f64,
    /// Conditional draws whose argmax is not the hot index.
    pub argmax_violations: usize,
    /// Largest per-coordinate KS distance between reconstructed and unconditional draws.
    pub max_ks: f64,
}

/// Gumbel-max frequencies, the argmax property of the truncated-Gumbel
/// conditional, and agreement of `(b, z̃)` with unconditional `z`.
pub fn categorical(freq_draws: usize, joint_draws: usize, seed: u64) -> Result<CategoricalReport> {
    let mut report = CategoricalReport {
        max_freq_z: 0.0,
        argmax_violations: 0,
        max_ks: 0.0,
    };
    for k in 2..=10usize {
        let mut rng = StreamKey::new(seed, k as u64, 0, 0).rng();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|x| x / total).collect();

        let mut counts = vec![0usize; k];
        let mut u = vec![0.0; k];
        for _ in 0..freq_draws {
            u.iter_mut().for_each(|x| *x = uniform(&mut rng));
            counts[gumbel_max_sample(&u, &p)?.hot_index()] += 1;
        }
        let n = freq_draws as f64;
        for (c, &pi) in counts.iter().zip(&p) {
            let z = (*c as f64 / n - pi).abs() / (pi * (1.0 - pi) / n).sqrt();
            report.max_freq_z = report.max_freq_z.max(z);
        }

        let mut direct: Vec<Vec<f64>> = vec![Vec::with_capacity(joint_draws); k];
        let mut joint: Vec<Vec<f64>> = vec![Vec::with_capacity(joint_draws); k];
        let mut v = vec![0.0; k];
        for _ in 0..joint_draws {
            u.iter_mut().for_each(|x| *x = uniform(&mut rng));
            let s = gumbel_max_sample(&u, &p)?;
            for (col, z) in direct.iter_mut().zip(&s.z) {
                col.push(*z);
            }
            u.iter_mut().for_each(|x| *x = uniform(&mut rng));
            let b = gumbel_max_sample(&u, &p)?;
            v.iter_mut().for_each(|x| *x = uniform(&mut rng));
            let zt = truncated_gumbel_conditional(&v, &b.b, &p)?;
            if argmax(&zt) != b.hot_index() {
                report.argmax_violations += 1;
            }
            for (col, z) in joint.iter_mut().zip(&zt) {
                col.push(*z);
            }
        }
        for (a, b) in direct.iter().zip(&joint) {
            report.max_ks = report.max_ks.max(ks_distance(a, b));
        }
    }
    Ok(report)
}

/// Fast versions of the oracle checks, for `selftest`.
pub fn quick_suite(seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<(bool, String)>| {
        out.push(match r {
            Ok((ok, detail)) => CheckOutcome::new(name, ok, detail),
            Err(e) => CheckOutcome::new(name, false, format!("error: {e}")),
        })
    };
    push(
        "coupling identity",
        coupling_identity(10_000, seed).map(|e| (e <= 1e-9, format!("max rel err {e:.3e} (tol 1e-9)"))),
    );
    push(
        "muprop limit",
        muprop_limit(100, seed).map(|e| (e <= 1e-3, format!("max rel err {e:.3e} (tol 1e-3)"))),
    );
    push(
        "rebar_alt equivalence",
        rebar_alt_equivalence(100, seed).map(|e| (e <= 1e-10, format!("max rel err {e:.3e} (tol 1e-10)"))),
    );
    push(
        "gradient integrity",
        gradient_integrity(34, seed).map(|r| {
            (
                r.max_rel <= 1e-5 && r.score_error <= 1e-12,
                format!(
                    "fd rel err {:.3e} over {} nets, {} ops; score err {:.1e}",
                    r.max_rel, r.networks, r.ops_covered, r.score_error
                ),
            )
        }),
    );
    push(
        "categorical",
        categorical(20_000, 5_000, seed).map(|r| {
            (
                r.max_freq_z < 4.0 && r.argmax_violations == 0 && r.max_ks < 0.05,
                format!(
                    "freq z {:.2}, argmax violations {}, max KS {:.4}",
                    r.max_freq_z, r.argmax_violations, r.max_ks
                ),
            )
        }),
    );
    push(
        "unbiasedness",
        unbiasedness_suite(&[0.5], &[1.0], 20_000, 2, seed).map(|cases| {
            let worst = cases.iter().fold(0.0f64, |m, c| m.max(c.max_z / c.threshold));
            (
                cases.iter().all(UnbiasedCase::passed),
                format!("{} estimators, worst z/threshold {worst:.2}", cases.len()),
            )
        }),
    );
    out
}
