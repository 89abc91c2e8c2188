use rebar_core::autodiff::{Tape, Tensor};
use rebar_core::models::{multisample_bound, toy_expected_loss, Nonlinearity, Sbn, SbnSpec, ToyProblem};
use rebar_core::oracles::exact_gradient_enum;
use rebar_core::rng::StreamKey;

const UNITS: usize = 3;
const OBS: usize = 4;

fn small_sbn(seed: u64) -> Sbn {
    let spec = SbnSpec {
        stochastic_layers: 1,
        units_per_layer: UNITS,
        deterministic: Nonlinearity::Linear,
        observation_dim: OBS,
    };
    let mut rng = StreamKey::new(seed, 0, 0, 0).rng();
    let mut m = Sbn::generative(spec, &[0.3, 0.6, 0.5, 0.8], &mut rng).unwrap();
    // push weights away from zero so q and p are far from uniform
    let flat: Vec<f64> = m.params_flat().iter().enumerate().map(|(i, w)| w + 0.7 * ((i % 5) as f64 - 2.0)).collect();
    m.set_params_flat(&flat);
    m
}

trait Flat {
    fn params_flat(&self) -> Vec<f64>;
    fn set_params_flat(&mut self, flat: &[f64]);
}

impl Flat for Sbn {
    fn params_flat(&self) -> Vec<f64> {
        use rebar_core::estimators::StochasticObjective;
        self.params().flatten()
    }
    fn set_params_flat(&mut self, flat: &[f64]) {
        use rebar_core::estimators::StochasticObjective;
        self.params_mut().set_flat(flat).unwrap();
    }
}

fn data() -> Tensor {
    Tensor::matrix(2, OBS, vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap()
}

/// `(q(b|x), elbo(b))` per row for every latent configuration.
fn enumerate(m: &Sbn, x: &Tensor) -> Vec<(Vec<f64>, Vec<f64>)> {
    use rebar_core::estimators::StochasticObjective;
    let tape = Tape::new();
    let p = m.params().on_tape(&tape);
    (0..1u32 << UNITS)
        .map(|code| {
            let bits: Vec<f64> = (0..UNITS).map(|j| f64::from((code >> j) & 1)).collect();
            let data = bits.iter().copied().cycle().take(x.rows() * UNITS).collect();
            let b = tape.constant(Tensor::matrix(x.rows(), UNITS, data).unwrap());
            let q = m.log_q(&p, x, &[b]).unwrap().value().map(f64::exp).into_data();
            let e = m.elbo(&p, x, &[b]).unwrap().value().into_data();
            (q, e)
        })
        .collect()
}

#[test]
fn posterior_normalizes_and_expected_elbo_is_below_log_marginal() {
    let m = small_sbn(1);
    let x = data();
    let table = enumerate(&m, &x);
    let log_px = m.exact_log_marginal(&x).unwrap();
    for r in 0..x.rows() {
        let mass: f64 = table.iter().map(|(q, _)| q[r]).sum();
        assert!((mass - 1.0).abs() < 1e-12);
        let expected: f64 = table.iter().map(|(q, e)| q[r] * e[r]).sum();
        assert!(expected < log_px[r], "E_q[elbo] {expected} vs log p(x) {}", log_px[r]);
        // log p(x) = log Σ_b q(b) exp(elbo(b))
        let lse = table.iter().map(|(q, e)| q[r] * e[r].exp()).sum::<f64>().ln();
        assert!((lse - log_px[r]).abs() < 1e-10);
    }
}

/// Exact `E[log(1/k Σ_i w_i)]` by enumerating every k-tuple of configurations.
fn exact_bound(table: &[(Vec<f64>, Vec<f64>)], row: usize, k: u32) -> f64 {
    let n = table.len();
    (0..n.pow(k))
        .map(|mut code| {
            let (mut prob, mut w) = (1.0, 0.0);
            for _ in 0..k {
                let (q, e) = &table[code % n];
                code /= n;
                prob *= q[row];
                w += e[row].exp();
            }
            prob * (w / f64::from(k)).ln()
        })
        .sum()
}

#[test]
fn multisample_bound_matches_enumeration_and_tightens() {
    let m = small_sbn(2);
    let x = data();
    let table = enumerate(&m, &x);
    let log_px = m.exact_log_marginal(&x).unwrap();
    let mean_bound = |k: usize, draws: u64| -> Vec<f64> {
        let mut acc = vec![0.0; x.rows()];
        for d in 0..draws {
            let b = multisample_bound(&m, &x, k, &mut StreamKey::new(3, k as u64, d, 0).rng()).unwrap();
            for (a, v) in acc.iter_mut().zip(b) {
                *a += v / draws as f64;
            }
        }
        acc
    };
    let mc: Vec<Vec<f64>> = (1..=3).map(|k| mean_bound(k, 20_000)).collect();
    let many = mean_bound(200, 200);
    for r in 0..x.rows() {
        let exact: Vec<f64> = (1..=3).map(|k| exact_bound(&table, r, k)).collect();
        assert!(exact[0] < exact[1] && exact[1] < exact[2] && exact[2] < log_px[r]);
        for k in 0..3 {
            assert!((mc[k][r] - exact[k]).abs() < 0.05, "k={} mc {} exact {}", k + 1, mc[k][r], exact[k]);
        }
        assert!(many[r] > exact[2] && many[r] < log_px[r] + 0.01);
    }
}

#[test]
fn structured_conditional_sums_to_one_over_outputs() {
    let spec = SbnSpec {
        stochastic_layers: 1,
        units_per_layer: 2,
        deterministic: Nonlinearity::Linear,
        observation_dim: 3,
    };
    let m = Sbn::structured(spec, 2, &[0.4, 0.5, 0.6], &mut StreamKey::new(4, 0, 0, 0).rng()).unwrap();
    let rows: Vec<f64> = (0..8u32)
        .flat_map(|code| {
            let mut r = vec![1.0, 0.0];
            r.extend((0..3).map(|j| f64::from((code >> j) & 1)));
            r
        })
        .collect();
    let input = Tensor::matrix(8, 5, rows).unwrap();
    let total: f64 = m.exact_log_marginal(&input).unwrap().iter().map(|l| l.exp()).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn toy_gradient_by_enumeration_is_closed_form() {
    for &theta in &[0.1, 0.5, 0.9] {
        let toy = ToyProblem::scalar(0.45, theta).unwrap();
        let e = exact_gradient_enum(&toy, &ToyProblem::input()).unwrap();
        // d/dα of θ(1-t)² + (1-θ)t² is θ(1-θ)(1 - 2t)
        let want = theta * (1.0 - theta) * (1.0 - 2.0 * 0.45);
        assert!((e.flat_grad()[0] - want).abs() < 1e-12);
        assert!((toy.expected_loss() - toy_expected_loss(theta, 0.45)).abs() < 1e-15);
    }
}
