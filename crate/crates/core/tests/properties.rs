use proptest::prelude::*;
use rebar_core::autodiff::{finite_diff_gradient, logit, sigmoid, Shape, Tape, Tensor};
use rebar_core::optim::{AdamConfig, AdamState, VarianceTracker};
use rebar_core::reparam::{
    argmax, conditional_z, couple_uv, gumbel_max_sample, hard_threshold, log_prob_bernoulli_value, relax_value,
    sample_z, truncated_gumbel_conditional, LogitParam,
};

fn unit() -> impl Strategy<Value = f64> {
    1e-6..(1.0 - 1e-6)
}

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05..1.0f64, k).prop_map(|w| {
        let s: f64 = w.iter().sum();
        let mut p: Vec<f64> = w.iter().map(|x| x / s).collect();
        // exact unit sum for the simplex check
        let rest: f64 = p[1..].iter().sum();
        p[0] = 1.0 - rest;
        p
    })
}

proptest! {
    #[test]
    fn coupled_conditional_reproduces_z(u in prop::collection::vec(unit(), 1..8), a in -6.0..6.0f64) {
        let theta = LogitParam::new(vec![a; u.len()]).unwrap();
        let z = sample_z(&u, &theta).unwrap();
        let (b, v) = couple_uv(&u, &theta).unwrap();
        prop_assert_eq!(&b, &hard_threshold(&z));
        let zt = conditional_z(&v, &b, &theta).unwrap();
        for (x, y) in z.iter().zip(&zt) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "z {} vs {}", x, y);
        }
    }

    #[test]
    fn conditional_z_agrees_with_b(v in prop::collection::vec(unit(), 1..8), a in -6.0..6.0f64, bit in any::<bool>()) {
        let theta = LogitParam::new(vec![a; v.len()]).unwrap();
        let b = vec![if bit { 1.0 } else { 0.0 }; v.len()];
        let zt = conditional_z(&v, &b, &theta).unwrap();
        prop_assert_eq!(hard_threshold(&zt), b);
    }

    #[test]
    fn relaxation_is_monotone_and_bounded(z1 in -30.0..30.0f64, dz in 1e-3..5.0f64, lambda in 0.05..20.0f64) {
        let (lo, hi) = (relax_value(z1, lambda), relax_value(z1 + dz, lambda));
        prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
        prop_assert!(hi >= lo);
    }

    #[test]
    fn bernoulli_log_prob_by_hand(bits in prop::collection::vec(any::<bool>(), 1..10), a in -8.0..8.0f64) {
        let b: Vec<f64> = bits.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
        let theta = LogitParam::new(vec![a; b.len()]).unwrap();
        let t = sigmoid(a);
        let want: f64 = b.iter().map(|&x| x * t.ln() + (1.0 - x) * (1.0 - t).ln()).sum();
        prop_assert!((log_prob_bernoulli_value(&b, &theta) - want).abs() <= 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn truncated_gumbel_keeps_hot_index(k in 2usize..10, seed in any::<u64>()) {
        let p: Vec<f64> = {
            let w: Vec<f64> = (0..k).map(|i| 1.0 + ((seed >> (i % 60)) & 7) as f64).collect();
            let s: f64 = w.iter().sum();
            let mut p: Vec<f64> = w.iter().map(|x| x / s).collect();
            let rest: f64 = p[1..].iter().sum();
            p[0] = 1.0 - rest;
            p
        };
        let u: Vec<f64> = (0..k).map(|i| ((seed.rotate_left(i as u32 * 7) % 999_983) as f64 + 0.5) / 999_984.0).collect();
        let s = gumbel_max_sample(&u, &p).unwrap();
        let v: Vec<f64> = u.iter().rev().copied().collect();
        let z = truncated_gumbel_conditional(&v, &s.b, &p).unwrap();
        prop_assert_eq!(argmax(&z), s.hot_index());
    }

    #[test]
    fn gumbel_max_is_one_hot_at_argmax(p in simplex(4), u in prop::collection::vec(unit(), 4)) {
        let s = gumbel_max_sample(&u, &p).unwrap();
        prop_assert_eq!(s.b.iter().sum::<f64>(), 1.0);
        prop_assert_eq!(s.hot_index(), argmax(&s.z));
    }

    #[test]
    fn autodiff_matches_finite_differences(
        w in prop::collection::vec(-1.5..1.5f64, 6),
        x in prop::collection::vec(-1.5..1.5f64, 3),
    ) {
        // f(x) = Σ softplus(W tanh(x)) · σ(x₀) + log(1 + x²)
        let f = |xs: &[f64]| -> f64 {
            let h: Vec<f64> = xs.iter().map(|v| v.tanh()).collect();
            let wx: f64 = (0..2)
                .map(|r| {
                    let s: f64 = (0..3).map(|c| w[r * 3 + c] * h[c]).sum();
                    s.exp().ln_1p()
                })
                .sum();
            wx * sigmoid(xs[0]) + xs.iter().map(|v| (1.0 + v * v).ln()).sum::<f64>()
        };
        let tape = Tape::new();
        let xv = tape.param(Tensor::matrix(3, 1, x.clone()).unwrap());
        let wv = tape.constant(Tensor::matrix(2, 3, w.clone()).unwrap());
        let h = xv.tanh().unwrap();
        let out = wv.matmul(&h).unwrap().softplus().unwrap().sum().unwrap();
        let x0 = xv.reshape(Shape::Vector(3)).unwrap();
        let gate = x0.sigmoid().unwrap().mul_const(Tensor::vector(vec![1.0, 0.0, 0.0])).unwrap().sum().unwrap();
        let tail = xv.square().unwrap().shift(1.0).unwrap().log().unwrap().sum().unwrap();
        let total = out.mul(&gate).unwrap().add(&tail).unwrap();
        prop_assert!((total.value().item() - f(&x)).abs() < 1e-12);
        let ad = tape.backward(&total, &[xv]).unwrap().into_tensors().remove(0);
        let fd = finite_diff_gradient(f, &x, 1e-5).unwrap();
        for (a, b) in ad.data().iter().zip(&fd) {
            prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{} vs {}", a, b);
        }
    }

    #[test]
    fn adam_first_step_sign_is_scale_free(g in prop::collection::vec(-10.0..10.0f64, 1..6), c in 1e-3..1e3f64) {
        let step = |grad: &[f64]| {
            let mut adam = AdamState::new(AdamConfig { eps: 0.0, ..AdamConfig::default() });
            let id = adam.register("w", grad.len(), 1.0);
            let mut w = vec![0.0; grad.len()];
            adam.step(id, &mut w, grad).unwrap();
            w
        };
        let scaled: Vec<f64> = g.iter().map(|x| c * x).collect();
        for (a, b) in step(&g).iter().zip(&step(&scaled)) {
            prop_assert_eq!(a.signum(), b.signum());
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn tracker_variance_is_non_negative(stream in prop::collection::vec(prop::collection::vec(-1e3..1e3f64, 3), 1..50), d in 0.5..0.9999f64) {
        let mut t = VarianceTracker::new(3, d).unwrap();
        for s in &stream {
            t.update(s);
            prop_assert!(t.variances().iter().all(|v| *v >= 0.0));
        }
    }

    // beyond |x| ≈ 15, σ(x) rounds too close to 0 or 1 to invert
    #[test]
    fn logit_inverts_sigmoid(x in -15.0..15.0f64) {
        prop_assert!((logit(sigmoid(x)) - x).abs() <= 1e-7 * x.abs().max(1.0));
    }
}
