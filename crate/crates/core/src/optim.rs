//! Adam with named parameter groups, and the EMA gradient-variance tracker.

use crate::error::{Error, Result};

/// Constant learning rates swept for the linear models.
pub const LEARNING_RATE_GRID: [f64; 5] = [3e-5, 1e-4, 3e-4, 1e-3, 3e-3];

/// Learning-rate multiplier for baselines, control-variate scalings and the temperature.
pub const FAST_GROUP_MULTIPLIER: f64 = 10.0;

pub const DEFAULT_MINIBATCH: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    /// A large second-moment decay keeps the temperature updates from being
    /// biased by heavy-tailed gradient magnitudes; 0.99999 is the default.
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    lr_mult: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam over a fixed list of groups registered up front.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    slots: Vec<Slot>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupId(usize);

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            slots: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, len: usize, lr_mult: f64) -> GroupId {
        self.slots.push(Slot {
            name: name.into(),
            lr_mult,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        });
        GroupId(self.slots.len() - 1)
    }

    pub fn steps(&self, id: GroupId) -> u64 {
        self.slots[id.0].t
    }

    pub fn group_name(&self, id: GroupId) -> &str {
        &self.slots[id.0].name
    }

    /// One descent step on `param` along `grad`. A non-finite gradient
    /// leaves both the parameter and the moments untouched.
    pub fn step(&mut self, id: GroupId, param: &mut [f64], grad: &[f64]) -> Result<()> {
        let cfg = self.config;
        let slot = &mut self.slots[id.0];
        if grad.len() != param.len() || grad.len() != slot.m.len() {
            return Err(Error::InvalidArgument(format!(
                "group `{}`: gradient length {} for {} parameters",
                slot.name,
                grad.len(),
                slot.m.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                group: slot.name.clone(),
            });
        }
        slot.t += 1;
        let t = slot.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let lr = cfg.lr * slot.lr_mult;
        for i in 0..param.len() {
            let g = grad[i];
            slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
            slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = slot.m[i] / c1;
            let v_hat = slot.v[i] / c2;
            param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

pub const DEFAULT_EMA_DECAY: f64 = 0.999;

/// Exponential moving averages of the first and second moment of each
/// gradient component.
#[derive(Clone, Debug)]
pub struct VarianceTracker {
    decay: f64,
    m1: Vec<f64>,
    m2: Vec<f64>,
    updates: u64,
}

impl VarianceTracker {
    pub fn new(len: usize, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::InvalidArgument(format!("EMA decay must be in (0, 1), got {decay}")));
        }
        Ok(VarianceTracker {
            decay,
            m1: vec![0.0; len],
            m2: vec![0.0; len],
            updates: 0,
        })
    }

    pub fn update(&mut self, sample: &[f64]) {
        let d = self.decay;
        for ((m1, m2), &g) in self.m1.iter_mut().zip(self.m2.iter_mut()).zip(sample) {
            *m1 = d * *m1 + (1.0 - d) * g;
            *m2 = d * *m2 + (1.0 - d) * g * g;
        }
        self.updates += 1;
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Bias-corrected per-component variances.
    pub fn variances(&self) -> Vec<f64> {
        if self.updates == 0 {
            return vec![0.0; self.m1.len()];
        }
        let c = 1.0 - self.decay.powf(self.updates as f64);
        self.m1
            .iter()
            .zip(&self.m2)
            .map(|(m1, m2)| (m2 / c - (m1 / c).powi(2)).max(0.0))
            .collect()
    }

    pub fn mean_variance(&self) -> f64 {
        let v = self.variances();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// `ln` of the mean per-component variance.
    pub fn ln_variance(&self) -> f64 {
        self.mean_variance().ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, standard_normal};

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = AdamState::new(AdamConfig::default());
        let id = adam.register("w", 2, 1.0);
        let mut p = vec![1.0, -2.0];
        adam.step(id, &mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn three_steps_match_hand_recursion() {
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut adam = AdamState::new(cfg);
        let id = adam.register("x", 1, 1.0);
        let mut x = [0.0];
        let grads = [0.5, -1.0, 2.0];
        let (mut m, mut v, mut expect) = (0.0f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            adam.step(id, &mut x, &[g]).unwrap();
            let t = (t + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            expect -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            assert!((x[0] - expect).abs() < 1e-15);
        }
        // first step is -lr * sign(g)
        let mut adam = AdamState::new(cfg);
        let id = adam.register("y", 1, 1.0);
        let mut y = [0.0];
        adam.step(id, &mut y, &[3.0]).unwrap();
        assert!((y[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn constant_gradient_moves_at_lr() {
        let mut adam = AdamState::new(AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        });
        let id = adam.register("x", 1, 1.0);
        let mut x = [0.0];
        for _ in 0..1000 {
            adam.step(id, &mut x, &[0.7]).unwrap();
        }
        let before = x[0];
        adam.step(id, &mut x, &[0.7]).unwrap();
        assert!(((before - x[0]) - 0.01).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_group() {
        let mut adam = AdamState::new(AdamConfig::default());
        let id = adam.register("enc.w0", 2, 1.0);
        let mut p = vec![1.0, 1.0];
        let err = adam.step(id, &mut p, &[1.0, f64::NAN]).unwrap_err();
        assert_eq!(
            err,
            Error::NonFiniteGradient {
                group: "enc.w0".into()
            }
        );
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(adam.steps(id), 0);
    }

    #[test]
    fn fast_group_multiplier() {
        let mut adam = AdamState::new(AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        });
        let slow = adam.register("w", 1, 1.0);
        let fast = adam.register("eta", 1, FAST_GROUP_MULTIPLIER);
        let (mut a, mut b) = ([0.0], [0.0]);
        adam.step(slow, &mut a, &[1.0]).unwrap();
        adam.step(fast, &mut b, &[1.0]).unwrap();
        assert!((b[0] / a[0] - 10.0).abs() < 1e-6);
    }

    #[test]
    fn tracker_constant_stream_has_no_variance() {
        let mut tr = VarianceTracker::new(3, 0.999).unwrap();
        for _ in 0..5000 {
            tr.update(&[1.0, 2.0, -3.0]);
        }
        assert!(tr.mean_variance() < 1e-12);
        assert!(tr.variances().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn tracker_calibrates_on_normal_stream() {
        let mut rng = seeded(11);
        let mut tr = VarianceTracker::new(4, 0.999).unwrap();
        for _ in 0..100_000 {
            let g: Vec<f64> = (0..4).map(|_| standard_normal(&mut rng)).collect();
            tr.update(&g);
        }
        for v in tr.variances() {
            assert!((v - 1.0).abs() < 0.1, "{v}");
        }
    }

    #[test]
    fn tracker_log_variance_gap() {
        let mut rng = seeded(12);
        let mut lo = VarianceTracker::new(8, 0.999).unwrap();
        let mut hi = VarianceTracker::new(8, 0.999).unwrap();
        let scale = 10f64.sqrt();
        for _ in 0..50_000 {
            let g: Vec<f64> = (0..8).map(|_| standard_normal(&mut rng)).collect();
            lo.update(&g);
            let g: Vec<f64> = (0..8).map(|_| scale * standard_normal(&mut rng)).collect();
            hi.update(&g);
        }
        let gap = hi.ln_variance() - lo.ln_variance();
        assert!((gap - 10f64.ln()).abs() < 0.2, "{gap}");
    }

    #[test]
    fn tracker_rejects_bad_decay() {
        assert!(VarianceTracker::new(1, 1.0).is_err());
        assert!(VarianceTracker::new(1, 0.0).is_err());
    }
}
