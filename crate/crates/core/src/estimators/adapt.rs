//! Online adaptation of the control-variate scalings `η` and the temperature.

use super::{estimate, Baseline, EstimatorConfig, GradEstimate, Noise, StochasticObjective};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState, GroupId, FAST_GROUP_MULTIPLIER};
use crate::reparam::Temperature;

/// `η` per parameter group and `ψ = log λ`, each with its own Adam slot.
#[derive(Clone, Debug)]
pub struct ControlVariateState {
    pub eta: Vec<f64>,
    pub psi: f64,
    adam: AdamState,
    eta_slots: Vec<GroupId>,
    psi_slot: GroupId,
}

impl ControlVariateState {
    /// `adam.lr` is the model learning rate; the slots run at 10× that.
    pub fn new(eta: Vec<f64>, temperature: Temperature, adam: AdamConfig) -> Self {
        let mut opt = AdamState::new(adam);
        let eta_slots = (0..eta.len())
            .map(|g| opt.register(format!("eta[{g}]"), 1, FAST_GROUP_MULTIPLIER))
            .collect();
        let psi_slot = opt.register("log_lambda", 1, FAST_GROUP_MULTIPLIER);
        ControlVariateState {
            eta,
            psi: temperature.psi(),
            adam: opt,
            eta_slots,
            psi_slot,
        }
    }

    pub fn from_config(cfg: &EstimatorConfig, adam: AdamConfig) -> Self {
        ControlVariateState::new(cfg.eta.clone(), cfg.temperature, adam)
    }

    pub fn temperature(&self) -> Temperature {
        Temperature::from_psi(self.psi)
    }

    /// Copies the current `η` and `λ` into `cfg`.
    pub fn apply_to(&self, cfg: &mut EstimatorConfig) {
        cfg.eta.clone_from(&self.eta);
        cfg.temperature = self.temperature();
    }

    /// One step on `Σ r²` per group, where `r = a - η c` and `d/dη Σ r² = -2 Σ r c`.
    pub fn eta_update(&mut self, base: &[Tensor], cv: &[Tensor]) -> Result<()> {
        if base.len() != self.eta.len() || cv.len() != self.eta.len() {
            return Err(Error::InvalidArgument(format!(
                "{} groups in the estimate, {} η values",
                base.len(),
                self.eta.len()
            )));
        }
        for g in 0..self.eta.len() {
            let e = self.eta[g];
            let grad: f64 = base[g]
                .data()
                .iter()
                .zip(cv[g].data())
                .map(|(a, c)| -2.0 * (a - e * c) * c)
                .sum();
            let mut slot = [e];
            self.adam.step(self.eta_slots[g], &mut slot, &[grad])?;
            self.eta[g] = slot[0];
        }
        Ok(())
    }

    /// Single-sample `d/dψ Σ r²` by central differences in `ψ` with the same noise.
    pub fn lambda_gradient<O: StochasticObjective + ?Sized>(
        &self,
        obj: &O,
        input: &Tensor,
        noise: &Noise,
        cfg: &EstimatorConfig,
        baseline: Option<&Baseline>,
        current: &GradEstimate,
    ) -> Result<f64> {
        let h = cfg.lambda_fd_step;
        let at = |psi: f64| -> Result<Vec<f64>> {
            let mut c = cfg.clone();
            c.eta.clone_from(&self.eta);
            c.temperature = Temperature::from_psi(psi);
            estimate(obj, input, noise, &c, baseline)
                .map(|e| e.flat())
                .map_err(|_| Error::NonFiniteEstimate {
                    estimator: cfg.kind.name(),
                    what: "estimate at perturbed temperature",
                })
        };
        let plus = at(self.psi + h)?;
        let minus = at(self.psi - h)?;
        let r = current.flat();
        Ok(r.iter()
            .zip(plus.iter().zip(&minus))
            .map(|(r, (p, m))| 2.0 * r * (p - m) / (2.0 * h))
            .sum())
    }

    /// Adam step on `ψ` along `lambda_gradient`. Returns the gradient used.
    pub fn lambda_update<O: StochasticObjective + ?Sized>(
        &mut self,
        obj: &O,
        input: &Tensor,
        noise: &Noise,
        cfg: &EstimatorConfig,
        baseline: Option<&Baseline>,
        current: &GradEstimate,
    ) -> Result<f64> {
        let grad = self.lambda_gradient(obj, input, noise, cfg, baseline, current)?;
        self.step_psi(grad)?;
        Ok(grad)
    }

    pub fn step_psi(&mut self, grad: f64) -> Result<()> {
        let mut slot = [self.psi];
        self.adam.step(self.psi_slot, &mut slot, &[grad])?;
        self.psi = slot[0];
        Ok(())
    }
}
