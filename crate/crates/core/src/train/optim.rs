use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::round_to_precision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Exponent of the polynomial learning-rate decay.
    pub power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            power: 0.9,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.power >= 0.0;
        if !ok {
            return Err(Error::invalid("optim_config", format!("{self:?}")));
        }
        Ok(())
    }
}

/// `lr_base * (1 - iter / max_iter)^power`.
pub fn lr_schedule(iter: u64, max_iter: u64, lr_base: f64, power: f64) -> Result<f64> {
    if iter > max_iter || max_iter == 0 {
        return Err(Error::invalid(
            "lr_schedule",
            format!("iteration {iter} outside 0..={max_iter}"),
        ));
    }
    Ok(lr_base * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// SGD with momentum, L2 weight decay folded into the velocity:
/// `v <- m v + g + wd p`, `p <- p - lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub cfg: OptimConfig,
    pub velocity: Vec<Vec<f64>>,
    pub iter: u64,
    pub max_iter: u64,
}

impl OptimState {
    pub fn new(cfg: OptimConfig, store: &ParamStore, max_iter: u64) -> Self {
        Self {
            cfg,
            velocity: store.params().iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            iter: 0,
            max_iter,
        }
    }

    pub fn lr(&self) -> Result<f64> {
        lr_schedule(self.iter, self.max_iter, self.cfg.lr, self.cfg.power)
    }

    /// Applies one update in parameter-store order and advances `iter`.
    /// Weight decay only touches parameters flagged for it. Returns the
    /// learning rate used.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) -> Result<f64> {
        if grads.len() != store.params().len() || self.velocity.len() != grads.len() {
            return Err(Error::invalid(
                "sgd_step",
                format!("{} grads for {} parameters", grads.len(), store.params().len()),
            ));
        }
        let lr = self.lr()?;
        let (m, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        for ((p, g), v) in store.params_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            let g = g.as_ref().ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
            let decay = if p.decay { wd } else { 0.0 };
            let data = p.value.data_mut();
            for ((pi, gi), vi) in data.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = m * *vi + gi + decay * *pi;
                *pi -= lr * *vi;
            }
            round_to_precision(v);
            round_to_precision(data);
        }
        self.iter += 1;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Builder, Init};
    use crate::tensor::rng::{DetRng, Domain};

    fn store(values: &[f64], decay: bool) -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = DetRng::new(0, Domain::Test, &[]);
        let id = Builder::new(&mut s, &mut rng).param("p", &[values.len()], Init::Zeros, decay);
        s.param_mut(id).value.data_mut().copy_from_slice(values);
        s
    }

    #[test]
    fn schedule_points() {
        assert_eq!(lr_schedule(0, 100, 0.05, 0.9).unwrap(), 0.05);
        assert_eq!(lr_schedule(100, 100, 0.05, 0.9).unwrap(), 0.0);
        assert!((lr_schedule(50, 100, 0.05, 0.9).unwrap() - 0.02679).abs() < 1e-5);
        assert!(lr_schedule(101, 100, 0.05, 0.9).is_err());
    }

    #[test]
    fn vanilla_sgd() {
        let mut s = store(&[1.0, -2.0], true);
        let cfg = OptimConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0, power: 0.0 };
        let mut opt = OptimState::new(cfg, &s, 10);
        opt.step(&mut s, &[Some(vec![0.5, 1.0])]).unwrap();
        assert_eq!(s.params()[0].value.data(), &[1.0 - 0.05, -2.0 - 0.1]);
    }

    #[test]
    fn zero_grad_decays_velocity_only() {
        let mut s = store(&[3.0], true);
        let cfg = OptimConfig { lr: 0.1, momentum: 0.5, weight_decay: 0.0, power: 0.0 };
        let mut opt = OptimState::new(cfg, &s, 10);
        opt.velocity[0][0] = 2.0;
        opt.step(&mut s, &[Some(vec![0.0])]).unwrap();
        assert_eq!(opt.velocity[0][0], 1.0);
        assert_eq!(s.params()[0].value.data(), &[3.0 - 0.1]);
    }

    #[test]
    fn missing_grad_errors() {
        let mut s = store(&[1.0], false);
        let mut opt = OptimState::new(OptimConfig::default(), &s, 10);
        assert!(matches!(opt.step(&mut s, &[None]), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn no_decay_on_flagged_params() {
        let mut s = store(&[1.0], false);
        let cfg = OptimConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.5, power: 0.0 };
        let mut opt = OptimState::new(cfg, &s, 10);
        opt.step(&mut s, &[Some(vec![0.0])]).unwrap();
        assert_eq!(s.params()[0].value.data(), &[1.0]);
    }
}
