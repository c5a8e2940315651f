use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParameterRegistry;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// First and second moments per parameter, in registry order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(registry: &ParameterRegistry) -> Self {
        let zeros: Vec<Vec<f64>> = registry.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update from the gradients stored on each
/// registry tensor.
pub fn adam_step(registry: &mut ParameterRegistry, state: &mut OptimState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != registry.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer state covers {} parameters, registry has {}",
            state.m.len(),
            registry.len()
        )));
    }
    for (i, t) in registry.tensors().iter().enumerate() {
        if t.grad().is_none() {
            return Err(Error::MissingGradient(registry.iter().nth(i).map(|(n, _)| n.to_string()).unwrap_or_default()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, tensor) in registry.tensors_mut().iter_mut().enumerate() {
        let g = tensor.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, x) in tensor.values_mut().iter_mut().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            *x -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn single(x: f64) -> (ParameterRegistry, OptimState) {
        let mut reg = ParameterRegistry::new();
        reg.register("x", Tensor::from_vec(vec![x])).unwrap();
        let state = OptimState::new(&reg);
        (reg, state)
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let (mut reg, mut state) = single(0.7);
        reg.assign_grads(vec![vec![0.0]]).unwrap();
        adam_step(&mut reg, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(reg.tensors()[0].values(), &[0.7]);
        assert_eq!((state.m[0][0], state.v[0][0], state.step), (0.0, 0.0, 1));
    }

    #[test]
    fn first_step_moves_by_the_learning_rate() {
        let cfg = AdamConfig::default();
        for g in [1e-3, 0.5, -3.0, 250.0] {
            let (mut reg, mut state) = single(0.0);
            reg.assign_grads(vec![vec![g]]).unwrap();
            adam_step(&mut reg, &mut state, &cfg).unwrap();
            let moved = reg.tensors()[0].values()[0];
            let expected = cfg.learning_rate * g.abs() / (g.abs() + cfg.epsilon);
            assert!((moved.abs() - expected).abs() < 1e-15, "{g}");
            assert_eq!(moved.signum(), -g.signum());
        }
    }

    #[test]
    fn descends_a_parabola_monotonically() {
        let cfg = AdamConfig { learning_rate: 0.1, ..AdamConfig::default() };
        let (mut reg, mut state) = single(1.0);
        let mut prev = 1.0;
        for _ in 0..10 {
            let x = reg.tensors()[0].values()[0];
            reg.assign_grads(vec![vec![2.0 * x]]).unwrap();
            adam_step(&mut reg, &mut state, &cfg).unwrap();
            let x = reg.tensors()[0].values()[0];
            assert!(x * x < prev);
            prev = x * x;
        }
    }

    #[test]
    fn missing_gradient_and_bad_config_are_errors() {
        let (mut reg, mut state) = single(1.0);
        assert!(matches!(
            adam_step(&mut reg, &mut state, &AdamConfig::default()),
            Err(Error::MissingGradient(name)) if name == "x"
        ));
        assert_eq!(state.step, 0);
        assert!(AdamConfig { beta2: 1.0, ..AdamConfig::default() }.validate().is_err());
        assert!(AdamConfig { learning_rate: 0.0, ..AdamConfig::default() }.validate().is_err());
        assert!(AdamConfig::default().validate().is_ok());
    }
}
