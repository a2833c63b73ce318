use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second.get(name).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
///
/// Parameters without an entry in `grads` keep their values and moments.
/// The whole update is rejected, leaving params and state untouched, if any
/// gradient is non-finite or mis-shaped.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
        if p.len() != g.len() {
            return Err(Error::dim(
                "adam_step",
                format!("{name}: parameter has {} values, gradient {}", p.len(), g.len()),
            ));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {name}, element {i} = {}",
                g[i]
            )));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(value))])
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut params = single(1.5);
        let mut state = AdamState::new(AdamConfig::default());
        let grads = BTreeMap::from([("w".to_string(), vec![0.0])]);
        adam_step(&mut params, &grads, &mut state, 0.1).unwrap();
        assert_eq!(params["w"].data(), &[1.5]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m1 = 0.1, v1 = 0.001; m̂ = 1, v̂ = 1; step = 0.1 / (1 + 1e-8).
        let mut params = single(1.0);
        let mut state = AdamState::new(AdamConfig::default());
        let grads = BTreeMap::from([("w".to_string(), vec![1.0])]);
        adam_step(&mut params, &grads, &mut state, 0.1).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((params["w"].data()[0] - expected).abs() < 1e-15);
        assert!((params["w"].data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn identical_params_update_identically() {
        let mut params = BTreeMap::from([
            ("a".to_string(), Tensor::from_vec(vec![0.3, -0.2])),
            ("b".to_string(), Tensor::from_vec(vec![0.3, -0.2])),
        ]);
        let mut state = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            let grads = BTreeMap::from([
                ("a".to_string(), vec![0.7, -1.1]),
                ("b".to_string(), vec![0.7, -1.1]),
            ]);
            adam_step(&mut params, &grads, &mut state, 0.01).unwrap();
        }
        assert_eq!(params["a"], params["b"]);
    }

    #[test]
    fn non_finite_gradient_is_rejected_by_name() {
        let mut params = single(1.0);
        let mut state = AdamState::new(AdamConfig::default());
        let grads = BTreeMap::from([("w".to_string(), vec![f64::NAN])]);
        let err = adam_step(&mut params, &grads, &mut state, 0.1).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(state.step, 0);
        assert_eq!(params["w"].data(), &[1.0]);
    }
}
