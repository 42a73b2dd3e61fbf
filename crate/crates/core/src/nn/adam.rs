use serde::{Deserialize, Serialize};

use super::{NetworkError, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update over parallel slices. Nothing is modified if any gradient
    /// is non-finite; the error names the first offending tensor.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], names: &[String]) -> Result<(), NetworkError> {
        assert_eq!(params.len(), grads.len(), "parameter and gradient counts differ");
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("tensor {i}"));
                return Err(NetworkError::NonFiniteGradient(name));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Steps every tensor of `params` with the matching tensor of `grads`.
    pub fn step_parameters(&mut self, params: &mut Parameters, grads: &Parameters) -> Result<(), NetworkError> {
        let named = grads.named_tensors();
        let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
        let g: Vec<&[f64]> = named.iter().map(|(_, t)| t.data()).collect();
        let mut tensors = params.tensors_mut();
        let mut p: Vec<&mut [f64]> = tensors.iter_mut().map(|t| t.data_mut()).collect();
        self.step(&mut p, &g, &names)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut x = [0.5];
        adam.step(&mut [&mut x[..]], &[&[1.0][..]], &[]).unwrap();
        let expected = 0.5 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((x[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut x = [0.25, -3.0];
        for _ in 0..10 {
            adam.step(&mut [&mut x[..]], &[&[0.0, 0.0][..]], &[]).unwrap();
        }
        assert_eq!(x, [0.25, -3.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        });
        let mut x = [3.0, -2.0];
        for _ in 0..2000 {
            let g = [2.0 * (x[0] - 1.0), 2.0 * (x[1] + 0.5)];
            adam.step(&mut [&mut x[..]], &[&g[..]], &[]).unwrap();
        }
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3, "{x:?}");
    }

    #[test]
    fn non_finite_gradient_is_named() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut a = [1.0];
        let mut b = [1.0];
        let err = adam
            .step(
                &mut [&mut a[..], &mut b[..]],
                &[&[0.1][..], &[f64::NAN][..]],
                &["first".into(), "second".into()],
            )
            .unwrap_err();
        assert_eq!(err, NetworkError::NonFiniteGradient("second".into()));
        assert_eq!((a, b), ([1.0], [1.0]));
        assert_eq!(adam.steps(), 0);
    }
}
