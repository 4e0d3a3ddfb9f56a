use std::collections::BTreeMap;

use crate::error::{param_err, Result};
use crate::numeric::Params;

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    scales: BTreeMap<String, f64>,
    m: Params,
    v: Params,
}

impl Adam {
    pub fn new(params: &Params, learning_rate: f64, betas: (f64, f64), epsilon: f64) -> Self {
        Self {
            learning_rate,
            beta1: betas.0,
            beta2: betas.1,
            epsilon,
            step: 0,
            scales: BTreeMap::new(),
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Multiplies the learning rate of parameter `name` by `scale`.
    pub fn set_scale(&mut self, name: &str, scale: f64) {
        self.scales.insert(name.to_string(), scale);
    }

    /// Effective learning rate of parameter `name`.
    pub fn step_size(&self, name: &str) -> f64 {
        self.learning_rate * self.scales.get(name).copied().unwrap_or(1.0)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update `θ ← θ − lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: &mut Params, grads: &Params) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            if g.shape() != p.shape() {
                return param_err(format!("gradient shape mismatch for `{name}`"));
            }
            let lr = self.step_size(name);
            let m = self.m.get_mut(name)?;
            let v = self.v.get_mut(name)?;
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so that their global ℓ2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, t)| t.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Params::new();
        p.insert("w", Tensor::vector(vec![1.0, -2.0, 0.0]));
        let mut g = Params::new();
        g.insert("w", Tensor::vector(vec![0.5, -3.0, 0.0]));
        let mut adam = Adam::new(&p, 0.1, (0.9, 0.999), 1e-8);
        adam.step(&mut p, &g).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-6);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn per_parameter_scale() {
        let mut p = Params::new();
        p.insert("a", Tensor::vector(vec![0.0]));
        p.insert("b", Tensor::vector(vec![0.0]));
        let mut g = Params::new();
        g.insert("a", Tensor::vector(vec![1.0]));
        g.insert("b", Tensor::vector(vec![1.0]));
        let mut adam = Adam::new(&p, 0.01, (0.9, 0.999), 1e-8);
        adam.set_scale("b", 10.0);
        assert_eq!(adam.step_size("a"), 0.01);
        adam.step(&mut p, &g).unwrap();
        assert!((p.get("a").unwrap().item() + 0.01).abs() < 1e-8);
        assert!((p.get("b").unwrap().item() + 0.1).abs() < 1e-7);
    }

    #[test]
    fn clipping() {
        let mut g = Params::new();
        g.insert("a", Tensor::vector(vec![3.0]));
        g.insert("b", Tensor::vector(vec![4.0]));
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g.get("a").unwrap().data(), &[3.0]);
        clip_global_norm(&mut g, 1.0);
        assert!((g.get("a").unwrap().data()[0] - 0.6).abs() < 1e-15);
        assert!((g.get("b").unwrap().data()[0] - 0.8).abs() < 1e-15);
    }
}
