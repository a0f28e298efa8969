use serde::{Deserialize, Serialize};

use super::Tensor;

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Coupled L2 penalty: `weight_decay * p` is added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    first_moment: Vec<Vec<f32>>,
    second_moment: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.first_moment.len()
    }

    /// One bias-corrected update. Parameters whose gradient is `None` are left
    /// alone and their moments are not advanced.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>]) {
        assert_eq!(params.len(), self.first_moment.len(), "parameter list changed");
        assert_eq!(params.len(), grads.len());
        self.step_count += 1;
        let c = self.config;
        let t = self.step_count as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            assert_eq!(p.len(), g.len(), "gradient shape mismatch for parameter {i}");
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let grad = gi as f64 + c.weight_decay * *w as f64;
                let m_new = c.beta1 * *mi as f64 + (1.0 - c.beta1) * grad;
                let v_new = c.beta2 * *vi as f64 + (1.0 - c.beta2) * grad * grad;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let m_hat = m_new / bias1;
                let v_hat = v_new / bias2;
                *w = (*w as f64 - c.lr * m_hat / (v_hat.sqrt() + c.epsilon)) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        st.step(&mut [&mut p], &[Some(Tensor::zeros(&[2]))]);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::from_vec(vec![1.0]);
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        st.step(&mut [&mut p], &[Some(Tensor::from_vec(vec![1.0]))]);
        // m̂ = 1, v̂ = 1 → Δ = lr / (1 + ε)
        assert!((p.data()[0] as f64 - (1.0 - 3e-4)).abs() < 1e-7);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = Tensor::from_vec(vec![0.3, 0.7]);
        let before = p.clone();
        let cfg = AdamConfig { lr: 0.0, weight_decay: 0.1, ..Default::default() };
        let mut st = AdamState::new(cfg, &[&p]);
        for _ in 0..3 {
            st.step(&mut [&mut p], &[Some(Tensor::from_vec(vec![0.5, -1.0]))]);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn descends_a_quadratic() {
        // f(p) = (p - 3)², gradient 2(p - 3)
        let mut p = Tensor::from_vec(vec![0.0]);
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut st = AdamState::new(cfg, &[&p]);
        let mut last = f64::INFINITY;
        for _ in 0..2 {
            let x = p.data()[0] as f64;
            let g = Tensor::from_vec(vec![(2.0 * (x - 3.0)) as f32]);
            st.step(&mut [&mut p], &[Some(g)]);
            let loss = (p.data()[0] as f64 - 3.0).powi(2);
            assert!(loss < last);
            last = loss;
        }
    }
}
