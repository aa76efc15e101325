use std::ops::Range;

use super::TrainConfig;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: &TrainConfig, shapes: &[usize]) -> Self {
        AdamW {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates the tensors in `trainable` using `grads` (laid out like
    /// `params`) at learning rate `lr`.
    pub fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: &[Vec<f64>], trainable: Range<usize>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.into_iter().enumerate() {
            if !trainable.contains(&i) {
                continue;
            }
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..p.len() {
                p[j] *= 1.0 - lr * self.weight_decay;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    /// First moments, second moments, then a one-element step counter.
    pub fn state_tensors(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.m.iter().chain(&self.v).cloned().collect();
        out.push(vec![self.step as f64]);
        out
    }

    pub fn restore(&mut self, mut tensors: Vec<Vec<f64>>) -> Result<(), String> {
        let n = self.m.len();
        if tensors.len() != 2 * n + 1 {
            return Err(format!("expected {} optimiser tensors, found {}", 2 * n + 1, tensors.len()));
        }
        let step = tensors.pop().expect("step tensor");
        let v = tensors.split_off(n);
        for (have, want) in tensors.iter().chain(&v).zip(self.m.iter().chain(&self.v)) {
            if have.len() != want.len() {
                return Err("optimiser tensor length differs from model".into());
            }
        }
        match step.as_slice() {
            [s] if *s >= 0.0 && s.fract() == 0.0 => self.step = *s as u64,
            _ => return Err("malformed optimiser step counter".into()),
        }
        self.m = tensors;
        self.v = v;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut opt = AdamW::new(&cfg, &[2]);
        let mut p = vec![1.0, -1.0];
        opt.step(vec![&mut p], &[vec![0.5, -3.0]], 0..1, 1e-3);
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn decay_is_decoupled() {
        let cfg = TrainConfig { weight_decay: 0.1, ..TrainConfig::default() };
        let mut opt = AdamW::new(&cfg, &[1]);
        let mut p = vec![2.0];
        opt.step(vec![&mut p], &[vec![0.0]], 0..1, 0.5);
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn frozen_tensors_untouched_and_state_round_trips() {
        let cfg = TrainConfig::default();
        let mut opt = AdamW::new(&cfg, &[1, 1]);
        let (mut a, mut b) = (vec![1.0], vec![1.0]);
        opt.step(vec![&mut a, &mut b], &[vec![1.0], vec![1.0]], 1..2, 1e-2);
        assert_eq!(a, vec![1.0]);
        assert_ne!(b, vec![1.0]);
        let mut other = AdamW::new(&cfg, &[1, 1]);
        other.restore(opt.state_tensors()).unwrap();
        assert_eq!(other, opt);
        assert!(other.restore(vec![vec![0.0]]).is_err());
    }
}
