use rand::Rng;

use super::nn::{relu_backward, relu_in_place, Dense};

pub const HEAD_DROPOUT: f64 = 0.2;

/// features -> dropout -> dense(d, d/2) -> ReLU -> dropout -> dense(d/2, 1),
/// producing a single logit. The sigmoid is applied by the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    dropout_rate: f64,
    pub(crate) hidden: Dense,
    pub(crate) output: Dense,
}

/// Inverted-dropout masks: each entry is 0 or `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub features: Vec<f64>,
    pub hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden_out: Vec<f64>,
    masks: Option<DropoutMasks>,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, rng: &mut R) -> Self {
        let hidden_dim = feature_dim / 2;
        ClassifierHead {
            dropout_rate: HEAD_DROPOUT,
            hidden: Dense::uniform(feature_dim, hidden_dim, rng),
            output: Dense::uniform(hidden_dim, 1, rng),
        }
    }

    /// All weights and biases zero; every input maps to logit 0.
    pub fn zeroed(feature_dim: usize) -> Self {
        let hidden_dim = feature_dim / 2;
        ClassifierHead {
            dropout_rate: HEAD_DROPOUT,
            hidden: Dense::zeros(feature_dim, hidden_dim),
            output: Dense::zeros(hidden_dim, 1),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden.in_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.out_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output.out_dim
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    /// Panics unless `0 <= rate < 1`.
    pub fn set_dropout_rate(&mut self, rate: f64) {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate} outside [0, 1)");
        self.dropout_rate = rate;
    }

    /// Number of dropout layers in the head.
    pub fn dropout_sites(&self) -> usize {
        2
    }

    pub fn param_count(&self) -> usize {
        self.hidden.param_count() + self.output.param_count()
    }

    pub fn sample_masks<R: Rng + ?Sized>(&self, rng: &mut R) -> DropoutMasks {
        let keep = 1.0 - self.dropout_rate;
        let scale = 1.0 / keep;
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| if rng.random_bool(keep) { scale } else { 0.0 }).collect()
        };
        let features = draw(self.feature_dim());
        let hidden = draw(self.hidden_dim());
        DropoutMasks { features, hidden }
    }

    /// Forward pass; `masks = None` is evaluation mode.
    pub fn forward(&self, features: &[f64], masks: Option<DropoutMasks>) -> (f64, HeadCache) {
        let input: Vec<f64> = match &masks {
            Some(m) => features.iter().zip(&m.features).map(|(x, k)| x * k).collect(),
            None => features.to_vec(),
        };
        let hidden_pre = self.hidden.forward(&input);
        let mut hidden_out = hidden_pre.clone();
        relu_in_place(&mut hidden_out);
        if let Some(m) = &masks {
            hidden_out.iter_mut().zip(&m.hidden).for_each(|(h, k)| *h *= k);
        }
        let logit = self.output.forward(&hidden_out)[0];
        (
            logit,
            HeadCache {
                input,
                hidden_pre,
                hidden_out,
                masks,
            },
        )
    }

    pub fn logit(&self, features: &[f64]) -> f64 {
        self.forward(features, None).0
    }

    /// Accumulates into `grads` (`[hidden.w, hidden.b, output.w, output.b]`)
    /// and returns the gradient with respect to the (unmasked) features.
    pub fn backward(&self, cache: &HeadCache, dlogit: f64, grads: &mut [Vec<f64>]) -> Vec<f64> {
        let [hw, hb, ow, ob] = grads else { panic!("head has four parameter tensors") };
        let mut dh = self.output.backward(&cache.hidden_out, &[dlogit], ow, ob);
        if let Some(m) = &cache.masks {
            dh.iter_mut().zip(&m.hidden).for_each(|(g, k)| *g *= k);
        }
        relu_backward(&cache.hidden_pre, &mut dh);
        let mut dx = self.hidden.backward(&cache.input, &dh, hw, hb);
        if let Some(m) = &cache.masks {
            dx.iter_mut().zip(&m.features).for_each(|(g, k)| *g *= k);
        }
        dx
    }

    pub fn params(&self) -> Vec<&[f64]> {
        vec![&self.hidden.weight, &self.hidden.bias, &self.output.weight, &self.output.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.output.weight,
            &mut self.output.bias,
        ]
    }
}
