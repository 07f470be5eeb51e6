use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. Moment buffers are allocated on the
/// first step and must keep matching the parameter shapes afterwards.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a mut Tensor, &'a Tensor)>,
    ) -> Result<()> {
        let pairs: Vec<_> = params.into_iter().collect();
        if self.step == 0 {
            self.first = pairs.iter().map(|(p, _)| Tensor::zeros(p.shape())).collect();
            self.second = self.first.clone();
        }
        if pairs.len() != self.first.len() {
            return Err(Error::shape(
                "adam",
                format!("{} parameters for {} moment buffers", pairs.len(), self.first.len()),
            ));
        }
        for (i, (p, g)) in pairs.iter().enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::shape(
                    "adam",
                    format!(
                        "param {:?}, grad {:?}, state {:?}",
                        p.shape(),
                        g.shape(),
                        self.first[i].shape()
                    ),
                ));
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in pairs
            .into_iter()
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((w, &gi), (mi, vi)) in iter {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
            if !p.is_finite() {
                return Err(Error::NumericOverflow { op: "adam" });
            }
        }
        Ok(())
    }
}
