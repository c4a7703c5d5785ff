//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{NdError, Result};
use crate::float::Float;
use crate::param::ParameterTree;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments per parameter name plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState<F> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor<F>, Tensor<F>)>,
}

impl<F: Float> OptimizerState<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<&(Tensor<F>, Tensor<F>)> {
        self.moments.get(name)
    }

    /// One update of every trainable parameter in `tree`. Frozen entries are
    /// not touched. Gradients are consumed (cleared) by the step.
    pub fn step(&mut self, tree: &mut ParameterTree<F>) -> Result<()> {
        if let Some((name, _)) = tree.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
            return Err(NdError::MissingGradient(name.to_string()));
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (F::c(c.beta1), F::c(c.beta2));
        let bc1 = F::c(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = F::c(1.0 - c.beta2.powi(self.step as i32));
        let lr = F::c(c.lr);
        let eps = F::c(c.eps);
        for (name, p) in tree.iter_mut() {
            if !p.trainable {
                continue;
            }
            let g = p.grad.take().expect("checked above");
            let shape = g.shape().to_vec();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(&shape), Tensor::zeros(&shape)));
            m.expect_shape("adam moment", &shape)?;
            let w = std::sync::Arc::make_mut(&mut p.tensor);
            for (((wv, &gv), mv), vv) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (F::one() - b1) * gv;
                *vv = b2 * *vv + (F::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *wv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
