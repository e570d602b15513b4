use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter set. Moments are created lazily (zeroed)
/// the first time a parameter receives a gradient.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: ParamSet,
    second_moment: ParamSet,
    step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: ParamSet::new(),
            second_moment: ParamSet::new(),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &ParamSet {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &ParamSet {
        &self.second_moment
    }

    /// Applies one bias-corrected Adam update to every parameter in `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        for (id, g) in grads.iter() {
            let p = params.get(id).ok_or(Error::MissingParam(*id))?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    layer: format!("adam {id}"),
                    expected: p.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (id, g) in grads.iter() {
            if self.first_moment.get(id).is_none() {
                self.first_moment.insert(*id, Tensor::zeros(g.shape()));
                self.second_moment.insert(*id, Tensor::zeros(g.shape()));
            }
            let m = self.first_moment.get_mut(id).expect("moment created above");
            for (mv, gv) in m.data_mut().iter_mut().zip(g.data()) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
            }
            let v = self.second_moment.get_mut(id).expect("moment created above");
            for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            }
            let m = self.first_moment.get(id).expect("moment created above").data();
            let v = self.second_moment.get(id).expect("moment created above").data();
            let p = params.get_mut(id).expect("checked above");
            for ((pv, mv), vv) in p.data_mut().iter_mut().zip(m).zip(v) {
                *pv -= lr * (mv / c1) / ((vv / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
