//! Minimal trainable network substrate: layer forward/backward over a
//! [`ParamSet`], cross-entropy, and Adam.

mod adam;
mod layers;
mod loss;

pub use adam::{AdamConfig, AdamState};
pub use layers::{LayerCache, LayerKind};
pub use loss::{cross_entropy, mse, softmax_rows};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{LayerId, ParamSet, Role, Scope};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// BatchNorm normalizes with batch statistics; caches are kept for backward.
    Train,
    /// BatchNorm uses running statistics; nothing is cached.
    Eval,
}

/// A layer kind bound to the parameter namespace it reads from.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub scope: Scope,
    pub index: usize,
}

impl Layer {
    pub fn new(kind: LayerKind, scope: Scope, index: usize) -> Self {
        Self { kind, scope, index }
    }

    pub fn id(&self, role: Role) -> LayerId {
        LayerId::new(self.scope, self.index, role)
    }

    pub fn name(&self) -> String {
        let id = self.id(Role::ConvW).to_string();
        let prefix = id.rsplit_once('.').map_or(id.as_str(), |(head, _)| head);
        format!("{prefix} ({})", self.kind.name())
    }
}

#[derive(Debug, Default)]
pub struct ForwardCache {
    entries: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Runs `input` through `layers`.
///
/// In [`Mode::Eval`] the returned cache is empty and cannot be passed to
/// [`backward`].
pub fn forward(
    layers: &[Layer],
    params: &ParamSet,
    input: &Tensor,
    mode: Mode,
) -> Result<(Tensor, ForwardCache)> {
    let mut cache = ForwardCache::default();
    let mut x = input.clone();
    for layer in layers {
        let (y, c) = layer.kind.forward(layer, params, &x, mode)?;
        if mode == Mode::Train {
            cache.entries.push(c);
        }
        x = y;
    }
    Ok((x, cache))
}

/// Back-propagates `grad_output` through the layers recorded in `cache`.
///
/// Returns the gradient w.r.t. the stack's input and gradients for every
/// learnable parameter of the stack.
pub fn backward(
    layers: &[Layer],
    params: &ParamSet,
    cache: &ForwardCache,
    grad_output: &Tensor,
) -> Result<(Tensor, ParamSet)> {
    if cache.entries.len() != layers.len() {
        return Err(Error::CacheMismatch(format!(
            "{} cached layers for a stack of {}",
            cache.entries.len(),
            layers.len()
        )));
    }
    let mut grads = ParamSet::new();
    let mut g = grad_output.clone();
    for (layer, c) in layers.iter().zip(&cache.entries).rev() {
        g = layer.kind.backward(layer, params, c, &g, &mut grads)?;
    }
    Ok((g, grads))
}

/// Folds the batch statistics observed in a train-mode forward pass into the
/// running BatchNorm statistics.
pub fn commit_running_stats(
    layers: &[Layer],
    params: &mut ParamSet,
    cache: &ForwardCache,
) -> Result<()> {
    for (layer, c) in layers.iter().zip(&cache.entries) {
        if let (LayerKind::BatchNorm { momentum, .. }, LayerCache::BatchNorm(bn)) = (&layer.kind, c)
        {
            for (role, batch) in [(Role::BnMean, &bn.batch_mean), (Role::BnVar, &bn.batch_var_unbiased)] {
                let id = layer.id(role);
                let running = params.get_mut(&id).ok_or(Error::MissingParam(id))?;
                for (r, b) in running.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
        }
    }
    Ok(())
}

/// Output shape (without the batch dimension) of the whole stack.
pub fn output_shape(layers: &[Layer], input: &[usize]) -> Result<Vec<usize>> {
    let mut shape = input.to_vec();
    for layer in layers {
        shape = layer.kind.output_shape(&shape).map_err(|msg| Error::ShapeMismatch {
            layer: format!("{}: {msg}", layer.name()),
            expected: layer.kind.expected_input().unwrap_or_default(),
            actual: shape.clone(),
        })?;
    }
    Ok(shape)
}

/// Kaiming-uniform (fan-in) weights, zero biases, identity BatchNorm.
pub fn init_params<R: Rng>(layers: &[Layer], rng: &mut R) -> ParamSet {
    let mut out = ParamSet::new();
    for layer in layers {
        for (role, shape) in layer.kind.param_shapes() {
            let t = match role {
                Role::ConvW | Role::FcW => {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound))
                }
                Role::BnScale | Role::BnVar => Tensor::full(&shape, 1.0),
                _ => Tensor::zeros(&shape),
            };
            out.insert(layer.id(role), t);
        }
    }
    out
}

#[cfg(test)]
mod tests;
