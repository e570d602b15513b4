//! Multi-exit CNNs split depth-wise into segments, one exit head per segment.
//!
//! A tier-`t` client holds segments `1..=t` and exit heads `1..=t`. Local
//! training sums the cross-entropy of every owned exit and back-propagates the
//! sum once.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine::{
    self, cross_entropy, softmax_rows, AdamConfig, AdamState, ForwardCache, Layer, LayerKind,
    Mode,
};
use crate::error::{Error, Result};
use crate::params::{LayerId, ParamSet, Role, Scope};
use crate::rng::{self, StreamRng, NONE};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Per-sample input shape `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub backbone: Vec<LayerKind>,
    /// Backbone index of the last layer of each segment; one exit per entry.
    pub exit_after: Vec<usize>,
    #[serde(default)]
    pub head: ExitHead,
}

/// How an exit turns a `[C, H, W]` feature map into logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitHead {
    /// Global average pool, then a dense layer over `C` features.
    #[default]
    GlobalAvgPool,
    /// Flatten all `C * H * W` activations into a dense layer.
    Flatten,
}

impl ModelSpec {
    /// A plain CNN of 3x3 conv -> BatchNorm -> ReLU units.
    ///
    /// `pool_after` and `exit_convs` are 1-based conv ordinals. A 2x2 max-pool
    /// follows the listed convs; an exit after a pooled conv sits after the
    /// pool.
    pub fn conv_net(
        input_shape: [usize; 3],
        num_classes: usize,
        channels: &[usize],
        pool_after: &[usize],
        exit_convs: &[usize],
    ) -> Result<Self> {
        let mut backbone = Vec::new();
        let mut ends = Vec::new();
        let mut in_ch = input_shape[0];
        for (i, &out_ch) in channels.iter().enumerate() {
            backbone.push(LayerKind::conv3x3(in_ch, out_ch));
            backbone.push(LayerKind::batch_norm(out_ch));
            backbone.push(LayerKind::ReLU);
            if pool_after.contains(&(i + 1)) {
                backbone.push(LayerKind::MaxPool2d { kernel: 2, stride: 2 });
            }
            ends.push(backbone.len() - 1);
            in_ch = out_ch;
        }
        let exit_after = exit_convs
            .iter()
            .map(|&c| {
                c.checked_sub(1)
                    .and_then(|i| ends.get(i).copied())
                    .ok_or_else(|| Error::InvalidSpec(format!("exit after conv {c}, which does not exist")))
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = Self {
            input_shape: input_shape.to_vec(),
            num_classes,
            backbone,
            exit_after,
            head: ExitHead::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Three single-conv blocks (16/32/64 channels) with a pool and a
    /// flatten-dense exit after each, for 28x28 grayscale input.
    pub fn fmnist() -> Self {
        Self::conv_net([1, 28, 28], 10, &[16, 32, 64], &[1, 2, 3], &[1, 2, 3])
            .map(|s| s.with_head(ExitHead::Flatten))
            .expect("preset is valid")
    }

    /// [`ModelSpec::fmnist`] at half width.
    pub fn fmnist_compact() -> Self {
        Self::conv_net([1, 28, 28], 10, &[8, 16, 32], &[1, 2, 3], &[1, 2, 3])
            .map(|s| s.with_head(ExitHead::Flatten))
            .expect("preset is valid")
    }

    /// Ten 8-channel convs with an exit after every one of them.
    pub fn deep10() -> Self {
        let exits: Vec<usize> = (1..=10).collect();
        Self::conv_net([1, 28, 28], 10, &[8; 10], &[3, 6, 9], &exits).expect("preset is valid")
    }

    /// VGG layout of four two-conv blocks (64/128/256/512) with three exits,
    /// matching the model used for the accelerometer benchmark. Used for
    /// hypernetwork size accounting only.
    pub fn vgg_reference() -> Self {
        Self::conv_net(
            [3, 32, 32],
            8,
            &[64, 64, 128, 128, 256, 256, 512, 512],
            &[2, 4, 6, 8],
            &[3, 6, 8],
        )
        .expect("preset is valid")
    }

    pub fn with_head(mut self, head: ExitHead) -> Self {
        self.head = head;
        self
    }

    pub fn num_exits(&self) -> usize {
        self.exit_after.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.exit_after.is_empty() {
            return bad("at least one exit is required".into());
        }
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        if self.exit_after.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("exit_after {:?} is not strictly increasing", self.exit_after));
        }
        let last = *self.exit_after.last().expect("non-empty");
        if last >= self.backbone.len() {
            return bad(format!(
                "exit after layer {last} but the backbone has {} layers",
                self.backbone.len()
            ));
        }
        if last != self.backbone.len() - 1 {
            return bad(format!(
                "last exit must follow the final backbone layer {}, got {last}",
                self.backbone.len() - 1
            ));
        }
        Model::new(self.clone()).map(|_| ())
    }
}

/// Layer structure of a multi-exit network (parameters live in a [`ParamSet`]).
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    segments: Vec<Vec<Layer>>,
    heads: Vec<Vec<Layer>>,
    /// Per-sample output shape of each segment.
    segment_shapes: Vec<Vec<usize>>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let mut segments = Vec::new();
        let mut heads = Vec::new();
        let mut segment_shapes = Vec::new();
        let mut start = 0;
        let mut shape = spec.input_shape.clone();
        for (e, &end) in spec.exit_after.iter().enumerate() {
            if end < start || end >= spec.backbone.len() {
                return Err(Error::InvalidSpec(format!("invalid exit position {end}")));
            }
            let seg = (e + 1) as u32;
            let layers: Vec<Layer> = spec.backbone[start..=end]
                .iter()
                .enumerate()
                .map(|(i, k)| Layer::new(k.clone(), Scope::Segment(seg), i))
                .collect();
            shape = engine::output_shape(&layers, &shape)?;
            let mut head = Vec::new();
            let features = if shape.len() == 3 && spec.head == ExitHead::GlobalAvgPool {
                head.push(Layer::new(LayerKind::GlobalAvgPool, Scope::Exit(seg), 0));
                shape[0]
            } else {
                shape.iter().product()
            };
            if head.is_empty() && shape.len() != 1 {
                head.push(Layer::new(LayerKind::Flatten, Scope::Exit(seg), 0));
            }
            head.push(Layer::new(
                LayerKind::Dense {
                    in_dim: features,
                    out_dim: spec.num_classes,
                },
                Scope::Exit(seg),
                1,
            ));
            segments.push(layers);
            heads.push(head);
            segment_shapes.push(shape.clone());
            start = end + 1;
        }
        Ok(Self {
            spec,
            segments,
            heads,
            segment_shapes,
        })
    }

    pub fn num_exits(&self) -> usize {
        self.segments.len()
    }

    pub fn segment(&self, s: usize) -> &[Layer] {
        &self.segments[s - 1]
    }

    pub fn head(&self, e: usize) -> &[Layer] {
        &self.heads[e - 1]
    }

    pub fn segment_output_shape(&self, s: usize) -> &[usize] {
        &self.segment_shapes[s - 1]
    }

    pub fn init_params(&self, seed: u64) -> ParamSet {
        let mut rng = rng::stream(seed, "init", NONE, NONE);
        let mut out = ParamSet::new();
        for layers in self.segments.iter().chain(&self.heads) {
            out.merge_from(&engine::init_params(layers, &mut rng));
        }
        out
    }

    /// Conv kernel ids of segment `s`, in layer order.
    pub fn conv_ids(&self, s: usize) -> Vec<LayerId> {
        self.segment(s)
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv2d { .. }))
            .map(|l| l.id(Role::ConvW))
            .collect()
    }

    /// Kernel shape `(OC, IC, KS, KS)` of a conv layer.
    pub fn conv_shape(&self, id: &LayerId) -> Option<[usize; 4]> {
        let seg = id.segment()?;
        let layer = self.segments.get(seg.checked_sub(1)?)?.get(id.index as usize)?;
        match layer.kind {
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => Some([out_ch, in_ch, kernel, kernel]),
            _ => None,
        }
    }

    /// Every parameter key of the full model.
    pub fn all_keys(&self) -> BTreeSet<LayerId> {
        self.tier_keys(self.num_exits(), true)
    }

    /// Keys held by a tier-`tier` client. With `multi_exit` off only the
    /// deepest owned head is part of the subnetwork.
    pub fn tier_keys(&self, tier: usize, multi_exit: bool) -> BTreeSet<LayerId> {
        let mut keys = BTreeSet::new();
        let mut add = |layers: &[Layer]| {
            for l in layers {
                for (role, _) in l.kind.param_shapes() {
                    keys.insert(l.id(role));
                }
            }
        };
        for s in 1..=tier.min(self.num_exits()) {
            add(self.segment(s));
            if multi_exit || s == tier {
                add(self.head(s));
            }
        }
        keys
    }

    fn check_tier(&self, tier: usize) -> Result<()> {
        if tier == 0 || tier > self.num_exits() {
            return Err(Error::InvalidArgument(format!(
                "tier {tier} outside 1..={}",
                self.num_exits()
            )));
        }
        Ok(())
    }

    /// Restriction of `full` to the keys of `tier` (multi-exit heads).
    pub fn subnetwork(&self, full: &ParamSet, tier: usize) -> Result<ParamSet> {
        self.subnetwork_with(full, tier, true)
    }

    pub fn subnetwork_with(&self, full: &ParamSet, tier: usize, multi_exit: bool) -> Result<ParamSet> {
        self.check_tier(tier)?;
        let keys = self.tier_keys(tier, multi_exit);
        let missing: Vec<String> = keys
            .iter()
            .filter(|k| !full.contains(k))
            .map(|k| k.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingKeys(missing));
        }
        Ok(full.filter(|k| keys.contains(k)))
    }

    /// Output of segment `s` (eval mode) for a batch.
    pub fn features(&self, params: &ParamSet, x: &Tensor, s: usize) -> Result<Tensor> {
        self.check_tier(s)?;
        let mut a = x.clone();
        for seg in 1..=s {
            a = engine::forward(self.segment(seg), params, &a, Mode::Eval)?.0;
        }
        Ok(a)
    }

    /// Eval-mode logits of exits `1..=tier` for a batch.
    pub fn exit_logits(&self, params: &ParamSet, x: &Tensor, tier: usize) -> Result<Vec<Tensor>> {
        self.check_tier(tier)?;
        let mut a = x.clone();
        let mut out = Vec::with_capacity(tier);
        for s in 1..=tier {
            a = engine::forward(self.segment(s), params, &a, Mode::Eval)?.0;
            out.push(engine::forward(self.head(s), params, &a, Mode::Eval)?.0);
        }
        Ok(out)
    }

    /// Class probabilities at exit `exit` of a tier-`tier` parameter set.
    pub fn predict(&self, params: &ParamSet, tier: usize, inputs: &Tensor, exit: usize) -> Result<Tensor> {
        self.check_tier(tier)?;
        if exit == 0 || exit > tier {
            return Err(Error::InvalidArgument(format!(
                "exit {exit} is not available to a tier-{tier} model"
            )));
        }
        let mut a = inputs.clone();
        for s in 1..=exit {
            a = engine::forward(self.segment(s), params, &a, Mode::Eval)?.0;
        }
        let logits = engine::forward(self.head(exit), params, &a, Mode::Eval)?.0;
        softmax_rows(&logits)
    }

    /// Top-1 accuracy of exits `1..=tier` over `data`, evaluated in batches.
    pub fn accuracy_per_exit(&self, params: &ParamSet, tier: usize, data: &Dataset) -> Result<Vec<f64>> {
        const CHUNK: usize = 256;
        let mut correct = vec![0usize; tier];
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(CHUNK) {
            let (x, labels) = data.batch(chunk);
            for (e, logits) in self.exit_logits(params, &x, tier)?.iter().enumerate() {
                correct[e] += argmax_rows(logits)
                    .iter()
                    .zip(&labels)
                    .filter(|(p, y)| p == y)
                    .count();
            }
        }
        Ok(correct.iter().map(|&c| c as f64 / data.len() as f64).collect())
    }

    /// Per-exit losses of one batch in train mode, their gradients, and the
    /// caches holding batch statistics. Segments deeper than the deepest exit
    /// in `loss_exits` receive no gradient.
    fn train_step(
        &self,
        params: &ParamSet,
        x: &Tensor,
        labels: &[usize],
        tier: usize,
        loss_exits: &[usize],
    ) -> Result<(Vec<(usize, f64)>, ParamSet, Vec<(usize, ForwardCache)>)> {
        let mut acts = Vec::with_capacity(tier);
        let mut caches = Vec::with_capacity(tier);
        let mut a = x.clone();
        for s in 1..=tier {
            let (y, c) = engine::forward(self.segment(s), params, &a, Mode::Train)?;
            acts.push(y.clone());
            caches.push(c);
            a = y;
        }
        let mut grads = ParamSet::new();
        let mut losses = Vec::new();
        let mut head_grads: Vec<Option<Tensor>> = vec![None; tier];
        for &e in loss_exits {
            let (logits, hc) = engine::forward(self.head(e), params, &acts[e - 1], Mode::Train)?;
            let (l, g) = cross_entropy(&logits, labels)?;
            let (gin, gp) = engine::backward(self.head(e), params, &hc, &g)?;
            grads.merge_from(&gp);
            losses.push((e, l));
            head_grads[e - 1] = Some(gin);
        }
        let deepest = loss_exits.iter().copied().max().unwrap_or(0);
        let mut carried: Option<Tensor> = None;
        for s in (1..=deepest).rev() {
            let g = match (head_grads[s - 1].take(), carried.take()) {
                (Some(h), Some(c)) => h.add(&c)?,
                (Some(h), None) => h,
                (None, Some(c)) => c,
                (None, None) => {
                    return Err(Error::InvalidArgument(format!(
                        "no loss reaches segment {s}"
                    )))
                }
            };
            let (gin, gp) = engine::backward(self.segment(s), params, &caches[s - 1], &g)?;
            grads.merge_from(&gp);
            carried = Some(gin);
        }
        let stats = caches.into_iter().enumerate().map(|(i, c)| (i + 1, c)).collect();
        Ok((losses, grads, stats))
    }

    /// Gradients of the summed loss over `loss_exits` for one batch, without
    /// updating anything.
    pub fn joint_gradients(
        &self,
        params: &ParamSet,
        x: &Tensor,
        labels: &[usize],
        tier: usize,
        loss_exits: &[usize],
    ) -> Result<(Vec<(usize, f64)>, ParamSet)> {
        self.check_tier(tier)?;
        let (losses, grads, _) = self.train_step(params, x, labels, tier, loss_exits)?;
        Ok((losses, grads))
    }

    /// Trains `params` (a tier-`tier` subnetwork) on `shard` with Adam.
    ///
    /// With `hp.multi_exit` each batch minimizes the sum of the cross-entropy
    /// losses of exits `1..=tier`; otherwise only exit `tier` is trained.
    pub fn local_train(
        &self,
        params: &ParamSet,
        tier: usize,
        shard: &Dataset,
        hp: &LocalHp,
    ) -> Result<(ParamSet, LocalStats)> {
        self.check_tier(tier)?;
        if shard.is_empty() {
            return Err(Error::InvalidArgument("empty training shard".into()));
        }
        if hp.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        let loss_exits: Vec<usize> = if hp.multi_exit {
            (1..=tier).collect()
        } else {
            vec![tier]
        };
        let mut params = params.clone();
        if hp.epochs == 0 {
            let losses = self.eval_losses(&params, shard, &loss_exits)?;
            return Ok((
                params,
                LocalStats {
                    exits: loss_exits,
                    first_epoch_loss: losses.clone(),
                    final_epoch_loss: losses,
                    n_samples: shard.len(),
                },
            ));
        }
        let mut adam = AdamState::new(AdamConfig::with_lr(hp.lr));
        let mut rng = StreamRng::seed_from_u64(hp.seed);
        let mut order: Vec<usize> = (0..shard.len()).collect();
        let mut first = Vec::new();
        let mut last = Vec::new();
        for epoch in 0..hp.epochs {
            order.shuffle(&mut rng);
            let mut sums = vec![0.0; loss_exits.len()];
            let mut batches = 0usize;
            for chunk in order.chunks(hp.batch_size) {
                let (x, labels) = shard.batch(chunk);
                let (losses, grads, caches) =
                    self.train_step(&params, &x, &labels, tier, &loss_exits)?;
                for (sum, (_, l)) in sums.iter_mut().zip(&losses) {
                    *sum += l;
                }
                batches += 1;
                for (s, c) in &caches {
                    engine::commit_running_stats(self.segment(*s), &mut params, c)?;
                }
                adam.step(&mut params, &grads)?;
            }
            let mean: Vec<f64> = sums.iter().map(|s| s / batches as f64).collect();
            if epoch == 0 {
                first = mean.clone();
            }
            last = mean;
        }
        Ok((
            params,
            LocalStats {
                exits: loss_exits,
                first_epoch_loss: first,
                final_epoch_loss: last,
                n_samples: shard.len(),
            },
        ))
    }

    fn eval_losses(&self, params: &ParamSet, data: &Dataset, exits: &[usize]) -> Result<Vec<f64>> {
        let tier = *exits.iter().max().expect("non-empty");
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut sums = vec![0.0; exits.len()];
        for chunk in idx.chunks(256) {
            let (mut a, labels) = data.batch(chunk);
            for s in 1..=tier {
                a = engine::forward(self.segment(s), params, &a, Mode::Eval)?.0;
                if let Some(i) = exits.iter().position(|&e| e == s) {
                    let logits = engine::forward(self.head(s), params, &a, Mode::Eval)?.0;
                    sums[i] += cross_entropy(&logits, &labels)?.0 * chunk.len() as f64;
                }
            }
        }
        Ok(sums.iter().map(|s| s / data.len() as f64).collect())
    }
}

/// Builds the model structure and its seeded initial parameters.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<(Model, ParamSet)> {
    spec.validate()?;
    let model = Model::new(spec.clone())?;
    let params = model.init_params(seed);
    Ok((model, params))
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = t.shape()[1];
    t.data()
        .chunks_exact(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalHp {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Sum the losses of all owned exits (true) or train the deepest only.
    pub multi_exit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalStats {
    /// Exits whose loss was optimized, ascending.
    pub exits: Vec<usize>,
    /// Mean batch loss per optimized exit during the first epoch.
    pub first_epoch_loss: Vec<f64>,
    /// Mean batch loss per optimized exit during the last epoch.
    pub final_epoch_loss: Vec<f64>,
    pub n_samples: usize,
}
