//! Server-side hypernetworks that predict the conv kernels of segment `t + 1`
//! from the last conv kernel of segment `t`.
//!
//! In factor mode ([`Rank::Top`]) both the source and the targets are
//! compressed to their top-`k` scaled singular vectors. One small MLP per
//! target factor is shared across the `k` singular-vector slots: slot `j`
//! sees `[P_s[:, j] | Q_s[j, :] | onehot(j)]` and predicts column `j` of the
//! target `P` (or row `j` of the target `Q`). [`Rank::Full`] skips the
//! factorization and maps the whole source matrix to each whole target matrix.

use std::fmt;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::engine::{self, AdamConfig, AdamState, Layer, LayerKind, Mode};
use crate::error::{Error, Result};
use crate::lrf::{self, FactorPair};
use crate::multiexit::Model;
use crate::params::{LayerId, ParamSet, Role, Scope};
use crate::rng::{self, StreamRng, NONE};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rank {
    /// Keep the top `k` singular triplets.
    Top(usize),
    /// No compression: the hypernetwork maps raw weight matrices.
    Full,
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rank::Top(k) => write!(f, "{k}"),
            Rank::Full => f.write_str("full"),
        }
    }
}

impl Serialize for Rank {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Rank::Top(k) => s.serialize_u64(*k as u64),
            Rank::Full => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for Rank {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            K(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::K(0) => Err(serde::de::Error::custom("rank must be at least 1")),
            Raw::K(k) => Ok(Rank::Top(k)),
            Raw::S(s) if s == "full" => Ok(Rank::Full),
            Raw::S(s) => Err(serde::de::Error::custom(format!(
                "rank must be a positive integer or \"full\", got {s:?}"
            ))),
        }
    }
}

/// What one predictor head outputs.
#[derive(Clone, Debug, PartialEq)]
enum HeadKind {
    /// Columns of the target `P` (one row per slot).
    FactorP { target: usize },
    /// Rows of the target `Q`.
    FactorQ { target: usize },
    /// The whole target matrix, flattened.
    Raw { target: usize },
    /// A non-conv tensor of the next segment (BatchNorm scale/shift or exit
    /// head weights), predicted from the flattened source code.
    Extra { id: LayerId, shape: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    kind: HeadKind,
    in_dim: usize,
    out_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTarget {
    pub id: LayerId,
    /// `(OC, IC, KS, KS)`
    pub shape: [usize; 4],
    /// Retained rank for this target (factor mode).
    pub k: usize,
}

fn dims(shape: [usize; 4]) -> (usize, usize) {
    (shape[1] * shape[2], shape[0] * shape[2])
}

/// Architecture of hypernetwork `net`, which maps segment `net` to `net + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperNetSpec {
    pub net: usize,
    pub source: LayerId,
    pub source_shape: [usize; 4],
    /// Retained rank of the source factors (factor mode).
    pub source_k: usize,
    pub targets: Vec<ConvTarget>,
    pub rank: Rank,
    pub hidden: usize,
    heads: Vec<Head>,
}

impl HyperNetSpec {
    /// Hypernetwork `net` of `model`. With `generate_bn_fc` it also predicts
    /// the BatchNorm scale/shift of segment `net + 1` and exit head `net + 1`.
    pub fn new(model: &Model, net: usize, rank: Rank, hidden: usize, generate_bn_fc: bool) -> Result<Self> {
        if net == 0 || net >= model.num_exits() {
            return Err(Error::InvalidArgument(format!(
                "hypernetwork {net} needs segments {net} and {} in a {}-exit model",
                net + 1,
                model.num_exits()
            )));
        }
        if hidden == 0 {
            return Err(Error::InvalidArgument("hidden_dim must be positive".into()));
        }
        let source = *model
            .conv_ids(net)
            .last()
            .ok_or_else(|| Error::InvalidSpec(format!("segment {net} has no conv layer")))?;
        let source_shape = model.conv_shape(&source).expect("conv id from model");
        let clamp = |shape: [usize; 4], id: &LayerId| match rank {
            Rank::Top(k) => {
                let (r, c) = dims(shape);
                let max = r.min(c);
                if k > max {
                    warn!("hypernetwork {net}: rank {k} exceeds {id}'s max rank {max}; clamped");
                }
                k.min(max)
            }
            Rank::Full => {
                let (r, c) = dims(shape);
                r.min(c)
            }
        };
        let source_k = clamp(source_shape, &source);
        let targets: Vec<ConvTarget> = model
            .conv_ids(net + 1)
            .into_iter()
            .map(|id| {
                let shape = model.conv_shape(&id).expect("conv id from model");
                ConvTarget {
                    id,
                    shape,
                    k: clamp(shape, &id),
                }
            })
            .collect();
        if targets.is_empty() {
            return Err(Error::InvalidSpec(format!("segment {} has no conv layer", net + 1)));
        }
        let (rs, cs) = dims(source_shape);
        let mut heads = Vec::new();
        for (i, t) in targets.iter().enumerate() {
            let (rt, ct) = dims(t.shape);
            match rank {
                Rank::Top(_) => {
                    let in_dim = rs + cs + t.k;
                    heads.push(Head {
                        kind: HeadKind::FactorP { target: i },
                        in_dim,
                        out_dim: rt,
                    });
                    heads.push(Head {
                        kind: HeadKind::FactorQ { target: i },
                        in_dim,
                        out_dim: ct,
                    });
                }
                Rank::Full => heads.push(Head {
                    kind: HeadKind::Raw { target: i },
                    in_dim: rs * cs,
                    out_dim: rt * ct,
                }),
            }
        }
        if generate_bn_fc {
            let code_len = match rank {
                Rank::Top(_) => source_k * (rs + cs),
                Rank::Full => rs * cs,
            };
            let seg = (net + 1) as u32;
            let extra_ids = model
                .all_keys()
                .into_iter()
                .filter(|id| {
                    (id.scope == Scope::Segment(seg) && matches!(id.role, Role::BnScale | Role::BnShift))
                        || (id.scope == Scope::Exit(seg) && matches!(id.role, Role::FcW | Role::FcB))
                })
                .collect::<Vec<_>>();
            let full = model.init_params(0);
            for id in extra_ids {
                let shape = full.require(&id)?.shape().to_vec();
                heads.push(Head {
                    out_dim: shape.iter().product(),
                    kind: HeadKind::Extra { id, shape },
                    in_dim: code_len,
                });
            }
        }
        Ok(Self {
            net,
            source,
            source_shape,
            source_k,
            targets,
            rank,
            hidden,
            heads,
        })
    }

    fn head_layers(&self, h: usize) -> Vec<Layer> {
        let head = &self.heads[h];
        let scope = Scope::Hyper {
            net: self.net as u32,
            head: h as u32,
        };
        vec![
            Layer::new(
                LayerKind::Dense {
                    in_dim: head.in_dim,
                    out_dim: self.hidden,
                },
                scope,
                0,
            ),
            Layer::new(LayerKind::ReLU, scope, 1),
            Layer::new(
                LayerKind::Dense {
                    in_dim: self.hidden,
                    out_dim: head.out_dim,
                },
                scope,
                2,
            ),
        ]
    }

    /// Every parameter tensor of the predictor networks, without allocating.
    pub fn param_shapes(&self) -> Vec<(LayerId, Vec<usize>)> {
        (0..self.heads.len())
            .flat_map(|h| {
                self.head_layers(h).into_iter().flat_map(|l| {
                    l.kind
                        .param_shapes()
                        .into_iter()
                        .map(move |(role, shape)| (l.id(role), shape))
                })
            })
            .collect()
    }

    /// Closed-form parameter count: two dense layers per head.
    pub fn param_count(&self) -> usize {
        self.heads
            .iter()
            .map(|h| h.in_dim * self.hidden + self.hidden + self.hidden * h.out_dim + h.out_dim)
            .sum()
    }

    pub fn generates_bn_fc(&self) -> bool {
        self.heads.iter().any(|h| matches!(h.kind, HeadKind::Extra { .. }))
    }

    /// Factors of the source and target kernels in `params`, for use as an
    /// alignment reference, themselves aligned to `previous` when given.
    /// `None` in raw mode.
    fn reference(&self, params: &ParamSet, previous: Option<&Reference>) -> Result<Option<Reference>> {
        if self.rank == Rank::Full {
            return Ok(None);
        }
        let factor = |id: &LayerId, k: usize, prev: Option<&FactorPair>| -> Result<FactorPair> {
            let f = lrf::factorize(&lrf::to_matrix(params.require(id)?)?.matrix, k)?;
            match prev {
                Some(p) => lrf::align(&f, p),
                None => Ok(f),
            }
        };
        Ok(Some(Reference {
            source: factor(&self.source, self.source_k, previous.map(|r| &r.source))?,
            targets: self
                .targets
                .iter()
                .enumerate()
                .map(|(i, t)| factor(&t.id, t.k, previous.map(|r| &r.targets[i])))
                .collect::<Result<_>>()?,
        }))
    }

    fn source_code(&self, kernel: &Tensor, reference: Option<&Reference>) -> Result<SourceCode> {
        let m = lrf::to_matrix(kernel)?.matrix;
        match self.rank {
            Rank::Top(_) => {
                let f = lrf::factorize(&m, self.source_k)?;
                Ok(SourceCode::Factors(match reference {
                    Some(r) => lrf::align(&f, &r.source)?,
                    None => f,
                }))
            }
            Rank::Full => Ok(SourceCode::Raw(m)),
        }
    }

    /// Per-head input tensors for a source kernel.
    fn encode_inputs(&self, kernel: &Tensor, reference: Option<&Reference>) -> Result<Vec<Tensor>> {
        let code = self.source_code(kernel, reference)?;
        let (rs, cs) = dims(self.source_shape);
        self.heads
            .iter()
            .map(|h| match (&h.kind, &code) {
                (HeadKind::FactorP { target } | HeadKind::FactorQ { target }, SourceCode::Factors(f)) => {
                    let kt = self.targets[*target].k;
                    let mut x = vec![0.0; kt * h.in_dim];
                    for j in 0..kt {
                        let row = &mut x[j * h.in_dim..(j + 1) * h.in_dim];
                        if j < f.k() {
                            for i in 0..rs {
                                row[i] = f.p.at2(i, j);
                            }
                            for i in 0..cs {
                                row[rs + i] = f.q.at2(j, i);
                            }
                        }
                        row[rs + cs + j] = 1.0;
                    }
                    Tensor::new(vec![kt, h.in_dim], x)
                }
                (HeadKind::Raw { .. }, SourceCode::Raw(m)) => m.clone().reshape(&[1, h.in_dim]),
                (HeadKind::Extra { .. }, SourceCode::Factors(f)) => {
                    let mut x = f.p.transpose2()?.into_data();
                    x.extend_from_slice(f.q.data());
                    Tensor::new(vec![1, h.in_dim], x)
                }
                (HeadKind::Extra { .. }, SourceCode::Raw(m)) => m.clone().reshape(&[1, h.in_dim]),
                _ => unreachable!("head kinds follow the rank mode"),
            })
            .collect()
    }

    /// Per-head regression targets taken from a client's real parameters.
    fn encode_targets(&self, params: &ParamSet, reference: Option<&Reference>) -> Result<Vec<Tensor>> {
        let mut factors: Vec<Option<FactorPair>> = vec![None; self.targets.len()];
        let mut out = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let t = match &h.kind {
                HeadKind::FactorP { target } | HeadKind::FactorQ { target } => {
                    let tgt = &self.targets[*target];
                    if factors[*target].is_none() {
                        let m = lrf::to_matrix(params.require(&tgt.id)?)?.matrix;
                        let f = lrf::factorize(&m, tgt.k)?;
                        factors[*target] = Some(match reference {
                            Some(r) => lrf::align(&f, &r.targets[*target])?,
                            None => f,
                        });
                    }
                    let f = factors[*target].as_ref().expect("filled above");
                    if matches!(h.kind, HeadKind::FactorP { .. }) {
                        f.p.transpose2()?
                    } else {
                        f.q.clone()
                    }
                }
                HeadKind::Raw { target } => {
                    let tgt = &self.targets[*target];
                    lrf::to_matrix(params.require(&tgt.id)?)?
                        .matrix
                        .reshape(&[1, h.out_dim])?
                }
                HeadKind::Extra { id, .. } => params.require(id)?.clone().reshape(&[1, h.out_dim])?,
            };
            out.push(t);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct Reference {
    source: FactorPair,
    targets: Vec<FactorPair>,
}

enum SourceCode {
    Factors(FactorPair),
    Raw(Tensor),
}

/// One (source, targets) pair harvested from a client update.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub round: usize,
    pub client_id: usize,
    inputs: Vec<Tensor>,
    targets: Vec<Tensor>,
}

impl TrainingSample {
    /// Flattened inputs of every head, for comparing encodings.
    pub fn input_values(&self) -> Vec<f64> {
        self.inputs.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn target_values(&self) -> Vec<f64> {
        self.targets.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperHp {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for HyperHp {
    fn default() -> Self {
        Self {
            epochs: 25,
            lr: 5e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub samples: usize,
    pub steps: usize,
    /// Mean per-sample MSE during the first epoch.
    pub first_epoch_loss: f64,
    /// Mean per-sample MSE during the last epoch.
    pub final_epoch_loss: f64,
}

/// A hypernetwork with its weights, optimizer state and pending samples.
#[derive(Clone, Debug)]
pub struct HyperNet {
    pub spec: HyperNetSpec,
    pub params: ParamSet,
    adam: AdamState,
    buffer: Vec<TrainingSample>,
    reference: Option<Reference>,
}

impl HyperNet {
    pub fn new(spec: HyperNetSpec, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "hypernet-init", spec.net as u64, NONE);
        let mut params = ParamSet::new();
        for h in 0..spec.heads.len() {
            params.merge_from(&engine::init_params(&spec.head_layers(h), &mut rng));
        }
        Self {
            spec,
            params,
            adam: AdamState::new(AdamConfig::default()),
            buffer: Vec::new(),
            reference: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn pending(&self) -> usize {
        self.buffer.len()
    }

    /// Aligns every factorization this network makes (samples and
    /// predictions) to the factors of the matching kernels in `params`.
    /// A replacement reference is first aligned to the one it replaces, so
    /// the component order learned in earlier rounds stays meaningful. Has
    /// no effect in raw mode. Samples already queued keep the alignment they
    /// were built with.
    pub fn set_reference(&mut self, params: &ParamSet) -> Result<()> {
        self.reference = self.spec.reference(params, self.reference.as_ref())?;
        Ok(())
    }

    /// Builds a sample from a client update that holds both the source and
    /// every target layer.
    pub fn make_sample(&self, params: &ParamSet, round: usize, client_id: usize) -> Result<TrainingSample> {
        let kernel = params.require(&self.spec.source)?;
        Ok(TrainingSample {
            round,
            client_id,
            inputs: self.spec.encode_inputs(kernel, self.reference.as_ref())?,
            targets: self.spec.encode_targets(params, self.reference.as_ref())?,
        })
    }

    pub fn push(&mut self, sample: TrainingSample) {
        self.buffer.push(sample);
    }

    /// Squared error summed over all heads, plus the element count.
    fn sample_loss(&self, s: &TrainingSample, grads: Option<&mut ParamSet>) -> Result<(f64, usize)> {
        let n: usize = s.targets.iter().map(Tensor::len).sum();
        let mut sse = 0.0;
        let mut acc = grads;
        for (h, (x, y)) in s.inputs.iter().zip(&s.targets).enumerate() {
            let layers = self.spec.head_layers(h);
            let mode = if acc.is_some() { Mode::Train } else { Mode::Eval };
            let (pred, cache) = engine::forward(&layers, &self.params, x, mode)?;
            let diff = pred.sub(y)?;
            sse += diff.data().iter().map(|d| d * d).sum::<f64>();
            if let Some(g) = acc.as_deref_mut() {
                let (_, gp) = engine::backward(&layers, &self.params, &cache, &diff.scale(2.0 / n as f64))?;
                g.merge_from(&gp);
            }
        }
        Ok((sse, n))
    }

    /// Mean squared error of the current weights on a sample, no update.
    pub fn evaluate(&self, sample: &TrainingSample) -> Result<f64> {
        let (sse, n) = self.sample_loss(sample, None)?;
        Ok(sse / n as f64)
    }

    /// Trains on every pending sample (one Adam step per sample per epoch)
    /// and discards them. Weights and optimizer state carry over between
    /// calls. Returns `None` when nothing was pending.
    pub fn train(&mut self, hp: &HyperHp) -> Result<Option<TrainReport>> {
        let samples = std::mem::take(&mut self.buffer);
        if samples.is_empty() {
            debug!("hypernetwork {}: no samples, skipping", self.spec.net);
            return Ok(None);
        }
        self.adam.config.learning_rate = hp.lr;
        let mut rng = StreamRng::seed_from_u64(hp.seed);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let (mut first, mut last) = (f64::NAN, f64::NAN);
        let mut steps = 0;
        for epoch in 0..hp.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for &i in &order {
                let mut grads = ParamSet::new();
                let (sse, n) = self.sample_loss(&samples[i], Some(&mut grads))?;
                total += sse / n as f64;
                self.adam.step(&mut self.params, &grads)?;
                steps += 1;
            }
            let mean = total / samples.len() as f64;
            if epoch == 0 {
                first = mean;
            }
            last = mean;
        }
        Ok(Some(TrainReport {
            samples: samples.len(),
            steps,
            first_epoch_loss: first,
            final_epoch_loss: last,
        }))
    }

    /// Predicts segment `net + 1` tensors from a source kernel.
    pub fn predict(&self, source_kernel: &Tensor) -> Result<ParamSet> {
        let inputs = self.spec.encode_inputs(source_kernel, self.reference.as_ref())?;
        let mut preds = Vec::with_capacity(inputs.len());
        for (h, x) in inputs.iter().enumerate() {
            preds.push(engine::forward(&self.spec.head_layers(h), &self.params, x, Mode::Eval)?.0);
        }
        let mut out = ParamSet::new();
        for (h, head) in self.spec.heads.iter().enumerate() {
            match &head.kind {
                HeadKind::FactorP { target } => {
                    let t = &self.spec.targets[*target];
                    let f = FactorPair {
                        p: preds[h].transpose2()?,
                        q: preds[h + 1].clone(),
                        sigma: vec![f64::NAN; t.k],
                    };
                    let kernel = lrf::from_matrix(&lrf::reconstruct(&f)?, t.shape)?;
                    out.insert(t.id, kernel);
                }
                HeadKind::FactorQ { .. } => {}
                HeadKind::Raw { target } => {
                    let t = &self.spec.targets[*target];
                    let (r, c) = dims(t.shape);
                    let m = preds[h].clone().reshape(&[r, c])?;
                    out.insert(t.id, lrf::from_matrix(&m, t.shape)?);
                }
                HeadKind::Extra { id, shape } => {
                    out.insert(*id, preds[h].clone().reshape(shape)?);
                }
            }
        }
        Ok(out)
    }
}

/// Hypernetworks `1..num_exits` for `model`, seeded deterministically.
pub fn build_hypernets(
    model: &Model,
    rank: Rank,
    hidden: usize,
    generate_bn_fc: bool,
    seed: u64,
) -> Result<Vec<HyperNet>> {
    if model.num_exits() < 2 {
        return Err(Error::InvalidSpec(
            "hypernetworks need a model with at least two exits".into(),
        ));
    }
    (1..model.num_exits())
        .map(|t| Ok(HyperNet::new(HyperNetSpec::new(model, t, rank, hidden, generate_bn_fc)?, seed)))
        .collect()
}

/// Queues one sample per client update on every hypernetwork whose target
/// segment the client trained (tier `t` feeds hypernetworks `1..t`).
/// Returns the number of samples added to each hypernetwork.
pub fn collect_samples(
    nets: &mut [HyperNet],
    updates: &[(usize, usize, &ParamSet)],
    round: usize,
) -> Result<Vec<usize>> {
    let mut added = vec![0; nets.len()];
    for &(client_id, tier, params) in updates {
        for (i, net) in nets.iter_mut().enumerate() {
            if tier > net.spec.net {
                let sample = net.make_sample(params, round, client_id)?;
                net.push(sample);
                added[i] += 1;
            }
        }
    }
    Ok(added)
}

/// Generates the tensors of segments `start + 1..=end` by chaining
/// hypernetworks `start..end`, each fed the real source kernel when
/// `source_params` has it and the previously generated one otherwise.
pub fn generate(chain: &[HyperNet], source_params: &ParamSet, start: usize, end: usize) -> Result<ParamSet> {
    let mut out = ParamSet::new();
    for t in start..end {
        let net = chain
            .iter()
            .find(|n| n.spec.net == t)
            .ok_or(Error::MissingHypernet(t, t + 1))?;
        let src = source_params
            .get(&net.spec.source)
            .or_else(|| out.get(&net.spec.source))
            .ok_or(Error::MissingParam(net.spec.source))?
            .clone();
        out.merge_from(&net.predict(&src)?);
    }
    Ok(out)
}
