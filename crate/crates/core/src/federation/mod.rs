//! Round orchestration: distribute tiered subnetworks, train locally, feed
//! the hypernetworks, generate missing layers and aggregate.

mod aggregate;
mod config;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use aggregate::{
    aggregate, assign_tiers, select_clients, select_stratified, Aggregation, ClientProfile, ClientUpdate,
};
pub use config::{
    selection_size, Ablation, DatasetConfig, EvalConfig, ExperimentConfig, HypernetConfig, LocalConfig,
    ModelChoice, Strategy, SCHEMA_VERSION,
};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hypernet::{build_hypernets, collect_samples, generate, HyperNet, TrainReport};
use crate::metrics::{linear_cka, tensor_mae};
use crate::multiexit::{LocalHp, Model};
use crate::params::{LayerId, ParamSet, Precision, Role};
use crate::rng::{self, NONE};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedClient {
    pub client_id: usize,
    /// The client's capability tier.
    pub tier: usize,
    /// Tier of the subnetwork it trained this round.
    pub trained_tier: usize,
}

/// Per-round metrics. Contains no wall-clock values, so identical
/// configurations produce identical reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub selected: Vec<SelectedClient>,
    /// Global-model test accuracy at every exit.
    pub accuracy: Vec<f64>,
    /// Deepest exit any participant trains.
    pub final_exit: usize,
    pub final_accuracy: f64,
    /// Mean over clients of the last-epoch loss at their deepest trained exit.
    pub mean_local_loss: f64,
    /// Samples fed to each hypernetwork this round.
    pub hypernet_samples: Vec<usize>,
    pub hypernet: Vec<Option<TrainReport>>,
    pub generated_tensors: usize,
    /// Mean normalized MAE between generated tensors and the sample-weighted
    /// mean of the real updates for the same layer.
    pub generation_mae: Option<f64>,
    /// Clients contributing to the conv kernels of each segment.
    pub conv_contributors: Vec<usize>,
    pub params_distributed: usize,
    pub params_uploaded: usize,
    pub params_generated: usize,
    pub hypernet_params: usize,
    /// Mean linear CKA between segment-1 features of tier-1 and top-tier
    /// local models, when measured this round.
    pub cka_first_segment: Option<f64>,
}

/// Wall-clock phase durations of one round, in milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTimings {
    pub round: usize,
    pub local_ms: f64,
    pub hypernet_ms: f64,
    pub generate_ms: f64,
    pub aggregate_ms: f64,
    pub eval_ms: f64,
    pub total_ms: f64,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

pub struct Federation {
    config: ExperimentConfig,
    model: Model,
    global: ParamSet,
    hypernets: Vec<HyperNet>,
    profiles: Vec<ClientProfile>,
    shards: Vec<Dataset>,
    test: Dataset,
    probe: Tensor,
    pool: rayon::ThreadPool,
    last_updates: Vec<ClientUpdate>,
}

impl Federation {
    /// Loads the configured dataset and initializes the global model.
    /// `threads == 0` uses every available core.
    pub fn new(config: ExperimentConfig, threads: usize) -> Result<Self> {
        config.validate()?;
        let (train, test) = config.dataset.load(config.seed)?;
        Self::with_data(config, train, test, threads)
    }

    pub fn with_data(config: ExperimentConfig, train: Dataset, test: Dataset, threads: usize) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.spec())?;
        if train.sample_shape() != model.spec.input_shape.as_slice() {
            return Err(Error::config(
                "dataset",
                format!(
                    "samples of shape {:?} do not fit model input {:?}",
                    train.sample_shape(),
                    model.spec.input_shape
                ),
            ));
        }
        if test.is_empty() {
            return Err(Error::config("dataset", "empty test set"));
        }
        let partition = config.partition(&train)?;
        let shards = partition
            .client_indices
            .iter()
            .map(|idx| train.subset(idx))
            .collect::<Result<Vec<_>>>()?;
        let test = match config.eval.test_limit {
            Some(n) if n < test.len() => test.subset(&(0..n).collect::<Vec<_>>())?,
            _ => test,
        };
        let probe = probe_batch(&test, config.eval.probe_size);
        let global = model.init_params(config.seed);
        let hypernets = if config.ablation.hypernet {
            build_hypernets(
                &model,
                config.hypernet.rank,
                config.hypernet.hidden_dim,
                config.ablation.generate_bn_fc,
                config.seed,
            )?
        } else {
            Vec::new()
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        Ok(Self {
            profiles: assign_tiers(&config.tier_counts),
            config,
            model,
            global,
            hypernets,
            shards,
            test,
            probe,
            pool,
            last_updates: Vec::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn global(&self) -> &ParamSet {
        &self.global
    }

    pub fn hypernets(&self) -> &[HyperNet] {
        &self.hypernets
    }

    pub fn profiles(&self) -> &[ClientProfile] {
        &self.profiles
    }

    pub fn shard(&self, client_id: usize) -> &Dataset {
        &self.shards[client_id]
    }

    /// Test samples used for CKA probes.
    pub fn probe(&self) -> &Tensor {
        &self.probe
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    /// Client updates of the most recent round, in client-id order.
    pub fn last_updates(&self) -> &[ClientUpdate] {
        &self.last_updates
    }

    pub fn final_exit(&self) -> usize {
        match self.config.strategy {
            Strategy::Uniform { tier } => tier,
            _ => self.model.num_exits(),
        }
    }

    /// Selected `(client, trained tier)` pairs for `round`.
    pub fn participants(&self, round: usize) -> Vec<SelectedClient> {
        let top = self.model.num_exits();
        let seed = self.config.seed;
        let f = self.config.participation_fraction;
        let ids = match self.config.strategy {
            Strategy::CapableOnly => {
                let capable: Vec<ClientProfile> =
                    self.profiles.iter().copied().filter(|p| p.tier == top).collect();
                select_stratified(&capable, selection_size(f, self.profiles.len()), round, seed)
            }
            _ => select_clients(&self.profiles, f, round, seed),
        };
        ids.into_iter()
            .map(|client_id| {
                let tier = self.profiles[client_id].tier;
                let trained_tier = match self.config.strategy {
                    Strategy::Uniform { tier: forced } => forced,
                    Strategy::Tiered | Strategy::CapableOnly => tier,
                };
                SelectedClient {
                    client_id,
                    tier,
                    trained_tier,
                }
            })
            .collect()
    }

    fn local_hp(&self, round: usize, client_id: usize) -> LocalHp {
        LocalHp {
            epochs: self.config.local.epochs,
            lr: self.config.local.lr,
            batch_size: self.config.local.batch_size,
            seed: rng::derive_seed(self.config.seed, "local", round as u64, client_id as u64),
            multi_exit: self.config.ablation.multi_exit,
        }
    }

    /// Runs one round and replaces the global model.
    pub fn run_round(&mut self, round: usize) -> Result<(RoundReport, RoundTimings)> {
        self.round_inner(round)
            .map_err(|e| Error::Round { round, source: Box::new(e) })
    }

    fn round_inner(&mut self, round: usize) -> Result<(RoundReport, RoundTimings)> {
        let start = Instant::now();
        let top = self.model.num_exits();
        let multi_exit = self.config.ablation.multi_exit;
        let selected = self.participants(round);

        let t = Instant::now();
        let (model, global, shards) = (&self.model, &self.global, &self.shards);
        let jobs: Vec<(SelectedClient, ParamSet, LocalHp)> = selected
            .iter()
            .map(|s| {
                let sub = model.subnetwork_with(global, s.trained_tier, multi_exit)?;
                Ok((*s, sub, self.local_hp(round, s.client_id)))
            })
            .collect::<Result<_>>()?;
        let params_distributed = jobs.iter().map(|(_, p, _)| p.numel()).sum();
        let trained: Vec<(ClientUpdate, f64)> = self.pool.install(|| {
            jobs.par_iter()
                .map(|(s, sub, hp)| {
                    let shard = &shards[s.client_id];
                    let (params, stats) = model.local_train(sub, s.trained_tier, shard, hp)?;
                    let allowed = model.tier_keys(s.trained_tier, multi_exit);
                    if !params.keys().eq(allowed.iter()) {
                        return Err(Error::InvalidArgument(format!(
                            "client {} returned parameters outside its tier",
                            s.client_id
                        )));
                    }
                    let loss = *stats.final_epoch_loss.last().expect("at least one exit");
                    Ok((
                        ClientUpdate {
                            client_id: s.client_id,
                            tier: s.trained_tier,
                            n_samples: stats.n_samples,
                            params,
                            generated: ParamSet::new(),
                        },
                        loss,
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let local_ms = ms(t);
        let mean_local_loss = trained.iter().map(|(_, l)| l).sum::<f64>() / trained.len() as f64;
        let mut updates: Vec<ClientUpdate> = trained.into_iter().map(|(u, _)| u).collect();
        let params_uploaded = updates.iter().map(|u| u.params.numel()).sum();

        let t = Instant::now();
        let mut hypernet_samples = vec![0; self.hypernets.len()];
        let mut hypernet_reports = vec![None; self.hypernets.len()];
        if !self.hypernets.is_empty() {
            // Factors are expressed relative to the model every client started from.
            for net in &mut self.hypernets {
                net.set_reference(&self.global)?;
            }
            let refs: Vec<(usize, usize, &ParamSet)> =
                updates.iter().map(|u| (u.client_id, u.tier, &u.params)).collect();
            hypernet_samples = collect_samples(&mut self.hypernets, &refs, round)?;
            let config = &self.config;
            let nets = &mut self.hypernets;
            hypernet_reports = self.pool.install(|| {
                nets.par_iter_mut()
                    .map(|net| {
                        let seed = rng::derive_seed(config.seed, "hypernet-train", round as u64, net.spec.net as u64);
                        net.train(&config.hyper_hp(seed))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
        }
        let hypernet_ms = ms(t);

        let t = Instant::now();
        if !self.hypernets.is_empty() {
            let nets = &self.hypernets;
            let generated: Vec<ParamSet> = self.pool.install(|| {
                updates
                    .par_iter()
                    .map(|u| {
                        if u.tier < top {
                            generate(nets, &u.params, u.tier, top)
                        } else {
                            Ok(ParamSet::new())
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            for (u, g) in updates.iter_mut().zip(generated) {
                u.generated = g;
            }
        }
        let generation_mae = generation_error(&updates)?;
        let generated_tensors = updates.iter().map(|u| u.generated.len()).sum();
        let params_generated = updates.iter().map(|u| u.generated.numel()).sum();
        let generate_ms = ms(t);

        let t = Instant::now();
        let agg = aggregate(&self.global, &updates)?;
        let conv_contributors = (1..=top)
            .map(|s| self.model.conv_ids(s).first().map_or(0, |id| agg.contributors[id]))
            .collect();
        self.global = agg.params;
        let aggregate_ms = ms(t);

        let t = Instant::now();
        let accuracy = self.model.accuracy_per_exit(&self.global, top, &self.test)?;
        let final_exit = self.final_exit();
        let measure_cka = round + 1 == self.config.rounds
            || (self.config.eval.cka_every > 0 && (round + 1).is_multiple_of(self.config.eval.cka_every));
        let cka_first_segment = if measure_cka {
            self.first_segment_cka(&updates)?
        } else {
            None
        };
        let eval_ms = ms(t);

        let report = RoundReport {
            round,
            selected,
            final_accuracy: accuracy[final_exit - 1],
            accuracy,
            final_exit,
            mean_local_loss,
            hypernet_samples,
            hypernet: hypernet_reports,
            generated_tensors,
            generation_mae,
            conv_contributors,
            params_distributed,
            params_uploaded,
            params_generated,
            hypernet_params: self.hypernets.iter().map(HyperNet::param_count).sum(),
            cka_first_segment,
        };
        self.last_updates = updates;
        let timings = RoundTimings {
            round,
            local_ms,
            hypernet_ms,
            generate_ms,
            aggregate_ms,
            eval_ms,
            total_ms: ms(start),
        };
        Ok((report, timings))
    }

    /// Mean CKA between the segment-1 outputs of every (tier-1, top-tier)
    /// pair of local models on the probe batch.
    pub fn first_segment_cka(&self, updates: &[ClientUpdate]) -> Result<Option<f64>> {
        let top = self.model.num_exits();
        if top < 2 {
            return Ok(None);
        }
        let of_tier = |tier: usize| -> Vec<&ParamSet> {
            updates.iter().filter(|u| u.tier == tier).map(|u| &u.params).collect()
        };
        self.pairwise_first_segment_cka(&of_tier(1), &of_tier(top))
    }

    /// Mean CKA between the segment-1 outputs of every pair drawn from `a`
    /// and `b`, on the probe batch. `None` when either side is empty.
    pub fn pairwise_first_segment_cka(&self, a: &[&ParamSet], b: &[&ParamSet]) -> Result<Option<f64>> {
        if a.is_empty() || b.is_empty() {
            return Ok(None);
        }
        let feats = |side: &[&ParamSet]| -> Result<Vec<Tensor>> {
            side.iter().map(|p| self.model.features(p, &self.probe, 1)).collect()
        };
        let (fa, fb) = (feats(a)?, feats(b)?);
        let mut sum = 0.0;
        for x in &fa {
            for y in &fb {
                sum += linear_cka(x, y)?;
            }
        }
        Ok(Some(sum / (fa.len() * fb.len()) as f64))
    }

    /// Experimental: each client fine-tunes its tier's subnetwork of the
    /// current global model for `epochs` local epochs. Returns the test
    /// accuracy of every client's deepest exit, in client-id order.
    pub fn personalize(&self, epochs: usize) -> Result<Vec<f64>> {
        let multi_exit = self.config.ablation.multi_exit;
        self.pool.install(|| {
            self.profiles
                .par_iter()
                .map(|p| {
                    let sub = self.model.subnetwork_with(&self.global, p.tier, multi_exit)?;
                    let hp = LocalHp {
                        epochs,
                        seed: rng::derive_seed(self.config.seed, "personalize", NONE, p.client_id as u64),
                        ..self.local_hp(0, p.client_id)
                    };
                    let (tuned, _) = self.model.local_train(&sub, p.tier, &self.shards[p.client_id], &hp)?;
                    let mut full = self.global.clone();
                    full.merge_from(&tuned);
                    Ok(self.model.accuracy_per_exit(&full, p.tier, &self.test)?[p.tier - 1])
                })
                .collect()
        })
    }
}

fn generation_error(updates: &[ClientUpdate]) -> Result<Option<f64>> {
    let mut sums: BTreeMap<LayerId, (Vec<f64>, usize)> = BTreeMap::new();
    for u in updates {
        for (id, t) in u.params.iter() {
            let (acc, w) = sums.entry(*id).or_insert_with(|| (vec![0.0; t.len()], 0));
            for (a, v) in acc.iter_mut().zip(t.data()) {
                *a += u.n_samples as f64 * v;
            }
            *w += u.n_samples;
        }
    }
    let mut total = 0.0;
    let mut count = 0;
    for u in updates {
        for (id, g) in u.generated.iter() {
            if id.role != Role::ConvW {
                continue;
            }
            let Some((acc, w)) = sums.get(id) else {
                continue;
            };
            let mean = Tensor::new(g.shape().to_vec(), acc.iter().map(|a| a / *w as f64).collect())?;
            if mean.max_abs() == 0.0 {
                continue;
            }
            total += tensor_mae(&mean, g, true)?;
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// The first `size` images of `test`: the fixed batch every feature-similarity
/// measurement runs on.
pub fn probe_batch(test: &Dataset, size: usize) -> Tensor {
    let n = size.min(test.len());
    test.batch(&(0..n).collect::<Vec<_>>()).0
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    /// Element type of checkpoint blobs.
    pub precision: Precision,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            threads: 0,
            precision: Precision::F64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    pub reports_path: PathBuf,
    pub timings_path: PathBuf,
    /// Manifest of the final global checkpoint.
    pub checkpoint: PathBuf,
}

impl ExperimentOutcome {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.reports.last().map(|r| r.final_accuracy)
    }
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })?;
    writeln!(w, "{line}")
        .and_then(|()| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Runs every configured round of `fed`, writing `reports.jsonl`,
/// `timings.jsonl` and checkpoints under `out_dir`.
pub fn run(
    fed: &mut Federation,
    out_dir: &Path,
    precision: Precision,
    mut on_round: impl FnMut(&RoundReport),
) -> Result<ExperimentOutcome> {
    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    fed.global().save(&ckpt_dir, "global_init", precision)?;
    let reports_path = out_dir.join("reports.jsonl");
    let timings_path = out_dir.join("timings.jsonl");
    let open = |p: &Path| File::create(p).map(BufWriter::new).map_err(|e| Error::io(p, e));
    let mut reports_file = open(&reports_path)?;
    let mut timings_file = open(&timings_path)?;
    let mut reports = Vec::with_capacity(fed.config().rounds);
    for round in 0..fed.config().rounds {
        let (report, timings) = fed.run_round(round)?;
        write_line(&mut reports_file, &reports_path, &report)?;
        write_line(&mut timings_file, &timings_path, &timings)?;
        info!(
            "round {round}: final-exit accuracy {:.4}, local loss {:.4}, {:.0} ms",
            report.final_accuracy, report.mean_local_loss, timings.total_ms
        );
        on_round(&report);
        reports.push(report);
    }
    let checkpoint = fed.global().save(&ckpt_dir, "global_final", precision)?;
    if !fed.hypernets().is_empty() {
        let mut all = ParamSet::new();
        for net in fed.hypernets() {
            all.merge_from(&net.params);
        }
        all.save(&ckpt_dir, "hypernets_final", precision)?;
    }
    Ok(ExperimentOutcome {
        reports,
        reports_path,
        timings_path,
        checkpoint,
    })
}

/// Loads data for `config`, then [`run`]s it.
pub fn run_experiment(
    config: ExperimentConfig,
    out_dir: &Path,
    options: RunOptions,
    on_round: impl FnMut(&RoundReport),
) -> Result<ExperimentOutcome> {
    let mut fed = Federation::new(config, options.threads)?;
    run(&mut fed, out_dir, options.precision, on_round)
}
