use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use depthfed::hypernet::{build_hypernets, HyperNetSpec, Rank};
use depthfed::metrics::{hypernet_footprint, pooled_mae, weight_mae};
use depthfed::multiexit::Model;
use depthfed::rng::{self, NONE};
use depthfed::ParamSet;

use crate::commands::load_config;
use crate::GlobalOpts;

pub const RANKS: [Rank; 5] = [Rank::Top(25), Rank::Top(50), Rank::Top(100), Rank::Top(200), Rank::Full];

/// One row of the benchmark table.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub rank: Rank,
    pub param_count: usize,
    pub bytes: usize,
    pub serialized_bytes: usize,
    pub mean_epoch_ms: f64,
    /// Normalized generation MAE on held-out samples.
    pub mae: f64,
}

/// Synthetic client models that vary along one shared direction plus a
/// small independent component, so deeper layers are predictable from
/// shallower ones.
fn synthetic_models(model: &Model, n: usize, seed: u64) -> Vec<ParamSet> {
    let base = model.init_params(rng::derive_seed(seed, "bench-base", NONE, NONE));
    let direction = model.init_params(rng::derive_seed(seed, "bench-direction", NONE, NONE));
    (0..n)
        .map(|i| {
            let z = if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
            let noise = model.init_params(rng::derive_seed(seed, "bench-noise", NONE, i as u64));
            let mut p = base.clone();
            for (id, t) in p.iter_mut() {
                let (d, e) = (direction.get(id).expect("same model"), noise.get(id).expect("same model"));
                for ((v, dv), ev) in t.data_mut().iter_mut().zip(d.data()).zip(e.data()) {
                    *v += 0.5 * z * dv + 0.05 * ev;
                }
            }
            p
        })
        .collect()
}

/// Trains a fresh set of hypernetworks at every rank in [`RANKS`] on the same
/// synthetic samples. Three quarters of the samples train, the rest score.
pub fn bench(model: &Model, hidden: usize, epochs: usize, lr: f64, samples: usize, seed: u64) -> Result<Vec<BenchRow>> {
    ensure!(samples >= 2, "need at least two synthetic samples, got {samples}");
    let models = synthetic_models(model, samples, seed);
    let n_train = (samples * 3 / 4).max(1);
    let mut rows = Vec::with_capacity(RANKS.len());
    for rank in RANKS {
        let mut nets = build_hypernets(model, rank, hidden, false, seed)?;
        let specs: Vec<HyperNetSpec> = nets.iter().map(|n| n.spec.clone()).collect();
        let footprint = hypernet_footprint(&specs, depthfed::Precision::F32);
        let mut elapsed_ms = 0.0;
        for net in &mut nets {
            for (i, params) in models[..n_train].iter().enumerate() {
                let sample = net.make_sample(params, 0, i)?;
                net.push(sample);
            }
            let hp = depthfed::hypernet::HyperHp { epochs, lr, seed };
            let start = Instant::now();
            net.train(&hp)?;
            elapsed_ms += start.elapsed().as_secs_f64() * 1e3;
        }
        let (mut sum, mut count) = (0.0, 0usize);
        for truth in &models[n_train..] {
            for net in &nets {
                let predicted = net.predict(truth.require(&net.spec.source)?)?;
                sum += pooled_mae(&weight_mae(truth, &predicted, true)?, truth);
                count += 1;
            }
        }
        rows.push(BenchRow {
            rank,
            param_count: footprint.param_count,
            bytes: footprint.bytes,
            serialized_bytes: footprint.serialized_bytes,
            mean_epoch_ms: elapsed_ms / epochs.max(1) as f64,
            mae: sum / count.max(1) as f64,
        });
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut csv = String::from("rank,param_count,bytes_f32,serialized_bytes_f32,mean_epoch_ms,mae\n");
    for r in rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{:.3},{:.6}",
            r.rank, r.param_count, r.bytes, r.serialized_bytes, r.mean_epoch_ms, r.mae
        );
    }
    csv
}

pub fn run(config_path: &Path, out: &Path, samples: usize, epochs: Option<usize>, g: &GlobalOpts) -> Result<()> {
    let config = load_config(config_path, g)?;
    let model = Model::new(config.model.spec())?;
    let epochs = epochs.unwrap_or(config.hypernet.epochs);
    let rows = bench(&model, config.hypernet.hidden_dim, epochs, config.hypernet.lr, samples, config.seed)?;
    let csv = to_csv(&rows);
    fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
    print!("{csv}");
    Ok(())
}
