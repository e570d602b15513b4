use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use depthfed::federation::{run_experiment, Ablation, ExperimentConfig, Federation, RoundReport, RunOptions, Strategy};
use depthfed::metrics::linear_cka;
use depthfed::multiexit::Model;
use depthfed::ParamSet;

use crate::manifest::RunManifest;
use crate::GlobalOpts;

pub fn load_config(path: &Path, g: &GlobalOpts) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn summary(r: &RoundReport, rounds: usize, elapsed_s: f64) -> String {
    let mut line = format!("round {:>3}/{rounds}  acc", r.round + 1);
    for a in &r.accuracy {
        let _ = write!(line, " {a:.3}");
    }
    let _ = write!(line, "  loss {:.4}", r.mean_local_loss);
    if let Some(m) = r.generation_mae {
        let _ = write!(line, "  gen-mae {m:.3}");
    }
    if let Some(c) = r.cka_first_segment {
        let _ = write!(line, "  cka {c:.4}");
    }
    let _ = write!(line, "  {elapsed_s:.1}s");
    line
}

pub fn run(config_path: &Path, out: &Path, g: &GlobalOpts) -> Result<()> {
    let config = load_config(config_path, g)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut manifest = RunManifest::new(&config, out);
    fs::write(&manifest.outputs.config, config.to_json())
        .with_context(|| format!("writing {}", manifest.outputs.config.display()))?;
    let manifest_path = out.join("manifest.json");
    manifest.write(&manifest_path)?;

    let rounds = config.rounds;
    let start = Instant::now();
    let options = RunOptions {
        threads: g.threads,
        precision: g.precision.into(),
    };
    let outcome = run_experiment(config, out, options, |r| {
        println!("{}", summary(r, rounds, start.elapsed().as_secs_f64()));
    })?;
    manifest.finish();
    manifest.write(&manifest_path)?;
    match outcome.final_accuracy() {
        Some(acc) => println!("final-exit accuracy {acc:.4}"),
        None => println!("no rounds configured"),
    }
    println!("reports: {}", outcome.reports_path.display());
    Ok(())
}

pub fn partition(
    config_path: &Path,
    out: &Path,
    n_clients: Option<usize>,
    alpha: Option<f64>,
    iid: bool,
    g: &GlobalOpts,
) -> Result<()> {
    let mut config = load_config(config_path, g)?;
    if let Some(n) = n_clients {
        config.n_clients = n;
    }
    if iid {
        config.alpha = None;
    } else if alpha.is_some() {
        config.alpha = alpha;
    }
    let (train, _) = config.dataset.load(config.seed)?;
    let partition = config.partition(&train)?;
    partition.save(out)?;
    let classes = train.num_classes();
    println!("client     n  max-share  histogram");
    for (c, h) in partition.histograms(train.labels(), classes).iter().enumerate() {
        let n: usize = h.iter().sum();
        let max = h.iter().copied().max().unwrap_or(0);
        let hist: Vec<String> = h.iter().map(ToString::to_string).collect();
        println!("{c:>6} {n:>5}  {:>9.3}  {}", max as f64 / n.max(1) as f64, hist.join(" "));
    }
    Ok(())
}

/// Trains one plain FedAvg federation per model depth, with and without
/// multi-exit heads, and compares segment-1 features of each shallower global
/// model with each full-depth one after every round.
pub fn cka(config_path: &Path, out: &Path, g: &GlobalOpts) -> Result<()> {
    let base = load_config(config_path, g)?;
    let top = base.tier_counts.len();
    // A one-segment model has a single exit, so multi-exit changes nothing there.
    let mut variants = vec![(1, false)];
    for tier in 2..=top {
        variants.extend([(tier, false), (tier, true)]);
    }
    let mut feds = variants
        .iter()
        .map(|&(tier, multi_exit)| {
            let mut c = base.clone();
            c.strategy = Strategy::Uniform { tier };
            c.ablation = Ablation {
                multi_exit,
                hypernet: false,
                generate_bn_fc: false,
            };
            Federation::new(c, g.threads)
        })
        .collect::<depthfed::Result<Vec<_>>>()?;
    let flag = |me: bool| if me { "O" } else { "X" };
    let mut csv = String::from("round,tier_a,multi_exit_a,tier_b,multi_exit_b,cka\n");
    for round in 0..base.rounds {
        for fed in feds.iter_mut() {
            fed.run_round(round)?;
        }
        let features = feds
            .iter()
            .map(|f| f.model().features(f.global(), f.probe(), 1))
            .collect::<depthfed::Result<Vec<_>>>()?;
        for (i, &(tier_a, me_a)) in variants.iter().enumerate().filter(|(_, v)| v.0 < top) {
            for (j, &(tier_b, me_b)) in variants.iter().enumerate().filter(|(_, v)| v.0 == top) {
                let v = linear_cka(&features[i], &features[j])?;
                let _ = writeln!(
                    csv,
                    "{},{tier_a},{},{tier_b},{},{v:.6}",
                    round + 1,
                    flag(me_a),
                    flag(me_b)
                );
            }
        }
        println!("round {:>3}/{} done", round + 1, base.rounds);
    }
    fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

pub fn eval(config_path: &Path, checkpoint: &Path, g: &GlobalOpts) -> Result<()> {
    let config = load_config(config_path, g)?;
    let model = Model::new(config.model.spec())?;
    let (_, mut test) = config.dataset.load(config.seed)?;
    if let Some(n) = config.eval.test_limit.filter(|&n| n < test.len()) {
        test = test.subset(&(0..n).collect::<Vec<_>>())?;
    }
    let params = ParamSet::load(checkpoint)?;
    let accuracy = model.accuracy_per_exit(&params, model.num_exits(), &test)?;
    println!("exit,accuracy");
    for (e, a) in accuracy.iter().enumerate() {
        println!("{},{a:.6}", e + 1);
    }
    Ok(())
}
