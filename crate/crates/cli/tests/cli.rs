use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use depthfed::data::Partition;

fn depthfed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthfed"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"{
  "schema_version": 1,
  "name": "tiny",
  "seed": 5,
  "dataset": {"kind": "shapes", "train_per_class": 10, "test_per_class": 4},
  "model": "fmnist_compact",
  "n_clients": 10,
  "tier_counts": [3, 3, 4],
  "rounds": 2,
  "participation_fraction": 1.0,
  "local": {"epochs": 1, "lr": 0.001, "batch_size": 8},
  "hypernet": {"rank": 8, "epochs": 2, "lr": 0.0005, "hidden_dim": 8},
  "eval": {"test_limit": null, "probe_size": 16, "cka_every": 1}
}"#;

/// The same document with every object's keys in a different order.
const TINY_REORDERED: &str = r#"{
  "eval": {"cka_every": 1, "probe_size": 16, "test_limit": null},
  "hypernet": {"hidden_dim": 8, "lr": 0.0005, "epochs": 2, "rank": 8},
  "local": {"batch_size": 8, "lr": 0.001, "epochs": 1},
  "participation_fraction": 1.0,
  "rounds": 2,
  "tier_counts": [3, 3, 4],
  "n_clients": 10,
  "model": "fmnist_compact",
  "dataset": {"test_per_class": 4, "train_per_class": 10, "kind": "shapes"},
  "seed": 5,
  "name": "tiny",
  "schema_version": 1
}"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn invalid_tier_counts_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", &TINY.replace("[3, 3, 4]", "[3, 3, 3]"));
    let out = depthfed(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("tier_counts") && err.contains("sum to n_clients"), "{err}");
}

#[test]
fn unknown_fields_and_bad_values_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let typo = write_config(dir.path(), "typo.json", &TINY.replace("\"rounds\"", "\"roundz\""));
    let out = depthfed(&["run", "--config", s(&typo), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let frac = write_config(dir.path(), "frac.json", &TINY.replace("\"participation_fraction\": 1.0", "\"participation_fraction\": 1.5"));
    let out = depthfed(&["run", "--config", s(&frac), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("participation_fraction"));
    let out = depthfed(&["run", "--config", s(&frac), "--out", "x", "--precision", "f16"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = depthfed(&["run", "--config", s(&dir.path().join("nope.json")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runs_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", TINY);
    let mut streams = Vec::new();
    for (i, threads) in ["1", "1", "2"].iter().enumerate() {
        let out_dir = dir.path().join(format!("run{i}"));
        let out = depthfed(&["run", "--config", s(&cfg), "--out", s(&out_dir), "--threads", threads]);
        assert!(out.status.success(), "{}", stderr(&out));
        let text = stdout(&out);
        assert!(text.contains("round   1/2") && text.contains("round   2/2"), "{text}");
        streams.push(fs::read(out_dir.join("reports.jsonl")).unwrap());
    }
    assert_eq!(streams[0].split(|&b| b == b'\n').filter(|l| !l.is_empty()).count(), 2);
    assert_eq!(streams[0], streams[1]);
    assert_eq!(streams[0], streams[2]);
}

#[test]
fn manifest_is_written_and_hash_ignores_key_order() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_config(dir.path(), "a.json", TINY);
    let b = write_config(dir.path(), "b.json", TINY_REORDERED);
    let mut hashes = Vec::new();
    for (cfg, name) in [(&a, "a"), (&b, "b")] {
        let out_dir = dir.path().join(name);
        let out = depthfed(&["run", "--config", s(cfg), "--out", s(&out_dir), "--precision", "f32"]);
        assert!(out.status.success(), "{}", stderr(&out));
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["seed"], 5);
        assert!(m["finished_at_unix"].as_u64().unwrap() >= m["started_at_unix"].as_u64().unwrap());
        assert!(out_dir.join("checkpoints/global_final.json").exists());
        assert!(out_dir.join("config.json").exists());
        hashes.push(m["config_hash"].as_str().unwrap().to_string());
    }
    assert_eq!(hashes[0], hashes[1]);

    let out_dir = dir.path().join("c");
    let out = depthfed(&["run", "--config", s(&a), "--out", s(&out_dir), "--seed", "6"]);
    assert!(out.status.success());
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 6);
    assert_ne!(m["config_hash"].as_str().unwrap(), hashes[0]);
}

#[test]
fn eval_reproduces_the_last_reported_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", TINY);
    let out_dir = dir.path().join("run");
    assert!(depthfed(&["run", "--config", s(&cfg), "--out", s(&out_dir)]).status.success());
    let reports = fs::read_to_string(out_dir.join("reports.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(reports.lines().last().unwrap()).unwrap();
    let ckpt = out_dir.join("checkpoints/global_final.json");
    let out = depthfed(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "exit,accuracy");
    assert_eq!(lines.len(), 4);
    for (e, line) in lines[1..].iter().enumerate() {
        let acc: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        let reported = last["accuracy"][e].as_f64().unwrap();
        assert!((acc - reported).abs() < 1e-6, "exit {}: {acc} vs {reported}", e + 1);
    }
}

fn max_shares(p: &Partition, labels: &[usize]) -> Vec<f64> {
    p.histograms(labels, 10)
        .iter()
        .map(|h| *h.iter().max().unwrap() as f64 / h.iter().sum::<usize>() as f64)
        .collect()
}

#[test]
fn partition_skew_follows_alpha_and_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "p.json",
        &TINY.replace("\"train_per_class\": 10", "\"train_per_class\": 100"),
    );
    let labels: Vec<usize> = {
        let c = depthfed::federation::ExperimentConfig::load(&cfg).unwrap();
        c.dataset.load(c.seed).unwrap().0.labels().to_vec()
    };
    let skewed = dir.path().join("skewed.json");
    let out = depthfed(&["partition", "--config", s(&cfg), "--out", s(&skewed), "--alpha", "0.1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 11);
    let p = Partition::load(&skewed).unwrap();
    assert_eq!(p.n_clients(), 10);
    assert_eq!(p.alpha, Some(0.1));
    // Monte-Carlo reference (numpy Dirichlet, 2000 draws): on average 63.5%
    // of clients have a majority class at alpha 0.1, but a single draw
    // reaches half only 88% of the time, so average over seeds.
    let mut skewed_fraction = 0.0;
    for seed in 0..10 {
        let path = dir.path().join(format!("skewed{seed}.json"));
        let seed = seed.to_string();
        let out = depthfed(&["partition", "--config", s(&cfg), "--out", s(&path), "--alpha", "0.1", "--seed", &seed]);
        assert!(out.status.success());
        let shares = max_shares(&Partition::load(&path).unwrap(), &labels);
        skewed_fraction += shares.iter().filter(|&&x| x > 0.5).count() as f64 / shares.len() as f64 / 10.0;
    }
    assert!(skewed_fraction >= 0.5, "{skewed_fraction}");

    let flat = dir.path().join("flat.json");
    assert!(depthfed(&["partition", "--config", s(&cfg), "--out", s(&flat), "--alpha", "10000"]).status.success());
    let p = Partition::load(&flat).unwrap();
    for h in p.histograms(&labels, 10) {
        assert!(h.iter().all(|&n| (8..=12).contains(&n)), "{h:?}");
    }

    let again = dir.path().join("again.json");
    assert!(depthfed(&["partition", "--config", s(&cfg), "--out", s(&again), "--alpha", "0.1"]).status.success());
    assert_eq!(fs::read(&skewed).unwrap(), fs::read(&again).unwrap());

    let iid = dir.path().join("iid.json");
    assert!(depthfed(&["partition", "--config", s(&cfg), "--out", s(&iid), "--iid", "--n-clients", "7"]).status.success());
    let p = Partition::load(&iid).unwrap();
    assert_eq!((p.n_clients(), p.alpha), (7, None));
}

#[test]
fn cka_writes_one_row_per_pair_and_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", TINY);
    let csv = dir.path().join("cka.csv");
    let out = depthfed(&["cka", "--config", s(&cfg), "--out", s(&csv)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "round,tier_a,multi_exit_a,tier_b,multi_exit_b,cka");
    // Per round: tier 1 against both full-depth variants, then tier 2 (with
    // and without multi-exit) against both.
    assert_eq!(lines.len(), 1 + 2 * (2 + 4));
    for l in &lines[1..] {
        let v: f64 = l.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v), "{l}");
    }
    assert!(lines[1..].iter().any(|l| l.starts_with("2,1,X,3,O,")));
    assert!(lines[1..].iter().any(|l| l.starts_with("2,2,O,3,X,")));
    assert!(!lines[1..].iter().any(|l| l.starts_with("1,1,O,")));
}

#[test]
fn hypernet_bench_reports_every_rank() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bench.json",
        &TINY
            .replace("\"fmnist_compact\"", "\"fmnist\"")
            .replace("\"hidden_dim\": 8", "\"hidden_dim\": 64"),
    );
    let csv = dir.path().join("bench.csv");
    let out = depthfed(&["hypernet-bench", "--config", s(&cfg), "--out", s(&csv), "--samples", "4", "--epochs", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let ranks: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(ranks, ["25", "50", "100", "200", "full"]);
    let counts: Vec<usize> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    // Ranks beyond the smallest layer dimension clamp, so counts only plateau.
    assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    assert!(counts[0] < counts[1]);
    let epoch_ms: Vec<f64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(epoch_ms[0] < epoch_ms[4], "{epoch_ms:?}");
    assert!(rows.iter().all(|r| r[5].parse::<f64>().unwrap().is_finite()));
}

#[test]
fn bundled_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&root).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            depthfed::federation::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 3);
}
