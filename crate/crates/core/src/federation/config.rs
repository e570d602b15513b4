use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, Partition};
use crate::error::{Error, Result};
use crate::hypernet::{HyperHp, Rank};
use crate::multiexit::ModelSpec;
use crate::rng::{self, NONE};

pub const SCHEMA_VERSION: u32 = 1;

/// Where client and test data come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Procedural 28x28 glyph images, ten classes.
    Shapes {
        train_per_class: usize,
        test_per_class: usize,
    },
    /// FashionMNIST IDX files in `dir`, optionally subsampled per class.
    FashionMnist {
        dir: PathBuf,
        #[serde(default)]
        train_per_class: Option<usize>,
        #[serde(default)]
        test_per_class: Option<usize>,
    },
}

impl DatasetConfig {
    /// Loads `(train, test)`. Synthetic data is generated from `seed`.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::Shapes {
                train_per_class,
                test_per_class,
            } => {
                let classes = data::SHAPE_CLASS_COUNT;
                let train = data::synth_shapes(
                    classes,
                    *train_per_class,
                    rng::derive_seed(seed, "data-train", NONE, NONE),
                )?;
                let test = data::synth_shapes(
                    classes,
                    *test_per_class,
                    rng::derive_seed(seed, "data-test", NONE, NONE),
                )?;
                Ok((train, test))
            }
            DatasetConfig::FashionMnist {
                dir,
                train_per_class,
                test_per_class,
            } => {
                let (mut train, mut test) = data::load_fashion_mnist(dir)?;
                if let Some(n) = train_per_class {
                    train = train.take_per_class(*n)?;
                }
                if let Some(n) = test_per_class {
                    test = test.take_per_class(*n)?;
                }
                Ok((train, test))
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelChoice {
    /// 16/32/64-channel three-exit CNN.
    #[default]
    Fmnist,
    /// 8/16/32-channel variant of `Fmnist`.
    FmnistCompact,
    /// Ten single-conv segments with an exit after each.
    Deep10,
    Custom(ModelSpec),
}

impl ModelChoice {
    pub fn spec(&self) -> ModelSpec {
        match self {
            ModelChoice::Fmnist => ModelSpec::fmnist(),
            ModelChoice::FmnistCompact => ModelSpec::fmnist_compact(),
            ModelChoice::Deep10 => ModelSpec::deep10(),
            ModelChoice::Custom(spec) => spec.clone(),
        }
    }
}

/// Which model each participating client trains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    /// Every client trains the deepest subnetwork its tier allows.
    #[default]
    Tiered,
    /// Every client trains the tier-`tier` subnetwork regardless of its own
    /// tier (plain FedAvg with a small or a full model).
    Uniform { tier: usize },
    /// Only top-tier clients take part, each training the full model.
    CapableOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-3,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypernetConfig {
    pub rank: Rank,
    pub epochs: usize,
    pub lr: f64,
    pub hidden_dim: usize,
}

impl Default for HypernetConfig {
    fn default() -> Self {
        let hp = HyperHp::default();
        Self {
            rank: Rank::Top(100),
            epochs: hp.epochs,
            lr: hp.lr,
            hidden_dim: 256,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub multi_exit: bool,
    pub hypernet: bool,
    /// Also generate BatchNorm scale/shift and exit-head weights.
    #[serde(default)]
    pub generate_bn_fc: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            multi_exit: true,
            hypernet: true,
            generate_bn_fc: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate the global model on at most this many test samples.
    #[serde(default)]
    pub test_limit: Option<usize>,
    /// Test samples used for feature-similarity probes.
    pub probe_size: usize,
    /// Compute CKA every this many rounds; 0 means the final round only.
    #[serde(default)]
    pub cka_every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_limit: None,
            probe_size: 512,
            cka_every: 0,
        }
    }
}

/// A complete, serializable description of one simulated experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelChoice,
    pub n_clients: usize,
    /// Clients per tier, shallowest first; one entry per exit.
    pub tier_counts: Vec<usize>,
    pub rounds: usize,
    pub participation_fraction: f64,
    /// Dirichlet concentration for non-IID shards; absent means IID.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub local: LocalConfig,
    #[serde(default)]
    pub hypernet: HypernetConfig,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Parses and validates a JSON config.
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "experiment config".into(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        let spec = self.model.spec();
        spec.validate()
            .map_err(|e| Error::config("model", e.to_string()))?;
        let exits = spec.num_exits();
        if self.n_clients == 0 {
            return Err(Error::config("n_clients", "must be at least 1"));
        }
        if self.tier_counts.len() != exits {
            return Err(Error::config(
                "tier_counts",
                format!("needs one entry per exit ({exits}), got {}", self.tier_counts.len()),
            ));
        }
        let total: usize = self.tier_counts.iter().sum();
        if total != self.n_clients {
            return Err(Error::config(
                "tier_counts",
                format!("must sum to n_clients ({}), got {total}", self.n_clients),
            ));
        }
        let f = self.participation_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::config("participation_fraction", format!("must be in (0, 1], got {f}")));
        }
        if selection_size(f, self.n_clients) == 0 {
            return Err(Error::config(
                "participation_fraction",
                format!("selects no clients out of {}", self.n_clients),
            ));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::config("alpha", format!("must be positive and finite, got {a}")));
            }
        }
        match self.strategy {
            Strategy::Uniform { tier } if tier == 0 || tier > exits => {
                return Err(Error::config("strategy.tier", format!("must be in 1..={exits}, got {tier}")));
            }
            Strategy::CapableOnly if self.tier_counts[exits - 1] == 0 => {
                return Err(Error::config("strategy", "capable_only needs at least one top-tier client"));
            }
            _ => {}
        }
        if !(self.local.lr > 0.0) {
            return Err(Error::config("local.lr", "must be positive"));
        }
        if self.local.batch_size == 0 {
            return Err(Error::config("local.batch_size", "must be positive"));
        }
        if let Rank::Top(0) = self.hypernet.rank {
            return Err(Error::config("hypernet.rank", "must be at least 1"));
        }
        if !(self.hypernet.lr > 0.0) {
            return Err(Error::config("hypernet.lr", "must be positive"));
        }
        if self.hypernet.hidden_dim == 0 {
            return Err(Error::config("hypernet.hidden_dim", "must be positive"));
        }
        if self.ablation.generate_bn_fc && !self.ablation.hypernet {
            return Err(Error::config("ablation.generate_bn_fc", "requires ablation.hypernet"));
        }
        if self.eval.probe_size < 2 {
            return Err(Error::config("eval.probe_size", "must be at least 2"));
        }
        match &self.dataset {
            DatasetConfig::Shapes {
                train_per_class,
                test_per_class,
            } => {
                if *train_per_class == 0 || *test_per_class == 0 {
                    return Err(Error::config("dataset", "per-class counts must be positive"));
                }
                if train_per_class * data::SHAPE_CLASS_COUNT < self.n_clients {
                    return Err(Error::config("dataset.train_per_class", "fewer samples than clients"));
                }
            }
            DatasetConfig::FashionMnist {
                train_per_class,
                test_per_class,
                ..
            } => {
                if *train_per_class == Some(0) || *test_per_class == Some(0) {
                    return Err(Error::config("dataset", "per-class counts must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Splits `train` across clients: Dirichlet when `alpha` is set, IID
    /// otherwise.
    pub fn partition(&self, train: &Dataset) -> Result<Partition> {
        let seed = rng::derive_seed(self.seed, "partition", NONE, NONE);
        match self.alpha {
            Some(alpha) => data::dirichlet_partition(train.labels(), train.num_classes(), self.n_clients, alpha, seed),
            None => data::iid_partition(train.len(), self.n_clients, seed),
        }
    }

    pub fn hyper_hp(&self, seed: u64) -> HyperHp {
        HyperHp {
            epochs: self.hypernet.epochs,
            lr: self.hypernet.lr,
            seed,
        }
    }

    /// The seven configurations of the preliminary study, keyed by the
    /// labels used in reports: `small`, `large`, `large_all`, and the four
    /// multi-exit/hypernetwork combinations.
    pub fn preliminary(base: &Self, label: &str) -> Result<Self> {
        let mut c = base.clone();
        let top = c.tier_counts.len();
        let (strategy, multi_exit, hypernet) = match label {
            "small" => (Strategy::Uniform { tier: 1 }, false, false),
            "large" => (Strategy::CapableOnly, false, false),
            "large_all" => (Strategy::Uniform { tier: top }, false, false),
            "me_x_hn_x" => (Strategy::Tiered, false, false),
            "me_o_hn_x" => (Strategy::Tiered, true, false),
            "me_x_hn_o" => (Strategy::Tiered, false, true),
            "me_o_hn_o" => (Strategy::Tiered, true, true),
            other => {
                return Err(Error::InvalidArgument(format!("unknown preliminary configuration {other:?}")))
            }
        };
        c.name = label.to_string();
        c.strategy = strategy;
        c.ablation.multi_exit = multi_exit;
        c.ablation.hypernet = hypernet;
        c.ablation.generate_bn_fc = false;
        c.validate()?;
        Ok(c)
    }

    pub const PRELIMINARY_LABELS: [&'static str; 7] = [
        "small",
        "large",
        "large_all",
        "me_x_hn_x",
        "me_o_hn_x",
        "me_x_hn_o",
        "me_o_hn_o",
    ];
}

/// `floor(fraction * n)`, tolerant of binary rounding (0.2 * 50 is 10).
pub fn selection_size(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}
