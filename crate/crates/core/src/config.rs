//! Experiment configuration: strict JSON parsing and assembly of the run
//! plan (datasets, partition, model, protocol config).
//!
//! Unknown keys are rejected. Defaults follow the reference training setup:
//! learning rate 0.01, momentum 0.9, weight decay 1e-5, batch size 128, 10
//! local epochs; `fedmr` arms default to mu1 = 0.1 and mu2 = 0.0001.

use crate::data::{self, Dataset, PartitionKind, PartitionSpec};
use crate::error::{Error, Result};
use crate::federation::FedConfig;
use crate::losses::LossConfig;
use crate::model::MlpSpec;
use crate::rng;
use crate::tensor::SgdConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_MU1: f64 = 0.1;
pub const DEFAULT_MU2: f64 = 0.0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Fedavg,
    Fedprox,
    Fedmr,
    FedmrIntra,
    FedmrInter,
    FedmrLite,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Fedavg => "fedavg",
            Algorithm::Fedprox => "fedprox",
            Algorithm::Fedmr => "fedmr",
            Algorithm::FedmrIntra => "fedmr-intra",
            Algorithm::FedmrInter => "fedmr-inter",
            Algorithm::FedmrLite => "fedmr-lite",
        }
    }

    fn uses_intra(&self) -> bool {
        matches!(self, Algorithm::Fedmr | Algorithm::FedmrIntra | Algorithm::FedmrLite)
    }

    fn uses_inter(&self) -> bool {
        matches!(self, Algorithm::Fedmr | Algorithm::FedmrInter | Algorithm::FedmrLite)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Disk mixture on the four corner centers (or custom centers).
    Circles {
        #[serde(default = "default_n_per_class")]
        n_per_class: usize,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default)]
        centers: Option<Vec<[f64; 2]>>,
    },
    /// The three-disk construction at (1,0), (0,±√3).
    Motivation {
        #[serde(default = "default_n_per_class")]
        n_per_class: usize,
    },
    /// `f1,...,fm,label` rows with a header line.
    Csv { path: String },
}

fn default_n_per_class() -> usize {
    5000
}

fn default_radius() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PartitionConfig {
    Pcdd { clients: usize, classes_per_client: usize },
    Dirichlet { clients: usize, beta: f64 },
    Iid { clients: usize },
}

impl PartitionConfig {
    pub fn clients(&self) -> usize {
        match self {
            PartitionConfig::Pcdd { clients, .. } => *clients,
            PartitionConfig::Dirichlet { clients, .. } => *clients,
            PartitionConfig::Iid { clients } => *clients,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub partition: PartitionConfig,
    pub algorithm: Algorithm,
    pub rounds: u32,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: u32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Clients sampled per round; defaults to all clients.
    #[serde(default)]
    pub clients_per_round: Option<usize>,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub mu1: Option<f64>,
    #[serde(default)]
    pub mu2: Option<f64>,
    #[serde(default)]
    pub margin: Option<f64>,
    #[serde(default)]
    pub lite_n: Option<usize>,
    #[serde(default)]
    pub prox_mu: Option<f64>,
    #[serde(default)]
    pub contrast_all: Option<bool>,
    #[serde(default)]
    pub pull_to_prototype: Option<bool>,
    #[serde(default)]
    pub population_std: Option<bool>,
    #[serde(default = "default_prototype_fraction")]
    pub prototype_fraction: f64,
    /// Hidden layer widths; the last entry is the feature width d.
    #[serde(default = "default_hidden_sizes")]
    pub hidden_sizes: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Output path prefix for reports.
    #[serde(default)]
    pub output: Option<String>,
    /// Record the per-round eigenvalue collapse metric.
    #[serde(default)]
    pub eigvar: bool,
    /// Also dump final features after `run`.
    #[serde(default)]
    pub dump_features: bool,
    /// Test-set size per class for synthetic datasets (defaults to the
    /// training size).
    #[serde(default)]
    pub test_n_per_class: Option<usize>,
    /// Held-out fraction for CSV datasets.
    #[serde(default)]
    pub test_fraction: Option<f64>,
    /// Accuracy thresholds reported as rounds-to-target.
    #[serde(default = "default_targets")]
    pub target_accuracies: Vec<f64>,
}

fn default_local_epochs() -> u32 {
    10
}

fn default_batch_size() -> usize {
    128
}

fn default_learning_rate() -> f64 {
    0.01
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    1e-5
}

fn default_prototype_fraction() -> f64 {
    1.0
}

fn default_hidden_sizes() -> Vec<usize> {
    vec![128, 3]
}

fn default_targets() -> Vec<f64> {
    vec![0.5, 0.8, 0.9, 0.95]
}

/// Strict parse of a JSON config file.
pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Strict parse of a JSON config document.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let reject = |field: &str, applies: &str| -> Result<()> {
            Err(Error::Config(format!(
                "key `{field}` only applies to {applies}, not to `{}`",
                self.algorithm.name()
            )))
        };
        if self.mu1.is_some() && !self.algorithm.uses_intra() {
            reject("mu1", "fedmr, fedmr-intra and fedmr-lite")?;
        }
        if self.mu2.is_some() && !self.algorithm.uses_inter() {
            reject("mu2", "fedmr, fedmr-inter and fedmr-lite")?;
        }
        for (key, set) in [
            ("margin", self.margin.is_some()),
            ("contrast_all", self.contrast_all.is_some()),
            ("pull_to_prototype", self.pull_to_prototype.is_some()),
        ] {
            if set && !self.algorithm.uses_inter() {
                reject(key, "fedmr, fedmr-inter and fedmr-lite")?;
            }
        }
        if self.population_std.is_some() && !self.algorithm.uses_intra() {
            reject("population_std", "fedmr, fedmr-intra and fedmr-lite")?;
        }
        match self.algorithm {
            Algorithm::Fedprox => {
                let mu = self
                    .prox_mu
                    .ok_or_else(|| Error::Config("fedprox requires key `prox_mu` > 0".into()))?;
                if mu.is_nan() || mu <= 0.0 {
                    return Err(Error::Config(format!("prox_mu must be positive, got {mu}")));
                }
            }
            Algorithm::FedmrLite => {
                let n = self
                    .lite_n
                    .ok_or_else(|| Error::Config("fedmr-lite requires key `lite_n` >= 1".into()))?;
                if n == 0 {
                    return Err(Error::Config("lite_n must be at least 1".into()));
                }
                if n > self.batch_size {
                    return Err(Error::Config(format!(
                        "lite_n {n} exceeds batch_size {}",
                        self.batch_size
                    )));
                }
            }
            _ => {
                if self.prox_mu.is_some() {
                    reject("prox_mu", "fedprox")?;
                }
                if self.lite_n.is_some() {
                    reject("lite_n", "fedmr-lite")?;
                }
            }
        }
        if let Some(k) = self.clients_per_round {
            if k == 0 || k > self.partition.clients() {
                return Err(Error::Config(format!(
                    "clients_per_round {k} out of range for {} clients",
                    self.partition.clients()
                )));
            }
        }
        if let Some(f) = self.test_fraction {
            if !(0.0 < f && f < 1.0) {
                return Err(Error::Config(format!("test_fraction must lie in (0, 1), got {f}")));
            }
            if !matches!(self.dataset, DatasetSpec::Csv { .. }) {
                return Err(Error::Config("test_fraction only applies to csv datasets".into()));
            }
        }
        if self.test_n_per_class.is_some() && matches!(self.dataset, DatasetSpec::Csv { .. }) {
            return Err(Error::Config("test_n_per_class only applies to synthetic datasets".into()));
        }
        if self.hidden_sizes.is_empty() {
            return Err(Error::Config("hidden_sizes must name at least the feature width".into()));
        }
        Ok(())
    }

    /// Loss weights implied by the algorithm arm and the explicit keys.
    pub fn loss_config(&self) -> LossConfig {
        let mut loss = LossConfig::default();
        if self.algorithm.uses_intra() {
            loss.mu1 = self.mu1.unwrap_or(DEFAULT_MU1);
            loss.population_std = self.population_std.unwrap_or(false);
        }
        if self.algorithm.uses_inter() {
            loss.mu2 = self.mu2.unwrap_or(DEFAULT_MU2);
            loss.margin = self.margin.unwrap_or(0.0);
            loss.contrast_all = self.contrast_all.unwrap_or(false);
            loss.pull_to_prototype = self.pull_to_prototype.unwrap_or(false);
        }
        if self.algorithm == Algorithm::FedmrLite {
            loss.lite_n = self.lite_n;
        }
        if self.algorithm == Algorithm::Fedprox {
            loss.prox_mu = self.prox_mu.unwrap_or(0.0);
        }
        loss
    }

    pub fn fed_config(&self, total_clients: usize) -> FedConfig {
        FedConfig {
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            clients_per_round: self.clients_per_round.unwrap_or(total_clients),
            loss: self.loss_config(),
            sgd: SgdConfig {
                learning_rate: self.learning_rate,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
            seed: self.seed,
            prototype_fraction: self.prototype_fraction,
            track_eigvar: self.eigvar,
        }
    }
}

/// Everything needed to run one experiment.
pub struct RunPlan {
    pub config: ExperimentConfig,
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<data::ClientShard>,
    pub model_spec: MlpSpec,
    pub fed: FedConfig,
}

/// Builds datasets, the partition and the model spec from a parsed config.
pub fn build_plan(config: ExperimentConfig) -> Result<RunPlan> {
    let seed = config.seed;
    let (train, test) = match &config.dataset {
        DatasetSpec::Circles { n_per_class, radius, centers } => {
            let default_centers = vec![[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]];
            let centers = centers.clone().unwrap_or(default_centers);
            let pts: Vec<(f64, f64)> = centers.iter().map(|c| (c[0], c[1])).collect();
            let train = data::gen_circles(&pts, *radius, *n_per_class, seed)?;
            let test_n = config.test_n_per_class.unwrap_or(*n_per_class);
            let test = data::gen_circles(
                &pts,
                *radius,
                test_n,
                rng::derive_seed(seed, &[rng::TAG_TEST_SPLIT]),
            )?;
            (train, test)
        }
        DatasetSpec::Motivation { n_per_class } => {
            let train = data::gen_motivation(*n_per_class, seed)?;
            let test_n = config.test_n_per_class.unwrap_or(*n_per_class);
            let test =
                data::gen_motivation(test_n, rng::derive_seed(seed, &[rng::TAG_TEST_SPLIT]))?;
            (train, test)
        }
        DatasetSpec::Csv { path } => {
            let full = data::load_csv(path)?;
            let fraction = config.test_fraction.unwrap_or(0.2);
            split_holdout(&full, fraction, rng::derive_seed(seed, &[rng::TAG_TEST_SPLIT]))?
        }
    };

    let kind = match &config.partition {
        PartitionConfig::Pcdd { clients, classes_per_client } => PartitionKind::Pcdd {
            clients: *clients,
            classes_per_client: *classes_per_client,
        },
        PartitionConfig::Dirichlet { clients, beta } => {
            PartitionKind::Dirichlet { clients: *clients, beta: *beta }
        }
        PartitionConfig::Iid { clients } => PartitionKind::Iid { clients: *clients },
    };
    let shards = data::partition(&train, &PartitionSpec { kind, seed })?;

    let mut layer_sizes = Vec::with_capacity(config.hidden_sizes.len() + 2);
    layer_sizes.push(train.input_dim);
    layer_sizes.extend_from_slice(&config.hidden_sizes);
    layer_sizes.push(train.num_classes);
    let model_spec = MlpSpec::new(layer_sizes, rng::derive_seed(seed, &[rng::TAG_MODEL_INIT]))?;

    let fed = config.fed_config(shards.len());
    Ok(RunPlan { config, train, test, shards, model_spec, fed })
}

/// Splits one dataset into (train, test) by a seeded shuffle.
fn split_holdout(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    use rand::seq::SliceRandom;
    let n = ds.len();
    let test_n = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let (test_idx, train_idx) = order.split_at(test_n);
    let build = |idx: &[usize]| -> Dataset {
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        let (features, labels) = ds.gather(&sorted);
        Dataset { features, input_dim: ds.input_dim, labels, num_classes: ds.num_classes }
    };
    Ok((build(train_idx), build(test_idx)))
}

use rand_chacha::rand_core::SeedableRng;
