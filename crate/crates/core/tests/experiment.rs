//! Experiment-level oracles: the separable IID baseline, the qualitative
//! feature-geometry contrast between reshaped and plain training, and
//! order-invariance of the aggregation reductions.

mod common;

use common::mean;
use fedmr_core::data::{self, Dataset};
use fedmr_core::federation::{self, FedConfig};
use fedmr_core::losses::{LocalPrototypes, LossConfig, PrototypeSet};
use fedmr_core::model::{self, MlpSpec};
use fedmr_core::rng;
use fedmr_core::tensor::SgdConfig;

const CENTERS: [(f64, f64); 4] = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)];

fn circles(n: usize, seed: u64) -> Dataset {
    data::gen_circles(&CENTERS, 0.5, n, seed).unwrap()
}

/// FedAvg on the IID four-disk task is essentially solved within 30 rounds.
#[test]
fn iid_fedavg_reaches_95_percent_by_round_30() {
    let train = circles(150, 61);
    let test = circles(150, rng::derive_seed(61, &[rng::TAG_TEST_SPLIT]));
    let shards = data::partition_iid(&train, 4, 61).unwrap();
    let spec = MlpSpec::new(vec![2, 128, 3, 4], 613).unwrap();
    let cfg = FedConfig {
        rounds: 30,
        local_epochs: 5,
        batch_size: 64,
        clients_per_round: 4,
        loss: LossConfig::default(),
        sgd: SgdConfig { learning_rate: 0.01, momentum: 0.9, weight_decay: 1e-5 },
        seed: 61,
        prototype_fraction: 1.0,
        track_eigvar: false,
    };
    let (_, summary) = federation::run_experiment(&cfg, &spec, &train, &shards, &test, &[0.95]).unwrap();
    assert!(summary.final_accuracy >= 0.95, "final accuracy {}", summary.final_accuracy);
}

/// Mean over classes of the mean angle (degrees) between each sample's
/// feature direction and its class's mean direction.
fn per_class_angular_spread(z: &[f64], d: usize, labels: &[usize]) -> f64 {
    let mut sums: std::collections::BTreeMap<usize, Vec<f64>> = std::collections::BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        let row = &z[i * d..(i + 1) * d];
        let entry = sums.entry(l).or_insert_with(|| vec![0.0; d]);
        for (s, &v) in entry.iter_mut().zip(row) {
            *s += v;
        }
    }
    let mut spreads = Vec::new();
    for (class, mean_dir) in &sums {
        let norm = mean_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let mut angle_sum = 0.0;
        let mut count = 0usize;
        for (i, &l) in labels.iter().enumerate() {
            if l != *class {
                continue;
            }
            let row = &z[i * d..(i + 1) * d];
            let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rn == 0.0 {
                continue;
            }
            let dot: f64 = row.iter().zip(mean_dir).map(|(a, b)| a * b).sum();
            angle_sum += (dot / (rn * norm)).clamp(-1.0, 1.0).acos().to_degrees();
            count += 1;
        }
        if count > 0 {
            spreads.push(angle_sum / count as f64);
        }
    }
    mean(&spreads)
}

fn train_and_measure_spread(loss: LossConfig, seed: u64) -> f64 {
    let train = circles(150, seed);
    let test = circles(150, rng::derive_seed(seed, &[rng::TAG_TEST_SPLIT]));
    let shards = data::partition_pcdd(&train, 4, 2, seed).unwrap();
    let spec = MlpSpec::new(vec![2, 128, 3, 4], rng::derive_seed(seed, &[rng::TAG_MODEL_INIT])).unwrap();
    let cfg = FedConfig {
        rounds: 25,
        local_epochs: 5,
        batch_size: 128,
        clients_per_round: 4,
        loss,
        sgd: SgdConfig { learning_rate: 0.01, momentum: 0.9, weight_decay: 1e-5 },
        seed,
        prototype_fraction: 1.0,
        track_eigvar: false,
    };
    let clients = federation::build_clients(&shards, &cfg);
    let mut server = federation::ServerState::new(&spec, cfg.seed).unwrap();
    for _ in 0..cfg.rounds {
        federation::run_round(&mut server, &clients, &train, &test, &cfg).unwrap();
    }
    let idx: Vec<usize> = (0..train.len()).collect();
    let (feats, labels) = train.gather(&idx);
    let (z, _) = model::infer(&server.params, &feats, labels.len()).unwrap();
    per_class_angular_spread(&z, 3, &labels)
}

/// The reshaped feature dump spans at least twice the per-class angular
/// spread of the plain PCDD-trained dump.
#[test]
fn reshaped_features_span_wider_angles_than_collapsed() {
    let mut ratios = Vec::new();
    for seed in [71u64, 72, 73] {
        let collapsed = train_and_measure_spread(LossConfig::default(), seed);
        let reshaped = train_and_measure_spread(
            LossConfig { mu1: 0.1, mu2: 1.0, margin: 0.5, ..LossConfig::default() },
            seed,
        );
        ratios.push(reshaped / collapsed);
    }
    let m = mean(&ratios);
    assert!(m >= 2.0, "mean spread ratio {m:.2} ({ratios:?})");
}

/// The proximal term measurably limits local drift from the global model.
#[test]
fn fedprox_limits_local_drift() {
    let train = circles(100, 83);
    let shards = data::partition_pcdd(&train, 4, 2, 83).unwrap();
    let spec = MlpSpec::new(vec![2, 16, 3, 4], 831).unwrap();
    let global = model::init(&spec).unwrap();
    let base = FedConfig {
        rounds: 1,
        local_epochs: 8,
        batch_size: 64,
        clients_per_round: 4,
        loss: LossConfig::default(),
        sgd: SgdConfig { learning_rate: 0.05, momentum: 0.9, weight_decay: 0.0 },
        seed: 83,
        prototype_fraction: 1.0,
        track_eigvar: false,
    };
    let clients = federation::build_clients(&shards, &base);
    let drift = |cfg: &FedConfig| -> f64 {
        let out = federation::local_train(&clients[0], &train, &global, None, cfg, 0).unwrap();
        out.params
            .iter()
            .zip(&global.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let plain = drift(&base);
    let prox = drift(&FedConfig {
        loss: LossConfig { prox_mu: 5.0, ..LossConfig::default() },
        ..base.clone()
    });
    assert!(prox < plain, "prox drift {prox} vs plain {plain}");
}

/// The lite arm runs end to end and stays deterministic.
#[test]
fn fedmr_lite_runs_and_is_deterministic() {
    let train = circles(60, 19);
    let test = circles(60, rng::derive_seed(19, &[rng::TAG_TEST_SPLIT]));
    let shards = data::partition_pcdd(&train, 4, 2, 19).unwrap();
    let spec = MlpSpec::new(vec![2, 16, 3, 4], 191).unwrap();
    let cfg = FedConfig {
        rounds: 4,
        local_epochs: 2,
        batch_size: 32,
        clients_per_round: 4,
        loss: LossConfig { mu1: 0.001, mu2: 0.5, lite_n: Some(10), ..LossConfig::default() },
        sgd: SgdConfig { learning_rate: 0.02, momentum: 0.9, weight_decay: 1e-5 },
        seed: 19,
        prototype_fraction: 1.0,
        track_eigvar: false,
    };
    let (ra, sa) = federation::run_experiment(&cfg, &spec, &train, &shards, &test, &[0.5]).unwrap();
    let (rb, sb) = federation::run_experiment(&cfg, &spec, &train, &shards, &test, &[0.5]).unwrap();
    assert_eq!(serde_json::to_string(&ra).unwrap(), serde_json::to_string(&rb).unwrap());
    assert_eq!(sa.best_accuracy, sb.best_accuracy);
    // The inter term engages from round 1 on.
    assert!(ra[1..].iter().any(|r| r.clients.iter().any(|c| c.inter_loss != 0.0)));
}

/// aggregate_params over the id-sorted list is exactly permutation
/// invariant; aggregate_prototypes sorts internally.
#[test]
fn aggregation_is_order_invariant_after_sorting() {
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);

    let mut updates: Vec<(usize, Vec<f64>, usize)> = (0..9)
        .map(|id| {
            let w: Vec<f64> = (0..25).map(|_| rng.gen_range(-5.0..5.0)).collect();
            (id, w, rng.gen_range(1..100))
        })
        .collect();
    let sorted: Vec<(Vec<f64>, usize)> = updates.iter().map(|(_, w, n)| (w.clone(), *n)).collect();
    let reference = federation::aggregate_params(&sorted).unwrap();
    for _ in 0..5 {
        updates.shuffle(&mut rng);
        let mut resorted = updates.clone();
        resorted.sort_by_key(|(id, _, _)| *id);
        let again: Vec<(Vec<f64>, usize)> =
            resorted.into_iter().map(|(_, w, n)| (w, n)).collect();
        assert_eq!(federation::aggregate_params(&again).unwrap(), reference);
    }

    let mut locals = Vec::new();
    for id in 0..6usize {
        let mut set = PrototypeSet::new(3);
        let mut counts = std::collections::BTreeMap::new();
        for class in 0..3usize {
            set.insert(class, (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            counts.insert(class, rng.gen_range(1..40));
        }
        locals.push((id, LocalPrototypes { set, counts }));
    }
    let subs: Vec<(usize, &LocalPrototypes)> = locals.iter().map(|(id, l)| (*id, l)).collect();
    let reference = federation::aggregate_prototypes(None, &subs, 3).unwrap();
    let mut shuffled = subs.clone();
    for _ in 0..5 {
        shuffled.shuffle(&mut rng);
        let again = federation::aggregate_prototypes(None, &shuffled, 3).unwrap();
        for (class, proto) in reference.iter() {
            assert_eq!(again.get(class).unwrap(), proto);
        }
    }
}
