//! The federated round protocol: client selection, local training, weighted
//! model aggregation, weighted prototype aggregation with stale
//! carry-forward, evaluation, and communication accounting.
//!
//! Every run is a deterministic function of the experiment seed. Clients
//! within a round train on immutable snapshots of the global state and may
//! run in parallel; aggregation reduces their results in ascending client-id
//! order so the summation order (and hence the bits) never depends on
//! scheduling.

use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::losses::{self, LocalPrototypes, LossConfig, PrototypeSet};
use crate::model::{self, MlpSpec, ModelParams};
use crate::rng;
use crate::tensor::{sgd_step, SgdConfig, Tape};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;

/// Protocol-level configuration of one experiment.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FedConfig {
    pub rounds: u32,
    pub local_epochs: u32,
    pub batch_size: usize,
    pub clients_per_round: usize,
    pub loss: LossConfig,
    pub sgd: SgdConfig,
    pub seed: u64,
    /// Fraction of clients pre-selected (at experiment start) as allowed to
    /// submit prototypes.
    pub prototype_fraction: f64,
    /// Record the per-round eigenvalue collapse metric.
    pub track_eigvar: bool,
}

impl FedConfig {
    pub fn validate(&self, total_clients: usize) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.clients_per_round == 0 || self.clients_per_round > total_clients {
            return Err(Error::Config(format!(
                "clients_per_round {} out of range for {} clients",
                self.clients_per_round, total_clients
            )));
        }
        if !(0.0..=1.0).contains(&self.prototype_fraction) {
            return Err(Error::Config(format!(
                "prototype_fraction must lie in [0, 1], got {}",
                self.prototype_fraction
            )));
        }
        self.sgd.validate()?;
        self.loss.validate()?;
        if let Some(n) = self.loss.lite_n {
            if n > self.batch_size {
                return Err(Error::Config(format!(
                    "lite_n {} exceeds batch_size {}",
                    n, self.batch_size
                )));
            }
        }
        Ok(())
    }
}

/// Server-side cross-round state.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub round: u32,
    pub params: ModelParams,
    pub prototypes: Option<PrototypeSet>,
    pub seed: u64,
}

impl ServerState {
    pub fn new(spec: &MlpSpec, seed: u64) -> Result<Self> {
        Ok(Self { round: 0, params: model::init(spec)?, prototypes: None, seed })
    }
}

/// One client's fixed identity: its shard and its prototype permission.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: ClientShard,
    pub prototype_allowed: bool,
}

/// Per-client metrics of one round (averages over the final local epoch).
#[derive(Debug, Clone, Serialize)]
pub struct ClientRoundStats {
    pub client_id: usize,
    pub n_samples: usize,
    pub cls_loss: f64,
    pub intra_loss: f64,
    pub inter_loss: f64,
    pub total_loss: f64,
    pub first_epoch_loss: f64,
}

/// One round's record, serialized as one JSONL object.
#[derive(Debug, Clone, Serialize)]
pub struct RoundReport {
    pub round: u32,
    pub selected: Vec<usize>,
    pub clients: Vec<ClientRoundStats>,
    pub test_accuracy: f64,
    /// Model parameters sent up this round: participants x param_count.
    pub uplink_model_params: u64,
    /// Prototype scalars sent up this round: sum over submitters |C_k|·d.
    pub uplink_proto_params: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eigvar: Option<f64>,
}

/// End-of-run summary, serialized as one JSON document.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub rounds: u32,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub best_round: u32,
    pub rounds_to_target: BTreeMap<String, Option<u32>>,
    pub total_uplink_model_params: u64,
    pub total_uplink_proto_params: u64,
}

/// Uniform selection of `k` distinct clients, deterministic in
/// `(seed, round)`, returned in ascending id order.
pub fn select_clients(total: usize, k: usize, round: u32, seed: u64) -> Vec<usize> {
    debug_assert!(k <= total);
    let mut rng = rng::rng_from(seed, &[rng::TAG_SELECT, round as u64]);
    let mut picked = rand::seq::index::sample(&mut rng, total, k).into_vec();
    picked.sort_unstable();
    picked
}

/// What a client returns to the server after local training.
#[derive(Debug)]
pub struct LocalTrainOutput {
    pub client_id: usize,
    pub n_samples: usize,
    pub params: Vec<f64>,
    pub prototypes: Option<LocalPrototypes>,
    pub stats: ClientRoundStats,
}

/// Runs `local_epochs` of mini-batch SGD on the total objective, then
/// computes prototypes over the full shard with the trained model.
///
/// Momentum buffers start at zero (fresh global weights arrive each round).
/// When no global prototypes exist yet (round 0, or no submitter so far)
/// the inter term is disabled for this round.
pub fn local_train(
    client: &ClientState,
    dataset: &Dataset,
    global: &ModelParams,
    global_prototypes: Option<&PrototypeSet>,
    cfg: &FedConfig,
    round: u32,
) -> Result<LocalTrainOutput> {
    if client.shard.indices.is_empty() {
        return Err(Error::Contract(format!("client {} has an empty shard", client.client_id)));
    }
    let mut effective_loss = cfg.loss.clone();
    if global_prototypes.is_none() {
        effective_loss.mu2 = 0.0;
    }
    // Partial prototype submission can leave classes without a global
    // prototype; the margin term then runs over the covered classes.
    effective_loss.skip_uncovered_classes = true;
    let layout = global.layout.clone();
    let mut params = global.values.clone();
    let mut velocity = vec![0.0; params.len()];
    let mut order = client.shard.indices.clone();
    let mut shuffle_rng = rng::rng_from(cfg.seed, &[rng::TAG_LOCAL_TRAIN, round as u64, client.client_id as u64]);

    let mut first_epoch_loss = 0.0;
    let mut last_epoch = (0.0, 0.0, 0.0, 0.0); // cls, intra, inter, total
    for epoch in 0..cfg.local_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (feats, labels) = dataset.gather(chunk);
            let mut tape = Tape::new();
            let p = tape.leaf(params.clone(), vec![layout.total], true)?;
            let batch = tape.constant(feats, vec![chunk.len(), dataset.input_dim])?;
            let lite_seed = rng::derive_seed(
                cfg.seed,
                &[rng::TAG_LITE, round as u64, client.client_id as u64, epoch as u64, batches as u64],
            );
            let out = losses::total_loss(
                &mut tape,
                &layout,
                p,
                batch,
                &labels,
                global_prototypes,
                Some(&global.values),
                &effective_loss,
                lite_seed,
            )?;
            tape.backward(out.total)?;
            sgd_step(&mut params, tape.grad(p), &cfg.sgd, &mut velocity)?;
            sums.0 += out.cls_value;
            sums.1 += out.intra_value;
            sums.2 += out.inter_value;
            sums.3 += tape.scalar_value(out.total);
            batches += 1;
        }
        let denom = batches.max(1) as f64;
        let epoch_avg = (sums.0 / denom, sums.1 / denom, sums.2 / denom, sums.3 / denom);
        if epoch == 0 {
            first_epoch_loss = epoch_avg.3;
        }
        last_epoch = epoch_avg;
    }

    let prototypes = if client.prototype_allowed {
        let (feats, labels) = dataset.gather(&client.shard.indices);
        let trained = ModelParams { layout: layout.clone(), values: params.clone() };
        let (z, _) = model::infer(&trained, &feats, labels.len())?;
        Some(losses::local_prototypes(&z, layout.feature_dim, &labels)?)
    } else {
        None
    };

    let n_samples = client.shard.indices.len();
    Ok(LocalTrainOutput {
        client_id: client.client_id,
        n_samples,
        params,
        prototypes,
        stats: ClientRoundStats {
            client_id: client.client_id,
            n_samples,
            cls_loss: last_epoch.0,
            intra_loss: last_epoch.1,
            inter_loss: last_epoch.2,
            total_loss: last_epoch.3,
            first_epoch_loss,
        },
    })
}

/// Sample-count-weighted average `sum p_k w_k` with `p_k = N_k / sum N`.
/// Inputs must arrive in ascending client-id order for bit determinism.
pub fn aggregate_params(updates: &[(Vec<f64>, usize)]) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::Protocol("aggregate_params over no updates".into()));
    }
    let len = updates[0].0.len();
    if updates.iter().any(|(w, _)| w.len() != len) {
        return Err(Error::Protocol("aggregate_params over unequal parameter lengths".into()));
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Protocol("aggregate_params with zero total samples".into()));
    }
    let mut out = vec![0.0; len];
    for (w, n) in updates {
        let p = *n as f64 / total as f64;
        for (o, &v) in out.iter_mut().zip(w) {
            *o += p * v;
        }
    }
    Ok(out)
}

/// Per-class weighted mean of submitted prototypes,
/// `g_c = sum p_k^c g_k^c` with `p_k^c = N_k^c / sum N_k^c` over this
/// round's submitters owning class c. Classes with no submitter keep their
/// previous global prototype.
pub fn aggregate_prototypes(
    previous: Option<&PrototypeSet>,
    submissions: &[(usize, &LocalPrototypes)],
    dim: usize,
) -> Result<PrototypeSet> {
    let mut next = PrototypeSet::new(dim);
    if let Some(prev) = previous {
        if prev.dim() != dim {
            return Err(Error::Protocol(format!(
                "previous prototype width {} does not match feature width {dim}",
                prev.dim()
            )));
        }
        for (class, proto) in prev.iter() {
            next.insert(class, proto.to_vec())?;
        }
    }
    // Ascending client id, then class: deterministic accumulation order.
    let mut order: Vec<&(usize, &LocalPrototypes)> = submissions.iter().collect();
    order.sort_by_key(|(id, _)| *id);

    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (_, local) in &order {
        for (class, proto) in local.set.iter() {
            let count = *local.counts.get(&class).ok_or_else(|| {
                Error::Protocol(format!("submission lacks a sample count for class {class}"))
            })?;
            if proto.len() != dim {
                return Err(Error::Protocol(format!(
                    "prototype width {} for class {class} does not match feature width {dim}",
                    proto.len()
                )));
            }
            let entry = sums.entry(class).or_insert_with(|| (vec![0.0; dim], 0));
            for (s, &v) in entry.0.iter_mut().zip(proto) {
                *s += count as f64 * v;
            }
            entry.1 += count;
        }
    }
    for (class, (sum, count)) in sums {
        let mean: Vec<f64> = sum.into_iter().map(|s| s / count as f64).collect();
        next.insert(class, mean)?;
    }
    Ok(next)
}

/// `C·d / param_count`: the relative uplink cost of shipping prototypes
/// alongside the model.
pub fn communication_overhead(param_count: usize, num_classes: usize, feature_dim: usize) -> f64 {
    debug_assert!(param_count > 0);
    (num_classes * feature_dim) as f64 / param_count as f64
}

fn eigvar_on_batch(params: &ModelParams, test: &Dataset, cfg: &FedConfig) -> Result<Option<f64>> {
    let n = test.len().min(cfg.batch_size);
    if n < 2 {
        return Ok(None);
    }
    let indices: Vec<usize> = (0..n).collect();
    let (feats, labels) = test.gather(&indices);
    let (z, _) = model::infer(params, &feats, n)?;
    let d = params.layout.feature_dim;
    let mats = losses::class_cov_matrices(&z, d, &labels, cfg.loss.population_std)?;
    if mats.is_empty() {
        return Ok(None);
    }
    let k = d.min(50);
    let mut acc = 0.0;
    for m in &mats {
        acc += crate::analysis::eigvar_topk(&m.values, d, k, 128.0)?;
    }
    Ok(Some(acc / mats.len() as f64))
}

/// One protocol round: select, distribute, train, aggregate models and
/// prototypes, evaluate.
pub fn run_round(
    server: &mut ServerState,
    clients: &[ClientState],
    dataset: &Dataset,
    test: &Dataset,
    cfg: &FedConfig,
) -> Result<RoundReport> {
    let round = server.round;
    let selected = select_clients(clients.len(), cfg.clients_per_round, round, cfg.seed);

    let snapshot_params = server.params.clone();
    let snapshot_protos = server.prototypes.clone();
    let results: Vec<Result<LocalTrainOutput>> = selected
        .par_iter()
        .map(|&k| local_train(&clients[k], dataset, &snapshot_params, snapshot_protos.as_ref(), cfg, round))
        .collect();
    let mut outputs = Vec::with_capacity(results.len());
    for r in results {
        outputs.push(r?);
    }
    // par_iter preserves order and `selected` is ascending, so the
    // aggregation below runs in ascending client-id order.

    let updates: Vec<(Vec<f64>, usize)> =
        outputs.iter().map(|o| (o.params.clone(), o.n_samples)).collect();
    let new_values = aggregate_params(&updates)?;
    server.params.values = new_values;

    let submissions: Vec<(usize, &LocalPrototypes)> = outputs
        .iter()
        .filter_map(|o| o.prototypes.as_ref().map(|p| (o.client_id, p)))
        .collect();
    let uplink_proto_params: u64 = submissions
        .iter()
        .map(|(_, p)| (p.set.len() * server.params.layout.feature_dim) as u64)
        .sum();
    if !submissions.is_empty() || server.prototypes.is_some() {
        server.prototypes = Some(aggregate_prototypes(
            server.prototypes.as_ref(),
            &submissions,
            server.params.layout.feature_dim,
        )?);
    }

    let (test_feats, test_labels) = test.gather(&(0..test.len()).collect::<Vec<_>>());
    let test_accuracy = model::accuracy(&server.params, &test_feats, &test_labels)?;
    let eigvar = if cfg.track_eigvar { eigvar_on_batch(&server.params, test, cfg)? } else { None };

    let report = RoundReport {
        round,
        selected: selected.clone(),
        clients: outputs.into_iter().map(|o| o.stats).collect(),
        test_accuracy,
        uplink_model_params: (selected.len() * server.params.layout.total) as u64,
        uplink_proto_params,
        eigvar,
    };
    server.round += 1;
    Ok(report)
}

/// First round whose test accuracy reaches `target`.
pub fn rounds_to_target(reports: &[RoundReport], target: f64) -> Option<u32> {
    reports.iter().find(|r| r.test_accuracy >= target).map(|r| r.round)
}

/// Builds the end-of-run summary from round reports.
pub fn summarize_reports(reports: &[RoundReport], targets: &[f64]) -> ExperimentSummary {
    let mut best_accuracy = 0.0;
    let mut best_round = 0;
    for r in reports {
        if r.test_accuracy > best_accuracy {
            best_accuracy = r.test_accuracy;
            best_round = r.round;
        }
    }
    let mut rounds_map = BTreeMap::new();
    for &t in targets {
        rounds_map.insert(format!("{t}"), rounds_to_target(reports, t));
    }
    rounds_map.insert("best".into(), if reports.is_empty() { None } else { Some(best_round) });
    ExperimentSummary {
        rounds: reports.len() as u32,
        final_accuracy: reports.last().map(|r| r.test_accuracy).unwrap_or(0.0),
        best_accuracy,
        best_round,
        rounds_to_target: rounds_map,
        total_uplink_model_params: reports.iter().map(|r| r.uplink_model_params).sum(),
        total_uplink_proto_params: reports.iter().map(|r| r.uplink_proto_params).sum(),
    }
}

/// Builds client states (with the fixed prototype-permission draw) and runs
/// `cfg.rounds` rounds.
pub fn run_experiment(
    cfg: &FedConfig,
    spec: &MlpSpec,
    dataset: &Dataset,
    shards: &[ClientShard],
    test: &Dataset,
    targets: &[f64],
) -> Result<(Vec<RoundReport>, ExperimentSummary)> {
    cfg.validate(shards.len())?;
    let clients = build_clients(shards, cfg);
    let mut server = ServerState::new(spec, cfg.seed)?;
    let mut reports = Vec::with_capacity(cfg.rounds as usize);
    for _ in 0..cfg.rounds {
        reports.push(run_round(&mut server, &clients, dataset, test, cfg)?);
    }
    let summary = summarize_reports(&reports, targets);
    Ok((reports, summary))
}

/// Fixes each client's prototype permission for the whole experiment:
/// ceil(fraction * n) clients drawn once at start.
pub fn build_clients(shards: &[ClientShard], cfg: &FedConfig) -> Vec<ClientState> {
    let n = shards.len();
    let allowed_count = (cfg.prototype_fraction * n as f64).ceil() as usize;
    let allowed: std::collections::BTreeSet<usize> = if allowed_count >= n {
        (0..n).collect()
    } else {
        let mut rng = rng::rng_from(cfg.seed, &[rng::TAG_PRIVACY]);
        rand::seq::index::sample(&mut rng, n, allowed_count).into_iter().collect()
    };
    shards
        .iter()
        .cloned()
        .map(|shard| ClientState {
            client_id: shard.client_id,
            prototype_allowed: allowed.contains(&shard.client_id),
            shard,
        })
        .collect()
}
