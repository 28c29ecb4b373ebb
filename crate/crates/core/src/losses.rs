//! Manifold-reshaping loss terms.
//!
//! The intra-class loss standardizes features per class, forms the class
//! covariance matrix M and penalizes its squared Frobenius norm, which by the
//! eigenvalue identity `Σ(λ_i − λ̄)² = ||M||²_F − d` (for trace-d matrices)
//! pushes the spectrum toward uniformity. The inter-class loss hinges the
//! margin between each sample's distance to its own global prototype and its
//! distance to other prototypes. The total objective is
//! `cls + μ1·intra + μ2·inter` plus an optional proximal term.
//!
//! Standardization uses the Bessel 1/(N−1) convention for both σ and M so
//! that diag(M) = 1 exactly and the eigenvalue identity is strict;
//! `population_std` switches σ to the 1/N convention.

use crate::analysis;
use crate::error::{Error, Result};
use crate::model::{self, ParamLayout};
use crate::tensor::{Tape, TensorId};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Floor applied to per-dimension standard deviations before dividing.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Weights and switches of the reshaping objective.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Intra-class decorrelation weight μ1.
    pub mu1: f64,
    /// Inter-class margin weight μ2.
    pub mu2: f64,
    /// Hinge margin; 0 reproduces the plain contrast.
    pub margin: f64,
    /// When set, the inter loss is computed on a random subsample of this
    /// many batch rows.
    pub lite_n: Option<usize>,
    /// Proximal weight toward the global parameters.
    pub prox_mu: f64,
    /// Contrast against every known global class instead of only the
    /// classes present in the batch.
    pub contrast_all: bool,
    /// Margin-free variant: pull samples straight toward their own
    /// prototype.
    pub pull_to_prototype: bool,
    /// Use the 1/N convention for σ instead of Bessel's 1/(N−1).
    pub population_std: bool,
    /// Restrict the inter loss to batch classes that have a global
    /// prototype instead of erroring on gaps. The protocol layer enables
    /// this so partial prototype submission stays executable; the strict
    /// default keeps missing prototypes a protocol error.
    #[serde(default)]
    pub skip_uncovered_classes: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mu1: 0.0,
            mu2: 0.0,
            margin: 0.0,
            lite_n: None,
            prox_mu: 0.0,
            contrast_all: false,
            pull_to_prototype: false,
            population_std: false,
            skip_uncovered_classes: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mu1", self.mu1), ("mu2", self.mu2), ("margin", self.margin), ("prox_mu", self.prox_mu)] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if self.lite_n == Some(0) {
            return Err(Error::Config("lite_n must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-class batch statistics captured during standardization.
#[derive(Debug, Clone)]
pub struct ClassStats {
    pub class: usize,
    pub count: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// One class's standardized rows on the tape.
#[derive(Debug)]
pub struct StandardizedClass {
    pub class: usize,
    pub z_hat: TensorId,
    pub stats: ClassStats,
}

/// Standardization outcome: classes with at least two batch samples, and
/// the classes excluded for having fewer.
#[derive(Debug)]
pub struct Standardized {
    pub classes: Vec<StandardizedClass>,
    pub excluded: Vec<usize>,
}

fn rows_by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        map.entry(l).or_default().push(i);
    }
    map
}

fn check_batch(tape: &Tape, z: TensorId, labels: &[usize]) -> Result<(usize, usize)> {
    let shape = tape.shape(z);
    if shape.len() != 2 {
        return Err(Error::Dimension(format!("feature batch must be a matrix, got shape {shape:?}")));
    }
    if shape[0] != labels.len() {
        return Err(Error::Dimension(format!(
            "{} labels for {} feature rows",
            labels.len(),
            shape[0]
        )));
    }
    Ok((shape[0], shape[1]))
}

/// `ẑ = (z − μ_c) / max(σ_c, ε)` per class over the batch, differentiable
/// end to end. Classes with fewer than two samples are excluded, not errors.
pub fn standardize_per_class(
    tape: &mut Tape,
    z: TensorId,
    labels: &[usize],
    population_std: bool,
) -> Result<Standardized> {
    standardize_with_floor(tape, z, labels, population_std, SIGMA_FLOOR)
}

/// Internal variant with an explicit floor so tests can demonstrate what
/// happens when the floor is removed.
pub(crate) fn standardize_with_floor(
    tape: &mut Tape,
    z: TensorId,
    labels: &[usize],
    population_std: bool,
    floor: f64,
) -> Result<Standardized> {
    check_batch(tape, z, labels)?;
    let mut classes = Vec::new();
    let mut excluded = Vec::new();
    for (class, rows) in rows_by_class(labels) {
        let n_c = rows.len();
        if n_c < 2 {
            excluded.push(class);
            continue;
        }
        let rows_t = tape.gather_rows(z, &rows)?;
        let mu = tape.mean_axis(rows_t, 0)?;
        let mu_rows = tape.repeat_rows(mu, n_c)?;
        let centered = tape.sub(rows_t, mu_rows)?;
        let sq = tape.mul(centered, centered)?;
        let sq_sum = tape.sum_axis(sq, 0)?;
        let denom = if population_std { n_c } else { n_c - 1 };
        let var = tape.scale(sq_sum, 1.0 / denom as f64)?;
        let sigma = tape.sqrt(var)?;
        // max(σ, ε) expressed through the hinge so it stays differentiable.
        let shifted = tape.add_scalar(sigma, -floor)?;
        let clamped = tape.max_zero(shifted)?;
        let floored = tape.add_scalar(clamped, floor)?;
        let sigma_rows = tape.repeat_rows(floored, n_c)?;
        let z_hat = tape.div(centered, sigma_rows)?;
        classes.push(StandardizedClass {
            class,
            z_hat,
            stats: ClassStats {
                class,
                count: n_c,
                mean: tape.value(mu).to_vec(),
                std: tape.value(sigma).to_vec(),
            },
        });
    }
    Ok(Standardized { classes, excluded })
}

/// A class covariance matrix snapshot (plain values, no tape).
#[derive(Debug, Clone)]
pub struct CovMatrix {
    pub class: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl CovMatrix {
    pub fn frobenius_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Covariance matrices `M_c = ẑᵀẑ / (N_c − 1)` of the standardized classes,
/// evaluated through the same tape path the losses use.
pub fn class_cov_matrices(z: &[f64], dim: usize, labels: &[usize], population_std: bool) -> Result<Vec<CovMatrix>> {
    let mut tape = Tape::new();
    let zt = tape.constant(z.to_vec(), vec![labels.len(), dim])?;
    let std = standardize_per_class(&mut tape, zt, labels, population_std)?;
    let mut out = Vec::with_capacity(std.classes.len());
    for sc in &std.classes {
        let trans = tape.transpose(sc.z_hat)?;
        let outer = tape.matmul(trans, sc.z_hat)?;
        let m = tape.scale(outer, 1.0 / (sc.stats.count - 1) as f64)?;
        out.push(CovMatrix { class: sc.class, dim, values: tape.value(m).to_vec() });
    }
    Ok(out)
}

/// Outcome of the intra-class loss; `no_class_warning` flags a batch where
/// every class had fewer than two samples (loss is a plain zero then).
#[derive(Debug)]
pub struct IntraOutcome {
    pub loss: TensorId,
    pub included: Vec<usize>,
    pub no_class_warning: bool,
}

/// Mean over included classes of `||M_c||²_F`.
pub fn intra_loss(tape: &mut Tape, z: TensorId, labels: &[usize], population_std: bool) -> Result<IntraOutcome> {
    let std = standardize_per_class(tape, z, labels, population_std)?;
    if std.classes.is_empty() {
        return Ok(IntraOutcome {
            loss: tape.scalar(0.0)?,
            included: Vec::new(),
            no_class_warning: true,
        });
    }
    let mut acc: Option<TensorId> = None;
    let mut included = Vec::with_capacity(std.classes.len());
    for sc in &std.classes {
        let trans = tape.transpose(sc.z_hat)?;
        let outer = tape.matmul(trans, sc.z_hat)?;
        let m = tape.scale(outer, 1.0 / (sc.stats.count - 1) as f64)?;
        let msq = tape.mul(m, m)?;
        let fro = tape.sum(msq)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, fro)?,
            None => fro,
        });
        included.push(sc.class);
    }
    let loss = tape.scale(acc.unwrap(), 1.0 / included.len() as f64)?;
    Ok(IntraOutcome { loss, included, no_class_warning: false })
}

/// `|Σ(λ_i − λ̄)² − (||M||²_F − d)|`, the residual of the eigenvalue
/// identity. A validation instrument, not a training loss; exact (up to
/// solver tolerance) when trace(M) = d.
pub fn lemma1_residual(m: &CovMatrix) -> Result<f64> {
    let eig = analysis::sym_eigenvalues(&m.values, m.dim)?;
    let mean = eig.iter().sum::<f64>() / m.dim as f64;
    let lhs: f64 = eig.iter().map(|l| (l - mean) * (l - mean)).sum();
    let rhs = m.frobenius_sq() - m.dim as f64;
    Ok((lhs - rhs).abs())
}

/// Per-class feature centroids keyed by class id.
#[derive(Debug, Clone, Default)]
pub struct PrototypeSet {
    dim: usize,
    map: BTreeMap<usize, Vec<f64>>,
}

impl PrototypeSet {
    pub fn new(dim: usize) -> Self {
        Self { dim, map: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn insert(&mut self, class: usize, proto: Vec<f64>) -> Result<()> {
        if proto.len() != self.dim {
            return Err(Error::Dimension(format!(
                "prototype for class {class} has length {}, expected {}",
                proto.len(),
                self.dim
            )));
        }
        self.map.insert(class, proto);
        Ok(())
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.map.get(&class).map(|v| v.as_slice())
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.map.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.map.iter().map(|(&c, v)| (c, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// A client's prototypes plus its per-class sample counts, as submitted to
/// the server.
#[derive(Debug, Clone)]
pub struct LocalPrototypes {
    pub set: PrototypeSet,
    pub counts: BTreeMap<usize, usize>,
}

/// Per-class mean of representations, computed over a client's full shard
/// in evaluation mode.
pub fn local_prototypes(z: &[f64], dim: usize, labels: &[usize]) -> Result<LocalPrototypes> {
    if z.len() != labels.len() * dim {
        return Err(Error::Dimension(format!(
            "feature buffer length {} is not {} rows of width {dim}",
            z.len(),
            labels.len()
        )));
    }
    let mut set = PrototypeSet::new(dim);
    let mut counts = BTreeMap::new();
    for (class, rows) in rows_by_class(labels) {
        let mut mean = vec![0.0; dim];
        for &r in &rows {
            for j in 0..dim {
                mean[j] += z[r * dim + j];
            }
        }
        for v in &mut mean {
            *v /= rows.len() as f64;
        }
        set.insert(class, mean)?;
        counts.insert(class, rows.len());
    }
    Ok(LocalPrototypes { set, counts })
}

fn distances_to(tape: &mut Tape, rows_t: TensorId, n: usize, proto: &[f64]) -> Result<TensorId> {
    let g = tape.constant(proto.to_vec(), vec![proto.len()])?;
    let tiled = tape.repeat_rows(g, n)?;
    let diff = tape.sub(rows_t, tiled)?;
    let sq = tape.mul(diff, diff)?;
    let row_sums = tape.sum_axis(sq, 1)?;
    tape.sqrt(row_sums)
}

/// Prototype-margin loss: mean over ordered pairs of distinct batch classes
/// of `D_{ci,cj} = (1/N^{ci}) Σ_n max{‖z_n − g_ci‖ − ‖z_n − g_cj‖ + margin, 0}`.
///
/// With a single class in the batch the loss is 0. `contrast_all` draws the
/// contrast classes from every class known to `globals` instead of the
/// batch; `pull_to_prototype` replaces the hinge by the plain distance to
/// the own prototype.
pub fn inter_loss(
    tape: &mut Tape,
    z: TensorId,
    labels: &[usize],
    globals: &PrototypeSet,
    cfg: &LossConfig,
) -> Result<TensorId> {
    check_batch(tape, z, labels)?;
    let mut by_class = rows_by_class(labels);
    if cfg.skip_uncovered_classes {
        by_class.retain(|class, _| globals.get(*class).is_some());
    }
    if by_class.len() < 2 {
        return tape.scalar(0.0);
    }
    let need = |class: usize| -> Result<&[f64]> {
        globals
            .get(class)
            .ok_or_else(|| Error::Protocol(format!("no global prototype for class {class}")))
    };

    let mut acc: Option<TensorId> = None;
    let mut pairs = 0usize;
    for (&ci, rows) in &by_class {
        let n_i = rows.len();
        let rows_t = tape.gather_rows(z, rows)?;
        let own_proto = need(ci)?.to_vec();
        let d_own = distances_to(tape, rows_t, n_i, &own_proto)?;
        if cfg.pull_to_prototype {
            // Margin-free variant: the pair sum collapses to the mean
            // distance to the own prototype, repeated for every contrast.
            let d_i = tape.mean(d_own)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, d_i)?,
                None => d_i,
            });
            pairs += 1;
            continue;
        }
        let contrast: Vec<usize> = if cfg.contrast_all {
            globals.classes().filter(|&c| c != ci).collect()
        } else {
            by_class.keys().copied().filter(|&c| c != ci).collect()
        };
        for cj in contrast {
            let other_proto = need(cj)?.to_vec();
            let d_other = distances_to(tape, rows_t, n_i, &other_proto)?;
            let gap = tape.sub(d_own, d_other)?;
            let shifted = tape.add_scalar(gap, cfg.margin)?;
            let hinge = tape.max_zero(shifted)?;
            let d_ij = tape.mean(hinge)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, d_ij)?,
                None => d_ij,
            });
            pairs += 1;
        }
    }
    match acc {
        Some(a) if pairs > 0 => tape.scale(a, 1.0 / pairs as f64),
        _ => tape.scalar(0.0),
    }
}

/// [`inter_loss`] restricted to a uniform random subset of
/// `min(lite_n, n)` batch rows; per-class averages use the subset counts.
pub fn inter_loss_lite(
    tape: &mut Tape,
    z: TensorId,
    labels: &[usize],
    globals: &PrototypeSet,
    cfg: &LossConfig,
    seed: u64,
) -> Result<TensorId> {
    let lite_n = cfg
        .lite_n
        .ok_or_else(|| Error::Contract("inter_loss_lite requires lite_n".into()))?;
    if lite_n == 0 {
        return Err(Error::Contract("lite_n must be at least 1".into()));
    }
    let n = labels.len();
    if lite_n >= n {
        return inter_loss(tape, z, labels, globals, cfg);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, lite_n).into_vec();
    picked.sort_unstable();
    let sub_labels: Vec<usize> = picked.iter().map(|&i| labels[i]).collect();
    let z_sub = tape.gather_rows(z, &picked)?;
    inter_loss(tape, z_sub, &sub_labels, globals, cfg)
}

/// The assembled objective and snapshots of its parts.
#[derive(Debug)]
pub struct TotalLoss {
    pub total: TensorId,
    pub z: TensorId,
    pub logits: TensorId,
    pub cls_value: f64,
    pub intra_value: f64,
    pub inter_value: f64,
    pub prox_value: f64,
}

/// `cls + μ1·intra + μ2·inter + (prox_mu/2)·‖w − w_global‖²` over one batch.
///
/// Zero-weight terms are skipped entirely: with μ1 = μ2 = prox_mu = 0 the
/// result is bit-identical to the classification loss alone, and no
/// prototypes are required when μ2 = 0.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    layout: &ParamLayout,
    params: TensorId,
    batch: TensorId,
    labels: &[usize],
    globals: Option<&PrototypeSet>,
    global_params: Option<&[f64]>,
    cfg: &LossConfig,
    lite_seed: u64,
) -> Result<TotalLoss> {
    cfg.validate()?;
    let (z, logits) = model::forward(tape, layout, params, batch)?;
    let cls = tape.softmax_cross_entropy(logits, labels)?;
    let cls_value = tape.scalar_value(cls);
    let mut total = cls;
    let mut intra_value = 0.0;
    let mut inter_value = 0.0;
    let mut prox_value = 0.0;

    if cfg.mu1 > 0.0 {
        let intra = intra_loss(tape, z, labels, cfg.population_std)?;
        intra_value = tape.scalar_value(intra.loss);
        let weighted = tape.scale(intra.loss, cfg.mu1)?;
        total = tape.add(total, weighted)?;
    }
    if cfg.mu2 > 0.0 {
        let globals = globals.ok_or_else(|| {
            Error::Protocol("inter loss requested (mu2 > 0) but no global prototypes are available".into())
        })?;
        let inter = if cfg.lite_n.is_some() {
            inter_loss_lite(tape, z, labels, globals, cfg, lite_seed)?
        } else {
            inter_loss(tape, z, labels, globals, cfg)?
        };
        inter_value = tape.scalar_value(inter);
        let weighted = tape.scale(inter, cfg.mu2)?;
        total = tape.add(total, weighted)?;
    }
    if cfg.prox_mu > 0.0 {
        let reference = global_params.ok_or_else(|| {
            Error::Contract("proximal term requested (prox_mu > 0) but no global parameters given".into())
        })?;
        if reference.len() != layout.total {
            return Err(Error::Dimension(format!(
                "global parameter vector length {} does not match layout length {}",
                reference.len(),
                layout.total
            )));
        }
        let w_ref = tape.constant(reference.to_vec(), vec![layout.total])?;
        let diff = tape.sub(params, w_ref)?;
        let sq = tape.mul(diff, diff)?;
        let ssq = tape.sum(sq)?;
        prox_value = tape.scalar_value(ssq) * cfg.prox_mu / 2.0;
        let weighted = tape.scale(ssq, cfg.prox_mu / 2.0)?;
        total = tape.add(total, weighted)?;
    }

    Ok(TotalLoss { total, z, logits, cls_value, intra_value, inter_value, prox_value })
}
