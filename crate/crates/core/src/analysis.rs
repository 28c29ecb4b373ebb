//! Verification instruments: a symmetric eigensolver, the eigenvalue
//! collapse metric, the closed-form classifier-shift construction, and the
//! prototype-convergence recursion simulator.

use crate::data::Dataset;
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const JACOBI_OFF_TOLERANCE: f64 = 1e-12;
const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted
/// descending. Sweeps continue until the off-diagonal Frobenius mass drops
/// below 1e-12.
pub fn sym_eigenvalues(matrix: &[f64], d: usize) -> Result<Vec<f64>> {
    if matrix.len() != d * d {
        return Err(Error::Dimension(format!(
            "matrix buffer length {} is not {d}x{d}",
            matrix.len()
        )));
    }
    for p in 0..d {
        for q in (p + 1)..d {
            let diff = (matrix[p * d + q] - matrix[q * d + p]).abs();
            if diff > SYMMETRY_TOLERANCE {
                return Err(Error::Contract(format!(
                    "matrix is not symmetric: |a[{p},{q}] - a[{q},{p}]| = {diff:e}"
                )));
            }
        }
    }
    let mut a = matrix.to_vec();
    // Symmetrize exactly so both triangles agree during rotations.
    for p in 0..d {
        for q in (p + 1)..d {
            let avg = 0.5 * (a[p * d + q] + a[q * d + p]);
            a[p * d + q] = avg;
            a[q * d + p] = avg;
        }
    }

    let off_mass = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for p in 0..d {
            for q in 0..d {
                if p != q {
                    s += a[p * d + q] * a[p * d + q];
                }
            }
        }
        s
    };

    let max_sweeps = 100;
    for _ in 0..max_sweeps {
        if off_mass(&a) < JACOBI_OFF_TOLERANCE {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }

    let mut eig: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(eig)
}

/// Variance of the top-k eigenvalues around their own mean, divided by
/// `normalizer`: `(1/normalizer) Σ_{i≤k} (λ_i − mean_topk)²`. The round
/// reports use k = 50 clamped to d and normalizer = 128.
pub fn eigvar_topk(matrix: &[f64], d: usize, k: usize, normalizer: f64) -> Result<f64> {
    if k == 0 || k > d {
        return Err(Error::Contract(format!("top-k count {k} out of range for dimension {d}")));
    }
    if normalizer.is_nan() || normalizer <= 0.0 {
        return Err(Error::Contract(format!("normalizer must be positive, got {normalizer}")));
    }
    let eig = sym_eigenvalues(matrix, d)?;
    let top = &eig[..k];
    let mean = top.iter().sum::<f64>() / k as f64;
    Ok(top.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / normalizer)
}

/// The closed-form classifier matrices of the three-disk construction:
/// the all-classes optimum `w_star`, the three two-class client optima, and
/// their average `w_hat`.
#[derive(Debug, Clone)]
pub struct MotivationWeights {
    pub w_star: [[f64; 2]; 3],
    pub clients: [[[f64; 2]; 3]; 3],
    pub w_hat: [[f64; 2]; 3],
}

pub fn motivation_weights() -> MotivationWeights {
    let s3 = 3.0f64.sqrt();
    MotivationWeights {
        w_star: [[1.0, 0.0], [-s3 / 2.0, 0.5], [-s3 / 2.0, -0.5]],
        clients: [
            [[0.5, -s3 / 2.0], [-0.5, s3 / 2.0], [0.0, 0.0]],
            [[0.5, s3 / 2.0], [0.0, 0.0], [-0.5, -s3 / 2.0]],
            [[0.0, 0.0], [0.0, 1.0], [0.0, -1.0]],
        ],
        w_hat: [
            [1.0 / 3.0, 0.0],
            [-1.0 / 6.0, (s3 + 2.0) / 6.0],
            [-1.0 / 6.0, -(s3 + 2.0) / 6.0],
        ],
    }
}

/// Angle between two nonzero vectors, in degrees.
pub fn angle_between(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Dimension(format!(
            "angle between vectors of different lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("angle of a zero vector is undefined".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let cos = (dot / (nu * nv)).clamp(-1.0, 1.0);
    Ok(cos.acos().to_degrees())
}

/// How client data is assembled for the empirical shift measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftVariant {
    /// Three clients holding the class pairs (0,1), (0,2), (1,2).
    Pcdd,
    /// Same pairs, plus the missing class's sample centroid carrying the
    /// weight of a full class.
    CentroidAugmented,
    /// Every client sees all classes.
    Iid,
}

struct WeightedSamples {
    xs: Vec<[f64; 2]>,
    labels: Vec<usize>,
    weights: Vec<f64>,
}

/// Bias-free one-vs-rest logistic regression on 2-d inputs, trained per
/// class by damped Newton to gradient norm <= 1e-6.
///
/// Each present class gets a binary separator (through the origin) against
/// the client's other samples; rows of absent classes stay zero, matching
/// the printed two-class client optima whose missing rows are zero.
fn train_logistic(data: &WeightedSamples, weight_decay: f64, with_bias: bool) -> Result<[[f64; 2]; 3]> {
    let mut present: Vec<usize> = data.labels.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Contract("logistic training needs at least two classes".into()));
    }
    let total_weight: f64 = data.weights.iter().sum();
    if total_weight <= 0.0 {
        return Err(Error::Contract("logistic training needs positive sample weight".into()));
    }
    let np = if with_bias { 3 } else { 2 };

    let mut out = [[0.0; 2]; 3];
    for &class in &present {
        let mut w = vec![0.0f64; np];
        let grad_hess = |w: &[f64]| {
            let mut grad = vec![0.0f64; np];
            let mut hess = vec![vec![0.0f64; np]; np];
            for ((x, &y), &wt) in data.xs.iter().zip(&data.labels).zip(&data.weights) {
                let target = if y == class { 1.0 } else { 0.0 };
                let xb = [x[0], x[1], 1.0];
                let mut logit = 0.0;
                for i in 0..np {
                    logit += w[i] * xb[i];
                }
                let p = 1.0 / (1.0 + (-logit).exp());
                let scale = wt / total_weight;
                let err = scale * (p - target);
                let curv = scale * p * (1.0 - p);
                for i in 0..np {
                    grad[i] += err * xb[i];
                    for j in 0..np {
                        hess[i][j] += curv * xb[i] * xb[j];
                    }
                }
            }
            // The bias, when present, is not decayed.
            for i in 0..2 {
                grad[i] += weight_decay * w[i];
                hess[i][i] += weight_decay;
            }
            if np == 3 {
                hess[2][2] += 1e-12;
            }
            (grad, hess)
        };

        let mut converged = false;
        for _ in 0..500 {
            let (grad, hess) = grad_hess(&w);
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if gnorm <= 1e-6 {
                converged = true;
                break;
            }
            // Solve H·step = grad with partial pivoting.
            let mut a = hess;
            let mut b = grad;
            for col in 0..np {
                let mut pivot = col;
                for r in (col + 1)..np {
                    if a[r][col].abs() > a[pivot][col].abs() {
                        pivot = r;
                    }
                }
                a.swap(col, pivot);
                b.swap(col, pivot);
                let diag = a[col][col];
                if diag.abs() < 1e-300 {
                    return Err(Error::Contract("singular Hessian in logistic training".into()));
                }
                let pivot_row = a[col].clone();
                for r in (col + 1)..np {
                    let f = a[r][col] / diag;
                    for (cc, &upper) in pivot_row.iter().enumerate().skip(col) {
                        a[r][cc] -= f * upper;
                    }
                    b[r] -= f * b[col];
                }
            }
            let mut step = vec![0.0f64; np];
            for col in (0..np).rev() {
                let mut s = b[col];
                for cc in (col + 1)..np {
                    s -= a[col][cc] * step[cc];
                }
                step[col] = s / a[col][col];
            }
            // Halve the step until the gradient norm improves.
            let mut alpha = 1.0;
            for _ in 0..40 {
                let trial: Vec<f64> = w.iter().zip(&step).map(|(wi, si)| wi - alpha * si).collect();
                let (tg, _) = grad_hess(&trial);
                let tnorm = tg.iter().map(|g| g * g).sum::<f64>().sqrt();
                if tnorm < gnorm {
                    w = trial;
                    break;
                }
                alpha *= 0.5;
            }
        }
        if !converged {
            return Err(Error::Contract(
                "logistic training did not reach gradient norm 1e-6 in 500 Newton iterations".into(),
            ));
        }
        out[class] = [w[0], w[1]];
    }
    Ok(out)
}

fn class_centroid(ds: &Dataset, class: usize) -> [f64; 2] {
    let mut sum = [0.0f64; 2];
    let mut count = 0usize;
    for i in 0..ds.len() {
        if ds.labels[i] == class {
            let row = ds.feature_row(i);
            sum[0] += row[0];
            sum[1] += row[1];
            count += 1;
        }
    }
    [sum[0] / count as f64, sum[1] / count as f64]
}

/// Trains per-client linear classifiers on the three-disk dataset, averages
/// them by sample count, and returns the angle in degrees between the
/// aggregated class-1 row and the closed-form optimum's class-1 row.
pub fn empirical_shift(ds: &Dataset, variant: ShiftVariant, seed: u64) -> Result<f64> {
    empirical_shift_wd(ds, variant, seed, SHIFT_WEIGHT_DECAY)
}

/// Weight decay used by [`empirical_shift`].
pub const SHIFT_WEIGHT_DECAY: f64 = 1e-5;

/// [`empirical_shift`] with an explicit weight decay.
pub fn empirical_shift_wd(ds: &Dataset, variant: ShiftVariant, seed: u64, weight_decay: f64) -> Result<f64> {
    empirical_shift_cfg(ds, variant, seed, weight_decay, false, false)
}

/// [`empirical_shift`] with every knob exposed (weight decay, trained bias,
/// row normalization before aggregation).
pub fn empirical_shift_cfg(
    ds: &Dataset,
    variant: ShiftVariant,
    seed: u64,
    weight_decay: f64,
    with_bias: bool,
    normalize_rows: bool,
) -> Result<f64> {
    if ds.num_classes != 3 || ds.input_dim != 2 {
        return Err(Error::Contract(
            "empirical_shift expects the three-class two-dimensional construction".into(),
        ));
    }
    let pairs = [(0usize, 1usize), (0, 2), (1, 2)];
    let n_per_class = ds.labels.iter().filter(|&&l| l == 0).count();

    let mut aggregated = [[0.0f64; 2]; 3];
    let mut total_weight = 0.0;
    for (k, &(ca, cb)) in pairs.iter().enumerate() {
        let mut xs = Vec::new();
        let mut labels = Vec::new();
        let mut weights = Vec::new();
        match variant {
            ShiftVariant::Pcdd | ShiftVariant::CentroidAugmented => {
                for i in 0..ds.len() {
                    let l = ds.labels[i];
                    if l == ca || l == cb {
                        let row = ds.feature_row(i);
                        xs.push([row[0], row[1]]);
                        labels.push(l);
                        weights.push(1.0);
                    }
                }
                if variant == ShiftVariant::CentroidAugmented {
                    let missing = (0..3).find(|c| *c != ca && *c != cb).unwrap();
                    xs.push(class_centroid(ds, missing));
                    labels.push(missing);
                    // The centroid stands in for the whole class, so it
                    // carries a full class worth of weight.
                    weights.push(n_per_class as f64);
                }
            }
            ShiftVariant::Iid => {
                let shards = crate::data::partition_iid(ds, 3, seed)?;
                for &i in &shards[k].indices {
                    let row = ds.feature_row(i);
                    xs.push([row[0], row[1]]);
                    labels.push(ds.labels[i]);
                    weights.push(1.0);
                }
            }
        }
        let client_weight: f64 = weights.iter().sum();
        // Center each client's features on its own (weighted) mean; the
        // bias-free separators then pass through the data center, matching
        // the closed-form planes.
        let wsum: f64 = weights.iter().sum();
        let mut mean = [0.0f64; 2];
        for (x, &wt) in xs.iter().zip(&weights) {
            mean[0] += wt * x[0];
            mean[1] += wt * x[1];
        }
        mean[0] /= wsum;
        mean[1] /= wsum;
        for x in xs.iter_mut() {
            x[0] -= mean[0];
            x[1] -= mean[1];
        }
        let mut w = train_logistic(&WeightedSamples { xs, labels, weights }, weight_decay, with_bias)?;
        if normalize_rows {
            for row in w.iter_mut() {
                let norm = (row[0] * row[0] + row[1] * row[1]).sqrt();
                if norm > 0.0 {
                    row[0] /= norm;
                    row[1] /= norm;
                }
            }
        }
        for c in 0..3 {
            aggregated[c][0] += client_weight * w[c][0];
            aggregated[c][1] += client_weight * w[c][1];
        }
        total_weight += client_weight;
    }
    for row in aggregated.iter_mut() {
        row[0] /= total_weight;
        row[1] /= total_weight;
    }

    let reference = motivation_weights().w_star;
    angle_between(&aggregated[1], &reference[1])
}

/// Inputs of the convergence recursion simulation.
#[derive(Debug, Clone, Copy)]
pub struct TheoremSimConfig {
    /// Optimal coordinate a*.
    pub a_star: f64,
    /// Magnitude bound G on a*, the iterates, and interference.
    pub g_bound: f64,
    /// Own-client prototype weight p_k, in (0, 1).
    pub p_k: f64,
    /// Supporting-clients weight.
    pub p_hat: f64,
    /// Slack bound on the per-round perturbation, delta >= 0.
    pub delta: f64,
    /// Number of recursion steps.
    pub steps: usize,
    pub seed: u64,
}

impl TheoremSimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_k > 0.0 && self.p_k < 1.0) {
            return Err(Error::Domain(format!("p_k must lie in (0, 1), got {}", self.p_k)));
        }
        if self.p_hat < 0.0 || self.p_hat + self.p_k > 1.0 + 1e-12 {
            return Err(Error::Domain(format!(
                "p_hat must satisfy 0 <= p_hat and p_hat + p_k <= 1, got p_hat {} p_k {}",
                self.p_hat, self.p_k
            )));
        }
        if self.delta < 0.0 {
            return Err(Error::Domain(format!("delta must be nonnegative, got {}", self.delta)));
        }
        if self.g_bound.is_nan() || self.g_bound <= 0.0 {
            return Err(Error::Domain(format!("G must be positive, got {}", self.g_bound)));
        }
        if self.a_star.abs() > self.g_bound {
            return Err(Error::Domain(format!(
                "|a_star| = {} exceeds G = {}",
                self.a_star.abs(),
                self.g_bound
            )));
        }
        Ok(())
    }
}

/// One simulated trajectory of the recursion
/// `r_{t+1} = p̂·a* + p_k·r_t + (1 − p̂ − p_k)·σ'_t + ξ_t`
/// with ξ uniform in [−δ, δ] and σ' uniform in [−G, G], together with the
/// per-step bound `2(1 − p̂·Γ_t)·G + δ·Γ_t` where Γ_t = (1 − p_k^t)/(1 − p_k).
#[derive(Debug, Clone)]
pub struct TheoremSim {
    pub trajectory: Vec<f64>,
    pub bounds: Vec<f64>,
    pub satisfied: bool,
}

pub fn theorem1_simulate(cfg: &TheoremSimConfig) -> Result<TheoremSim> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let g = cfg.g_bound;
    let interference = 1.0 - cfg.p_hat - cfg.p_k;
    let mut r = rng.gen_range(-g..=g);
    let mut trajectory = vec![r];
    let mut bounds = vec![2.0 * g];
    let mut satisfied = true;

    for t in 1..=cfg.steps {
        let sigma = rng.gen_range(-g..=g);
        let xi = if cfg.delta > 0.0 { rng.gen_range(-cfg.delta..=cfg.delta) } else { 0.0 };
        r = cfg.p_hat * cfg.a_star + cfg.p_k * r + interference * sigma + xi;
        let gamma = (1.0 - cfg.p_k.powi(t as i32)) / (1.0 - cfg.p_k);
        let bound = 2.0 * (1.0 - cfg.p_hat * gamma) * g + cfg.delta * gamma;
        trajectory.push(r);
        bounds.push(bound);
        if (r - cfg.a_star).abs() > bound + 1e-9 {
            satisfied = false;
        }
    }
    Ok(TheoremSim { trajectory, bounds, satisfied })
}
