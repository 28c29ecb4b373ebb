//! The property-verification battery behind `fedmr verify`: eigenvalue
//! identity, gradient checks, the classifier-shift construction, the
//! convergence recursion, protocol reductions and the lite-sampling
//! degenerate case. Each check is independent and reports pass/fail.

use crate::analysis::{self, ShiftVariant, TheoremSimConfig};
use crate::data;
use crate::error::Result;
use crate::federation::{self, FedConfig};
use crate::losses::{self, LossConfig, PrototypeSet};
use crate::model::{self, MlpSpec};
use crate::tensor::{SgdConfig, Tape, TensorId};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn ok(name: &'static str, detail: String) -> Self {
        Self { name, passed: true, detail }
    }

    fn fail(name: &'static str, detail: String) -> Self {
        Self { name, passed: false, detail }
    }
}

fn outcome(name: &'static str, passed: bool, detail: String) -> Check {
    if passed {
        Check::ok(name, detail)
    } else {
        Check::fail(name, detail)
    }
}

fn guard(name: &'static str, run: impl FnOnce() -> Result<Check>) -> Check {
    match run() {
        Ok(check) => check,
        Err(e) => Check::fail(name, format!("errored: {e}")),
    }
}

/// |Σ(λ−λ̄)² − (||M||²_F − d)| ≤ 1e-9·d over random standardized batches.
fn lemma1_identity() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1e44a);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.gen_range(5..=64);
        let d = rng.gen_range(2..=16);
        let z: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let labels = vec![0usize; n];
        let mats = losses::class_cov_matrices(&z, d, &labels, false)?;
        let residual = losses::lemma1_residual(&mats[0])? / d as f64;
        worst = worst.max(residual);
    }
    Ok(outcome(
        "lemma1-identity",
        worst <= 1e-9,
        format!("worst residual/d = {worst:.3e} over 200 batches (threshold 1e-9)"),
    ))
}

fn fd_check(
    name: &'static str,
    build: impl Fn(&mut Tape, &[f64]) -> Result<(TensorId, TensorId)>,
    x0: &[f64],
    tolerance: f64,
) -> Result<Check> {
    let eval = |x: &[f64]| -> Result<(Tape, TensorId, TensorId)> {
        let mut tape = Tape::new();
        let (leaf, loss) = build(&mut tape, x)?;
        Ok((tape, leaf, loss))
    };
    let (mut tape, leaf, loss) = eval(x0)?;
    tape.backward(loss)?;
    let grad = tape.grad(leaf).to_vec();
    let h = 1e-5;
    let mut probe = x0.to_vec();
    let mut max_rel: f64 = 0.0;
    for i in 0..x0.len() {
        probe[i] = x0[i] + h;
        let (tp, _, lp) = eval(&probe)?;
        probe[i] = x0[i] - h;
        let (tm, _, lm) = eval(&probe)?;
        probe[i] = x0[i];
        let fd = (tp.scalar_value(lp) - tm.scalar_value(lm)) / (2.0 * h);
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(outcome(
        name,
        max_rel <= tolerance,
        format!("max relative gradient error {max_rel:.3e} (threshold {tolerance:.0e})"),
    ))
}

fn gradient_checks(checks: &mut Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x96ad);
    let labels8 = [0usize, 0, 0, 0, 1, 1, 1, 1];
    let z0: Vec<f64> = (0..8 * 4).map(|_| rng.gen_range(-2.0..2.0)).collect();
    checks.push(guard("grad-intra", || {
        fd_check(
            "grad-intra",
            |tape, z| {
                let id = tape.leaf(z.to_vec(), vec![8, 4], true)?;
                let out = losses::intra_loss(tape, id, &labels8, false)?;
                Ok((id, out.loss))
            },
            &z0,
            1e-5,
        )
    }));

    let mut globals = PrototypeSet::new(3);
    globals.insert(0, vec![0.8, 0.1, -0.2]).unwrap();
    globals.insert(1, vec![-0.5, 0.6, 0.3]).unwrap();
    let labels6 = [0usize, 0, 0, 1, 1, 1];
    let zi: Vec<f64> = (0..6 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for (name, margin) in [("grad-inter-margin0", 0.0), ("grad-inter-margin05", 0.5)] {
        let cfg = LossConfig { margin, ..LossConfig::default() };
        let globals = globals.clone();
        let zi = zi.clone();
        checks.push(guard(name, move || {
            fd_check(
                name,
                |tape, z| {
                    let id = tape.leaf(z.to_vec(), vec![6, 3], true)?;
                    let loss = losses::inter_loss(tape, id, &labels6, &globals, &cfg)?;
                    Ok((id, loss))
                },
                &zi,
                1e-5,
            )
        }));
    }

    checks.push(guard("grad-total", || {
        let spec = MlpSpec::new(vec![2, 4, 3, 3], 11)?;
        let params = model::init(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0xf00d);
        let n = 9;
        let feats: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let mut globals = PrototypeSet::new(3);
        globals.insert(0, vec![0.4, 0.1, 0.0])?;
        globals.insert(1, vec![-0.3, 0.5, 0.2])?;
        globals.insert(2, vec![0.1, -0.4, 0.6])?;
        let reference: Vec<f64> = params.values.iter().map(|v| v * 0.95).collect();
        let cfg = LossConfig {
            mu1: 0.05,
            mu2: 0.01,
            margin: 0.2,
            prox_mu: 0.05,
            ..LossConfig::default()
        };
        let layout = params.layout.clone();
        fd_check(
            "grad-total",
            move |tape, w| {
                let p = tape.leaf(w.to_vec(), vec![layout.total], true)?;
                let b = tape.constant(feats.clone(), vec![n, 2])?;
                let out = losses::total_loss(
                    tape,
                    &layout,
                    p,
                    b,
                    &labels,
                    Some(&globals),
                    Some(&reference),
                    &cfg,
                    0,
                )?;
                Ok((p, out.total))
            },
            &params.values,
            1e-5,
        )
    }));
}

fn motivation_checks(checks: &mut Vec<Check>) {
    checks.push(guard("motivation-analytic-45deg", || {
        let w = analysis::motivation_weights();
        let angle = analysis::angle_between(&w.w_star[1], &w.w_hat[1])?;
        Ok(outcome(
            "motivation-analytic-45deg",
            (angle - 45.0).abs() <= 1e-9,
            format!("angle {angle:.12} degrees"),
        ))
    }));
    checks.push(guard("motivation-empirical-shift", || {
        let mut all_ok = true;
        let mut details = Vec::new();
        for seed in 0..3u64 {
            let ds = data::gen_motivation(1500, 500 + seed)?;
            let pcdd = analysis::empirical_shift(&ds, ShiftVariant::Pcdd, seed)?;
            let centroid = analysis::empirical_shift(&ds, ShiftVariant::CentroidAugmented, seed)?;
            let iid = analysis::empirical_shift(&ds, ShiftVariant::Iid, seed)?;
            let ok = (35.0..=55.0).contains(&pcdd) && centroid <= 2.0 && iid <= 5.0;
            all_ok &= ok;
            details.push(format!("seed {seed}: pcdd {pcdd:.1} centroid {centroid:.2} iid {iid:.2}"));
        }
        Ok(outcome("motivation-empirical-shift", all_ok, details.join("; ")))
    }));
}

fn theorem_checks(checks: &mut Vec<Check>) {
    checks.push(guard("theorem-bound-monte-carlo", || {
        let mut rng = ChaCha8Rng::seed_from_u64(0x7bed);
        let mut violations = 0usize;
        for trial in 0..1000u64 {
            let g = rng.gen_range(0.25..4.0);
            let p_k = rng.gen_range(0.02..0.95);
            let p_hat = rng.gen_range(0.0..(1.0 - p_k));
            let cfg = TheoremSimConfig {
                a_star: rng.gen_range(-g..g),
                g_bound: g,
                p_k,
                p_hat,
                delta: rng.gen_range(0.0..g),
                steps: 100,
                seed: trial,
            };
            if !analysis::theorem1_simulate(&cfg)?.satisfied {
                violations += 1;
            }
        }
        Ok(outcome(
            "theorem-bound-monte-carlo",
            violations == 0,
            format!("{violations} violations over 1000 configs x 100 steps"),
        ))
    }));
    checks.push(guard("theorem-full-support-convergence", || {
        let cfg = TheoremSimConfig {
            a_star: 0.4,
            g_bound: 1.0,
            p_k: 0.6,
            p_hat: 0.4,
            delta: 0.0,
            steps: 200,
            seed: 5,
        };
        let sim = analysis::theorem1_simulate(&cfg)?;
        let dev = (sim.trajectory.last().unwrap() - cfg.a_star).abs();
        Ok(outcome(
            "theorem-full-support-convergence",
            dev <= 1e-6 * cfg.g_bound,
            format!("final deviation {dev:.3e} (threshold 1e-6)"),
        ))
    }));
}

fn eigensolver_check() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xe19e);
    let mut worst_trace: f64 = 0.0;
    let mut worst_fro: f64 = 0.0;
    for d in [2usize, 4, 8, 16, 32, 64] {
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let v = rng.gen_range(-1.0..1.0);
                m[i * d + j] = v;
                m[j * d + i] = v;
            }
        }
        let eig = analysis::sym_eigenvalues(&m, d)?;
        let trace: f64 = (0..d).map(|i| m[i * d + i]).sum();
        let fro: f64 = m.iter().map(|v| v * v).sum();
        worst_trace = worst_trace.max((trace - eig.iter().sum::<f64>()).abs());
        worst_fro = worst_fro.max((fro - eig.iter().map(|l| l * l).sum::<f64>()).abs());
    }
    Ok(outcome(
        "eigensolver-identities",
        worst_trace < 1e-10 && worst_fro < 1e-9,
        format!("trace dev {worst_trace:.2e}, frobenius dev {worst_fro:.2e}"),
    ))
}

/// With mu1 = mu2 = 0, full participation and E = 1, one round equals the
/// weighted average of independent single-epoch runs.
fn fedavg_reduction() -> Result<Check> {
    let ds = data::gen_circles(&[(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)], 0.5, 12, 31)?;
    let shards = data::partition_pcdd(&ds, 4, 2, 9)?;
    let spec = MlpSpec::new(vec![2, 8, 3, 4], 77)?;
    let cfg = FedConfig {
        rounds: 1,
        local_epochs: 1,
        batch_size: 16,
        clients_per_round: 4,
        loss: LossConfig::default(),
        sgd: SgdConfig { learning_rate: 0.05, momentum: 0.0, weight_decay: 0.0 },
        seed: 4242,
        prototype_fraction: 1.0,
        track_eigvar: false,
    };
    let clients = federation::build_clients(&shards, &cfg);
    let mut server = federation::ServerState::new(&spec, cfg.seed)?;
    let initial = server.params.clone();
    federation::run_round(&mut server, &clients, &ds, &ds, &cfg)?;

    let mut updates = Vec::new();
    for c in &clients {
        let out = federation::local_train(c, &ds, &initial, None, &cfg, 0)?;
        updates.push((out.params, out.n_samples));
    }
    let expected = federation::aggregate_params(&updates)?;
    let exact = server.params.values == expected;
    Ok(outcome(
        "fedavg-oracle-reduction",
        exact,
        if exact { "aggregated model bit-identical to composed oracle".into() } else { "mismatch".into() },
    ))
}

fn lite_degenerate() -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x117e);
    let n = 20;
    let z: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let mut globals = PrototypeSet::new(3);
    for c in 0..4 {
        globals.insert(c, vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])?;
    }
    let mut tape = Tape::new();
    let zt = tape.constant(z.clone(), vec![n, 3])?;
    let full = losses::inter_loss(&mut tape, zt, &labels, &globals, &LossConfig::default())?;
    let cfg = LossConfig { lite_n: Some(n), ..LossConfig::default() };
    let mut tape2 = Tape::new();
    let zt2 = tape2.constant(z, vec![n, 3])?;
    let lite = losses::inter_loss_lite(&mut tape2, zt2, &labels, &globals, &cfg, 1)?;
    let equal = tape.scalar_value(full) == tape2.scalar_value(lite);
    Ok(outcome(
        "lite-degenerate-equality",
        equal,
        format!("full {} vs lite {}", tape.scalar_value(full), tape2.scalar_value(lite)),
    ))
}

/// Runs every check in the battery.
pub fn run_battery() -> Vec<Check> {
    let mut checks = Vec::new();
    checks.push(guard("lemma1-identity", lemma1_identity));
    gradient_checks(&mut checks);
    motivation_checks(&mut checks);
    theorem_checks(&mut checks);
    checks.push(guard("eigensolver-identities", eigensolver_check));
    checks.push(guard("fedavg-oracle-reduction", fedavg_reduction));
    checks.push(guard("lite-degenerate-equality", lite_degenerate));
    checks
}
