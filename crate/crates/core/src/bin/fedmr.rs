//! Experiment driver: runs federated experiments from JSON configs, dumps
//! feature coordinates for plotting, emits partition histograms, and runs
//! the property-verification battery.

use clap::{Args, Parser, Subcommand};
use fedmr_core::config::{self, RunPlan};
use fedmr_core::error::Error;
use fedmr_core::federation::{self, ExperimentSummary, RoundReport};
use fedmr_core::model::{self, ModelParams};
use fedmr_core::verify;
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "fedmr", version, about = "Deterministic federated-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for per-round client training (1 = sequential).
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Output path prefix (overrides the config's `output`).
    #[arg(long)]
    out: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write JSONL round reports plus a summary.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Run the property-verification battery.
    Verify {
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Train per the config, then dump final feature coordinates as CSV
    /// (unit-sphere projected when the feature width is 3).
    DumpFeatures {
        config: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Emit per-client class histograms of the configured partition as CSV.
    PartitionStats {
        config: PathBuf,
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let payload = serde_json::json!({
                "category": e.category(),
                "message": e.to_string(),
            });
            eprintln!("{payload}");
            match e {
                Error::Config(_) | Error::Parse(_) | Error::Format(_) => 2,
                _ => 1,
            }
        }
    };
    std::process::exit(code);
}

fn init_threads(threads: usize) -> Result<(), Error> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn load_plan(path: &PathBuf, common: &CommonOpts) -> Result<RunPlan, Error> {
    let mut cfg = config::parse_config(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output = Some(out.clone());
    }
    config::build_plan(cfg)
}

fn out_prefix(plan: &RunPlan) -> String {
    plan.config.output.clone().unwrap_or_else(|| "fedmr-run".into())
}

fn write_reports(prefix: &str, reports: &[RoundReport], summary: &ExperimentSummary) -> Result<(), Error> {
    if let Some(parent) = std::path::Path::new(prefix).parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut jsonl = std::io::BufWriter::new(std::fs::File::create(format!("{prefix}.rounds.jsonl"))?);
    for r in reports {
        serde_json::to_writer(&mut jsonl, r).map_err(|e| Error::Config(e.to_string()))?;
        jsonl.write_all(b"\n")?;
    }
    jsonl.flush()?;
    let summary_text =
        serde_json::to_string_pretty(summary).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(format!("{prefix}.summary.json"), summary_text + "\n")?;
    Ok(())
}

/// Runs the configured experiment and keeps the final global model for
/// feature dumps.
fn train_final_model(plan: &RunPlan) -> Result<(ModelParams, Vec<RoundReport>, ExperimentSummary), Error> {
    let clients = federation::build_clients(&plan.shards, &plan.fed);
    let mut server = federation::ServerState::new(&plan.model_spec, plan.fed.seed)?;
    let mut reports = Vec::with_capacity(plan.fed.rounds as usize);
    for _ in 0..plan.fed.rounds {
        reports.push(federation::run_round(&mut server, &clients, &plan.train, &plan.test, &plan.fed)?);
    }
    let summary = federation::summarize_reports(&reports, &plan.config.target_accuracies);
    Ok((server.params, reports, summary))
}

fn dump_features(plan: &RunPlan, params: &ModelParams, prefix: &str) -> Result<(), Error> {
    let indices: Vec<usize> = (0..plan.train.len()).collect();
    let (feats, labels) = plan.train.gather(&indices);
    let (z, _) = model::infer(params, &feats, labels.len())?;
    let d = params.layout.feature_dim;
    let project = d == 3;

    let path = format!("{prefix}.features.csv");
    let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
    let header: Vec<String> = if project {
        vec!["x".into(), "y".into(), "z".into()]
    } else {
        (1..=d).map(|i| format!("f{i}")).collect()
    };
    writeln!(file, "{},label", header.join(","))?;

    let mut skipped = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &z[i * d..(i + 1) * d];
        if project {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                skipped += 1;
                continue;
            }
            let cols: Vec<String> = row.iter().map(|v| format!("{:.16e}", v / norm)).collect();
            writeln!(file, "{},{label}", cols.join(","))?;
        } else {
            let cols: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(file, "{},{label}", cols.join(","))?;
        }
    }
    file.flush()?;
    if skipped > 0 {
        eprintln!("skipped {skipped} zero-norm feature rows");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Run { config, common } => {
            init_threads(common.threads)?;
            let plan = load_plan(&config, &common)?;
            let prefix = out_prefix(&plan);
            let (params, reports, summary) = train_final_model(&plan)?;
            write_reports(&prefix, &reports, &summary)?;
            if plan.config.dump_features {
                dump_features(&plan, &params, &prefix)?;
            }
            println!(
                "{} rounds of {}: final accuracy {:.4}, best {:.4} (round {})",
                summary.rounds,
                plan.config.algorithm.name(),
                summary.final_accuracy,
                summary.best_accuracy,
                summary.best_round
            );
            Ok(0)
        }
        Command::Verify { threads } => {
            init_threads(threads)?;
            let checks = verify::run_battery();
            let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
            let mut failed = 0usize;
            for c in &checks {
                let status = if c.passed { "PASS" } else { "FAIL" };
                println!("{status}  {:width$}  {}", c.name, c.detail);
                if !c.passed {
                    failed += 1;
                }
            }
            println!("{} checks, {} failed", checks.len(), failed);
            Ok(if failed == 0 { 0 } else { 1 })
        }
        Command::DumpFeatures { config, common } => {
            init_threads(common.threads)?;
            let plan = load_plan(&config, &common)?;
            let prefix = out_prefix(&plan);
            let (params, _, _) = train_final_model(&plan)?;
            dump_features(&plan, &params, &prefix)?;
            println!("wrote {prefix}.features.csv");
            Ok(0)
        }
        Command::PartitionStats { config, common } => {
            let plan = load_plan(&config, &common)?;
            let mut lines = vec!["client,class,count".to_string()];
            for shard in &plan.shards {
                let mut counts = std::collections::BTreeMap::new();
                for &i in &shard.indices {
                    *counts.entry(plan.train.labels[i]).or_insert(0usize) += 1;
                }
                for (class, count) in counts {
                    lines.push(format!("{},{class},{count}", shard.client_id));
                }
            }
            let text = lines.join("\n") + "\n";
            match &common.out {
                Some(out) => {
                    let path = format!("{out}.partition.csv");
                    std::fs::write(&path, text)?;
                    println!("wrote {path}");
                }
                None => print!("{text}"),
            }
            Ok(0)
        }
    }
}
