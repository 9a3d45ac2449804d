use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use lfads_core::config::pbt::{run_pbt, PbtConfig};
use lfads_core::config::runner::{evaluate_run, run_multi, run_single};
use lfads_core::config::SearchSpace;
use lfads_core::data::lorenz::{generate_lorenz, LorenzConfig};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "lfads", version, about = "Train and evaluate LFADS models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Lorenz spiking dataset.
    GenerateLorenz {
        #[arg(long)]
        out: PathBuf,
        /// Training plus validation trials.
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Total neurons, held-in plus held-out.
        #[arg(long, default_value_t = 38)]
        neurons: usize,
        #[arg(long, default_value_t = 8)]
        held_out: usize,
        /// Bins seen by the encoder.
        #[arg(long, default_value_t = 50)]
        bins: usize,
        /// Forward-prediction bins appended to the reconstruction target.
        #[arg(long, default_value_t = 5)]
        fp_bins: usize,
        #[arg(long, default_value_t = 0.3)]
        base_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model.
    Train {
        config: PathBuf,
        /// `dotted.path=value` overrides, applied left to right.
        overrides: Vec<String>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Random search over a hyperparameter space.
    Search {
        config: PathBuf,
        overrides: Vec<String>,
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/search")]
        out: PathBuf,
    },
    /// Population-based training.
    Pbt {
        config: PathBuf,
        overrides: Vec<String>,
        #[arg(long)]
        space: PathBuf,
        #[arg(long)]
        population: usize,
        #[arg(long)]
        generations: usize,
        #[arg(long)]
        gen_epochs: u64,
        #[arg(long, default_value_t = 0.25)]
        quantile: f64,
        #[arg(long, value_delimiter = ',', default_values_t = [0.8, 1.2])]
        perturb_factors: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/pbt")]
        out: PathBuf,
    },
    /// Score a trained run with co-bps and fp-bps.
    Eval {
        run_dir: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn finite(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn run(cmd: Command) -> anyhow::Result<Value> {
    Ok(match cmd {
        Command::GenerateLorenz {
            out,
            trials,
            neurons,
            held_out,
            bins,
            fp_bins,
            base_rate,
            seed,
        } => {
            let cfg = LorenzConfig {
                n_trials: trials,
                n_neurons: neurons,
                n_held_out: held_out,
                n_bins: bins,
                fp_bins,
                base_rate,
                seed,
                ..Default::default()
            };
            let ds = generate_lorenz(&cfg)?;
            ds.save(&out)?;
            json!({
                "out": out,
                "train_trials": ds.train.n_trials(),
                "valid_trials": ds.valid.n_trials(),
            })
        }
        Command::Train {
            config,
            overrides,
            run_dir,
        } => {
            let dir = run_single(&config, &overrides, run_dir.as_deref())?;
            json!({ "run_dir": dir })
        }
        Command::Search {
            config,
            overrides,
            space,
            samples,
            workers,
            seed,
            out,
        } => {
            let space = SearchSpace::load(&space)?;
            let rep = run_multi(&config, &overrides, &space, samples, workers, seed, &out)?;
            let runs: Vec<Value> = rep
                .runs
                .iter()
                .map(|r| match &r.outcome {
                    Ok(o) => json!({ "run": r.index, "dir": r.dir, "best_valid": finite(o.best_valid) }),
                    Err(e) => json!({ "run": r.index, "dir": r.dir, "error": e }),
                })
                .collect();
            json!({ "summary": out.join("summary.csv"), "runs": runs })
        }
        Command::Pbt {
            config,
            overrides,
            space,
            population,
            generations,
            gen_epochs,
            quantile,
            perturb_factors,
            workers,
            seed,
            out,
        } => {
            let space = SearchSpace::load(&space)?;
            let cfg = PbtConfig {
                population,
                generations,
                generation_epochs: gen_epochs,
                exploit_quantile: quantile,
                perturb_factors,
                workers,
                seed,
                ..Default::default()
            };
            let state = run_pbt(&config, &overrides, &space, &cfg, &out)?;
            let best: Vec<Value> = state.history.iter().map(|g| finite(g.best)).collect();
            json!({
                "generations": state.generation,
                "best_per_generation": best,
                "events": state.events.len(),
                "log": out.join("pbt_generations.csv"),
            })
        }
        Command::Eval { run_dir, data } => {
            let r = evaluate_run(&run_dir, &data).with_context(|| format!("evaluating {}", run_dir.display()))?;
            json!({
                "split": r.split,
                "n_trials": r.n_trials,
                "co_bps": r.co_bps.map(finite),
                "fp_bps": r.fp_bps.map(finite),
                "checkpoint": r.checkpoint,
            })
        }
    })
}

fn error_report(e: &anyhow::Error) -> Value {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<lfads_core::Error>())
        .map_or("other", lfads_core::Error::kind);
    let causes: Vec<String> = e.chain().skip(1).map(ToString::to_string).collect();
    json!({ "error": kind, "message": e.to_string(), "causes": causes })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_report(&e));
            ExitCode::FAILURE
        }
    }
}
