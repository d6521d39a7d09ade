//! `mtds`: train, adapt, and benchmark multi-task dynamical systems on the
//! damped-harmonic-oscillator dataset.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use mtds_cli::checkpoint::Checkpoint;
use mtds_cli::config::Config;
use mtds_cli::harness::{
    evaluate_mtds, reproduce_dho, train_elbo, train_mco, Budget, EvalOptions,
    ReproduceSpec,
};
use mtds_cli::pooled::{train_pooled, PooledTrainConfig};
use mtds_cli::{dataset, fsio, init_workers, selftest};

#[derive(Parser)]
#[command(name = "mtds", version, about = "Multi-task dynamical systems benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate damped-harmonic-oscillator train/test datasets.
    DhoGen(DhoGenArgs),
    /// Train a multi-task model by the Monte Carlo objective.
    TrainMco(TrainArgs),
    /// Train a multi-task model by the variational ELBO.
    TrainElbo(TrainArgs),
    /// Train the pooled baseline (one model for all sequences).
    TrainPooled(TrainPooledArgs),
    /// Adapt to test sequences and dump filtered posteriors.
    Infer(InferArgs),
    /// Adapt to test sequences and write the RMSE/NLL metric table.
    Evaluate(EvaluateArgs),
    /// Run the full benchmark protocol (sizes x repetitions, plus pooled).
    ReproduceDho(ReproduceArgs),
    /// Run the built-in sanity checks.
    Selftest,
}

#[derive(Args)]
struct DhoGenArgs {
    #[arg(long, default_value_t = 16)]
    n_train: usize,
    #[arg(long, default_value_t = 20)]
    n_test: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory for train.jsonl and test.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config; defaults to the benchmark configuration when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset (overrides the config's data.train).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch JSONL metrics log.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Resume from the output checkpoint if it exists.
    #[arg(long, default_value_t = false)]
    resume: bool,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainPooledArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4000)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Conditioning lengths, comma separated.
    #[arg(long, default_value = "10,20,40", value_delimiter = ',')]
    cond: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    tau: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for posterior dumps (and predictive traces).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "10,20,40", value_delimiter = ',')]
    cond: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    tau: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Optional directory for per-sequence trace CSVs.
    #[arg(long)]
    traces: Option<PathBuf>,
}

#[derive(Args)]
struct ReproduceArgs {
    /// full: published protocol; smoke: minutes-scale reduced run.
    #[arg(long, default_value = "smoke")]
    budget: String,
    #[arg(long)]
    out: PathBuf,
    /// Training set sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after this many minutes, leaving resumable state.
    #[arg(long)]
    max_minutes: Option<f64>,
    /// Also estimate test log marginal likelihoods.
    #[arg(long, default_value_t = false)]
    mllh: bool,
}

fn main() {
    init_workers();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::DhoGen(args) => {
            let (train, test) = mtds::dho::make_dataset(args.n_train, args.n_test, args.seed);
            dataset::save(
                &args.out.join("train.jsonl"),
                &train,
                args.seed,
                mtds::dho::NOISE_SD,
            )?;
            dataset::save(
                &args.out.join("test.jsonl"),
                &test,
                args.seed,
                mtds::dho::NOISE_SD,
            )?;
            println!(
                "wrote {} train and {} test sequences to {}",
                train.len(),
                test.len(),
                args.out.display()
            );
            Ok(())
        }
        Command::TrainMco(args) => {
            let (config, data) = load_train_inputs(&args)?;
            let resume = (args.resume && args.out.exists())
                .then(|| Checkpoint::load(&args.out))
                .transpose()?;
            let ckpt = train_mco(&config, &data, resume, args.metrics.as_deref())?;
            ckpt.save(&args.out)?;
            println!(
                "trained {} epochs; checkpoint at {}",
                ckpt.meta.epochs_completed,
                args.out.display()
            );
            Ok(())
        }
        Command::TrainElbo(args) => {
            let (config, data) = load_train_inputs(&args)?;
            let ckpt = train_elbo(&config, &data, args.metrics.as_deref())?;
            ckpt.save(&args.out)?;
            println!(
                "trained {} epochs; checkpoint at {}",
                ckpt.meta.epochs_completed,
                args.out.display()
            );
            Ok(())
        }
        Command::TrainPooled(args) => {
            let (_, data) = dataset::load(&args.data)?;
            let model = train_pooled(
                &data,
                &PooledTrainConfig {
                    epochs: args.epochs,
                    seed: args.seed,
                    ..PooledTrainConfig::default()
                },
            )?;
            fsio::write_atomic(&args.out, &serde_json::to_string(&model)?)?;
            println!("pooled model at {}", args.out.display());
            Ok(())
        }
        Command::Infer(args) => {
            let ckpt = Checkpoint::load(&args.ckpt)?;
            let (_, data) = dataset::load(&args.data)?;
            let opts = EvalOptions {
                cond: args.cond,
                tau: args.tau,
                seed: args.seed,
                posterior_dir: Some(args.out.clone()),
                traces_dir: Some(args.out.join("traces")),
                ..EvalOptions::default()
            };
            let rows = evaluate_mtds(&ckpt.phi, ckpt.dims, ckpt.base, &data, &opts)?;
            println!(
                "inferred {} sequences; posteriors in {}",
                rows.len() / opts.cond.len().max(1),
                args.out.display()
            );
            Ok(())
        }
        Command::Evaluate(args) => {
            let ckpt = Checkpoint::load(&args.ckpt)?;
            let (_, data) = dataset::load(&args.data)?;
            let opts = EvalOptions {
                cond: args.cond.clone(),
                tau: args.tau,
                seed: args.seed,
                traces_dir: args.traces.clone(),
                ..EvalOptions::default()
            };
            let rows = evaluate_mtds(&ckpt.phi, ckpt.dims, ckpt.base, &data, &opts)?;
            let mut out = String::from("seq,cond_t,rmse,nll,ess\n");
            for r in &rows {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.seq, r.cond_t, r.rmse, r.nll, r.ess
                ));
            }
            fsio::write_atomic(&args.out, &out)?;
            for &cond in &args.cond {
                let sel: Vec<&mtds_cli::harness::EvalRow> =
                    rows.iter().filter(|r| r.cond_t == cond).collect();
                let n = sel.len() as f64;
                println!(
                    "cond t = {cond}: mean rmse {:.4}, mean nll {:.4}",
                    sel.iter().map(|r| r.rmse).sum::<f64>() / n,
                    sel.iter().map(|r| r.nll).sum::<f64>() / n
                );
            }
            Ok(())
        }
        Command::ReproduceDho(args) => {
            let budget = match args.budget.as_str() {
                "full" => Budget::Full,
                "smoke" => Budget::Smoke,
                other => bail!("unknown budget '{other}' (expected full|smoke)"),
            };
            let mut spec = ReproduceSpec::new(budget, args.out);
            if let Some(sizes) = args.sizes {
                spec.sizes = sizes;
            }
            if let Some(reps) = args.reps {
                spec.reps = reps;
            }
            if let Some(seed) = args.seed {
                spec.seed = seed;
            }
            spec.max_minutes = args.max_minutes;
            spec.with_mllh = args.mllh;
            let summary = reproduce_dho(&spec)?;
            for &size in &spec.sizes {
                for &cond in &spec.conds {
                    if let Some((rmse, nll)) = summary.mean("mtlds", size, cond) {
                        println!("mtlds n = {size:4} t = {cond}: rmse {rmse:.4} nll {nll:.4}");
                    }
                }
            }
            for &cond in &spec.conds {
                if let Some((rmse, nll)) = summary.mean("pooled", spec.pooled_size, cond) {
                    println!(
                        "pooled n = {:4} t = {cond}: rmse {rmse:.4} nll {nll:.4}",
                        spec.pooled_size
                    );
                }
            }
            if !summary.complete {
                println!("time budget reached; rerun to resume from state.json");
            }
            Ok(())
        }
        Command::Selftest => match selftest::run() {
            Ok(()) => Ok(()),
            Err(n) => bail!("{n} selftest check(s) failed"),
        },
    }
}

fn load_train_inputs(args: &TrainArgs) -> Result<(Config, mtds::dho::SequenceSet)> {
    let mut config = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::dho_default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let data_path = args
        .data
        .clone()
        .or_else(|| config.data.train.clone().map(PathBuf::from))
        .context("no training data: pass --data or set data.train in the config")?;
    let (_, data) = dataset::load(&data_path)?;
    Ok((config, data))
}
