//! Experiment orchestration: training with checkpoints and metric logs,
//! posterior-predictive evaluation with trace emission, and the oscillator
//! benchmark reproduction (train sizes x repetitions, MTLDS vs pooled).

use anyhow::{bail, Context, Result};
use mtds::dho::{self, SequenceSet};
use mtds::infer::{
    filter_posteriors, metrics_rmse_nll, posterior_predictive, AdaisHyper, PosteriorPredictive,
    LOG_S_PRIOR,
};
use mtds::learn::{mco_objective_estimate, ElboTrainer, McoTrainer};
use mtds::model::{BaseModel, HyperNetParams, ModelDims};
use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checkpoint::{Checkpoint, CheckpointMeta, SCHEMA_VERSION};
use crate::config::Config;
use crate::dataset;
use crate::fsio;
use crate::pooled::{train_pooled, PooledModel, PooledTrainConfig};
use crate::posterior_io::PosteriorRecord;

/// SplitMix64; used to derive independent sub-seeds from (seed, labels).
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Train by the Monte Carlo objective, optionally resuming, logging one
/// JSON line per epoch: {epoch, objective, grad_norm, lr, log_s}.
pub fn train_mco(
    config: &Config,
    data: &SequenceSet,
    resume: Option<Checkpoint>,
    metrics_log: Option<&Path>,
) -> Result<Checkpoint> {
    let dims = config.model.dims();
    let base = config.model.base;
    let mco = config.mco_config();
    let digest = config.digest();

    let phi = match &resume {
        Some(ckpt) => {
            if ckpt.meta.config_hash != digest {
                bail!(
                    "checkpoint was trained under config {} but current config hashes to {}",
                    ckpt.meta.config_hash,
                    digest
                );
            }
            ckpt.phi.clone()
        }
        None => {
            let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
            rng.set_stream(0x494e_4954);
            HyperNetParams::init(dims, base, &mut rng)
        }
    };

    let mut trainer = McoTrainer::new(phi, dims, base, mco, config.seed)
        .map_err(|e| anyhow::anyhow!(e.to_string()))?;
    if let Some(ckpt) = &resume {
        if let Some(adam) = &ckpt.adam {
            trainer.restore(adam.clone(), ckpt.meta.epochs_completed, ckpt.meta.sobol_index);
        }
    }

    while trainer.epochs_completed() < trainer.config().epochs {
        let stats = trainer.epoch(data).map_err(|e| anyhow::anyhow!(e.to_string()))?;
        if let Some(log) = metrics_log {
            fsio::append_line(log, &serde_json::to_string(&stats)?)?;
        }
    }

    Ok(Checkpoint {
        schema_version: SCHEMA_VERSION,
        dims,
        base,
        phi: trainer.phi.clone(),
        adam: Some(trainer.adam.clone()),
        meta: CheckpointMeta {
            seed: config.seed,
            epochs_completed: trainer.epochs_completed(),
            sobol_index: trainer.sobol_index(),
            config_hash: digest,
        },
    })
}

/// Train by the reparameterized ELBO. The per-sequence variational
/// parameters are training-time state and are not persisted.
pub fn train_elbo(
    config: &Config,
    data: &SequenceSet,
    metrics_log: Option<&Path>,
) -> Result<Checkpoint> {
    let dims = config.model.dims();
    let base = config.model.base;
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    rng.set_stream(0x494e_4954);
    let phi = HyperNetParams::init(dims, base, &mut rng);
    let mut trainer = ElboTrainer::new(phi, dims, base, data.len(), config.elbo_config(), config.seed)
        .map_err(|e| anyhow::anyhow!(e.to_string()))?;
    while trainer.epochs_completed() < trainer.config().epochs {
        let stats = trainer.epoch(data).map_err(|e| anyhow::anyhow!(e.to_string()))?;
        if let Some(log) = metrics_log {
            fsio::append_line(log, &serde_json::to_string(&stats)?)?;
        }
    }
    Ok(Checkpoint {
        schema_version: SCHEMA_VERSION,
        dims,
        base,
        phi: trainer.phi.clone(),
        adam: None,
        meta: CheckpointMeta {
            seed: config.seed,
            epochs_completed: trainer.epochs_completed(),
            sobol_index: 0,
            config_hash: config.digest(),
        },
    })
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Conditioning lengths; must be multiples of `tau`.
    pub cond: Vec<usize>,
    /// Filtering interval.
    pub tau: usize,
    pub hyper: AdaisHyper,
    /// Posterior-predictive sample count.
    pub pred_samples: usize,
    pub seed: u64,
    /// Emit per-sequence trace CSVs here when set.
    pub traces_dir: Option<PathBuf>,
    /// Emit per-sequence posterior dumps here when set.
    pub posterior_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            cond: vec![10, 20, 40],
            tau: 5,
            hyper: AdaisHyper::default(),
            pred_samples: 1000,
            seed: 0,
            traces_dir: None,
            posterior_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub seq: usize,
    pub cond_t: usize,
    pub rmse: f64,
    pub nll: f64,
    /// ESS reached when the posterior at `cond_t` was accepted.
    pub ess: f64,
}

/// Filtered inference and posterior-predictive metrics for every test
/// sequence. Sequences are processed in order with per-sequence derived
/// seeds; particle evaluations inside each posterior run in parallel.
pub fn evaluate_mtds(
    phi: &HyperNetParams,
    dims: ModelDims,
    base: BaseModel,
    test: &SequenceSet,
    opts: &EvalOptions,
) -> Result<Vec<EvalRow>> {
    let max_cond = *opts.cond.iter().max().context("empty cond list")?;
    if opts.cond.iter().any(|c| c % opts.tau != 0 || *c == 0) {
        bail!("conditioning lengths must be positive multiples of tau = {}", opts.tau);
    }
    if max_cond >= test.seq_len() {
        bail!(
            "conditioning length {} leaves no prediction horizon (T = {})",
            max_cond,
            test.seq_len()
        );
    }
    let steps = test.seq_len();
    let mut rows = Vec::new();
    for i in 0..test.len() {
        let y = test
            .sequences
            .row(i)
            .to_owned()
            .into_shape_with_order((steps, dims.p))
            .map_err(|e| anyhow::anyhow!(e.to_string()))?;
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(opts.seed, 0x4556, i as u64));
        let chain = filter_posteriors(
            y.slice(s![..max_cond, ..]),
            test.inputs.slice(s![..max_cond, ..]),
            phi,
            dims,
            base,
            opts.tau,
            &opts.hyper,
            LOG_S_PRIOR,
            &mut rng,
        )
        .map_err(|e| anyhow::anyhow!("sequence {i}: {e}"))?;

        if let Some(dir) = &opts.posterior_dir {
            let mut out = String::new();
            for fp in &chain {
                out.push_str(&serde_json::to_string(&PosteriorRecord::from_filtered(fp)?)?);
                out.push('\n');
            }
            fsio::write_atomic(&dir.join(format!("posteriors_seq{i:03}.jsonl")), &out)?;
        }

        for &cond in &opts.cond {
            let fp = chain
                .iter()
                .find(|f| f.t == cond)
                .with_context(|| format!("no posterior at t = {cond}"))?;
            let pp = posterior_predictive(
                &fp.result.posterior,
                phi,
                dims,
                base,
                test.inputs.view(),
                opts.pred_samples,
                &mut rng,
            )
            .map_err(|e| anyhow::anyhow!(e.to_string()))?;
            let truth = y.slice(s![cond.., ..]);
            let (rmse, nll) = metrics_rmse_nll(truth, &pp, cond)
                .map_err(|e| anyhow::anyhow!(e.to_string()))?;
            rows.push(EvalRow {
                seq: i,
                cond_t: cond,
                rmse,
                nll,
                ess: *fp.result.ess_trace.last().unwrap_or(&f64::NAN),
            });
            if let Some(dir) = &opts.traces_dir {
                write_trace_file(
                    &dir.join(format!("trace_seq{i:03}_t{cond:02}.csv")),
                    &y,
                    &pp,
                )?;
            }
        }
    }
    if let Some(dir) = &opts.traces_dir {
        write_violin_file(&dir.join("violin.csv"), &rows)?;
    }
    Ok(rows)
}

/// The pooled model predicts one fixed trajectory regardless of the
/// conditioning prefix; metrics come from the same tail protocol.
pub fn evaluate_pooled(
    model: &PooledModel,
    test: &SequenceSet,
    conds: &[usize],
) -> Result<Vec<EvalRow>> {
    let yhat = model.predict(&test.inputs)?;
    let s = model.s();
    let steps = test.seq_len();
    let mut rows = Vec::new();
    for i in 0..test.len() {
        for &cond in conds {
            let mut sq = 0.0;
            let mut nll = 0.0;
            let horizon = steps - cond;
            for t in cond..steps {
                let r = test.sequences[[i, t]] - yhat[[t, 0]];
                sq += r * r;
                nll -= -0.5 * (std::f64::consts::TAU * s * s).ln() - 0.5 * r * r / (s * s);
            }
            rows.push(EvalRow {
                seq: i,
                cond_t: cond,
                rmse: (sq / horizon as f64).sqrt(),
                nll: nll / horizon as f64,
                ess: f64::NAN,
            });
        }
    }
    Ok(rows)
}

fn write_trace_file(path: &Path, y: &ndarray::Array2<f64>, pp: &PosteriorPredictive) -> Result<()> {
    let mean = pp.mean();
    let mut out = String::from("t,y_true,pred_mean,pred_lo95,pred_hi95\n");
    for t in 0..pp.steps() {
        let lo = pp.quantile(t, 0, 0.025);
        let hi = pp.quantile(t, 0, 0.975);
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            t + 1,
            y[[t, 0]],
            mean[[t, 0]],
            lo,
            hi
        ));
    }
    fsio::write_atomic(path, &out)
}

fn write_violin_file(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut out = String::from("seq,cond_t,rmse,nll\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.seq, r.cond_t, r.rmse, r.nll));
    }
    fsio::write_atomic(path, &out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Budget {
    /// Reduced schedule and sample counts; minutes, not hours.
    Smoke,
    /// The published protocol.
    Full,
}

#[derive(Debug, Clone)]
pub struct ReproduceSpec {
    pub sizes: Vec<usize>,
    pub reps: usize,
    pub conds: Vec<usize>,
    pub test_size: usize,
    pub seed: u64,
    pub budget: Budget,
    pub out_dir: PathBuf,
    /// Stop after this many minutes, leaving resumable state.
    pub max_minutes: Option<f64>,
    /// Also estimate test log marginal likelihoods (model vs truth).
    pub with_mllh: bool,
    /// Pooled baseline training-set size.
    pub pooled_size: usize,
}

impl ReproduceSpec {
    pub fn new(budget: Budget, out_dir: PathBuf) -> Self {
        match budget {
            Budget::Full => Self {
                sizes: vec![4, 16],
                reps: 10,
                conds: vec![10, 20, 40],
                test_size: 20,
                seed: 1,
                budget,
                out_dir,
                max_minutes: None,
                with_mllh: false,
                pooled_size: 1000,
            },
            Budget::Smoke => Self {
                sizes: vec![4, 16],
                reps: 2,
                conds: vec![20, 40],
                test_size: 10,
                seed: 1,
                budget,
                out_dir,
                max_minutes: None,
                with_mllh: false,
                pooled_size: 64,
            },
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReproduceState {
    pub done: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub n_train: usize,
    pub rep: usize,
    pub cond_t: usize,
    pub rmse: f64,
    pub nll: f64,
    pub runtime_s: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MllhRow {
    pub model: String,
    pub n_train: usize,
    pub rep: usize,
    pub mllh_model: f64,
    pub mllh_true: f64,
    pub seed: u64,
}

#[derive(Debug, Default)]
pub struct ReproduceSummary {
    pub rows: Vec<MetricsRow>,
    pub mllh: Vec<MllhRow>,
    /// False when the run stopped on the time budget with work remaining.
    pub complete: bool,
}

impl ReproduceSummary {
    /// Mean metric over repetitions and sequences for (model, size, cond).
    pub fn mean(&self, model: &str, n_train: usize, cond_t: usize) -> Option<(f64, f64)> {
        let sel: Vec<&MetricsRow> = self
            .rows
            .iter()
            .filter(|r| r.model == model && r.n_train == n_train && r.cond_t == cond_t)
            .collect();
        if sel.is_empty() {
            return None;
        }
        let n = sel.len() as f64;
        Some((
            sel.iter().map(|r| r.rmse).sum::<f64>() / n,
            sel.iter().map(|r| r.nll).sum::<f64>() / n,
        ))
    }
}

fn metrics_csv_header() -> &'static str {
    "model,n_train,rep,cond_t,rmse,nll,runtime_s,seed"
}

fn row_to_csv(r: &MetricsRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        r.model, r.n_train, r.rep, r.cond_t, r.rmse, r.nll, r.runtime_s, r.seed
    )
}

fn parse_metrics_csv(text: &str) -> Vec<MetricsRow> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 8 {
                return None;
            }
            Some(MetricsRow {
                model: f[0].to_string(),
                n_train: f[1].parse().ok()?,
                rep: f[2].parse().ok()?,
                cond_t: f[3].parse().ok()?,
                rmse: f[4].parse().ok()?,
                nll: f[5].parse().ok()?,
                runtime_s: f[6].parse().ok()?,
                seed: f[7].parse().ok()?,
            })
        })
        .collect()
}

/// The benchmark protocol: for each (train size, repetition) generate data,
/// train the multi-task model, adapt to each test sequence, and record
/// RMSE/NLL; pooled baselines are trained per repetition on their own
/// larger datasets. Completed units are recorded in `state.json`, and
/// reruns skip them, so an interrupted run resumes where it stopped.
pub fn reproduce_dho(spec: &ReproduceSpec) -> Result<ReproduceSummary> {
    std::fs::create_dir_all(&spec.out_dir)?;
    let state_path = spec.out_dir.join("state.json");
    let metrics_path = spec.out_dir.join("metrics.csv");
    let mllh_path = spec.out_dir.join("mllh.csv");
    let started = Instant::now();

    let mut state: ReproduceState = if state_path.exists() {
        serde_json::from_str(&fsio::read_to_string(&state_path)?)?
    } else {
        ReproduceState::default()
    };
    let mut rows: Vec<MetricsRow> = if metrics_path.exists() {
        parse_metrics_csv(&fsio::read_to_string(&metrics_path)?)
    } else {
        Vec::new()
    };
    let mut mllh: Vec<MllhRow> = Vec::new();

    let over_budget = |started: &Instant| {
        spec.max_minutes
            .map(|mm| started.elapsed().as_secs_f64() / 60.0 > mm)
            .unwrap_or(false)
    };

    let flush = |state: &ReproduceState, rows: &[MetricsRow], mllh: &[MllhRow]| -> Result<()> {
        fsio::write_atomic(&state_path, &serde_json::to_string_pretty(state)?)?;
        let mut out = String::from(metrics_csv_header());
        out.push('\n');
        for r in rows {
            out.push_str(&row_to_csv(r));
            out.push('\n');
        }
        fsio::write_atomic(&metrics_path, &out)?;
        if spec.with_mllh {
            let mut out = String::from("model,n_train,rep,mllh_model,mllh_true,seed\n");
            for r in mllh {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.model, r.n_train, r.rep, r.mllh_model, r.mllh_true, r.seed
                ));
            }
            fsio::write_atomic(&mllh_path, &out)?;
        }
        Ok(())
    };

    let mut complete = true;
    'outer: for &size in &spec.sizes {
        for rep in 0..spec.reps {
            let unit = format!("mtlds-{size}-rep{rep}");
            if state.done.contains(&unit) {
                continue;
            }
            if over_budget(&started) {
                complete = false;
                break 'outer;
            }
            let unit_start = Instant::now();
            let data_seed = mix_seed(spec.seed, size as u64, rep as u64);
            let (train, test) = dho::make_dataset(size, spec.test_size, data_seed);
            dataset::save(
                &spec.out_dir.join(format!("data/train_n{size}_rep{rep}.jsonl")),
                &train,
                data_seed,
                dho::NOISE_SD,
            )?;
            dataset::save(
                &spec.out_dir.join(format!("data/test_n{size}_rep{rep}.jsonl")),
                &test,
                data_seed,
                dho::NOISE_SD,
            )?;

            let mut config = Config::dho_default();
            config.seed = mix_seed(data_seed, 0x7472, 0);
            config.train.mco = Some(match spec.budget {
                Budget::Full => mtds::learn::McoConfig::dho_full(),
                Budget::Smoke => mtds::learn::McoConfig::dho_smoke(),
            });
            let ckpt = train_mco(&config, &train, None, None)?;
            ckpt.save(&spec.out_dir.join(format!("ckpt_n{size}_rep{rep}.json")))?;

            let opts = EvalOptions {
                cond: spec.conds.clone(),
                hyper: match spec.budget {
                    Budget::Full => AdaisHyper::default(),
                    Budget::Smoke => AdaisHyper::smoke(),
                },
                pred_samples: match spec.budget {
                    Budget::Full => 1000,
                    Budget::Smoke => 400,
                },
                seed: mix_seed(data_seed, 0x6576, 0),
                traces_dir: (rep == 0)
                    .then(|| spec.out_dir.join(format!("traces/mtlds_n{size}"))),
                ..EvalOptions::default()
            };
            let eval_rows = evaluate_mtds(&ckpt.phi, ckpt.dims, ckpt.base, &test, &opts)?;
            let runtime = unit_start.elapsed().as_secs_f64();
            for r in &eval_rows {
                rows.push(MetricsRow {
                    model: "mtlds".into(),
                    n_train: size,
                    rep,
                    cond_t: r.cond_t,
                    rmse: r.rmse,
                    nll: r.nll,
                    runtime_s: runtime,
                    seed: data_seed,
                });
            }

            if spec.with_mllh {
                let model_lls = mco_objective_estimate(
                    &ckpt.phi,
                    ckpt.dims,
                    ckpt.base,
                    &test,
                    10_000,
                )
                .map_err(|e| anyhow::anyhow!(e.to_string()))?;
                let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(data_seed, 0x6d6c, 0));
                let true_lls =
                    dho::true_marginal_loglik_batch(test.sequences.view(), 10_000, &mut rng);
                mllh.push(MllhRow {
                    model: "mtlds".into(),
                    n_train: size,
                    rep,
                    mllh_model: model_lls.iter().sum::<f64>() / model_lls.len() as f64,
                    mllh_true: true_lls.iter().sum::<f64>() / true_lls.len() as f64,
                    seed: data_seed,
                });
            }

            state.done.push(unit);
            flush(&state, &rows, &mllh)?;
        }
    }

    // pooled baseline, one model per repetition
    if complete {
        for rep in 0..spec.reps {
            let unit = format!("pooled-{}-rep{rep}", spec.pooled_size);
            if state.done.contains(&unit) {
                continue;
            }
            if over_budget(&started) {
                complete = false;
                break;
            }
            let unit_start = Instant::now();
            let data_seed = mix_seed(spec.seed, 0x706f_6f6c, rep as u64);
            let (train, test) = dho::make_dataset(spec.pooled_size, spec.test_size, data_seed);
            let model = train_pooled(
                &train,
                &PooledTrainConfig {
                    seed: mix_seed(data_seed, 0x7472, 1),
                    ..PooledTrainConfig::default()
                },
            )?;
            let eval_rows = evaluate_pooled(&model, &test, &spec.conds)?;
            let runtime = unit_start.elapsed().as_secs_f64();
            for r in &eval_rows {
                rows.push(MetricsRow {
                    model: "pooled".into(),
                    n_train: spec.pooled_size,
                    rep,
                    cond_t: r.cond_t,
                    rmse: r.rmse,
                    nll: r.nll,
                    runtime_s: runtime,
                    seed: data_seed,
                });
            }
            state.done.push(unit);
            flush(&state, &rows, &mllh)?;
        }
    }

    flush(&state, &rows, &mllh)?;
    Ok(ReproduceSummary {
        rows,
        mllh,
        complete,
    })
}
