//! Single runs, seeded multi-run searches, and run evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::compose::{compose, RunConfig};
use super::instantiate::{Experiment, Registry};
use super::search::{as_overrides, Assignment, SearchSpace};
use crate::data::container::{write_atomic, Container, DType};
use crate::data::{Split, TrialBatch, TrialDataset};
use crate::error::{Error, Result};
use crate::metrics::{co_bps, fp_bps};
use crate::model::Lfads;
use crate::tensor::Tensor;
use crate::train::{load_params, CheckpointRecord, Trainer};

pub const RESOLVED_FILE: &str = "config.resolved";
pub const POSTERIOR_FILE: &str = "posterior_means.lfds";

/// Start and end of one pooled job, relative to the pool start.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JobSpan {
    pub job: usize,
    pub start: Duration,
    pub end: Duration,
}

/// Most jobs whose spans overlap at any instant.
pub fn max_concurrency(spans: &[JobSpan]) -> usize {
    let mut edges: Vec<(Duration, i32)> = spans.iter().flat_map(|s| [(s.start, 1), (s.end, -1)]).collect();
    // ends sort before starts at equal times
    edges.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    let (mut cur, mut best) = (0i32, 0i32);
    for (_, d) in edges {
        cur += d;
        best = best.max(cur);
    }
    best as usize
}

/// Runs `job(0..n_jobs)` on at most `n_workers` threads. Results come back
/// in job order with each job's time span.
pub fn run_pool<T, F>(n_jobs: usize, n_workers: usize, job: F) -> (Vec<T>, Vec<JobSpan>)
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let t0 = Instant::now();
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|s| {
        for _ in 0..n_workers.max(1).min(n_jobs.max(1)) {
            let tx = tx.clone();
            let (next, job) = (&next, &job);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n_jobs {
                    break;
                }
                let start = t0.elapsed();
                let out = job(i);
                let end = t0.elapsed();
                if tx.send((i, out, JobSpan { job: i, start, end })).is_err() {
                    break;
                }
            });
        }
    });
    drop(tx);
    let mut got: Vec<(usize, T, JobSpan)> = rx.into_iter().collect();
    got.sort_by_key(|g| g.0);
    let spans = got.iter().map(|g| g.2).collect();
    (got.into_iter().map(|g| g.1).collect(), spans)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub dir: PathBuf,
    /// Lowest smoothed validation loss seen.
    pub best_valid: f64,
    pub epochs: u64,
}

/// `runs/<config stem>-<first 12 hash digits>`.
pub fn default_run_dir(main: &Path, cfg: &RunConfig) -> PathBuf {
    let stem = main.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    PathBuf::from("runs").join(format!("{stem}-{}", &cfg.hash[..12]))
}

/// Composes `main` with `overrides`, trains, and returns the run directory.
pub fn run_single(main: &Path, overrides: &[String], run_dir: Option<&Path>) -> Result<PathBuf> {
    let cfg = compose(main, overrides)?;
    let dir = run_dir.map_or_else(|| default_run_dir(main, &cfg), Path::to_path_buf);
    run_config(&cfg, &dir).map(|o| o.dir)
}

/// Trains one composed config into `dir`: resolved snapshot, metrics,
/// checkpoints, loss curve and posterior-averaged outputs.
pub fn run_config(cfg: &RunConfig, dir: &Path) -> Result<RunOutcome> {
    let exp = Experiment::from_config(cfg, &Registry::standard())?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(RESOLVED_FILE), cfg.text.as_bytes())?;
    let mut trainer = exp.build_trainer(&cfg.hash)?.with_run_dir(dir)?;
    log::info!("training into {}", dir.display());
    trainer.fit()?;
    let best = dir.join("ckpt").join("best.ckpt");
    if best.exists() {
        let rec = CheckpointRecord::load_checked(&best, &cfg.hash)?;
        trainer.load_params(&rec.params)?;
    }
    write_posterior_means(&trainer.model, &trainer.dataset, &exp, &dir.join(POSTERIOR_FILE))?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        best_valid: trainer.state.best_smoothed,
        epochs: trainer.state.epoch,
    })
}

/// Posterior-averaged rates and factors for every trial of `split`.
pub fn posterior_means(
    model: &Lfads,
    split: &Split,
    samples: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    let idx: Vec<usize> = (0..split.n_trials()).collect();
    let (mut rates, mut factors) = (Vec::new(), Vec::new());
    for chunk in idx.chunks(batch_size.max(1)) {
        let avg = model.posterior_average(&TrialBatch::from_split(split, chunk), samples, rng)?;
        rates.push(avg.rates);
        factors.push(avg.factors);
    }
    Ok((
        Tensor::cat_rows(&rates.iter().collect::<Vec<_>>())?,
        Tensor::cat_rows(&factors.iter().collect::<Vec<_>>())?,
    ))
}

fn write_posterior_means(model: &Lfads, data: &TrialDataset, exp: &Experiment, path: &Path) -> Result<()> {
    let mut c = Container::new();
    for (stream, (name, split)) in [("train", &data.train), ("valid", &data.valid)].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(exp.trainer.seed);
        rng.set_stream(2 + stream as u64);
        let (rates, factors) = posterior_means(model, split, exp.posterior_samples, exp.trainer.batch_size, &mut rng)?;
        c.insert(format!("{name}_rates"), DType::F64, rates)?;
        c.insert(format!("{name}_factors"), DType::F64, factors)?;
    }
    c.save(path)
}

/// One sampled configuration of a search and how it went.
#[derive(Clone, Debug)]
pub struct SearchRun {
    pub index: usize,
    pub dir: PathBuf,
    pub values: Assignment,
    pub outcome: std::result::Result<RunOutcome, String>,
}

#[derive(Clone, Debug)]
pub struct SearchReport {
    /// Sorted by best validation loss; failed runs last.
    pub runs: Vec<SearchRun>,
    pub spans: Vec<JobSpan>,
}

/// Draws `n_samples` configs from `space` (seeded), trains them on at most
/// `n_workers` threads, and writes `summary.csv` under `out_root`. A failed
/// run is recorded and does not stop the others.
pub fn run_multi(
    main: &Path,
    overrides: &[String],
    space: &SearchSpace,
    n_samples: usize,
    n_workers: usize,
    seed: u64,
    out_root: &Path,
) -> Result<SearchReport> {
    if n_samples == 0 || n_workers == 0 {
        return Err(Error::Config("search needs at least one sample and one worker".into()));
    }
    let base = compose(main, overrides)?;
    space.validate(&base.root)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<Assignment> = (0..n_samples).map(|_| space.sample(&mut rng)).collect();
    // bad samples are caught before anything trains and recorded as failures
    let configs: Vec<std::result::Result<RunConfig, String>> = draws
        .iter()
        .map(|d| {
            let cfg = base.with_overrides(&as_overrides(d))?;
            Experiment::from_config(&cfg, &Registry::standard())?;
            Ok(cfg)
        })
        .map(|r: Result<RunConfig>| r.map_err(|e| e.to_string()))
        .collect();
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    let (outcomes, spans) = run_pool(n_samples, n_workers, |i| {
        let cfg = configs[i].as_ref().map_err(Clone::clone)?;
        let dir = out_root.join(format!("run_{i:03}"));
        log::info!("search run {i} starting");
        let r = run_config(cfg, &dir).map_err(|e| e.to_string());
        log::info!("search run {i} finished");
        r
    });
    let mut runs: Vec<SearchRun> = outcomes
        .into_iter()
        .enumerate()
        .map(|(i, outcome)| SearchRun {
            index: i,
            dir: out_root.join(format!("run_{i:03}")),
            values: draws[i].clone(),
            outcome,
        })
        .collect();
    let key = |r: &SearchRun| r.outcome.as_ref().map_or(f64::INFINITY, |o| o.best_valid);
    runs.sort_by(|a, b| key(a).total_cmp(&key(b)).then(a.index.cmp(&b.index)));
    write_atomic(&out_root.join("summary.csv"), search_summary(space, &runs).as_bytes())?;
    Ok(SearchReport { runs, spans })
}

fn search_summary(space: &SearchSpace, runs: &[SearchRun]) -> String {
    let mut s = String::from("rank,run,status,best_valid");
    for p in space.entries.keys() {
        let _ = write!(s, ",{p}");
    }
    s.push('\n');
    for (rank, r) in runs.iter().enumerate() {
        let (status, loss) = match &r.outcome {
            Ok(o) => ("ok".to_string(), format!("{:?}", o.best_valid)),
            Err(e) => (format!("\"failed: {}\"", e.replace('"', "'")), String::new()),
        };
        let _ = write!(s, "{rank},{},{status},{loss}", r.index);
        for v in r.values.values() {
            let _ = write!(s, ",{}", v.to_yaml().trim_end());
        }
        s.push('\n');
    }
    s
}

/// Co-smoothing and forward-prediction scores of a trained run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub split: &'static str,
    pub n_trials: usize,
    /// `None` when the data has no held-out neurons.
    pub co_bps: Option<f64>,
    /// `None` when the data has no forward-prediction steps.
    pub fp_bps: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Rebuilds the model of `run_dir`, loads its best (else last) checkpoint,
/// and scores posterior-averaged rates on the validation split of `data`.
pub fn evaluate_run(run_dir: &Path, data: &Path) -> Result<EvalReport> {
    let resolved = run_dir.join(RESOLVED_FILE);
    let text = fs::read_to_string(&resolved).map_err(|e| Error::io(&resolved, e))?;
    let cfg = RunConfig::from_resolved(&text)?;
    let exp = Experiment::from_config(&cfg, &Registry::standard())?;
    let dataset = TrialDataset::load(data)?;
    let mut model = exp.build_model(dataset.dims())?;
    let ckpt = ["best.ckpt", "last.ckpt"]
        .iter()
        .map(|f| run_dir.join("ckpt").join(f))
        .find(|p| p.exists())
        .ok_or_else(|| Error::Config(format!("no checkpoint under {}", run_dir.join("ckpt").display())))?;
    let rec = CheckpointRecord::load_checked(&ckpt, &cfg.hash)?;
    load_params(&mut model, &rec.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(exp.trainer.seed);
    rng.set_stream(3);
    let split = &dataset.valid;
    let (rates, _) = posterior_means(&model, split, exp.posterior_samples, exp.trainer.batch_size, &mut rng)?;
    let dims = dataset.dims();
    Ok(EvalReport {
        split: "valid",
        n_trials: split.n_trials(),
        co_bps: (dims.n_held_out() > 0)
            .then(|| co_bps(&rates, &split.recon_data, &dims))
            .transpose()?,
        fp_bps: (dims.fp_steps() > 0)
            .then(|| fp_bps(&rates, &split.recon_data, &dims))
            .transpose()?,
        checkpoint: ckpt,
    })
}

/// Trainer on `data` for a composed config, without a run directory.
pub fn trainer_for(cfg: &RunConfig, data: Arc<TrialDataset>) -> Result<Trainer> {
    Experiment::from_config(cfg, &Registry::standard())?.build_trainer_on(data, &cfg.hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    #[test]
    fn pool_respects_worker_limit_and_order() {
        let live = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        let (out, spans) = run_pool(6, 2, |i| {
            let now = live.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(20));
            live.fetch_sub(1, Ordering::SeqCst);
            i * 10
        });
        assert_eq!(out, [0, 10, 20, 30, 40, 50]);
        assert!(peak.load(Ordering::SeqCst) <= 2);
        assert!(max_concurrency(&spans) <= 2);
        assert_eq!(spans.len(), 6);
    }

    #[test]
    fn concurrency_from_spans() {
        let s = |job, a, b| JobSpan {
            job,
            start: Duration::from_millis(a),
            end: Duration::from_millis(b),
        };
        assert_eq!(max_concurrency(&[s(0, 0, 10), s(1, 10, 20)]), 1);
        assert_eq!(max_concurrency(&[s(0, 0, 10), s(1, 5, 20), s(2, 6, 7)]), 3);
    }
}
