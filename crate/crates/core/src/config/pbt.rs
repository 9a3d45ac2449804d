//! Population-based training.
//!
//! Each generation every member trains for a fixed number of epochs from its
//! own checkpoint. Members are then ranked by the best smoothed validation
//! loss of their lineage; each bottom-quantile member copies the checkpoint
//! of a random top-quantile member (exploit) and then perturbs or resamples
//! the copied hyperparameters (explore). Only the coordinator touches the
//! population; workers see a config and a checkpoint path.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::compose::{compose, RunConfig};
use super::instantiate::{Experiment, Registry};
use super::node::Node;
use super::runner::{run_pool, JobSpan};
use super::search::{as_overrides, Assignment, SearchSpace};
use crate::data::container::write_atomic;
use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::train::CheckpointRecord;

#[derive(Clone, Debug, PartialEq)]
pub struct PbtConfig {
    pub population: usize,
    pub generations: usize,
    pub generation_epochs: u64,
    /// Fraction of the population replaced each generation.
    pub exploit_quantile: f64,
    pub perturb_factors: Vec<f64>,
    /// Chance that a continuous value is perturbed rather than resampled.
    pub perturb_prob: f64,
    pub workers: usize,
    pub seed: u64,
}

impl Default for PbtConfig {
    fn default() -> Self {
        Self {
            population: 4,
            generations: 3,
            generation_epochs: 5,
            exploit_quantile: 0.25,
            perturb_factors: vec![0.8, 1.2],
            perturb_prob: 0.5,
            workers: 1,
            seed: 0,
        }
    }
}

impl PbtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::Config("population must be at least 2".into()));
        }
        if !(self.exploit_quantile > 0.0 && self.exploit_quantile <= 0.5) {
            return Err(Error::Config(format!(
                "exploit_quantile {} outside (0, 0.5]",
                self.exploit_quantile
            )));
        }
        if self.perturb_factors.is_empty() || self.perturb_factors.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::Config("perturb_factors must be positive and non-empty".into()));
        }
        if self.generations == 0 || self.generation_epochs == 0 || self.workers == 0 {
            return Err(Error::Config(
                "generations, generation_epochs and workers must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Members replaced per generation: `floor(population * quantile)`, at least one.
    pub fn n_exploit(&self) -> usize {
        ((self.population as f64 * self.exploit_quantile).floor() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub id: usize,
    pub hps: Assignment,
    /// Checkpoint the next generation starts from; `None` before the first.
    pub ckpt: Option<PathBuf>,
    /// Last smoothed validation loss.
    pub smoothed: f64,
    /// Best smoothed validation loss of this member's lineage.
    pub best: f64,
    /// Set the learning rate from `trainer.lr_init` at the next start.
    pub reset_lr: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Explore {
    Perturbed { factor: f64 },
    Resampled,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PbtEvent {
    Exploit {
        generation: usize,
        target: usize,
        source: usize,
        /// Checkpoint copied from the source.
        from: PathBuf,
        /// The copy the target resumes from.
        to: PathBuf,
    },
    Explore {
        generation: usize,
        member: usize,
        path: String,
        old: Node,
        new: Node,
        how: Explore,
    },
    Crash {
        generation: usize,
        member: usize,
        error: String,
    },
}

/// Population snapshot after one generation's training, before exploit.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRecord {
    pub generation: usize,
    pub members: Vec<Member>,
    /// Lowest lineage-best smoothed validation loss in the population.
    pub best: f64,
    pub spans: Vec<JobSpan>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PopulationState {
    pub generation: usize,
    pub members: Vec<Member>,
    pub events: Vec<PbtEvent>,
    pub history: Vec<GenerationRecord>,
}

struct Trained {
    ckpt: PathBuf,
    smoothed: f64,
    best: f64,
}

fn member_dir(root: &Path, id: usize) -> PathBuf {
    root.join(format!("member_{id:02}"))
}

fn train_member(
    base: &RunConfig,
    data: &Arc<TrialDataset>,
    member: &Member,
    generation: usize,
    epochs: u64,
    root: &Path,
) -> Result<Trained> {
    let cfg = base.with_overrides(&as_overrides(&member.hps))?;
    let exp = Experiment::from_config(&cfg, &Registry::standard())?;
    let dir = member_dir(root, member.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_atomic(
        &dir.join(format!("config_gen{generation:03}.resolved")),
        cfg.text.as_bytes(),
    )?;
    let mut t = exp.build_trainer_on(data.clone(), &cfg.hash)?.with_run_dir(&dir)?;
    t.config.max_epochs = u64::MAX;
    t.config.early_stop_patience = u64::MAX;
    if let Some(p) = &member.ckpt {
        // hyperparameters differ across members, so the config hash cannot match
        let rec = CheckpointRecord::load(p)?;
        t.restore(&rec)?;
        t.config_hash = cfg.hash.clone();
        t.state.stopped = false;
    }
    if member.reset_lr {
        t.state.lr = t.config.lr_init;
    }
    t.run_epochs(epochs)?;
    let ckpt = dir.join(format!("gen{generation:03}.ckpt"));
    t.checkpoint().save(&ckpt)?;
    Ok(Trained {
        ckpt,
        smoothed: t.state.smoothed.unwrap_or(f64::INFINITY),
        best: t.state.best_smoothed,
    })
}

/// Runs population-based training and returns the full history. Event and
/// generation logs are written under `out_root`.
pub fn run_pbt(
    main: &Path,
    overrides: &[String],
    space: &SearchSpace,
    cfg: &PbtConfig,
    out_root: &Path,
) -> Result<PopulationState> {
    cfg.validate()?;
    let base = compose(main, overrides)?;
    space.validate(&base.root)?;
    if let Some(p) = space.entries.keys().find(|p| p.starts_with("datamodule")) {
        return Err(Error::node(
            p,
            "the population shares one dataset; data settings cannot be searched",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut members: Vec<Member> = (0..cfg.population)
        .map(|id| Member {
            id,
            hps: space.sample(&mut rng),
            ckpt: None,
            smoothed: f64::INFINITY,
            best: f64::INFINITY,
            reset_lr: false,
        })
        .collect();
    for m in &members {
        let c = base.with_overrides(&as_overrides(&m.hps))?;
        Experiment::from_config(&c, &Registry::standard())?;
    }
    let data = Arc::new(Experiment::from_config(&base, &Registry::standard())?.data.load()?);
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    let mut state = PopulationState {
        generation: 0,
        members: Vec::new(),
        events: Vec::new(),
        history: Vec::new(),
    };
    for g in 0..cfg.generations {
        let (results, spans) = run_pool(members.len(), cfg.workers, |i| {
            train_member(&base, &data, &members[i], g, cfg.generation_epochs, out_root)
        });
        let mut crashed = vec![false; members.len()];
        for (i, r) in results.into_iter().enumerate() {
            let m = &mut members[i];
            m.reset_lr = false;
            match r {
                Ok(t) => {
                    m.ckpt = Some(t.ckpt);
                    m.smoothed = t.smoothed;
                    m.best = t.best;
                }
                Err(e) => {
                    log::warn!("member {i} crashed in generation {g}: {e}");
                    crashed[i] = true;
                    m.smoothed = f64::INFINITY;
                    m.best = f64::INFINITY;
                    state.events.push(PbtEvent::Crash {
                        generation: g,
                        member: i,
                        error: e.to_string(),
                    });
                }
            }
        }
        let best = members.iter().map(|m| m.best).fold(f64::INFINITY, f64::min);
        state.history.push(GenerationRecord {
            generation: g,
            members: members.clone(),
            best,
            spans,
        });
        if crashed.iter().all(|&c| c) {
            return Err(Error::Config(format!("every member crashed in generation {g}")));
        }
        if g + 1 < cfg.generations {
            exploit_and_explore(
                &mut members,
                &crashed,
                space,
                cfg,
                g,
                out_root,
                &mut rng,
                &mut state.events,
            )?;
        }
        state.generation = g + 1;
    }
    state.members = members;
    write_logs(&state, out_root)?;
    Ok(state)
}

/// Ranks by lineage-best loss (ties by id) and returns member ids, best first.
pub fn rank(members: &[Member]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| members[a].best.total_cmp(&members[b].best).then(a.cmp(&b)));
    order
}

#[allow(clippy::too_many_arguments)]
fn exploit_and_explore(
    members: &mut [Member],
    crashed: &[bool],
    space: &SearchSpace,
    cfg: &PbtConfig,
    generation: usize,
    root: &Path,
    rng: &mut ChaCha8Rng,
    events: &mut Vec<PbtEvent>,
) -> Result<()> {
    let order = rank(members);
    let q = cfg.n_exploit();
    let top: Vec<usize> = order[..q].iter().copied().filter(|&i| !crashed[i]).collect();
    let mut bottom: Vec<usize> = order[order.len() - q..].to_vec();
    // crashed members restart even when they are not in the bottom slice
    let extra: Vec<usize> = (0..members.len())
        .filter(|&i| crashed[i] && !bottom.contains(&i))
        .collect();
    bottom.extend(extra);
    let top = if top.is_empty() {
        order.iter().copied().filter(|&i| !crashed[i]).take(1).collect()
    } else {
        top
    };
    for &target in &bottom {
        if top.contains(&target) {
            continue;
        }
        let source = top[rng.random_range(0..top.len())];
        let from = members[source].ckpt.clone().expect("trained members have checkpoints");
        let to = member_dir(root, target).join(format!("exploit_gen{generation:03}.ckpt"));
        fs::create_dir_all(to.parent().unwrap()).map_err(|e| Error::io(&to, e))?;
        fs::copy(&from, &to).map_err(|e| Error::io(&to, e))?;
        events.push(PbtEvent::Exploit {
            generation,
            target,
            source,
            from,
            to: to.clone(),
        });
        let src = members[source].clone();
        let m = &mut members[target];
        m.ckpt = Some(to);
        m.best = src.best;
        m.smoothed = src.smoothed;
        let mut hps = src.hps.clone();
        for (path, sampler) in &space.entries {
            let old = hps[path].clone();
            let resample_all = crashed[target];
            let (new, how) = if matches!(sampler, super::search::Sampler::Const(_)) {
                continue;
            } else if sampler.is_continuous() && !resample_all && rng.random::<f64>() < cfg.perturb_prob {
                let f = cfg.perturb_factors[rng.random_range(0..cfg.perturb_factors.len())];
                (
                    sampler.perturb(&old, f).expect("continuous samplers perturb"),
                    Explore::Perturbed { factor: f },
                )
            } else {
                (sampler.sample(rng), Explore::Resampled)
            };
            if path == "trainer.lr_init" {
                m.reset_lr = true;
            }
            events.push(PbtEvent::Explore {
                generation,
                member: target,
                path: path.clone(),
                old,
                new: new.clone(),
                how,
            });
            hps.insert(path.clone(), new);
        }
        m.hps = hps;
    }
    Ok(())
}

fn write_logs(state: &PopulationState, root: &Path) -> Result<()> {
    let mut gens = String::from("generation,member,smoothed,lineage_best,hyperparameters\n");
    for rec in &state.history {
        for m in &rec.members {
            let hps: Vec<String> = as_overrides(&m.hps);
            let _ = writeln!(
                gens,
                "{},{},{:?},{:?},\"{}\"",
                rec.generation,
                m.id,
                m.smoothed,
                m.best,
                hps.join(" ")
            );
        }
    }
    write_atomic(&root.join("pbt_generations.csv"), gens.as_bytes())?;
    let mut ev = String::new();
    for e in &state.events {
        let _ = match e {
            PbtEvent::Exploit {
                generation,
                target,
                source,
                ..
            } => writeln!(ev, "gen {generation}: member {target} exploits member {source}"),
            PbtEvent::Explore {
                generation,
                member,
                path,
                old,
                new,
                how,
            } => writeln!(
                ev,
                "gen {generation}: member {member} {path}: {} -> {} ({how:?})",
                old.to_yaml().trim_end(),
                new.to_yaml().trim_end()
            ),
            PbtEvent::Crash {
                generation,
                member,
                error,
            } => writeln!(ev, "gen {generation}: member {member} crashed: {error}"),
        };
    }
    write_atomic(&root.join("pbt_events.log"), ev.as_bytes())
}
