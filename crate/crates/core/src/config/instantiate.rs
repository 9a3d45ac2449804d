//! Building objects from `_target_` nodes, children before parents.

use std::path::PathBuf;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::compose::RunConfig;
use super::node::Node;
use crate::augment::{
    Augmentation, AugmentationStack, CoordinatedDropout, ObservedSteps, SelectiveBackpropThruTime, TemporalShift,
};
use crate::data::lorenz::{generate_lorenz, LorenzConfig};
use crate::data::{DataDims, TrialDataset};
use crate::error::{Error, Result};
use crate::model::{Lfads, LfadsConfig};
use crate::priors::{AutoregressiveMultivariateNormal, MultivariateNormal, MultivariateStudentT, Prior};
use crate::recon::{Gamma, Gaussian, ObservationModel, Poisson, ZeroInflatedGamma};
use crate::train::{Trainer, TrainerConfig};

pub const TARGET_KEY: &str = "_target_";

/// Where the trials come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataModule {
    Lorenz(LorenzConfig),
    File(PathBuf),
}

impl DataModule {
    pub fn load(&self) -> Result<TrialDataset> {
        match self {
            DataModule::Lorenz(cfg) => generate_lorenz(cfg),
            DataModule::File(p) => TrialDataset::load(p),
        }
    }
}

/// Everything needed to build the network once the data dimensions are known.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub config: LfadsConfig,
    pub ic_prior: Box<dyn Prior>,
    pub co_prior: Option<Box<dyn Prior>>,
    pub reconstruction: Box<dyn ObservationModel>,
}

impl ModelSpec {
    pub fn build(&self, dims: DataDims, seed: u64) -> Result<Lfads> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // keep initialization draws apart from the training stream
        rng.set_stream(1);
        let co = if self.config.co_dim == 0 {
            None
        } else {
            self.co_prior.clone()
        };
        Lfads::new(
            self.config.clone(),
            dims,
            self.reconstruction.clone(),
            self.ic_prior.clone(),
            co,
            &mut rng,
        )
    }
}

/// Result of instantiating one node.
#[derive(Debug)]
pub enum Object {
    Value(Node),
    List(Vec<Object>),
    Map(IndexMap<String, Object>),
    Prior(Box<dyn Prior>),
    Reconstruction(Box<dyn ObservationModel>),
    Augmentation(Augmentation),
    Stack(AugmentationStack),
    Data(DataModule),
    Model(Box<ModelSpec>),
    Trainer(TrainerConfig),
}

impl Object {
    fn kind(&self) -> &'static str {
        match self {
            Object::Value(n) => n.type_name(),
            Object::List(_) => "list",
            Object::Map(_) => "map",
            Object::Prior(_) => "prior",
            Object::Reconstruction(_) => "observation model",
            Object::Augmentation(_) => "augmentation",
            Object::Stack(_) => "augmentation stack",
            Object::Data(_) => "data module",
            Object::Model(_) => "model",
            Object::Trainer(_) => "trainer",
        }
    }
}

/// Named arguments of one `_target_` node, already instantiated.
pub struct Args {
    path: String,
    values: IndexMap<String, Object>,
}

impl Args {
    pub fn path(&self) -> &str {
        &self.path
    }

    fn child(&self, name: &str) -> String {
        format!("{}.{name}", self.path).trim_start_matches('.').to_string()
    }

    fn mismatch(&self, name: &str, want: &str, got: &Object) -> Error {
        Error::node(&self.child(name), format!("expected {want}, found {}", got.kind()))
    }

    /// Removes an argument; `None` when absent or null.
    pub fn take(&mut self, name: &str) -> Option<Object> {
        match self.values.shift_remove(name) {
            Some(Object::Value(Node::Null)) | None => None,
            some => some,
        }
    }

    pub fn opt_f64(&mut self, name: &str) -> Result<Option<f64>> {
        match self.take(name) {
            None => Ok(None),
            Some(Object::Value(n)) if n.as_f64().is_some() => Ok(n.as_f64()),
            Some(o) => Err(self.mismatch(name, "a number", &o)),
        }
    }

    pub fn f64(&mut self, name: &str, default: f64) -> Result<f64> {
        Ok(self.opt_f64(name)?.unwrap_or(default))
    }

    pub fn req_f64(&mut self, name: &str) -> Result<f64> {
        self.opt_f64(name)?
            .ok_or_else(|| Error::node(&self.child(name), "missing required argument"))
    }

    pub fn opt_u64(&mut self, name: &str) -> Result<Option<u64>> {
        match self.take(name) {
            None => Ok(None),
            Some(Object::Value(Node::Int(i))) if i >= 0 => Ok(Some(i as u64)),
            Some(o) => Err(self.mismatch(name, "a non-negative integer", &o)),
        }
    }

    pub fn u64(&mut self, name: &str, default: u64) -> Result<u64> {
        Ok(self.opt_u64(name)?.unwrap_or(default))
    }

    pub fn usize(&mut self, name: &str, default: usize) -> Result<usize> {
        Ok(self.opt_u64(name)?.map_or(default, |v| v as usize))
    }

    pub fn req_usize(&mut self, name: &str) -> Result<usize> {
        self.opt_u64(name)?
            .map(|v| v as usize)
            .ok_or_else(|| Error::node(&self.child(name), "missing required argument"))
    }

    pub fn bool(&mut self, name: &str, default: bool) -> Result<bool> {
        match self.take(name) {
            None => Ok(default),
            Some(Object::Value(Node::Bool(b))) => Ok(b),
            Some(o) => Err(self.mismatch(name, "a bool", &o)),
        }
    }

    pub fn req_str(&mut self, name: &str) -> Result<String> {
        match self.take(name) {
            None => Err(Error::node(&self.child(name), "missing required argument")),
            Some(Object::Value(Node::Str(s))) => Ok(s),
            Some(o) => Err(self.mismatch(name, "a string", &o)),
        }
    }

    pub fn prior(&mut self, name: &str) -> Result<Option<Box<dyn Prior>>> {
        match self.take(name) {
            None => Ok(None),
            Some(Object::Prior(p)) => Ok(Some(p)),
            Some(o) => Err(self.mismatch(name, "a prior", &o)),
        }
    }

    pub fn reconstruction(&mut self, name: &str) -> Result<Option<Box<dyn ObservationModel>>> {
        match self.take(name) {
            None => Ok(None),
            Some(Object::Reconstruction(r)) => Ok(Some(r)),
            Some(o) => Err(self.mismatch(name, "an observation model", &o)),
        }
    }

    pub fn augmentations(&mut self, name: &str) -> Result<Vec<Augmentation>> {
        match self.take(name) {
            None => Ok(Vec::new()),
            Some(Object::List(items)) => items
                .into_iter()
                .enumerate()
                .map(|(i, o)| match o {
                    Object::Augmentation(a) => Ok(a),
                    o => Err(self.mismatch(&format!("{name}.{i}"), "an augmentation", &o)),
                })
                .collect(),
            Some(o) => Err(self.mismatch(name, "a list of augmentations", &o)),
        }
    }

    pub fn usize_list(&mut self, name: &str) -> Result<Option<Vec<usize>>> {
        match self.take(name) {
            None => Ok(None),
            Some(Object::List(items)) => items
                .into_iter()
                .enumerate()
                .map(|(i, o)| match o {
                    Object::Value(Node::Int(v)) if v >= 0 => Ok(v as usize),
                    o => Err(self.mismatch(&format!("{name}.{i}"), "a non-negative integer", &o)),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(o) => Err(self.mismatch(name, "a list of integers", &o)),
        }
    }

    /// Rejects arguments nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.values.keys().next() {
            Some(k) => Err(Error::node(&self.child(k), "unexpected argument")),
            None => Ok(()),
        }
    }
}

/// Checks a constructor's own validation error and pins it to the node path.
fn at<T>(path: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::ConfigNode { .. } => e,
        other => Error::node(path, other.to_string()),
    })
}

pub type Constructor = fn(&mut Args) -> Result<Object>;

pub struct Registry {
    ctors: IndexMap<String, Constructor>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::standard()
    }
}

impl Registry {
    pub fn empty() -> Self {
        Self { ctors: IndexMap::new() }
    }

    /// Every built-in component, including the short aliases.
    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register("MultivariateNormal", build_mvn);
        r.register("AutoregressiveMultivariateNormal", build_ar_mvn);
        r.register("MultivariateStudentT", build_student_t);
        for name in ["Poisson", "PoissonModel"] {
            r.register(name, |_| Ok(Object::Reconstruction(Box::new(Poisson))));
        }
        for name in ["Gaussian", "GaussianModel"] {
            r.register(name, |a| {
                let tied = a.bool("tied_variance", false)?;
                Ok(Object::Reconstruction(Box::new(Gaussian::new(tied))))
            });
        }
        for name in ["Gamma", "GammaModel"] {
            r.register(name, |_| Ok(Object::Reconstruction(Box::new(Gamma))));
        }
        for name in ["ZeroInflatedGamma", "ZIGModel", "ZeroInflatedGammaModel"] {
            r.register(name, |a| {
                let offset = a.f64("offset", 0.0)?;
                Ok(Object::Reconstruction(Box::new(ZeroInflatedGamma::new(offset))))
            });
        }
        r.register("CoordinatedDropout", build_cd);
        r.register("SelectiveBackpropThruTime", build_sbtt);
        r.register("TemporalShift", build_shift);
        r.register("AugmentationStack", |a| {
            let transforms = a.augmentations("transforms")?;
            Ok(Object::Stack(AugmentationStack::new(transforms)))
        });
        r.register("LorenzDataModule", build_lorenz);
        r.register("FileDataModule", |a| {
            let path = a.req_str("path")?;
            Ok(Object::Data(DataModule::File(path.into())))
        });
        r.register("LFADS", build_lfads);
        r.register("Trainer", build_trainer_config);
        r
    }

    pub fn register(&mut self, name: &str, ctor: Constructor) {
        self.ctors.insert(name.to_string(), ctor);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.ctors.contains_key(name)
    }

    /// Instantiates `node` depth-first. Nodes without `_target_` become
    /// plain values, lists or maps of instantiated children.
    pub fn instantiate(&self, node: &Node, path: &str) -> Result<Object> {
        self.check_targets(node, path)?;
        self.build(node, path)
    }

    /// Fails on the first unknown `_target_` anywhere under `node`.
    pub fn check_targets(&self, node: &Node, path: &str) -> Result<()> {
        let join = |k: &str| {
            if path.is_empty() {
                k.to_string()
            } else {
                format!("{path}.{k}")
            }
        };
        match node {
            Node::Map(m) => {
                if let Some(t) = m.get(TARGET_KEY) {
                    let name = t
                        .as_str()
                        .ok_or_else(|| Error::node(&join(TARGET_KEY), "target must be a string"))?;
                    if !self.contains(name) {
                        return Err(Error::node(path, format!("unknown target `{name}`")));
                    }
                }
                m.iter().try_for_each(|(k, v)| self.check_targets(v, &join(k)))
            }
            Node::List(l) => l
                .iter()
                .enumerate()
                .try_for_each(|(i, v)| self.check_targets(v, &join(&i.to_string()))),
            _ => Ok(()),
        }
    }

    fn build(&self, node: &Node, path: &str) -> Result<Object> {
        let join = |k: &str| {
            if path.is_empty() {
                k.to_string()
            } else {
                format!("{path}.{k}")
            }
        };
        match node {
            Node::List(l) => Ok(Object::List(
                l.iter()
                    .enumerate()
                    .map(|(i, v)| self.build(v, &join(&i.to_string())))
                    .collect::<Result<_>>()?,
            )),
            Node::Map(m) => {
                let mut values = IndexMap::new();
                for (k, v) in m.iter().filter(|(k, _)| *k != TARGET_KEY) {
                    values.insert(k.clone(), self.build(v, &join(k))?);
                }
                match m.get(TARGET_KEY).and_then(Node::as_str) {
                    None => Ok(Object::Map(values)),
                    Some(name) => {
                        let ctor = self.ctors[name];
                        let mut args = Args {
                            path: path.to_string(),
                            values,
                        };
                        let obj = ctor(&mut args)?;
                        args.finish()?;
                        Ok(obj)
                    }
                }
            }
            leaf => Ok(Object::Value(leaf.clone())),
        }
    }
}

fn build_mvn(a: &mut Args) -> Result<Object> {
    let dim = a.req_usize("dim")?;
    let mean = a.f64("mean", 0.0)?;
    let var = a.f64("variance", 1.0)?;
    let mean_tr = a.bool("mean_trainable", false)?;
    let var_tr = a.bool("variance_trainable", true)?;
    if !(var > 0.0) {
        return Err(Error::node(
            &a.child("variance"),
            format!("must be positive, got {var}"),
        ));
    }
    Ok(Object::Prior(Box::new(MultivariateNormal::new(
        dim, mean, var, mean_tr, var_tr,
    ))))
}

fn build_ar_mvn(a: &mut Args) -> Result<Object> {
    let dim = a.req_usize("dim")?;
    let tau = a.f64("tau", 10.0)?;
    let nvar = a.f64("process_variance", 0.1)?;
    let trainable = a.bool("trainable", true)?;
    if !(tau > 0.0 && nvar > 0.0) {
        return Err(Error::node(a.path(), "tau and process_variance must be positive"));
    }
    Ok(Object::Prior(Box::new(AutoregressiveMultivariateNormal::new(
        dim, tau, nvar, trainable,
    ))))
}

fn build_student_t(a: &mut Args) -> Result<Object> {
    let dim = a.req_usize("dim")?;
    let df = a.f64("df", 5.0)?;
    let scale = a.f64("scale", 1.0)?;
    let df_tr = a.bool("df_trainable", false)?;
    let scale_tr = a.bool("scale_trainable", true)?;
    if !(df > 0.0 && scale > 0.0) {
        return Err(Error::node(a.path(), "df and scale must be positive"));
    }
    Ok(Object::Prior(Box::new(MultivariateStudentT::new(
        dim, df, scale, df_tr, scale_tr,
    ))))
}

fn build_cd(a: &mut Args) -> Result<Object> {
    let rate = a.req_f64("cd_rate")?;
    let rescale = a.bool("rescale", true)?;
    let mut cd = at(a.path(), CoordinatedDropout::new(rate))?;
    cd.rescale = rescale;
    Ok(Object::Augmentation(Augmentation::CoordinatedDropout(cd)))
}

fn build_sbtt(a: &mut Args) -> Result<Object> {
    let steps = a.usize_list("observed")?;
    let every = a.opt_u64("every")?;
    let offset = a.usize("offset", 0)?;
    let observed = match (steps, every) {
        (Some(s), None) => ObservedSteps::List(s),
        (None, Some(k)) => ObservedSteps::EveryK { k: k as usize, offset },
        _ => return Err(Error::node(a.path(), "give exactly one of `observed` or `every`")),
    };
    let sbtt = at(a.path(), SelectiveBackpropThruTime::new(observed))?;
    Ok(Object::Augmentation(Augmentation::SelectiveBackpropThruTime(sbtt)))
}

fn build_shift(a: &mut Args) -> Result<Object> {
    let mut t = TemporalShift::new(a.req_usize("max_shift")?);
    t.relative = a.bool("relative", t.relative)?;
    t.per_neuron = a.bool("per_neuron", t.per_neuron)?;
    t.mask_vacated = a.bool("mask_vacated", t.mask_vacated)?;
    Ok(Object::Augmentation(Augmentation::TemporalShift(t)))
}

fn build_lorenz(a: &mut Args) -> Result<Object> {
    let d = LorenzConfig::default();
    let cfg = LorenzConfig {
        n_trials: a.usize("n_trials", d.n_trials)?,
        n_bins: a.usize("n_bins", d.n_bins)?,
        fp_bins: a.usize("fp_bins", d.fp_bins)?,
        dt: a.f64("dt", d.dt)?,
        n_neurons: a.usize("n_neurons", d.n_neurons)?,
        n_held_out: a.usize("n_held_out", d.n_held_out)?,
        base_rate: a.f64("base_rate", d.base_rate)?,
        log_rate_gain: a.f64("log_rate_gain", d.log_rate_gain)?,
        valid_fraction: a.f64("valid_fraction", d.valid_fraction)?,
        burn_in: a.usize("burn_in", d.burn_in)?,
        sigma: a.f64("sigma", d.sigma)?,
        rho: a.f64("rho", d.rho)?,
        beta: a.f64("beta", d.beta)?,
        seed: a.u64("seed", d.seed)?,
    };
    at(a.path(), cfg.validate())?;
    Ok(Object::Data(DataModule::Lorenz(cfg)))
}

fn build_lfads(a: &mut Args) -> Result<Object> {
    let d = LfadsConfig::default();
    let config = LfadsConfig {
        ic_enc_dim: a.usize("ic_enc_dim", d.ic_enc_dim)?,
        ci_enc_dim: a.usize("ci_enc_dim", d.ci_enc_dim)?,
        ic_dim: a.usize("ic_dim", d.ic_dim)?,
        ci_lag: a.usize("ci_lag", d.ci_lag)?,
        con_dim: a.usize("con_dim", d.con_dim)?,
        co_dim: a.usize("co_dim", d.co_dim)?,
        gen_dim: a.usize("gen_dim", d.gen_dim)?,
        fac_dim: a.usize("fac_dim", d.fac_dim)?,
        dropout_rate: a.f64("dropout_rate", d.dropout_rate)?,
        cell_clip: a.f64("cell_clip", d.cell_clip)?,
        kl_ic_scale: a.f64("kl_ic_scale", d.kl_ic_scale)?,
        kl_co_scale: a.f64("kl_co_scale", d.kl_co_scale)?,
        l2_gen_scale: a.f64("l2_gen_scale", d.l2_gen_scale)?,
        l2_con_scale: a.f64("l2_con_scale", d.l2_con_scale)?,
        kl_start: a.u64("kl_start", d.kl_start)?,
        kl_increase: a.u64("kl_increase", d.kl_increase)?,
        l2_start: a.u64("l2_start", d.l2_start)?,
        l2_increase: a.u64("l2_increase", d.l2_increase)?,
    };
    at(a.path(), config.validate())?;
    let ic_prior = a
        .prior("ic_prior")?
        .unwrap_or_else(|| Box::new(MultivariateNormal::standard(config.ic_dim)));
    let co_prior = a.prior("co_prior")?;
    if config.co_dim > 0 && co_prior.is_none() {
        return Err(Error::node(&a.child("co_prior"), "required when co_dim > 0"));
    }
    let mut checks = vec![("ic_prior", ic_prior.dim(), config.ic_dim)];
    if let (Some(p), true) = (&co_prior, config.co_dim > 0) {
        checks.push(("co_prior", p.dim(), config.co_dim));
    }
    for (name, have, want) in checks {
        if have != want {
            return Err(Error::node(
                &a.child(name),
                format!("prior has dim {have} but the model needs {want}"),
            ));
        }
    }
    let reconstruction = a.reconstruction("reconstruction")?.unwrap_or_else(|| Box::new(Poisson));
    Ok(Object::Model(Box::new(ModelSpec {
        config,
        ic_prior,
        co_prior,
        reconstruction,
    })))
}

fn build_trainer_config(a: &mut Args) -> Result<Object> {
    let d = TrainerConfig::default();
    let cfg = TrainerConfig {
        lr_init: a.f64("lr_init", d.lr_init)?,
        lr_decay: a.f64("lr_decay", d.lr_decay)?,
        lr_patience: a.u64("lr_patience", d.lr_patience)?,
        lr_min: a.f64("lr_min", d.lr_min)?,
        adam_beta1: a.f64("adam_beta1", d.adam_beta1)?,
        adam_beta2: a.f64("adam_beta2", d.adam_beta2)?,
        adam_eps: a.f64("adam_eps", d.adam_eps)?,
        grad_clip: a.f64("grad_clip", d.grad_clip)?,
        max_epochs: a.u64("max_epochs", d.max_epochs)?,
        early_stop_patience: a.u64("early_stop_patience", d.early_stop_patience)?,
        batch_size: a.usize("batch_size", d.batch_size)?,
        smoothing: a.f64("smoothing", d.smoothing)?,
        ckpt_every: a.u64("ckpt_every", d.ckpt_every)?,
        log_every: a.u64("log_every", d.log_every)?,
        seed: a.u64("seed", d.seed)?,
    };
    at(a.path(), cfg.validate())?;
    Ok(Object::Trainer(cfg))
}

/// The wired-up experiment described by a run configuration.
#[derive(Debug)]
pub struct Experiment {
    pub model: ModelSpec,
    pub data: DataModule,
    pub trainer: TrainerConfig,
    pub train_aug: AugmentationStack,
    pub infer_aug: AugmentationStack,
    /// Posterior samples averaged for the saved rates.
    pub posterior_samples: usize,
}

const ROOT_KEYS: [&str; 6] = [
    "model",
    "datamodule",
    "trainer",
    "augmentations",
    "posterior_samples",
    "name",
];

impl Experiment {
    pub fn from_config(cfg: &RunConfig, registry: &Registry) -> Result<Self> {
        let root = cfg
            .root
            .as_map()
            .ok_or_else(|| Error::node("", "configuration must be a map"))?;
        if let Some(k) = root.keys().find(|k| !ROOT_KEYS.contains(&k.as_str())) {
            return Err(Error::node(k, "unexpected top-level key"));
        }
        registry.check_targets(&cfg.root, "")?;
        let need = |k: &str| root.get(k).ok_or_else(|| Error::node(k, "missing required section"));
        let model = match registry.build(need("model")?, "model")? {
            Object::Model(m) => *m,
            o => return Err(Error::node("model", format!("expected a model, found {}", o.kind()))),
        };
        let data = match registry.build(need("datamodule")?, "datamodule")? {
            Object::Data(d) => d,
            o => {
                return Err(Error::node(
                    "datamodule",
                    format!("expected a data module, found {}", o.kind()),
                ))
            }
        };
        let trainer = match registry.build(need("trainer")?, "trainer")? {
            Object::Trainer(t) => t,
            o => {
                return Err(Error::node(
                    "trainer",
                    format!("expected a trainer, found {}", o.kind()),
                ))
            }
        };
        let (mut train_aug, mut infer_aug) = (AugmentationStack::default(), AugmentationStack::default());
        if let Some(node) = root.get("augmentations") {
            match registry.build(node, "augmentations")? {
                Object::Map(mut m) => {
                    for (key, slot) in [("train", &mut train_aug), ("infer", &mut infer_aug)] {
                        match m.shift_remove(key) {
                            None | Some(Object::Value(Node::Null)) => {}
                            Some(Object::Stack(s)) => *slot = s,
                            Some(o) => {
                                return Err(Error::node(
                                    &format!("augmentations.{key}"),
                                    format!("expected an augmentation stack, found {}", o.kind()),
                                ))
                            }
                        }
                    }
                    if let Some(k) = m.keys().next() {
                        return Err(Error::node(
                            &format!("augmentations.{k}"),
                            "expected `train` or `infer`",
                        ));
                    }
                }
                Object::Value(Node::Null) => {}
                o => {
                    return Err(Error::node(
                        "augmentations",
                        format!("expected a map, found {}", o.kind()),
                    ))
                }
            }
        }
        let posterior_samples = match root.get("posterior_samples") {
            None => 50,
            Some(Node::Int(n)) if *n >= 1 => *n as usize,
            Some(other) => {
                return Err(Error::node(
                    "posterior_samples",
                    format!("expected a positive integer, found {}", other.type_name()),
                ))
            }
        };
        Ok(Self {
            model,
            data,
            trainer,
            train_aug,
            infer_aug,
            posterior_samples,
        })
    }

    /// Builds the network for `dims` with both augmentation stacks attached.
    pub fn build_model(&self, dims: DataDims) -> Result<Lfads> {
        let mut m = self.model.build(dims, self.trainer.seed)?;
        m.train_aug = self.train_aug.clone();
        m.infer_aug = self.infer_aug.clone();
        Ok(m)
    }

    /// Loads the data and returns a ready-to-run trainer.
    pub fn build_trainer(&self, config_hash: &str) -> Result<Trainer> {
        let data = Arc::new(self.data.load()?);
        self.build_trainer_on(data, config_hash)
    }

    pub fn build_trainer_on(&self, data: Arc<TrialDataset>, config_hash: &str) -> Result<Trainer> {
        if !self.model.reconstruction.is_count_model() || data.is_count_data() {
            let model = self.build_model(data.dims())?;
            Trainer::new(model, data, self.trainer.clone(), config_hash.to_string())
        } else {
            Err(Error::Config(format!(
                "{} needs integer counts but the dataset holds other values",
                self.model.reconstruction.name()
            )))
        }
    }
}
