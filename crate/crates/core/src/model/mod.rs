//! The LFADS sequential autoencoder.
//!
//! Data path for one batch:
//!
//! 1. a bidirectional IC encoder reads `encod_data`; its two final states
//!    give the initial-condition posterior, whose sample sets the
//!    generator's starting state through a linear map;
//! 2. a bidirectional CI encoder produces per-step context, with the
//!    backward stream delayed by `ci_lag` steps;
//! 3. at each step the controller reads `[ci_t, f_{t-1}]` and emits the
//!    inferred-input posterior, whose sample drives the generator;
//! 4. factors are a unit-row-norm linear readout of the generator state,
//!    and output parameters are an affine map of the factors.
//!
//! Steps beyond the encoder window feed the generator the inferred-input
//! prior mean.

pub mod gru;

use indexmap::IndexMap;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use crate::augment::{AugmentationStack, Phase};
use crate::autodiff::{Tape, Var};
use crate::data::{DataDims, TrialBatch};
use crate::error::{Error, Result};
use crate::priors::{kl_sampled, make_posterior, sample, GaussianPosterior, Param, Prior, Sampling};
use crate::recon::ObservationModel;
use crate::tensor::Tensor;

pub use gru::GruVars;

#[derive(Clone, Debug, PartialEq)]
pub struct LfadsConfig {
    pub ic_enc_dim: usize,
    pub ci_enc_dim: usize,
    pub ic_dim: usize,
    pub ci_lag: usize,
    pub con_dim: usize,
    /// Zero disables the controller and the CI encoder.
    pub co_dim: usize,
    pub gen_dim: usize,
    pub fac_dim: usize,
    pub dropout_rate: f64,
    pub cell_clip: f64,
    pub kl_ic_scale: f64,
    pub kl_co_scale: f64,
    pub l2_gen_scale: f64,
    pub l2_con_scale: f64,
    pub kl_start: u64,
    pub kl_increase: u64,
    pub l2_start: u64,
    pub l2_increase: u64,
}

impl Default for LfadsConfig {
    fn default() -> Self {
        Self {
            ic_enc_dim: 32,
            ci_enc_dim: 16,
            ic_dim: 16,
            ci_lag: 1,
            con_dim: 16,
            co_dim: 2,
            gen_dim: 48,
            fac_dim: 8,
            dropout_rate: 0.05,
            cell_clip: 5.0,
            kl_ic_scale: 1.0,
            kl_co_scale: 1.0,
            l2_gen_scale: 1.0,
            l2_con_scale: 1.0,
            kl_start: 0,
            kl_increase: 400,
            l2_start: 0,
            l2_increase: 400,
        }
    }
}

impl LfadsConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("ic_enc_dim", self.ic_enc_dim),
            ("ic_dim", self.ic_dim),
            ("gen_dim", self.gen_dim),
            ("fac_dim", self.fac_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.co_dim > 0 && (self.ci_enc_dim == 0 || self.con_dim == 0) {
            return Err(Error::Config("co_dim > 0 needs ci_enc_dim and con_dim >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        let weights = [
            ("kl_ic_scale", self.kl_ic_scale),
            ("kl_co_scale", self.kl_co_scale),
            ("l2_gen_scale", self.l2_gen_scale),
            ("l2_con_scale", self.l2_con_scale),
            ("cell_clip", self.cell_clip),
        ];
        for (name, v) in weights {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn kl_ramp(&self, step: u64) -> f64 {
        ramp(step, self.kl_start, self.kl_increase)
    }

    pub fn l2_ramp(&self, step: u64) -> f64 {
        ramp(step, self.l2_start, self.l2_increase)
    }
}

/// `clamp((step - start) / increase, 0, 1)`; a zero-length ramp is a step function.
pub fn ramp(step: u64, start: u64, increase: u64) -> f64 {
    if step < start {
        0.0
    } else if increase == 0 {
        1.0
    } else {
        ((step - start) as f64 / increase as f64).min(1.0)
    }
}

/// Every tensor of a model bound to one tape, in [`Lfads::params`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub all: Vec<Var>,
    n_model: usize,
    n_ic: usize,
    n_co: usize,
}

impl Bound {
    pub fn ic_prior(&self) -> &[Var] {
        &self.all[self.n_model..self.n_model + self.n_ic]
    }

    pub fn co_prior(&self) -> &[Var] {
        let s = self.n_model + self.n_ic;
        &self.all[s..s + self.n_co]
    }

    pub fn recon(&self) -> &[Var] {
        &self.all[self.n_model + self.n_ic + self.n_co..]
    }
}

#[derive(Clone, Debug)]
pub struct LfadsOutput {
    pub ic_post: GaussianPosterior,
    pub ic_sample: Var,
    /// `[B, T_enc, co_dim]` posterior and sample, absent without a controller.
    pub co_post: Option<GaussianPosterior>,
    pub co_sample: Option<Var>,
    /// `[B, T_recon, gen_dim]`
    pub gen_states: Var,
    /// `[B, T_recon, fac_dim]`
    pub factors: Var,
    /// `[B, T_recon, N_recon * n_params]`
    pub raw: Var,
}

/// Loss terms as they enter the total (already scaled and ramped).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub recon: f64,
    pub kl_ic: f64,
    pub kl_co: f64,
    pub l2: f64,
    pub total: f64,
    pub kl_ramp: f64,
    pub l2_ramp: f64,
}

impl LossComponents {
    pub fn describe(&self) -> String {
        format!(
            "recon={} kl_ic={} kl_co={} l2={} total={} kl_ramp={} l2_ramp={}",
            self.recon, self.kl_ic, self.kl_co, self.l2, self.total, self.kl_ramp, self.l2_ramp
        )
    }
}

/// Posterior-averaged denoised outputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorAverage {
    /// `[B, T_recon, N_recon]` averaged output means.
    pub rates: Tensor,
    pub factors: Tensor,
}

#[derive(Clone, Debug)]
pub struct Lfads {
    pub config: LfadsConfig,
    pub dims: DataDims,
    weights: IndexMap<String, Param>,
    pub recon: Box<dyn ObservationModel>,
    pub ic_prior: Box<dyn Prior>,
    /// Present exactly when `co_dim > 0`.
    pub co_prior: Option<Box<dyn Prior>>,
    pub train_aug: AugmentationStack,
    pub infer_aug: AugmentationStack,
}

fn gaussian(rng: &mut dyn RngCore, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            z * std
        })
        .collect()
}

/// `[n, n]` orthogonal matrix from Gram-Schmidt on a Gaussian draw.
fn orthogonal(rng: &mut dyn RngCore, n: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = (0..n).map(|_| gaussian(rng, n, 1.0)).collect();
    for j in 0..n {
        for k in 0..j {
            let d: f64 = (0..n).map(|i| cols[j][i] * cols[k][i]).sum();
            for i in 0..n {
                cols[j][i] -= d * cols[k][i];
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    let mut out = vec![0.0; n * n];
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            out[i * n + j] = *v;
        }
    }
    out
}

/// `[rows, k * n]` built from `k` side-by-side orthogonal `[n, n]` blocks.
fn orthogonal_blocks(rng: &mut dyn RngCore, n: usize, k: usize) -> Tensor {
    let blocks: Vec<Vec<f64>> = (0..k).map(|_| orthogonal(rng, n)).collect();
    let mut out = Vec::with_capacity(n * n * k);
    for i in 0..n {
        for b in &blocks {
            out.extend_from_slice(&b[i * n..(i + 1) * n]);
        }
    }
    Tensor::new(vec![n, k * n], out).expect("block layout")
}

fn normalize_rows(t: &mut Tensor) {
    let cols = t.shape()[1];
    for row in t.data_mut().chunks_mut(cols) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        // rows already at unit norm are left bit-for-bit alone
        if norm > 0.0 && (norm - 1.0).abs() > 1e-12 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

struct Init<'a> {
    rng: &'a mut dyn RngCore,
    weights: IndexMap<String, Param>,
}

impl Init<'_> {
    fn put(&mut self, name: String, value: Tensor) {
        self.weights.insert(name.clone(), Param::new(name, value, true));
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let w = gaussian(self.rng, fan_in * fan_out, 1.0 / (fan_in.max(1) as f64).sqrt());
        self.put(format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], w).unwrap());
        self.put(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    fn gru(&mut self, name: &str, input: usize, hidden: usize, h0: bool) {
        if input > 0 {
            let w = gaussian(self.rng, input * 3 * hidden, 1.0 / (input as f64).sqrt());
            self.put(format!("{name}.w_ih"), Tensor::new(vec![input, 3 * hidden], w).unwrap());
        }
        let mut b = vec![0.0; 3 * hidden];
        // update gate starts biased toward keeping the state
        b[hidden..2 * hidden].fill(1.0);
        self.put(format!("{name}.b"), Tensor::vector(b));
        let rz = orthogonal_blocks(self.rng, hidden, 2);
        self.put(format!("{name}.w_hh_rz"), rz);
        let n = orthogonal_blocks(self.rng, hidden, 1);
        self.put(format!("{name}.w_hh_n"), n);
        if h0 {
            self.put(format!("{name}.h0"), Tensor::zeros(&[hidden]));
        }
    }
}

fn dropout_mask(sampling: &mut Sampling<'_>, phase: Phase, rate: f64, shape: &[usize]) -> Option<Tensor> {
    if phase != Phase::Train || rate == 0.0 {
        return None;
    }
    let Sampling::Stochastic(rng) = sampling else {
        return None;
    };
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - rate);
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Some(Tensor::new(shape.to_vec(), data).expect("mask shape"))
}

fn apply_mask(tape: &mut Tape, x: Var, mask: Option<Tensor>) -> Result<Var> {
    match mask {
        Some(m) => {
            let m = tape.constant(m);
            tape.mul(x, m)
        }
        None => Ok(x),
    }
}

impl Lfads {
    pub fn new(
        config: LfadsConfig,
        dims: DataDims,
        mut recon: Box<dyn ObservationModel>,
        ic_prior: Box<dyn Prior>,
        co_prior: Option<Box<dyn Prior>>,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        config.validate()?;
        if dims.n_enc == 0 || dims.t_enc == 0 || dims.n_recon < dims.n_enc || dims.t_recon < dims.t_enc {
            return Err(Error::Config(format!("unusable data dimensions {dims:?}")));
        }
        if ic_prior.dim() != config.ic_dim {
            return Err(Error::Config(format!(
                "IC prior has dim {}, ic_dim is {}",
                ic_prior.dim(),
                config.ic_dim
            )));
        }
        match (&co_prior, config.co_dim) {
            (None, 0) => {}
            (Some(p), d) if p.dim() == d && d > 0 => {}
            (p, d) => {
                return Err(Error::Config(format!(
                    "CO prior dim {:?} does not fit co_dim {d}",
                    p.as_ref().map(|p| p.dim())
                )))
            }
        }
        recon.prepare(dims.n_recon);
        let c = &config;
        let mut init = Init {
            rng,
            weights: IndexMap::new(),
        };
        init.gru("ic_enc_fwd", dims.n_enc, c.ic_enc_dim, true);
        init.gru("ic_enc_bwd", dims.n_enc, c.ic_enc_dim, true);
        init.dense("ic_post", 2 * c.ic_enc_dim, 2 * c.ic_dim);
        if c.co_dim > 0 {
            init.gru("ci_enc_fwd", dims.n_enc, c.ci_enc_dim, true);
            init.gru("ci_enc_bwd", dims.n_enc, c.ci_enc_dim, true);
            init.gru("con", 2 * c.ci_enc_dim + c.fac_dim, c.con_dim, true);
            init.dense("co_post", c.con_dim, 2 * c.co_dim);
        }
        init.dense("ic_to_g0", c.ic_dim, c.gen_dim);
        init.gru("gen", c.co_dim, c.gen_dim, false);
        let mut fac = Tensor::new(
            vec![c.fac_dim, c.gen_dim],
            gaussian(init.rng, c.fac_dim * c.gen_dim, 1.0),
        )?;
        normalize_rows(&mut fac);
        init.put("fac.w".into(), fac);
        init.dense("out", c.fac_dim, dims.n_recon * recon.n_params());
        let weights = init.weights;
        Ok(Self {
            config,
            dims,
            weights,
            recon,
            ic_prior,
            co_prior,
            train_aug: AugmentationStack::default(),
            infer_aug: AugmentationStack::default(),
        })
    }

    pub fn weight(&self, name: &str) -> Option<&Param> {
        self.weights.get(name)
    }

    pub fn weight_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.weights.get_mut(name)
    }

    /// Qualified names and values of every tensor the model owns.
    pub fn params(&self) -> Vec<(String, &Param)> {
        let mut out: Vec<(String, &Param)> = self.weights.iter().map(|(k, p)| (k.clone(), p)).collect();
        out.extend(
            self.ic_prior
                .params()
                .iter()
                .map(|p| (format!("ic_prior.{}", p.name), p)),
        );
        if let Some(co) = &self.co_prior {
            out.extend(co.params().iter().map(|p| (format!("co_prior.{}", p.name), p)));
        }
        out.extend(self.recon.params().iter().map(|p| (format!("recon.{}", p.name), p)));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.weights.values_mut().collect();
        out.extend(self.ic_prior.params_mut().iter_mut());
        if let Some(co) = &mut self.co_prior {
            out.extend(co.params_mut().iter_mut());
        }
        out.extend(self.recon.params_mut().iter_mut());
        out
    }

    /// Trainable values concatenated in [`Lfads::params`] order.
    pub fn flat_trainable(&self) -> Vec<f64> {
        self.params()
            .into_iter()
            .filter(|(_, p)| p.trainable)
            .flat_map(|(_, p)| p.value.data().to_vec())
            .collect()
    }

    pub fn set_flat_trainable(&mut self, values: &[f64]) -> Result<()> {
        let mut off = 0;
        for p in self.params_mut().into_iter().filter(|p| p.trainable) {
            let n = p.value.numel();
            let src = values
                .get(off..off + n)
                .ok_or_else(|| Error::Config(format!("flat parameter vector too short at {}", p.name)))?;
            p.value.data_mut().copy_from_slice(src);
            off += n;
        }
        if off != values.len() {
            return Err(Error::Config(format!(
                "flat parameter vector has {} values, model has {off}",
                values.len()
            )));
        }
        Ok(())
    }

    /// Gradients of the trainable tensors after `backward`, flattened like
    /// [`Lfads::flat_trainable`]; untouched tensors contribute zeros.
    pub fn flat_grad(&self, tape: &Tape, bound: &Bound) -> Vec<f64> {
        let mut out = Vec::new();
        for ((_, p), &v) in self.params().into_iter().zip(&bound.all) {
            if p.trainable {
                match tape.grad(v) {
                    Some(g) => out.extend_from_slice(g),
                    None => out.extend(std::iter::repeat_n(0.0, p.value.numel())),
                }
            }
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let all = self
            .params()
            .into_iter()
            .map(|(_, p)| tape.leaf(p.value.clone(), p.trainable))
            .collect();
        Bound {
            all,
            n_model: self.weights.len(),
            n_ic: self.ic_prior.params().len(),
            n_co: self.co_prior.as_ref().map_or(0, |p| p.params().len()),
        }
    }

    fn var(&self, bound: &Bound, name: &str) -> Var {
        bound.all[self
            .weights
            .get_index_of(name)
            .unwrap_or_else(|| panic!("no weight {name}"))]
    }

    fn gru_vars(&self, tape: &mut Tape, bound: &Bound, name: &str, batch: usize) -> Result<GruVars> {
        let hidden = self.weights[&format!("{name}.w_hh_n")].value.shape()[0];
        let b = self.var(bound, &format!("{name}.b"));
        let bias = tape.expand(b, &[batch, 3 * hidden])?;
        Ok(GruVars {
            w_ih: self.weights.get_index_of(&format!("{name}.w_ih")).map(|i| bound.all[i]),
            bias,
            w_hh_rz: self.var(bound, &format!("{name}.w_hh_rz")),
            w_hh_n: self.var(bound, &format!("{name}.w_hh_n")),
            hidden,
            clip: self.config.cell_clip,
        })
    }

    fn dense(&self, tape: &mut Tape, bound: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = self.var(bound, &format!("{name}.w"));
        let b = self.var(bound, &format!("{name}.b"));
        let y = tape.matmul(x, w)?;
        let shape = tape.shape(y).to_vec();
        let b = tape.expand(b, &shape)?;
        tape.add(y, b)
    }

    /// Runs a GRU over every encoder step (forward or reversed) and returns
    /// the state after each step, indexed by time.
    fn encode(&self, tape: &mut Tape, bound: &Bound, name: &str, x: Var, reverse: bool) -> Result<Vec<Var>> {
        let s = tape.shape(x).to_vec();
        let (b, t_len, n) = (s[0], s[1], s[2]);
        let g = self.gru_vars(tape, bound, name, b)?;
        let w = g.w_ih.expect("encoders have inputs");
        let flat = tape.reshape(x, &[b * t_len, n])?;
        let proj = tape.matmul(flat, w)?;
        let proj = tape.reshape(proj, &[b, t_len, 3 * g.hidden])?;
        let bias = self.var(bound, &format!("{name}.b"));
        let bias = tape.expand(bias, &[b, t_len, 3 * g.hidden])?;
        let proj = tape.add(proj, bias)?;
        let h0 = self.var(bound, &format!("{name}.h0"));
        let mut h = tape.expand(h0, &[b, g.hidden])?;
        let mut states = vec![h; t_len];
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for t in order {
            let xi = tape.select_step(proj, t)?;
            h = g.step_projected(tape, xi, h)?;
            states[t] = h;
        }
        Ok(states)
    }

    fn check_batch(&self, batch: &TrialBatch) -> Result<()> {
        let d = &self.dims;
        let b = batch.size();
        let want_e = [b, d.t_enc, d.n_enc];
        if batch.encod_data.shape() != want_e {
            return Err(Error::shape("forward(encod_data)", batch.encod_data.shape(), &want_e));
        }
        let want_r = [b, d.t_recon, d.n_recon];
        if batch.recon_data.shape() != want_r {
            return Err(Error::shape("forward(recon_data)", batch.recon_data.shape(), &want_r));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &TrialBatch,
        sampling: &mut Sampling<'_>,
        phase: Phase,
    ) -> Result<LfadsOutput> {
        self.check_batch(batch)?;
        let c = &self.config;
        let d = self.dims;
        let b = batch.size();

        let x = tape.constant(batch.encod_data.clone());
        let mask = dropout_mask(sampling, phase, c.dropout_rate, batch.encod_data.shape());
        let x = apply_mask(tape, x, mask)?;

        let fwd = self.encode(tape, bound, "ic_enc_fwd", x, false)?;
        let bwd = self.encode(tape, bound, "ic_enc_bwd", x, true)?;
        let ic_enc = tape.concat(&[fwd[d.t_enc - 1], bwd[0]])?;
        let ic_raw = self.dense(tape, bound, "ic_post", ic_enc)?;
        let ic_post = make_posterior(tape, ic_raw)?;
        let ic_sample = sample(tape, &ic_post, sampling)?;
        let mut g = self.dense(tape, bound, "ic_to_g0", ic_sample)?;

        let ci = if c.co_dim > 0 {
            let f = self.encode(tape, bound, "ci_enc_fwd", x, false)?;
            let r = self.encode(tape, bound, "ci_enc_bwd", x, true)?;
            let zeros = tape.constant(Tensor::zeros(&[b, c.ci_enc_dim]));
            let mut out = Vec::with_capacity(d.t_enc);
            for t in 0..d.t_enc {
                let back = r.get(t + c.ci_lag).copied().unwrap_or(zeros);
                out.push(tape.concat(&[f[t], back])?);
            }
            Some(out)
        } else {
            None
        };

        let gen = self.gru_vars(tape, bound, "gen", b)?;
        let fac_w = self.var(bound, "fac.w");
        let fac_t = tape.transpose(fac_w)?;
        let readout = |tape: &mut Tape, sampling: &mut Sampling<'_>, g: Var| -> Result<Var> {
            let m = dropout_mask(sampling, phase, c.dropout_rate, &[b, c.gen_dim]);
            let g = apply_mask(tape, g, m)?;
            tape.matmul(g, fac_t)
        };
        let mut f = readout(tape, sampling, g)?;

        let (con, has_con) = if c.co_dim > 0 {
            let con = self.gru_vars(tape, bound, "con", b)?;
            let h0 = self.var(bound, "con.h0");
            let h = tape.expand(h0, &[b, c.con_dim])?;
            (Some((con, h)), true)
        } else {
            (None, false)
        };
        let mut con_state = con.map(|(_, h)| h);
        let prior_mean = match &self.co_prior {
            Some(p) => {
                let m = Tensor::vector(p.mean());
                let v = tape.constant(m);
                Some(tape.expand(v, &[b, c.co_dim])?)
            }
            None => None,
        };

        let (mut means, mut logvars, mut samples) = (Vec::new(), Vec::new(), Vec::new());
        let mut factors = Vec::with_capacity(d.t_recon);
        let mut gen_states = Vec::with_capacity(d.t_recon);
        for t in 0..d.t_recon {
            let u = if has_con {
                if t < d.t_enc {
                    let (cell, _) = con.as_ref().expect("controller");
                    let inp = tape.concat(&[ci.as_ref().expect("ci")[t], f])?;
                    let h = cell.step(tape, Some(inp), con_state.expect("state"))?;
                    con_state = Some(h);
                    let raw = self.dense(tape, bound, "co_post", h)?;
                    let post = make_posterior(tape, raw)?;
                    let z = sample(tape, &post, sampling)?;
                    means.push(post.mean);
                    logvars.push(post.logvar);
                    samples.push(z);
                    Some(z)
                } else {
                    prior_mean
                }
            } else {
                None
            };
            g = gen.step(tape, u, g)?;
            gen_states.push(g);
            f = readout(tape, sampling, g)?;
            factors.push(f);
        }

        let (co_post, co_sample) = if has_con {
            let post = GaussianPosterior {
                mean: tape.stack_steps(&means)?,
                logvar: tape.stack_steps(&logvars)?,
            };
            (Some(post), Some(tape.stack_steps(&samples)?))
        } else {
            (None, None)
        };

        let gen_states = tape.stack_steps(&gen_states)?;
        let factors = tape.stack_steps(&factors)?;
        let flat = tape.reshape(factors, &[b * d.t_recon, c.fac_dim])?;
        let raw = self.dense(tape, bound, "out", flat)?;
        let width = tape.shape(raw)[1];
        let raw = tape.reshape(raw, &[b, d.t_recon, width])?;
        Ok(LfadsOutput {
            ic_post,
            ic_sample,
            co_post,
            co_sample,
            gen_states,
            factors,
            raw,
        })
    }

    /// Total training loss and its logged components.
    pub fn loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &TrialBatch,
        out: &LfadsOutput,
        aug: &AugmentationStack,
        step: u64,
    ) -> Result<(Var, LossComponents)> {
        let c = &self.config;
        let b = batch.size() as f64;
        let nll = self.recon.nll(tape, bound.recon(), out.raw, &batch.recon_data)?;
        let masked = aug.apply_loss(tape, nll, batch)?;
        let recon_sum = tape.sum_all(masked)?;
        let recon = tape.scale(recon_sum, 1.0 / b)?;

        let kl_ramp = c.kl_ramp(step);
        let l2_ramp = c.l2_ramp(step);

        let kl_ic = match self.ic_prior.analytic_kl(tape, bound.ic_prior(), &out.ic_post) {
            Some(kl) => kl?,
            None => kl_sampled(
                tape,
                &out.ic_post,
                out.ic_sample,
                self.ic_prior.as_ref(),
                bound.ic_prior(),
            )?,
        };
        let kl_ic = tape.mean_all(kl_ic)?;
        let kl_ic = tape.scale(kl_ic, kl_ramp * c.kl_ic_scale)?;

        let kl_co = match (&self.co_prior, &out.co_post, out.co_sample) {
            (Some(prior), Some(post), Some(z)) => {
                let kl = kl_sampled(tape, post, z, prior.as_ref(), bound.co_prior())?;
                let kl = tape.mean_all(kl)?;
                Some(tape.scale(kl, kl_ramp * c.kl_co_scale)?)
            }
            _ => None,
        };

        let mut l2_terms = Vec::new();
        for (cell, scale) in [("gen", c.l2_gen_scale), ("con", c.l2_con_scale)] {
            for part in ["w_hh_rz", "w_hh_n"] {
                if let Some(i) = self.weights.get_index_of(&format!("{cell}.{part}")) {
                    let sq = tape.square(bound.all[i])?;
                    let s = tape.sum_all(sq)?;
                    l2_terms.push(tape.scale(s, 0.5 * scale * l2_ramp)?);
                }
            }
        }
        let mut l2 = tape.scalar(0.0);
        for t in l2_terms {
            l2 = tape.add(l2, t)?;
        }

        let mut total = tape.add(recon, kl_ic)?;
        if let Some(k) = kl_co {
            total = tape.add(total, k)?;
        }
        total = tape.add(total, l2)?;

        let comps = LossComponents {
            recon: tape.value(recon).item(),
            kl_ic: tape.value(kl_ic).item(),
            kl_co: kl_co.map_or(0.0, |k| tape.value(k).item()),
            l2: tape.value(l2).item(),
            total: tape.value(total).item(),
            kl_ramp,
            l2_ramp,
        };
        Ok((total, comps))
    }

    /// Restores unit-norm factor readout rows; called after every update.
    pub fn normalize_factor_rows(&mut self) {
        if let Some(p) = self.weights.get_mut("fac.w") {
            normalize_rows(&mut p.value);
        }
    }

    /// Output means and factors from one pass with no gradient bookkeeping kept.
    pub fn predict(&self, batch: &TrialBatch, sampling: &mut Sampling<'_>, phase: Phase) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, batch, sampling, phase)?;
        let rates = self.recon.mean(tape.value(out.raw))?;
        Ok((rates, tape.value(out.factors).clone()))
    }

    /// Averages output means and factors over `n_samples` posterior draws,
    /// after the inference augmentation stack.
    pub fn posterior_average(
        &self,
        batch: &TrialBatch,
        n_samples: usize,
        rng: &mut dyn RngCore,
    ) -> Result<PosteriorAverage> {
        if n_samples == 0 {
            return Err(Error::Config("posterior averaging needs at least one sample".into()));
        }
        let mut aug = self.infer_aug.clone();
        let batch = aug.apply_batch(batch.clone(), rng)?;
        let mut rates: Option<Tensor> = None;
        let mut factors: Option<Tensor> = None;
        for _ in 0..n_samples {
            let (r, f) = self.predict(&batch, &mut Sampling::Stochastic(&mut *rng), Phase::Infer)?;
            match (&mut rates, &mut factors) {
                (Some(ra), Some(fa)) => {
                    ra.data_mut().iter_mut().zip(r.data()).for_each(|(a, v)| *a += v);
                    fa.data_mut().iter_mut().zip(f.data()).for_each(|(a, v)| *a += v);
                }
                _ => {
                    rates = Some(r);
                    factors = Some(f);
                }
            }
        }
        let k = n_samples as f64;
        Ok(PosteriorAverage {
            rates: rates.expect("n_samples >= 1").map(|v| v / k),
            factors: factors.expect("n_samples >= 1").map(|v| v / k),
        })
    }
}

#[cfg(test)]
mod tests;
