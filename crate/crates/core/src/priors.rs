//! Latent priors and diagonal-Gaussian posteriors.
//!
//! Every prior exposes its parameters as a flat list of [`Param`]s. Callers
//! bind them onto the tape (see [`bind_params`]) and pass the resulting vars
//! back into `log_prob`/`kl`, in the same order.

use std::f64::consts::PI;
use std::fmt::Debug;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LOGVAR_CLAMP: f64 = 16.0;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A named, optionally trainable tensor owned by a model component.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Self {
        Self {
            name: name.into(),
            value,
            trainable,
        }
    }
}

pub fn bind_params(tape: &mut Tape, params: &[Param]) -> Vec<Var> {
    params.iter().map(|p| tape.leaf(p.value.clone(), p.trainable)).collect()
}

/// How latents are drawn during a forward pass.
pub enum Sampling<'a> {
    /// Use posterior means.
    Deterministic,
    Stochastic(&'a mut dyn RngCore),
}

impl Sampling<'_> {
    pub fn is_deterministic(&self) -> bool {
        matches!(self, Sampling::Deterministic)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GaussianPosterior {
    pub mean: Var,
    pub logvar: Var,
}

/// Splits `raw` (last axis `mean || logvar`) and clamps the log-variance.
pub fn make_posterior(tape: &mut Tape, raw: Var) -> Result<GaussianPosterior> {
    let width = *tape.shape(raw).last().unwrap_or(&0);
    if width % 2 != 0 || width == 0 {
        return Err(Error::Shape {
            op: "make_posterior",
            lhs: tape.shape(raw).to_vec(),
            rhs: vec![width / 2, width / 2],
        });
    }
    let dim = width / 2;
    let mean = tape.slice(raw, 0, dim)?;
    let lv = tape.slice(raw, dim, dim)?;
    let logvar = tape.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP)?;
    Ok(GaussianPosterior { mean, logvar })
}

/// Reparameterized draw `mean + exp(logvar / 2) * eps`, or the mean itself.
pub fn sample(tape: &mut Tape, post: &GaussianPosterior, sampling: &mut Sampling<'_>) -> Result<Var> {
    match sampling {
        Sampling::Deterministic => Ok(post.mean),
        Sampling::Stochastic(rng) => {
            let shape = tape.shape(post.mean).to_vec();
            let n: usize = shape.iter().product();
            let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut **rng)).collect();
            let eps = tape.constant(Tensor::new(shape, eps)?);
            let half = tape.scale(post.logvar, 0.5)?;
            let std = tape.exp(half)?;
            let noise = tape.mul(std, eps)?;
            tape.add(post.mean, noise)
        }
    }
}

/// Sums every axis except the leading (trial) axis.
pub fn sum_per_trial(tape: &mut Tape, x: Var) -> Result<Var> {
    let nd = tape.shape(x).len();
    if nd <= 1 {
        return Ok(x);
    }
    let axes: Vec<usize> = (1..nd).collect();
    tape.sum(x, &axes)
}

/// Expands a per-dimension vector `[D]` to `shape` (which must end in `D`).
fn expand_to(tape: &mut Tape, v: Var, shape: &[usize]) -> Result<Var> {
    tape.expand(v, shape)
}

/// Elementwise `log N(x; mean, exp(logvar))`; all arguments same shape.
fn normal_log_density(tape: &mut Tape, x: Var, mean: Var, logvar: Var) -> Result<Var> {
    let d = tape.sub(x, mean)?;
    let d2 = tape.square(d)?;
    let nlv = tape.neg(logvar)?;
    let prec = tape.exp(nlv)?;
    let quad = tape.mul(d2, prec)?;
    let s = tape.add(quad, logvar)?;
    let s = tape.shift(s, LN_2PI)?;
    tape.scale(s, -0.5)
}

/// Per-trial `log q(x)` under a diagonal Gaussian posterior.
pub fn posterior_log_prob(tape: &mut Tape, post: &GaussianPosterior, x: Var) -> Result<Var> {
    let lp = normal_log_density(tape, x, post.mean, post.logvar)?;
    sum_per_trial(tape, lp)
}

/// Closed-form KL(q || p) for diagonal Gaussians, summed per trial.
///
/// `prior_mean`/`prior_logvar` are `[D]` and broadcast over the posterior.
pub fn kl_gaussian_diag(tape: &mut Tape, post: &GaussianPosterior, prior_mean: Var, prior_logvar: Var) -> Result<Var> {
    let shape = tape.shape(post.mean).to_vec();
    let d = *shape.last().unwrap_or(&0);
    if tape.shape(prior_mean) != [d] || tape.shape(prior_logvar) != [d] {
        return Err(Error::shape("kl_gaussian_diag", &shape, tape.shape(prior_mean)));
    }
    let m = expand_to(tape, prior_mean, &shape)?;
    let lv = expand_to(tape, prior_logvar, &shape)?;
    // σ²/s² = exp(logvar - lv)
    let lr = tape.sub(post.logvar, lv)?;
    let ratio = tape.exp(lr)?;
    let dm = tape.sub(post.mean, m)?;
    let dm2 = tape.square(dm)?;
    let nlv = tape.neg(lv)?;
    let inv = tape.exp(nlv)?;
    let quad = tape.mul(dm2, inv)?;
    let a = tape.add(ratio, quad)?;
    let b = tape.sub(a, lr)?;
    let c = tape.shift(b, -1.0)?;
    let half = tape.scale(c, 0.5)?;
    sum_per_trial(tape, half)
}

/// Single-sample estimate `log q(z) - log p(z)` at the sample `z` used downstream.
pub fn kl_sampled(tape: &mut Tape, post: &GaussianPosterior, z: Var, prior: &dyn Prior, bound: &[Var]) -> Result<Var> {
    let lq = posterior_log_prob(tape, post, z)?;
    let lp = prior.log_prob(tape, bound, z)?;
    tape.sub(lq, lp)
}

pub trait Prior: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn dim(&self) -> usize;

    fn params(&self) -> &[Param];

    fn params_mut(&mut self) -> &mut [Param];

    /// Marginal mean per dimension; drives open-loop (extrapolated) steps.
    fn mean(&self) -> Vec<f64>;

    /// Per-trial log density of `x`, shaped `[B, D]` or `[B, T, D]`.
    fn log_prob(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var>;

    /// Closed-form KL against a Gaussian posterior, when one exists.
    fn analytic_kl(&self, _tape: &mut Tape, _bound: &[Var], _post: &GaussianPosterior) -> Option<Result<Var>> {
        None
    }

    fn clone_box(&self) -> Box<dyn Prior>;
}

impl Clone for Box<dyn Prior> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

fn check_finite_input(tape: &Tape, x: Var, prior: &'static str) -> Result<()> {
    match tape.value(x).data().iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { op: prior, index }),
        None => Ok(()),
    }
}

/// Independent Gaussians with per-dimension mean and log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct MultivariateNormal {
    params: [Param; 2],
}

impl MultivariateNormal {
    pub fn new(dim: usize, mean: f64, variance: f64, mean_trainable: bool, var_trainable: bool) -> Self {
        Self {
            params: [
                Param::new("mean", Tensor::full(&[dim], mean), mean_trainable),
                Param::new("logvar", Tensor::full(&[dim], variance.ln()), var_trainable),
            ],
        }
    }

    /// Zero-mean, unit-variance prior with trainable variance.
    pub fn standard(dim: usize) -> Self {
        Self::new(dim, 0.0, 1.0, false, true)
    }
}

impl Prior for MultivariateNormal {
    fn name(&self) -> &'static str {
        "MultivariateNormal"
    }

    fn dim(&self) -> usize {
        self.params[0].value.numel()
    }

    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn mean(&self) -> Vec<f64> {
        self.params[0].value.data().to_vec()
    }

    fn log_prob(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        check_finite_input(tape, x, "MultivariateNormal")?;
        let shape = tape.shape(x).to_vec();
        let m = expand_to(tape, bound[0], &shape)?;
        let lv = expand_to(tape, bound[1], &shape)?;
        let lp = normal_log_density(tape, x, m, lv)?;
        sum_per_trial(tape, lp)
    }

    fn analytic_kl(&self, tape: &mut Tape, bound: &[Var], post: &GaussianPosterior) -> Option<Result<Var>> {
        Some(kl_gaussian_diag(tape, post, bound[0], bound[1]))
    }

    fn clone_box(&self) -> Box<dyn Prior> {
        Box::new(self.clone())
    }
}

/// Independent AR(1) processes: `x_1 ~ N(0, σ²_p)`, `x_t ~ N(φ x_{t-1}, σ²_p (1 - φ²))`,
/// with `φ = exp(-1/τ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoregressiveMultivariateNormal {
    params: [Param; 2],
}

impl AutoregressiveMultivariateNormal {
    pub fn new(dim: usize, tau: f64, process_var: f64, trainable: bool) -> Self {
        Self {
            params: [
                Param::new("logtau", Tensor::full(&[dim], tau.ln()), trainable),
                Param::new("lognvar", Tensor::full(&[dim], process_var.ln()), trainable),
            ],
        }
    }

    pub fn phi(&self) -> Vec<f64> {
        self.params[0]
            .value
            .data()
            .iter()
            .map(|lt| (-(-lt).exp()).exp())
            .collect()
    }

    pub fn process_var(&self) -> Vec<f64> {
        self.params[1].value.data().iter().map(|v| v.exp()).collect()
    }
}

impl Prior for AutoregressiveMultivariateNormal {
    fn name(&self) -> &'static str {
        "AutoregressiveMultivariateNormal"
    }

    fn dim(&self) -> usize {
        self.params[0].value.numel()
    }

    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn mean(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    fn log_prob(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        check_finite_input(tape, x, "AutoregressiveMultivariateNormal")?;
        let shape = tape.shape(x).to_vec();
        let (b, t, d) = match shape[..] {
            [b, d] => (b, 1, d),
            [b, t, d] => (b, t, d),
            _ => return Err(Error::shape("ar_log_prob", &shape, &[self.dim()])),
        };
        if d != self.dim() {
            return Err(Error::shape("ar_log_prob", &shape, &[self.dim()]));
        }
        let flat = tape.reshape(x, &[b, t * d])?;
        // φ = exp(-exp(-logτ)), σ²_e = σ²_p (1 - φ²)
        let (logtau, lognvar) = (bound[0], bound[1]);
        let neg_lt = tape.neg(logtau)?;
        let inv_tau = tape.exp(neg_lt)?;
        let neg_inv = tape.neg(inv_tau)?;
        let phi = tape.exp(neg_inv)?;
        let phi2 = tape.square(phi)?;
        let one_minus = tape.scale(phi2, -1.0)?;
        let one_minus = tape.shift(one_minus, 1.0)?;
        let log_om = tape.log(one_minus)?;
        let logevar = tape.add(lognvar, log_om)?;

        let x0 = tape.slice(flat, 0, d)?;
        let zeros = tape.constant(Tensor::zeros(&[b, d]));
        let lv0 = tape.expand(lognvar, &[b, d])?;
        let first = normal_log_density(tape, x0, zeros, lv0)?;
        let mut total = tape.sum(first, &[1])?;
        if t > 1 {
            let rest = tape.slice(flat, d, (t - 1) * d)?;
            let prev = tape.slice(flat, 0, (t - 1) * d)?;
            let phi_t = tape.expand(phi, &[t - 1, d])?;
            let phi_t = tape.reshape(phi_t, &[(t - 1) * d])?;
            let phi_bt = tape.expand(phi_t, &[b, (t - 1) * d])?;
            let lv_t = tape.expand(logevar, &[t - 1, d])?;
            let lv_t = tape.reshape(lv_t, &[(t - 1) * d])?;
            let lv_bt = tape.expand(lv_t, &[b, (t - 1) * d])?;
            let pred = tape.mul(phi_bt, prev)?;
            let lp = normal_log_density(tape, rest, pred, lv_bt)?;
            let s = tape.sum(lp, &[1])?;
            total = tape.add(total, s)?;
        }
        Ok(total)
    }

    fn clone_box(&self) -> Box<dyn Prior> {
        Box::new(self.clone())
    }
}

/// Product of independent univariate Student-T densities.
#[derive(Clone, Debug, PartialEq)]
pub struct MultivariateStudentT {
    params: [Param; 3],
}

impl MultivariateStudentT {
    pub fn new(dim: usize, df: f64, scale: f64, df_trainable: bool, scale_trainable: bool) -> Self {
        Self {
            params: [
                Param::new("loc", Tensor::zeros(&[dim]), false),
                Param::new("logscale", Tensor::full(&[dim], scale.ln()), scale_trainable),
                Param::new("logdf", Tensor::scalar(df.ln()), df_trainable),
            ],
        }
    }
}

impl Prior for MultivariateStudentT {
    fn name(&self) -> &'static str {
        "MultivariateStudentT"
    }

    fn dim(&self) -> usize {
        self.params[0].value.numel()
    }

    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn mean(&self) -> Vec<f64> {
        self.params[0].value.data().to_vec()
    }

    fn log_prob(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        check_finite_input(tape, x, "MultivariateStudentT")?;
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.dim()) {
            return Err(Error::shape("student_t_log_prob", &shape, &[self.dim()]));
        }
        let (loc, logscale, logdf) = (bound[0], bound[1], bound[2]);
        let nu = tape.exp(logdf)?;
        // per-element constant in ν: lgamma((ν+1)/2) - lgamma(ν/2) - ½ ln(νπ)
        let half_nu = tape.scale(nu, 0.5)?;
        let half_nu1 = tape.shift(half_nu, 0.5)?;
        let lg1 = tape.lgamma(half_nu1)?;
        let lg2 = tape.lgamma(half_nu)?;
        let c = tape.sub(lg1, lg2)?;
        let half_lognu = tape.scale(logdf, 0.5)?;
        let c = tape.sub(c, half_lognu)?;
        let c = tape.shift(c, -0.5 * PI.ln())?;

        let m = tape.expand(loc, &shape)?;
        let ls = tape.expand(logscale, &shape)?;
        let d = tape.sub(x, m)?;
        let neg_ls = tape.neg(ls)?;
        let inv_s = tape.exp(neg_ls)?;
        let zs = tape.mul(d, inv_s)?;
        let z2 = tape.square(zs)?;
        let z2n = tape.div(z2, nu)?;
        let arg = tape.shift(z2n, 1.0)?;
        let lg = tape.log(arg)?;
        let w = tape.mul(half_nu1, lg)?;
        let per = tape.add(w, ls)?;
        let per = tape.neg(per)?;
        let per = tape.add(per, c)?;
        sum_per_trial(tape, per)
    }

    fn clone_box(&self) -> Box<dyn Prior> {
        Box::new(self.clone())
    }
}
