//! Observation models: per-element negative log-likelihoods and means.
//!
//! Raw model outputs are laid out parameter-major along the last axis: for
//! `N` observed channels and `P` parameters per channel, channel `n`'s
//! `p`-th raw value sits at index `p * N + n`.

use std::fmt::Debug;

use crate::autodiff::special::lgamma;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::priors::Param;
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub trait ObservationModel: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Output-layer channels needed per observed channel.
    fn n_params(&self) -> usize;

    /// Called once the number of observed channels is known.
    fn prepare(&mut self, _n_outputs: usize) {}

    fn params(&self) -> &[Param] {
        &[]
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut []
    }

    /// Whether the model only makes sense for integer counts.
    fn is_count_model(&self) -> bool {
        false
    }

    fn check_support(&self, data: &Tensor) -> Result<()>;

    /// Elementwise `-log p(data | raw)`, shaped like `data`.
    fn nll(&self, tape: &mut Tape, bound: &[Var], raw: Var, data: &Tensor) -> Result<Var>;

    /// Distribution mean for each observed channel.
    fn mean(&self, raw: &Tensor) -> Result<Tensor>;

    fn clone_box(&self) -> Box<dyn ObservationModel>;
}

impl Clone for Box<dyn ObservationModel> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

fn check_layout(model: &dyn ObservationModel, raw: &[usize], data: &[usize]) -> Result<usize> {
    let n = *data.last().unwrap_or(&0);
    let ok = raw.len() == data.len()
        && raw[..raw.len() - 1] == data[..data.len() - 1]
        && raw[raw.len() - 1] == n * model.n_params();
    if !ok {
        return Err(Error::shape("nll", raw, data));
    }
    Ok(n)
}

fn first_violation(data: &Tensor, ok: impl Fn(f64) -> bool, model: &'static str) -> Result<()> {
    match data.data().iter().position(|&v| !ok(v)) {
        Some(index) => Err(Error::Support {
            model,
            index,
            value: data.data()[index],
        }),
        None => Ok(()),
    }
}

/// Slices the `p`-th parameter block out of a raw tensor.
fn param_block(raw: &Tensor, p: usize, n: usize) -> Vec<f64> {
    let w = *raw.shape().last().unwrap();
    raw.data()
        .chunks(w)
        .flat_map(|row| row[p * n..(p + 1) * n].iter().copied())
        .collect()
}

fn out_shape(raw: &Tensor, n: usize) -> Vec<usize> {
    let mut s = raw.shape().to_vec();
    *s.last_mut().unwrap() = n;
    s
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Poisson;

impl ObservationModel for Poisson {
    fn name(&self) -> &'static str {
        "Poisson"
    }

    fn n_params(&self) -> usize {
        1
    }

    fn is_count_model(&self) -> bool {
        true
    }

    fn check_support(&self, data: &Tensor) -> Result<()> {
        first_violation(data, |v| v >= 0.0 && v.is_finite(), "Poisson")
    }

    fn nll(&self, tape: &mut Tape, _bound: &[Var], raw: Var, data: &Tensor) -> Result<Var> {
        check_layout(self, tape.shape(raw), data.shape())?;
        self.check_support(data)?;
        // λ - k ln λ + lgamma(k + 1) with ln λ = raw
        let rate = tape.exp(raw)?;
        let k = tape.constant(data.clone());
        let k_log = tape.mul(k, raw)?;
        let a = tape.sub(rate, k_log)?;
        let c = tape.constant(data.map(|k| lgamma(k + 1.0)));
        tape.add(a, c)
    }

    fn mean(&self, raw: &Tensor) -> Result<Tensor> {
        Ok(raw.map(f64::exp))
    }

    fn clone_box(&self) -> Box<dyn ObservationModel> {
        Box::new(self.clone())
    }
}

/// Gaussian with network-predicted mean and log-variance, or a learned
/// per-channel log-variance when `tied_variance` is set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gaussian {
    pub tied_variance: bool,
    params: Vec<Param>,
}

impl Gaussian {
    pub fn new(tied_variance: bool) -> Self {
        Self {
            tied_variance,
            params: Vec::new(),
        }
    }
}

impl ObservationModel for Gaussian {
    fn name(&self) -> &'static str {
        "Gaussian"
    }

    fn n_params(&self) -> usize {
        if self.tied_variance {
            1
        } else {
            2
        }
    }

    fn prepare(&mut self, n_outputs: usize) {
        if self.tied_variance && self.params.is_empty() {
            self.params
                .push(Param::new("logvar", Tensor::zeros(&[n_outputs]), true));
        }
    }

    fn params(&self) -> &[Param] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn check_support(&self, data: &Tensor) -> Result<()> {
        first_violation(data, f64::is_finite, "Gaussian")
    }

    fn nll(&self, tape: &mut Tape, bound: &[Var], raw: Var, data: &Tensor) -> Result<Var> {
        let n = check_layout(self, tape.shape(raw), data.shape())?;
        self.check_support(data)?;
        let mean = tape.slice(raw, 0, n)?;
        let logvar = if self.tied_variance {
            let lv = *bound
                .first()
                .ok_or_else(|| Error::Config("tied Gaussian used before prepare()".into()))?;
            tape.expand(lv, data.shape())?
        } else {
            tape.slice(raw, n, n)?
        };
        let x = tape.constant(data.clone());
        let d = tape.sub(x, mean)?;
        let d2 = tape.square(d)?;
        let nlv = tape.neg(logvar)?;
        let prec = tape.exp(nlv)?;
        let q = tape.mul(d2, prec)?;
        let s = tape.add(q, logvar)?;
        let s = tape.shift(s, LN_2PI)?;
        tape.scale(s, 0.5)
    }

    fn mean(&self, raw: &Tensor) -> Result<Tensor> {
        let n = raw.shape().last().unwrap() / self.n_params();
        Tensor::new(out_shape(raw, n), param_block(raw, 0, n))
    }

    fn clone_box(&self) -> Box<dyn ObservationModel> {
        Box::new(self.clone())
    }
}

/// `-α ln β - (α - 1) ln x + β x + lgamma(α)` with `α = exp(raw_0)`, `β = exp(raw_1)`.
fn gamma_nll_parts(tape: &mut Tape, log_alpha: Var, log_beta: Var, x: &[f64], shape: &[usize]) -> Result<Var> {
    let alpha = tape.exp(log_alpha)?;
    let beta = tape.exp(log_beta)?;
    let ln_x = tape.constant(Tensor::new(shape.to_vec(), x.iter().map(|v| v.ln()).collect())?);
    let xs = tape.constant(Tensor::new(shape.to_vec(), x.to_vec())?);
    let a_lb = tape.mul(alpha, log_beta)?;
    let am1 = tape.shift(alpha, -1.0)?;
    let am1_lx = tape.mul(am1, ln_x)?;
    let bx = tape.mul(beta, xs)?;
    let lg = tape.lgamma(alpha)?;
    let s = tape.add(a_lb, am1_lx)?;
    let s = tape.neg(s)?;
    let s = tape.add(s, bx)?;
    tape.add(s, lg)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gamma;

impl ObservationModel for Gamma {
    fn name(&self) -> &'static str {
        "Gamma"
    }

    fn n_params(&self) -> usize {
        2
    }

    fn check_support(&self, data: &Tensor) -> Result<()> {
        first_violation(data, |v| v > 0.0 && v.is_finite(), "Gamma")
    }

    fn nll(&self, tape: &mut Tape, _bound: &[Var], raw: Var, data: &Tensor) -> Result<Var> {
        let n = check_layout(self, tape.shape(raw), data.shape())?;
        self.check_support(data)?;
        let la = tape.slice(raw, 0, n)?;
        let lb = tape.slice(raw, n, n)?;
        gamma_nll_parts(tape, la, lb, data.data(), data.shape())
    }

    fn mean(&self, raw: &Tensor) -> Result<Tensor> {
        let n = raw.shape().last().unwrap() / 2;
        let (la, lb) = (param_block(raw, 0, n), param_block(raw, 1, n));
        let m = la.iter().zip(&lb).map(|(a, b)| (a - b).exp()).collect();
        Tensor::new(out_shape(raw, n), m)
    }

    fn clone_box(&self) -> Box<dyn ObservationModel> {
        Box::new(self.clone())
    }
}

/// Point mass at zero mixed with a Gamma: `P(x > 0) = q = sigmoid(raw_0)`.
/// Nonzero observations are modelled as `offset + Gamma(α, β)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ZeroInflatedGamma {
    pub offset: f64,
}

impl ZeroInflatedGamma {
    pub fn new(offset: f64) -> Self {
        Self { offset }
    }
}

impl ObservationModel for ZeroInflatedGamma {
    fn name(&self) -> &'static str {
        "ZeroInflatedGamma"
    }

    fn n_params(&self) -> usize {
        3
    }

    fn check_support(&self, data: &Tensor) -> Result<()> {
        let off = self.offset;
        first_violation(data, |v| v == 0.0 || (v > off && v.is_finite()), "ZeroInflatedGamma")
    }

    fn nll(&self, tape: &mut Tape, _bound: &[Var], raw: Var, data: &Tensor) -> Result<Var> {
        let n = check_layout(self, tape.shape(raw), data.shape())?;
        self.check_support(data)?;
        let shape = data.shape();
        let logit_q = tape.slice(raw, 0, n)?;
        let la = tape.slice(raw, n, n)?;
        let lb = tape.slice(raw, 2 * n, n)?;
        let is_zero = data.map(|v| if v == 0.0 { 1.0 } else { 0.0 });
        let nonzero = data.map(|v| if v == 0.0 { 0.0 } else { 1.0 });
        // zeros get a placeholder x so the (masked-out) gamma term stays finite
        let shifted: Vec<f64> = data
            .data()
            .iter()
            .map(|&v| if v == 0.0 { 1.0 } else { v - self.offset })
            .collect();
        // -ln(1 - q) = softplus(l), -ln q = softplus(-l)
        let zero_term = tape.softplus(logit_q)?;
        let neg_l = tape.neg(logit_q)?;
        let nz_q = tape.softplus(neg_l)?;
        let g = gamma_nll_parts(tape, la, lb, &shifted, shape)?;
        let nz = tape.add(nz_q, g)?;
        let mz = tape.constant(is_zero);
        let mnz = tape.constant(nonzero);
        let a = tape.mul(mz, zero_term)?;
        let b = tape.mul(mnz, nz)?;
        tape.add(a, b)
    }

    fn mean(&self, raw: &Tensor) -> Result<Tensor> {
        let n = raw.shape().last().unwrap() / 3;
        let (lq, la, lb) = (param_block(raw, 0, n), param_block(raw, 1, n), param_block(raw, 2, n));
        let m = (0..lq.len())
            .map(|i| {
                let q = 1.0 / (1.0 + (-lq[i]).exp());
                q * ((la[i] - lb[i]).exp() + self.offset)
            })
            .collect();
        Tensor::new(out_shape(raw, n), m)
    }

    fn clone_box(&self) -> Box<dyn ObservationModel> {
        Box::new(self.clone())
    }
}
