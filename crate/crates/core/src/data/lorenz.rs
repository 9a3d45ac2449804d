//! Synthetic spiking data driven by the Lorenz system.
//!
//! Each trial starts from a random state, is integrated through a burn-in
//! period, and then sampled once per RK4 step. The three state channels are
//! standardized over the whole dataset and mapped to per-neuron log-rates
//! through a random linear readout; spikes are Poisson draws from those rates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::{Split, TrialDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LorenzConfig {
    pub n_trials: usize,
    /// Bins seen by the encoder.
    pub n_bins: usize,
    /// Extra bins appended to the reconstruction target only.
    pub fp_bins: usize,
    pub dt: f64,
    /// Total neurons, held-in plus held-out.
    pub n_neurons: usize,
    /// Neurons that appear only in the reconstruction target.
    pub n_held_out: usize,
    /// Target mean spike count per bin over the dataset.
    pub base_rate: f64,
    /// Expected standard deviation of each neuron's log-rate.
    pub log_rate_gain: f64,
    pub valid_fraction: f64,
    pub burn_in: usize,
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        Self {
            n_trials: 1000,
            n_bins: 50,
            fp_bins: 5,
            dt: 0.01,
            n_neurons: 38,
            n_held_out: 8,
            base_rate: 0.3,
            log_rate_gain: 1.0,
            valid_fraction: 0.2,
            burn_in: 500,
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            seed: 0,
        }
    }
}

impl LorenzConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("base_rate", self.base_rate),
            ("log_rate_gain", self.log_rate_gain),
            ("sigma", self.sigma),
            ("rho", self.rho),
            ("beta", self.beta),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("lorenz.{name} must be positive, got {v}")));
            }
        }
        if self.n_neurons < 3 {
            return Err(Error::Config("lorenz.n_neurons must be at least 3".into()));
        }
        if self.n_held_out >= self.n_neurons {
            return Err(Error::Config("lorenz.n_held_out must leave held-in neurons".into()));
        }
        if self.n_bins == 0 || self.burn_in == 0 {
            return Err(Error::Config("lorenz.n_bins and burn_in must be positive".into()));
        }
        let n_valid = self.n_valid();
        if !(0.0..1.0).contains(&self.valid_fraction) || n_valid == 0 || n_valid >= self.n_trials {
            return Err(Error::Config(format!(
                "lorenz.valid_fraction {} leaves an empty split of {} trials",
                self.valid_fraction, self.n_trials
            )));
        }
        Ok(())
    }

    pub fn n_valid(&self) -> usize {
        (self.n_trials as f64 * self.valid_fraction).round() as usize
    }

    pub fn t_recon(&self) -> usize {
        self.n_bins + self.fp_bins
    }
}

pub type State = [f64; 3];

pub fn lorenz_deriv(s: State, sigma: f64, rho: f64, beta: f64) -> State {
    [
        sigma * (s[1] - s[0]),
        s[0] * (rho - s[2]) - s[1],
        s[0] * s[1] - beta * s[2],
    ]
}

pub fn rk4_step(s: State, dt: f64, sigma: f64, rho: f64, beta: f64) -> State {
    let f = |x: State| lorenz_deriv(x, sigma, rho, beta);
    let add = |a: State, b: State, h: f64| [a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2]];
    let k1 = f(s);
    let k2 = f(add(s, k1, dt / 2.0));
    let k3 = f(add(s, k2, dt / 2.0));
    let k4 = f(add(s, k3, dt));
    [0, 1, 2].map(|i| s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

/// Raw (unstandardized) trajectories, `[trial][step]`.
pub fn lorenz_trajectories(cfg: &LorenzConfig, rng: &mut impl Rng) -> Vec<Vec<State>> {
    (0..cfg.n_trials)
        .map(|_| {
            let mut s: State = [
                rng.random_range(-15.0..15.0),
                rng.random_range(-15.0..15.0),
                rng.random_range(10.0..40.0),
            ];
            for _ in 0..cfg.burn_in {
                s = rk4_step(s, cfg.dt, cfg.sigma, cfg.rho, cfg.beta);
            }
            (0..cfg.t_recon())
                .map(|_| {
                    s = rk4_step(s, cfg.dt, cfg.sigma, cfg.rho, cfg.beta);
                    s
                })
                .collect()
        })
        .collect()
}

pub fn generate_lorenz(cfg: &LorenzConfig) -> Result<TrialDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let traj = lorenz_trajectories(cfg, &mut rng);
    let (n, t, c) = (cfg.n_trials, cfg.t_recon(), cfg.n_neurons);

    let count = (n * t) as f64;
    let mut mean = [0.0; 3];
    for s in traj.iter().flatten() {
        (0..3).for_each(|i| mean[i] += s[i] / count);
    }
    let mut std = [0.0; 3];
    for s in traj.iter().flatten() {
        (0..3).for_each(|i| std[i] += (s[i] - mean[i]).powi(2) / count);
    }
    let std = std.map(f64::sqrt);

    let normal = Normal::new(0.0, cfg.log_rate_gain / 3f64.sqrt()).unwrap();
    let readout: Vec<[f64; 3]> = (0..c).map(|_| [0, 1, 2].map(|_| normal.sample(&mut rng))).collect();

    let mut log_rates = Vec::with_capacity(n * t * c);
    for s in traj.iter().flatten() {
        let z = [0, 1, 2].map(|i| (s[i] - mean[i]) / std[i]);
        for w in &readout {
            log_rates.push(w[0] * z[0] + w[1] * z[1] + w[2] * z[2]);
        }
    }
    // Shared offset so the dataset-wide mean rate equals base_rate.
    let mean_exp = log_rates.iter().map(|v| v.exp()).sum::<f64>() / log_rates.len() as f64;
    let offset = cfg.base_rate.ln() - mean_exp.ln();
    let rates: Vec<f64> = log_rates.iter().map(|v| (v + offset).exp()).collect();
    let spikes: Vec<f64> = rates
        .iter()
        .map(|&r| Poisson::new(r).unwrap().sample(&mut rng))
        .collect();

    let spikes = Tensor::new(vec![n, t, c], spikes)?;
    let rates = Tensor::new(vec![n, t, c], rates)?;
    let n_valid = cfg.n_valid();
    let n_train = n - n_valid;
    let n_in = c - cfg.n_held_out;
    let split = |start: usize, len: usize| -> Result<Split> {
        let recon = spikes.narrow_rows(start, len)?;
        Ok(Split {
            encod_data: recon.block3(0..cfg.n_bins, 0..n_in)?,
            recon_data: recon,
            truth: Some(rates.narrow_rows(start, len)?),
        })
    };
    TrialDataset::new(split(0, n_train)?, split(n_train, n_valid)?)
}
