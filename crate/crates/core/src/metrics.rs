//! Evaluation metrics and the training log.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::container::write_atomic;
use crate::data::DataDims;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rates of exactly zero are evaluated at this floor.
pub const ZERO_RATE_FLOOR: f64 = 1e-9;

/// Summed Poisson NLL without the `lgamma(k + 1)` term, which cancels in
/// likelihood differences.
fn poisson_nll_sum(rates: &[f64], spikes: &[f64]) -> f64 {
    rates
        .iter()
        .zip(spikes)
        .map(|(&r, &k)| {
            let r = if r == 0.0 { ZERO_RATE_FLOOR } else { r };
            r - k * r.ln()
        })
        .sum()
}

/// Bits per spike of `rates` over a per-neuron constant `null_rates`,
/// both evaluated on `spikes` (`[B, T, N]`).
pub fn bits_per_spike(rates: &Tensor, spikes: &Tensor, null_rates: &[f64]) -> Result<f64> {
    if rates.shape() != spikes.shape() || spikes.ndim() != 3 {
        return Err(Error::shape("bits_per_spike", rates.shape(), spikes.shape()));
    }
    let n = spikes.shape()[2];
    if null_rates.len() != n {
        return Err(Error::shape("bits_per_spike(null)", &[null_rates.len()], &[n]));
    }
    let total: f64 = spikes.data().iter().sum();
    if total <= 0.0 {
        return Err(Error::Domain {
            op: "bits_per_spike",
            detail: "no spikes in the evaluated slab".into(),
        });
    }
    if let Some(r) = rates
        .data()
        .iter()
        .chain(null_rates)
        .find(|r| !(**r >= 0.0) || !r.is_finite())
    {
        return Err(Error::Domain {
            op: "bits_per_spike",
            detail: format!("rate {r} is negative or not finite"),
        });
    }
    let null: Vec<f64> = (0..spikes.numel()).map(|i| null_rates[i % n]).collect();
    let model = poisson_nll_sum(rates.data(), spikes.data());
    let null = poisson_nll_sum(&null, spikes.data());
    Ok((null - model) / (total * std::f64::consts::LN_2))
}

/// Per-neuron mean count over trials and time.
pub fn mean_rates(spikes: &Tensor) -> Vec<f64> {
    let n = spikes.shape()[2];
    let rows = (spikes.numel() / n.max(1)) as f64;
    let mut out = vec![0.0; n];
    for (i, v) in spikes.data().iter().enumerate() {
        out[i % n] += v;
    }
    out.iter_mut().for_each(|v| *v /= rows);
    out
}

/// Bits per spike with the null model fitted to the evaluated spikes
/// themselves (per-neuron mean over trials and time).
pub fn nlb_bits_per_spike(rates: &Tensor, spikes: &Tensor) -> Result<f64> {
    bits_per_spike(rates, spikes, &mean_rates(spikes))
}

/// Co-smoothing: held-out neurons over the encoder window.
pub fn co_bps(rates: &Tensor, recon: &Tensor, dims: &DataDims) -> Result<f64> {
    if dims.n_held_out() == 0 {
        return Err(Error::Dataset("co-bps needs held-out neurons".into()));
    }
    let r = rates.block3(0..dims.t_enc, dims.n_enc..dims.n_recon)?;
    let s = recon.block3(0..dims.t_enc, dims.n_enc..dims.n_recon)?;
    nlb_bits_per_spike(&r, &s)
}

/// Forward prediction: every recon neuron over the extrapolated steps.
pub fn fp_bps(rates: &Tensor, recon: &Tensor, dims: &DataDims) -> Result<f64> {
    if dims.fp_steps() == 0 {
        return Err(Error::Dataset("fp-bps needs forward-prediction steps".into()));
    }
    let r = rates.block3(dims.t_enc..dims.t_recon, 0..dims.n_recon)?;
    let s = recon.block3(dims.t_enc..dims.t_recon, 0..dims.n_recon)?;
    nlb_bits_per_spike(&r, &s)
}

/// Coefficient of determination pooled over every element.
pub fn r2_pooled(pred: &[f64], truth: &[f64]) -> f64 {
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

/// R² computed per neuron (last axis) and averaged across neurons.
pub fn r2_per_neuron(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("r2_per_neuron", pred.shape(), truth.shape()));
    }
    let n = *truth.shape().last().unwrap_or(&1);
    let total: f64 = (0..n)
        .map(|j| {
            let p: Vec<f64> = pred.data().iter().skip(j).step_by(n).copied().collect();
            let t: Vec<f64> = truth.data().iter().skip(j).step_by(n).copied().collect();
            r2_pooled(&p, &t)
        })
        .sum();
    Ok(total / n as f64)
}

/// One epoch of the training log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub kl_ramp: f64,
    pub l2_ramp: f64,
    pub train_recon: f64,
    pub train_kl_ic: f64,
    pub train_kl_co: f64,
    pub train_l2: f64,
    pub train_total: f64,
    pub valid_recon: f64,
    pub valid_kl_ic: f64,
    pub valid_kl_co: f64,
    pub valid_l2: f64,
    pub valid_total: f64,
    pub valid_kl_ic_full: f64,
    pub valid_kl_co_full: f64,
    pub valid_l2_full: f64,
    pub valid_total_full: f64,
    pub valid_smoothed: f64,
}

impl MetricsRow {
    pub const HEADER: [&'static str; 20] = [
        "epoch",
        "step",
        "lr",
        "kl_ramp",
        "l2_ramp",
        "train_recon",
        "train_kl_ic",
        "train_kl_co",
        "train_l2",
        "train_total",
        "valid_recon",
        "valid_kl_ic",
        "valid_kl_co",
        "valid_l2",
        "valid_total",
        "valid_kl_ic_full",
        "valid_kl_co_full",
        "valid_l2_full",
        "valid_total_full",
        "valid_smoothed",
    ];

    pub fn floats(&self) -> [f64; 18] {
        [
            self.lr,
            self.kl_ramp,
            self.l2_ramp,
            self.train_recon,
            self.train_kl_ic,
            self.train_kl_co,
            self.train_l2,
            self.train_total,
            self.valid_recon,
            self.valid_kl_ic,
            self.valid_kl_co,
            self.valid_l2,
            self.valid_total,
            self.valid_kl_ic_full,
            self.valid_kl_co_full,
            self.valid_l2_full,
            self.valid_total_full,
            self.valid_smoothed,
        ]
    }

    pub fn from_floats(epoch: u64, step: u64, f: &[f64; 18]) -> Self {
        Self {
            epoch,
            step,
            lr: f[0],
            kl_ramp: f[1],
            l2_ramp: f[2],
            train_recon: f[3],
            train_kl_ic: f[4],
            train_kl_co: f[5],
            train_l2: f[6],
            train_total: f[7],
            valid_recon: f[8],
            valid_kl_ic: f[9],
            valid_kl_co: f[10],
            valid_l2: f[11],
            valid_total: f[12],
            valid_kl_ic_full: f[13],
            valid_kl_co_full: f[14],
            valid_l2_full: f[15],
            valid_total_full: f[16],
            valid_smoothed: f[17],
        }
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = MetricsRow::HEADER.join(",");
    s.push('\n');
    for r in rows {
        write!(s, "{},{}", r.epoch, r.step).unwrap();
        for v in r.floats() {
            write!(s, ",{v:?}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    if header != MetricsRow::HEADER.join(",") {
        return Err(Error::Parse {
            line: 1,
            msg: "unexpected metrics header".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let bad = |msg: String| Error::Parse { line: i + 1, msg };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != MetricsRow::HEADER.len() {
            return Err(bad(format!(
                "expected {} cells, got {}",
                MetricsRow::HEADER.len(),
                cells.len()
            )));
        }
        let int = |s: &str| s.parse::<u64>().map_err(|e| bad(format!("{s}: {e}")));
        let mut f = [0.0; 18];
        for (slot, cell) in f.iter_mut().zip(&cells[2..]) {
            *slot = cell.parse().map_err(|e| bad(format!("{cell}: {e}")))?;
        }
        rows.push(MetricsRow::from_floats(int(cells[0])?, int(cells[1])?, &f));
    }
    Ok(rows)
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_atomic(path, metrics_csv(rows).as_bytes())
}

/// Train and validation total loss against epoch as a standalone SVG.
pub fn loss_curve_svg(rows: &[MetricsRow]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let series: [(&str, &str, Vec<f64>); 2] = [
        ("train", "#1f77b4", rows.iter().map(|r| r.train_total).collect()),
        ("valid", "#d62728", rows.iter().map(|r| r.valid_total_full).collect()),
    ];
    let all: Vec<f64> = series
        .iter()
        .flat_map(|s| s.2.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    let (lo, hi) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi)
    } else {
        (lo.min(0.0), lo.max(0.0) + 1.0)
    };
    let n = rows.len().max(2) - 1;
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / n as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">epoch</text>"#,
        w / 2.0,
        h - 15.0
    )
    .unwrap();
    writeln!(s, r#"<text x="5" y="{}" font-size="11">{hi:.1}</text>"#, pad + 4.0).unwrap();
    writeln!(s, r#"<text x="5" y="{}" font-size="11">{lo:.1}</text>"#, h - pad).unwrap();
    for (k, (name, colour, vals)) in series.iter().enumerate() {
        let pts: Vec<String> = vals
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", x(i), y(v)))
            .collect();
        writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
            pts.join(" ")
        )
        .unwrap();
        let ly = pad + 15.0 * k as f64;
        writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-size="12" fill="{colour}">{name}</text>"#,
            w - pad - 40.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}
