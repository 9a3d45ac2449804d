//! Checkpoint files (`LFCK0001`).
//!
//! Everything needed to continue a run bit-for-bit: parameter tensors by
//! name, optimizer moments, counters, the training RNG position, the
//! scheduler and early-stopping state, the partial-epoch accumulators, and
//! the metrics history. Integers and floats are little-endian.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{EpochAccumulator, TrainState};
use crate::data::container::{write_atomic, Reader};
use crate::error::{Error, Result};
use crate::metrics::MetricsRow;
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LFCK0001";

/// Hex SHA-256 of a resolved configuration text.
pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub config_hash: String,
    pub params: Vec<SavedParam>,
    pub state: TrainState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
}

fn read_str(r: &mut Reader<'_>) -> Result<String> {
    let n = r.u32()? as usize;
    String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint string is not utf-8".into()))
}

fn read_len(r: &mut Reader<'_>, elem: usize) -> Result<usize> {
    let n = r.u64()? as usize;
    // reject lengths the remaining bytes cannot hold before allocating
    if n.saturating_mul(elem) > r.bytes.len() - r.pos {
        return Err(Error::Format(format!(
            "truncated: array of {n} elements at offset {}",
            r.pos
        )));
    }
    Ok(n)
}

fn read_f64s(r: &mut Reader<'_>) -> Result<Vec<f64>> {
    let n = read_len(r, 8)?;
    (0..n).map(|_| r.f64()).collect()
}

impl CheckpointRecord {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.str(&self.config_hash);
        let s = &self.state;
        w.u64(s.epoch);
        w.u64(s.step);
        w.u64(s.cursor);
        w.u8(s.stopped as u8);
        w.0.extend_from_slice(&s.rng.get_seed());
        w.u64(s.rng.get_stream());
        let pos = s.rng.get_word_pos();
        w.u64(pos as u64);
        w.u64((pos >> 64) as u64);
        w.f64(s.lr);
        w.u8(s.smoothed.is_some() as u8);
        w.f64(s.smoothed.unwrap_or(0.0));
        w.f64(s.best_smoothed);
        w.u64(s.best_epoch);
        w.u64(s.lr_bad_epochs);
        w.u64(s.stop_bad_epochs);
        w.f64(s.adam.beta1);
        w.f64(s.adam.beta2);
        w.f64(s.adam.eps);
        w.u64(s.adam.t);
        w.f64s(&s.adam.m);
        w.f64s(&s.adam.v);
        w.u64(s.order.len() as u64);
        s.order.iter().for_each(|&i| w.u64(i as u64));
        w.f64(s.acc.trials);
        s.acc.sums.iter().for_each(|&v| w.f64(v));
        w.u64(s.history.len() as u64);
        for row in &s.history {
            w.u64(row.epoch);
            w.u64(row.step);
            row.floats().iter().for_each(|&v| w.f64(v));
        }
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.str(&p.name);
            w.u8(p.trainable as u8);
            w.u32(p.value.ndim() as u32);
            p.value.shape().iter().for_each(|&d| w.u64(d as u64));
            p.value.data().iter().for_each(|&v| w.f64(v));
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic, expected LFCK0001".into()));
        }
        let config_hash = read_str(&mut r)?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let cursor = r.u64()?;
        let stopped = r.take(1)?[0] != 0;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let lo = r.u64()? as u128;
        let hi = r.u64()? as u128;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(lo | (hi << 64));
        let lr = r.f64()?;
        let has_smoothed = r.take(1)?[0] != 0;
        let smoothed_v = r.f64()?;
        let best_smoothed = r.f64()?;
        let best_epoch = r.u64()?;
        let lr_bad_epochs = r.u64()?;
        let stop_bad_epochs = r.u64()?;
        let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
        let t = r.u64()?;
        let m = read_f64s(&mut r)?;
        let v = read_f64s(&mut r)?;
        let n_order = read_len(&mut r, 8)?;
        let order = (0..n_order)
            .map(|_| r.u64().map(|i| i as usize))
            .collect::<Result<Vec<_>>>()?;
        let trials = r.f64()?;
        let mut sums = [0.0; 5];
        for s in &mut sums {
            *s = r.f64()?;
        }
        let n_rows = read_len(&mut r, 160)?;
        let mut history = Vec::with_capacity(n_rows);
        for _ in 0..n_rows {
            let (e, st) = (r.u64()?, r.u64()?);
            let mut f = [0.0; 18];
            for x in &mut f {
                *x = r.f64()?;
            }
            history.push(MetricsRow::from_floats(e, st, &f));
        }
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params.min(4096));
        for _ in 0..n_params {
            let name = read_str(&mut r)?;
            let trainable = r.take(1)?[0] != 0;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            if numel.saturating_mul(8) > bytes.len() - r.pos {
                return Err(Error::Format(format!("truncated: parameter `{name}`")));
            }
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.push(SavedParam {
                name,
                value: Tensor::new(shape, data)?,
                trainable,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes in checkpoint",
                bytes.len() - r.pos
            )));
        }
        let adam = Adam {
            beta1,
            beta2,
            eps,
            t,
            m,
            v,
        };
        Ok(Self {
            config_hash,
            params,
            state: TrainState {
                epoch,
                step,
                cursor,
                order,
                rng,
                adam,
                lr,
                smoothed: has_smoothed.then_some(smoothed_v),
                best_smoothed,
                best_epoch,
                lr_bad_epochs,
                stop_bad_epochs,
                stopped,
                acc: EpochAccumulator { trials, sums },
                history,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and insists the checkpoint came from the same resolved config.
    pub fn load_checked(path: &Path, expected_hash: &str) -> Result<Self> {
        let rec = Self::load(path)?;
        if rec.config_hash != expected_hash {
            return Err(Error::HashMismatch {
                found: rec.config_hash,
                expected: expected_hash.to_string(),
            });
        }
        Ok(rec)
    }
}
