//! Trial datasets, the `.lfds` container they live in, and batching.
//!
//! Neuron and time conventions: `recon_data` lists held-in neurons first,
//! then held-out neurons; its first `T_enc` steps are aligned with
//! `encod_data` and any further steps are forward-prediction bins.

pub mod container;
pub mod lorenz;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use container::{Container, DType};
pub use lorenz::{generate_lorenz, LorenzConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitKind {
    Train,
    Valid,
}

impl SplitKind {
    pub fn prefix(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Valid => "valid",
        }
    }
}

/// One split's arrays, all `[trials, time, neurons]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub encod_data: Tensor,
    pub recon_data: Tensor,
    pub truth: Option<Tensor>,
}

impl Split {
    pub fn n_trials(&self) -> usize {
        self.encod_data.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialDataset {
    pub train: Split,
    pub valid: Split,
}

/// Dimensions shared by both splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataDims {
    pub t_enc: usize,
    pub t_recon: usize,
    pub n_enc: usize,
    pub n_recon: usize,
}

impl DataDims {
    pub fn n_held_out(&self) -> usize {
        self.n_recon - self.n_enc
    }

    pub fn fp_steps(&self) -> usize {
        self.t_recon - self.t_enc
    }
}

fn dims3(name: &str, t: &Tensor) -> Result<[usize; 3]> {
    match *t.shape() {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::Dataset(format!("{name} must be 3-d, got {:?}", t.shape()))),
    }
}

impl TrialDataset {
    pub fn new(train: Split, valid: Split) -> Result<Self> {
        let ds = Self { train, valid };
        ds.validate()?;
        Ok(ds)
    }

    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Valid => &self.valid,
        }
    }

    pub fn dims(&self) -> DataDims {
        let e = self.train.encod_data.shape();
        let r = self.train.recon_data.shape();
        DataDims {
            t_enc: e[1],
            t_recon: r[1],
            n_enc: e[2],
            n_recon: r[2],
        }
    }

    fn validate(&self) -> Result<()> {
        let mut reference: Option<[usize; 4]> = None;
        for kind in [SplitKind::Train, SplitKind::Valid] {
            let s = self.split(kind);
            let p = kind.prefix();
            let [ne, te, ce] = dims3(&format!("{p}_encod_data"), &s.encod_data)?;
            let [nr, tr, cr] = dims3(&format!("{p}_recon_data"), &s.recon_data)?;
            if ne != nr || tr < te || cr < ce {
                return Err(Error::Dataset(format!(
                    "{p} encod shape {:?} inconsistent with recon shape {:?}",
                    s.encod_data.shape(),
                    s.recon_data.shape()
                )));
            }
            if let Some(truth) = &s.truth {
                if truth.shape() != s.recon_data.shape() {
                    return Err(Error::Dataset(format!(
                        "{p}_truth shape {:?} differs from recon {:?}",
                        truth.shape(),
                        s.recon_data.shape()
                    )));
                }
            }
            let dims = [te, ce, tr, cr];
            match reference {
                None => reference = Some(dims),
                Some(r) if r != dims => {
                    return Err(Error::Dataset(format!(
                        "train/valid dimension mismatch: {r:?} vs {dims:?}"
                    )))
                }
                _ => {}
            }
            if ne == 0 {
                return Err(Error::Dataset(format!("{p} split has no trials")));
            }
            if !s.encod_data.is_finite() || !s.recon_data.is_finite() {
                return Err(Error::Dataset(format!("{p} data contains non-finite values")));
            }
        }
        Ok(())
    }

    /// True when every data entry is a non-negative integer.
    pub fn is_count_data(&self) -> bool {
        [&self.train, &self.valid].iter().all(|s| {
            [&s.encod_data, &s.recon_data]
                .iter()
                .all(|t| t.data().iter().all(|&v| v >= 0.0 && v.fract() == 0.0))
        })
    }

    pub fn to_container(&self) -> Result<Container> {
        let dtype = if self.is_count_data() { DType::I64 } else { DType::F64 };
        let mut c = Container::new();
        for kind in [SplitKind::Train, SplitKind::Valid] {
            let s = self.split(kind);
            let p = kind.prefix();
            c.insert(format!("{p}_encod_data"), dtype, s.encod_data.clone())?;
            c.insert(format!("{p}_recon_data"), dtype, s.recon_data.clone())?;
            if let Some(t) = &s.truth {
                c.insert(format!("{p}_truth"), DType::F64, t.clone())?;
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let split = |p: &str| -> Result<Split> {
            Ok(Split {
                encod_data: c.require(&format!("{p}_encod_data"))?.clone(),
                recon_data: c.require(&format!("{p}_recon_data"))?.clone(),
                truth: c.get(&format!("{p}_truth")).map(|a| a.values.clone()),
            })
        };
        let ds = Self::new(split("train")?, split("valid")?)?;
        if !ds.is_count_data() {
            log::warn!("dataset holds non-integer values; count-based observation models will reject it");
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

pub fn load_dataset(path: &Path) -> Result<TrialDataset> {
    TrialDataset::load(path)
}

/// Data flowing through one forward/loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialBatch {
    pub encod_data: Tensor,
    pub recon_data: Tensor,
    /// Per-element reconstruction loss weights, same shape as `recon_data`.
    pub sample_mask: Tensor,
    pub trial_indices: Vec<usize>,
}

impl TrialBatch {
    pub fn from_split(split: &Split, indices: &[usize]) -> Self {
        let recon_data = split.recon_data.gather_rows(indices);
        let sample_mask = Tensor::ones(recon_data.shape());
        Self {
            encod_data: split.encod_data.gather_rows(indices),
            recon_data,
            sample_mask,
            trial_indices: indices.to_vec(),
        }
    }

    pub fn size(&self) -> usize {
        self.trial_indices.len()
    }
}

/// Trial order for one epoch.
pub fn epoch_order<R: Rng + ?Sized>(n_trials: usize, shuffle: bool, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_trials).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order
}

/// Splits one epoch of `split` into batches; the last may be short.
pub fn batches<R: Rng + ?Sized>(
    dataset: &TrialDataset,
    split: SplitKind,
    batch_size: usize,
    shuffle: bool,
    rng: &mut R,
) -> Result<Vec<TrialBatch>> {
    if batch_size == 0 {
        return Err(Error::Dataset("batch_size must be at least 1".into()));
    }
    let s = dataset.split(split);
    if s.n_trials() == 0 {
        return Err(Error::Dataset(format!("{} split is empty", split.prefix())));
    }
    let order = epoch_order(s.n_trials(), shuffle, rng);
    Ok(order
        .chunks(batch_size)
        .map(|idx| TrialBatch::from_split(s, idx))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(n_train: usize, t_enc: usize, t_rec: usize, n_enc: usize, n_rec: usize) -> TrialDataset {
        let mk = |n: usize, t: usize, c: usize| {
            Tensor::new(vec![n, t, c], (0..n * t * c).map(|i| (i % 5) as f64).collect()).unwrap()
        };
        let split = |n| Split {
            encod_data: mk(n, t_enc, n_enc),
            recon_data: mk(n, t_rec, n_rec),
            truth: None,
        };
        TrialDataset::new(split(n_train), split(3)).unwrap()
    }

    #[test]
    fn shape_bookkeeping() {
        let ds = toy(100, 50, 50, 30, 30);
        assert_eq!(ds.dims().n_enc, 30);
        assert_eq!(ds.dims().n_recon, 30);
        let fp = toy(4, 50, 55, 30, 30);
        assert_eq!(fp.dims().t_recon, fp.dims().t_enc + 5);
        assert_eq!(fp.dims().fp_steps(), 5);
        let co = toy(4, 50, 50, 30, 38);
        assert_eq!(co.dims().n_held_out(), 8);
    }

    #[test]
    fn missing_array_is_named() {
        let ds = toy(4, 5, 5, 3, 3);
        let mut c = ds.to_container().unwrap();
        let mut pruned = Container::new();
        for name in c.names().map(str::to_owned).collect::<Vec<_>>() {
            if name != "valid_recon_data" {
                let a = c.get(&name).unwrap().clone();
                pruned.insert(name, a.dtype, a.values).unwrap();
            }
        }
        c = pruned;
        match TrialDataset::from_container(&c) {
            Err(Error::MissingArray(name)) => assert_eq!(name, "valid_recon_data"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_shapes_rejected() {
        let split = Split {
            encod_data: Tensor::zeros(&[2, 5, 4]),
            recon_data: Tensor::zeros(&[2, 4, 4]),
            truth: None,
        };
        assert!(TrialDataset::new(split.clone(), split).is_err());
    }

    #[test]
    fn batch_sizes_and_order() {
        let ds = toy(10, 2, 2, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = batches(&ds, SplitKind::Train, 4, false, &mut rng).unwrap();
        assert_eq!(b.iter().map(|b| b.size()).collect::<Vec<_>>(), vec![4, 4, 2]);
        let flat: Vec<usize> = b.iter().flat_map(|b| b.trial_indices.clone()).collect();
        assert_eq!(flat, (0..10).collect::<Vec<_>>());
        assert!(b[0].sample_mask.data().iter().all(|&m| m == 1.0));
        assert!(batches(&ds, SplitKind::Train, 0, false, &mut rng).is_err());
    }

    #[test]
    fn shuffled_epochs_partition_and_repeat_with_seed() {
        let ds = toy(37, 2, 2, 1, 1);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..2)
                .map(|_| {
                    batches(&ds, SplitKind::Train, 5, true, &mut rng)
                        .unwrap()
                        .into_iter()
                        .flat_map(|b| b.trial_indices)
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        };
        let a = run(7);
        assert_eq!(a, run(7));
        for epoch in &a {
            let mut sorted = epoch.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..37).collect::<Vec<_>>());
        }
        assert_ne!(a[0], (0..37).collect::<Vec<_>>());
    }
}
