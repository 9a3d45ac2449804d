//! Batch- and loss-side data augmentations.
//!
//! A transform may touch the batch before the forward pass, the
//! per-element reconstruction loss after it, or both. Loss-side masks are
//! composed by elementwise product, so their order does not matter; batch
//! mutations run in declared order.

use rand::Rng;
use rand::RngCore;

use crate::autodiff::{Tape, Var};
use crate::data::TrialBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Zeros random encoder inputs and trains the reconstruction only on the
/// entries that were hidden from the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinatedDropout {
    pub rate: f64,
    pub rescale: bool,
    /// 1 where the input was kept, 0 where it was dropped; `[B, T_enc, N_enc]`.
    keep: Option<Tensor>,
}

impl CoordinatedDropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("coordinated dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self {
            rate,
            rescale: false,
            keep: None,
        })
    }

    pub fn keep_mask(&self) -> Option<&Tensor> {
        self.keep.as_ref()
    }

    fn apply_batch(&mut self, batch: &mut TrialBatch, rng: &mut dyn RngCore) {
        if self.rate == 0.0 {
            // a zero rate disables the transform rather than hiding the whole slab from the loss
            self.keep = None;
            return;
        }
        let draws = (0..batch.encod_data.numel())
            .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { 1.0 })
            .collect();
        let keep = Tensor::new(batch.encod_data.shape().to_vec(), draws).expect("same numel");
        let scale = if self.rescale { 1.0 / (1.0 - self.rate) } else { 1.0 };
        for (x, k) in batch.encod_data.data_mut().iter_mut().zip(keep.data()) {
            *x *= k * scale;
        }
        self.keep = Some(keep);
    }

    /// `1 - keep` on the encoder slab of the recon shape, 1 elsewhere.
    fn loss_mask(&self, recon_shape: &[usize]) -> Option<Tensor> {
        let keep = self.keep.as_ref()?;
        let (ks, rs) = (keep.shape(), recon_shape);
        let mut mask = Tensor::ones(rs);
        for b in 0..ks[0] {
            for t in 0..ks[1] {
                for n in 0..ks[2] {
                    let k = keep.data()[(b * ks[1] + t) * ks[2] + n];
                    mask.data_mut()[(b * rs[1] + t) * rs[2] + n] = 1.0 - k;
                }
            }
        }
        Some(mask)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ObservedSteps {
    EveryK { k: usize, offset: usize },
    List(Vec<usize>),
}

impl ObservedSteps {
    pub fn contains(&self, t: usize) -> bool {
        match self {
            ObservedSteps::EveryK { k, offset } => t >= *offset && (t - offset) % k == 0,
            ObservedSteps::List(v) => v.contains(&t),
        }
    }
}

/// Hides unobserved time steps from both the encoder and the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectiveBackpropThruTime {
    pub observed: ObservedSteps,
}

impl SelectiveBackpropThruTime {
    pub fn new(observed: ObservedSteps) -> Result<Self> {
        if let ObservedSteps::EveryK { k: 0, .. } = observed {
            return Err(Error::Config("SBTT keep-every-k needs k >= 1".into()));
        }
        Ok(Self { observed })
    }

    fn time_mask(&self, shape: &[usize]) -> Tensor {
        let (t_len, n) = (shape[1], shape[2]);
        let mut m = Tensor::ones(shape);
        for row in m.data_mut().chunks_mut(t_len * n) {
            for t in (0..t_len).filter(|&t| !self.observed.contains(t)) {
                row[t * n..(t + 1) * n].fill(0.0);
            }
        }
        m
    }

    fn apply_batch(&self, batch: &mut TrialBatch) {
        let m = self.time_mask(batch.encod_data.shape());
        for (x, k) in batch.encod_data.data_mut().iter_mut().zip(m.data()) {
            *x *= k;
        }
    }
}

/// Random per-trial (or per-neuron) shifts along time with zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalShift {
    pub max_shift: usize,
    /// Shift only the encoder input, leaving targets in place.
    pub relative: bool,
    /// Draw one shift per trial and neuron instead of one per trial.
    pub per_neuron: bool,
    /// Exclude vacated target bins from the loss.
    pub mask_vacated: bool,
    /// Shifts from the current step, `[B]` or `[B * N]`.
    shifts: Option<Vec<i64>>,
    recon_valid: Option<Tensor>,
}

impl TemporalShift {
    pub fn new(max_shift: usize) -> Self {
        Self {
            max_shift,
            relative: false,
            per_neuron: false,
            mask_vacated: true,
            shifts: None,
            recon_valid: None,
        }
    }

    pub fn shifts(&self) -> Option<&[i64]> {
        self.shifts.as_deref()
    }

    /// `out[t] = x[t - s]`, zero where `t - s` falls outside; returns the
    /// shifted tensor and a validity mask.
    fn shift(x: &Tensor, shifts: &[i64], per_neuron: bool) -> (Tensor, Tensor) {
        let s = x.shape();
        let (t_len, n) = (s[1], s[2]);
        let mut out = Tensor::zeros(s);
        let mut valid = Tensor::zeros(s);
        for b in 0..s[0] {
            for j in 0..n {
                let sh = if per_neuron { shifts[b * n + j] } else { shifts[b] };
                for t in 0..t_len {
                    let src = t as i64 - sh;
                    if (0..t_len as i64).contains(&src) {
                        let i = (b * t_len + t) * n + j;
                        out.data_mut()[i] = x.data()[(b * t_len + src as usize) * n + j];
                        valid.data_mut()[i] = 1.0;
                    }
                }
            }
        }
        (out, valid)
    }

    fn apply_batch(&mut self, batch: &mut TrialBatch, rng: &mut dyn RngCore) -> Result<()> {
        let b = batch.size();
        let n_enc = batch.encod_data.shape()[2];
        let n_rec = batch.recon_data.shape()[2];
        if self.per_neuron && !self.relative && n_rec != n_enc {
            // held-out neurons have no input counterpart to share a shift with
            return Err(Error::Config(
                "per-neuron joint temporal shift needs recon and encod neurons to match".into(),
            ));
        }
        let count = if self.per_neuron { b * n_enc } else { b };
        let m = self.max_shift as i64;
        let shifts: Vec<i64> = (0..count).map(|_| rng.random_range(-m..=m)).collect();
        batch.encod_data = Self::shift(&batch.encod_data, &shifts, self.per_neuron).0;
        self.recon_valid = None;
        if !self.relative {
            let (r, valid) = Self::shift(&batch.recon_data, &shifts, self.per_neuron);
            batch.recon_data = r;
            if self.mask_vacated {
                self.recon_valid = Some(valid);
            }
        }
        self.shifts = Some(shifts);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Augmentation {
    CoordinatedDropout(CoordinatedDropout),
    SelectiveBackpropThruTime(SelectiveBackpropThruTime),
    TemporalShift(TemporalShift),
}

impl Augmentation {
    pub fn name(&self) -> &'static str {
        match self {
            Augmentation::CoordinatedDropout(_) => "CoordinatedDropout",
            Augmentation::SelectiveBackpropThruTime(_) => "SelectiveBackpropThruTime",
            Augmentation::TemporalShift(_) => "TemporalShift",
        }
    }

    fn apply_batch(&mut self, batch: &mut TrialBatch, rng: &mut dyn RngCore) -> Result<()> {
        match self {
            Augmentation::CoordinatedDropout(cd) => cd.apply_batch(batch, rng),
            Augmentation::SelectiveBackpropThruTime(s) => s.apply_batch(batch),
            Augmentation::TemporalShift(ts) => ts.apply_batch(batch, rng)?,
        }
        Ok(())
    }

    fn loss_mask(&self, recon_shape: &[usize]) -> Option<Tensor> {
        match self {
            Augmentation::CoordinatedDropout(cd) => cd.loss_mask(recon_shape),
            Augmentation::SelectiveBackpropThruTime(s) => Some(s.time_mask(recon_shape)),
            Augmentation::TemporalShift(ts) => ts.recon_valid.clone(),
        }
    }

    fn clear(&mut self) {
        match self {
            Augmentation::CoordinatedDropout(cd) => cd.keep = None,
            Augmentation::SelectiveBackpropThruTime(_) => {}
            Augmentation::TemporalShift(ts) => {
                ts.shifts = None;
                ts.recon_valid = None;
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentationStack {
    pub transforms: Vec<Augmentation>,
}

impl AugmentationStack {
    pub fn new(transforms: Vec<Augmentation>) -> Self {
        Self { transforms }
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    /// Runs the batch side of every transform in order, caching whatever
    /// the loss side of this step needs.
    pub fn apply_batch(&mut self, mut batch: TrialBatch, rng: &mut dyn RngCore) -> Result<TrialBatch> {
        for t in &mut self.transforms {
            t.apply_batch(&mut batch, rng)?;
        }
        Ok(batch)
    }

    /// Product of this step's loss-side masks and the batch's sample mask.
    pub fn loss_mask(&self, batch: &TrialBatch) -> Result<Tensor> {
        let shape = batch.recon_data.shape();
        if batch.sample_mask.shape() != shape {
            return Err(Error::shape("loss_mask", batch.sample_mask.shape(), shape));
        }
        let mut mask = batch.sample_mask.clone();
        for m in self.transforms.iter().filter_map(|t| t.loss_mask(shape)) {
            for (a, b) in mask.data_mut().iter_mut().zip(m.data()) {
                *a *= b;
            }
        }
        Ok(mask)
    }

    /// Multiplies per-element losses by the composed mask.
    pub fn apply_loss(&self, tape: &mut Tape, loss: Var, batch: &TrialBatch) -> Result<Var> {
        if tape.shape(loss) != batch.recon_data.shape() {
            return Err(Error::shape("apply_loss", tape.shape(loss), batch.recon_data.shape()));
        }
        let mask = self.loss_mask(batch)?;
        let m = tape.constant(mask);
        tape.mul(loss, m)
    }

    /// Drops per-step state once a step is finished.
    pub fn clear(&mut self) {
        for t in &mut self.transforms {
            t.clear();
        }
    }
}
