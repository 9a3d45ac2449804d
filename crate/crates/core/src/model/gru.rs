//! GRU cell on the tape.
//!
//! Weights are stored input-major: `x @ w_ih` gives the `[r | z | n]`
//! pre-activations. The candidate gate sees the reset-scaled state
//! through its own recurrent matrix, `n = tanh(x W_n + (r * h) U_n + b_n)`.

use crate::autodiff::{Tape, Var};
use crate::error::Result;

/// GRU weights bound to a tape for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    /// `[in, 3H]`, absent when the cell has no input.
    pub w_ih: Option<Var>,
    /// Bias already expanded to `[B, 3H]`.
    pub bias: Var,
    /// `[H, 2H]`
    pub w_hh_rz: Var,
    /// `[H, H]`
    pub w_hh_n: Var,
    pub hidden: usize,
    pub clip: f64,
}

impl GruVars {
    pub fn step(&self, tape: &mut Tape, x: Option<Var>, h: Var) -> Result<Var> {
        let xi = match (x, self.w_ih) {
            (Some(x), Some(w)) => {
                let p = tape.matmul(x, w)?;
                tape.add(p, self.bias)?
            }
            _ => self.bias,
        };
        self.step_projected(tape, xi, h)
    }

    /// One step given the input projection `x @ w_ih + b`, `[B, 3H]`.
    pub fn step_projected(&self, tape: &mut Tape, xi: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let x_rz = tape.slice(xi, 0, 2 * hd)?;
        let x_n = tape.slice(xi, 2 * hd, hd)?;
        let h_rz = tape.matmul(h, self.w_hh_rz)?;
        let rz = tape.add(x_rz, h_rz)?;
        let rz = tape.sigmoid(rz)?;
        let r = tape.slice(rz, 0, hd)?;
        let z = tape.slice(rz, hd, hd)?;
        let rh = tape.mul(r, h)?;
        let h_n = tape.matmul(rh, self.w_hh_n)?;
        let n = tape.add(x_n, h_n)?;
        let n = tape.tanh(n)?;
        // (1 - z) n + z h = n + z (h - n)
        let d = tape.sub(h, n)?;
        let zd = tape.mul(z, d)?;
        let out = tape.add(n, zd)?;
        if self.clip.is_finite() && self.clip > 0.0 {
            tape.clamp(out, -self.clip, self.clip)
        } else {
            Ok(out)
        }
    }
}
