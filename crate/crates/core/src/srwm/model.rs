//! Stacked SRWM sequence model on the tape.
//!
//! Each block is pre-normalized:
//!
//! ```text
//! h   = x + merge(concat_h srwm_h(norm1(x)_h))
//! out = h + ff_out(act(ff_in(norm2(h))))
//! ```
//!
//! The model embeds `(input, label)` as `input_embed(x) + label_table[y]`,
//! runs the blocks, and reads out `n_way` logits through a final norm.

use super::config::{Activation, ModelConfig};
use super::layer::{srwm_step, SrwmState};
use super::params::{BlockParams, LinearParams, ModelParams, ModelState, NormParams};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Var};

fn linear<T: Scalar>(tape: &mut Tape<T>, p: &LinearParams<Var>, x: Var) -> Result<Var> {
    let y = tape.matvec(p.weight, x)?;
    tape.add(y, p.bias)
}

fn norm<T: Scalar>(tape: &mut Tape<T>, p: &NormParams<Var>, x: Var, eps: f64) -> Result<Var> {
    tape.layer_norm(x, p.gain, p.bias, T::c(eps))
}

impl ModelConfig {
    /// Embedding of one sequence step: `input_embed(x) + labels[label]`.
    pub fn embed<T: Scalar>(&self, tape: &mut Tape<T>, p: &ModelParams<Var>, x: Var, label: usize) -> Result<Var> {
        if label > self.n_way {
            return Err(Error::Config(format!(
                "label index {label} out of range (n_way = {})",
                self.n_way
            )));
        }
        let inp = self.embed_input(tape, p, x)?;
        let lab = tape.row(p.labels, label)?;
        tape.add(inp, lab)
    }

    /// The input half of [`embed`](Self::embed).
    pub fn embed_input<T: Scalar>(&self, tape: &mut Tape<T>, p: &ModelParams<Var>, x: Var) -> Result<Var> {
        if tape.shape(x) != [self.input_dim] {
            return Err(Error::Shape {
                op: "embed",
                left: vec![self.input_dim],
                right: tape.shape(x).to_vec(),
            });
        }
        if self.patch_dim == 0 {
            return linear(tape, &p.input, x);
        }
        let patches = self.input_dim / self.patch_dim;
        let mut acc = None;
        for i in 0..patches {
            let chunk = tape.slice(x, i * self.patch_dim, self.patch_dim)?;
            let e = tape.matvec(p.input.weight, chunk)?;
            acc = Some(match acc {
                None => e,
                Some(a) => tape.add(a, e)?,
            });
        }
        let mean = tape.mul_const(acc.expect("at least one patch"), T::c(1.0 / patches as f64))?;
        tape.add(mean, p.input.bias)
    }

    /// One block applied to one step vector.
    pub fn block_step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &BlockParams<Var>,
        state: &SrwmState<Var>,
        x: Var,
    ) -> Result<(Var, SrwmState<Var>)> {
        if state.heads.len() != self.heads || p.srwm.len() != self.heads {
            return Err(Error::Config(format!(
                "block has {} head states and {} head parameters, config says {}",
                state.heads.len(),
                p.srwm.len(),
                self.heads
            )));
        }
        let dh = self.head_dim();
        let z = norm(tape, &p.norm1, x, self.norm_eps)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut heads = Vec::with_capacity(self.heads);
        for (h, &w) in state.heads.iter().enumerate() {
            let xh = if self.heads == 1 { z } else { tape.slice(z, h * dh, dh)? };
            let (y, w_next) = srwm_step(tape, w, xh, self.phi_on_input)?;
            outs.push(y);
            heads.push(w_next);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat(&outs)? };
        let merged = match p.merge {
            Some(m) => tape.matvec(m, cat)?,
            None => cat,
        };
        let h1 = tape.add(x, merged)?;

        let z2 = norm(tape, &p.norm2, h1, self.norm_eps)?;
        let f = linear(tape, &p.ff_in, z2)?;
        let f = match self.activation {
            Activation::Relu => tape.relu(f)?,
            Activation::Softplus => tape.softplus(f)?,
        };
        let f = linear(tape, &p.ff_out, f)?;
        let out = tape.add(h1, f)?;
        Ok((out, SrwmState { heads, t: state.t + 1 }))
    }

    /// Runs one embedded step through every block.
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &ModelParams<Var>,
        state: &ModelState<Var>,
        x: Var,
    ) -> Result<(Var, ModelState<Var>)> {
        if state.blocks.len() != p.blocks.len() {
            return Err(Error::Config(format!(
                "{} block states for {} blocks",
                state.blocks.len(),
                p.blocks.len()
            )));
        }
        let mut h = x;
        let mut next = Vec::with_capacity(state.blocks.len());
        for (bp, bs) in p.blocks.iter().zip(&state.blocks) {
            let (out, s) = self.block_step(tape, bp, bs, h)?;
            h = out;
            next.push(s);
        }
        Ok((h, ModelState { blocks: next }))
    }

    /// Feeds embedded steps without computing any logits.
    pub fn advance<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &ModelParams<Var>,
        state: &ModelState<Var>,
        steps: &[Var],
    ) -> Result<ModelState<Var>> {
        let mut state = state.clone();
        for &x in steps {
            state = self.step(tape, p, &state, x)?.1;
        }
        Ok(state)
    }

    /// `n_way` logits from a block-stack output.
    pub fn logits<T: Scalar>(&self, tape: &mut Tape<T>, p: &ModelParams<Var>, h: Var) -> Result<Var> {
        let z = norm(tape, &p.final_norm, h, self.norm_eps)?;
        linear(tape, &p.readout, z)
    }

    /// Processes embedded steps left to right, returning logits at every
    /// step and the final state.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &ModelParams<Var>,
        state: &ModelState<Var>,
        steps: &[Var],
    ) -> Result<(Vec<Var>, ModelState<Var>)> {
        if steps.is_empty() {
            return Err(Error::Config("model_forward needs a nonempty sequence".into()));
        }
        let mut state = state.clone();
        let mut logits = Vec::with_capacity(steps.len());
        for &x in steps {
            let (h, next) = self.step(tape, p, &state, x)?;
            logits.push(self.logits(tape, p, h)?);
            state = next;
        }
        Ok((logits, state))
    }
}
