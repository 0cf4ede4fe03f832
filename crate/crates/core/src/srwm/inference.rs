//! Gradient-free evaluation with constant memory in sequence length.
//!
//! Each step is evaluated on a scratch tape that is cleared afterwards;
//! only the per-head matrices survive between steps.

use std::sync::Arc;

use super::config::ModelConfig;
use super::params::{ModelParams, ModelState, Shared};
use crate::error::Result;
use crate::numerics::{Scalar, Tape, Tensor};

pub struct Inference<'a, T: Scalar> {
    config: &'a ModelConfig,
    params: &'a ModelParams<Shared<T>>,
    tape: Tape<T>,
}

impl<'a, T: Scalar> Inference<'a, T> {
    pub fn new(config: &'a ModelConfig, params: &'a ModelParams<Shared<T>>) -> Self {
        Inference {
            config,
            params,
            tape: Tape::new(),
        }
    }

    pub fn initial_state(&self) -> ModelState<Shared<T>> {
        self.params.initial_state()
    }

    /// Feeds one `(input, label)` step, returning the next state and, when
    /// `want_logits`, the logits at this step.
    pub fn step(
        &mut self,
        state: &ModelState<Shared<T>>,
        input: &Shared<T>,
        label: usize,
        want_logits: bool,
    ) -> Result<(ModelState<Shared<T>>, Option<Tensor<T>>)> {
        self.tape.clear();
        let tape = &mut self.tape;
        let p = self.params.register(tape, false);
        let s = state_to_tape(tape, state);
        let x = tape.leaf_shared(Arc::clone(input), false);
        let e = self.config.embed(tape, &p, x, label)?;
        let (h, next) = self.config.step(tape, &p, &s, e)?;
        let logits = if want_logits {
            let l = self.config.logits(tape, &p, h)?;
            Some(tape.value(l).clone())
        } else {
            None
        };
        let next = ModelState {
            blocks: next
                .blocks
                .iter()
                .map(|b| super::layer::SrwmState {
                    heads: b.heads.iter().map(|&v| tape.value_arc(v)).collect(),
                    t: b.t,
                })
                .collect(),
        };
        self.tape.clear();
        Ok((next, logits))
    }

    /// Feeds a sequence, calling `on_logits(t, logits)` after every step.
    /// Nothing proportional to the sequence length is retained.
    pub fn stream<'s>(
        &mut self,
        state: &ModelState<Shared<T>>,
        steps: impl IntoIterator<Item = (&'s Shared<T>, usize)>,
        mut on_logits: impl FnMut(usize, &Tensor<T>),
    ) -> Result<ModelState<Shared<T>>> {
        let mut state = state.clone();
        for (t, (x, label)) in steps.into_iter().enumerate() {
            let (next, logits) = self.step(&state, x, label, true)?;
            on_logits(t, logits.as_ref().expect("requested"));
            state = next;
        }
        Ok(state)
    }

    /// Number of scalars held by a state, which is independent of how many
    /// steps produced it.
    pub fn state_scalars(state: &ModelState<Shared<T>>) -> usize {
        state
            .blocks
            .iter()
            .flat_map(|b| b.heads.iter())
            .map(|w| w.len())
            .sum()
    }
}

pub(crate) fn state_to_tape<T: Scalar>(
    tape: &mut Tape<T>,
    state: &ModelState<Shared<T>>,
) -> ModelState<crate::numerics::Var> {
    ModelState {
        blocks: state
            .blocks
            .iter()
            .map(|b| super::layer::SrwmState {
                heads: b.heads.iter().map(|w| tape.leaf_shared(Arc::clone(w), false)).collect(),
                t: b.t,
            })
            .collect(),
    }
}
