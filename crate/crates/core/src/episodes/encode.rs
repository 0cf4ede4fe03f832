use std::sync::Arc;

use super::sample::{Episode, Example};
use crate::error::Result;
use crate::numerics::{Scalar, Tape, Tensor};
use crate::srwm::{ModelConfig, Params};

/// One model input: an example and the label index fed alongside it.
/// Label index `n_way` is the unknown-label token.
#[derive(Debug, Clone)]
pub struct StepToken<T> {
    pub input: Arc<Tensor<T>>,
    pub label: usize,
}

/// An episode as the three step sequences the rollout consumes.
#[derive(Debug, Clone)]
pub struct EncodedEpisode<T> {
    pub n_way: usize,
    pub support: Vec<StepToken<T>>,
    pub continuation: Vec<StepToken<T>>,
    pub queries: Vec<StepToken<T>>,
    /// True label of each query.
    pub targets: Vec<usize>,
}

impl<T: Scalar> EncodedEpisode<T> {
    pub fn unknown(&self) -> usize {
        self.n_way
    }

    /// Support, continuation, then queries.
    pub fn rollout_order(&self) -> Vec<&StepToken<T>> {
        self.support
            .iter()
            .chain(&self.continuation)
            .chain(&self.queries)
            .collect()
    }
}

fn labelled<T: Scalar>(examples: &[Example<T>], delayed: bool, mut prev: usize) -> (Vec<StepToken<T>>, usize) {
    let steps = examples
        .iter()
        .map(|e| {
            let label = if delayed { prev } else { e.label };
            prev = e.label;
            StepToken {
                input: Arc::clone(&e.input),
                label,
            }
        })
        .collect();
    (steps, prev)
}

/// Pairs every example with the label fed next to it.
///
/// Standard mode feeds `(x_t, y_t)`. Delayed mode feeds `(x_t, y_{t-1})`
/// with the unknown token at the first step; the continuation resumes the
/// delay from the last support label. Queries always carry the unknown
/// token.
pub fn encode_episode<T: Scalar>(episode: &Episode<T>, delayed: bool) -> EncodedEpisode<T> {
    let n = episode.spec.n_way;
    let (support, last) = labelled(&episode.support, delayed, n);
    let (continuation, _) = labelled(&episode.continuation, delayed, last);
    let queries = episode
        .queries
        .iter()
        .map(|e| StepToken {
            input: Arc::clone(&e.input),
            label: n,
        })
        .collect();
    EncodedEpisode {
        n_way: n,
        support,
        continuation,
        queries,
        targets: episode.queries.iter().map(|e| e.label).collect(),
    }
}

/// Step vectors `input_embed(x) + label_embed(y)` for tokens, in order.
pub fn embed_tokens<'a, T: Scalar>(
    config: &ModelConfig,
    params: &Params<T>,
    tokens: impl IntoIterator<Item = &'a StepToken<T>>,
) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::new();
    let p = params.register(&mut tape, false);
    tokens
        .into_iter()
        .map(|tok| {
            let x = tape.leaf_shared(Arc::clone(&tok.input), false);
            let e = config.embed(&mut tape, &p, x, tok.label)?;
            Ok(tape.value(e).clone())
        })
        .collect()
}
