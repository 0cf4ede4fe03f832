//! Parameter containers, generic over the leaf type.
//!
//! `ModelParams<Shared<T>>` holds tensors; `ModelParams<Var>` holds the same
//! parameters registered on a tape. Both traverse their leaves in the same
//! fixed order, which is also the checkpoint and optimizer order.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::config::ModelConfig;
use super::layer::{HeadLayout, SrwmState};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Readout weights start at this fraction of the usual `1/sqrt(fan_in)` bound.
pub const READOUT_SCALE: f64 = 0.1;

pub type Shared<T> = Arc<Tensor<T>>;

/// Parameter tensors of a model.
pub type Params<T> = ModelParams<Shared<T>>;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<P> {
    /// `[out, in]`
    pub weight: P,
    pub bias: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<P> {
    pub gain: P,
    pub bias: P,
}

/// One Transformer-style block with the SRWM in place of self-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<P> {
    pub norm1: NormParams<P>,
    /// Initial matrix `W_0` of every head.
    pub srwm: Vec<P>,
    /// Optional `[d_model, d_model]` projection of the concatenated heads.
    pub merge: Option<P>,
    pub norm2: NormParams<P>,
    pub ff_in: LinearParams<P>,
    pub ff_out: LinearParams<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P> {
    pub input: LinearParams<P>,
    /// `[n_way + 1, d_model]`; the last row is the unknown-label token.
    pub labels: P,
    pub blocks: Vec<BlockParams<P>>,
    pub final_norm: NormParams<P>,
    pub readout: LinearParams<P>,
}

/// Model state: one SRWM state per block.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<S> {
    pub blocks: Vec<SrwmState<S>>,
}

impl<S> ModelState<S> {
    pub fn steps(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.t)
    }
}

/// Deep copy of the state, for branching a rollout.
pub fn snapshot_state<S: Clone>(state: &ModelState<S>) -> ModelState<S> {
    state.clone()
}

impl<P> LinearParams<P> {
    fn try_map<'a, Q, E>(&'a self, name: &str, f: &mut impl FnMut(&str, &'a P) -> Result<Q, E>) -> Result<LinearParams<Q>, E> {
        Ok(LinearParams {
            weight: f(&format!("{name}.weight"), &self.weight)?,
            bias: f(&format!("{name}.bias"), &self.bias)?,
        })
    }
}

impl<P> NormParams<P> {
    fn try_map<'a, Q, E>(&'a self, name: &str, f: &mut impl FnMut(&str, &'a P) -> Result<Q, E>) -> Result<NormParams<Q>, E> {
        Ok(NormParams {
            gain: f(&format!("{name}.gain"), &self.gain)?,
            bias: f(&format!("{name}.bias"), &self.bias)?,
        })
    }
}

impl<P> BlockParams<P> {
    fn try_map<'a, Q, E>(&'a self, name: &str, f: &mut impl FnMut(&str, &'a P) -> Result<Q, E>) -> Result<BlockParams<Q>, E> {
        Ok(BlockParams {
            norm1: self.norm1.try_map(&format!("{name}.norm1"), f)?,
            srwm: self
                .srwm
                .iter()
                .enumerate()
                .map(|(h, w)| f(&format!("{name}.srwm.head{h}"), w))
                .collect::<Result<_, E>>()?,
            merge: match &self.merge {
                Some(m) => Some(f(&format!("{name}.merge"), m)?),
                None => None,
            },
            norm2: self.norm2.try_map(&format!("{name}.norm2"), f)?,
            ff_in: self.ff_in.try_map(&format!("{name}.ff_in"), f)?,
            ff_out: self.ff_out.try_map(&format!("{name}.ff_out"), f)?,
        })
    }
}

impl<P> ModelParams<P> {
    /// Maps every leaf in canonical order, passing its dotted name.
    pub fn try_map<'a, Q, E>(&'a self, mut f: impl FnMut(&str, &'a P) -> Result<Q, E>) -> Result<ModelParams<Q>, E> {
        Ok(ModelParams {
            input: self.input.try_map("input", &mut f)?,
            labels: f("labels", &self.labels)?,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.try_map(&format!("block{i}"), &mut f))
                .collect::<Result<_, E>>()?,
            final_norm: self.final_norm.try_map("final_norm", &mut f)?,
            readout: self.readout.try_map("readout", &mut f)?,
        })
    }

    pub fn map<'a, Q>(&'a self, mut f: impl FnMut(&str, &'a P) -> Q) -> ModelParams<Q> {
        self.try_map(|n, p| Ok::<_, std::convert::Infallible>(f(n, p)))
            .unwrap_or_else(|e| match e {})
    }

    /// Leaves with their names, in canonical order.
    pub fn entries(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        let _ = self.map(|n, p| out.push((n.to_string(), p)));
        out
    }

    pub fn leaves(&self) -> Vec<&P> {
        self.entries().into_iter().map(|(_, p)| p).collect()
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out: Vec<&mut P> = Vec::new();
        let ModelParams {
            input,
            labels,
            blocks,
            final_norm,
            readout,
        } = self;
        out.push(&mut input.weight);
        out.push(&mut input.bias);
        out.push(labels);
        for b in blocks {
            out.push(&mut b.norm1.gain);
            out.push(&mut b.norm1.bias);
            out.extend(b.srwm.iter_mut());
            if let Some(m) = b.merge.as_mut() {
                out.push(m);
            }
            out.push(&mut b.norm2.gain);
            out.push(&mut b.norm2.bias);
            out.push(&mut b.ff_in.weight);
            out.push(&mut b.ff_in.bias);
            out.push(&mut b.ff_out.weight);
            out.push(&mut b.ff_out.bias);
        }
        out.push(&mut final_norm.gain);
        out.push(&mut final_norm.bias);
        out.push(&mut readout.weight);
        out.push(&mut readout.bias);
        out
    }

    pub fn initial_state(&self) -> ModelState<P>
    where
        P: Clone,
    {
        ModelState {
            blocks: self
                .blocks
                .iter()
                .map(|b| SrwmState {
                    heads: b.srwm.clone(),
                    t: 0,
                })
                .collect(),
        }
    }
}

impl<T: Scalar> ModelParams<Shared<T>> {
    /// Registers every tensor as a leaf on `tape` without copying.
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> ModelParams<Var> {
        self.map(|_, p| tape.leaf_shared(Arc::clone(p), requires_grad))
    }

    pub fn count(&self) -> usize {
        self.leaves().iter().map(|t| t.len()).sum()
    }

    pub fn to_tensors(&self) -> Vec<Tensor<T>> {
        self.leaves().into_iter().map(|t| (**t).clone()).collect()
    }

    /// Rebuilds parameters from tensors in canonical order, checking shapes
    /// against `template`.
    pub fn with_tensors(template: &Self, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let n = template.leaves().len();
        if tensors.len() != n {
            return Err(Error::CheckpointMismatch(format!(
                "expected {n} parameter tensors, found {}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        template.try_map(|name, t| {
            let next = it.next().expect("length checked");
            if next.shape() != t.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    next.shape(),
                    t.shape()
                )));
            }
            Ok(Arc::new(next))
        })
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let (a, b) = (self.leaves(), other.leaves());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.bitwise_eq(y))
    }

    /// Deterministic initialization from `rng`.
    ///
    /// Linear weights and the `y`, `k`, `q` rows of each `W_0` are uniform in
    /// `±1/sqrt(fan_in)`; the learning-rate row of `W_0` is the constant
    /// `config.beta_init`; norms start at identity; the unknown-label row of
    /// the label table is zero. The readout is shrunk by [`READOUT_SCALE`] so
    /// an untrained model predicts close to uniform.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let uniform = |rng: &mut dyn rand::RngCore, shape: &[usize], bound: f64| -> Shared<T> {
            let dist = Uniform::new_inclusive(-bound, bound);
            let n = shape.iter().product();
            let data = (0..n).map(|_| T::c(dist.sample(rng))).collect();
            Arc::new(Tensor::new(shape.to_vec(), data).expect("shape"))
        };
        let zeros = |shape: &[usize]| Arc::new(Tensor::<T>::zeros(shape));
        let ones = |n: usize| Arc::new(Tensor::<T>::filled(&[n], T::one()));
        let norm = |n: usize| NormParams {
            gain: ones(n),
            bias: zeros(&[n]),
        };
        let linear = |rng: &mut dyn rand::RngCore, out: usize, inp: usize| LinearParams {
            weight: uniform(rng, &[out, inp], 1.0 / (inp as f64).sqrt()),
            bias: zeros(&[out]),
        };

        let input = linear(rng, d, config.embed_in_dim());
        let labels = {
            let mut t = (*uniform(rng, &[config.n_way + 1, d], 1.0)).clone();
            let start = config.n_way * d;
            t.data_mut()[start..].iter_mut().for_each(|v| *v = T::zero());
            Arc::new(t)
        };
        let layout = config.head_layout();
        let mut blocks = Vec::with_capacity(config.blocks);
        for _ in 0..config.blocks {
            let srwm = (0..config.heads)
                .map(|_| {
                    let mut w = (*uniform(rng, &layout.shape(), 1.0 / (layout.d_in as f64).sqrt())).clone();
                    let row = layout.beta_row() * layout.d_in;
                    w.data_mut()[row..row + layout.d_in]
                        .iter_mut()
                        .for_each(|v| *v = T::c(config.beta_init));
                    Arc::new(w)
                })
                .collect();
            let merge = config
                .merge_projection
                .then(|| uniform(rng, &[d, d], 1.0 / (d as f64).sqrt()));
            blocks.push(BlockParams {
                norm1: norm(d),
                srwm,
                merge,
                norm2: norm(d),
                ff_in: linear(rng, config.d_ff, d),
                ff_out: linear(rng, d, config.d_ff),
            });
        }
        let final_norm = norm(d);
        let readout = LinearParams {
            weight: uniform(rng, &[config.n_way, d], READOUT_SCALE / (d as f64).sqrt()),
            bias: zeros(&[config.n_way]),
        };
        Ok(ModelParams {
            input,
            labels,
            blocks,
            final_norm,
            readout,
        })
    }
}

/// Closed-form parameter count:
///
/// ```text
/// e*D + D                      input embedding (e = input or patch dim)
/// + (N + 1)*D                  label table
/// + L * ( 4*D                  two norms
///       + H*(3*d_h + 1)*d_h    SRWM matrices
///       + D*D                  head merge (if enabled)
///       + 2*D*F + F + D )      feedforward
/// + 2*D + D*N + N              final norm and readout
/// ```
pub fn parameter_count(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let dh = config.head_dim();
    let per_block = 4 * d
        + config.heads * (3 * dh + 1) * dh
        + if config.merge_projection { d * d } else { 0 }
        + 2 * d * config.d_ff
        + config.d_ff
        + d;
    config.embed_in_dim() * d + d + (config.n_way + 1) * d + config.blocks * per_block + 2 * d + d * config.n_way + config.n_way
}

impl ModelConfig {
    pub fn head_layout(&self) -> HeadLayout {
        HeadLayout::new(self.head_dim(), self.head_dim())
    }
}
