//! Cross-entropy and the three-term bootstrapped loss.
//!
//! The student distribution comes from queries run on the state right after
//! the support set. The teacher distribution comes from the same queries run
//! after a further continuation of labelled steps from that state, and enters
//! the distillation term through a stop-gradient.
//!
//! `log` inputs are clamped at `1e-30` so that a zero prediction under a
//! one-hot target stays finite. Per-episode terms are means over queries;
//! batches take the mean over episodes.

use std::fmt;
use std::sync::Arc;

use crate::episodes::EncodedEpisode;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::srwm::{ModelConfig, ModelParams};

pub const LOG_CLAMP: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
}

impl LossWeights {
    pub fn new(beta1: f64, beta2: f64, beta3: f64) -> Result<Self> {
        let w = LossWeights { beta1, beta2, beta3 };
        w.validate()?;
        Ok(w)
    }

    /// Plain K-shot cross-entropy.
    pub fn plain() -> Self {
        LossWeights {
            beta1: 1.0,
            beta2: 0.0,
            beta3: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.beta1, self.beta2, self.beta3];
        if all.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative, got {self}")));
        }
        if all.iter().all(|&b| b == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    pub fn needs_teacher(&self) -> bool {
        self.beta2 > 0.0 || self.beta3 > 0.0
    }
}

impl fmt::Display for LossWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.beta1, self.beta2, self.beta3)
    }
}

/// `-sum q log p` on plain values.
pub fn cross_entropy_values<T: Scalar>(q: &[T], p: &[T]) -> Result<T> {
    if q.len() != p.len() {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: vec![q.len()],
            right: vec![p.len()],
        });
    }
    let floor = T::c(LOG_CLAMP);
    let s: T = q.iter().zip(p).map(|(&qi, &pi)| qi * pi.max(floor).ln()).sum();
    Ok(-s)
}

/// `-sum q log p` on the tape.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, q: Var, p: Var) -> Result<Var> {
    if tape.shape(q) != tape.shape(p) {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: tape.shape(q).to_vec(),
            right: tape.shape(p).to_vec(),
        });
    }
    let clamped = tape.clamp_min(p, T::c(LOG_CLAMP))?;
    let logp = tape.log(clamped)?;
    let prod = tape.mul(q, logp)?;
    let s = tape.sum(prod)?;
    tape.mul_const(s, T::c(-1.0))
}

pub fn one_hot<T: Scalar>(n: usize, y: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[n]);
    t.data_mut()[y] = T::one();
    t
}

/// Model outputs for one query.
#[derive(Debug, Clone, Copy)]
pub struct QueryOutputs {
    /// Distribution after the support set.
    pub student: Var,
    /// Distribution after support plus continuation.
    pub teacher: Option<Var>,
    pub target: usize,
}

#[derive(Debug, Clone)]
pub struct EpisodeOutputs {
    pub n_way: usize,
    pub queries: Vec<QueryOutputs>,
}

/// Loss graph nodes; every term is already averaged over queries.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub t1: Var,
    pub t2: Option<Var>,
    pub t3: Option<Var>,
}

fn mean<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    tape.mul_const(acc, T::c(1.0 / terms.len() as f64))
}

/// `b1 CE(q, p_s) + b2 CE(sg(p_t), p_s) + b3 CE(q, p_t)`, averaged over
/// queries.
pub fn bootstrapped_loss<T: Scalar>(tape: &mut Tape<T>, outputs: &EpisodeOutputs, w: LossWeights) -> Result<LossTerms> {
    terms_with_targets(tape, outputs, w, None)
}

/// Like [`bootstrapped_loss`], but the distillation targets are the given
/// constants instead of the stopped teacher outputs. With the teacher's own
/// values this is a function whose true gradient equals the stop-gradient
/// one, which is what finite differences can check.
pub fn bootstrapped_loss_frozen<T: Scalar>(
    tape: &mut Tape<T>,
    outputs: &EpisodeOutputs,
    w: LossWeights,
    targets: &[Tensor<T>],
) -> Result<LossTerms> {
    if targets.len() != outputs.queries.len() {
        return Err(Error::Config(format!(
            "{} frozen targets for {} queries",
            targets.len(),
            outputs.queries.len()
        )));
    }
    terms_with_targets(tape, outputs, w, Some(targets))
}

fn terms_with_targets<T: Scalar>(
    tape: &mut Tape<T>,
    outputs: &EpisodeOutputs,
    w: LossWeights,
    frozen: Option<&[Tensor<T>]>,
) -> Result<LossTerms> {
    w.validate()?;
    if outputs.queries.is_empty() {
        return Err(Error::Episode("episode has no queries".into()));
    }
    let has_teacher = outputs.queries.iter().all(|q| q.teacher.is_some());
    if w.needs_teacher() && !has_teacher {
        return Err(Error::Config(format!(
            "loss weights {w} use the teacher branch but the episode has no continuation"
        )));
    }
    let mut t1 = Vec::new();
    let mut t2 = Vec::new();
    let mut t3 = Vec::new();
    for (i, q) in outputs.queries.iter().enumerate() {
        let target = tape.constant(one_hot(outputs.n_way, q.target));
        t1.push(cross_entropy(tape, target, q.student)?);
        if has_teacher {
            let teacher = q.teacher.expect("checked");
            let frozen = match frozen {
                Some(t) => tape.constant(t[i].clone()),
                None => tape.stop_gradient(teacher),
            };
            t2.push(cross_entropy(tape, frozen, q.student)?);
            t3.push(cross_entropy(tape, target, teacher)?);
        }
    }
    let t1 = mean(tape, &t1)?;
    let mut total = tape.mul_const(t1, T::c(w.beta1))?;
    let (t2, t3) = if has_teacher {
        let t2 = mean(tape, &t2)?;
        let t3 = mean(tape, &t3)?;
        let a = tape.mul_const(t2, T::c(w.beta2))?;
        total = tape.add(total, a)?;
        let b = tape.mul_const(t3, T::c(w.beta3))?;
        total = tape.add(total, b)?;
        (Some(t2), Some(t3))
    } else {
        (None, None)
    };
    Ok(LossTerms { total, t1, t2, t3 })
}

/// Forward-only numbers reported for one episode or averaged over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    pub loss: f64,
    pub t1: f64,
    pub t2: Option<f64>,
    pub t3: Option<f64>,
    pub acc_student: f64,
    pub acc_teacher: Option<f64>,
}

impl Diagnostics {
    pub fn mean(items: &[Diagnostics]) -> Diagnostics {
        let n = items.len() as f64;
        let avg = |f: &dyn Fn(&Diagnostics) -> f64| items.iter().map(f).sum::<f64>() / n;
        let avg_opt = |f: &dyn Fn(&Diagnostics) -> Option<f64>| {
            let v: Option<Vec<f64>> = items.iter().map(f).collect();
            v.map(|v| v.iter().sum::<f64>() / n)
        };
        Diagnostics {
            loss: avg(&|d| d.loss),
            t1: avg(&|d| d.t1),
            t2: avg_opt(&|d| d.t2),
            t3: avg_opt(&|d| d.t3),
            acc_student: avg(&|d| d.acc_student),
            acc_teacher: avg_opt(&|d| d.acc_teacher),
        }
    }
}

pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn accuracy<T: Scalar>(tape: &Tape<T>, outputs: &[(Var, usize)]) -> f64 {
    let hits = outputs
        .iter()
        .filter(|(p, y)| argmax(tape.value(*p).data()) == *y)
        .count();
    hits as f64 / outputs.len() as f64
}

/// Step vectors of an episode, embedded on a tape.
#[derive(Debug, Clone)]
pub struct EmbeddedEpisode {
    pub support: Vec<Var>,
    pub continuation: Vec<Var>,
    pub queries: Vec<Var>,
    pub targets: Vec<usize>,
}

pub fn embed_episode<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    p: &ModelParams<Var>,
    episode: &EncodedEpisode<T>,
) -> Result<EmbeddedEpisode> {
    let mut embed = |tokens: &[crate::episodes::StepToken<T>]| -> Result<Vec<Var>> {
        tokens
            .iter()
            .map(|tok| {
                let x = tape.leaf_shared(Arc::clone(&tok.input), false);
                config.embed(tape, p, x, tok.label)
            })
            .collect()
    };
    Ok(EmbeddedEpisode {
        support: embed(&episode.support)?,
        continuation: embed(&episode.continuation)?,
        queries: embed(&episode.queries)?,
        targets: episode.targets.clone(),
    })
}

fn query_distributions<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    p: &ModelParams<Var>,
    state: &crate::srwm::ModelState<Var>,
    queries: &[Var],
) -> Result<Vec<Var>> {
    // Every query starts from the same state; its own update is dropped.
    queries
        .iter()
        .map(|&x| {
            let (h, _) = config.step(tape, p, state, x)?;
            let logits = config.logits(tape, p, h)?;
            tape.softmax(logits)
        })
        .collect()
}

/// Runs the support set, then the student queries from the snapshot and,
/// if there is a continuation, the teacher queries after it.
pub fn rollout<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    p: &ModelParams<Var>,
    episode: &EmbeddedEpisode,
) -> Result<EpisodeOutputs> {
    if episode.support.is_empty() || episode.queries.is_empty() {
        return Err(Error::Episode("episode needs support steps and queries".into()));
    }
    let start = p.initial_state();
    let snapshot = config.advance(tape, p, &start, &episode.support)?;
    let student = query_distributions(tape, config, p, &snapshot, &episode.queries)?;
    let teacher = if episode.continuation.is_empty() {
        None
    } else {
        let cont = config.advance(tape, p, &snapshot, &episode.continuation)?;
        Some(query_distributions(tape, config, p, &cont, &episode.queries)?)
    };
    Ok(EpisodeOutputs {
        n_way: config.n_way,
        queries: student
            .iter()
            .enumerate()
            .map(|(i, &s)| QueryOutputs {
                student: s,
                teacher: teacher.as_ref().map(|t| t[i]),
                target: episode.targets[i],
            })
            .collect(),
    })
}

fn diagnostics<T: Scalar>(tape: &Tape<T>, outputs: &EpisodeOutputs, terms: &LossTerms) -> Diagnostics {
    let item = |v: Var| tape.value(v).item().to_f64().expect("finite");
    let student: Vec<_> = outputs.queries.iter().map(|q| (q.student, q.target)).collect();
    let teacher: Option<Vec<_>> = outputs
        .queries
        .iter()
        .map(|q| q.teacher.map(|t| (t, q.target)))
        .collect();
    Diagnostics {
        loss: item(terms.total),
        t1: item(terms.t1),
        t2: terms.t2.map(item),
        t3: terms.t3.map(item),
        acc_student: accuracy(tape, &student),
        acc_teacher: teacher.map(|t| accuracy(tape, &t)),
    }
}

/// Builds the full episode loss on `tape`.
pub fn episode_rollout_loss<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    p: &ModelParams<Var>,
    episode: &EncodedEpisode<T>,
    w: LossWeights,
) -> Result<(Var, Diagnostics)> {
    w.validate()?;
    if w.needs_teacher() && episode.continuation.is_empty() {
        return Err(Error::Config(format!(
            "loss weights {w} need a continuation, but the episode has none (K' = 0)"
        )));
    }
    let embedded = embed_episode(tape, config, p, episode)?;
    let outputs = rollout(tape, config, p, &embedded)?;
    let terms = bootstrapped_loss(tape, &outputs, w)?;
    Ok((terms.total, diagnostics(tape, &outputs, &terms)))
}

/// Teacher distributions of every query, or `None` without a continuation.
pub fn teacher_distributions<T: Scalar>(
    config: &ModelConfig,
    params: &crate::srwm::Params<T>,
    episode: &EncodedEpisode<T>,
) -> Result<Option<Vec<Tensor<T>>>> {
    let mut tape = Tape::new();
    let p = params.register(&mut tape, false);
    let embedded = embed_episode(&mut tape, config, &p, episode)?;
    let outputs = rollout(&mut tape, config, &p, &embedded)?;
    Ok(outputs
        .queries
        .iter()
        .map(|q| q.teacher.map(|t| tape.value(t).clone()))
        .collect())
}

/// [`episode_rollout_loss`] with the distillation targets held at `targets`.
pub fn episode_rollout_loss_frozen<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    p: &ModelParams<Var>,
    episode: &EncodedEpisode<T>,
    w: LossWeights,
    targets: &[Tensor<T>],
) -> Result<(Var, Diagnostics)> {
    let embedded = embed_episode(tape, config, p, episode)?;
    let outputs = rollout(tape, config, p, &embedded)?;
    let terms = bootstrapped_loss_frozen(tape, &outputs, w, targets)?;
    Ok((terms.total, diagnostics(tape, &outputs, &terms)))
}

/// The standard few-shot objective: support steps, then each query from the
/// resulting state, cross-entropy against its label, mean over queries.
pub fn plain_episode_loss<T: Scalar>(
    tape: &mut Tape<T>,
    config: &ModelConfig,
    p: &ModelParams<Var>,
    episode: &EncodedEpisode<T>,
) -> Result<(Var, Diagnostics)> {
    let mut state = p.initial_state();
    for tok in &episode.support {
        let x = tape.leaf_shared(Arc::clone(&tok.input), false);
        let e = config.embed(tape, p, x, tok.label)?;
        state = config.step(tape, p, &state, e)?.1;
    }
    let mut losses = Vec::with_capacity(episode.queries.len());
    let mut preds = Vec::with_capacity(episode.queries.len());
    for (tok, &y) in episode.queries.iter().zip(&episode.targets) {
        let x = tape.leaf_shared(Arc::clone(&tok.input), false);
        let e = config.embed(tape, p, x, tok.label)?;
        let (h, _) = config.step(tape, p, &state, e)?;
        let logits = config.logits(tape, p, h)?;
        let probs = tape.softmax(logits)?;
        let target = tape.constant(one_hot(config.n_way, y));
        losses.push(cross_entropy(tape, target, probs)?);
        preds.push((probs, y));
    }
    let loss = mean(tape, &losses)?;
    let value = tape.value(loss).item().to_f64().expect("finite");
    Ok((
        loss,
        Diagnostics {
            loss: value,
            t1: value,
            t2: None,
            t3: None,
            acc_student: accuracy(tape, &preds),
            acc_teacher: None,
        },
    ))
}
