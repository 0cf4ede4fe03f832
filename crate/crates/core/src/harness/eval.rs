use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::episodes::{encode_episode, sample_episode, EncodedEpisode, EpisodeSpec, TaskSource};
use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::objective::argmax;
use crate::rng::{self, domain};
use crate::srwm::{Inference, ModelConfig, Params};
use crate::trainer::{inspect, thread_pool, Checkpoint, Precision};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalSettings {
    pub k_test: usize,
    pub episodes: usize,
    pub queries: usize,
    pub seed: u64,
    pub delayed_labels: bool,
    pub max_unroll: usize,
}

/// Query accuracy over a set of evaluation episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub k_test: usize,
    pub episodes: usize,
    pub correct: usize,
    pub total: usize,
}

impl EvalResult {
    /// Fraction of correct queries.
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }

    /// 95% Wilson score interval of the accuracy.
    pub fn ci95(&self) -> (f64, f64) {
        wilson(self.correct, self.total)
    }
}

pub fn wilson(correct: usize, total: usize) -> (f64, f64) {
    if total == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let n = total as f64;
    let p = correct as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Feeds the support set once, then each query from the post-support state.
/// Returns how many queries were classified correctly.
pub fn episode_correct<T: Scalar>(inf: &mut Inference<'_, T>, episode: &EncodedEpisode<T>) -> Result<usize> {
    let start = inf.initial_state();
    let state = inf.stream(&start, episode.support.iter().map(|s| (&s.input, s.label)), |_, _| {})?;
    let mut correct = 0;
    for (q, &y) in episode.queries.iter().zip(&episode.targets) {
        let (_, logits) = inf.step(&state, &q.input, q.label, true)?;
        if argmax(logits.expect("requested").data()) == y {
            correct += 1;
        }
    }
    Ok(correct)
}

/// Accuracy of `params` on the given episodes, without any gradient work.
pub fn evaluate_episodes<T: Scalar>(
    model: &ModelConfig,
    params: &Params<T>,
    episodes: &[EncodedEpisode<T>],
) -> Result<(usize, usize)> {
    let per: Vec<usize> = thread_pool()?.install(|| {
        episodes
            .par_iter()
            .map_init(|| Inference::new(model, params), |inf, ep| episode_correct(inf, ep))
            .collect::<Result<_>>()
    })?;
    let total = episodes.iter().map(|e| e.queries.len()).sum();
    Ok((per.iter().sum(), total))
}

/// Samples `settings.episodes` episodes with `k_test` shots and measures
/// query accuracy. Parameters are only read.
pub fn evaluate<T: Scalar>(
    model: &ModelConfig,
    params: &Params<T>,
    source: &TaskSource,
    settings: EvalSettings,
) -> Result<EvalResult> {
    let unroll = model.n_way * settings.k_test + 1;
    if unroll > settings.max_unroll {
        return Err(Error::Config(format!(
            "K_test = {} with N = {} unrolls {unroll} steps, above max_unroll {}",
            settings.k_test, model.n_way, settings.max_unroll
        )));
    }
    let spec = EpisodeSpec::new(model.n_way, settings.k_test, 0, settings.queries);
    let pool = thread_pool()?;
    let per: Vec<usize> = pool.install(|| {
        (0..settings.episodes)
            .into_par_iter()
            .map_init(
                || Inference::new(model, params),
                |inf, i| {
                    let seed = rng::derive_seed(settings.seed, &[domain::EVAL, settings.k_test as u64, i as u64]);
                    let ep = sample_episode::<T>(source, spec, seed)?;
                    episode_correct(inf, &encode_episode(&ep, settings.delayed_labels))
                },
            )
            .collect::<Result<_>>()
    })?;
    Ok(EvalResult {
        k_test: settings.k_test,
        episodes: settings.episodes,
        correct: per.iter().sum(),
        total: settings.episodes * settings.queries,
    })
}

/// A checkpoint ready for evaluation at either precision.
pub enum LoadedModel {
    F32(Arc<Checkpoint<f32>>),
    F64(Arc<Checkpoint<f64>>),
}

impl LoadedModel {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(match inspect(path)?.config.precision {
            Precision::F32 => LoadedModel::F32(Arc::new(Checkpoint::load(path)?)),
            Precision::F64 => LoadedModel::F64(Arc::new(Checkpoint::load(path)?)),
        })
    }

    pub fn config(&self) -> &crate::trainer::TrainConfig {
        match self {
            LoadedModel::F32(c) => &c.config,
            LoadedModel::F64(c) => &c.config,
        }
    }

    /// Evaluates on the test split described by the checkpoint's own config.
    pub fn evaluate(&self, k_test: usize, episodes: usize, seed: u64) -> Result<EvalResult> {
        let cfg = self.config();
        let test = cfg.data.build()?.test;
        let settings = EvalSettings {
            k_test,
            episodes,
            queries: cfg.queries,
            seed,
            delayed_labels: cfg.delayed_labels,
            max_unroll: cfg.max_unroll,
        };
        match self {
            LoadedModel::F32(c) => evaluate(&c.model_config(), &c.params, &test, settings),
            LoadedModel::F64(c) => evaluate(&c.model_config(), &c.params, &test, settings),
        }
    }
}
