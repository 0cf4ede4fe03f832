use std::sync::Arc;

use rand::seq::{index, SliceRandom};

use super::source::TaskSource;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::rng;

/// Episode sizes: `n_way` classes, `k_shot` support and `k_extra`
/// continuation examples per class, `queries` unlabelled queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub k_extra: usize,
    pub queries: usize,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, k_extra: usize, queries: usize) -> Self {
        EpisodeSpec {
            n_way,
            k_shot,
            k_extra,
            queries,
        }
    }

    /// Most queries any one class can receive.
    pub fn queries_per_class(&self) -> usize {
        self.queries.div_ceil(self.n_way.max(1))
    }
}

#[derive(Debug, Clone)]
pub struct Example<T> {
    pub input: Arc<Tensor<T>>,
    /// Episode label in `0..n_way`.
    pub label: usize,
    pub class: usize,
    pub index: usize,
}

/// One sampled few-shot task.
#[derive(Debug, Clone)]
pub struct Episode<T> {
    pub spec: EpisodeSpec,
    pub seed: u64,
    /// `label_classes[y]` is the source class carrying label `y`.
    pub label_classes: Vec<usize>,
    pub support: Vec<Example<T>>,
    pub continuation: Vec<Example<T>>,
    pub queries: Vec<Example<T>>,
}

impl<T> Episode<T> {
    pub fn label_histogram(examples: &[Example<T>], n_way: usize) -> Vec<usize> {
        let mut h = vec![0; n_way];
        for e in examples {
            h[e.label] += 1;
        }
        h
    }

    /// The same episode with every label `y` replaced by `perm[y]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Episode<T>>
    where
        T: Clone,
    {
        let n = self.spec.n_way;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Episode(format!("{perm:?} is not a permutation of 0..{n}")));
        }
        let map = |xs: &[Example<T>]| -> Vec<Example<T>> {
            xs.iter()
                .map(|e| Example {
                    label: perm[e.label],
                    ..e.clone()
                })
                .collect()
        };
        let mut label_classes = vec![0; n];
        for (y, &c) in self.label_classes.iter().enumerate() {
            label_classes[perm[y]] = c;
        }
        Ok(Episode {
            spec: self.spec,
            seed: self.seed,
            label_classes,
            support: map(&self.support),
            continuation: map(&self.continuation),
            queries: map(&self.queries),
        })
    }
}

/// Samples an episode from `source`, fully determined by `seed`.
///
/// Classes are drawn without replacement and given labels through a fresh
/// random permutation. Queries are spread round-robin over a second random
/// label order. No example is used twice within the episode.
pub fn sample_episode<T: Scalar>(source: &TaskSource, spec: EpisodeSpec, seed: u64) -> Result<Episode<T>> {
    if spec.n_way == 0 || spec.k_shot == 0 {
        return Err(Error::Episode("n_way and k_shot must be positive".into()));
    }
    if source.num_classes() < spec.n_way {
        return Err(Error::Episode(format!(
            "{}-way episodes need {} classes, the {} pool has {}",
            spec.n_way,
            spec.n_way,
            source.split(),
            source.num_classes()
        )));
    }
    let per_class_need = spec.k_shot + spec.k_extra + spec.queries_per_class();
    let mut r = rng::stream(seed, &[]);

    let picked = index::sample(&mut r, source.num_classes(), spec.n_way);
    let mut label_classes = vec![0; spec.n_way];
    let mut labels: Vec<usize> = (0..spec.n_way).collect();
    labels.shuffle(&mut r);
    for (slot, &label) in picked.iter().zip(&labels) {
        label_classes[label] = source.classes()[slot];
    }

    let mut query_order: Vec<usize> = (0..spec.n_way).collect();
    query_order.shuffle(&mut r);
    let mut query_counts = vec![0; spec.n_way];
    for j in 0..spec.queries {
        query_counts[query_order[j % spec.n_way]] += 1;
    }

    let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
    let mut continuation = Vec::with_capacity(spec.n_way * spec.k_extra);
    let mut per_label_queries: Vec<Vec<Example<T>>> = vec![Vec::new(); spec.n_way];
    for (label, &class) in label_classes.iter().enumerate() {
        let available = source.examples_in_class(class);
        if available < per_class_need {
            return Err(Error::Episode(format!(
                "class {class} has {available} examples, episode needs {per_class_need} \
                 ({} support + {} continuation + {} query)",
                spec.k_shot,
                spec.k_extra,
                spec.queries_per_class()
            )));
        }
        let need = spec.k_shot + spec.k_extra + query_counts[label];
        let idx = index::sample(&mut r, available, need);
        for (i, ex) in idx.iter().enumerate() {
            let example = Example {
                input: Arc::new(source.example(class, ex)?.cast::<T>()),
                label,
                class,
                index: ex,
            };
            if i < spec.k_shot {
                support.push(example);
            } else if i < spec.k_shot + spec.k_extra {
                continuation.push(example);
            } else {
                per_label_queries[label].push(example);
            }
        }
    }
    support.shuffle(&mut r);
    continuation.shuffle(&mut r);

    let mut queries = Vec::with_capacity(spec.queries);
    for j in 0..spec.queries {
        let label = query_order[j % spec.n_way];
        let ex = per_label_queries[label].remove(0);
        queries.push(ex);
    }

    Ok(Episode {
        spec,
        seed,
        label_classes,
        support,
        continuation,
        queries,
    })
}
