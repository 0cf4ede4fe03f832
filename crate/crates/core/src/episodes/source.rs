//! Class-structured example pools for episode sampling.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fwtn::{self, RawTensor};
use crate::numerics::Tensor;
use crate::rng::{self, domain};

fn normal(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

/// Per-class example access.
pub trait ExampleProvider: Send + Sync {
    fn num_classes(&self) -> usize;
    fn examples_in_class(&self, class: usize) -> usize;
    fn input_dim(&self) -> usize;
    /// Example `index` of `class`, as a flat vector.
    fn example(&self, class: usize, index: usize) -> Result<Tensor<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    SyntheticClusters,
    ImageDirectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    All,
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::All => "all",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// A pool of classes drawn from one provider, tagged with its split.
#[derive(Clone)]
pub struct TaskSource {
    kind: SourceKind,
    provider: Arc<dyn ExampleProvider>,
    classes: Vec<usize>,
    split: Split,
}

impl fmt::Debug for TaskSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TaskSource")
            .field("kind", &self.kind)
            .field("split", &self.split)
            .field("classes", &self.classes.len())
            .finish()
    }
}

impl TaskSource {
    pub fn new(kind: SourceKind, provider: Arc<dyn ExampleProvider>) -> Self {
        let classes = (0..provider.num_classes()).collect();
        TaskSource {
            kind,
            provider,
            classes,
            split: Split::All,
        }
    }

    pub fn kind(&self) -> SourceKind {
        self.kind
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Provider-level class ids in this pool.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn input_dim(&self) -> usize {
        self.provider.input_dim()
    }

    pub fn examples_in_class(&self, class: usize) -> usize {
        self.provider.examples_in_class(class)
    }

    /// `(classes, fewest examples in any class)`.
    pub fn summary(&self) -> (usize, usize) {
        let min = self
            .classes
            .iter()
            .map(|&c| self.provider.examples_in_class(c))
            .min()
            .unwrap_or(0);
        (self.classes.len(), min)
    }

    pub fn example(&self, class: usize, index: usize) -> Result<Tensor<f64>> {
        self.provider.example(class, index)
    }

    /// Partitions the pool into disjoint train/val/test pools, in class order.
    pub fn splits(&self, train: usize, val: usize, test: usize) -> Result<(TaskSource, TaskSource, TaskSource)> {
        let need = train + val + test;
        if need > self.classes.len() {
            return Err(Error::Config(format!(
                "split {train}/{val}/{test} needs {need} classes, source has {}",
                self.classes.len()
            )));
        }
        let part = |range: std::ops::Range<usize>, split| TaskSource {
            kind: self.kind,
            provider: Arc::clone(&self.provider),
            classes: self.classes[range].to_vec(),
            split,
        };
        Ok((
            part(0..train, Split::Train),
            part(train..train + val, Split::Val),
            part(train + val..need, Split::Test),
        ))
    }

    pub fn is_disjoint_from(&self, other: &TaskSource) -> bool {
        !self.classes.iter().any(|c| other.classes.contains(c))
    }
}

/// Isotropic Gaussian classes around unit-norm random centers.
#[derive(Debug, Clone)]
pub struct SyntheticClusters {
    centers: Vec<Vec<f64>>,
    dim: usize,
    spread: f64,
    per_class: usize,
    seed: u64,
}

impl SyntheticClusters {
    pub fn new(num_classes: usize, dim: usize, spread: f64, per_class: usize, seed: u64) -> Result<Self> {
        if !(spread > 0.0) || !spread.is_finite() {
            return Err(Error::Config(format!("spread must be > 0, got {spread}")));
        }
        if num_classes == 0 || dim == 0 || per_class == 0 {
            return Err(Error::Config("synthetic source needs classes, dim and examples > 0".into()));
        }
        let centers = (0..num_classes)
            .map(|c| {
                let mut r = rng::stream(seed, &[domain::CENTERS, c as u64]);
                loop {
                    let v: Vec<f64> = (0..dim).map(|_| normal(&mut r)).collect();
                    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    if n > 1e-12 {
                        break v.into_iter().map(|a| a / n).collect();
                    }
                }
            })
            .collect();
        Ok(SyntheticClusters {
            centers,
            dim,
            spread,
            per_class,
            seed,
        })
    }

    pub fn center(&self, class: usize) -> &[f64] {
        &self.centers[class]
    }

    pub fn spread(&self) -> f64 {
        self.spread
    }

    /// Accuracy of the nearest-true-center rule on random `n_way` episodes
    /// drawn from `classes`, one query each. With equal priors and shared
    /// isotropic noise this is the Bayes-optimal classifier, so the result
    /// is the accuracy ceiling of the task.
    pub fn bayes_ceiling(&self, classes: &[usize], n_way: usize, trials: usize, seed: u64) -> Result<f64> {
        if classes.len() < n_way || n_way == 0 {
            return Err(Error::Episode(format!(
                "need {n_way} classes for the ceiling estimate, pool has {}",
                classes.len()
            )));
        }
        let mut correct = 0usize;
        for trial in 0..trials {
            let mut r = rng::stream(seed, &[domain::MONTE_CARLO, trial as u64]);
            let chosen: Vec<usize> = classes.choose_multiple(&mut r, n_way).copied().collect();
            let truth = chosen[trial % n_way];
            let x: Vec<f64> = self
                .center(truth)
                .iter()
                .map(|&c| c + self.spread * normal(&mut r))
                .collect();
            let best = chosen
                .iter()
                .map(|&c| {
                    let d: f64 = self.center(c).iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, c)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, c)| c)
                .expect("nonempty");
            correct += usize::from(best == truth);
        }
        Ok(correct as f64 / trials.max(1) as f64)
    }
}

impl ExampleProvider for SyntheticClusters {
    fn num_classes(&self) -> usize {
        self.centers.len()
    }

    fn examples_in_class(&self, _class: usize) -> usize {
        self.per_class
    }

    fn input_dim(&self) -> usize {
        self.dim
    }

    fn example(&self, class: usize, index: usize) -> Result<Tensor<f64>> {
        if class >= self.centers.len() || index >= self.per_class {
            return Err(Error::Episode(format!("no example {index} in synthetic class {class}")));
        }
        let mut r = rng::stream(self.seed, &[domain::EXAMPLE, class as u64, index as u64]);
        let data = self.centers[class]
            .iter()
            .map(|&c| c + self.spread * normal(&mut r))
            .collect();
        Ok(Tensor::vector(data))
    }
}

pub fn synthetic_cluster_source(
    num_classes: usize,
    dim: usize,
    spread: f64,
    per_class: usize,
    seed: u64,
) -> Result<(TaskSource, Arc<SyntheticClusters>)> {
    let clusters = Arc::new(SyntheticClusters::new(num_classes, dim, spread, per_class, seed)?);
    let source = TaskSource::new(SourceKind::SyntheticClusters, clusters.clone());
    Ok((source, clusters))
}

/// How image tensors are turned into input vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ImageLayout {
    /// Row-major flatten of the stored tensor.
    #[default]
    Flatten,
    /// Reorder `[H, W]` or `[H, W, C]` images into contiguous `p x p`
    /// patches, for use with a patch-embedding model.
    Patches(usize),
}

/// Images stored as FWTN tensors, listed in a manifest.
pub struct ImageDirectory {
    root: PathBuf,
    classes: Vec<(String, Vec<PathBuf>)>,
    layout: ImageLayout,
    shape: Vec<usize>,
    cache: RwLock<HashMap<(usize, usize), Tensor<f64>>>,
}

impl fmt::Debug for ImageDirectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImageDirectory")
            .field("root", &self.root)
            .field("classes", &self.classes.len())
            .field("shape", &self.shape)
            .finish()
    }
}

/// Parses `class_name<TAB>relative_path` lines, grouping by class in order
/// of first appearance.
pub fn parse_manifest(path: &Path, text: &str) -> Result<Vec<(String, Vec<PathBuf>)>> {
    let mut classes: Vec<(String, Vec<PathBuf>)> = Vec::new();
    let mut offset = 0;
    for (lineno, line) in text.split('\n').enumerate() {
        let start = offset;
        offset += line.len() + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let Some((class, file)) = line.split_once('\t') else {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: start,
                msg: format!("line {}: expected `class<TAB>path`", lineno + 1),
            });
        };
        if class.is_empty() || file.is_empty() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: start,
                msg: format!("line {}: empty class or path", lineno + 1),
            });
        }
        match classes.iter_mut().find(|(c, _)| c == class) {
            Some((_, files)) => files.push(PathBuf::from(file)),
            None => classes.push((class.to_string(), vec![PathBuf::from(file)])),
        }
    }
    Ok(classes)
}

fn to_unit_interval(path: &Path, raw: RawTensor) -> Result<(Vec<usize>, Vec<f64>)> {
    let out_of_range = |v: f64| !(0.0..=1.0).contains(&v);
    let (shape, data) = match raw {
        RawTensor::U8 { shape, data } => (shape, data.into_iter().map(|b| b as f64 / 255.0).collect()),
        RawTensor::F32(t) => (t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect()),
        RawTensor::F64(t) => (t.shape().to_vec(), t.into_data()),
    };
    if let Some(pos) = data.iter().position(|&v| out_of_range(v)) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("float pixel {pos} = {} outside [0, 1]", data[pos]),
        });
    }
    Ok((shape, data))
}

fn patchify(shape: &[usize], data: &[f64], p: usize) -> Option<Vec<f64>> {
    let (h, w, c) = match *shape {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => return None,
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return None;
    }
    let mut out = Vec::with_capacity(data.len());
    for pi in 0..h / p {
        for pj in 0..w / p {
            for i in 0..p {
                for j in 0..p {
                    let base = ((pi * p + i) * w + pj * p + j) * c;
                    out.extend_from_slice(&data[base..base + c]);
                }
            }
        }
    }
    Some(out)
}

impl ImageDirectory {
    /// Reads the manifest and the header of the first image; images are
    /// otherwise loaded on first use.
    pub fn open(root: impl AsRef<Path>, manifest: impl AsRef<Path>, layout: ImageLayout) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = manifest.as_ref();
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let classes = parse_manifest(manifest, &text)?;
        let first = classes
            .first()
            .and_then(|(_, f)| f.first())
            .ok_or_else(|| Error::Format {
                path: manifest.to_path_buf(),
                offset: 0,
                msg: "manifest lists no images".into(),
            })?;
        let first_path = root.join(first);
        let (shape, _) = to_unit_interval(&first_path, fwtn::read(&first_path)?)?;
        if let ImageLayout::Patches(p) = layout {
            if patchify(&shape, &vec![0.0; shape.iter().product()], p).is_none() {
                return Err(Error::Config(format!("cannot cut {shape:?} images into {p}x{p} patches")));
            }
        }
        Ok(ImageDirectory {
            root,
            classes,
            layout,
            shape,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn class_name(&self, class: usize) -> &str {
        &self.classes[class].0
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.shape
    }

    fn load(&self, class: usize, index: usize) -> Result<Tensor<f64>> {
        let path = self.root.join(&self.classes[class].1[index]);
        let (shape, data) = to_unit_interval(&path, fwtn::read(&path)?)?;
        if shape != self.shape {
            return Err(Error::Format {
                path,
                offset: 7,
                msg: format!("image shape {shape:?} differs from {:?}", self.shape),
            });
        }
        let data = match self.layout {
            ImageLayout::Flatten => data,
            ImageLayout::Patches(p) => patchify(&shape, &data, p).expect("checked at open"),
        };
        Ok(Tensor::vector(data))
    }
}

impl ExampleProvider for ImageDirectory {
    fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn examples_in_class(&self, class: usize) -> usize {
        self.classes.get(class).map_or(0, |(_, f)| f.len())
    }

    fn input_dim(&self) -> usize {
        self.shape.iter().product()
    }

    fn example(&self, class: usize, index: usize) -> Result<Tensor<f64>> {
        if class >= self.classes.len() || index >= self.classes[class].1.len() {
            return Err(Error::Episode(format!("no image {index} in class {class}")));
        }
        if let Some(t) = self.cache.read().expect("cache lock").get(&(class, index)) {
            return Ok(t.clone());
        }
        let t = self.load(class, index)?;
        self.cache
            .write()
            .expect("cache lock")
            .insert((class, index), t.clone());
        Ok(t)
    }
}

pub fn image_directory_source(
    root: impl AsRef<Path>,
    manifest: impl AsRef<Path>,
    layout: ImageLayout,
) -> Result<TaskSource> {
    let dir = ImageDirectory::open(root, manifest, layout)?;
    Ok(TaskSource::new(SourceKind::ImageDirectory, Arc::new(dir)))
}
