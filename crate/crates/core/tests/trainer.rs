use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use srwm_core::episodes::{ExampleProvider, SourceKind, SyntheticClusters, TaskSource};
use srwm_core::numerics::Tensor;
use srwm_core::trainer::{Checkpoint, RunOutputs, TrainConfig, Trainer, METRICS_HEADER};
use srwm_core::{Error, Result};

fn micro(steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig::preset("micro").unwrap();
    cfg.steps = steps;
    cfg.batch_size = 2;
    cfg.eval_interval = 25;
    cfg.seed = 17;
    cfg
}

fn trainer(cfg: &TrainConfig) -> Trainer<f64> {
    let data = cfg.data.build().unwrap();
    Trainer::new(cfg.clone(), data.train, data.input_dim, data.patch_dim).unwrap()
}

fn outputs(dir: &std::path::Path) -> RunOutputs {
    RunOutputs {
        metrics: Some(dir.join("metrics.csv")),
        checkpoint_dir: Some(dir.join("checkpoints")),
    }
}

#[test]
fn fixed_seed_gives_identical_metrics_and_parameters() {
    let cfg = micro(100);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut ta = trainer(&cfg);
    let mut tb = trainer(&cfg);
    ta.run(cfg.steps, &outputs(a.path())).unwrap();
    tb.run(cfg.steps, &outputs(b.path())).unwrap();
    let ma = std::fs::read(a.path().join("metrics.csv")).unwrap();
    let mb = std::fs::read(b.path().join("metrics.csv")).unwrap();
    assert_eq!(ma, mb);
    let text = String::from_utf8(ma).unwrap();
    assert_eq!(text.lines().next(), Some(METRICS_HEADER));
    assert_eq!(text.lines().count(), 101);
    assert!(ta.params.bitwise_eq(&tb.params));
    // Checkpoints at every eval interval.
    let mut names: Vec<_> = std::fs::read_dir(a.path().join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["step-0000025.srwm", "step-0000050.srwm", "step-0000075.srwm", "step-0000100.srwm"]);
}

#[test]
fn resuming_halfway_equals_an_uninterrupted_run() {
    let cfg = micro(100);
    let straight_dir = tempfile::tempdir().unwrap();
    let mut straight = trainer(&cfg);
    straight.run(100, &outputs(straight_dir.path())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = trainer(&cfg);
    first.run(50, &outputs(dir.path())).unwrap();
    let ck = Checkpoint::<f64>::load(dir.path().join("checkpoints/step-0000050.srwm")).unwrap();
    let mut second = Trainer::resume(ck, None, cfg.data.build().unwrap().train).unwrap();
    second.run(100, &outputs(dir.path())).unwrap();

    assert!(second.params.bitwise_eq(&straight.params));
    assert_eq!(
        std::fs::read(dir.path().join("metrics.csv")).unwrap(),
        std::fs::read(straight_dir.path().join("metrics.csv")).unwrap()
    );
    assert_eq!(
        second.checkpoint().encode(),
        straight.checkpoint().encode(),
        "optimizer state must match too"
    );
}

#[test]
fn resuming_with_other_dimensions_names_the_dimension() {
    let cfg = micro(20);
    let mut t = trainer(&cfg);
    t.run(2, &RunOutputs::default()).unwrap();
    let mut other = cfg.clone();
    other.d_model = 32;
    let err = Trainer::resume(t.checkpoint(), Some(other), cfg.data.build().unwrap().train)
        .err()
        .unwrap()
        .to_string();
    assert!(err.contains("d_model") && err.contains("16") && err.contains("32"), "{err}");
}

/// Synthetic clusters that start returning NaN once poisoned.
struct Poisonable {
    inner: SyntheticClusters,
    poisoned: Arc<AtomicBool>,
}

impl ExampleProvider for Poisonable {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn examples_in_class(&self, class: usize) -> usize {
        self.inner.examples_in_class(class)
    }
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn example(&self, class: usize, index: usize) -> Result<Tensor<f64>> {
        let x = self.inner.example(class, index)?;
        Ok(if self.poisoned.load(Ordering::SeqCst) {
            x.map(|_| f64::NAN)
        } else {
            x
        })
    }
}

#[test]
fn non_finite_loss_aborts_with_last_checkpoint() {
    let cfg = micro(10);
    let flag = Arc::new(AtomicBool::new(false));
    let provider = Poisonable {
        inner: SyntheticClusters::new(20, cfg.data.dim, cfg.data.spread, cfg.data.examples_per_class, 1).unwrap(),
        poisoned: Arc::clone(&flag),
    };
    let source = TaskSource::new(SourceKind::SyntheticClusters, Arc::new(provider));
    let dim = source.input_dim();
    let mut t = Trainer::<f64>::new(cfg, source, dim, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    t.run(3, &outputs(dir.path())).unwrap();
    flag.store(true, Ordering::SeqCst);
    match t.train_step() {
        Err(Error::NonFiniteLoss { step, last_checkpoint }) => {
            assert_eq!(step, 4);
            assert_eq!(last_checkpoint.unwrap(), dir.path().join("checkpoints/step-0000003.srwm"));
        }
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
    assert_eq!(t.step, 3);
}

/// Tiny model on well-separated clusters.
fn separable() -> TrainConfig {
    let mut cfg = TrainConfig::preset("desk").unwrap();
    for (k, v) in [
        ("n_way", "3"),
        ("k_shot", "1"),
        ("blocks", "1"),
        ("d_model", "32"),
        ("heads", "2"),
        ("d_ff", "32"),
        ("batch_size", "8"),
        ("steps", "5000"),
        ("warmup", "100"),
        ("peak_lr", "3e-3"),
        ("precision", "f32"),
        ("data.dim", "8"),
        ("data.spread", "0.05"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

#[test]
fn separable_clusters_are_learned_within_5000_steps() {
    use srwm_core::harness::{evaluate, EvalSettings};
    let cfg = separable();
    let data = cfg.data.build().unwrap();
    let mut t = Trainer::<f32>::new(cfg.clone(), data.train, data.input_dim, data.patch_dim).unwrap();
    t.run(cfg.steps, &RunOutputs::default()).unwrap();
    let settings = EvalSettings {
        k_test: 1,
        episodes: 2000,
        queries: 1,
        seed: 5,
        delayed_labels: false,
        max_unroll: cfg.max_unroll,
    };
    let r = evaluate(&t.model, &t.params, &data.test, settings).unwrap();
    let ceiling = data.clusters.unwrap().bayes_ceiling(data.test.classes(), 3, 20_000, 1).unwrap();
    assert!(ceiling > 0.99, "ceiling {ceiling}");
    assert!(r.accuracy() > 0.9, "test accuracy {:.3}", r.accuracy());
}
