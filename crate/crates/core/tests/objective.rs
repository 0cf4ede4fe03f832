use srwm_core::episodes::{encode_episode, sample_episode, EncodedEpisode, TaskSource};
use srwm_core::numerics::{Tape, Tensor};
use srwm_core::objective::{episode_rollout_loss, plain_episode_loss, teacher_distributions, Diagnostics, LossWeights};
use srwm_core::rng;
use srwm_core::srwm::{ModelConfig, Params};
use srwm_core::trainer::TrainConfig;

struct Fixture {
    model: ModelConfig,
    params: Params<f64>,
    train: TaskSource,
    cfg: TrainConfig,
}

fn fixture(k_extra: usize, queries: usize) -> Fixture {
    let mut cfg = TrainConfig::preset("micro").unwrap();
    cfg.k_extra = k_extra;
    cfg.queries = queries;
    let data = cfg.data.build().unwrap();
    let model = cfg.model_config(data.input_dim, data.patch_dim);
    let params = Params::init(&model, &mut rng::stream(3, &[])).unwrap();
    Fixture {
        model,
        params,
        train: data.train,
        cfg,
    }
}

impl Fixture {
    fn episode(&self, seed: u64) -> EncodedEpisode<f64> {
        let ep = sample_episode(&self.train, self.cfg.episode_spec(), seed).unwrap();
        encode_episode(&ep, self.cfg.delayed_labels)
    }

    fn loss(&self, ep: &EncodedEpisode<f64>, w: LossWeights) -> (f64, Diagnostics, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape, true);
        let (loss, diag) = episode_rollout_loss(&mut tape, &self.model, &p, ep, w).unwrap();
        let grads = tape.backward(loss).unwrap().ordered(&p.leaves().into_iter().copied().collect::<Vec<_>>()).unwrap();
        (tape.value(loss).item(), diag, grads)
    }
}

#[test]
fn without_continuation_the_loss_is_the_plain_episode_loss() {
    let f = fixture(0, 3);
    for seed in 0..5 {
        let ep = f.episode(seed);
        let (value, diag, grads) = f.loss(&ep, LossWeights::plain());

        let mut tape = Tape::new();
        let p = f.params.register(&mut tape, true);
        let (loss, plain_diag) = plain_episode_loss(&mut tape, &f.model, &p, &ep).unwrap();
        let vars: Vec<_> = p.leaves().into_iter().copied().collect();
        let plain_grads = tape.backward(loss).unwrap().ordered(&vars).unwrap();

        assert_eq!(value.to_bits(), tape.value(loss).item().to_bits());
        assert_eq!(diag, plain_diag);
        assert!(grads.iter().zip(&plain_grads).all(|(a, b)| a.bitwise_eq(b)));
    }
}

#[test]
fn total_decomposes_into_weighted_terms() {
    let f = fixture(1, 2);
    for (seed, (b1, b2, b3)) in [(1.0, 5.0, 1.0), (0.3, 0.0, 2.0), (0.0, 1.0, 0.0), (2.0, 0.5, 0.25)]
        .into_iter()
        .enumerate()
    {
        let ep = f.episode(seed as u64);
        let (value, d, _) = f.loss(&ep, LossWeights::new(b1, b2, b3).unwrap());
        let (t2, t3) = (d.t2.unwrap(), d.t3.unwrap());
        assert!(d.t1 >= 0.0 && t2 >= 0.0 && t3 >= 0.0);
        assert!((b1 * d.t1 + b2 * t2 + b3 * t3 - d.loss).abs() < 1e-10);
        assert_eq!(value, d.loss);
    }
}

#[test]
fn raising_the_distillation_weight_leaves_terms_and_accuracies_alone() {
    let f = fixture(1, 3);
    let ep = f.episode(11);
    let runs: Vec<_> = [0.0, 1.0, 5.0]
        .into_iter()
        .map(|b2| f.loss(&ep, LossWeights::new(1.0, b2, 1.0).unwrap()))
        .collect();
    let d0 = runs[0].1;
    for (_, d, _) in &runs[1..] {
        assert_eq!((d.t1, d.t2, d.t3), (d0.t1, d0.t2, d0.t3));
        assert_eq!((d.acc_student, d.acc_teacher), (d0.acc_student, d0.acc_teacher));
    }
    // The gradient does change with the weight.
    let differs = runs[0].2.iter().zip(&runs[2].2).any(|(a, b)| !a.bitwise_eq(b));
    assert!(differs);
}

#[test]
fn distillation_without_continuation_is_a_configuration_error() {
    let f = fixture(0, 1);
    let ep = f.episode(0);
    let mut tape = Tape::new();
    let p = f.params.register(&mut tape, true);
    let err = episode_rollout_loss(&mut tape, &f.model, &p, &ep, LossWeights::new(1.0, 1.0, 0.0).unwrap()).unwrap_err();
    assert!(err.to_string().contains("continuation"), "{err}");
}

fn entropy(p: &Tensor<f64>) -> f64 {
    -p.data().iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f64>()
}

#[test]
fn untrained_loss_matches_uniform_prediction_estimate() {
    // An untrained network predicts close to uniform, so T1 and T3 are near
    // ln N and T2 is near the teacher's entropy.
    let mut cfg = TrainConfig::preset("desk").unwrap();
    cfg.k_extra = 2;
    cfg.beta2 = 1.0;
    cfg.beta3 = 1.0;
    let data = cfg.data.build().unwrap();
    let model = cfg.model_config(data.input_dim, data.patch_dim);
    let params = Params::<f64>::init(&model, &mut rng::stream(cfg.seed, &[rng::domain::INIT])).unwrap();
    let n = cfg.n_way as f64;
    let (mut loss, mut expected) = (0.0, 0.0);
    let episodes = 40;
    for s in 0..episodes {
        let ep = sample_episode(&data.train, cfg.episode_spec(), s).unwrap();
        let enc = encode_episode(&ep, cfg.delayed_labels);
        let teacher = teacher_distributions(&model, &params, &enc).unwrap().unwrap();
        let h = teacher.iter().map(entropy).sum::<f64>() / teacher.len() as f64;
        expected += cfg.beta1 * n.ln() + cfg.beta2 * h + cfg.beta3 * n.ln();
        let mut tape = Tape::new();
        let p = params.register(&mut tape, false);
        loss += episode_rollout_loss(&mut tape, &model, &p, &enc, cfg.weights()).unwrap().1.loss;
    }
    let (loss, expected) = (loss / episodes as f64, expected / episodes as f64);
    assert!((loss - expected).abs() < 0.1 * expected, "loss {loss:.4}, estimate {expected:.4}");
}
