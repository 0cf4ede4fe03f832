use crate::episodes::{encode_episode, sample_episode};
use crate::error::Result;
use crate::numerics::{finite_diff_check, GradCheckReport, Tensor, Var};
use crate::objective::{episode_rollout_loss, episode_rollout_loss_frozen, teacher_distributions};
use crate::rng::{self, domain};
use crate::srwm::{ModelParams, Params};
use crate::trainer::TrainConfig;

/// Finite-difference check of the full episode loss over every parameter,
/// on one episode drawn from the config's training classes. Runs at f64.
///
/// The stop-gradient makes the analytic gradient differ from the derivative
/// of the loss value, so the numeric side holds the distillation targets at
/// their values under the unperturbed parameters.
pub fn gradcheck_episode(config: &TrainConfig, seed: u64, eps: f64) -> Result<(GradCheckReport, usize)> {
    config.validate()?;
    let data = config.data.build()?;
    let model = config.model_config(data.input_dim, data.patch_dim);
    let params = Params::<f64>::init(&model, &mut rng::stream(seed, &[domain::INIT]))?;
    let ep = sample_episode::<f64>(
        &data.train,
        config.episode_spec(),
        rng::derive_seed(seed, &[domain::TRAIN, 0]),
    )?;
    let enc = encode_episode(&ep, config.delayed_labels);
    let tensors = params.to_tensors();
    let count = tensors.iter().map(Tensor::len).sum();
    let weights = config.weights();
    let frozen: Option<Vec<_>> = teacher_distributions(&model, &params, &enc)?;
    let report = finite_diff_check(&tensors, eps, |tape, vars| {
        let mut it = vars.iter().copied();
        let p: ModelParams<Var> = params.map(|_, _| it.next().expect("one var per tensor"));
        let loss = match &frozen {
            Some(t) => episode_rollout_loss_frozen(tape, &model, &p, &enc, weights, t)?,
            None => episode_rollout_loss(tape, &model, &p, &enc, weights)?,
        };
        Ok(loss.0)
    })?;
    Ok((report, count))
}
