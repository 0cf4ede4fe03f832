//! The SRWM layer, the block wrapping it, and the stacked sequence model.

mod config;
mod inference;
mod layer;
mod model;
mod params;

pub use config::{Activation, ModelConfig};
pub use inference::Inference;
pub use layer::{srwm_step, srwm_step_values, HeadLayout, SrwmState};
pub use params::{
    parameter_count, snapshot_state, BlockParams, LinearParams, ModelParams, ModelState, NormParams, Params, Shared,
};

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::numerics::{Tape, Tensor, Var};
    use crate::rng;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            n_way: 3,
            d_model: 8,
            heads: 2,
            d_ff: 12,
            blocks: 2,
            ..ModelConfig::default()
        }
    }

    fn random_inputs(seed: u64, n: usize, dim: usize) -> Vec<(Shared<f64>, usize)> {
        let mut r = rng::stream(seed, &[]);
        (0..n)
            .map(|_| {
                let x = Tensor::vector((0..dim).map(|_| r.gen_range(-1.0..1.0)).collect());
                (Arc::new(x), r.gen_range(0..4))
            })
            .collect()
    }

    fn forward_values(cfg: &ModelConfig, params: &ModelParams<Shared<f64>>, steps: &[(Shared<f64>, usize)]) -> Vec<Tensor<f64>> {
        let mut tape = Tape::new();
        let p = params.register(&mut tape, false);
        let s0 = p.initial_state();
        let xs: Vec<Var> = steps
            .iter()
            .map(|(x, y)| {
                let xv = tape.leaf_shared(Arc::clone(x), false);
                cfg.embed(&mut tape, &p, xv, *y).unwrap()
            })
            .collect();
        let (logits, _) = cfg.forward(&mut tape, &p, &s0, &xs).unwrap();
        logits.iter().map(|&l| tape.value(l).clone()).collect()
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let cfg = small_config();
        let a = Params::<f64>::init(&cfg, &mut rng::stream(5, &[])).unwrap();
        let b = Params::<f64>::init(&cfg, &mut rng::stream(5, &[])).unwrap();
        let c = Params::<f64>::init(&cfg, &mut rng::stream(6, &[])).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(!a.bitwise_eq(&c));
    }

    #[test]
    fn parameter_count_matches_enumeration_for_paper_dimensions() {
        let cfg = ModelConfig {
            input_dim: 64,
            n_way: 5,
            d_model: 256,
            heads: 16,
            d_ff: 2048,
            blocks: 3,
            merge_projection: true,
            ..ModelConfig::default()
        };
        let params = Params::<f32>::init(&cfg, &mut rng::stream(0, &[])).unwrap();
        assert_eq!(params.count(), parameter_count(&cfg));
        // 64*256+256 + 6*256 + 3*(1024 + 16*49*16 + 65536 + 2*256*2048 + 2048 + 256) + 512 + 1280 + 5
        assert_eq!(parameter_count(&cfg), 3_409_925);
        let plain = ModelConfig {
            merge_projection: false,
            ..cfg
        };
        assert_eq!(parameter_count(&plain), 3_409_925 - 3 * 256 * 256);
    }

    #[test]
    fn default_learning_rate_row_gives_small_sigmoid() {
        let beta = ModelConfig::default().beta_init;
        assert!(1.0 / (1.0 + (-beta).exp()) < 0.05);
    }

    #[test]
    fn invalid_config_is_rejected_at_build_time() {
        let cfg = ModelConfig {
            d_model: 10,
            heads: 4,
            ..small_config()
        };
        let err = Params::<f64>::init(&cfg, &mut rng::stream(0, &[])).unwrap_err();
        assert!(err.to_string().contains("heads"));
    }

    #[test]
    fn unknown_label_row_starts_at_zero() {
        let cfg = small_config();
        let p = Params::<f64>::init(&cfg, &mut rng::stream(1, &[])).unwrap();
        let row = &p.labels.data()[cfg.n_way * cfg.d_model..];
        assert!(row.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_head_block_equals_direct_composition() {
        let cfg = ModelConfig {
            heads: 1,
            blocks: 1,
            merge_projection: true,
            ..small_config()
        };
        let params = Params::<f64>::init(&cfg, &mut rng::stream(2, &[])).unwrap();
        let x = Tensor::vector((0..8).map(|i| (i as f64 * 0.37).sin()).collect());

        let mut tape = Tape::new();
        let p = params.register(&mut tape, false);
        let s = p.initial_state();
        let xv = tape.constant(x.clone());
        let (out, _) = cfg.block_step(&mut tape, &p.blocks[0], &s.blocks[0], xv).unwrap();
        let got = tape.value(out).clone();

        let mut t2 = Tape::new();
        let p2 = params.register(&mut t2, false);
        let b = &p2.blocks[0];
        let xv = t2.constant(x);
        let z = t2.layer_norm(xv, b.norm1.gain, b.norm1.bias, cfg.norm_eps).unwrap();
        let (y, _) = srwm_step(&mut t2, b.srwm[0], z, false).unwrap();
        let m = t2.matvec(b.merge.unwrap(), y).unwrap();
        let h = t2.add(xv, m).unwrap();
        let z2 = t2.layer_norm(h, b.norm2.gain, b.norm2.bias, cfg.norm_eps).unwrap();
        let f = t2.matvec(b.ff_in.weight, z2).unwrap();
        let f = t2.add(f, b.ff_in.bias).unwrap();
        let f = t2.relu(f).unwrap();
        let f = t2.matvec(b.ff_out.weight, f).unwrap();
        let f = t2.add(f, b.ff_out.bias).unwrap();
        let want = t2.add(h, f).unwrap();
        assert!(got.bitwise_eq(t2.value(want)));
    }

    #[test]
    fn head_count_changes_values_not_shape() {
        let x = Tensor::vector((0..8).map(|i| (i as f64 * 0.7).cos()).collect());
        let mut outs = Vec::new();
        for heads in [1, 2] {
            let cfg = ModelConfig {
                heads,
                blocks: 1,
                ..small_config()
            };
            let params = Params::<f64>::init(&cfg, &mut rng::stream(3, &[])).unwrap();
            let mut tape = Tape::new();
            let p = params.register(&mut tape, false);
            let s = p.initial_state();
            let xv = tape.constant(x.clone());
            let (out, _) = cfg.block_step(&mut tape, &p.blocks[0], &s.blocks[0], xv).unwrap();
            outs.push(tape.value(out).clone());
        }
        assert_eq!(outs[0].shape(), outs[1].shape());
        assert_ne!(outs[0], outs[1]);
    }

    #[test]
    fn zero_feedforward_leaves_residual_srwm_output() {
        let cfg = ModelConfig {
            blocks: 1,
            merge_projection: true,
            ..small_config()
        };
        let mut params = Params::<f64>::init(&cfg, &mut rng::stream(4, &[])).unwrap();
        let b = &mut params.blocks[0];
        for t in [&mut b.ff_in.weight, &mut b.ff_in.bias, &mut b.ff_out.weight, &mut b.ff_out.bias] {
            *t = Arc::new(t.zeros_like());
        }
        let x = Tensor::vector((0..8).map(|i| i as f64 / 8.0 - 0.4).collect());
        let mut tape = Tape::new();
        let p = params.register(&mut tape, false);
        let s = p.initial_state();
        let xv = tape.constant(x.clone());
        let (out, _) = cfg.block_step(&mut tape, &p.blocks[0], &s.blocks[0], xv).unwrap();

        // x + merge(concat of per-head SRWM outputs), built from value-level steps.
        let z = tape.layer_norm(xv, p.blocks[0].norm1.gain, p.blocks[0].norm1.bias, cfg.norm_eps).unwrap();
        let zs = tape.value(z).data().to_vec();
        let state = SrwmState {
            heads: params.blocks[0].srwm.clone(),
            t: 0,
        };
        let (ys, _) = srwm_step_values(&state, &[Tensor::vector(zs[..4].to_vec()), Tensor::vector(zs[4..].to_vec())], false).unwrap();
        let cat: Vec<f64> = ys.iter().flat_map(|y| y.data().to_vec()).collect();
        let merge = params.blocks[0].merge.as_ref().unwrap();
        for i in 0..8 {
            let m: f64 = (0..8).map(|j| merge.get2(i, j) * cat[j]).sum();
            assert!((tape.value(out).data()[i] - (x.data()[i] + m)).abs() < 1e-14);
        }
    }

    #[test]
    fn logits_depend_only_on_prefix() {
        let cfg = small_config();
        let params = Params::<f64>::init(&cfg, &mut rng::stream(7, &[])).unwrap();
        let steps = random_inputs(8, 6, cfg.input_dim);
        let base = forward_values(&cfg, &params, &steps);
        for t in 0..5 {
            let mut perturbed = steps.clone();
            perturbed[t + 1].0 = Arc::new(perturbed[t + 1].0.map(|v| v + 0.5));
            let out = forward_values(&cfg, &params, &perturbed);
            for s in 0..=t {
                assert!(base[s].bitwise_eq(&out[s]), "step {s} changed when step {} was perturbed", t + 1);
            }
            assert_ne!(base[t + 1], out[t + 1]);
        }
    }

    #[test]
    fn length_one_sequence_is_one_stack_application() {
        let cfg = small_config();
        let params = Params::<f64>::init(&cfg, &mut rng::stream(9, &[])).unwrap();
        let steps = random_inputs(10, 1, cfg.input_dim);
        let via_forward = forward_values(&cfg, &params, &steps);
        let mut inf = Inference::new(&cfg, &params);
        let s0 = inf.initial_state();
        let (_, logits) = inf.step(&s0, &steps[0].0, steps[0].1, true).unwrap();
        assert!(via_forward[0].bitwise_eq(&logits.unwrap()));
    }

    #[test]
    fn inference_stream_matches_taped_forward() {
        let cfg = small_config();
        let params = Params::<f64>::init(&cfg, &mut rng::stream(11, &[])).unwrap();
        let steps = random_inputs(12, 7, cfg.input_dim);
        let want = forward_values(&cfg, &params, &steps);
        let mut inf = Inference::new(&cfg, &params);
        let s0 = inf.initial_state();
        let mut got = Vec::new();
        let end = inf
            .stream(&s0, steps.iter().map(|(x, y)| (x, *y)), |_, l| got.push(l.clone()))
            .unwrap();
        assert_eq!(end.steps(), 7);
        for (a, b) in want.iter().zip(&got) {
            assert!(a.bitwise_eq(b));
        }
        assert_eq!(Inference::state_scalars(&end), Inference::state_scalars(&s0));
    }

    #[test]
    fn snapshot_branches_are_independent() {
        let cfg = small_config();
        let params = Params::<f64>::init(&cfg, &mut rng::stream(13, &[])).unwrap();
        let steps = random_inputs(14, 3, cfg.input_dim);
        let mut inf = Inference::new(&cfg, &params);
        let s0 = inf.initial_state();
        let (s1, _) = inf.step(&s0, &steps[0].0, steps[0].1, false).unwrap();
        let snap = snapshot_state(&s1);
        let frozen: Vec<Tensor<f64>> = snap.blocks.iter().flat_map(|b| b.heads.iter().map(|w| (**w).clone())).collect();

        let (a, _) = inf.step(&snap, &steps[1].0, steps[1].1, false).unwrap();
        let (b, _) = inf.step(&snap, &steps[2].0, steps[2].1, false).unwrap();
        let after: Vec<Tensor<f64>> = snap.blocks.iter().flat_map(|b| b.heads.iter().map(|w| (**w).clone())).collect();
        assert!(frozen.iter().zip(&after).all(|(x, y)| x.bitwise_eq(y)));
        assert_ne!(a, b);
    }

    #[test]
    fn weight_updates_are_rank_one_per_step() {
        let cfg = ModelConfig {
            blocks: 1,
            heads: 1,
            ..small_config()
        };
        let params = Params::<f64>::init(&cfg, &mut rng::stream(15, &[])).unwrap();
        let steps = random_inputs(16, 2, cfg.input_dim);
        let mut inf = Inference::new(&cfg, &params);
        let s0 = inf.initial_state();
        let (s1, _) = inf.step(&s0, &steps[0].0, steps[0].1, false).unwrap();
        let (w0, w1) = (&s0.blocks[0].heads[0], &s1.blocks[0].heads[0]);
        // Every 2x2 minor of a rank-one matrix vanishes.
        let d = |i: usize, j: usize| w1.get2(i, j) - w0.get2(i, j);
        for i in 0..w0.rows() {
            for k in 0..w0.rows() {
                for j in 0..w0.cols() {
                    for l in 0..w0.cols() {
                        let minor = d(i, j) * d(k, l) - d(i, l) * d(k, j);
                        assert!(minor.abs() < 1e-15);
                    }
                }
            }
        }
    }
}
