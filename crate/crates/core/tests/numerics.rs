use proptest::prelude::*;
use srwm_core::numerics::{finite_diff_check, Tape, Tensor, Var};
use srwm_core::Result;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

/// Inputs bounded away from zero, for ops with a kink or pole there.
fn away_from_zero(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0.1f64..2.0, any::<bool>()), len)
        .prop_map(|v| v.into_iter().map(|(x, neg)| if neg { -x } else { x }).collect())
}

/// Contracts the op output with fixed weights so every output element
/// contributes a distinct amount to the scalar.
fn contract(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let n = tape.value(y).len();
    let shape = tape.shape(y).to_vec();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + (i as f64 * 0.71).sin()).collect())?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check(params: &[Tensor<f64>], op: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    finite_diff_check(params, EPS, |tape, vars| {
        let y = op(tape, vars)?;
        contract(tape, y)
    })
    .unwrap()
    .max_rel_err
}

fn vec_t(v: Vec<f64>) -> Tensor<f64> {
    Tensor::vector(v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_binary_gradients(n in 1usize..=16, seed in values(32)) {
        let a = vec_t(seed[..n].to_vec());
        let b = vec_t(seed[16..16 + n].to_vec());
        let ps = [a, b];
        prop_assert!(check(&ps, |t, v| t.add(v[0], v[1])) < TOL);
        prop_assert!(check(&ps, |t, v| t.sub(v[0], v[1])) < TOL);
        prop_assert!(check(&ps, |t, v| t.mul(v[0], v[1])) < TOL);
    }

    #[test]
    fn scale_and_mul_const_gradients(x in values(16), s in -2.0f64..2.0, c in -3.0f64..3.0) {
        let ps = [vec_t(x), Tensor::scalar(s)];
        prop_assert!(check(&ps, |t, v| t.scale(v[0], v[1])) < TOL);
        prop_assert!(check(&ps[..1], |t, v| t.mul_const(v[0], c)) < TOL);
    }

    #[test]
    fn matvec_gradients(r in 1usize..=16, c in 1usize..=16, seed in values(16 * 16 + 16)) {
        let w = Tensor::matrix(r, c, seed[..r * c].to_vec()).unwrap();
        let x = vec_t(seed[256..256 + c].to_vec());
        prop_assert!(check(&[w, x], |t, v| t.matvec(v[0], v[1])) < TOL);
    }

    #[test]
    fn matmul_gradients(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in values(128)) {
        let a = Tensor::matrix(m, k, seed[..m * k].to_vec()).unwrap();
        let b = Tensor::matrix(k, n, seed[64..64 + k * n].to_vec()).unwrap();
        prop_assert!(check(&[a, b], |t, v| t.matmul(v[0], v[1])) < TOL);
    }

    #[test]
    fn outer_gradients(m in 1usize..=16, n in 1usize..=16, seed in values(32)) {
        let a = vec_t(seed[..m].to_vec());
        let b = vec_t(seed[16..16 + n].to_vec());
        prop_assert!(check(&[a, b], |t, v| t.outer(v[0], v[1])) < TOL);
    }

    #[test]
    fn structural_gradients(n in 2usize..=16, seed in values(48), cut in 0usize..16) {
        let start = cut % n;
        let x = vec_t(seed[..n].to_vec());
        let y = vec_t(seed[16..16 + n].to_vec());
        prop_assert!(check(&[x.clone()], |t, v| t.slice(v[0], start, n - start)) < TOL);
        prop_assert!(check(&[x.clone(), y], |t, v| t.concat(&[v[1], v[0], v[1]])) < TOL);
        let m = Tensor::matrix(3, n, seed[..3 * n].to_vec()).unwrap();
        prop_assert!(check(&[m], |t, v| t.row(v[0], start % 3)) < TOL);
        prop_assert!(check(&[x], |t, v| t.sum(v[0])) < TOL);
    }

    #[test]
    fn smooth_unary_gradients(x in values(16)) {
        let ps = [vec_t(x)];
        prop_assert!(check(&ps, |t, v| t.exp(v[0])) < TOL);
        prop_assert!(check(&ps, |t, v| t.softmax(v[0])) < TOL);
        prop_assert!(check(&ps, |t, v| t.sigmoid(v[0])) < TOL);
        prop_assert!(check(&ps, |t, v| t.softplus(v[0])) < TOL);
    }

    #[test]
    fn kinked_unary_gradients(x in away_from_zero(16)) {
        let ps = [vec_t(x.clone())];
        prop_assert!(check(&ps, |t, v| t.relu(v[0])) < TOL);
        prop_assert!(check(&ps, |t, v| t.clamp_min(v[0], 0.0)) < TOL);
        let pos = [vec_t(x.iter().map(|v| v.abs()).collect())];
        prop_assert!(check(&pos, |t, v| t.log(v[0])) < TOL);
    }

    #[test]
    fn layer_norm_gradients(n in 2usize..=16, seed in values(48)) {
        let x = vec_t(seed[..n].to_vec());
        let g = vec_t(seed[16..16 + n].to_vec());
        let b = vec_t(seed[32..32 + n].to_vec());
        prop_assert!(check(&[x, g, b], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)) < TOL);
    }

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(x in prop::collection::vec(-50.0f64..50.0, 1..=16), c in -100.0f64..100.0) {
        let mut tape = Tape::new();
        let a = tape.constant(vec_t(x.clone()));
        let b = tape.constant(vec_t(x.iter().map(|v| v + c).collect()));
        let sa = tape.softmax(a).unwrap();
        let sb = tape.softmax(b).unwrap();
        let (pa, pb) = (tape.value(sa).data(), tape.value(sb).data());
        prop_assert!((pa.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (u, v) in pa.iter().zip(pb) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn stop_gradient_blocks_the_whole_branch(x in values(8)) {
        let mut tape = Tape::new();
        let xv = tape.leaf(vec_t(x), true);
        let e = tape.exp(xv).unwrap();
        let s = tape.stop_gradient(e);
        let p = tape.mul(s, s).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        let gx = g.get(xv).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; 8]);
        prop_assert!(gx.iter().all(|v| v.to_bits() == 0));
    }
}

#[test]
fn identical_graphs_give_bitwise_identical_gradients() {
    let build = || {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::matrix(3, 4, (0..12).map(|i| (i as f64).cos()).collect()).unwrap(), true);
        let x = tape.leaf(Tensor::vector(vec![0.1, -0.4, 0.9, 0.3]), true);
        let y = tape.matvec(w, x).unwrap();
        let s = tape.softmax(y).unwrap();
        let l = tape.log(s).unwrap();
        let loss = tape.sum(l).unwrap();
        tape.backward(loss).unwrap().ordered(&[w, x]).unwrap()
    };
    let (a, b) = (build(), build());
    assert!(a.iter().zip(&b).all(|(u, v)| u.bitwise_eq(v)));
}

#[test]
fn f32_and_f64_tapes_agree_to_single_precision() {
    let data: Vec<f64> = (0..6).map(|i| (i as f64 * 0.9).sin()).collect();
    let run64 = {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::vector(data.clone()), true);
        let s = t.softmax(x).unwrap();
        let l = t.log(s).unwrap();
        let loss = t.sum(l).unwrap();
        t.backward(loss).unwrap().ordered(&[x]).unwrap().remove(0)
    };
    let run32 = {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Tensor::vector(data.iter().map(|&v| v as f32).collect()), true);
        let s = t.softmax(x).unwrap();
        let l = t.log(s).unwrap();
        let loss = t.sum(l).unwrap();
        t.backward(loss).unwrap().ordered(&[x]).unwrap().remove(0)
    };
    for (a, b) in run64.data().iter().zip(run32.data()) {
        assert!((a - *b as f64).abs() < 1e-5);
    }
}
