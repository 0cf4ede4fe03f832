//! Single-head self-referential weight matrix.
//!
//! The matrix `W` has `d_out + 2*d_in + 1` rows and `d_in` columns. Its
//! rows split into the output block, the key block, the query block and a
//! single learning-rate row. Each step reads `y, k, q, beta` from `W x`,
//! retrieves values for `softmax(q)` and `softmax(k)` from the same matrix,
//! and writes back a rank-one correction:
//!
//! ```text
//! W' = W + sigmoid(beta) * (W softmax(q) - W softmax(k)) outer softmax(k)
//! ```

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Row layout of one head's weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub d_in: usize,
    pub d_out: usize,
}

impl HeadLayout {
    pub fn new(d_in: usize, d_out: usize) -> Self {
        HeadLayout { d_in, d_out }
    }

    pub fn rows(&self) -> usize {
        self.d_out + 2 * self.d_in + 1
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows(), self.d_in]
    }

    pub fn key_start(&self) -> usize {
        self.d_out
    }

    pub fn query_start(&self) -> usize {
        self.d_out + self.d_in
    }

    pub fn beta_row(&self) -> usize {
        self.d_out + 2 * self.d_in
    }

    fn from_shape(shape: &[usize]) -> Result<Self> {
        match *shape {
            [rows, d_in] if rows > 2 * d_in + 1 => Ok(HeadLayout::new(d_in, rows - 2 * d_in - 1)),
            _ => Err(Error::Config(format!(
                "SRWM matrix must be (d_out + 2*d_in + 1) x d_in with d_out >= 1, got {shape:?}"
            ))),
        }
    }
}

/// Per-head weight matrices plus the number of steps already taken.
///
/// `S` is `Var` while recording on a tape and [`Shared`](super::Shared)
/// tensors outside of one.
#[derive(Debug, Clone, PartialEq)]
pub struct SrwmState<S> {
    pub heads: Vec<S>,
    pub t: usize,
}

/// One self-modification step of a single head on the tape.
///
/// Returns the output `y` and the updated matrix.
pub fn srwm_step<T: Scalar>(tape: &mut Tape<T>, w: Var, x: Var, phi_on_input: bool) -> Result<(Var, Var)> {
    let layout = HeadLayout::from_shape(tape.shape(w))?;
    if tape.shape(x) != [layout.d_in] {
        return Err(Error::Shape {
            op: "srwm_step",
            left: tape.shape(w).to_vec(),
            right: tape.shape(x).to_vec(),
        });
    }
    let x = if phi_on_input { tape.softmax(x)? } else { x };
    let out = tape.matvec(w, x)?;
    let y = tape.slice(out, 0, layout.d_out)?;
    let k = tape.slice(out, layout.key_start(), layout.d_in)?;
    let q = tape.slice(out, layout.query_start(), layout.d_in)?;
    let beta = tape.slice(out, layout.beta_row(), 1)?;

    let phi_q = tape.softmax(q)?;
    let phi_k = tape.softmax(k)?;
    let v = tape.matvec(w, phi_q)?;
    let v_bar = tape.matvec(w, phi_k)?;
    let diff = tape.sub(v, v_bar)?;
    let rate = tape.sigmoid(beta)?;
    let scaled = tape.scale(diff, rate)?;
    let delta = tape.outer(scaled, phi_k)?;
    let w_next = tape.add(w, delta)?;
    Ok((y, w_next))
}

/// Value-level multi-head step: head `h` consumes `inputs[h]`.
pub fn srwm_step_values<T: Scalar>(
    state: &SrwmState<Arc<Tensor<T>>>,
    inputs: &[Tensor<T>],
    phi_on_input: bool,
) -> Result<(Vec<Tensor<T>>, SrwmState<Arc<Tensor<T>>>)> {
    if inputs.len() != state.heads.len() {
        return Err(Error::Config(format!(
            "{} head inputs for {} heads",
            inputs.len(),
            state.heads.len()
        )));
    }
    let mut tape = Tape::new();
    let mut outputs = Vec::with_capacity(inputs.len());
    let mut heads = Vec::with_capacity(inputs.len());
    for (w, x) in state.heads.iter().zip(inputs) {
        let wv = tape.leaf_shared(Arc::clone(w), false);
        let xv = tape.constant(x.clone());
        let (y, w_next) = srwm_step(&mut tape, wv, xv, phi_on_input)?;
        outputs.push(tape.value(y).clone());
        heads.push(tape.value_arc(w_next));
    }
    Ok((outputs, SrwmState { heads, t: state.t + 1 }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    // Straight-line evaluation with scalar arithmetic only.
    fn scalar_oracle(w: &[Vec<f64>], x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d_in = x.len();
        let rows = w.len();
        let d_out = rows - 2 * d_in - 1;
        let mv = |v: &[f64]| -> Vec<f64> {
            w.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
        };
        let softmax = |v: &[f64]| -> Vec<f64> {
            let e: Vec<f64> = v.iter().map(|a| a.exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|a| a / s).collect()
        };
        let out = mv(x);
        let y = out[..d_out].to_vec();
        let k = &out[d_out..d_out + d_in];
        let q = &out[d_out + d_in..d_out + 2 * d_in];
        let beta = out[rows - 1];
        let (pk, pq) = (softmax(k), softmax(q));
        let (v, vb) = (mv(&pq), mv(&pk));
        let rate = 1.0 / (1.0 + (-beta).exp());
        let mut next = w.to_vec();
        for i in 0..rows {
            for j in 0..d_in {
                next[i][j] += rate * (v[i] - vb[i]) * pk[j];
            }
        }
        (y, next)
    }

    #[test]
    fn matches_scalar_oracle_on_explicit_matrix() {
        // d_in = 2, d_out = 1: six rows.
        let w_rows = vec![
            vec![0.5, -0.25],
            vec![1.0, 0.0],
            vec![-0.5, 0.75],
            vec![0.2, 0.3],
            vec![-1.0, 0.4],
            vec![0.1, -2.0],
        ];
        let flat: Vec<f64> = w_rows.iter().flatten().copied().collect();
        let state = SrwmState {
            heads: vec![Arc::new(Tensor::matrix(6, 2, flat).unwrap())],
            t: 0,
        };
        let (y, next) = srwm_step_values(&state, &[Tensor::vector(vec![1.0, 0.0])], false).unwrap();
        let (oy, onext) = scalar_oracle(&w_rows, &[1.0, 0.0]);
        assert!((y[0].data()[0] - oy[0]).abs() < 1e-15);
        assert_eq!(y[0].data()[0], 0.5);
        for i in 0..6 {
            for j in 0..2 {
                assert!((next.heads[0].get2(i, j) - onext[i][j]).abs() < 1e-14);
            }
        }
        assert_eq!(next.t, 1);
    }

    #[test]
    fn equal_key_and_query_rows_leave_matrix_unchanged() {
        let mut rng = crate::rng::stream(11, &[]);
        let layout = HeadLayout::new(3, 3);
        let mut w = random_matrix(&mut rng, layout.rows(), 3);
        for c in 0..3 {
            for r in 0..3 {
                let v = w.get2(layout.key_start() + r, c);
                w.data_mut()[(layout.query_start() + r) * 3 + c] = v;
            }
        }
        let state = SrwmState { heads: vec![Arc::new(w.clone())], t: 0 };
        let x = Tensor::vector(vec![0.3, -0.7, 1.1]);
        let (_, next) = srwm_step_values(&state, &[x], false).unwrap();
        assert!(next.heads[0].bitwise_eq(&w));
    }

    #[test]
    fn update_norm_is_bounded_by_value_difference() {
        let mut rng = crate::rng::stream(12, &[]);
        for _ in 0..20 {
            let w = random_matrix(&mut rng, 13, 4);
            let x = Tensor::vector((0..4).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let mut tape = Tape::new();
            let wv = tape.constant(w.clone());
            let xv = tape.constant(x);
            let (_, next) = srwm_step(&mut tape, wv, xv, false).unwrap();
            let delta = tape.value(next).data().iter().zip(w.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();

            // Recompute v - v_bar and softmax(k) independently.
            let out: Vec<f64> = (0..13).map(|i| (0..4).map(|j| w.get2(i, j) * tape.value(xv).data()[j]).sum()).collect();
            let sm = |v: &[f64]| {
                let e: Vec<f64> = v.iter().map(|a| a.exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|a| a / s).collect::<Vec<_>>()
            };
            let (pk, pq) = (sm(&out[4..8]), sm(&out[8..12]));
            let diff: f64 = (0..13)
                .map(|i| (0..4).map(|j| w.get2(i, j) * (pq[j] - pk[j])).sum::<f64>().powi(2))
                .sum::<f64>()
                .sqrt();
            let kn = pk.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(delta <= diff * kn * (1.0 + 1e-12) + 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(Tensor::zeros(&[7, 2]));
        let x = tape.constant(Tensor::zeros(&[3]));
        assert!(srwm_step(&mut tape, w, x, false).is_err());
        let bad = tape.constant(Tensor::zeros(&[5, 2]));
        let x2 = tape.constant(Tensor::zeros(&[2]));
        assert!(srwm_step(&mut tape, bad, x2, false).is_err());
    }
}
